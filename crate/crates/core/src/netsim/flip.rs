//! Central load-balancing assignment of nodes to gateways.

/// Shannon entropy (nats) of the load shares.
pub fn load_entropy(loads: &[usize]) -> f64 {
    let total: usize = loads.iter().sum();
    if total == 0 {
        return 0.0;
    }
    loads
        .iter()
        .filter(|&&l| l > 0)
        .map(|&l| {
            let p = l as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Assigns each node to one gateway from its reachable set so that load
/// shares are as even as possible (maximum load entropy). Nodes with an
/// empty set take `fallback[node]`. Ties go to the lowest gateway index.
pub fn assign(reachable: &[Vec<usize>], fallback: &[usize], gateways: usize) -> Vec<usize> {
    let mut load = vec![0usize; gateways];
    let mut out = vec![usize::MAX; reachable.len()];
    // Most constrained nodes first.
    let mut order: Vec<usize> = (0..reachable.len()).collect();
    order.sort_by_key(|&n| (reachable[n].len(), n));
    for n in order {
        let g = if reachable[n].is_empty() {
            fallback[n]
        } else {
            *reachable[n].iter().min_by_key(|&&g| (load[g], g)).unwrap()
        };
        load[g] += 1;
        out[n] = g;
    }
    // Local search: move a node whenever that strictly narrows the gap
    // between its gateway and a lighter reachable one.
    loop {
        let mut moved = false;
        for n in 0..reachable.len() {
            let from = out[n];
            let best = reachable[n]
                .iter()
                .copied()
                .filter(|&g| load[g] + 1 < load[from])
                .min_by_key(|&g| (load[g], g));
            if let Some(to) = best {
                load[from] -= 1;
                load[to] += 1;
                out[n] = to;
                moved = true;
            }
        }
        if !moved {
            return out;
        }
    }
}
