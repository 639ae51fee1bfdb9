//! Synthetic uplink arrival traces: a mix of periodic and irregular nodes
//! with jitter, loss and optional period changes.

use std::io::{self, BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::types::US_PER_SEC;

/// One received uplink: `node_addr,counter,arrival_time_us`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TraceRecord {
    pub node: u32,
    pub counter: u16,
    pub arrival_us: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSpec {
    pub nodes: usize,
    /// Seconds.
    pub duration: f64,
    pub seed: u64,
    pub periodic_fraction: f64,
    /// Candidate periods in seconds for periodic nodes.
    pub periods: Vec<f64>,
    /// Arrival delay drawn uniformly from `[0, jitter]` seconds.
    pub jitter: f64,
    /// Probability that a message never arrives.
    pub loss: f64,
    /// Mean inter-arrival time in seconds of the irregular nodes.
    pub aperiodic_mean: f64,
    /// Periodic nodes whose period switches once, midway through.
    pub changes: usize,
}

impl Default for TraceSpec {
    fn default() -> Self {
        Self {
            nodes: 200,
            duration: 24.0 * 3600.0,
            seed: 1,
            periodic_fraction: 0.56,
            periods: vec![60.0, 120.0, 180.0, 300.0, 600.0],
            jitter: 1.5,
            loss: 0.02,
            aperiodic_mean: 600.0,
            changes: 0,
        }
    }
}

impl TraceSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.periodic_fraction) {
            return Err("periodic_fraction must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.loss) {
            return Err("loss must lie in [0, 1)".into());
        }
        if !(self.duration > 0.0) || !(self.jitter >= 0.0) || !(self.aperiodic_mean > 0.0) {
            return Err("duration and aperiodic_mean must be positive, jitter non-negative".into());
        }
        if self.periods.is_empty() || self.periods.iter().any(|&p| !(p > self.jitter)) {
            return Err("periods must be non-empty and each longer than the jitter".into());
        }
        if self.changes > 0 && self.periods.len() < 2 {
            return Err("period changes need at least two candidate periods".into());
        }
        if self.changes > self.periodic_nodes() {
            return Err("more changes requested than periodic nodes".into());
        }
        Ok(())
    }

    pub fn periodic_nodes(&self) -> usize {
        (self.nodes as f64 * self.periodic_fraction).round() as usize
    }
}

/// A period change: `node` switches period with the arrival at `arrival_us`
/// being the first of the new regime.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangePoint {
    pub node: u32,
    pub arrival_us: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    /// Ordered by arrival time, then node.
    pub records: Vec<TraceRecord>,
    pub periodic: Vec<u32>,
    pub changes: Vec<ChangePoint>,
}

/// Generates a trace. Node ids are `0..nodes`; which of them are periodic
/// is a seeded shuffle.
pub fn generate(spec: &TraceSpec) -> Result<Trace, String> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ids: Vec<u32> = (0..spec.nodes as u32).collect();
    ids.shuffle(&mut rng);
    let mut periodic: Vec<u32> = ids[..spec.periodic_nodes()].to_vec();
    periodic.sort_unstable();
    let mut changing: Vec<u32> = periodic.clone();
    changing.shuffle(&mut rng);
    changing.truncate(spec.changes);
    changing.sort_unstable();

    let end = secs(spec.duration);
    let jitter = secs(spec.jitter);
    let mut records = Vec::new();
    let mut changes = Vec::new();
    for node in 0..spec.nodes as u32 {
        let mut nrng = ChaCha8Rng::seed_from_u64(
            spec.seed ^ 0x5851_F42D_4C95_7F2D_u64.wrapping_mul(node as u64 + 1),
        );
        // (arrival, first of a new period regime)
        let mut arrivals: Vec<(u64, bool)> = Vec::new();
        if periodic.binary_search(&node).is_ok() {
            let period = secs(*spec.periods.choose(&mut nrng).expect("periods non-empty"));
            let mut t = nrng.gen_range(0..period);
            let mut switch = changing.binary_search(&node).is_ok().then_some(end / 2);
            let mut p = period;
            while t < end {
                let first = switch.is_some_and(|at| t >= at);
                if first {
                    let others: Vec<u64> = spec
                        .periods
                        .iter()
                        .map(|&x| secs(x))
                        .filter(|&x| x != period)
                        .collect();
                    p = *others.choose(&mut nrng).expect("two periods checked");
                    switch = None;
                }
                arrivals.push((
                    t + if jitter > 0 {
                        nrng.gen_range(0..=jitter)
                    } else {
                        0
                    },
                    first,
                ));
                t += p;
            }
        } else {
            let exp = Exp::new(1.0 / spec.aperiodic_mean).expect("mean positive");
            let mut t = secs(exp.sample(&mut nrng));
            while t < end {
                arrivals.push((t, false));
                t += secs(exp.sample(&mut nrng)).max(1);
            }
        }
        for (counter, (t, first)) in arrivals.into_iter().enumerate() {
            // The first message of a new regime is never dropped, so the
            // change point is observable.
            if nrng.gen_bool(spec.loss) && !first {
                continue;
            }
            records.push(TraceRecord {
                node,
                counter: counter as u16,
                arrival_us: t,
            });
            if first {
                changes.push(ChangePoint {
                    node,
                    arrival_us: t,
                });
            }
        }
    }
    records.sort_by_key(|r| (r.arrival_us, r.node, r.counter));
    Ok(Trace {
        records,
        periodic,
        changes,
    })
}

fn secs(s: f64) -> u64 {
    (s * US_PER_SEC as f64).round() as u64
}

pub const TRACE_HEADER: &str = "node_addr,counter,arrival_time_us";

pub fn write_csv<W: Write>(records: &[TraceRecord], mut out: W) -> io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in records {
        writeln!(out, "{},{},{}", r.node, r.counter, r.arrival_us)?;
    }
    out.flush()
}

/// Parses a trace. The header line is optional; malformed lines are
/// skipped and counted.
pub fn read_csv<R: BufRead>(input: R) -> io::Result<(Vec<TraceRecord>, usize)> {
    let mut records = Vec::new();
    let mut skipped = 0;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line == TRACE_HEADER) {
            continue;
        }
        match parse_line(line) {
            Some(r) => records.push(r),
            None => skipped += 1,
        }
    }
    Ok((records, skipped))
}

fn parse_line(line: &str) -> Option<TraceRecord> {
    let mut it = line.split(',').map(str::trim);
    let r = TraceRecord {
        node: it.next()?.parse().ok()?,
        counter: it.next()?.parse().ok()?,
        arrival_us: it.next()?.parse().ok()?,
    };
    it.next().is_none().then_some(r)
}

pub const CHANGES_HEADER: &str = "node_addr,change_time_us";

pub fn write_changes_csv<W: Write>(changes: &[ChangePoint], mut out: W) -> io::Result<()> {
    writeln!(out, "{CHANGES_HEADER}")?;
    for c in changes {
        writeln!(out, "{},{}", c.node, c.arrival_us)?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_mix_has_56_of_100_periodic() {
        let spec = TraceSpec {
            nodes: 100,
            duration: 3600.0,
            ..TraceSpec::default()
        };
        let t = generate(&spec).unwrap();
        assert_eq!(t.periodic.len(), 56);
    }

    #[test]
    fn csv_round_trip_and_bad_lines() {
        let t = generate(&TraceSpec {
            nodes: 5,
            duration: 3600.0,
            ..TraceSpec::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_csv(&t.records, &mut buf).unwrap();
        buf.extend_from_slice(b"garbage\n1,2\n1,2,3,4\n");
        let (back, skipped) = read_csv(&buf[..]).unwrap();
        assert_eq!(back, t.records);
        assert_eq!(skipped, 3);
    }

    #[test]
    fn records_are_time_ordered_and_counters_rise_per_node() {
        let t = generate(&TraceSpec {
            nodes: 20,
            duration: 6.0 * 3600.0,
            loss: 0.3,
            changes: 3,
            ..TraceSpec::default()
        })
        .unwrap();
        assert!(t
            .records
            .windows(2)
            .all(|w| w[0].arrival_us <= w[1].arrival_us));
        for node in 0..20 {
            let cs: Vec<u16> = t
                .records
                .iter()
                .filter(|r| r.node == node)
                .map(|r| r.counter)
                .collect();
            assert!(cs.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(t.changes.len(), 3);
        for c in &t.changes {
            assert!(t
                .records
                .iter()
                .any(|r| r.node == c.node && r.arrival_us == c.arrival_us));
        }
    }

    #[test]
    fn noiseless_periodic_intervals_are_exact() {
        let t = generate(&TraceSpec {
            nodes: 10,
            duration: 3600.0,
            jitter: 0.0,
            loss: 0.0,
            periodic_fraction: 1.0,
            ..TraceSpec::default()
        })
        .unwrap();
        for node in 0..10 {
            let ts: Vec<u64> = t
                .records
                .iter()
                .filter(|r| r.node == node)
                .map(|r| r.arrival_us)
                .collect();
            let d = ts[1] - ts[0];
            assert!(ts.windows(2).all(|w| w[1] - w[0] == d));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        for spec in [
            TraceSpec {
                loss: 1.0,
                ..TraceSpec::default()
            },
            TraceSpec {
                periods: vec![],
                ..TraceSpec::default()
            },
            TraceSpec {
                changes: 500,
                ..TraceSpec::default()
            },
            TraceSpec {
                periods: vec![60.0],
                changes: 1,
                ..TraceSpec::default()
            },
        ] {
            assert!(generate(&spec).is_err());
        }
    }
}
