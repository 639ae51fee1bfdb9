use std::collections::BTreeMap;

use ironwan_core::eval::trace::{generate, TraceRecord, TraceSpec};
use ironwan_core::rmip::{RmipConfig, RmipEvent, RmipNodeState};
use ironwan_core::{NodeAddr, SimTime};

fn by_node(records: &[TraceRecord]) -> BTreeMap<u32, Vec<TraceRecord>> {
    let mut m: BTreeMap<u32, Vec<TraceRecord>> = BTreeMap::new();
    for r in records {
        m.entry(r.node).or_default().push(*r);
    }
    m
}

fn replay(records: &[TraceRecord], cfg: &RmipConfig) -> (RmipNodeState, Vec<RmipEvent>) {
    let mut st = RmipNodeState::new(NodeAddr(records[0].node));
    let mut events = Vec::new();
    for r in records {
        events.extend(st.observe(r.counter, SimTime::from_micros(r.arrival_us), cfg));
    }
    (st, events)
}

#[test]
fn noiseless_periodic_nodes_are_learned_exactly() {
    let spec = TraceSpec {
        nodes: 30,
        duration: 6.0 * 3600.0,
        periodic_fraction: 1.0,
        jitter: 0.0,
        loss: 0.0,
        ..TraceSpec::default()
    };
    let t = generate(&spec).unwrap();
    for (node, recs) in by_node(&t.records) {
        let period = (recs[1].arrival_us - recs[0].arrival_us) as f64 / 1e6;
        assert!(spec.periods.contains(&period), "node {node}");
        let (st, events) = replay(&recs, &RmipConfig::default());
        assert_eq!(st.delta_t(), Some(period), "node {node}");
        assert!(!events
            .iter()
            .any(|e| matches!(e, RmipEvent::ChangeDetected { .. })));
    }
}

#[test]
fn heavy_loss_still_converges_through_gap_filling() {
    let spec = TraceSpec {
        nodes: 1,
        duration: 12.0 * 3600.0,
        periodic_fraction: 1.0,
        periods: vec![120.0],
        jitter: 0.0,
        loss: 0.5,
        ..TraceSpec::default()
    };
    let t = generate(&spec).unwrap();
    let recs = &t.records;
    // Half the messages are gone, so counter gaps must occur.
    assert!(recs.windows(2).any(|w| w[1].counter - w[0].counter > 1));
    let (st, events) = replay(recs, &RmipConfig::default());
    assert_eq!(st.delta_t(), Some(120.0));
    assert!(!events
        .iter()
        .any(|e| matches!(e, RmipEvent::ChangeDetected { .. })));
    // The anchor sits on the node's arrival grid.
    let phase = recs[0].arrival_us - recs[0].counter as u64 * 120_000_000;
    assert_eq!((st.anchor().as_micros() - phase) % 120_000_000, 0);
    let last = recs[recs.len() - 1].arrival_us;
    assert_eq!(
        st.expected_next().map(|t| t.as_micros()),
        Some(last + 120_000_000)
    );
}
