use serde::{Deserialize, Serialize};

use super::config::System;

/// Per-node outcome of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub addr: u32,
    pub network: u32,
    pub spreading_factor: u8,
    pub needs_ack: bool,
    /// SF12 could not reach any gateway of the node's network.
    pub unreachable: bool,
    pub generated: u64,
    /// Distinct messages the node's own server obtained.
    pub unique_received: u64,
    /// Messages that required an acknowledgement.
    pub confirmed: u64,
    pub acked: u64,
    pub transmissions: u64,
    pub retransmissions: u64,
}

impl NodeMetrics {
    pub fn lost(&self) -> u64 {
        self.generated - self.unique_received
    }

    /// Acknowledged over confirmed messages, if any were confirmed.
    pub fn pdr(&self) -> Option<f64> {
        (self.confirmed > 0).then(|| self.acked as f64 / self.confirmed as f64)
    }

    /// Retransmissions spent per confirmed message.
    pub fn noretx(&self) -> Option<f64> {
        (self.confirmed > 0).then(|| self.retransmissions as f64 / self.confirmed as f64)
    }
}

/// Aggregate outcome of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub system: Option<System>,
    pub seed: u64,
    pub nodes: usize,
    pub gateways: usize,
    pub networks: u32,
    pub load: f64,
    pub generated: u64,
    pub unique_received: u64,
    /// Mean unique messages per node.
    pub unique_per_node: f64,
    pub confirmed: u64,
    pub acked: u64,
    /// Mean of the per-node delivery ratios over nodes that required acks.
    pub pdr_mean: Option<f64>,
    pub pdr_min: Option<f64>,
    pub pdr_p25: Option<f64>,
    pub pdr_median: Option<f64>,
    /// Mean over ack-requiring nodes of retransmissions per confirmed message.
    pub noretx_mean: f64,
    pub uplink_transmissions: u64,
    pub retransmissions: u64,
    pub acks_band0: u64,
    pub acks_band1: u64,
    /// Overlay frames put on air, neighbour downlinks included.
    pub g2g_messages: u64,
    pub g2g_airtime_us: u64,
    pub g2g_band1_messages: u64,
    pub recovered_uplinks: u64,
    pub neighbour_acks_delivered: u64,
    pub handovers_requested: u64,
    pub g2g_starved: u64,
    pub ack_abandoned: u64,
    /// Server-to-server relays (relay-based baseline only).
    pub wcs_relays: u64,
    /// Overlay frames plus Band1 downlinks for the overlay, Band1
    /// downlinks alone for LoRaWAN and FLIP, relays for the wired baseline.
    pub overhead_messages: u64,
    pub duty_cycle_violations: u64,
    pub unreachable_nodes: u64,
    /// Largest serialised interference-predictor snapshot at run end.
    pub max_agent_snapshot_bytes: u64,
}

fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

impl RunMetrics {
    /// Fills the node-derived aggregates.
    pub fn aggregate(&mut self, nodes: &[NodeMetrics]) {
        self.nodes = nodes.len();
        self.generated = nodes.iter().map(|n| n.generated).sum();
        self.unique_received = nodes.iter().map(|n| n.unique_received).sum();
        self.unique_per_node = if nodes.is_empty() {
            0.0
        } else {
            self.unique_received as f64 / nodes.len() as f64
        };
        self.confirmed = nodes.iter().map(|n| n.confirmed).sum();
        self.acked = nodes.iter().map(|n| n.acked).sum();
        self.uplink_transmissions = nodes.iter().map(|n| n.transmissions).sum();
        self.retransmissions = nodes.iter().map(|n| n.retransmissions).sum();
        let mut pdrs: Vec<f64> = nodes.iter().filter_map(NodeMetrics::pdr).collect();
        pdrs.sort_by(f64::total_cmp);
        self.pdr_mean = (!pdrs.is_empty()).then(|| pdrs.iter().sum::<f64>() / pdrs.len() as f64);
        self.pdr_min = pdrs.first().copied();
        self.pdr_p25 = percentile(&pdrs, 0.25);
        self.pdr_median = percentile(&pdrs, 0.5);
        let retx: Vec<f64> = nodes.iter().filter_map(NodeMetrics::noretx).collect();
        self.noretx_mean = if retx.is_empty() {
            0.0
        } else {
            retx.iter().sum::<f64>() / retx.len() as f64
        };
        self.unreachable_nodes = nodes.iter().filter(|n| n.unreachable).count() as u64;
    }
}
