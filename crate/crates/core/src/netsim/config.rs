use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::gateway::GatewayConfig;
use crate::interpred::InterPredConfig;
use crate::phy::LinkModel;
use crate::rmip::RmipConfig;
use crate::types::ChannelPlan;

/// Which system the servers and gateways run.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    /// Plain LoRaWAN: each server only uses its own gateways.
    Lorawan,
    /// LoRaWAN plus the over-the-air gateway overlay.
    Ironwan,
    /// Servers relay foreign receptions to each other over an ideal wire.
    Wcs,
    /// A central oracle assigns every node to one gateway, balancing load.
    Flip,
}

impl System {
    pub const ALL: [System; 4] = [System::Lorawan, System::Ironwan, System::Wcs, System::Flip];

    pub fn name(self) -> &'static str {
        match self {
            System::Lorawan => "lorawan",
            System::Ironwan => "ironwan",
            System::Wcs => "wcs",
            System::Flip => "flip",
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for System {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        System::ALL
            .into_iter()
            .find(|sys| sys.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown system `{s}`"))
    }
}

/// Named fractions of nodes that require acknowledgements.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Load {
    Low,
    Medium,
    High,
}

impl Load {
    pub const ALL: [Load; 3] = [Load::Low, Load::Medium, Load::High];

    pub fn ack_fraction(self) -> f64 {
        match self {
            Load::Low => 0.10,
            Load::Medium => 0.50,
            Load::High => 0.90,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Load::Low => "low",
            Load::Medium => "medium",
            Load::High => "high",
        }
    }
}

impl fmt::Display for Load {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Load {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "low" => Ok(Load::Low),
            "medium" | "med" => Ok(Load::Medium),
            "high" => Ok(Load::High),
            _ => Err(format!("unknown load `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySite {
    pub x: f64,
    pub y: f64,
    pub network: u32,
}

/// A hand-placed node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSite {
    pub x: f64,
    pub y: f64,
    pub network: u32,
    pub needs_ack: bool,
}

/// Class-A node behaviour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeConfig {
    /// Seconds between new application messages.
    pub period: f64,
    pub retx_limit: u32,
    /// PHY payload of an uplink, LoRaWAN header included.
    pub uplink_len: u8,
    /// PHY payload of an acknowledgement.
    pub ack_len: u8,
    pub backoff_min: f64,
    pub backoff_max: f64,
    pub tx_power_dbm: i8,
    /// Link margin the static data-rate assignment keeps above sensitivity.
    pub adr_margin_db: f64,
    /// Half-width, in seconds, of the window in which a node accepts a
    /// downlink around each receive-window opening.
    pub rx_window_tolerance: f64,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            period: 180.0,
            retx_limit: 8,
            uplink_len: 23,
            ack_len: 13,
            backoff_min: 1.0,
            backoff_max: 3.0,
            tx_power_dbm: 14,
            adr_margin_db: 3.0,
            rx_window_tolerance: 0.1,
        }
    }
}

/// Everything one simulation run needs. Identical configs give identical
/// results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub node_count: usize,
    /// Explicit nodes; when non-empty they replace the `node_count`
    /// uniformly placed ones and fix each node's network and ack need.
    pub nodes: Vec<NodeSite>,
    pub width_m: f64,
    pub height_m: f64,
    /// Explicit gateway sites; when empty, `gateway_count` gateways are
    /// laid out on a two-row grid and dealt round-robin to the networks.
    pub gateways: Vec<GatewaySite>,
    pub gateway_count: usize,
    /// Number of independent owners, each with its own server.
    pub networks: u32,
    /// Fraction of nodes that require acknowledgements.
    pub load: f64,
    /// Seconds during which nodes generate messages.
    pub duration: f64,
    /// Extra seconds simulated after generation stops so that pending
    /// retransmissions and acknowledgements settle.
    pub drain: f64,
    pub seed: u64,
    pub system: System,
    pub node: NodeConfig,
    pub link: LinkModel,
    pub plan: ChannelPlan,
    pub gateway: GatewayConfig,
    pub rmip: RmipConfig,
    pub interpred: InterPredConfig,
    /// Keep the full event log in the run output.
    pub log_events: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            node_count: 200,
            nodes: Vec::new(),
            width_m: 2000.0,
            height_m: 2000.0,
            gateways: Vec::new(),
            gateway_count: 6,
            networks: 4,
            load: Load::Medium.ack_fraction(),
            duration: 4.0 * 3600.0,
            drain: 60.0,
            seed: 1,
            system: System::Lorawan,
            node: NodeConfig::default(),
            link: LinkModel::default(),
            plan: ChannelPlan::default(),
            gateway: GatewayConfig::default(),
            rmip: RmipConfig::default(),
            interpred: InterPredConfig::default(),
            log_events: false,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid scenario: {0}")]
pub struct ConfigError(pub String);

impl ScenarioConfig {
    /// Gateway sites, explicit or generated.
    pub fn gateway_sites(&self) -> Vec<GatewaySite> {
        if !self.gateways.is_empty() {
            return self.gateways.clone();
        }
        grid_sites(
            self.gateway_count,
            self.width_m,
            self.height_m,
            self.networks,
        )
    }

    pub fn total_nodes(&self) -> usize {
        if self.nodes.is_empty() {
            self.node_count
        } else {
            self.nodes.len()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: &str| Err(ConfigError(m.to_string()));
        if !(self.width_m > 0.0 && self.height_m > 0.0) {
            return err("area dimensions must be positive");
        }
        if self.networks == 0 || self.networks > 1 << (32 - crate::types::NodeAddr::NETWORK_SHIFT) {
            return err("networks must be between 1 and 128");
        }
        if !(0.0..=1.0).contains(&self.load) {
            return err("load must lie in [0, 1]");
        }
        if !(self.duration >= 0.0 && self.drain >= 0.0) {
            return err("duration and drain must be non-negative");
        }
        let sites = self.gateway_sites();
        if sites.is_empty() && self.total_nodes() > 0 {
            return err("at least one gateway is required");
        }
        for s in &sites {
            if s.network >= self.networks {
                return Err(ConfigError(format!(
                    "gateway network {} out of range (networks = {})",
                    s.network, self.networks
                )));
            }
            if !(s.x.is_finite() && s.y.is_finite()) {
                return err("gateway coordinates must be finite");
            }
        }
        for s in &self.nodes {
            if s.network >= self.networks {
                return Err(ConfigError(format!(
                    "node network {} out of range (networks = {})",
                    s.network, self.networks
                )));
            }
            if !(s.x.is_finite() && s.y.is_finite()) {
                return err("node coordinates must be finite");
            }
        }
        let n = &self.node;
        if !(n.period > 0.0) {
            return err("node.period must be positive");
        }
        if !(n.backoff_min >= 0.0 && n.backoff_max >= n.backoff_min) {
            return err("node backoff must satisfy 0 <= min <= max");
        }
        if n.uplink_len == 0 || n.ack_len == 0 {
            return err("frame lengths must be positive");
        }
        if !(n.rx_window_tolerance >= 0.0) {
            return err("node.rx_window_tolerance must be non-negative");
        }
        if self.plan.uplink_channels() != self.interpred.channels {
            return err("interpred.channels must equal the number of uplink channels");
        }
        for ch in 0..=self.plan.rx2_channel() {
            if self.plan.band_of(ch).is_none() {
                return Err(ConfigError(format!(
                    "channel {ch} lies outside the modelled bands"
                )));
            }
        }
        self.link.validate().map_err(ConfigError)?;
        self.gateway.validate().map_err(ConfigError)?;
        self.rmip.validate().map_err(ConfigError)?;
        self.interpred.validate().map_err(ConfigError)?;
        Ok(())
    }
}

/// `count` sites on a two-row grid over the area, networks dealt
/// round-robin.
pub fn grid_sites(count: usize, width: f64, height: f64, networks: u32) -> Vec<GatewaySite> {
    if count == 0 {
        return Vec::new();
    }
    let rows = if count == 1 { 1 } else { 2 };
    let cols = count.div_ceil(rows);
    (0..count)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            let in_row = if r + 1 == rows {
                count - r * cols
            } else {
                cols
            };
            GatewaySite {
                x: (c as f64 + 0.5) * width / in_row as f64,
                y: (r as f64 + 0.5) * height / rows as f64,
                network: i as u32 % networks.max(1),
            }
        })
        .collect()
}
