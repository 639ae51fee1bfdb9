//! Shared domain vocabulary: simulation time, identifiers, radio parameters
//! and over-the-air frames.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Length of one scheduling slot in microseconds (0.1 s).
pub const SLOT_US: u64 = 100_000;

pub const US_PER_SEC: u64 = 1_000_000;

/// Simulation time in integer microseconds since the start of a run.
#[derive(
    Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * US_PER_SEC)
    }

    /// Rounds to the nearest microsecond; negative input clamps to zero.
    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s * US_PER_SEC as f64).round().max(0.0) as u64)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / US_PER_SEC as f64
    }

    pub const fn add_us(self, us: u64) -> Self {
        SimTime(self.0 + us)
    }

    pub const fn saturating_sub_us(self, us: u64) -> Self {
        SimTime(self.0.saturating_sub(us))
    }

    /// Microseconds elapsed since `earlier`, or 0 if `earlier` is later.
    pub const fn since(self, earlier: SimTime) -> u64 {
        self.0.saturating_sub(earlier.0)
    }

    /// Start time of the given slot.
    pub const fn of_slot(slot: u64) -> Self {
        SimTime(slot * SLOT_US)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Index of the 100 ms slot containing `t`.
pub const fn slot_of(t: SimTime) -> u64 {
    t.0 / SLOT_US
}

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(
            Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(
    /// Device address of an end node.
    NodeAddr
);
id_type!(GatewayId);

impl NodeAddr {
    /// Bits of the address below the network prefix, as in a LoRaWAN
    /// DevAddr whose top bits identify the network.
    pub const NETWORK_SHIFT: u32 = 25;

    pub fn new(network: NetworkId, index: u32) -> Self {
        debug_assert!(network.0 < 1 << (32 - Self::NETWORK_SHIFT));
        debug_assert!(index < 1 << Self::NETWORK_SHIFT);
        NodeAddr((network.0 << Self::NETWORK_SHIFT) | index)
    }

    /// Network encoded in the address prefix.
    pub fn network(self) -> NetworkId {
        NetworkId(self.0 >> Self::NETWORK_SHIFT)
    }

    pub fn index(self) -> u32 {
        self.0 & ((1 << Self::NETWORK_SHIFT) - 1)
    }
}
id_type!(
    /// Owner of a set of gateways and nodes, each with its own server.
    NetworkId
);

/// EU868 regulatory sub-band.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Band {
    /// 868.0-868.8 MHz, 1 % duty cycle, uplink and RX1.
    Band0,
    /// 869.40-869.65 MHz, 10 % duty cycle, RX2.
    Band1,
}

impl Band {
    pub fn duty_cycle_limit(self) -> f64 {
        match self {
            Band::Band0 => 0.01,
            Band::Band1 => 0.10,
        }
    }

    /// Band containing `freq_hz`, if any.
    pub fn of_frequency(freq_hz: u32) -> Option<Band> {
        match freq_hz {
            868_000_000..=868_800_000 => Some(Band::Band0),
            869_400_000..=869_650_000 => Some(Band::Band1),
            _ => None,
        }
    }

    fn code(self) -> u8 {
        match self {
            Band::Band0 => 0,
            Band::Band1 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Band> {
        match code {
            0 => Some(Band::Band0),
            1 => Some(Band::Band1),
            _ => None,
        }
    }
}

/// Radio settings of a single transmission.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadioParams {
    /// Index into the channel table.
    pub channel: u8,
    pub spreading_factor: u8,
    pub bandwidth_hz: u32,
    pub tx_power_dbm: i8,
    pub band: Band,
}

impl RadioParams {
    pub const DEFAULT_BANDWIDTH_HZ: u32 = 125_000;
}

/// Channel table shared by every radio in a scenario. The default plan has
/// the three mandatory EU868 uplink channels plus the RX2 channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelPlan {
    pub uplink_hz: Vec<u32>,
    pub rx2_hz: u32,
    pub rx2_spreading_factor: u8,
}

impl Default for ChannelPlan {
    fn default() -> Self {
        Self {
            uplink_hz: vec![868_100_000, 868_300_000, 868_500_000],
            rx2_hz: 869_525_000,
            rx2_spreading_factor: 12,
        }
    }
}

impl ChannelPlan {
    pub fn uplink_channels(&self) -> usize {
        self.uplink_hz.len()
    }

    /// Channel index of RX2, placed after the uplink channels.
    pub fn rx2_channel(&self) -> u8 {
        self.uplink_hz.len() as u8
    }

    pub fn frequency(&self, channel: u8) -> Option<u32> {
        let idx = channel as usize;
        if idx < self.uplink_hz.len() {
            Some(self.uplink_hz[idx])
        } else if idx == self.uplink_hz.len() {
            Some(self.rx2_hz)
        } else {
            None
        }
    }

    pub fn band_of(&self, channel: u8) -> Option<Band> {
        self.frequency(channel).and_then(Band::of_frequency)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameKind {
    Uplink,
    DownlinkAck,
    ReqUplink,
    RebroadcastUplink,
    ReqForwardDownlink,
    NeighbourDownlink,
}

impl FrameKind {
    pub const ALL: [FrameKind; 6] = [
        FrameKind::Uplink,
        FrameKind::DownlinkAck,
        FrameKind::ReqUplink,
        FrameKind::RebroadcastUplink,
        FrameKind::ReqForwardDownlink,
        FrameKind::NeighbourDownlink,
    ];

    /// Any of the four overlay message kinds.
    pub fn is_g2g(self) -> bool {
        !matches!(self, FrameKind::Uplink | FrameKind::DownlinkAck)
    }

    /// Overlay messages exchanged between gateways (as opposed to the
    /// neighbour downlink, which is addressed to a node).
    pub fn is_gateway_to_gateway(self) -> bool {
        matches!(
            self,
            FrameKind::ReqUplink | FrameKind::RebroadcastUplink | FrameKind::ReqForwardDownlink
        )
    }

    /// Downlinks are sent with inverted IQ: nodes hear them, gateways don't.
    pub fn is_downlink(self) -> bool {
        matches!(self, FrameKind::DownlinkAck | FrameKind::NeighbourDownlink)
    }

    pub fn code(self) -> u8 {
        match self {
            FrameKind::Uplink => 0,
            FrameKind::DownlinkAck => 1,
            FrameKind::ReqUplink => 2,
            FrameKind::RebroadcastUplink => 3,
            FrameKind::ReqForwardDownlink => 4,
            FrameKind::NeighbourDownlink => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<FrameKind> {
        FrameKind::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FrameKind::Uplink => "Uplink",
            FrameKind::DownlinkAck => "DownlinkAck",
            FrameKind::ReqUplink => "ReqUplink",
            FrameKind::RebroadcastUplink => "RebroadcastUplink",
            FrameKind::ReqForwardDownlink => "ReqForwardDownlink",
            FrameKind::NeighbourDownlink => "NeighbourDownlink",
        }
    }
}

impl fmt::Display for FrameKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FrameKind {
    type Err = FrameParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FrameKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| FrameParseError::Field("kind", s.to_owned()))
    }
}

/// Originator of a frame.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Node(NodeAddr),
    Gateway(GatewayId),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Node(n) => write!(f, "N{n}"),
            Source::Gateway(g) => write!(f, "G{g}"),
        }
    }
}

impl FromStr for Source {
    type Err = FrameParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FrameParseError::Field("source", s.to_owned());
        let (tag, rest) = s.split_at_checked(1).ok_or_else(bad)?;
        let id: u32 = rest.parse().map_err(|_| bad())?;
        match tag {
            "N" => Ok(Source::Node(NodeAddr(id))),
            "G" => Ok(Source::Gateway(GatewayId(id))),
            _ => Err(bad()),
        }
    }
}

/// Any over-the-air transmission. Payloads are opaque; only their length
/// matters to the radio model.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub kind: FrameKind,
    pub source: Source,
    /// The node this frame concerns.
    pub subject_node: NodeAddr,
    /// Wrapping application message counter; retransmissions reuse it.
    pub counter: u16,
    pub payload_len: u8,
    pub radio: RadioParams,
    pub needs_ack: bool,
    pub tx_start: SimTime,
    /// Time on air in microseconds.
    pub airtime: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameParseError {
    #[error("expected {expected} fields, found {found}")]
    FieldCount { expected: usize, found: usize },
    #[error("invalid {0} field: {1:?}")]
    Field(&'static str, String),
    #[error("frame encoding truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
}

impl Frame {
    /// Size of the binary encoding produced by [`Frame::encode`].
    pub const ENCODED_LEN: usize = 38;

    const TEXT_FIELDS: usize = 13;

    pub fn tx_end(&self) -> SimTime {
        self.tx_start.add_us(self.airtime)
    }

    /// Appends the fixed-size big-endian binary form of this frame.
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.kind.code());
        match self.source {
            Source::Node(n) => {
                out.push(0);
                out.extend_from_slice(&n.0.to_be_bytes());
            }
            Source::Gateway(g) => {
                out.push(1);
                out.extend_from_slice(&g.0.to_be_bytes());
            }
        }
        out.extend_from_slice(&self.subject_node.0.to_be_bytes());
        out.extend_from_slice(&self.counter.to_be_bytes());
        out.push(self.payload_len);
        out.push(self.radio.channel);
        out.push(self.radio.spreading_factor);
        out.extend_from_slice(&self.radio.bandwidth_hz.to_be_bytes());
        out.push(self.radio.tx_power_dbm as u8);
        out.push(self.radio.band.code());
        out.push(self.needs_ack as u8);
        out.extend_from_slice(&self.tx_start.as_micros().to_be_bytes());
        out.extend_from_slice(&self.airtime.to_be_bytes());
    }

    /// Parses the binary form written by [`Frame::encode`].
    pub fn decode(buf: &[u8]) -> Result<Frame, FrameParseError> {
        if buf.len() < Self::ENCODED_LEN {
            return Err(FrameParseError::Truncated {
                need: Self::ENCODED_LEN,
                have: buf.len(),
            });
        }
        let u32_at = |i: usize| u32::from_be_bytes(buf[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_be_bytes(buf[i..i + 8].try_into().unwrap());
        let kind = FrameKind::from_code(buf[0])
            .ok_or_else(|| FrameParseError::Field("kind", buf[0].to_string()))?;
        let source = match buf[1] {
            0 => Source::Node(NodeAddr(u32_at(2))),
            1 => Source::Gateway(GatewayId(u32_at(2))),
            t => return Err(FrameParseError::Field("source", t.to_string())),
        };
        let band = Band::from_code(buf[20])
            .ok_or_else(|| FrameParseError::Field("band", buf[20].to_string()))?;
        let needs_ack = match buf[21] {
            0 => false,
            1 => true,
            v => return Err(FrameParseError::Field("needs_ack", v.to_string())),
        };
        Ok(Frame {
            kind,
            source,
            subject_node: NodeAddr(u32_at(6)),
            counter: u16::from_be_bytes([buf[10], buf[11]]),
            payload_len: buf[12],
            radio: RadioParams {
                channel: buf[13],
                spreading_factor: buf[14],
                bandwidth_hz: u32_at(15),
                tx_power_dbm: buf[19] as i8,
                band,
            },
            needs_ack,
            tx_start: SimTime::from_micros(u64_at(22)),
            airtime: u64_at(30),
        })
    }
}

/// Canonical one-line log form: fields comma-separated in declaration
/// order (radio parameters flattened), times in microseconds.
impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{},{},{:?},{},{},{}",
            self.kind,
            self.source,
            self.subject_node,
            self.counter,
            self.payload_len,
            self.radio.channel,
            self.radio.spreading_factor,
            self.radio.bandwidth_hz,
            self.radio.tx_power_dbm,
            self.radio.band,
            self.needs_ack as u8,
            self.tx_start,
            self.airtime
        )
    }
}

impl FromStr for Frame {
    type Err = FrameParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = s.trim().split(',').collect();
        if fields.len() != Self::TEXT_FIELDS {
            return Err(FrameParseError::FieldCount {
                expected: Self::TEXT_FIELDS,
                found: fields.len(),
            });
        }
        fn num<T: FromStr>(name: &'static str, v: &str) -> Result<T, FrameParseError> {
            v.parse()
                .map_err(|_| FrameParseError::Field(name, v.to_owned()))
        }
        let band = match fields[9] {
            "Band0" => Band::Band0,
            "Band1" => Band::Band1,
            other => return Err(FrameParseError::Field("band", other.to_owned())),
        };
        let needs_ack = match fields[10] {
            "0" => false,
            "1" => true,
            other => return Err(FrameParseError::Field("needs_ack", other.to_owned())),
        };
        Ok(Frame {
            kind: fields[0].parse()?,
            source: fields[1].parse()?,
            subject_node: NodeAddr(num("subject_node", fields[2])?),
            counter: num("counter", fields[3])?,
            payload_len: num("payload_len", fields[4])?,
            radio: RadioParams {
                channel: num("channel", fields[5])?,
                spreading_factor: num("spreading_factor", fields[6])?,
                bandwidth_hz: num("bandwidth", fields[7])?,
                tx_power_dbm: num("tx_power", fields[8])?,
                band,
            },
            needs_ack,
            tx_start: SimTime::from_micros(num("tx_start", fields[11])?),
            airtime: num("airtime", fields[12])?,
        })
    }
}

/// Forward modular distance from `from` to `to` on the 16-bit counter ring.
pub fn counter_gap(from: u16, to: u16) -> u16 {
    to.wrapping_sub(from)
}

/// True when `candidate` is strictly newer than `reference` (within half
/// the counter ring).
pub fn counter_is_newer(candidate: u16, reference: u16) -> bool {
    let gap = counter_gap(reference, candidate);
    gap != 0 && gap < 0x8000
}
