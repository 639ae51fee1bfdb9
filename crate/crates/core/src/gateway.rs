//! The overlay gateway: manager fan-out of received frames, a per-node
//! cache, missing-uplink recovery and downlink handover between gateways
//! of different owners.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interpred::{InterPredAgent, InterPredConfig};
use crate::phy::{compute_airtime, DutyCycleTracker, Reservation};
use crate::rmip::{MissingReport, RmipConfig, RmipEvent, RmipNodeState};
use crate::types::{
    counter_is_newer, Band, ChannelPlan, Frame, FrameKind, GatewayId, NetworkId, NodeAddr,
    RadioParams, SimTime, Source, SLOT_US, US_PER_SEC,
};

/// Proprietary MHDR values (MType 0b111) tag overlay messages, so stock
/// LoRaWAN gateways and servers ignore them.
const TAG_REQ_UPLINK: u8 = 0xE1;
const TAG_REBROADCAST: u8 = 0xE2;
const TAG_REQ_FORWARD: u8 = 0xE3;
const TAG_NEIGHBOUR_DL: u8 = 0xE4;

/// Wire forms of the overlay messages.
#[derive(Clone, Debug, PartialEq)]
pub enum G2gMessage {
    ReqUplink {
        node: NodeAddr,
        last_counter: u16,
    },
    /// The cached uplink, verbatim.
    RebroadcastUplink {
        original: Frame,
    },
    ReqForwardDownlink {
        downlink: Frame,
        target: NodeAddr,
        rx1: SimTime,
        rx2: SimTime,
    },
    NeighbourDownlink {
        downlink: Frame,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("empty message")]
    Empty,
    #[error("unknown tag {0:#04x}")]
    Tag(u8),
    #[error("message truncated")]
    Truncated,
    #[error("trailing bytes")]
    Trailing,
    #[error("embedded frame: {0}")]
    Frame(String),
}

impl G2gMessage {
    pub fn kind(&self) -> FrameKind {
        match self {
            G2gMessage::ReqUplink { .. } => FrameKind::ReqUplink,
            G2gMessage::RebroadcastUplink { .. } => FrameKind::RebroadcastUplink,
            G2gMessage::ReqForwardDownlink { .. } => FrameKind::ReqForwardDownlink,
            G2gMessage::NeighbourDownlink { .. } => FrameKind::NeighbourDownlink,
        }
    }

    pub fn subject(&self) -> (NodeAddr, u16) {
        match self {
            G2gMessage::ReqUplink { node, last_counter } => (*node, *last_counter),
            G2gMessage::RebroadcastUplink { original } => (original.subject_node, original.counter),
            G2gMessage::ReqForwardDownlink {
                downlink, target, ..
            } => (*target, downlink.counter),
            G2gMessage::NeighbourDownlink { downlink } => (downlink.subject_node, downlink.counter),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        match self {
            G2gMessage::ReqUplink { node, last_counter } => {
                out.push(TAG_REQ_UPLINK);
                out.extend_from_slice(&node.0.to_be_bytes());
                out.extend_from_slice(&last_counter.to_be_bytes());
            }
            G2gMessage::RebroadcastUplink { original } => {
                out.push(TAG_REBROADCAST);
                original.encode(&mut out);
            }
            G2gMessage::ReqForwardDownlink {
                downlink,
                target,
                rx1,
                rx2,
            } => {
                out.push(TAG_REQ_FORWARD);
                downlink.encode(&mut out);
                out.extend_from_slice(&target.0.to_be_bytes());
                out.extend_from_slice(&rx1.as_micros().to_be_bytes());
                out.extend_from_slice(&rx2.as_micros().to_be_bytes());
            }
            G2gMessage::NeighbourDownlink { downlink } => {
                out.push(TAG_NEIGHBOUR_DL);
                downlink.encode(&mut out);
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let (&tag, rest) = buf.split_first().ok_or(WireError::Empty)?;
        let frame = |b: &[u8]| Frame::decode(b).map_err(|e| WireError::Frame(e.to_string()));
        let exact = |b: &[u8], len: usize| match b.len().cmp(&len) {
            std::cmp::Ordering::Less => Err(WireError::Truncated),
            std::cmp::Ordering::Greater => Err(WireError::Trailing),
            std::cmp::Ordering::Equal => Ok(()),
        };
        let fl = Frame::ENCODED_LEN;
        match tag {
            TAG_REQ_UPLINK => {
                exact(rest, 6)?;
                Ok(G2gMessage::ReqUplink {
                    node: NodeAddr(u32::from_be_bytes(rest[0..4].try_into().unwrap())),
                    last_counter: u16::from_be_bytes([rest[4], rest[5]]),
                })
            }
            TAG_REBROADCAST => {
                exact(rest, fl)?;
                Ok(G2gMessage::RebroadcastUplink {
                    original: frame(rest)?,
                })
            }
            TAG_REQ_FORWARD => {
                exact(rest, fl + 20)?;
                let t = &rest[fl..];
                Ok(G2gMessage::ReqForwardDownlink {
                    downlink: frame(rest)?,
                    target: NodeAddr(u32::from_be_bytes(t[0..4].try_into().unwrap())),
                    rx1: SimTime::from_micros(u64::from_be_bytes(t[4..12].try_into().unwrap())),
                    rx2: SimTime::from_micros(u64::from_be_bytes(t[12..20].try_into().unwrap())),
                })
            }
            TAG_NEIGHBOUR_DL => {
                exact(rest, fl)?;
                Ok(G2gMessage::NeighbourDownlink {
                    downlink: frame(rest)?,
                })
            }
            other => Err(WireError::Tag(other)),
        }
    }

    /// Bytes this message occupies on air. A neighbour downlink is sent to
    /// the node as the plain downlink it carries.
    pub fn air_len(&self) -> usize {
        match self {
            G2gMessage::NeighbourDownlink { downlink } => downlink.payload_len as usize,
            _ => self.encode().len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    /// Seconds a cached uplink is kept.
    pub cache_ttl: f64,
    /// Slots an overlay message may wait for a grant before it is dropped.
    pub g2g_retry_limit: u32,
    pub g2g_spreading_factor: u8,
    pub g2g_tx_power_dbm: i8,
    /// Max age, in seconds, of a cached uplink for answering a handover.
    pub handover_freshness: f64,
    pub rx1_delay: f64,
    pub rx2_delay: f64,
    pub rx1_tx_power_dbm: i8,
    pub rx2_tx_power_dbm: i8,
    /// Share of the Band0 budget that acknowledgements may not use, kept
    /// free for overlay traffic.
    pub g2g_reserve_fraction: f64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            cache_ttl: 300.0,
            g2g_retry_limit: 10,
            g2g_spreading_factor: 8,
            g2g_tx_power_dbm: 14,
            handover_freshness: 2.0,
            rx1_delay: 1.0,
            rx2_delay: 2.0,
            rx1_tx_power_dbm: 14,
            rx2_tx_power_dbm: 27,
            g2g_reserve_fraction: 0.0,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.cache_ttl > 0.0) {
            return Err("gateway.cache_ttl must be positive".into());
        }
        if !(7..=12).contains(&self.g2g_spreading_factor) {
            return Err("gateway.g2g_spreading_factor must be in 7..=12".into());
        }
        if !(0.0..1.0).contains(&self.g2g_reserve_fraction) {
            return Err("gateway.g2g_reserve_fraction must lie in [0, 1)".into());
        }
        if !(self.rx1_delay > 0.0 && self.rx2_delay > self.rx1_delay) {
            return Err("gateway receive-window delays must satisfy 0 < rx1 < rx2".into());
        }
        Ok(())
    }

    fn us(s: f64) -> u64 {
        (s * US_PER_SEC as f64).round() as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub node: NodeAddr,
    pub counter: u16,
    pub frame: Frame,
    pub received_at: SimTime,
    pub rx1_deadline: SimTime,
    pub rx2_deadline: SimTime,
}

/// What the manager did with a received frame.
#[derive(Clone, Debug, PartialEq)]
pub enum Effect {
    ForwardToServer {
        frame: Frame,
        late: bool,
    },
    CacheStore {
        node: NodeAddr,
        counter: u16,
    },
    RmipObserve {
        node: NodeAddr,
        counter: u16,
        events: Vec<RmipEvent>,
    },
    InterPredIngest {
        channel: u8,
        airtime: u64,
    },
    G2gHandle {
        kind: FrameKind,
        outcome: G2gOutcome,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum G2gOutcome {
    Queued,
    /// A matching message of ours was cancelled because another gateway
    /// already sent it.
    Suppressed,
    NeighbourDownlinkScheduled {
        at: SimTime,
    },
    Ignored(&'static str),
    Malformed,
}

/// A frame the gateway has committed to put on air.
#[derive(Clone, Debug, PartialEq)]
pub struct Transmission {
    pub frame: Frame,
    pub message: Option<G2gMessage>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GatewayCounters {
    pub uplinks_received: u64,
    pub g2g_received: u64,
    pub g2g_malformed: u64,
    pub missing_reports: u64,
    pub req_uplink_sent: u64,
    pub rebroadcast_sent: u64,
    pub req_forward_sent: u64,
    pub neighbour_downlink_sent: u64,
    pub g2g_starved: u64,
    pub g2g_suppressed: u64,
    /// Slot attempts the interference predictor declined.
    pub g2g_declined: u64,
    /// Grants too late for a handover deadline.
    pub g2g_late: u64,
    pub g2g_radio_busy: u64,
    pub g2g_duty_blocked: u64,
    pub ack_abandoned: u64,
    pub handover_requested: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub g2g_airtime_us: u64,
}

impl GatewayCounters {
    pub fn g2g_sent(&self) -> u64 {
        self.req_uplink_sent
            + self.rebroadcast_sent
            + self.req_forward_sent
            + self.neighbour_downlink_sent
    }
}

/// A manager decision worth recording in the event log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GatewayNote {
    pub at_us: u64,
    pub what: &'static str,
    pub node: u32,
    pub counter: u16,
}

#[derive(Clone, Debug)]
struct PendingG2g {
    message: G2gMessage,
    priority: u8,
    seq: u64,
    attempts: u32,
}

/// One overlay gateway. Single-threaded; the engine owns it.
#[derive(Debug)]
pub struct GatewayRuntime {
    id: GatewayId,
    network: NetworkId,
    cfg: GatewayConfig,
    plan: ChannelPlan,
    overlay: bool,
    rmip_cfg: RmipConfig,
    cache: HashMap<NodeAddr, CacheEntry>,
    rmip: HashMap<NodeAddr, RmipNodeState>,
    rmip_due: BinaryHeap<Reverse<(SimTime, NodeAddr)>>,
    agent: InterPredAgent,
    band0: DutyCycleTracker,
    /// Band0 share available to acknowledgements.
    band0_acks: DutyCycleTracker,
    band1: DutyCycleTracker,
    /// Scheduled and recent transmissions as (start, end), sorted.
    busy: Vec<(u64, u64)>,
    queue: Vec<PendingG2g>,
    seq: u64,
    outbox: Vec<Transmission>,
    /// Own-network uplinks recovered from a rebroadcast, awaiting forwarding.
    recovered: Vec<Frame>,
    counters: GatewayCounters,
    notes: Option<Vec<GatewayNote>>,
    last_evict: SimTime,
}

impl GatewayRuntime {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: GatewayId,
        network: NetworkId,
        cfg: GatewayConfig,
        plan: ChannelPlan,
        rmip_cfg: RmipConfig,
        interpred_cfg: InterPredConfig,
        overlay: bool,
        seed: u64,
    ) -> Self {
        let reserve = if overlay {
            cfg.g2g_reserve_fraction
        } else {
            0.0
        };
        Self {
            id,
            network,
            plan,
            overlay,
            rmip_cfg,
            cache: HashMap::new(),
            rmip: HashMap::new(),
            rmip_due: BinaryHeap::new(),
            agent: InterPredAgent::new(interpred_cfg, seed),
            band0: DutyCycleTracker::new(Band::Band0),
            band0_acks: DutyCycleTracker::with_limit(
                Band::Band0,
                Band::Band0.duty_cycle_limit() * (1.0 - reserve),
            ),
            band1: DutyCycleTracker::new(Band::Band1),
            busy: Vec::new(),
            queue: Vec::new(),
            seq: 0,
            outbox: Vec::new(),
            recovered: Vec::new(),
            counters: GatewayCounters::default(),
            notes: None,
            last_evict: SimTime::ZERO,
            cfg,
        }
    }

    pub fn id(&self) -> GatewayId {
        self.id
    }

    pub fn network(&self) -> NetworkId {
        self.network
    }

    pub fn counters(&self) -> &GatewayCounters {
        &self.counters
    }

    pub fn agent(&self) -> &InterPredAgent {
        &self.agent
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    pub fn cached(&self, node: NodeAddr) -> Option<&CacheEntry> {
        self.cache.get(&node)
    }

    pub fn rmip_state(&self, node: NodeAddr) -> Option<&RmipNodeState> {
        self.rmip.get(&node)
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn enable_notes(&mut self) {
        self.notes.get_or_insert_with(Vec::new);
    }

    pub fn take_notes(&mut self) -> Vec<GatewayNote> {
        self.notes.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Transmissions committed since the last call.
    pub fn take_outbox(&mut self) -> Vec<Transmission> {
        std::mem::take(&mut self.outbox)
    }

    fn note(&mut self, now: SimTime, what: &'static str, node: NodeAddr, counter: u16) {
        if let Some(n) = self.notes.as_mut() {
            n.push(GatewayNote {
                at_us: now.as_micros(),
                what,
                node: node.0,
                counter,
            });
        }
    }

    fn owns(&self, node: NodeAddr) -> bool {
        node.network() == self.network
    }

    /// True if the radio transmits at any point in `[start, end)`.
    pub fn transmitting_during(&self, start: SimTime, end: SimTime) -> bool {
        let (s, e) = (start.as_micros(), end.as_micros());
        self.busy.iter().any(|&(bs, be)| bs < e && be > s)
    }

    fn radio_free(&self, start: u64, airtime: u64) -> bool {
        !self.transmitting_during(
            SimTime::from_micros(start),
            SimTime::from_micros(start + airtime),
        )
    }

    fn occupy(&mut self, start: u64, airtime: u64) {
        let pos = self.busy.partition_point(|&(s, _)| s <= start);
        self.busy.insert(pos, (start, start + airtime));
    }

    /// Reserves radio time and duty cycle for a downlink to a node. Acks
    /// on Band0 must also fit the share not reserved for overlay traffic.
    pub fn try_downlink(&mut self, frame: &Frame) -> bool {
        let start = frame.tx_start;
        let s = start.as_micros();
        if !self.radio_free(s, frame.airtime) {
            return false;
        }
        let ok = match frame.radio.band {
            Band::Band0 => {
                self.band0.can_reserve(frame.airtime, start)
                    && self.band0_acks.can_reserve(frame.airtime, start)
            }
            Band::Band1 => self.band1.can_reserve(frame.airtime, start),
        };
        if !ok {
            return false;
        }
        match frame.radio.band {
            Band::Band0 => {
                self.band0.try_reserve(frame.airtime, start);
                self.band0_acks.try_reserve(frame.airtime, start);
            }
            Band::Band1 => {
                self.band1.try_reserve(frame.airtime, start);
            }
        }
        self.occupy(s, frame.airtime);
        true
    }

    /// Reserves radio and the full Band0 budget for an overlay frame.
    fn try_g2g(&mut self, start: SimTime, airtime: u64) -> bool {
        let s = start.as_micros();
        if !self.radio_free(s, airtime)
            || self.band0.try_reserve(airtime, start) != Reservation::Accept
        {
            return false;
        }
        self.occupy(s, airtime);
        true
    }

    /// Manager fan-out for a frame this gateway decoded. `payload` carries
    /// the raw bytes of overlay messages.
    pub fn on_receive(
        &mut self,
        frame: &Frame,
        payload: Option<&[u8]>,
        now: SimTime,
    ) -> Vec<Effect> {
        match frame.kind {
            FrameKind::Uplink => self.on_uplink(frame, now),
            FrameKind::DownlinkAck | FrameKind::NeighbourDownlink => Vec::new(),
            kind => {
                self.counters.g2g_received += 1;
                let decoded = payload
                    .ok_or(WireError::Empty)
                    .and_then(G2gMessage::decode)
                    .ok()
                    .filter(|m| m.kind() == kind);
                let outcome = match decoded {
                    Some(msg) if self.overlay => self.on_g2g(msg, now),
                    Some(_) => G2gOutcome::Ignored("overlay disabled"),
                    None => {
                        self.counters.g2g_malformed += 1;
                        G2gOutcome::Malformed
                    }
                };
                let mut effects: Vec<Effect> = self
                    .recovered
                    .drain(..)
                    .map(|frame| Effect::ForwardToServer { frame, late: true })
                    .collect();
                effects.push(Effect::G2gHandle { kind, outcome });
                effects
            }
        }
    }

    fn on_uplink(&mut self, frame: &Frame, now: SimTime) -> Vec<Effect> {
        self.counters.uplinks_received += 1;
        let node = frame.subject_node;
        let duplicate = self
            .cache
            .get(&node)
            .is_some_and(|e| e.counter == frame.counter);
        let mut effects = vec![Effect::ForwardToServer {
            frame: *frame,
            late: false,
        }];
        self.store(frame, now);
        effects.push(Effect::CacheStore {
            node,
            counter: frame.counter,
        });
        if !duplicate {
            let events = self.observe(node, frame.counter, now);
            effects.push(Effect::RmipObserve {
                node,
                counter: frame.counter,
                events,
            });
        }
        self.agent.ingest(frame.airtime, frame.radio.channel, now);
        effects.push(Effect::InterPredIngest {
            channel: frame.radio.channel,
            airtime: frame.airtime,
        });
        effects
    }

    fn store(&mut self, frame: &Frame, now: SimTime) {
        let keep_existing = self
            .cache
            .get(&frame.subject_node)
            .is_some_and(|e| counter_is_newer(e.counter, frame.counter));
        if keep_existing {
            return;
        }
        self.cache.insert(
            frame.subject_node,
            CacheEntry {
                node: frame.subject_node,
                counter: frame.counter,
                frame: *frame,
                received_at: now,
                rx1_deadline: now.add_us(GatewayConfig::us(self.cfg.rx1_delay)),
                rx2_deadline: now.add_us(GatewayConfig::us(self.cfg.rx2_delay)),
            },
        );
    }

    fn observe(&mut self, node: NodeAddr, counter: u16, arrival: SimTime) -> Vec<RmipEvent> {
        let cfg = &self.rmip_cfg;
        let state = self
            .rmip
            .entry(node)
            .or_insert_with(|| RmipNodeState::new(node));
        let events = state.observe(counter, arrival, cfg);
        if let Some(due) = state.next_due(cfg) {
            self.rmip_due.push(Reverse((due, node)));
        }
        events
    }

    fn enqueue(&mut self, message: G2gMessage) {
        let priority = match message.kind() {
            FrameKind::ReqForwardDownlink => 0,
            FrameKind::RebroadcastUplink => 1,
            _ => 2,
        };
        self.seq += 1;
        self.queue.push(PendingG2g {
            message,
            priority,
            seq: self.seq,
            attempts: 0,
        });
    }

    fn on_g2g(&mut self, msg: G2gMessage, now: SimTime) -> G2gOutcome {
        match msg {
            G2gMessage::ReqUplink { node, last_counter } => {
                self.answer_uplink_request(node, last_counter, now)
            }
            G2gMessage::RebroadcastUplink { original } => {
                let node = original.subject_node;
                let before = self.queue.len();
                self.queue.retain(|p| {
                    !matches!(&p.message, G2gMessage::RebroadcastUplink { original: o }
                        if o.subject_node == node && !counter_is_newer(o.counter, original.counter))
                });
                let suppressed = before - self.queue.len();
                self.counters.g2g_suppressed += suppressed as u64;
                if self.owns(node) {
                    self.store(&original, original.tx_end());
                    self.observe(node, original.counter, original.tx_end());
                    self.note(now, "recovered_uplink", node, original.counter);
                    self.recovered.push(original);
                    G2gOutcome::Queued
                } else if suppressed > 0 {
                    G2gOutcome::Suppressed
                } else {
                    G2gOutcome::Ignored("foreign rebroadcast")
                }
            }
            G2gMessage::ReqForwardDownlink {
                downlink, target, ..
            } => self.answer_downlink_request(downlink, target, now),
            G2gMessage::NeighbourDownlink { .. } => G2gOutcome::Ignored("downlink"),
        }
    }

    /// Answers a missing-uplink request from the cache, if it holds a newer
    /// message for that node than the requester has.
    pub fn answer_uplink_request(
        &mut self,
        node: NodeAddr,
        last_counter: u16,
        now: SimTime,
    ) -> G2gOutcome {
        if self.owns(node) {
            // Our own server already has anything we heard.
            return G2gOutcome::Ignored("own node");
        }
        let Some(entry) = self.cache.get(&node) else {
            self.counters.cache_misses += 1;
            return G2gOutcome::Ignored("not cached");
        };
        if !counter_is_newer(entry.counter, last_counter) {
            self.counters.cache_misses += 1;
            return G2gOutcome::Ignored("nothing newer");
        }
        let original = entry.frame;
        self.counters.cache_hits += 1;
        let already = self.queue.iter().any(|p| {
            matches!(&p.message, G2gMessage::RebroadcastUplink { original: o }
                if o.subject_node == node && o.counter == original.counter)
        });
        if already {
            return G2gOutcome::Ignored("already queued");
        }
        self.note(now, "answer_uplink_request", node, original.counter);
        self.enqueue(G2gMessage::RebroadcastUplink { original });
        G2gOutcome::Queued
    }

    /// Serves a handover from the cache: if the target was heard within the
    /// freshness limit, sends the downlink in its next reachable window.
    pub fn answer_downlink_request(
        &mut self,
        downlink: Frame,
        target: NodeAddr,
        now: SimTime,
    ) -> G2gOutcome {
        let Some(entry) = self.cache.get(&target) else {
            self.counters.cache_misses += 1;
            return G2gOutcome::Ignored("not cached");
        };
        if now.since(entry.received_at) > GatewayConfig::us(self.cfg.handover_freshness) {
            self.counters.cache_misses += 1;
            return G2gOutcome::Ignored("stale");
        }
        let uplink = entry.frame;
        let (rx1, rx2) = (entry.rx1_deadline, entry.rx2_deadline);
        self.counters.cache_hits += 1;
        let windows = [
            (
                rx1,
                uplink.radio.channel,
                uplink.radio.spreading_factor,
                Band::Band0,
                self.cfg.rx1_tx_power_dbm,
            ),
            (
                rx2,
                self.plan.rx2_channel(),
                self.plan.rx2_spreading_factor,
                Band::Band1,
                self.cfg.rx2_tx_power_dbm,
            ),
        ];
        for (at, channel, sf, band, power) in windows {
            if at <= now {
                continue;
            }
            let radio = RadioParams {
                channel,
                spreading_factor: sf,
                bandwidth_hz: uplink.radio.bandwidth_hz,
                tx_power_dbm: power,
                band,
            };
            let Ok(airtime) = compute_airtime(downlink.payload_len as usize, &radio) else {
                continue;
            };
            let frame = Frame {
                kind: FrameKind::NeighbourDownlink,
                source: Source::Gateway(self.id),
                subject_node: target,
                counter: downlink.counter,
                payload_len: downlink.payload_len,
                radio,
                needs_ack: false,
                tx_start: at,
                airtime,
            };
            if self.try_downlink(&frame) {
                self.counters.neighbour_downlink_sent += 1;
                self.counters.g2g_airtime_us += airtime;
                self.note(now, "neighbour_downlink", target, downlink.counter);
                self.outbox.push(Transmission {
                    frame,
                    message: Some(G2gMessage::NeighbourDownlink { downlink }),
                });
                return G2gOutcome::NeighbourDownlinkScheduled { at };
            }
        }
        G2gOutcome::Ignored("no window")
    }

    /// Queues a handover for a downlink the server could not send through
    /// any of its own gateways. `uplink_end` fixes the node's windows.
    pub fn handover_downlink(
        &mut self,
        downlink: Frame,
        uplink_end: SimTime,
        now: SimTime,
    ) -> bool {
        if !self.overlay {
            return false;
        }
        let target = downlink.subject_node;
        self.counters.handover_requested += 1;
        self.note(now, "handover_downlink", target, downlink.counter);
        self.enqueue(G2gMessage::ReqForwardDownlink {
            downlink,
            target,
            rx1: uplink_end.add_us(GatewayConfig::us(self.cfg.rx1_delay)),
            rx2: uplink_end.add_us(GatewayConfig::us(self.cfg.rx2_delay)),
        });
        true
    }

    /// Queues a request for a missing uplink.
    pub fn raise_uplink_request(&mut self, report: MissingReport, now: SimTime) {
        self.counters.missing_reports += 1;
        let dup = self.queue.iter().any(
            |p| matches!(&p.message, G2gMessage::ReqUplink { node, .. } if *node == report.node),
        );
        if dup {
            return;
        }
        self.note(
            now,
            "raise_uplink_request",
            report.node,
            report.last_counter,
        );
        self.enqueue(G2gMessage::ReqUplink {
            node: report.node,
            last_counter: report.last_counter,
        });
    }

    fn g2g_radio(&self, channel: u8) -> RadioParams {
        RadioParams {
            channel,
            spreading_factor: self.cfg.g2g_spreading_factor,
            bandwidth_hz: RadioParams::DEFAULT_BANDWIDTH_HZ,
            tx_power_dbm: self.cfg.g2g_tx_power_dbm,
            band: Band::Band0,
        }
    }

    /// Per-slot work: advance the interference predictor, poll RMIP for
    /// overdue uplinks and try to send the most urgent queued message.
    pub fn on_slot(&mut self, now: SimTime) {
        self.agent.on_slot_boundary(now);
        if !self.overlay {
            return;
        }
        self.poll_rmip(now);
        self.evict(now);
        self.pump_queue(now);
    }

    fn poll_rmip(&mut self, now: SimTime) {
        while let Some(&Reverse((due, node))) = self.rmip_due.peek() {
            if due > now {
                break;
            }
            self.rmip_due.pop();
            let cfg = &self.rmip_cfg;
            let Some(state) = self.rmip.get_mut(&node) else {
                continue;
            };
            let report = state.poll_missing(now, cfg);
            if let Some(next) = state.next_due(cfg) {
                if next > now {
                    self.rmip_due.push(Reverse((next, node)));
                }
            }
            if let Some(r) = report {
                if self.owns(r.node) {
                    self.raise_uplink_request(r, now);
                }
            }
        }
    }

    fn evict(&mut self, now: SimTime) {
        if now.since(self.last_evict) < 10 * US_PER_SEC {
            return;
        }
        self.last_evict = now;
        let ttl = GatewayConfig::us(self.cfg.cache_ttl);
        self.cache.retain(|_, e| now.since(e.received_at) <= ttl);
        let horizon = now.as_micros().saturating_sub(10 * US_PER_SEC);
        self.busy.retain(|&(_, e)| e >= horizon);
        self.band0.prune(now);
        self.band0_acks.prune(now);
        self.band1.prune(now);
    }

    fn pump_queue(&mut self, now: SimTime) {
        // Drop handovers that can no longer make the node's second window.
        let slot = SLOT_US;
        let mut abandoned = 0;
        self.queue.retain(|p| match &p.message {
            G2gMessage::ReqForwardDownlink { rx2, .. } => {
                let keep = now.as_micros() + slot < rx2.as_micros();
                abandoned += u64::from(!keep);
                keep
            }
            _ => true,
        });
        self.counters.ack_abandoned += abandoned;

        let Some(idx) =
            (0..self.queue.len()).min_by_key(|&i| (self.queue[i].priority, self.queue[i].seq))
        else {
            return;
        };
        let grant = self.agent.request_slot(now);
        let bytes = self.queue[idx].message.encode();
        let deadline = match &self.queue[idx].message {
            G2gMessage::ReqForwardDownlink { rx2, .. } => Some(rx2.as_micros()),
            _ => None,
        };
        let sent = match grant {
            None => {
                self.counters.g2g_declined += 1;
                None
            }
            Some(g) => {
                let radio = self.g2g_radio(g.channel);
                let airtime =
                    compute_airtime(bytes.len(), &radio).expect("overlay frames fit any SF");
                if deadline.is_some_and(|d| g.start.as_micros() + airtime + SLOT_US > d) {
                    self.counters.g2g_late += 1;
                    None
                } else if !self.radio_free(g.start.as_micros(), airtime) {
                    self.counters.g2g_radio_busy += 1;
                    None
                } else if !self.try_g2g(g.start, airtime) {
                    self.counters.g2g_duty_blocked += 1;
                    None
                } else {
                    Some((g, radio, airtime))
                }
            }
        };
        match sent {
            Some((g, radio, airtime)) => {
                let p = self.queue.swap_remove(idx);
                let (node, counter) = p.message.subject();
                let kind = p.message.kind();
                match kind {
                    FrameKind::ReqUplink => self.counters.req_uplink_sent += 1,
                    FrameKind::RebroadcastUplink => self.counters.rebroadcast_sent += 1,
                    _ => self.counters.req_forward_sent += 1,
                }
                self.counters.g2g_airtime_us += airtime;
                self.note(now, kind.name(), node, counter);
                self.outbox.push(Transmission {
                    frame: Frame {
                        kind,
                        source: Source::Gateway(self.id),
                        subject_node: node,
                        counter,
                        payload_len: bytes.len() as u8,
                        radio,
                        needs_ack: false,
                        tx_start: g.start,
                        airtime,
                    },
                    message: Some(p.message),
                });
            }
            None => {
                let limit = self.cfg.g2g_retry_limit;
                let p = &mut self.queue[idx];
                p.attempts += 1;
                if p.attempts >= limit {
                    let p = self.queue.swap_remove(idx);
                    let (node, counter) = p.message.subject();
                    if p.message.kind() == FrameKind::ReqForwardDownlink {
                        self.counters.ack_abandoned += 1;
                    } else {
                        self.counters.g2g_starved += 1;
                    }
                    self.note(now, "g2g_dropped", node, counter);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::slot_of;
    use crate::types::tests::arb_frame;
    use proptest::{prop_assert_eq, proptest};

    const OWN: NetworkId = NetworkId(0);
    const OTHER: NetworkId = NetworkId(1);

    fn gateway(training: f64) -> GatewayRuntime {
        let ip = InterPredConfig {
            training_duration: training,
            ..InterPredConfig::default()
        };
        GatewayRuntime::new(
            GatewayId(1),
            OWN,
            GatewayConfig::default(),
            ChannelPlan::default(),
            RmipConfig::default(),
            ip,
            true,
            7,
        )
    }

    fn uplink(node: NodeAddr, counter: u16, end: SimTime) -> Frame {
        let radio = RadioParams {
            channel: 1,
            spreading_factor: 9,
            bandwidth_hz: 125_000,
            tx_power_dbm: 14,
            band: Band::Band0,
        };
        let airtime = compute_airtime(23, &radio).unwrap();
        Frame {
            kind: FrameKind::Uplink,
            source: Source::Node(node),
            subject_node: node,
            counter,
            payload_len: 23,
            radio,
            needs_ack: true,
            tx_start: end.saturating_sub_us(airtime),
            airtime,
        }
    }

    fn g2g_frame(msg: &G2gMessage, from: u32, end: SimTime) -> (Frame, Vec<u8>) {
        let bytes = msg.encode();
        let (node, counter) = msg.subject();
        let radio = RadioParams {
            channel: 0,
            spreading_factor: 8,
            bandwidth_hz: 125_000,
            tx_power_dbm: 14,
            band: Band::Band0,
        };
        let airtime = compute_airtime(bytes.len(), &radio).unwrap();
        let frame = Frame {
            kind: msg.kind(),
            source: Source::Gateway(GatewayId(from)),
            subject_node: node,
            counter,
            payload_len: bytes.len() as u8,
            radio,
            needs_ack: false,
            tx_start: end.saturating_sub_us(airtime),
            airtime,
        };
        (frame, bytes)
    }

    fn ack_for(node: NodeAddr, counter: u16) -> Frame {
        let mut f = uplink(node, counter, SimTime::ZERO);
        f.kind = FrameKind::DownlinkAck;
        f.payload_len = 13;
        f.needs_ack = false;
        f
    }

    #[test]
    fn uplink_fans_out_to_four_sinks() {
        let mut gw = gateway(0.0);
        let node = NodeAddr::new(OTHER, 3);
        let t = SimTime::from_secs(10);
        let effects = gw.on_receive(&uplink(node, 4, t), None, t);
        assert_eq!(effects.len(), 4);
        assert!(matches!(
            effects[0],
            Effect::ForwardToServer { late: false, .. }
        ));
        assert!(matches!(effects[1], Effect::CacheStore { counter: 4, .. }));
        assert!(matches!(effects[2], Effect::RmipObserve { counter: 4, .. }));
        assert!(matches!(
            effects[3],
            Effect::InterPredIngest { channel: 1, .. }
        ));
        assert_eq!(gw.cached(node).unwrap().counter, 4);
    }

    #[test]
    fn duplicate_uplink_skips_rmip() {
        let mut gw = gateway(0.0);
        let node = NodeAddr::new(OTHER, 3);
        let t = SimTime::from_secs(10);
        gw.on_receive(&uplink(node, 4, t), None, t);
        let t2 = SimTime::from_secs(12);
        let effects = gw.on_receive(&uplink(node, 4, t2), None, t2);
        assert_eq!(effects.len(), 3);
        assert!(!effects
            .iter()
            .any(|e| matches!(e, Effect::RmipObserve { .. })));
    }

    #[test]
    fn overlay_request_goes_to_handler_only() {
        let mut gw = gateway(0.0);
        let msg = G2gMessage::ReqUplink {
            node: NodeAddr::new(OTHER, 3),
            last_counter: 6,
        };
        let t = SimTime::from_secs(5);
        let (frame, bytes) = g2g_frame(&msg, 9, t);
        let effects = gw.on_receive(&frame, Some(&bytes), t);
        assert_eq!(effects.len(), 1);
        assert!(matches!(
            effects[0],
            Effect::G2gHandle {
                kind: FrameKind::ReqUplink,
                ..
            }
        ));
        assert_eq!(gw.agent().state().current(0), 0);
    }

    #[test]
    fn uplink_request_answered_only_with_newer_cache() {
        let node = NodeAddr::new(OTHER, 3);
        let t = SimTime::from_secs(10);
        let now = SimTime::from_secs(11);

        let mut gw = gateway(0.0);
        gw.on_receive(&uplink(node, 7, t), None, t);
        assert_eq!(gw.answer_uplink_request(node, 6, now), G2gOutcome::Queued);
        assert_eq!(gw.queued(), 1);

        let mut gw = gateway(0.0);
        gw.on_receive(&uplink(node, 6, t), None, t);
        assert!(matches!(
            gw.answer_uplink_request(node, 6, now),
            G2gOutcome::Ignored(_)
        ));
        assert_eq!(gw.queued(), 0);

        let mut gw = gateway(0.0);
        assert!(matches!(
            gw.answer_uplink_request(node, 6, now),
            G2gOutcome::Ignored(_)
        ));
        assert_eq!(gw.queued(), 0);
    }

    #[test]
    fn own_network_requests_are_not_answered() {
        let mut gw = gateway(0.0);
        let node = NodeAddr::new(OWN, 3);
        let t = SimTime::from_secs(10);
        gw.on_receive(&uplink(node, 7, t), None, t);
        assert_eq!(
            gw.answer_uplink_request(node, 6, t),
            G2gOutcome::Ignored("own node")
        );
    }

    #[test]
    fn starved_request_is_dropped_after_retry_limit() {
        // Training never ends, so every grant is declined.
        let mut gw = gateway(1e9);
        gw.raise_uplink_request(
            MissingReport {
                node: NodeAddr::new(OWN, 3),
                last_counter: 2,
            },
            SimTime::ZERO,
        );
        for s in 1..=9 {
            gw.on_slot(SimTime::of_slot(s));
        }
        assert_eq!(gw.queued(), 1);
        gw.on_slot(SimTime::of_slot(10));
        assert_eq!(gw.queued(), 0);
        assert_eq!(gw.counters().g2g_starved, 1);
        assert!(gw.take_outbox().is_empty());
    }

    #[test]
    fn trained_gateway_rebroadcasts_bit_exact() {
        let mut gw = gateway(30.0);
        let node = NodeAddr::new(OTHER, 3);
        let t = SimTime::from_secs(40);
        for s in 1..slot_of_secs(40) {
            gw.on_slot(SimTime::of_slot(s));
        }
        let up = uplink(node, 7, t);
        gw.on_receive(&up, None, t);
        gw.answer_uplink_request(node, 6, t);
        let mut sent = Vec::new();
        for s in slot_of_secs(40)..slot_of_secs(42) {
            gw.on_slot(SimTime::of_slot(s));
            sent.extend(gw.take_outbox());
        }
        assert_eq!(sent.len(), 1);
        let tx = &sent[0];
        assert_eq!(tx.frame.kind, FrameKind::RebroadcastUplink);
        assert_eq!(tx.frame.radio.spreading_factor, 8);
        let bytes = tx.message.as_ref().unwrap().encode();
        assert_eq!(bytes.len(), tx.frame.payload_len as usize);
        let mut expected = vec![0xE2];
        up.encode(&mut expected);
        assert_eq!(bytes, expected);
        assert_eq!(gw.counters().rebroadcast_sent, 1);
    }

    fn slot_of_secs(s: u64) -> u64 {
        s * US_PER_SEC / SLOT_US
    }

    #[test]
    fn overheard_rebroadcast_suppresses_ours() {
        let mut gw = gateway(1e9);
        let node = NodeAddr::new(OTHER, 3);
        let t = SimTime::from_secs(10);
        let up = uplink(node, 7, t);
        gw.on_receive(&up, None, t);
        gw.answer_uplink_request(node, 6, t);
        assert_eq!(gw.queued(), 1);
        let msg = G2gMessage::RebroadcastUplink { original: up };
        let now = SimTime::from_secs(11);
        let (frame, bytes) = g2g_frame(&msg, 9, now);
        let effects = gw.on_receive(&frame, Some(&bytes), now);
        assert_eq!(gw.queued(), 0);
        assert!(matches!(
            effects[0],
            Effect::G2gHandle {
                outcome: G2gOutcome::Suppressed,
                ..
            }
        ));
    }

    #[test]
    fn rebroadcast_of_own_node_is_forwarded_late() {
        let mut gw = gateway(0.0);
        let node = NodeAddr::new(OWN, 3);
        let up = uplink(node, 7, SimTime::from_secs(10));
        let msg = G2gMessage::RebroadcastUplink { original: up };
        let now = SimTime::from_secs(13);
        let (frame, bytes) = g2g_frame(&msg, 9, now);
        let effects = gw.on_receive(&frame, Some(&bytes), now);
        assert_eq!(
            effects[0],
            Effect::ForwardToServer {
                frame: up,
                late: true
            }
        );
        assert_eq!(gw.rmip_state(node).unwrap().last_counter(), 7);
    }

    #[test]
    fn malformed_overlay_payload_is_counted() {
        let mut gw = gateway(0.0);
        let msg = G2gMessage::ReqUplink {
            node: NodeAddr(3),
            last_counter: 1,
        };
        let t = SimTime::from_secs(1);
        let (frame, bytes) = g2g_frame(&msg, 9, t);
        let effects = gw.on_receive(&frame, Some(&bytes[..4]), t);
        assert!(matches!(
            effects[0],
            Effect::G2gHandle {
                outcome: G2gOutcome::Malformed,
                ..
            }
        ));
        assert_eq!(gw.counters().g2g_malformed, 1);
    }

    #[test]
    fn handover_uses_rx1_when_fresh() {
        let mut gw = gateway(0.0);
        let node = NodeAddr::new(OTHER, 3);
        let t = SimTime::from_secs(10);
        gw.on_receive(&uplink(node, 7, t), None, t);
        let now = t.add_us(500_000);
        let out = gw.answer_downlink_request(ack_for(node, 7), node, now);
        let rx1 = t.add_us(US_PER_SEC);
        assert_eq!(out, G2gOutcome::NeighbourDownlinkScheduled { at: rx1 });
        let tx = gw.take_outbox();
        assert_eq!(tx.len(), 1);
        let f = tx[0].frame;
        assert_eq!(f.kind, FrameKind::NeighbourDownlink);
        assert_eq!(
            (f.tx_start, f.radio.channel, f.radio.spreading_factor),
            (rx1, 1, 9)
        );
        assert_eq!(f.radio.band, Band::Band0);
    }

    #[test]
    fn handover_falls_back_to_rx2() {
        let mut gw = gateway(0.0);
        let node = NodeAddr::new(OTHER, 3);
        let t = SimTime::from_secs(10);
        gw.on_receive(&uplink(node, 7, t), None, t);
        let now = t.add_us(1_500_000);
        let out = gw.answer_downlink_request(ack_for(node, 7), node, now);
        let rx2 = t.add_us(2 * US_PER_SEC);
        assert_eq!(out, G2gOutcome::NeighbourDownlinkScheduled { at: rx2 });
        let f = gw.take_outbox()[0].frame;
        assert_eq!(
            (f.radio.channel, f.radio.spreading_factor, f.radio.band),
            (3, 12, Band::Band1)
        );
        assert_eq!(f.radio.tx_power_dbm, 27);
    }

    #[test]
    fn stale_cache_declines_handover() {
        let mut gw = gateway(0.0);
        let node = NodeAddr::new(OTHER, 3);
        let t = SimTime::from_secs(10);
        gw.on_receive(&uplink(node, 7, t), None, t);
        let out = gw.answer_downlink_request(ack_for(node, 7), node, t.add_us(3 * US_PER_SEC));
        assert_eq!(out, G2gOutcome::Ignored("stale"));
        assert!(gw.take_outbox().is_empty());
    }

    #[test]
    fn handover_past_rx2_is_abandoned() {
        let mut gw = gateway(1e9);
        let node = NodeAddr::new(OWN, 3);
        let end = SimTime::from_secs(10);
        assert!(gw.handover_downlink(ack_for(node, 7), end, end));
        let mut s = slot_of(end) + 1;
        while gw.queued() > 0 {
            gw.on_slot(SimTime::of_slot(s));
            s += 1;
        }
        assert!(SimTime::of_slot(s) <= end.add_us(2 * US_PER_SEC));
        assert_eq!(gw.counters().ack_abandoned, 1);
    }

    #[test]
    fn radio_is_half_duplex() {
        let mut gw = gateway(0.0);
        let node = NodeAddr::new(OWN, 3);
        let mut a = ack_for(node, 1);
        a.tx_start = SimTime::from_secs(5);
        assert!(gw.try_downlink(&a));
        let mut b = a;
        b.tx_start = a.tx_start.add_us(a.airtime / 2);
        assert!(!gw.try_downlink(&b));
        assert!(gw.transmitting_during(b.tx_start, b.tx_end()));
        b.tx_start = a.tx_end();
        assert!(gw.try_downlink(&b));
    }

    #[test]
    fn ack_budget_respects_reserve() {
        let cfg = GatewayConfig {
            g2g_reserve_fraction: 0.5,
            ..GatewayConfig::default()
        };
        let mut gw = GatewayRuntime::new(
            GatewayId(1),
            OWN,
            cfg,
            ChannelPlan::default(),
            RmipConfig::default(),
            InterPredConfig::default(),
            true,
            1,
        );
        let mut a = ack_for(NodeAddr::new(OWN, 1), 1);
        let mut used = 0;
        let mut t = SimTime::ZERO;
        while gw.try_downlink(&{
            a.tx_start = t;
            a
        }) {
            used += a.airtime;
            t = a.tx_end();
        }
        let half = DutyCycleTracker::new(Band::Band0).budget_us() / 2;
        assert!(used <= half && used + a.airtime > half);
    }

    proptest! {
        #[test]
        fn wire_round_trip(f in arb_frame(), node in proptest::prelude::any::<u32>(), c in proptest::prelude::any::<u16>(), t1 in proptest::prelude::any::<u64>(), t2 in proptest::prelude::any::<u64>()) {
            let msgs = [
                G2gMessage::ReqUplink { node: NodeAddr(node), last_counter: c },
                G2gMessage::RebroadcastUplink { original: f },
                G2gMessage::ReqForwardDownlink { downlink: f, target: NodeAddr(node), rx1: SimTime::from_micros(t1), rx2: SimTime::from_micros(t2) },
                G2gMessage::NeighbourDownlink { downlink: f },
            ];
            for m in msgs {
                let bytes = m.encode();
                prop_assert_eq!(G2gMessage::decode(&bytes), Ok(m));
            }
        }
    }

    #[test]
    fn wire_rejects_bad_input() {
        assert_eq!(G2gMessage::decode(&[]), Err(WireError::Empty));
        assert_eq!(G2gMessage::decode(&[0x40, 1]), Err(WireError::Tag(0x40)));
        assert_eq!(
            G2gMessage::decode(&[0xE1, 0, 0, 0, 1, 0]),
            Err(WireError::Truncated)
        );
        assert_eq!(
            G2gMessage::decode(&[0xE1, 0, 0, 0, 1, 0, 2, 9]),
            Err(WireError::Trailing)
        );
        let m = G2gMessage::ReqUplink {
            node: NodeAddr(1),
            last_counter: 2,
        };
        assert_eq!(m.encode().len(), 7);
    }
}
