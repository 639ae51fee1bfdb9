//! Discrete-event simulation of overlapping LoRaWAN networks.
//!
//! Nodes are Class-A devices using ALOHA; each network has its own server
//! and gateways. Uplink-class frames (node uplinks and overlay frames) are
//! only demodulated by gateways, downlink-class frames only by nodes, as
//! the two directions use inverted IQ.

pub mod adr;
pub mod config;
pub mod flip;
pub mod log;
pub mod metrics;

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use config::{ConfigError, GatewaySite, Load, NodeConfig, ScenarioConfig, System};
pub use log::LogRecord;
pub use metrics::{NodeMetrics, RunMetrics};

use crate::gateway::{Effect, GatewayCounters, GatewayRuntime, Transmission};
use crate::phy::{
    audit_duty_cycle, captures, compute_airtime, received_power, AuditTx, DutyCycleTracker,
    DutyCycleViolation,
};
use crate::types::{
    Band, Frame, FrameKind, GatewayId, NetworkId, NodeAddr, RadioParams, SimTime, Source, SLOT_US,
    US_PER_SEC,
};

/// Everything a run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub nodes: Vec<NodeMetrics>,
    /// Empty unless the config asked for it.
    pub log: Vec<LogRecord>,
    pub violations: Vec<DutyCycleViolation>,
    /// Every transmission, for independent duty-cycle auditing.
    pub audit: Vec<AuditTx>,
    pub gateway_counters: Vec<GatewayCounters>,
}

/// Runs one scenario to completion.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput, ConfigError> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg)?;
    sim.execute();
    Ok(sim.finish())
}

fn us(s: f64) -> u64 {
    (s * US_PER_SEC as f64).round() as u64
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    // Variant order is the tie-break between events at the same instant.
    Slot,
    TxEnd(usize),
    AckTimeout {
        node: usize,
        counter: u16,
        attempt: u32,
    },
    Generate(usize),
    NodeTx {
        node: usize,
        counter: u16,
        attempt: u32,
    },
}

impl Event {
    fn class(&self) -> u8 {
        match self {
            Event::Slot => 0,
            Event::TxEnd(_) => 1,
            Event::AckTimeout { .. } => 2,
            Event::Generate(_) => 3,
            Event::NodeTx { .. } => 4,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
enum Emitter {
    Node(usize),
    Gateway(usize),
}

struct AirFrame {
    frame: Frame,
    from: Emitter,
    payload: Option<Vec<u8>>,
    /// Uplink-class frames reach gateways, the rest reach nodes.
    uplink_class: bool,
}

struct Message {
    counter: u16,
    attempt: u32,
    acked: bool,
    done: bool,
    last_end: SimTime,
    last_channel: u8,
}

struct NodeActor {
    addr: NodeAddr,
    network: u32,
    x: f64,
    y: f64,
    radio: RadioParams,
    needs_ack: bool,
    rng: ChaCha8Rng,
    duty: DutyCycleTracker,
    next_counter: u16,
    current: Option<Message>,
    received: BTreeSet<u16>,
    stats: NodeMetrics,
    flip_gateway: usize,
}

struct GatewayActor {
    x: f64,
    y: f64,
    network: u32,
    runtime: GatewayRuntime,
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    now: SimTime,
    end: SimTime,
    gen_end: SimTime,
    queue: BinaryHeap<Reverse<(SimTime, u8, u64, Event)>>,
    seq: u64,
    nodes: Vec<NodeActor>,
    gateways: Vec<GatewayActor>,
    /// Fixed per-link shadowing, node x gateway.
    node_offset: Vec<Vec<f64>>,
    /// Fixed per-link shadowing, gateway x gateway (symmetric).
    gw_offset: Vec<Vec<f64>>,
    air: Vec<AirFrame>,
    on_air: Vec<usize>,
    log: Vec<LogRecord>,
    audit: Vec<AuditTx>,
    metrics: RunMetrics,
    index: HashMap<NodeAddr, usize>,
    ack_airtime_rx2: u64,
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Result<Self, ConfigError> {
        let sites = cfg.gateway_sites();
        let overlay = cfg.system == System::Ironwan;
        let mut place = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gateways: Vec<GatewayActor> = sites
            .iter()
            .enumerate()
            .map(|(i, s)| GatewayActor {
                x: s.x,
                y: s.y,
                network: s.network,
                runtime: {
                    let mut rt = GatewayRuntime::new(
                        GatewayId(i as u32),
                        NetworkId(s.network),
                        cfg.gateway.clone(),
                        cfg.plan.clone(),
                        cfg.rmip.clone(),
                        cfg.interpred.clone(),
                        overlay,
                        cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64 + 1),
                    );
                    if cfg.log_events {
                        rt.enable_notes();
                    }
                    rt
                },
            })
            .collect();

        let sigma = cfg.link.link_offset_sigma_db;
        let shadow = Normal::new(0.0, sigma.max(0.0)).map_err(|e| ConfigError(e.to_string()))?;
        let draw = |rng: &mut ChaCha8Rng| if sigma > 0.0 { shadow.sample(rng) } else { 0.0 };
        let g = gateways.len();
        let mut gw_offset = vec![vec![0.0; g]; g];
        #[allow(clippy::needless_range_loop)] // symmetric fill
        for a in 0..g {
            for b in a + 1..g {
                let o = draw(&mut place);
                gw_offset[a][b] = o;
                gw_offset[b][a] = o;
            }
        }

        let base_radio = RadioParams {
            channel: 0,
            spreading_factor: 12,
            bandwidth_hz: RadioParams::DEFAULT_BANDWIDTH_HZ,
            tx_power_dbm: cfg.node.tx_power_dbm,
            band: Band::Band0,
        };
        let count = cfg.total_nodes();
        let mut nodes = Vec::with_capacity(count);
        let mut node_offset = Vec::with_capacity(count);
        let mut per_network = vec![0u32; cfg.networks as usize];
        for i in 0..count {
            let site = cfg.nodes.get(i);
            let (x, y) = match site {
                Some(s) => (s.x, s.y),
                None => (
                    place.gen_range(0.0..cfg.width_m),
                    place.gen_range(0.0..cfg.height_m),
                ),
            };
            let offsets: Vec<f64> = (0..g).map(|_| draw(&mut place)).collect();
            let power_at = |gi: usize| -> f64 {
                let gw = &gateways[gi];
                let d = ((gw.x - x).powi(2) + (gw.y - y).powi(2)).sqrt().max(1.0);
                received_power(cfg.node.tx_power_dbm as f64, d, &cfg.link)
                    .unwrap_or(f64::NEG_INFINITY)
                    + cfg.link.gateway_antenna_gain_db
                    + offsets[gi]
            };
            let best_of = |net: u32| -> f64 {
                (0..g)
                    .filter(|&gi| gateways[gi].network == net)
                    .map(power_at)
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            let reachable: Vec<u32> = (0..cfg.networks)
                .filter(|&net| best_of(net) >= cfg.link.sensitivity(12))
                .collect();
            let (network, needs_ack) = match site {
                Some(s) => (s.network, s.needs_ack),
                None => {
                    let network = if reachable.is_empty() {
                        place.gen_range(0..cfg.networks)
                    } else {
                        reachable[place.gen_range(0..reachable.len())]
                    };
                    (network, place.gen_bool(cfg.load))
                }
            };
            let (sf, _) = adr::assign_or_max(best_of(network), &cfg.link, cfg.node.adr_margin_db);
            let unreachable = best_of(network) < cfg.link.sensitivity(12);
            let idx = per_network[network as usize];
            per_network[network as usize] += 1;
            let addr = NodeAddr::new(NetworkId(network), idx);
            let radio = RadioParams {
                spreading_factor: sf,
                ..base_radio
            };
            // FLIP: gateways that decode this node at its SF; else nearest own.
            let nearest_own = (0..g)
                .filter(|&gi| gateways[gi].network == network)
                .max_by(|&a, &b| power_at(a).total_cmp(&power_at(b)).then(b.cmp(&a)))
                .unwrap_or(0);
            let flip_reach: Vec<usize> = (0..g)
                .filter(|&gi| power_at(gi) >= cfg.link.sensitivity(sf))
                .collect();
            nodes.push((
                NodeActor {
                    addr,
                    network,
                    x,
                    y,
                    radio,
                    needs_ack,
                    rng: ChaCha8Rng::seed_from_u64(
                        cfg.seed ^ (0xA076_1D64_78BD_642F_u64.wrapping_mul(i as u64 + 1)),
                    ),
                    duty: DutyCycleTracker::new(Band::Band0),
                    next_counter: 0,
                    current: None,
                    received: BTreeSet::new(),
                    stats: NodeMetrics {
                        addr: addr.0,
                        network,
                        spreading_factor: sf,
                        needs_ack,
                        unreachable,
                        ..NodeMetrics::default()
                    },
                    flip_gateway: nearest_own,
                },
                flip_reach,
            ));
            node_offset.push(offsets);
        }
        let (reach, fallback): (Vec<Vec<usize>>, Vec<usize>) = nodes
            .iter()
            .map(|(n, r)| (r.clone(), n.flip_gateway))
            .unzip();
        let nodes: Vec<NodeActor> = if cfg.system == System::Flip {
            let assignment = flip::assign(&reach, &fallback, g);
            nodes
                .into_iter()
                .zip(assignment)
                .map(|((mut n, _), gw)| {
                    n.flip_gateway = gw;
                    n
                })
                .collect()
        } else {
            nodes.into_iter().map(|(n, _)| n).collect()
        };

        let index = nodes.iter().enumerate().map(|(i, n)| (n.addr, i)).collect();
        let rx2 = RadioParams {
            channel: cfg.plan.rx2_channel(),
            spreading_factor: cfg.plan.rx2_spreading_factor,
            bandwidth_hz: RadioParams::DEFAULT_BANDWIDTH_HZ,
            tx_power_dbm: cfg.gateway.rx2_tx_power_dbm,
            band: Band::Band1,
        };
        let ack_airtime_rx2 = compute_airtime(cfg.node.ack_len as usize, &rx2)
            .map_err(|e| ConfigError(e.to_string()))?;

        let metrics = RunMetrics {
            system: Some(cfg.system),
            seed: cfg.seed,
            gateways: g,
            networks: cfg.networks,
            load: cfg.load,
            ..RunMetrics::default()
        };
        let gen_end = SimTime::from_micros(us(cfg.duration));
        Ok(Self {
            cfg,
            now: SimTime::ZERO,
            end: gen_end.add_us(us(cfg.drain)),
            gen_end,
            queue: BinaryHeap::new(),
            seq: 0,
            nodes,
            gateways,
            node_offset,
            gw_offset,
            air: Vec::new(),
            on_air: Vec::new(),
            log: Vec::new(),
            audit: Vec::new(),
            metrics,
            index,
            ack_airtime_rx2,
        })
    }

    fn schedule(&mut self, at: SimTime, ev: Event) {
        if at > self.end {
            return;
        }
        self.seq += 1;
        self.queue.push(Reverse((at, ev.class(), self.seq, ev)));
    }

    fn execute(&mut self) {
        if self.nodes.is_empty() {
            return;
        }
        let period = us(self.cfg.node.period);
        for i in 0..self.nodes.len() {
            let phase = self.nodes[i].rng.gen_range(0..period.max(1));
            self.schedule(SimTime::from_micros(phase), Event::Generate(i));
        }
        self.schedule(SimTime::of_slot(1), Event::Slot);
        while let Some(Reverse((t, _, _, ev))) = self.queue.pop() {
            self.now = t;
            match ev {
                Event::Slot => self.on_slot(),
                Event::TxEnd(id) => self.on_tx_end(id),
                Event::AckTimeout {
                    node,
                    counter,
                    attempt,
                } => self.on_ack_timeout(node, counter, attempt),
                Event::Generate(n) => self.on_generate(n),
                Event::NodeTx {
                    node,
                    counter,
                    attempt,
                } => self.on_node_tx(node, counter, attempt),
            }
        }
    }

    fn on_slot(&mut self) {
        let now = self.now;
        if self.cfg.system == System::Ironwan {
            for g in 0..self.gateways.len() {
                self.gateways[g].runtime.on_slot(now);
                self.drain_gateway(g);
            }
        }
        if now.as_micros().is_multiple_of(10 * US_PER_SEC) {
            let horizon = now.as_micros().saturating_sub(10 * US_PER_SEC);
            let air = &self.air;
            self.on_air
                .retain(|&id| air[id].frame.tx_end().as_micros() >= horizon);
        }
        self.schedule(now.add_us(SLOT_US), Event::Slot);
    }

    fn transmit(&mut self, frame: Frame, from: Emitter, payload: Option<Vec<u8>>) {
        let uplink_class = !frame.kind.is_downlink();
        let id = self.air.len();
        self.audit.push(AuditTx {
            transmitter: frame.source,
            band: frame.radio.band,
            start: frame.tx_start,
            airtime: frame.airtime,
        });
        if self.cfg.log_events {
            self.log.push(LogRecord::Tx {
                start_us: frame.tx_start.as_micros(),
                airtime_us: frame.airtime,
                from: frame.source.to_string(),
                kind: frame.kind,
                node: frame.subject_node.0,
                counter: frame.counter,
                channel: frame.radio.channel,
                sf: frame.radio.spreading_factor,
                band: frame.radio.band,
            });
        }
        match frame.kind {
            FrameKind::DownlinkAck => match frame.radio.band {
                Band::Band0 => self.metrics.acks_band0 += 1,
                Band::Band1 => self.metrics.acks_band1 += 1,
            },
            FrameKind::Uplink => {}
            _ => {
                self.metrics.g2g_messages += 1;
                self.metrics.g2g_airtime_us += frame.airtime;
                if frame.radio.band == Band::Band1 {
                    self.metrics.g2g_band1_messages += 1;
                }
            }
        }
        self.air.push(AirFrame {
            frame,
            from,
            payload,
            uplink_class,
        });
        self.on_air.push(id);
        self.schedule(frame.tx_end(), Event::TxEnd(id));
    }

    fn drain_gateway(&mut self, g: usize) {
        for Transmission { frame, message } in self.gateways[g].runtime.take_outbox() {
            let payload = message.map(|m| m.encode());
            self.transmit(frame, Emitter::Gateway(g), payload);
        }
        if self.cfg.log_events {
            for note in self.gateways[g].runtime.take_notes() {
                self.log.push(LogRecord::Gateway {
                    t_us: note.at_us,
                    gateway: g as u32,
                    what: note.what.to_string(),
                    node: note.node,
                    counter: note.counter,
                });
            }
        }
    }

    // ---- nodes ----

    fn on_generate(&mut self, n: usize) {
        let now = self.now;
        let node = &mut self.nodes[n];
        if let Some(m) = node.current.as_mut() {
            if !m.acked && !m.done && node.needs_ack {
                m.done = true;
                if self.cfg.log_events {
                    self.log.push(LogRecord::Abandoned {
                        t_us: now.as_micros(),
                        node: node.addr.0,
                        counter: m.counter,
                        attempts: m.attempt + 1,
                    });
                }
            }
        }
        if now >= self.gen_end {
            node.current = None;
            return;
        }
        let counter = node.next_counter;
        node.next_counter = node.next_counter.wrapping_add(1);
        node.current = Some(Message {
            counter,
            attempt: 0,
            acked: false,
            done: false,
            last_end: SimTime::ZERO,
            last_channel: 0,
        });
        node.stats.generated += 1;
        if node.needs_ack {
            node.stats.confirmed += 1;
        }
        let period = us(self.cfg.node.period);
        self.schedule(
            now,
            Event::NodeTx {
                node: n,
                counter,
                attempt: 0,
            },
        );
        self.schedule(now.add_us(period), Event::Generate(n));
    }

    fn on_node_tx(&mut self, n: usize, counter: u16, attempt: u32) {
        let now = self.now;
        let channels = self.cfg.plan.uplink_channels() as u8;
        let len = self.cfg.node.uplink_len;
        let node = &mut self.nodes[n];
        let Some(m) = node.current.as_ref() else {
            return;
        };
        if m.counter != counter || m.attempt != attempt || m.acked || m.done {
            return;
        }
        let channel = node.rng.gen_range(0..channels);
        let radio = RadioParams {
            channel,
            ..node.radio
        };
        let airtime = compute_airtime(len as usize, &radio).expect("validated radio");
        if !node.duty.can_reserve(airtime, now) {
            if let Some(at) = node.duty.earliest_available(airtime, now) {
                self.schedule(
                    at,
                    Event::NodeTx {
                        node: n,
                        counter,
                        attempt,
                    },
                );
            }
            return;
        }
        node.duty.try_reserve(airtime, now);
        node.duty.prune(now);
        let frame = Frame {
            kind: FrameKind::Uplink,
            source: Source::Node(node.addr),
            subject_node: node.addr,
            counter,
            payload_len: len,
            radio,
            needs_ack: node.needs_ack,
            tx_start: now,
            airtime,
        };
        node.stats.transmissions += 1;
        if attempt > 0 {
            node.stats.retransmissions += 1;
        }
        let m = node.current.as_mut().unwrap();
        m.last_end = frame.tx_end();
        m.last_channel = channel;
        let needs_ack = node.needs_ack;
        self.transmit(frame, Emitter::Node(n), None);
        if needs_ack {
            let timeout = frame.tx_end().add_us(
                us(self.cfg.gateway.rx2_delay)
                    + self.ack_airtime_rx2
                    + us(self.cfg.node.rx_window_tolerance)
                    + SLOT_US,
            );
            self.schedule(
                timeout,
                Event::AckTimeout {
                    node: n,
                    counter,
                    attempt,
                },
            );
        }
    }

    fn on_ack_timeout(&mut self, n: usize, counter: u16, attempt: u32) {
        let now = self.now;
        let limit = self.cfg.node.retx_limit;
        let (lo, hi) = (us(self.cfg.node.backoff_min), us(self.cfg.node.backoff_max));
        let node = &mut self.nodes[n];
        let Some(m) = node.current.as_mut() else {
            return;
        };
        if m.counter != counter || m.attempt != attempt || m.acked || m.done {
            return;
        }
        if attempt >= limit {
            m.done = true;
            if self.cfg.log_events {
                self.log.push(LogRecord::Abandoned {
                    t_us: now.as_micros(),
                    node: node.addr.0,
                    counter,
                    attempts: attempt + 1,
                });
            }
            return;
        }
        m.attempt += 1;
        let backoff = if hi > lo {
            node.rng.gen_range(lo..=hi)
        } else {
            lo
        };
        self.schedule(
            now.add_us(backoff),
            Event::NodeTx {
                node: n,
                counter,
                attempt: attempt + 1,
            },
        );
    }

    // ---- radio ----

    fn link_power(&self, from: Emitter, to: Emitter, tx_power: f64) -> f64 {
        let pos = |e: Emitter| match e {
            Emitter::Node(i) => (self.nodes[i].x, self.nodes[i].y),
            Emitter::Gateway(i) => (self.gateways[i].x, self.gateways[i].y),
        };
        let (a, b) = (pos(from), pos(to));
        let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt().max(1.0);
        let gain = self.cfg.link.gateway_antenna_gain_db;
        let (ends, offset) = match (from, to) {
            (Emitter::Node(n), Emitter::Gateway(g)) | (Emitter::Gateway(g), Emitter::Node(n)) => {
                (1.0, self.node_offset[n][g])
            }
            (Emitter::Gateway(a), Emitter::Gateway(b)) => (2.0, self.gw_offset[a][b]),
            (Emitter::Node(_), Emitter::Node(_)) => (0.0, 0.0),
        };
        received_power(tx_power, d, &self.cfg.link).unwrap_or(f64::NEG_INFINITY)
            + ends * gain
            + offset
    }

    /// Whether `id` is decoded at `rx`, given every overlapping frame of the
    /// same class, channel and SF.
    fn decodes(&self, id: usize, rx: Emitter) -> Option<f64> {
        let x = &self.air[id];
        if x.from == rx {
            return None;
        }
        let power = self.link_power(x.from, rx, x.frame.radio.tx_power_dbm as f64);
        if power < self.cfg.link.sensitivity(x.frame.radio.spreading_factor) {
            return None;
        }
        let (s, e) = (x.frame.tx_start, x.frame.tx_end());
        let rivals = self.on_air.iter().filter_map(|&j| {
            let y = &self.air[j];
            (j != id
                && y.uplink_class == x.uplink_class
                && y.from != rx
                && y.frame.radio.channel == x.frame.radio.channel
                && y.frame.radio.spreading_factor == x.frame.radio.spreading_factor
                && y.frame.tx_start < e
                && y.frame.tx_end() > s)
                .then(|| self.link_power(y.from, rx, y.frame.radio.tx_power_dbm as f64))
        });
        captures(
            power,
            x.frame.radio.spreading_factor,
            rivals,
            &self.cfg.link,
        )
        .then_some(power)
    }

    fn on_tx_end(&mut self, id: usize) {
        if self.air[id].uplink_class {
            let frame = self.air[id].frame;
            let decoders: Vec<(usize, f64)> = (0..self.gateways.len())
                .filter(|&g| {
                    !self.gateways[g]
                        .runtime
                        .transmitting_during(frame.tx_start, frame.tx_end())
                })
                .filter_map(|g| self.decodes(id, Emitter::Gateway(g)).map(|p| (g, p)))
                .collect();
            if self.cfg.log_events {
                for &(g, _) in &decoders {
                    self.log.push(LogRecord::Rx {
                        t_us: self.now.as_micros(),
                        gateway: g as u32,
                        kind: frame.kind,
                        node: frame.subject_node.0,
                        counter: frame.counter,
                    });
                }
            }
            if frame.kind == FrameKind::Uplink {
                self.on_uplink(id, decoders);
            } else {
                self.on_overlay_frame(id, decoders);
            }
        } else {
            self.on_downlink(id);
        }
    }

    fn on_downlink(&mut self, id: usize) {
        let frame = self.air[id].frame;
        let Some(n) = self.node_index(frame.subject_node) else {
            return;
        };
        let tol = us(self.cfg.node.rx_window_tolerance);
        let (rx1, rx2) = (
            us(self.cfg.gateway.rx1_delay),
            us(self.cfg.gateway.rx2_delay),
        );
        let node = &self.nodes[n];
        let Some(m) = node.current.as_ref() else {
            return;
        };
        if m.counter != frame.counter || m.acked || m.done {
            return;
        }
        let start = frame.tx_start.as_micros();
        let near = |at: u64| start + tol >= at && start <= at + tol;
        let in_rx1 = near(m.last_end.as_micros() + rx1)
            && frame.radio.channel == m.last_channel
            && frame.radio.spreading_factor == node.radio.spreading_factor;
        let in_rx2 = near(m.last_end.as_micros() + rx2)
            && frame.radio.channel == self.cfg.plan.rx2_channel()
            && frame.radio.spreading_factor == self.cfg.plan.rx2_spreading_factor;
        if !(in_rx1 || in_rx2) || self.decodes(id, Emitter::Node(n)).is_none() {
            return;
        }
        let node = &mut self.nodes[n];
        let m = node.current.as_mut().unwrap();
        m.acked = true;
        node.stats.acked += 1;
        if frame.kind == FrameKind::NeighbourDownlink {
            self.metrics.neighbour_acks_delivered += 1;
        }
        if self.cfg.log_events {
            self.log.push(LogRecord::Acked {
                t_us: self.now.as_micros(),
                node: node.addr.0,
                counter: m.counter,
                attempt: m.attempt,
                kind: frame.kind,
            });
        }
    }

    fn node_index(&self, addr: NodeAddr) -> Option<usize> {
        self.index.get(&addr).copied()
    }

    fn deliver(&mut self, n: usize, counter: u16, late: bool, relayed: bool) {
        let node = &mut self.nodes[n];
        if node.received.insert(counter) {
            node.stats.unique_received += 1;
            if late {
                self.metrics.recovered_uplinks += 1;
            }
            if self.cfg.log_events {
                self.log.push(LogRecord::Delivered {
                    t_us: self.now.as_micros(),
                    node: node.addr.0,
                    counter,
                    late,
                    relayed,
                });
            }
        }
    }

    fn on_uplink(&mut self, id: usize, decoders: Vec<(usize, f64)>) {
        let frame = self.air[id].frame;
        let Emitter::Node(n) = self.air[id].from else {
            return;
        };
        let now = self.now;
        let net = self.nodes[n].network;
        if self.cfg.system == System::Ironwan {
            for &(g, _) in &decoders {
                let effects = self.gateways[g].runtime.on_receive(&frame, None, now);
                self.apply_effects(g, effects);
                self.drain_gateway(g);
            }
        }
        let mut own: Vec<(usize, f64)> = decoders
            .iter()
            .copied()
            .filter(|&(g, _)| self.gateways[g].network == net)
            .collect();
        own.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut foreign: Vec<(usize, f64)> = decoders
            .iter()
            .copied()
            .filter(|&(g, _)| self.gateways[g].network != net)
            .collect();
        foreign.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

        match self.cfg.system {
            System::Lorawan | System::Ironwan => {
                if !own.is_empty() {
                    self.deliver(n, frame.counter, false, false);
                }
            }
            System::Wcs => {
                if !own.is_empty() {
                    self.deliver(n, frame.counter, false, false);
                } else if !foreign.is_empty() {
                    self.metrics.wcs_relays += 1;
                    self.deliver(n, frame.counter, false, true);
                }
            }
            System::Flip => {
                if !decoders.is_empty() {
                    self.deliver(n, frame.counter, false, false);
                }
            }
        }
        if !frame.needs_ack {
            return;
        }
        match self.cfg.system {
            System::Lorawan => {
                own.iter().any(|&(g, _)| self.send_ack(g, &frame));
            }
            System::Ironwan => {
                if !own.iter().any(|&(g, _)| self.send_ack(g, &frame)) {
                    if let Some(&(g, _)) = own.first() {
                        let ack = self.ack_frame(g, &frame, false);
                        if self.gateways[g]
                            .runtime
                            .handover_downlink(ack, frame.tx_end(), now)
                        {
                            self.metrics.handovers_requested += 1;
                        }
                        self.drain_gateway(g);
                    }
                }
            }
            System::Wcs => {
                let own_sent = own.iter().any(|&(g, _)| self.send_ack(g, &frame));
                if !own_sent && foreign.iter().any(|&(g, _)| self.send_ack(g, &frame)) {
                    self.metrics.wcs_relays += 1;
                }
            }
            System::Flip => {
                let g = self.nodes[n].flip_gateway;
                if decoders.iter().any(|&(d, _)| d == g) {
                    self.send_ack(g, &frame);
                }
            }
        }
    }

    fn ack_frame(&self, g: usize, uplink: &Frame, rx2: bool) -> Frame {
        let gw = &self.cfg.gateway;
        let (radio, delay) = if rx2 {
            (
                RadioParams {
                    channel: self.cfg.plan.rx2_channel(),
                    spreading_factor: self.cfg.plan.rx2_spreading_factor,
                    bandwidth_hz: uplink.radio.bandwidth_hz,
                    tx_power_dbm: gw.rx2_tx_power_dbm,
                    band: Band::Band1,
                },
                gw.rx2_delay,
            )
        } else {
            (
                RadioParams {
                    tx_power_dbm: gw.rx1_tx_power_dbm,
                    ..uplink.radio
                },
                gw.rx1_delay,
            )
        };
        let len = self.cfg.node.ack_len;
        Frame {
            kind: FrameKind::DownlinkAck,
            source: Source::Gateway(GatewayId(g as u32)),
            subject_node: uplink.subject_node,
            counter: uplink.counter,
            payload_len: len,
            radio,
            needs_ack: false,
            tx_start: uplink.tx_end().add_us(us(delay)),
            airtime: compute_airtime(len as usize, &radio).expect("validated radio"),
        }
    }

    /// Tries RX1 then RX2 through gateway `g`.
    fn send_ack(&mut self, g: usize, uplink: &Frame) -> bool {
        for rx2 in [false, true] {
            let ack = self.ack_frame(g, uplink, rx2);
            if self.gateways[g].runtime.try_downlink(&ack) {
                self.transmit(ack, Emitter::Gateway(g), None);
                return true;
            }
        }
        false
    }

    fn on_overlay_frame(&mut self, id: usize, decoders: Vec<(usize, f64)>) {
        if self.cfg.system != System::Ironwan {
            return;
        }
        let frame = self.air[id].frame;
        let payload = self.air[id].payload.clone();
        let now = self.now;
        for (g, _) in decoders {
            let effects = self.gateways[g]
                .runtime
                .on_receive(&frame, payload.as_deref(), now);
            self.apply_effects(g, effects);
            self.drain_gateway(g);
        }
    }

    fn apply_effects(&mut self, g: usize, effects: Vec<Effect>) {
        for e in effects {
            if let Effect::ForwardToServer { frame, late: true } = e {
                // Only the node's own server knows what to do with it.
                if frame.subject_node.network().0 != self.gateways[g].network {
                    continue;
                }
                if let Some(n) = self.node_index(frame.subject_node) {
                    self.deliver(n, frame.counter, true, false);
                }
            }
        }
    }

    fn finish(mut self) -> RunOutput {
        let nodes: Vec<NodeMetrics> = self.nodes.iter().map(|n| n.stats.clone()).collect();
        let mut m = std::mem::take(&mut self.metrics);
        m.aggregate(&nodes);
        for gw in &self.gateways {
            let c = gw.runtime.counters();
            m.g2g_starved += c.g2g_starved;
            m.ack_abandoned += c.ack_abandoned;
            if self.cfg.system == System::Ironwan {
                m.max_agent_snapshot_bytes = m
                    .max_agent_snapshot_bytes
                    .max(gw.runtime.agent().snapshot().len() as u64);
            }
        }
        m.overhead_messages = match self.cfg.system {
            System::Ironwan => m.g2g_messages + m.acks_band1,
            System::Lorawan | System::Flip => m.acks_band1,
            System::Wcs => m.wcs_relays,
        };
        let violations = audit_duty_cycle(self.audit.iter().copied());
        m.duty_cycle_violations = violations.len() as u64;
        RunOutput {
            metrics: m,
            nodes,
            log: self.log,
            violations,
            audit: self.audit,
            gateway_counters: self
                .gateways
                .iter()
                .map(|g| g.runtime.counters().clone())
                .collect(),
        }
    }
}
