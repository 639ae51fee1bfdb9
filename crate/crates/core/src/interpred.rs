//! Tabular SARSA agent that picks a future slot and channel for overlay
//! transmissions so they avoid node traffic overheard by the gateway.
//!
//! The gateway is half-duplex, so the agent learns from pseudo actions:
//! every slot it picks an action it does not execute and, once the chosen
//! window has passed, scores it against the traffic that was overheard.

use std::collections::{HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{slot_of, SimTime, SLOT_US, US_PER_SEC};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterPredConfig {
    /// Past slots held in the state.
    pub past_slots: usize,
    /// Future slots an action may target.
    pub future_slots: usize,
    pub channels: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Saturation value of one state cell.
    pub count_cap: u8,
    /// Seconds of pseudo-action training before real requests are served.
    pub training_duration: f64,
    /// Airtime assumed for the overlay frame when scoring an action.
    pub probe_airtime_us: u64,
    /// Extra wait, after an action's window closes, for frames overlapping
    /// it to finish and be overheard.
    pub resolve_horizon_us: u64,
}

impl Default for InterPredConfig {
    fn default() -> Self {
        Self {
            past_slots: 4,
            future_slots: 8,
            channels: 3,
            alpha: 0.8,
            gamma: 0.1,
            epsilon: 0.2,
            count_cap: 5,
            training_duration: 3.0 * 3600.0,
            probe_airtime_us: 100_000,
            resolve_horizon_us: 2_500_000,
        }
    }
}

impl InterPredConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.past_slots == 0 || self.future_slots == 0 || self.channels == 0 {
            return Err("interpred slot and channel counts must be positive".into());
        }
        if self.past_slots * self.channels * 3 > 64 {
            return Err("interpred state does not fit a 64-bit encoding".into());
        }
        if !(1..=7).contains(&self.count_cap) {
            return Err("interpred.count_cap must be in 1..=7".into());
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("epsilon", self.epsilon),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("interpred.{name} must lie in [0, 1]"));
            }
        }
        if self.gamma >= 1.0 {
            return Err("interpred.gamma must be below 1".into());
        }
        if !(self.training_duration >= 0.0) {
            return Err("interpred.training_duration must be non-negative".into());
        }
        Ok(())
    }

    pub fn actions(&self) -> usize {
        (self.future_slots + 1) * self.channels
    }

    /// Ceiling on interference counts fed to the reward, which keeps every
    /// reward within `2 * count_cap * channels`.
    pub fn interference_cap(&self) -> u32 {
        self.count_cap as u32 * self.channels as u32
    }

    /// Bound on |Q| implied by the largest reward magnitude.
    pub fn q_bound(&self) -> f64 {
        let r_max = f64::max(1.0, 2.0 * self.interference_cap() as f64);
        r_max / (1.0 - self.gamma)
    }
}

/// Index of the action that transmits `f` slots ahead on `channel`; `f = 0`
/// is the no-transmission action of that channel block.
pub fn action_index(f: usize, channel: usize, future_slots: usize) -> usize {
    channel * (future_slots + 1) + f
}

/// Inverse of [`action_index`]: `(f, channel)`.
pub fn action_parts(index: usize, future_slots: usize) -> (usize, usize) {
    (index % (future_slots + 1), index / (future_slots + 1))
}

/// Reward of transmitting `i` slots ahead over `m` node frames.
pub fn transmit_reward(i: usize, m: u32, future_slots: usize) -> f64 {
    let urgency = 1.0 - i as f64 / future_slots as f64;
    if m == 0 {
        urgency
    } else {
        -2.0 * m as f64 * urgency
    }
}

/// Reward of declining to transmit: the rewards the transmit actions would
/// have earned, summed and divided by the number of future slots.
pub fn no_tx_reward(counterfactual: impl IntoIterator<Item = f64>, future_slots: usize) -> f64 {
    counterfactual.into_iter().sum::<f64>() / future_slots as f64
}

/// One SARSA step on a single table entry.
pub fn sarsa_update(q: f64, reward: f64, q_next: f64, alpha: f64, gamma: f64) -> f64 {
    q + alpha * (reward + gamma * q_next - q)
}

/// Highest-valued action, ties to the lowest index.
pub fn greedy(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy choice over a row of action values.
pub fn choose_action<R: Rng>(row: &[f32], epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..row.len())
    } else {
        greedy(row)
    }
}

/// Per-slot, per-channel counts of overheard frames over the last few
/// slots. Column `past_slots - 1` is the current slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpectrumState {
    past: usize,
    channels: usize,
    cap: u8,
    cells: Vec<u8>,
}

impl SpectrumState {
    pub fn new(past: usize, channels: usize, cap: u8) -> Self {
        Self {
            past,
            channels,
            cap,
            cells: vec![0; past * channels],
        }
    }

    pub fn get(&self, slot: usize, channel: usize) -> u8 {
        self.cells[slot * self.channels + channel]
    }

    /// Count on `channel` in the current slot.
    pub fn current(&self, channel: usize) -> u8 {
        self.get(self.past - 1, channel)
    }

    /// Records a frame that finished in the current slot: every slot it
    /// spanned, up to the window length, gains one message.
    pub fn ingest(&mut self, airtime_us: u64, channel: usize) {
        if channel >= self.channels {
            return;
        }
        let spanned = airtime_us.div_ceil(SLOT_US).max(1) as usize;
        for slot in self.past.saturating_sub(spanned)..self.past {
            let cell = &mut self.cells[slot * self.channels + channel];
            *cell = (*cell + 1).min(self.cap);
        }
    }

    /// Shifts the window one slot into the past; the new current slot is
    /// empty.
    pub fn advance(&mut self) {
        self.cells.copy_within(self.channels.., 0);
        let start = (self.past - 1) * self.channels;
        self.cells[start..].fill(0);
    }

    pub fn is_empty(&self) -> bool {
        self.cells.iter().all(|&c| c == 0)
    }

    /// Three bits per cell, oldest slot first.
    pub fn encode(&self) -> u64 {
        self.cells
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &c)| acc | ((c as u64 & 0b111) << (3 * i)))
    }

    pub fn decode(key: u64, past: usize, channels: usize, cap: u8) -> Self {
        let cells = (0..past * channels)
            .map(|i| ((key >> (3 * i)) & 0b111) as u8)
            .collect();
        Self {
            past,
            channels,
            cap,
            cells,
        }
    }
}

/// Lazily materialised action-value table keyed by encoded state.
#[derive(Clone, Debug, Default)]
pub struct QTable {
    actions: usize,
    rows: HashMap<u64, Vec<f32>>,
}

impl QTable {
    pub fn new(actions: usize) -> Self {
        Self {
            actions,
            rows: HashMap::new(),
        }
    }

    pub fn value(&self, state: u64, action: usize) -> f32 {
        self.rows.get(&state).map_or(0.0, |r| r[action])
    }

    /// Row for `state`; unseen states read as all zeros.
    pub fn row(&self, state: u64) -> std::borrow::Cow<'_, [f32]> {
        match self.rows.get(&state) {
            Some(r) => std::borrow::Cow::Borrowed(r),
            None => std::borrow::Cow::Owned(vec![0.0; self.actions]),
        }
    }

    pub fn set(&mut self, state: u64, action: usize, value: f32) {
        let actions = self.actions;
        self.rows.entry(state).or_insert_with(|| vec![0.0; actions])[action] = value;
    }

    pub fn states(&self) -> usize {
        self.rows.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u64, &Vec<f32>)> {
        self.rows.iter()
    }

    pub fn max_abs(&self) -> f32 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug)]
struct Decision {
    slot: u64,
    state: u64,
    action: usize,
}

/// Counters describing what the agent has done so far.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AgentStats {
    pub pseudo_actions: u64,
    pub updates: u64,
    pub real_requests: u64,
    pub real_granted: u64,
}

/// A (slot, channel) grant for an overlay transmission.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct SlotGrant {
    pub start: SimTime,
    pub channel: u8,
    pub slots_ahead: usize,
}

/// One gateway's interference predictor.
#[derive(Clone, Debug)]
pub struct InterPredAgent {
    cfg: InterPredConfig,
    state: SpectrumState,
    q: QTable,
    slot: u64,
    /// Overheard frames as (start, end, channel), ordered by end.
    heard: VecDeque<(u64, u64, u8)>,
    pending: VecDeque<Decision>,
    /// State key at the close of the most recent slot.
    closed: Option<u64>,
    rng: ChaCha8Rng,
    stats: AgentStats,
}

impl InterPredAgent {
    pub fn new(cfg: InterPredConfig, seed: u64) -> Self {
        let state = SpectrumState::new(cfg.past_slots, cfg.channels, cfg.count_cap);
        let q = QTable::new(cfg.actions());
        Self {
            cfg,
            state,
            q,
            slot: 0,
            heard: VecDeque::new(),
            pending: VecDeque::new(),
            closed: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: AgentStats::default(),
        }
    }

    pub fn config(&self) -> &InterPredConfig {
        &self.cfg
    }

    pub fn state(&self) -> &SpectrumState {
        &self.state
    }

    pub fn q_table(&self) -> &QTable {
        &self.q
    }

    pub fn stats(&self) -> &AgentStats {
        &self.stats
    }

    /// Index of the slot the state's newest column describes.
    pub fn current_slot(&self) -> u64 {
        self.slot
    }

    /// A frame on `channel` finished arriving at `now`.
    pub fn ingest(&mut self, airtime_us: u64, channel: u8, now: SimTime) {
        self.catch_up(now);
        let end = now.as_micros();
        self.state.ingest(airtime_us, channel as usize);
        self.heard
            .push_back((end.saturating_sub(airtime_us), end, channel));
    }

    /// Moves the agent to `now`, closing every slot that ended on the way:
    /// a pseudo action is drawn for each closed slot, matured decisions are
    /// scored and learned from, and the state window slides.
    pub fn on_slot_boundary(&mut self, now: SimTime) {
        self.catch_up(now);
        self.resolve_due(now);
    }

    fn catch_up(&mut self, now: SimTime) {
        let target = slot_of(now);
        while self.slot < target {
            let key = self.state.encode();
            let row = self.q.row(key);
            let action = choose_action(&row, self.cfg.epsilon, &mut self.rng);
            self.pending.push_back(Decision {
                slot: self.slot,
                state: key,
                action,
            });
            self.stats.pseudo_actions += 1;
            self.closed = Some(key);
            self.state.advance();
            self.slot += 1;
        }
    }

    fn window(&self, slot: u64, i: usize) -> (u64, u64) {
        let start = (slot + i as u64) * SLOT_US;
        (start, start + self.cfg.probe_airtime_us)
    }

    /// Overheard frames on `channel` overlapping `[w0, w1)`, capped.
    fn interference(&self, channel: usize, w0: u64, w1: u64) -> u32 {
        let hits = self
            .heard
            .iter()
            .filter(|&&(s, e, c)| c as usize == channel && s < w1 && e > w0)
            .count() as u32;
        hits.min(self.cfg.interference_cap())
    }

    /// Realised reward of `action` decided at the end of `slot`.
    pub fn realised_reward(&self, slot: u64, action: usize) -> f64 {
        let f = self.cfg.future_slots;
        let (i, c) = action_parts(action, f);
        if i > 0 {
            let (w0, w1) = self.window(slot, i);
            return transmit_reward(i, self.interference(c, w0, w1), f);
        }
        let rewards = (1..=f).map(|i| {
            let (w0, w1) = self.window(slot, i);
            transmit_reward(i, self.interference(c, w0, w1), f)
        });
        no_tx_reward(rewards, f)
    }

    fn due_at(&self, slot: u64) -> u64 {
        (slot + self.cfg.future_slots as u64 + 1) * SLOT_US
            + self.cfg.probe_airtime_us
            + self.cfg.resolve_horizon_us
    }

    fn resolve_due(&mut self, now: SimTime) {
        let now = now.as_micros();
        while self.pending.len() >= 2 && self.due_at(self.pending[0].slot) <= now {
            let d = self.pending.pop_front().expect("len checked");
            let next = &self.pending[0];
            let q_next = self.q.value(next.state, next.action) as f64;
            let reward = self.realised_reward(d.slot, d.action);
            let q = self.q.value(d.state, d.action) as f64;
            let updated = sarsa_update(q, reward, q_next, self.cfg.alpha, self.cfg.gamma);
            if self.cfg.alpha > 0.0 {
                self.q.set(d.state, d.action, updated as f32);
            }
            self.stats.updates += 1;
        }
        // Frames ending before the oldest open window can no longer matter.
        let keep_from = self
            .pending
            .front()
            .map_or(now, |d| d.slot * SLOT_US)
            .min(now);
        while matches!(self.heard.front(), Some(&(_, e, _)) if e < keep_from) {
            self.heard.pop_front();
        }
    }

    /// Whether the pseudo-action training phase is over at `now`.
    pub fn trained(&self, now: SimTime) -> bool {
        now.as_secs_f64() >= self.cfg.training_duration
    }

    /// Slot the most recent decision refers to: the last closed slot, or
    /// the current one before any slot has closed.
    fn decision_slot(&self) -> u64 {
        if self.closed.is_some() {
            self.slot - 1
        } else {
            self.slot
        }
    }

    /// Greedy action for a real overlay request at `now`, decided on the
    /// same footing as the pseudo action of the last closed slot. A best
    /// action without a positive value becomes the no-transmission action of
    /// its channel. `None` while training. Real requests are never learned
    /// from.
    pub fn request_action(&mut self, now: SimTime) -> Option<usize> {
        self.catch_up(now);
        self.stats.real_requests += 1;
        if !self.trained(now) {
            return None;
        }
        let key = self.closed.unwrap_or_else(|| self.state.encode());
        let row = self.q.row(key);
        let best = greedy(&row);
        let value = row[best];
        let (i, c) = action_parts(best, self.cfg.future_slots);
        if i > 0 && value <= 0.0 {
            return Some(action_index(0, c, self.cfg.future_slots));
        }
        Some(best)
    }

    /// Greedy grant for a real overlay transmission. Declines while
    /// training, when no-transmission wins, or when no action has a
    /// positive value. The grant never starts before `now`.
    pub fn request_slot(&mut self, now: SimTime) -> Option<SlotGrant> {
        let action = self.request_action(now)?;
        let (i, c) = action_parts(action, self.cfg.future_slots);
        if i == 0 {
            return None;
        }
        self.stats.real_granted += 1;
        Some(SlotGrant {
            start: SimTime::of_slot(self.decision_slot() + i as u64).max(now),
            channel: c as u8,
            slots_ahead: i,
        })
    }

    /// Little-endian snapshot: header `(P, F, C)` as u32 and
    /// `(alpha, gamma, epsilon)` as f32, a state count, then per state with
    /// any non-zero value, keys ascending: the key (u64), the number of
    /// non-zero values (u8) and that many `(action u8, value f32)` pairs.
    /// Most states are visited a handful of times and hold only a few
    /// learned values, so this is several times smaller than whole rows.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [
            self.cfg.past_slots,
            self.cfg.future_slots,
            self.cfg.channels,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in [self.cfg.alpha, self.cfg.gamma, self.cfg.epsilon] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut keys: Vec<u64> = self
            .q
            .rows
            .iter()
            .filter(|(_, row)| row.iter().any(|&v| v != 0.0))
            .map(|(&k, _)| k)
            .collect();
        keys.sort_unstable();
        out.extend_from_slice(&(keys.len() as u32).to_le_bytes());
        for k in keys {
            let row = &self.q.rows[&k];
            out.extend_from_slice(&k.to_le_bytes());
            out.push(row.iter().filter(|&&v| v != 0.0).count() as u8);
            for (a, v) in row.iter().enumerate().filter(|(_, &v)| v != 0.0) {
                out.push(a as u8);
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Rebuilds an agent from [`snapshot`](Self::snapshot) bytes. Fields the
    /// snapshot does not carry come from `base`.
    pub fn restore(bytes: &[u8], base: InterPredConfig, seed: u64) -> Result<Self, SnapshotError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let past = r.u32()? as usize;
        let future = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let alpha = r.f32()? as f64;
        let gamma = r.f32()? as f64;
        let epsilon = r.f32()? as f64;
        let cfg = InterPredConfig {
            past_slots: past,
            future_slots: future,
            channels,
            alpha,
            gamma,
            epsilon,
            ..base
        };
        cfg.validate().map_err(SnapshotError::Config)?;
        let entries = r.u32()? as usize;
        let mut agent = Self::new(cfg, seed);
        let actions = agent.cfg.actions();
        for _ in 0..entries {
            let key = r.u64()?;
            let count = r.u8()? as usize;
            if count > actions {
                return Err(SnapshotError::Config(format!(
                    "{count} values for {actions} actions"
                )));
            }
            let mut row = vec![0.0; actions];
            for _ in 0..count {
                let a = r.u8()? as usize;
                let v = r.f32()?;
                *row.get_mut(a)
                    .ok_or_else(|| SnapshotError::Config(format!("action {a} out of range")))? = v;
            }
            agent.q.rows.insert(key, row);
        }
        if r.pos != bytes.len() {
            return Err(SnapshotError::Trailing(bytes.len() - r.pos));
        }
        Ok(agent)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SnapshotError {
    #[error("snapshot truncated at byte {0}")]
    Truncated(usize),
    #[error("snapshot has {0} trailing bytes")]
    Trailing(usize),
    #[error("snapshot header invalid: {0}")]
    Config(String),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], SnapshotError> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or(SnapshotError::Truncated(self.pos))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice length is N"))
    }
    fn u8(&mut self) -> Result<u8, SnapshotError> {
        self.take::<1>().map(|b| b[0])
    }
    fn u32(&mut self) -> Result<u32, SnapshotError> {
        self.take::<4>().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Result<u64, SnapshotError> {
        self.take::<8>().map(u64::from_le_bytes)
    }
    fn f32(&mut self) -> Result<f32, SnapshotError> {
        self.take::<4>().map(f32::from_le_bytes)
    }
}

/// Seconds to microseconds, for config fields given in seconds.
pub fn secs_to_us(s: f64) -> u64 {
    (s * US_PER_SEC as f64).round() as u64
}
