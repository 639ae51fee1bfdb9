//! Radio layer: LoRa time-on-air, log-distance path loss, capture-effect
//! collision resolution and sliding-window duty-cycle accounting.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Band, Frame, RadioParams, SimTime, Source};

pub const MIN_SF: u8 = 7;
pub const MAX_SF: u8 = 12;

/// Regulatory observation window for duty-cycle accounting.
pub const DUTY_CYCLE_WINDOW_US: u64 = 3_600 * 1_000_000;

const PREAMBLE_SYMBOLS: u64 = 8;
const CODING_RATE: u64 = 1; // 4/5

#[derive(Debug, Error, PartialEq)]
pub enum PhyError {
    #[error("spreading factor {0} outside 7..=12")]
    SpreadingFactor(u8),
    #[error("payload of {0} bytes exceeds 255")]
    PayloadTooLong(usize),
    #[error("bandwidth must be positive")]
    Bandwidth,
    #[error("distance must be positive, got {0} m")]
    Distance(f64),
}

/// Time on air in microseconds for an explicit-header, CRC-on, CR 4/5 LoRa
/// frame with an 8-symbol preamble.
pub fn compute_airtime(payload_len: usize, radio: &RadioParams) -> Result<u64, PhyError> {
    let sf = radio.spreading_factor;
    if !(MIN_SF..=MAX_SF).contains(&sf) {
        return Err(PhyError::SpreadingFactor(sf));
    }
    if payload_len > 255 {
        return Err(PhyError::PayloadTooLong(payload_len));
    }
    if radio.bandwidth_hz == 0 {
        return Err(PhyError::Bandwidth);
    }
    let sf = sf as i64;
    let low_data_rate = sf >= 11 && radio.bandwidth_hz <= 125_000;
    let de = low_data_rate as i64;
    let numerator = 8 * payload_len as i64 - 4 * sf + 28 + 16;
    let denominator = 4 * (sf - 2 * de);
    let blocks = if numerator > 0 {
        (numerator + denominator - 1) / denominator
    } else {
        0
    };
    let payload_symbols = 8 + blocks as u64 * (CODING_RATE + 4);
    // Preamble is n + 4.25 symbols; count in quarter symbols to stay exact.
    let quarter_symbols = (PREAMBLE_SYMBOLS * 4 + 17) + 4 * payload_symbols;
    let num = quarter_symbols as u128 * (1u128 << sf) * 1_000_000;
    let den = 4 * radio.bandwidth_hz as u128;
    Ok(((num + den / 2) / den) as u64)
}

/// Deterministic propagation and reception parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkModel {
    pub path_loss_exponent: f64,
    /// Loss at the 1 m reference distance.
    pub reference_loss_db: f64,
    pub noise_floor_dbm: f64,
    /// Receiver sensitivity for SF7..=SF12 at 125 kHz.
    pub sf_sensitivity: [f64; 6],
    pub capture_threshold_db: f64,
    /// Added at every gateway end of a link (elevated, higher-gain antennas).
    pub gateway_antenna_gain_db: f64,
    /// Standard deviation of the fixed per-link offset; 0 disables it.
    pub link_offset_sigma_db: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            path_loss_exponent: 2.7,
            reference_loss_db: 40.0,
            noise_floor_dbm: -117.0,
            sf_sensitivity: [-123.0, -126.0, -129.0, -132.0, -134.5, -137.0],
            capture_threshold_db: 6.0,
            gateway_antenna_gain_db: 0.0,
            link_offset_sigma_db: 0.0,
        }
    }
}

impl LinkModel {
    pub fn sensitivity(&self, sf: u8) -> f64 {
        let idx = sf.clamp(MIN_SF, MAX_SF) - MIN_SF;
        self.sf_sensitivity[idx as usize]
    }

    /// Lowest spreading factor whose sensitivity `rx_power` meets with
    /// `margin_db` to spare (`>=`), if any.
    pub fn lowest_sf_for(&self, rx_power: f64, margin_db: f64) -> Option<u8> {
        (MIN_SF..=MAX_SF).find(|&sf| rx_power - margin_db >= self.sensitivity(sf))
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.path_loss_exponent > 0.0) {
            return Err("path_loss_exponent must be positive".into());
        }
        if self.sf_sensitivity.windows(2).any(|w| w[1] >= w[0]) {
            return Err("sf_sensitivity must strictly decrease with SF".into());
        }
        if !(self.capture_threshold_db >= 0.0) {
            return Err("capture_threshold_db must be non-negative".into());
        }
        if !(self.link_offset_sigma_db >= 0.0) {
            return Err("link_offset_sigma_db must be non-negative".into());
        }
        Ok(())
    }
}

/// Log-distance received power in dBm.
pub fn received_power(
    tx_power_dbm: f64,
    distance_m: f64,
    model: &LinkModel,
) -> Result<f64, PhyError> {
    if !(distance_m > 0.0) {
        return Err(PhyError::Distance(distance_m));
    }
    Ok(tx_power_dbm
        - model.reference_loss_db
        - 10.0 * model.path_loss_exponent * distance_m.log10())
}

/// Whether a frame received at `power` survives interferers on the same
/// channel and spreading factor. Interferers on other channels or SFs must
/// already be filtered out by the caller.
pub fn captures(
    power: f64,
    sf: u8,
    same_channel_sf: impl IntoIterator<Item = f64>,
    model: &LinkModel,
) -> bool {
    power >= model.sensitivity(sf)
        && same_channel_sf
            .into_iter()
            .all(|other| power - other >= model.capture_threshold_db)
}

/// Decodable subset of a set of mutually overlapping receptions at one
/// receiver, returned as indices into `overlapping` in ascending order.
pub fn resolve_collisions(overlapping: &[(Frame, f64)], model: &LinkModel) -> Vec<usize> {
    (0..overlapping.len())
        .filter(|&i| {
            let (frame, power) = &overlapping[i];
            let rivals = overlapping
                .iter()
                .enumerate()
                .filter_map(|(j, (other, p))| {
                    (j != i
                        && other.radio.channel == frame.radio.channel
                        && other.radio.spreading_factor == frame.radio.spreading_factor)
                        .then_some(*p)
                });
            captures(*power, frame.radio.spreading_factor, rivals, model)
        })
        .collect()
}

/// Outcome of a duty-cycle reservation attempt.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Reservation {
    Accept,
    Reject,
}

/// Per-transmitter, per-band airtime budget over a sliding one-hour window.
///
/// A transmission is charged to the window containing its start time; a
/// window `(T - W, T]` may hold at most `limit * W` of airtime.
#[derive(Clone, Debug)]
pub struct DutyCycleTracker {
    band: Band,
    budget_us: u64,
    window_us: u64,
    /// (start, airtime) sorted by start.
    records: VecDeque<(u64, u64)>,
}

impl DutyCycleTracker {
    pub fn new(band: Band) -> Self {
        Self::with_limit(band, band.duty_cycle_limit())
    }

    pub fn with_limit(band: Band, limit: f64) -> Self {
        Self {
            band,
            budget_us: (limit * DUTY_CYCLE_WINDOW_US as f64).round() as u64,
            window_us: DUTY_CYCLE_WINDOW_US,
            records: VecDeque::new(),
        }
    }

    pub fn band(&self) -> Band {
        self.band
    }

    pub fn budget_us(&self) -> u64 {
        self.budget_us
    }

    fn window_sum(&self, end: u64) -> u64 {
        let lo = self
            .records
            .partition_point(|&(s, _)| s + self.window_us <= end);
        let hi = self.records.partition_point(|&(s, _)| s <= end);
        self.records.range(lo..hi.max(lo)).map(|&(_, a)| a).sum()
    }

    /// Whether a transmission of `airtime` starting at `start` fits.
    pub fn can_reserve(&self, airtime: u64, start: SimTime) -> bool {
        let s = start.as_micros();
        if airtime > self.budget_us {
            return false;
        }
        // Only windows whose end lies in [s, s + W) contain the new start;
        // their sums peak at record starts.
        let horizon = s.saturating_add(self.window_us);
        let first_after = self.records.partition_point(|&(r, _)| r <= s);
        std::iter::once(s)
            .chain(
                self.records
                    .range(first_after..)
                    .map(|&(r, _)| r)
                    .take_while(|&r| r < horizon),
            )
            .all(|end| self.window_sum(end) + airtime <= self.budget_us)
    }

    /// Records the transmission if it fits the budget.
    pub fn try_reserve(&mut self, airtime: u64, start: SimTime) -> Reservation {
        if airtime == 0 || !self.can_reserve(airtime, start) {
            return Reservation::Reject;
        }
        let s = start.as_micros();
        let pos = self.records.partition_point(|&(r, _)| r <= s);
        self.records.insert(pos, (s, airtime));
        Reservation::Accept
    }

    /// Earliest start at or after `from` at which `airtime` would fit.
    pub fn earliest_available(&self, airtime: u64, from: SimTime) -> Option<SimTime> {
        if airtime > self.budget_us {
            return None;
        }
        let f = from.as_micros();
        // Records are sorted, so the instants at which each leaves the
        // window are too.
        std::iter::once(f)
            .chain(
                self.records
                    .iter()
                    .map(|&(r, _)| r + self.window_us)
                    .filter(|&c| c > f),
            )
            .map(SimTime::from_micros)
            .find(|&c| self.can_reserve(airtime, c))
    }

    /// Airtime charged to the window ending at `now`.
    pub fn used_in_window(&self, now: SimTime) -> u64 {
        self.window_sum(now.as_micros())
    }

    /// Drops records that can no longer affect reservations at or after `now`.
    pub fn prune(&mut self, now: SimTime) {
        let now = now.as_micros();
        while matches!(self.records.front(), Some(&(s, _)) if s + self.window_us <= now) {
            self.records.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// One transmission as seen by the duty-cycle audit.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct AuditTx {
    pub transmitter: Source,
    pub band: Band,
    pub start: SimTime,
    pub airtime: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DutyCycleViolation {
    pub transmitter: String,
    pub band: Band,
    pub window_end_us: u64,
    pub used_us: u64,
    pub budget_us: u64,
}

/// `(start, end)` of each transmission, per (transmitter, band).
type Histories = BTreeMap<(String, u8), (Band, Vec<(u64, u64)>)>;

/// Re-checks every (transmitter, band) history against its budget with a
/// two-pointer sweep, independently of [`DutyCycleTracker`].
pub fn audit_duty_cycle(log: impl IntoIterator<Item = AuditTx>) -> Vec<DutyCycleViolation> {
    let mut per_key: Histories = BTreeMap::new();
    for tx in log {
        let key = (tx.transmitter.to_string(), tx.band as u8);
        per_key
            .entry(key)
            .or_insert_with(|| (tx.band, Vec::new()))
            .1
            .push((tx.start.as_micros(), tx.airtime));
    }
    let mut out = Vec::new();
    for ((who, _), (band, mut txs)) in per_key {
        let budget = (band.duty_cycle_limit() * DUTY_CYCLE_WINDOW_US as f64).round() as u64;
        txs.sort_unstable();
        let mut lo = 0;
        let mut sum = 0u64;
        for hi in 0..txs.len() {
            sum += txs[hi].1;
            let end = txs[hi].0;
            while txs[lo].0 + DUTY_CYCLE_WINDOW_US <= end {
                sum -= txs[lo].1;
                lo += 1;
            }
            // Only report once all transmissions sharing this start are in.
            let last_at_end = hi + 1 == txs.len() || txs[hi + 1].0 != end;
            if last_at_end && sum > budget {
                out.push(DutyCycleViolation {
                    transmitter: who.clone(),
                    band,
                    window_end_us: end,
                    used_us: sum,
                    budget_us: budget,
                });
            }
        }
    }
    out
}
