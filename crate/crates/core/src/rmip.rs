//! Streaming per-node predictor of uplink inter-arrival times, used by a
//! gateway to notice that an expected uplink never arrived.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::types::{counter_gap, NodeAddr, SimTime, US_PER_SEC};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmipConfig {
    /// Window size: samples per estimate and consecutive deviations that
    /// signal a period change.
    pub n: usize,
    /// Deviation threshold in seconds.
    pub e: f64,
    /// Two-sided t critical value for accepting the median.
    pub t_crit: f64,
    /// Lateness allowance in seconds before an expected uplink is missing.
    pub grace: f64,
    /// Larger counter jumps are treated as a node reset.
    pub max_counter_gap: u16,
}

impl Default for RmipConfig {
    fn default() -> Self {
        Self {
            n: 10,
            e: 1.0,
            t_crit: 0.703,
            grace: 1.0,
            max_counter_gap: 64,
        }
    }
}

impl RmipConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n < 2 {
            return Err("rmip.n must be at least 2".into());
        }
        if !(self.e > 0.0) {
            return Err("rmip.e must be positive".into());
        }
        if !(self.t_crit > 0.0) {
            return Err("rmip.t_crit must be positive".into());
        }
        if !(self.grace >= 0.0) {
            return Err("rmip.grace must be non-negative".into());
        }
        if self.max_counter_gap == 0 {
            return Err("rmip.max_counter_gap must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum RmipEvent {
    IntervalLearned {
        delta_t: f64,
    },
    /// The old period was abandoned; `relearned` is the new estimate if the
    /// buffer already supports one.
    ChangeDetected {
        previous: f64,
        relearned: Option<f64>,
    },
    AnchorReset {
        anchor_us: u64,
    },
    /// Counter jump beyond the configured ceiling; state restarted.
    NodeReset,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MissingReport {
    pub node: NodeAddr,
    pub last_counter: u16,
}

/// Splits the time between two arrivals evenly over the counter gap. The
/// remainder microseconds go to the earliest intervals so that the parts
/// always sum to the elapsed time.
pub fn fill_missing(gap: u16, last_arrival: SimTime, new_time: SimTime) -> Vec<u64> {
    let parts = gap.max(1) as u64;
    let elapsed = new_time.since(last_arrival);
    let base = elapsed / parts;
    let rem = elapsed % parts;
    (0..parts).map(|i| base + u64::from(i < rem)).collect()
}

/// Lower-middle median of `samples`, or `None` for an empty slice.
pub fn lower_median(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted[(sorted.len() - 1) / 2])
}

/// Median of a full window if the sample mean is statistically
/// indistinguishable from it, else `None`.
pub fn estimate_interval(samples: &[f64], cfg: &RmipConfig) -> Option<f64> {
    if samples.len() != cfg.n {
        return None;
    }
    let median = lower_median(samples)?;
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    // Relative floor so f32 rounding noise counts as zero spread.
    if sd <= 1e-9 * median.abs().max(1.0) {
        return Some(median);
    }
    let t = (mean - median) * n.sqrt() / sd;
    (t.abs() <= cfg.t_crit).then_some(median)
}

/// Predictor state for one node. Memory is bounded by the window size.
#[derive(Clone, Debug)]
pub struct RmipNodeState {
    node: NodeAddr,
    intervals: VecDeque<f32>,
    last_arrival: Option<SimTime>,
    last_counter: u16,
    delta_t: Option<f32>,
    anchor: SimTime,
    anchor_count: u32,
    deviation_run: u32,
    /// Expected arrival (µs) already reported as missing.
    reported: Option<u64>,
}

impl RmipNodeState {
    pub fn new(node: NodeAddr) -> Self {
        Self {
            node,
            intervals: VecDeque::new(),
            last_arrival: None,
            last_counter: 0,
            delta_t: None,
            anchor: SimTime::ZERO,
            anchor_count: 0,
            deviation_run: 0,
            reported: None,
        }
    }

    pub fn node(&self) -> NodeAddr {
        self.node
    }

    /// Current period estimate in seconds.
    pub fn delta_t(&self) -> Option<f64> {
        self.delta_t.map(f64::from)
    }

    pub fn anchor(&self) -> SimTime {
        self.anchor
    }

    pub fn anchor_count(&self) -> u32 {
        self.anchor_count
    }

    pub fn last_arrival(&self) -> Option<SimTime> {
        self.last_arrival
    }

    pub fn last_counter(&self) -> u16 {
        self.last_counter
    }

    pub fn deviation_run(&self) -> u32 {
        self.deviation_run
    }

    pub fn buffered(&self) -> usize {
        self.intervals.len()
    }

    fn delta_us(&self) -> Option<u64> {
        self.delta_t
            .map(|d| (d as f64 * US_PER_SEC as f64).round() as u64)
    }

    /// Sets the predictor state directly; for replaying a known timeline.
    pub fn with_learned(
        mut self,
        delta_t: f64,
        anchor: SimTime,
        anchor_count: u32,
        last_arrival: SimTime,
        last_counter: u16,
    ) -> Self {
        self.delta_t = Some(delta_t as f32);
        self.anchor = anchor;
        self.anchor_count = anchor_count;
        self.last_arrival = Some(last_arrival);
        self.last_counter = last_counter;
        self
    }

    fn restart(&mut self, counter: u16, arrival: SimTime) {
        let node = self.node;
        *self = Self::new(node);
        self.last_arrival = Some(arrival);
        self.last_counter = counter;
        self.anchor = arrival;
    }

    fn estimate(&self, cfg: &RmipConfig) -> Option<f64> {
        let samples: Vec<f64> = self.intervals.iter().map(|&x| f64::from(x)).collect();
        estimate_interval(&samples, cfg)
    }

    /// Applies the reference-anchor rule for a message at `arrival`, using
    /// the current `anchor_count` as the number of periods since the anchor.
    /// Returns true if the anchor moved.
    pub fn update_anchor(&mut self, arrival: SimTime) -> bool {
        let Some(dt) = self.delta_us() else {
            return false;
        };
        if arrival.since(self.anchor) < self.anchor_count as u64 * dt {
            self.anchor = arrival;
            self.anchor_count = 0;
            true
        } else {
            false
        }
    }

    /// Feeds one received uplink (identified by its counter) into the
    /// predictor. Duplicates and stale counters are ignored.
    pub fn observe(&mut self, counter: u16, arrival: SimTime, cfg: &RmipConfig) -> Vec<RmipEvent> {
        let mut events = Vec::new();
        let Some(last) = self.last_arrival else {
            self.restart(counter, arrival);
            return events;
        };
        let gap = counter_gap(self.last_counter, counter);
        if gap == 0 || gap >= 0x8000 || arrival <= last {
            return events;
        }
        if gap > cfg.max_counter_gap {
            self.restart(counter, arrival);
            events.push(RmipEvent::NodeReset);
            return events;
        }

        let mut changed = false;
        for us in fill_missing(gap, last, arrival) {
            let sample = (us as f64 / US_PER_SEC as f64) as f32;
            if self.intervals.len() == cfg.n {
                self.intervals.pop_front();
            }
            self.intervals.push_back(sample);

            match self.delta_t {
                Some(dt) => {
                    if (f64::from(dt) - f64::from(sample)).abs() > cfg.e {
                        self.deviation_run += 1;
                    } else {
                        self.deviation_run = 0;
                    }
                    if self.deviation_run as usize >= cfg.n {
                        let relearned = self.estimate(cfg);
                        self.delta_t = relearned.map(|d| d as f32);
                        self.deviation_run = 0;
                        self.anchor = arrival;
                        self.anchor_count = 0;
                        changed = true;
                        events.push(RmipEvent::ChangeDetected {
                            previous: f64::from(dt),
                            relearned,
                        });
                    }
                }
                None => {
                    if self.intervals.len() == cfg.n {
                        if let Some(m) = self.estimate(cfg) {
                            self.delta_t = Some(m as f32);
                            self.deviation_run = 0;
                            events.push(RmipEvent::IntervalLearned { delta_t: m });
                        }
                    }
                }
            }
        }

        self.last_arrival = Some(arrival);
        self.last_counter = counter;
        if self.anchor != arrival {
            self.anchor_count += gap as u32;
        }
        if !changed && self.update_anchor(arrival) {
            events.push(RmipEvent::AnchorReset {
                anchor_us: arrival.as_micros(),
            });
        }
        events
    }

    /// Expected arrival of the next uplink, once the period is known.
    pub fn expected_next(&self) -> Option<SimTime> {
        let dt = self.delta_us()?;
        self.last_arrival?;
        Some(self.anchor.add_us((self.anchor_count as u64 + 1) * dt))
    }

    /// Earliest time at which [`poll_missing`](Self::poll_missing) could
    /// report, for scheduling polls.
    pub fn next_due(&self, cfg: &RmipConfig) -> Option<SimTime> {
        let expected = self.expected_next()?;
        if self.reported == Some(expected.as_micros()) {
            return None;
        }
        Some(expected.add_us(grace_us(cfg) + 1))
    }

    /// Reports the next expected uplink as missing once it is more than
    /// `grace` overdue. Each expected arrival is reported at most once.
    pub fn poll_missing(&mut self, now: SimTime, cfg: &RmipConfig) -> Option<MissingReport> {
        let expected = self.expected_next()?;
        let last = self.last_arrival?;
        if now <= expected.add_us(grace_us(cfg)) || last >= now {
            return None;
        }
        if self.reported == Some(expected.as_micros()) {
            return None;
        }
        self.reported = Some(expected.as_micros());
        Some(MissingReport {
            node: self.node,
            last_counter: self.last_counter,
        })
    }
}

fn grace_us(cfg: &RmipConfig) -> u64 {
    (cfg.grace * US_PER_SEC as f64).round() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const S: u64 = US_PER_SEC;

    fn at(secs: u64) -> SimTime {
        SimTime::from_secs(secs)
    }

    fn feed(
        state: &mut RmipNodeState,
        cfg: &RmipConfig,
        counter: u16,
        secs: f64,
    ) -> Vec<RmipEvent> {
        state.observe(counter, SimTime::from_secs_f64(secs), cfg)
    }

    #[test]
    fn fill_examples() {
        assert_eq!(fill_missing(1, at(0), at(180)), vec![180 * S]);
        assert_eq!(fill_missing(2, at(0), at(360)), vec![180 * S; 2]);
        assert_eq!(fill_missing(3, at(0), at(540)), vec![180 * S; 3]);
        assert_eq!(
            fill_missing(3, at(0), SimTime::from_micros(10)),
            vec![4, 3, 3]
        );
    }

    #[test]
    fn estimate_examples() {
        let cfg = RmipConfig::default();
        assert_eq!(estimate_interval(&[180.0; 10], &cfg), Some(180.0));
        let mut outlier = [180.0; 10];
        outlier[9] = 900.0;
        // Hand computation: mean 252, sample sd sqrt(51840) = 227.684,
        // t = 72 * sqrt(10) / 227.684 = 1.0000.
        let mean = 252.0f64;
        let sd = ((9.0 * 72.0f64.powi(2) + 648.0f64.powi(2)) / 9.0).sqrt();
        let t = (mean - 180.0) * 10f64.sqrt() / sd;
        assert!((t - 1.0).abs() < 1e-3);
        assert_eq!(estimate_interval(&outlier, &cfg), None);
        assert_eq!(estimate_interval(&[180.0; 9], &cfg), None);
    }

    #[test]
    fn jittered_samples_monte_carlo() {
        let cfg = RmipConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut accepted = 0;
        for _ in 0..1000 {
            let samples: Vec<f64> = (0..10).map(|_| 180.0 + rng.gen_range(0.0..2.0)).collect();
            if let Some(m) = estimate_interval(&samples, &cfg) {
                assert!((180.0..=182.0).contains(&m));
                accepted += 1;
            }
        }
        // A symmetric jitter keeps mean and median close; most windows pass.
        assert!(accepted > 300, "acceptance rate {accepted}/1000");
    }

    #[test]
    fn anchor_examples() {
        let base = RmipNodeState::new(NodeAddr(1));
        let mut s = base.clone().with_learned(180.0, at(0), 3, at(360), 2);
        assert!(s.update_anchor(at(500)));
        assert_eq!(s.anchor(), at(500));
        assert_eq!(s.anchor_count(), 0);
        let mut s = base.clone().with_learned(180.0, at(0), 3, at(360), 2);
        assert!(!s.update_anchor(at(560)));
        assert_eq!(s.anchor(), at(0));

        let cfg = RmipConfig::default();
        let mut s = base;
        assert!(s.observe(9, at(42), &cfg).is_empty());
        assert_eq!(s.anchor(), at(42));
    }

    #[test]
    fn learns_and_detects_period_change() {
        let cfg = RmipConfig::default();
        let mut s = RmipNodeState::new(NodeAddr(1));
        let mut t = 0.0;
        let mut c = 0u16;
        let mut learned = None;
        for _ in 0..=10 {
            for ev in feed(&mut s, &cfg, c, t) {
                if let RmipEvent::IntervalLearned { delta_t } = ev {
                    learned = Some(delta_t);
                }
            }
            c += 1;
            t += 180.0;
        }
        assert_eq!(learned, Some(180.0));
        t -= 180.0;
        let mut detected_after = None;
        for k in 1..=12 {
            t += 60.0;
            let evs = feed(&mut s, &cfg, c, t);
            c += 1;
            if let Some(RmipEvent::ChangeDetected { relearned, .. }) = evs.first() {
                assert_eq!(*relearned, Some(60.0));
                detected_after = Some(k);
                break;
            }
        }
        assert_eq!(detected_after, Some(10));
        assert_eq!(s.delta_t(), Some(60.0));
    }

    #[test]
    fn single_outlier_is_tolerated() {
        let cfg = RmipConfig::default();
        let mut s = RmipNodeState::new(NodeAddr(1));
        let mut t = 0.0;
        for c in 0..=10u16 {
            feed(&mut s, &cfg, c, t);
            t += 180.0;
        }
        let last = t - 180.0;
        feed(&mut s, &cfg, 11, last + 900.0);
        assert_eq!(s.deviation_run(), 1);
        let evs = feed(&mut s, &cfg, 12, last + 1080.0);
        assert!(!evs
            .iter()
            .any(|e| matches!(e, RmipEvent::ChangeDetected { .. })));
        assert_eq!(s.deviation_run(), 0);
        assert_eq!(s.delta_t(), Some(180.0));
    }

    #[test]
    fn poll_examples() {
        let cfg = RmipConfig::default();
        let mut fresh = RmipNodeState::new(NodeAddr(4));
        fresh.observe(1, at(0), &cfg);
        assert_eq!(fresh.poll_missing(at(100_000), &cfg), None);

        let learned = RmipNodeState::new(NodeAddr(4)).with_learned(180.0, at(0), 1, at(180), 6);
        let mut s = learned.clone();
        assert_eq!(s.poll_missing(SimTime::from_millis(359_000), &cfg), None);
        assert_eq!(
            s.poll_missing(SimTime::from_millis(361_500), &cfg),
            Some(MissingReport {
                node: NodeAddr(4),
                last_counter: 6
            })
        );
        assert_eq!(s.poll_missing(SimTime::from_millis(362_000), &cfg), None);
        assert_eq!(
            learned.next_due(&cfg),
            Some(SimTime::from_micros(361 * S + 1))
        );
    }

    #[test]
    fn reset_on_large_counter_jump() {
        let cfg = RmipConfig::default();
        let mut s = RmipNodeState::new(NodeAddr(1));
        for c in 0..=10u16 {
            feed(&mut s, &cfg, c, c as f64 * 180.0);
        }
        assert!(s.delta_t().is_some());
        let evs = feed(&mut s, &cfg, 500, 3000.0);
        assert_eq!(evs, vec![RmipEvent::NodeReset]);
        assert_eq!(s.delta_t(), None);
        assert_eq!(s.buffered(), 0);
    }

    #[test]
    fn lost_messages_are_filled() {
        let cfg = RmipConfig::default();
        let mut s = RmipNodeState::new(NodeAddr(1));
        let mut learned = None;
        // Every alternate message lost: the period must still come out at
        // 180 s rather than 360 s.
        for k in 0..12u16 {
            let c = 2 * k;
            for ev in feed(&mut s, &cfg, c, c as f64 * 180.0) {
                if let RmipEvent::IntervalLearned { delta_t } = ev {
                    learned = Some(delta_t);
                }
            }
        }
        assert_eq!(learned, Some(180.0));
    }

    proptest! {
        #[test]
        fn fill_conserves_elapsed(gap in 1u16..=64, start in 0u64..1u64 << 40, len in 0u64..1u64 << 32) {
            let parts = fill_missing(gap, SimTime::from_micros(start), SimTime::from_micros(start + len));
            prop_assert_eq!(parts.len(), gap as usize);
            prop_assert_eq!(parts.iter().sum::<u64>(), len);
        }

        #[test]
        fn median_matches_brute_force(samples in proptest::collection::vec(0.0f64..4000.0, 1..=15)) {
            let got = lower_median(&samples).unwrap();
            // Brute force: the element with at least half the rest not below it.
            let want = samples
                .iter()
                .copied()
                .filter(|&c| {
                    let below = samples.iter().filter(|&&x| x < c).count();
                    let at_or_below = samples.iter().filter(|&&x| x <= c).count();
                    below <= (samples.len() - 1) / 2 && (samples.len() - 1) / 2 < at_or_below
                })
                .fold(f64::NAN, |_, c| c);
            prop_assert_eq!(got, want);
        }

        #[test]
        fn buffer_stays_bounded(
            n in 2usize..16,
            steps in proptest::collection::vec((1u16..4, 1u64..2_000), 1..200)
        ) {
            let cfg = RmipConfig { n, ..RmipConfig::default() };
            let mut s = RmipNodeState::new(NodeAddr(0));
            let (mut c, mut t) = (0u16, 0u64);
            s.observe(c, SimTime::from_secs(t), &cfg);
            for (gap, dt) in steps {
                c = c.wrapping_add(gap);
                t += dt;
                s.observe(c, SimTime::from_secs(t), &cfg);
                prop_assert!(s.buffered() <= n);
                prop_assert!(s.deviation_run() as usize <= n);
            }
        }

        #[test]
        fn zero_jitter_anchor_is_fixed(period in 10u64..4_000, first in 0u64..10_000, count in 2usize..80) {
            let cfg = RmipConfig::default();
            let mut s = RmipNodeState::new(NodeAddr(0));
            for k in 0..count {
                let evs = s.observe(k as u16, SimTime::from_secs(first + k as u64 * period), &cfg);
                let moved = evs.iter().any(|e| matches!(e, RmipEvent::AnchorReset { .. }));
                prop_assert!(!moved);
                prop_assert_eq!(s.anchor(), SimTime::from_secs(first));
            }
        }

        #[test]
        fn short_deviation_runs_keep_estimate(runs in 1usize..10, period in 60u64..600, shift in 5u64..50) {
            let cfg = RmipConfig::default();
            let mut s = RmipNodeState::new(NodeAddr(0));
            let mut t = 0;
            let mut c = 0u16;
            for _ in 0..=10 {
                s.observe(c, SimTime::from_secs(t), &cfg);
                c += 1;
                t += period;
            }
            prop_assert_eq!(s.delta_t(), Some(period as f64));
            for _ in 0..runs {
                s.observe(c, SimTime::from_secs(t + shift), &cfg);
                c += 1;
                t += period + shift;
            }
            prop_assert_eq!(s.delta_t(), Some(period as f64));
        }
    }
}
