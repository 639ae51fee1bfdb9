//! Side-by-side comparison of slot/channel policies for overlay frames
//! against one synthetic stream of overheard node traffic.
//!
//! Every slot each policy answers one overlay request. Answers are scored
//! with the agent's own reward rules against the frames that actually
//! overlap the chosen window.

use rand::distributions::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::interpred::{
    action_index, action_parts, no_tx_reward, transmit_reward, InterPredAgent, InterPredConfig,
};
use crate::phy::compute_airtime;
use crate::types::{Band, RadioParams, SimTime, SLOT_US, US_PER_SEC};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficSpec {
    /// Overheard node frames per hour at load factor 1.
    pub frames_per_hour: f64,
    /// Relative use of each channel.
    pub channel_weights: Vec<f64>,
    /// Relative use of SF7..=SF12.
    pub sf_weights: [f64; 6],
    pub payload_len: usize,
    pub seed: u64,
}

impl Default for TrafficSpec {
    fn default() -> Self {
        Self {
            frames_per_hour: 5000.0,
            channel_weights: vec![0.6, 0.3, 0.1],
            sf_weights: [0.35, 0.2, 0.15, 0.12, 0.1, 0.08],
            payload_len: 23,
            seed: 1,
        }
    }
}

/// Load factors of the low, medium and high scenarios.
pub const LOAD_LEVELS: [(&str, f64); 3] = [("low", 1.0), ("medium", 1.5), ("high", 2.5)];

/// An overheard frame on `channel` occupying `[start, end)` µs.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Heard {
    pub start: u64,
    pub end: u64,
    pub channel: u8,
}

/// Poisson stream of node frames over `[0, duration_us)`, ordered by start.
pub fn traffic(spec: &TrafficSpec, load: f64, duration_us: u64) -> Result<Vec<Heard>, String> {
    if !(spec.frames_per_hour >= 0.0) || !(load >= 0.0) {
        return Err("traffic rate and load must be non-negative".into());
    }
    let channel_pick =
        WeightedIndex::new(&spec.channel_weights).map_err(|e| format!("channel_weights: {e}"))?;
    let sf_pick = WeightedIndex::new(spec.sf_weights).map_err(|e| format!("sf_weights: {e}"))?;
    let rate = spec.frames_per_hour * load / 3600.0;
    let mut out = Vec::new();
    if rate == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ load.to_bits());
    let gap = Exp::new(rate).expect("rate positive");
    let mut t = 0.0;
    loop {
        t += gap.sample(&mut rng);
        let start = (t * US_PER_SEC as f64) as u64;
        if start >= duration_us {
            return Ok(out);
        }
        let channel = channel_pick.sample(&mut rng) as u8;
        let radio = RadioParams {
            channel,
            spreading_factor: 7 + sf_pick.sample(&mut rng) as u8,
            bandwidth_hz: RadioParams::DEFAULT_BANDWIDTH_HZ,
            tx_power_dbm: 14,
            band: Band::Band0,
        };
        let airtime = compute_airtime(spec.payload_len, &radio).map_err(|e| e.to_string())?;
        out.push(Heard {
            start,
            end: start + airtime,
            channel,
        });
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    InterPred,
    Random,
    NextUsed,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::InterPred, Policy::Random, Policy::NextUsed];

    pub fn name(self) -> &'static str {
        match self {
            Policy::InterPred => "interpred",
            Policy::Random => "random",
            Policy::NextUsed => "next-used",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolicyResult {
    pub policy: Policy,
    pub load: f64,
    pub good: u64,
    pub bad: u64,
    pub none: u64,
    pub total_reward: f64,
}

impl PolicyResult {
    pub fn actions(&self) -> u64 {
        self.good + self.bad + self.none
    }

    /// Share of requests answered with a transmission.
    pub fn fulfilment(&self) -> f64 {
        (self.good + self.bad) as f64 / self.actions().max(1) as f64
    }

    /// Share of all actions that hit node traffic.
    pub fn bad_ratio(&self) -> f64 {
        self.bad as f64 / self.actions().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Seconds of pseudo-action training before scoring starts.
    pub training: f64,
    /// Seconds scored.
    pub duration: f64,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            training: 3.0 * 3600.0,
            duration: 24.0 * 3600.0,
            seed: 1,
        }
    }
}

/// Frames of one channel, ordered by start, with the longest airtime for
/// bounding overlap searches.
struct ChannelFrames {
    frames: Vec<(u64, u64)>,
    longest: u64,
}

struct Scorer {
    channels: Vec<ChannelFrames>,
    cfg: InterPredConfig,
}

impl Scorer {
    fn new(heard: &[Heard], cfg: &InterPredConfig) -> Self {
        let mut channels: Vec<ChannelFrames> = (0..cfg.channels)
            .map(|_| ChannelFrames {
                frames: Vec::new(),
                longest: 0,
            })
            .collect();
        for h in heard {
            if let Some(c) = channels.get_mut(h.channel as usize) {
                c.frames.push((h.start, h.end));
                c.longest = c.longest.max(h.end - h.start);
            }
        }
        Self {
            channels,
            cfg: cfg.clone(),
        }
    }

    fn interference(&self, channel: usize, w0: u64, w1: u64) -> u32 {
        let c = &self.channels[channel];
        let from = c.frames.partition_point(|&(s, _)| s + c.longest <= w0);
        let hits = c.frames[from..]
            .iter()
            .take_while(|&&(s, _)| s < w1)
            .filter(|&&(_, e)| e > w0)
            .count() as u32;
        hits.min(self.cfg.interference_cap())
    }

    fn window(&self, decided_slot: u64, i: usize) -> (u64, u64) {
        let start = (decided_slot + i as u64) * SLOT_US;
        (start, start + self.cfg.probe_airtime_us)
    }

    /// Reward and whether the action transmitted into node traffic.
    fn reward(&self, decided_slot: u64, action: usize) -> (f64, Option<bool>) {
        let f = self.cfg.future_slots;
        let (i, c) = action_parts(action, f);
        if i > 0 {
            let (w0, w1) = self.window(decided_slot, i);
            let m = self.interference(c, w0, w1);
            return (transmit_reward(i, m, f), Some(m > 0));
        }
        let rewards = (1..=f).map(|i| {
            let (w0, w1) = self.window(decided_slot, i);
            transmit_reward(i, self.interference(c, w0, w1), f)
        });
        (no_tx_reward(rewards, f), None)
    }
}

/// Runs all three policies against the same stream at one load factor.
pub fn evaluate(
    spec: &TrafficSpec,
    load: f64,
    cfg: &InterPredConfig,
    settings: &EvalSettings,
) -> Result<Vec<PolicyResult>, String> {
    cfg.validate()?;
    if spec.channel_weights.len() != cfg.channels {
        return Err(format!(
            "traffic has {} channel weights but the agent uses {} channels",
            spec.channel_weights.len(),
            cfg.channels
        ));
    }
    let train_us = (settings.training * US_PER_SEC as f64).round() as u64;
    let score_us = (settings.duration * US_PER_SEC as f64).round() as u64;
    let first = train_us.div_ceil(SLOT_US);
    let last = (train_us + score_us) / SLOT_US;
    let horizon = (last + cfg.future_slots as u64 + 2) * SLOT_US;
    let heard = traffic(spec, load, horizon)?;
    let scorer = Scorer::new(&heard, cfg);

    let mut agent = InterPredAgent::new(
        InterPredConfig {
            training_duration: settings.training,
            ..cfg.clone()
        },
        settings.seed,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x2545_F491_4F6C_DD1D);
    let mut results: Vec<PolicyResult> = Policy::ALL
        .iter()
        .map(|&policy| PolicyResult {
            policy,
            load,
            good: 0,
            bad: 0,
            none: 0,
            total_reward: 0.0,
        })
        .collect();

    // Frames are fed to the agent as they finish, in end order.
    let mut by_end: Vec<&Heard> = heard.iter().collect();
    by_end.sort_by_key(|h| (h.end, h.start));
    let mut next = 0;
    // Frames finished in the slot that just closed, per channel.
    let mut last_slot_counts = vec![0u32; cfg.channels];
    let f = cfg.future_slots;
    for slot in 1..last {
        let now = slot * SLOT_US;
        last_slot_counts.iter_mut().for_each(|c| *c = 0);
        while next < by_end.len() && by_end[next].end <= now {
            let h = by_end[next];
            agent.ingest(h.end - h.start, h.channel, SimTime::from_micros(h.end));
            last_slot_counts[h.channel as usize] += 1;
            next += 1;
        }
        // A frame ending exactly on the boundary belongs to the closed slot.
        agent.on_slot_boundary(SimTime::from_micros(now));
        if slot < first {
            continue;
        }
        let t = SimTime::from_micros(now);
        let interpred = agent
            .request_action(t)
            .ok_or("agent still training after the training period")?;
        let random = rng.gen_range(0..cfg.actions());
        let idle: Vec<usize> = (0..cfg.channels)
            .filter(|&c| last_slot_counts[c] == 0)
            .collect();
        let next_used = if idle.is_empty() {
            action_index(0, rng.gen_range(0..cfg.channels), f)
        } else {
            action_index(1, idle[rng.gen_range(0..idle.len())], f)
        };
        // Every policy decides for the slot that just closed.
        for (r, action) in results.iter_mut().zip([interpred, random, next_used]) {
            let (reward, hit) = scorer.reward(slot - 1, action);
            r.total_reward += reward;
            match hit {
                Some(true) => r.bad += 1,
                Some(false) => r.good += 1,
                None => r.none += 1,
            }
        }
    }
    Ok(results)
}

/// Feeds `seconds` of traffic to a fresh agent, slot by slot, and returns
/// it. Only pseudo actions are taken.
pub fn train(
    spec: &TrafficSpec,
    load: f64,
    cfg: &InterPredConfig,
    seconds: f64,
    seed: u64,
) -> Result<InterPredAgent, String> {
    cfg.validate()?;
    let end = (seconds * US_PER_SEC as f64).round() as u64;
    let mut heard = traffic(spec, load, end)?;
    heard.sort_by_key(|h| (h.end, h.start));
    let mut agent = InterPredAgent::new(cfg.clone(), seed);
    let mut next = 0;
    for slot in 1..=end / SLOT_US {
        let now = slot * SLOT_US;
        while next < heard.len() && heard[next].end <= now {
            let h = &heard[next];
            agent.ingest(h.end - h.start, h.channel, SimTime::from_micros(h.end));
            next += 1;
        }
        agent.on_slot_boundary(SimTime::from_micros(now));
    }
    Ok(agent)
}

pub const INTERPRED_EVAL_HEADER: &str =
    "policy,load,good,bad,none,total_reward,fulfilment,bad_ratio";

pub fn write_csv<W: std::io::Write>(rows: &[PolicyResult], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{INTERPRED_EVAL_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{:.6}",
            r.policy.name(),
            r.load,
            r.good,
            r.bad,
            r.none,
            r.total_reward,
            r.fulfilment(),
            r.bad_ratio()
        )?;
    }
    out.flush()
}

/// Parses what [`write_csv`] wrote; the derived ratio columns are
/// recomputed rather than read.
pub fn read_csv<R: std::io::BufRead>(input: R) -> std::io::Result<Vec<PolicyResult>> {
    let bad = |line: &str| {
        std::io::Error::new(std::io::ErrorKind::InvalidData, format!("bad row `{line}`"))
    };
    let mut rows = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() || line == INTERPRED_EVAL_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad(&line));
        }
        let policy = Policy::ALL
            .into_iter()
            .find(|p| p.name() == f[0])
            .ok_or_else(|| bad(&line))?;
        let parse = || -> Result<PolicyResult, Box<dyn std::error::Error>> {
            Ok(PolicyResult {
                policy,
                load: f[1].parse()?,
                good: f[2].parse()?,
                bad: f[3].parse()?,
                none: f[4].parse()?,
                total_reward: f[5].parse()?,
            })
        };
        rows.push(parse().map_err(|_| bad(&line))?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short() -> EvalSettings {
        EvalSettings {
            training: 600.0,
            duration: 600.0,
            seed: 4,
        }
    }

    #[test]
    fn zero_traffic_has_no_bad_actions() {
        let spec = TrafficSpec {
            frames_per_hour: 0.0,
            ..TrafficSpec::default()
        };
        let rows = evaluate(&spec, 1.0, &InterPredConfig::default(), &short()).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert_eq!(r.bad, 0, "{:?}", r.policy);
            assert_eq!(r.actions(), 6000);
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = evaluate(
            &TrafficSpec::default(),
            1.5,
            &InterPredConfig::default(),
            &short(),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let back = read_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.iter().zip(&rows) {
            assert_eq!(
                (a.policy, a.load, a.good, a.bad, a.none),
                (b.policy, b.load, b.good, b.bad, b.none)
            );
            assert!((a.total_reward - b.total_reward).abs() < 1e-6);
        }
    }

    #[test]
    fn training_alone_takes_no_real_actions() {
        let agent = train(
            &TrafficSpec::default(),
            1.0,
            &InterPredConfig::default(),
            600.0,
            2,
        )
        .unwrap();
        assert!(!agent.snapshot().is_empty());
    }

    #[test]
    fn scorer_matches_reward_rules() {
        let cfg = InterPredConfig::default();
        // One frame on channel 0 covering slot 12 only.
        let heard = [Heard {
            start: 1_210_000,
            end: 1_250_000,
            channel: 0,
        }];
        let s = Scorer::new(&heard, &cfg);
        // Decided at slot 10: i = 2 lands on slot 12.
        assert_eq!(
            s.reward(10, action_index(2, 0, 8)),
            (-2.0 * 0.75, Some(true))
        );
        assert_eq!(s.reward(10, action_index(1, 0, 8)), (0.875, Some(false)));
        assert_eq!(s.reward(10, action_index(2, 1, 8)), (0.75, Some(false)));
        // No-tx on channel 0: all clear transmit rewards plus the penalty.
        let clear: f64 = (1..=8)
            .filter(|&i| i != 2)
            .map(|i| 1.0 - i as f64 / 8.0)
            .sum();
        let (r, hit) = s.reward(10, action_index(0, 0, 8));
        assert!((r - (clear - 1.5) / 8.0).abs() < 1e-12);
        assert_eq!(hit, None);
    }

    #[test]
    fn traffic_matches_requested_rate() {
        let spec = TrafficSpec::default();
        let hour = 3600 * US_PER_SEC;
        let frames = traffic(&spec, 2.0, 10 * hour).unwrap();
        let per_hour = frames.len() as f64 / 10.0;
        assert!((per_hour - 10_000.0).abs() < 300.0, "{per_hour}");
        assert!(frames.windows(2).all(|w| w[0].start <= w[1].start));
    }

    #[test]
    fn channel_count_must_match() {
        let spec = TrafficSpec {
            channel_weights: vec![1.0, 1.0],
            ..TrafficSpec::default()
        };
        assert!(evaluate(&spec, 1.0, &InterPredConfig::default(), &short()).is_err());
    }
}
