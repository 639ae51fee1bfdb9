//! Precision and recall of period-change detection over replayed traces.
//!
//! Changes are injected by splicing the second half of one periodic
//! node's series onto the first half of another's, so the ground truth is
//! the splice point. A detection counts as a hit when it is the first one
//! within `3n` arrivals of a splice; every other detection is a false alarm.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::trace::{ChangePoint, TraceRecord};
use crate::rmip::{fill_missing, lower_median, RmipConfig, RmipEvent, RmipNodeState};
use crate::types::{counter_gap, NodeAddr, SimTime, US_PER_SEC};

/// One node's arrivals as `(counter, arrival_us)`, in time order.
#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub node: u32,
    pub arrivals: Vec<(u16, u64)>,
}

pub fn streams(records: &[TraceRecord]) -> Vec<Stream> {
    let mut by_node: BTreeMap<u32, Vec<(u16, u64)>> = BTreeMap::new();
    for r in records {
        by_node
            .entry(r.node)
            .or_default()
            .push((r.counter, r.arrival_us));
    }
    by_node
        .into_iter()
        .map(|(node, mut arrivals)| {
            arrivals.sort_by_key(|&(_, t)| t);
            Stream { node, arrivals }
        })
        .collect()
}

/// Per-message intervals in seconds, with counter gaps split evenly.
fn intervals(s: &Stream) -> Vec<f64> {
    s.arrivals
        .windows(2)
        .flat_map(|w| {
            let gap = counter_gap(w[0].0, w[1].0);
            fill_missing(
                gap,
                SimTime::from_micros(w[0].1),
                SimTime::from_micros(w[1].1),
            )
        })
        .map(|us| us as f64 / US_PER_SEC as f64)
        .collect()
}

/// Median interval in seconds if at least 90 % of the node's intervals lie
/// within `tolerance` seconds of it.
pub fn periodic_interval(s: &Stream, tolerance: f64) -> Option<f64> {
    let iv = intervals(s);
    if iv.len() < 10 {
        return None;
    }
    let m = lower_median(&iv)?;
    let close = iv.iter().filter(|&&x| (x - m).abs() <= tolerance).count();
    (close as f64 >= 0.9 * iv.len() as f64).then_some(m)
}

/// Arrivals each side of a splice, so that any window up to this size can
/// learn before and detect after.
pub const MIN_SEGMENT: usize = 48;

/// Replaces `count` of the periodic `streams` with spliced series. Hosts and
/// donors differ in period by at least `min_difference` seconds. Returns
/// the evaluation set (every periodic stream, spliced or not) and the
/// splice points.
pub fn inject_changes(
    streams: &[Stream],
    count: usize,
    min_difference: f64,
    seed: u64,
) -> Result<(Vec<Stream>, Vec<ChangePoint>), String> {
    let periodic: Vec<(usize, f64)> = streams
        .iter()
        .enumerate()
        .filter(|(_, s)| s.arrivals.len() >= 2 * MIN_SEGMENT)
        .filter_map(|(i, s)| periodic_interval(s, 2.5).map(|m| (i, m)))
        .collect();
    let mut order = periodic.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out: Vec<Stream> = periodic.iter().map(|&(i, _)| streams[i].clone()).collect();
    let slot_of = |i: usize| {
        periodic
            .iter()
            .position(|&(j, _)| j == i)
            .expect("from periodic")
    };
    let mut truths = Vec::new();
    for (k, &(host, period)) in order.iter().enumerate() {
        if truths.len() == count {
            break;
        }
        let donor = (1..order.len())
            .map(|d| order[(k + d) % order.len()])
            .find(|&(_, p)| (p - period).abs() >= min_difference);
        let Some((donor, _)) = donor else { continue };
        let h = &streams[host].arrivals;
        let d = &streams[donor].arrivals;
        let (hh, d0) = (h.len() / 2, d.len() / 2);
        let (base_c, base_t) = h[hh - 1];
        let (dc, dt) = d[d0 - 1];
        let mut spliced = h[..hh].to_vec();
        spliced.extend(
            d[d0..]
                .iter()
                .map(|&(c, t)| (base_c.wrapping_add(c.wrapping_sub(dc)), base_t + (t - dt))),
        );
        truths.push(ChangePoint {
            node: streams[host].node,
            arrival_us: spliced[hh].1,
        });
        out[slot_of(host)].arrivals = spliced;
    }
    if truths.len() < count {
        return Err(format!(
            "only {} of {count} changes could be injected ({} usable periodic nodes)",
            truths.len(),
            periodic.len()
        ));
    }
    Ok((out, truths))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RmipEvalRow {
    pub n: usize,
    pub e: f64,
    pub detections: u64,
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    /// Absent when nothing was detected.
    pub precision: Option<f64>,
    /// Absent when there were no changes to find.
    pub recall: Option<f64>,
}

/// Replays every stream through a fresh predictor and scores the change
/// detections against `truths`.
pub fn score(streams: &[Stream], truths: &[ChangePoint], cfg: &RmipConfig) -> RmipEvalRow {
    let mut row = RmipEvalRow {
        n: cfg.n,
        e: cfg.e,
        ..RmipEvalRow::default()
    };
    for s in streams {
        let mut st = RmipNodeState::new(NodeAddr(s.node));
        let mut hits = Vec::new();
        for (idx, &(c, t)) in s.arrivals.iter().enumerate() {
            let events = st.observe(c, SimTime::from_micros(t), cfg);
            if events
                .iter()
                .any(|e| matches!(e, RmipEvent::ChangeDetected { .. }))
            {
                hits.push(idx);
            }
        }
        row.detections += hits.len() as u64;
        let mut matched = 0;
        for truth in truths.iter().filter(|p| p.node == s.node) {
            let Some(j) = s.arrivals.iter().position(|&(_, t)| t == truth.arrival_us) else {
                continue;
            };
            if hits.iter().any(|&h| h >= j && h < j + 3 * cfg.n) {
                matched += 1;
            } else {
                row.false_negatives += 1;
            }
        }
        row.true_positives += matched;
        row.false_positives += hits.len() as u64 - matched;
    }
    row.precision = (row.detections > 0).then(|| row.true_positives as f64 / row.detections as f64);
    let positives = row.true_positives + row.false_negatives;
    row.recall = (positives > 0).then(|| row.true_positives as f64 / positives as f64);
    row
}

/// Scores every `(n, e)` combination, `n` outermost.
pub fn grid(
    streams: &[Stream],
    truths: &[ChangePoint],
    ns: &[usize],
    es: &[f64],
    base: &RmipConfig,
) -> Vec<RmipEvalRow> {
    ns.iter()
        .flat_map(|&n| {
            es.iter().map(move |&e| RmipConfig {
                n,
                e,
                grace: e,
                ..base.clone()
            })
        })
        .map(|cfg| score(streams, truths, &cfg))
        .collect()
}

pub const RMIP_EVAL_HEADER: &str =
    "n,e,detections,true_positives,false_positives,false_negatives,precision,recall";

pub fn write_csv<W: std::io::Write>(rows: &[RmipEvalRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{RMIP_EVAL_HEADER}")?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.n,
            r.e,
            r.detections,
            r.true_positives,
            r.false_positives,
            r.false_negatives,
            opt(r.precision),
            opt(r.recall)
        )?;
    }
    out.flush()
}

/// Parses what [`write_csv`] wrote.
pub fn read_csv<R: std::io::BufRead>(input: R) -> std::io::Result<Vec<RmipEvalRow>> {
    let bad = |line: &str| {
        std::io::Error::new(std::io::ErrorKind::InvalidData, format!("bad row `{line}`"))
    };
    let mut rows = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() || line == RMIP_EVAL_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad(&line));
        }
        let opt = |s: &str| {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some)
            }
        };
        let parse = || -> Result<RmipEvalRow, Box<dyn std::error::Error>> {
            Ok(RmipEvalRow {
                n: f[0].parse()?,
                e: f[1].parse()?,
                detections: f[2].parse()?,
                true_positives: f[3].parse()?,
                false_positives: f[4].parse()?,
                false_negatives: f[5].parse()?,
                precision: opt(f[6])?,
                recall: opt(f[7])?,
            })
        };
        rows.push(parse().map_err(|_| bad(&line))?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::trace::{generate, TraceSpec};

    fn regular(node: u32, period_s: u64, count: usize) -> Stream {
        Stream {
            node,
            arrivals: (0..count)
                .map(|i| (i as u16, i as u64 * period_s * US_PER_SEC))
                .collect(),
        }
    }

    #[test]
    fn splice_is_detected_exactly_once() {
        let s = vec![regular(1, 60, 200), regular(2, 120, 200)];
        let (set, truths) = inject_changes(&s, 1, 5.0, 3).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(truths.len(), 1);
        let row = score(&set, &truths, &RmipConfig::default());
        assert_eq!(
            (row.true_positives, row.false_positives, row.false_negatives),
            (1, 0, 0)
        );
        assert_eq!(row.precision, Some(1.0));
        assert_eq!(row.recall, Some(1.0));
    }

    #[test]
    fn spliced_series_keeps_counters_and_time_increasing() {
        let s = vec![regular(1, 60, 200), regular(2, 300, 100)];
        let (set, _) = inject_changes(&s, 2, 5.0, 9).unwrap();
        for st in &set {
            assert!(st
                .arrivals
                .windows(2)
                .all(|w| w[1].1 > w[0].1 && counter_gap(w[0].0, w[1].0) == 1));
        }
    }

    #[test]
    fn no_changes_means_no_recall() {
        let s = vec![regular(1, 60, 200)];
        let row = score(&s, &[], &RmipConfig::default());
        assert_eq!(row.recall, None);
        assert_eq!(row.precision, None);
        assert_eq!(row.false_positives, 0);
    }

    #[test]
    fn too_few_periodic_nodes_is_an_error() {
        let s = vec![regular(1, 60, 200), regular(2, 61, 200)];
        assert!(inject_changes(&s, 1, 5.0, 1).is_err());
    }

    #[test]
    fn irregular_nodes_are_screened_out() {
        let t = generate(&TraceSpec {
            nodes: 40,
            ..TraceSpec::default()
        })
        .unwrap();
        let all = streams(&t.records);
        for s in &all {
            let periodic = t.periodic.contains(&s.node);
            assert_eq!(
                periodic_interval(s, 2.5).is_some(),
                periodic,
                "node {}",
                s.node
            );
        }
    }

    #[test]
    fn csv_round_trip() {
        let s = vec![regular(1, 60, 200), regular(2, 120, 200)];
        let (set, truths) = inject_changes(&s, 1, 5.0, 3).unwrap();
        let mut rows = grid(&set, &truths, &[5, 10], &[0.5, 1.5], &RmipConfig::default());
        rows.push(score(&s[..1], &[], &RmipConfig::default()));
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let back = read_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), rows.len());
        for (a, b) in back.iter().zip(&rows) {
            assert_eq!(
                (a.n, a.e, a.detections, a.true_positives),
                (b.n, b.e, b.detections, b.true_positives)
            );
            assert_eq!(
                a.precision.map(|p| (p * 1e6).round()),
                b.precision.map(|p| (p * 1e6).round())
            );
            assert_eq!(a.recall.is_some(), b.recall.is_some());
        }
    }

    #[test]
    fn grid_shape() {
        let s = vec![regular(1, 60, 200), regular(2, 120, 200)];
        let rows = grid(&s, &[], &[5, 6], &[0.5, 1.0, 1.5], &RmipConfig::default());
        assert_eq!(rows.len(), 6);
        assert_eq!((rows[0].n, rows[0].e), (5, 0.5));
        assert_eq!((rows[5].n, rows[5].e), (6, 1.5));
    }
}
