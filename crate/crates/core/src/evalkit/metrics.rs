use serde::{Deserialize, Serialize};

use crate::environment::EpisodeRecord;
use crate::error::{Error, Result};

/// Hierarchical rank score of a success at turn `t` with list rank `k`.
pub fn hn_score(t: usize, k: usize) -> f64 {
    assert!(t >= 1 && k >= 1, "turn and rank are 1-based");
    let (t, k) = (t as f64, k as f64);
    let turn_lo = 1.0 / (t + 2.0).log2();
    let turn_hi = 1.0 / (t + 1.0).log2();
    turn_lo + (turn_hi - turn_lo) / (k + 1.0).log2()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `sr_at[t-1]` is the success rate by turn `t`.
    pub sr_at: Vec<f64>,
    pub at: f64,
    pub hn: f64,
    /// Activation rate by turn; absent when no episode tracked activation.
    pub ar_at: Option<Vec<f64>>,
    pub episodes: usize,
}

impl Metrics {
    pub fn sr(&self) -> f64 {
        *self.sr_at.last().unwrap_or(&0.0)
    }

    pub fn ar(&self) -> Option<f64> {
        self.ar_at.as_ref().and_then(|v| v.last().copied())
    }
}

pub fn compute_metrics(records: &[EpisodeRecord], max_turns: usize, list_size: usize) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::Validation("no episodes to score".into()));
    }
    let n = records.len() as f64;
    let mut success_turns = vec![0usize; max_turns + 1];
    let mut turns_total = 0usize;
    let mut hn_total = 0.0;
    for r in records {
        match r.success() {
            Some((t, k)) => {
                if t > max_turns || k > list_size || t == 0 || k == 0 {
                    return Err(Error::Validation(format!("episode {}: success at turn {t} rank {k} outside T={max_turns}, K={list_size}", r.session_id)));
                }
                success_turns[t] += 1;
                turns_total += t;
                hn_total += hn_score(t, k);
            }
            None => turns_total += max_turns,
        }
    }
    let cumulative = |counts: &[usize], denom: f64| {
        let mut acc = 0usize;
        (1..=max_turns)
            .map(|t| {
                acc += counts[t];
                acc as f64 / denom
            })
            .collect::<Vec<f64>>()
    };
    let tracked: Vec<&EpisodeRecord> = records.iter().filter(|r| r.activation_tracked).collect();
    let ar_at = (!tracked.is_empty()).then(|| {
        let mut counts = vec![0usize; max_turns + 1];
        for r in &tracked {
            if let Some(t) = r.activation_turn.filter(|&t| t <= max_turns) {
                counts[t] += 1;
            }
        }
        cumulative(&counts, tracked.len() as f64)
    });
    Ok(Metrics { sr_at: cumulative(&success_turns, n), at: turns_total as f64 / n, hn: hn_total / n, ar_at, episodes: records.len() })
}

/// Aligned text table: one row per named metric set.
pub fn format_table(rows: &[(String, Metrics)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:>8}  {:>6}  {:>8}  {:>8}  {:>8}\n", "agent", "episodes", "SR@T", "AT", "hN", "AR@T");
    for (name, m) in rows {
        let ar = m.ar().map_or("-".to_string(), |a| format!("{a:.4}"));
        out += &format!("{:<width$}  {:>8}  {:>6.4}  {:>8.4}  {:>8.4}  {:>8}\n", name, m.episodes, m.sr(), m.at, m.hn, ar);
    }
    out
}

/// `t,sr,ar` rows for curve plotting.
pub fn curves_csv(m: &Metrics) -> String {
    let mut out = String::from("turn,sr,ar\n");
    for (i, sr) in m.sr_at.iter().enumerate() {
        let ar = m.ar_at.as_ref().map_or(String::new(), |a| a[i].to_string());
        out += &format!("{},{},{}\n", i + 1, sr, ar);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{Mode, Outcome, EPISODE_SCHEMA_VERSION};

    pub(crate) fn record(id: &str, outcome: Outcome, activation: Option<usize>) -> EpisodeRecord {
        EpisodeRecord {
            schema_version: EPISODE_SCHEMA_VERSION,
            session_id: id.into(),
            mode: Mode::Simulated,
            agent: "test".into(),
            user: "u".into(),
            previous_items: vec![],
            target: Some("v".into()),
            turns: vec![],
            outcome,
            activation_turn: activation,
            activation_tracked: true,
        }
    }

    #[test]
    fn hn_values() {
        assert_eq!(hn_score(1, 1), 1.0);
        let t1k2 = 1.0 / 3f64.log2() + (1.0 - 1.0 / 3f64.log2()) / 3f64.log2();
        assert!((hn_score(1, 2) - t1k2).abs() < 1e-15);
        assert!((hn_score(1, 2) - 0.8638).abs() < 1e-4);
        assert!((hn_score(10, 1) - 1.0 / 11f64.log2()).abs() < 1e-15);
        assert!((hn_score(10, 1) - 0.2891).abs() < 1e-4);
    }

    #[test]
    fn hn_strictly_decreasing() {
        for t in 1..10 {
            for k in 1..10 {
                assert!(hn_score(t, k) > hn_score(t + 1, k));
                assert!(hn_score(t, k) > hn_score(t, k + 1));
            }
        }
    }

    #[test]
    fn success_and_failure_turns() {
        let recs = vec![record("a", Outcome::Success { turn: 3, rank: 1 }, Some(1)), record("b", Outcome::Failure { turns: 10 }, None)];
        let m = compute_metrics(&recs, 10, 10).unwrap();
        assert_eq!(m.at, 6.5);
        assert_eq!(m.sr(), 0.5);
        assert_eq!(m.sr_at[1], 0.0);
        assert_eq!(m.sr_at[2], 0.5);
        assert_eq!(m.ar(), Some(0.5));
    }

    #[test]
    fn all_first_turn_rank_one() {
        let recs: Vec<_> = (0..3).map(|i| record(&i.to_string(), Outcome::Success { turn: 1, rank: 1 }, None)).collect();
        let m = compute_metrics(&recs, 10, 10).unwrap();
        assert_eq!((m.sr(), m.at, m.hn), (1.0, 1.0, 1.0));
    }

    #[test]
    fn all_failures_average_t() {
        let recs: Vec<_> = (0..4).map(|i| record(&i.to_string(), Outcome::Failure { turns: 10 }, None)).collect();
        let m = compute_metrics(&recs, 10, 10).unwrap();
        assert_eq!((m.sr(), m.at, m.hn), (0.0, 10.0, 0.0));
    }

    #[test]
    fn untracked_activation_omits_ar() {
        let mut r = record("h", Outcome::Success { turn: 2, rank: 1 }, None);
        r.activation_tracked = false;
        assert_eq!(compute_metrics(&[r], 10, 10).unwrap().ar_at, None);
    }

    #[test]
    fn out_of_range_success_rejected() {
        assert!(compute_metrics(&[record("x", Outcome::Success { turn: 11, rank: 1 }, None)], 10, 10).is_err());
        assert!(compute_metrics(&[], 10, 10).is_err());
    }
}
