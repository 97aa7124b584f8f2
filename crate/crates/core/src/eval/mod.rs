//! Retrieval metrics and evaluation reports.

pub mod plot;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::geometry::Direction;
use crate::retrieval::{RankedList, RanksFile};

fn check_ranks(ranks: &[usize]) -> Result<()> {
    if ranks.is_empty() {
        return Err(argument("rank list is empty"));
    }
    if ranks.contains(&0) {
        return Err(argument("ranks are 1-based"));
    }
    Ok(())
}

/// Percentage of queries whose true match is within the top `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks)?;
    if k == 0 {
        return Err(argument("k must be at least 1"));
    }
    let hits = ranks.iter().filter(|r| **r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

pub fn mean_reciprocal_rank(ranks: &[usize]) -> Result<f64> {
    check_ranks(ranks)?;
    Ok(ranks.iter().map(|r| 1.0 / *r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Lower median, so the result is always an attained rank.
pub fn median_rank(ranks: &[usize]) -> Result<usize> {
    check_ranks(ranks)?;
    let mut v = ranks.to_vec();
    v.sort_unstable();
    Ok(v[(v.len() - 1) / 2])
}

/// Metrics for one (direction, dataset, variant) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub direction: Direction,
    pub dataset: String,
    pub variant: String,
    pub r1: f64,
    pub r10: f64,
    pub r25: f64,
    pub mrr: f64,
    pub mr: usize,
    pub ranks: Vec<usize>,
    pub n_candidates: usize,
    pub fingerprints: Vec<String>,
}

impl EvalReport {
    pub fn from_ranks(
        ranks: Vec<usize>,
        n_candidates: usize,
        direction: Direction,
        dataset: &str,
        variant: &str,
        fingerprints: Vec<String>,
    ) -> Result<Self> {
        if ranks.iter().any(|r| *r > n_candidates) {
            return Err(argument("rank exceeds the candidate count"));
        }
        Ok(Self {
            direction,
            dataset: dataset.to_string(),
            variant: variant.to_string(),
            r1: recall_at_k(&ranks, 1)?,
            r10: recall_at_k(&ranks, 10)?,
            r25: recall_at_k(&ranks, 25)?,
            mrr: mean_reciprocal_rank(&ranks)?,
            mr: median_rank(&ranks)?,
            ranks,
            n_candidates,
            fingerprints,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Builds a report from ranked lists; every list needs a true rank and
/// the same candidate count.
pub fn evaluate(lists: &[RankedList], dataset: &str, variant: &str, fingerprints: Vec<String>) -> Result<EvalReport> {
    let first = lists.first().ok_or_else(|| argument("no ranked lists to evaluate"))?;
    let n = first.entries.len();
    if lists.iter().any(|l| l.entries.len() != n) {
        return Err(argument("inconsistent candidate counts across queries"));
    }
    if lists.iter().any(|l| l.direction != first.direction) {
        return Err(argument("ranked lists mix retrieval directions"));
    }
    let ranks = lists
        .iter()
        .map(|l| l.true_rank.ok_or_else(|| argument(format!("query {} has no true match", l.query_id))))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_ranks(ranks, n, first.direction, dataset, variant, fingerprints)
}

/// Report from a stored `ranks.json`.
pub fn evaluate_ranks_file(f: &RanksFile) -> Result<EvalReport> {
    let ranks = f
        .queries
        .iter()
        .map(|q| q.true_rank.ok_or_else(|| argument(format!("query {} has no true match", q.query_id))))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_ranks(ranks, f.n_candidates, f.direction, &f.dataset, &f.variant, f.fingerprints.clone())
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(argument("spearman needs two equal-length samples of size >= 2"));
    }
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|i, j| x[*i].total_cmp(&x[*j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn recall_examples() {
        assert!((recall_at_k(&[1, 2, 4], 1).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(recall_at_k(&[1, 2, 3], 3).unwrap(), 100.0);
        assert_eq!(recall_at_k(&[3], 2).unwrap(), 0.0);
        assert!(recall_at_k(&[], 1).is_err());
        assert!(recall_at_k(&[1], 0).is_err());
    }

    #[test]
    fn mrr_and_median_examples() {
        assert!((mean_reciprocal_rank(&[1, 2, 4]).unwrap() - 1.75 / 3.0).abs() < 1e-15);
        assert_eq!(mean_reciprocal_rank(&[1, 1]).unwrap(), 1.0);
        assert_eq!(median_rank(&[1, 1, 7]).unwrap(), 1);
        assert_eq!(median_rank(&[2, 4]).unwrap(), 2);
        assert_eq!(median_rank(&[5]).unwrap(), 5);
        assert!(median_rank(&[]).is_err());
    }

    #[test]
    fn report_on_a_fixture() {
        let r = EvalReport::from_ranks(vec![1, 3, 12, 30, 2], 40, Direction::A2S, "test", "rnn", vec![]).unwrap();
        assert_eq!(r.r1, 20.0);
        assert_eq!(r.r10, 60.0);
        assert_eq!(r.r25, 80.0);
        assert!((r.mrr - (1.0 + 1.0 / 3.0 + 1.0 / 12.0 + 1.0 / 30.0 + 0.5) / 5.0).abs() < 1e-15);
        assert_eq!(r.mr, 3);
        let worst = EvalReport::from_ranks(vec![534; 4], 534, Direction::S2A, "t", "v", vec![]).unwrap();
        assert!((worst.mrr - 1.0 / 534.0).abs() < 1e-15);
        assert!(EvalReport::from_ranks(vec![5], 4, Direction::S2A, "t", "v", vec![]).is_err());
    }

    #[test]
    fn spearman_signs() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn improving_a_rank_never_hurts(ranks in proptest::collection::vec(1usize..50, 1..30), which in 0usize..30) {
            let i = which % ranks.len();
            prop_assume!(ranks[i] > 1);
            let mut better = ranks.clone();
            better[i] -= 1;
            prop_assert!(mean_reciprocal_rank(&better).unwrap() >= mean_reciprocal_rank(&ranks).unwrap());
            prop_assert!(median_rank(&better).unwrap() <= median_rank(&ranks).unwrap());
            for k in [1, 10, 25] {
                prop_assert!(recall_at_k(&better, k).unwrap() >= recall_at_k(&ranks, k).unwrap());
            }
        }

        #[test]
        fn order_invariant_and_chained(mut ranks in proptest::collection::vec(1usize..60, 1..30)) {
            let a = EvalReport::from_ranks(ranks.clone(), 60, Direction::A2S, "d", "v", vec![]).unwrap();
            ranks.reverse();
            let b = EvalReport::from_ranks(ranks, 60, Direction::A2S, "d", "v", vec![]).unwrap();
            prop_assert!((a.mrr - b.mrr).abs() < 1e-12);
            prop_assert_eq!(a.mr, b.mr);
            prop_assert!(a.r1 <= a.r10 && a.r10 <= a.r25 && a.r25 <= 100.0);
            prop_assert!(a.mrr > 0.0 && a.mrr <= 1.0 && a.mr >= 1);
        }
    }
}
