//! Sampled-negative ranking evaluation (HR@K, NDCG@K) and the propensity
//! gap analysis.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::EvalCase;
use crate::error::{Result, TipsError};
use crate::model::ModelLayout;
use crate::numerics::ParamRegistry;
use crate::objective::{Mode, StaticPropensity};
use crate::recommender::rank_of;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub cutoffs: Vec<usize>,
    pub negatives: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            cutoffs: vec![5, 10],
            negatives: 99,
            seed: 2024,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return Err(TipsError::Config("cutoffs must be a nonempty list of positive integers".into()));
        }
        if self.negatives == 0 {
            return Err(TipsError::Config("need at least one negative per positive".into()));
        }
        Ok(())
    }

    /// The per-user candidate stream, independent of evaluation order.
    fn user_rng(&self, user: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(user as u64 + 1);
        rng
    }

    /// Up to `negatives` distinct items, uniform over items that are neither
    /// the positive nor excluded.
    pub fn sample_negatives(&self, case: &EvalCase, n_items: usize) -> Vec<usize> {
        let blocked = |v: usize| v == case.positive || case.exclude.binary_search(&v).is_ok();
        let mut rng = self.user_rng(case.user);
        let n_blocked = (0..n_items).filter(|&v| blocked(v)).count();
        let available = n_items - n_blocked;
        if available <= self.negatives {
            return (0..n_items).filter(|&v| !blocked(v)).collect();
        }
        if available * 4 < n_items * 3 {
            // dense exclusion: sample positions among the allowed items
            let allowed: Vec<usize> = (0..n_items).filter(|&v| !blocked(v)).collect();
            return index::sample(&mut rng, allowed.len(), self.negatives)
                .into_iter()
                .map(|i| allowed[i])
                .collect();
        }
        let mut out = Vec::with_capacity(self.negatives);
        let mut seen = std::collections::HashSet::with_capacity(self.negatives);
        while out.len() < self.negatives {
            let v = rng.gen_range(0..n_items);
            if !blocked(v) && seen.insert(v) {
                out.push(v);
            }
        }
        out
    }
}

/// Produces ranking scores for a case's candidates.
pub trait Scorer {
    fn scores(&self, case: &EvalCase, candidates: &[usize]) -> Result<Vec<f64>>;
}

/// Scores from a trained model.
pub struct ModelScorer<'a> {
    pub layout: &'a ModelLayout,
    pub params: &'a ParamRegistry,
    pub mode: Mode,
}

impl Scorer for ModelScorer<'_> {
    fn scores(&self, case: &EvalCase, candidates: &[usize]) -> Result<Vec<f64>> {
        let u = self.layout.user_vector(self.params, self.mode, &case.history, &case.gaps)?;
        let table = self.params.value(self.layout.emb.h_c);
        candidates
            .iter()
            .map(|&v| {
                if v >= table.rows() {
                    return Err(TipsError::Index {
                        what: "item",
                        index: v,
                        len: table.rows(),
                    });
                }
                Ok(crate::numerics::tensor::dot(&u, table.row(v)))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub users: usize,
    pub mean: f64,
    pub positive_users: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    pub n_users: usize,
    pub skipped_users: usize,
    pub protocol_seed: u64,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub propensity_gap: Option<GapSummary>,
}

impl MetricReport {
    pub fn hr(&self, k: usize) -> f64 {
        self.metrics.get(&format!("HR@{k}")).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.metrics.get(&format!("NDCG@{k}")).copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| TipsError::Serde(e.to_string()))
    }
}

/// `1/log2(rank+1)` when `rank ≤ k`, else 0.
pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// 1-based rank of the positive (first score) among all candidates.
pub fn positive_rank(candidates: &[usize], scores: &[f64]) -> usize {
    let target = (candidates[0], scores[0]);
    let others: Vec<(usize, f64)> = candidates[1..]
        .iter()
        .copied()
        .zip(scores[1..].iter().copied())
        .collect();
    rank_of(target, &others)
}

/// Ranks each case's positive among sampled negatives.
pub fn evaluate<S: Scorer>(
    scorer: &S,
    cases: &[EvalCase],
    n_items: usize,
    protocol: &EvalProtocol,
    config_hash: &str,
) -> Result<MetricReport> {
    protocol.validate()?;
    let mut hits: BTreeMap<usize, f64> = protocol.cutoffs.iter().map(|&k| (k, 0.0)).collect();
    let mut gains = hits.clone();
    let mut n = 0usize;
    let mut skipped = 0usize;
    for case in cases {
        if case.history.is_empty() || case.positive >= n_items {
            skipped += 1;
            continue;
        }
        let mut candidates = vec![case.positive];
        candidates.extend(protocol.sample_negatives(case, n_items));
        let scores = scorer.scores(case, &candidates)?;
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(TipsError::Numeric(format!("score for user {}", case.user)));
        }
        let rank = positive_rank(&candidates, &scores);
        for &k in &protocol.cutoffs {
            if rank <= k {
                *hits.get_mut(&k).unwrap() += 1.0;
                *gains.get_mut(&k).unwrap() += ndcg_at(rank, k);
            }
        }
        n += 1;
    }
    let denom = n.max(1) as f64;
    let mut metrics = BTreeMap::new();
    for &k in &protocol.cutoffs {
        metrics.insert(format!("HR@{k}"), hits[&k] / denom);
        metrics.insert(format!("NDCG@{k}"), gains[&k] / denom);
    }
    Ok(MetricReport {
        metrics,
        n_users: n,
        skipped_users: skipped,
        protocol_seed: protocol.seed,
        config_hash: config_hash.to_string(),
        propensity_gap: None,
    })
}

/// Source of exposure propensities for the gap analysis.
pub enum PropensitySource<'a> {
    Learned {
        layout: &'a ModelLayout,
        params: &'a ParamRegistry,
        mode: Mode,
    },
    Static(&'a StaticPropensity),
}

impl PropensitySource<'_> {
    pub fn propensities(&self, case: &EvalCase, candidates: &[usize]) -> Result<Vec<f64>> {
        match self {
            PropensitySource::Learned { layout, params, mode } => {
                let queries: Vec<(usize, f64)> =
                    candidates.iter().map(|&v| (v, case.positive_gap)).collect();
                Ok(layout
                    .propensities(params, *mode, &case.history, &case.gaps, &queries)?
                    .into_iter()
                    .map(|p| p.s)
                    .collect())
            }
            PropensitySource::Static(p) => Ok(candidates.iter().map(|&v| p.propensity(v)).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserGap {
    pub user: usize,
    pub positive: f64,
    pub mean_negative: f64,
    pub gap: f64,
}

/// For `n_users` users drawn with `protocol.seed`: propensity of the
/// positive minus the mean propensity of its sampled negatives.
pub fn propensity_gaps(
    source: &PropensitySource<'_>,
    cases: &[EvalCase],
    n_items: usize,
    protocol: &EvalProtocol,
    n_users: usize,
) -> Result<Vec<UserGap>> {
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let picked = index::sample(&mut rng, cases.len(), n_users.min(cases.len())).into_vec();
    let mut picked = picked;
    picked.sort_unstable();
    let mut out = Vec::with_capacity(picked.len());
    for i in picked {
        let case = &cases[i];
        let mut candidates = vec![case.positive];
        candidates.extend(protocol.sample_negatives(case, n_items));
        let props = source.propensities(case, &candidates)?;
        let mean_negative = props[1..].iter().sum::<f64>() / (props.len() - 1).max(1) as f64;
        out.push(UserGap {
            user: case.user,
            positive: props[0],
            mean_negative,
            gap: props[0] - mean_negative,
        });
    }
    Ok(out)
}

pub fn summarize_gaps(gaps: &[UserGap]) -> GapSummary {
    GapSummary {
        users: gaps.len(),
        mean: gaps.iter().map(|g| g.gap).sum::<f64>() / gaps.len().max(1) as f64,
        positive_users: gaps.iter().filter(|g| g.gap > 0.0).count(),
    }
}

/// Equal-width histogram over `[lo, hi]`: `(bin_start, bin_end, count)`.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (lo + b as f64 * width, lo + (b + 1) as f64 * width, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f64>);

    impl Scorer for Fixed {
        fn scores(&self, _: &EvalCase, candidates: &[usize]) -> Result<Vec<f64>> {
            Ok(candidates.iter().map(|&v| self.0[v]).collect())
        }
    }

    fn case(user: usize, positive: usize) -> EvalCase {
        EvalCase {
            user,
            history: vec![0],
            gaps: vec![0.0],
            positive,
            positive_gap: 0.0,
            exclude: vec![0],
        }
    }

    #[test]
    fn ndcg_rank_two() {
        assert!((ndcg_at(2, 5) - 1.0 / 3f64.log2()).abs() < 1e-9);
        assert_eq!(ndcg_at(1, 5), 1.0);
        assert_eq!(ndcg_at(6, 5), 0.0);
    }

    #[test]
    fn top_ranked_positive_scores_one() {
        let scores: Vec<f64> = (0..200).map(|v| if v == 7 { 10.0 } else { 0.0 }).collect();
        let r = evaluate(&Fixed(scores), &[case(1, 7), case(2, 7)], 200, &EvalProtocol::default(), "h").unwrap();
        for k in [5, 10] {
            assert_eq!(r.hr(k), 1.0);
            assert_eq!(r.ndcg(k), 1.0);
        }
    }

    #[test]
    fn negatives_respect_exclusions_and_are_distinct() {
        let p = EvalProtocol::default();
        let mut c = case(3, 5);
        c.exclude = (0..50).collect();
        let negs = p.sample_negatives(&c, 200);
        assert_eq!(negs.len(), 99);
        let mut sorted = negs.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 99);
        assert!(negs.iter().all(|&v| v >= 50 && v != 5));
        assert_eq!(negs, p.sample_negatives(&c, 200));
        let small = p.sample_negatives(&c, 60);
        assert_eq!(small.len(), 10);
    }

    #[test]
    fn ties_rank_by_index() {
        // all equal: positive 7 is beaten by every negative with a lower index
        let c = case(0, 7);
        let scores = vec![1.0; 10];
        let p = EvalProtocol {
            cutoffs: vec![5, 10],
            negatives: 8,
            seed: 1,
        };
        let r = evaluate(&Fixed(scores), &[c], 10, &p, "h").unwrap();
        // candidates 1..9 minus 7 -> 1..6 precede the positive: rank 7
        assert_eq!(r.hr(5), 0.0);
        assert_eq!(r.hr(10), 1.0);
        assert!((r.ndcg(10) - 1.0 / 8f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn histogram_counts_everything() {
        let h = histogram(&[0.0, 0.1, 0.5, 1.0], 4);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), 4);
        assert_eq!(h[3].2, 1);
    }
}
