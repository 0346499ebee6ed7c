//! Counterfactual item-time pairs: similar item, popular item, perturbed
//! time; plus the exposure positive/negative sample sets built from them.

use std::collections::{HashMap, HashSet};

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PopularityIndex;
use crate::error::{Result, TipsError};
use crate::numerics::Tensor2;

pub const DEFAULT_DELTA_BOUND: f64 = 1e-4;
const MAX_REJECTIONS: usize = 100;

fn unit_rows(h_e: &Tensor2) -> Vec<Option<Vec<f64>>> {
    (0..h_e.rows())
        .map(|r| {
            let row = h_e.row(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            (norm > 0.0 && norm.is_finite()).then(|| row.iter().map(|x| x / norm).collect())
        })
        .collect()
}

fn best_match(unit: &[Option<Vec<f64>>], v: usize) -> Option<usize> {
    let q = unit[v].as_ref()?;
    let mut best: Option<(usize, f64)> = None;
    for (j, row) in unit.iter().enumerate() {
        if j == v {
            continue;
        }
        let Some(row) = row else { continue };
        let sim: f64 = q.iter().zip(row).map(|(a, b)| a * b).sum();
        if best.map_or(true, |(_, b)| sim > b) {
            best = Some((j, sim));
        }
    }
    best.map(|(j, _)| j)
}

fn random_other<R: Rng>(n: usize, v: usize, rng: &mut R) -> usize {
    let j = rng.gen_range(0..n - 1);
    if j >= v {
        j + 1
    } else {
        j
    }
}

/// Most cosine-similar other item in exposure space; ties go to the lowest
/// index, zero rows are never returned. If no comparison is possible (zero
/// query or all candidates zero) a uniformly random other item is returned.
pub fn similar_item<R: Rng>(h_e: &Tensor2, v: usize, rng: &mut R) -> Result<usize> {
    let n = h_e.rows();
    if n < 2 {
        return Err(TipsError::Precondition("similar item needs at least two items".into()));
    }
    if v >= n {
        return Err(TipsError::Index {
            what: "item",
            index: v,
            len: n,
        });
    }
    match best_match(&unit_rows(h_e), v) {
        Some(j) => Ok(j),
        None => {
            warn!("no nonzero exposure embedding to compare with item {v}; picking at random");
            Ok(random_other(n, v, rng))
        }
    }
}

/// `v_sim` for every item, computed once from a snapshot of `H_E`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityTable {
    best: Vec<usize>,
}

impl SimilarityTable {
    pub fn build<R: Rng>(h_e: &Tensor2, rng: &mut R) -> Result<Self> {
        let n = h_e.rows();
        if n < 2 {
            return Err(TipsError::Precondition("similar item needs at least two items".into()));
        }
        let unit = unit_rows(h_e);
        let mut fallbacks = 0;
        let best = (0..n)
            .map(|v| {
                best_match(&unit, v).unwrap_or_else(|| {
                    fallbacks += 1;
                    random_other(n, v, rng)
                })
            })
            .collect();
        if fallbacks > 0 {
            warn!("{fallbacks} items had no comparable exposure embedding; similar item drawn at random");
        }
        Ok(SimilarityTable { best })
    }

    pub fn similar(&self, v: usize) -> usize {
        self.best[v]
    }
}

/// Uniform draws from the windowed Top-K popular items excluding the query
/// item, with per-timestamp caching of the ranked list.
#[derive(Debug)]
pub struct PopularSampler<'a> {
    index: &'a PopularityIndex,
    k: usize,
    tau: Option<i64>,
    cache: HashMap<i64, Vec<usize>>,
    global: Vec<usize>,
    fallbacks: usize,
}

impl<'a> PopularSampler<'a> {
    pub fn new(index: &'a PopularityIndex, k: usize, tau: Option<i64>) -> Result<Self> {
        if k == 0 {
            return Err(TipsError::Config("popular top-k must be at least 1".into()));
        }
        let global = index.top_k(0, None, k + 1, None)?;
        if let Some(t) = tau {
            // validates τ once
            index.top_k(0, Some(t), 1, None)?;
        }
        Ok(PopularSampler {
            index,
            k,
            tau,
            cache: HashMap::new(),
            global,
            fallbacks: 0,
        })
    }

    /// Times the window was empty and the global ranking was used.
    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }

    /// The sampling support for `(v_i, t)`.
    pub fn support(&mut self, v_i: usize, t: i64) -> Result<Vec<usize>> {
        let ranked = match self.tau {
            None => &self.global,
            Some(tau) => {
                if !self.cache.contains_key(&t) {
                    let top = self.index.top_k(t, Some(tau), self.k + 1, None)?;
                    self.cache.insert(t, top);
                }
                &self.cache[&t]
            }
        };
        let mut support: Vec<usize> = ranked.iter().copied().filter(|&v| v != v_i).collect();
        support.truncate(self.k);
        if support.is_empty() {
            self.fallbacks += 1;
            support = self.global.iter().copied().filter(|&v| v != v_i).collect();
            support.truncate(self.k);
        }
        if support.is_empty() {
            return Err(TipsError::Sampling(format!(
                "no popular item other than {v_i} in the training data"
            )));
        }
        Ok(support)
    }

    pub fn sample<R: Rng>(&mut self, v_i: usize, t: i64, rng: &mut R) -> Result<usize> {
        let support = self.support(v_i, t)?;
        Ok(support[rng.gen_range(0..support.len())])
    }
}

/// One-shot popular-item draw (see [`PopularSampler`]).
pub fn popular_item<R: Rng>(
    index: &PopularityIndex,
    v_i: usize,
    t: i64,
    k: usize,
    tau: Option<i64>,
    rng: &mut R,
) -> Result<usize> {
    let mut sampler = PopularSampler::new(index, k, tau)?;
    let v = sampler.sample(v_i, t, rng)?;
    if sampler.fallbacks() > 0 {
        warn!("empty popularity window at t={t}; used global ranking");
    }
    Ok(v)
}

/// Coordinate-wise uniform noise in `[-bound, bound]`.
pub fn draw_delta<R: Rng>(dim: usize, bound: f64, rng: &mut R) -> Vec<f64> {
    (0..dim)
        .map(|_| if bound > 0.0 { rng.gen_range(-bound..=bound) } else { 0.0 })
        .collect()
}

/// `t + Δ`.
pub fn perturb_time<R: Rng>(t_embed: &[f64], bound: f64, rng: &mut R) -> Vec<f64> {
    let delta = draw_delta(t_embed.len(), bound, rng);
    t_embed.iter().zip(delta).map(|(a, b)| a + b).collect()
}

/// A factual training interaction `(v_i, t_i)` with the timestamp of the
/// interaction before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactualPair {
    pub item: usize,
    pub timestamp: i64,
    pub prev_timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualTriple {
    pub sim: usize,
    pub pop: usize,
    /// `Δ` added to the time embedding of `(v_i, t_i)`.
    pub delta: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Factual,
    Similar,
    Popular,
    Jitter,
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposurePair {
    pub item: usize,
    pub timestamp: i64,
    pub kind: PairKind,
}

/// `E⁺` holds four pairs per factual interaction (factual, similar,
/// popular, jitter, in that order); `E⁻` holds `4·negative_ratio` sampled
/// pairs per factual interaction, grouped in the same order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureSampleSets {
    pub positives: Vec<ExposurePair>,
    pub negatives: Vec<ExposurePair>,
    pub triples: Vec<CounterfactualTriple>,
    pub negative_ratio: usize,
}

impl ExposureSampleSets {
    pub fn positives_of(&self, i: usize) -> &[ExposurePair] {
        &self.positives[4 * i..4 * i + 4]
    }

    pub fn negatives_of(&self, i: usize) -> &[ExposurePair] {
        let n = 4 * self.negative_ratio;
        &self.negatives[n * i..n * i + n]
    }
}

/// Everything needed to build counterfactuals for a batch.
pub struct CounterfactualContext<'a> {
    pub similar: &'a SimilarityTable,
    pub n_items: usize,
    /// Training time span; sampled negative timestamps are uniform on it.
    pub span: (i64, i64),
    pub dim: usize,
    pub delta_bound: f64,
}

pub fn build_sample_sets<R: Rng>(
    batch: &[FactualPair],
    ctx: &CounterfactualContext<'_>,
    popular: &mut PopularSampler<'_>,
    negative_ratio: usize,
    rng: &mut R,
) -> Result<ExposureSampleSets> {
    if batch.is_empty() {
        return Err(TipsError::Precondition("empty batch".into()));
    }
    if ctx.n_items == 0 {
        return Err(TipsError::Precondition("empty item catalogue".into()));
    }
    let mut positives = Vec::with_capacity(4 * batch.len());
    let mut triples = Vec::with_capacity(batch.len());
    for f in batch {
        let sim = ctx.similar.similar(f.item);
        let pop = popular.sample(f.item, f.timestamp, rng)?;
        let delta = draw_delta(ctx.dim, ctx.delta_bound, rng);
        for (item, kind) in [
            (f.item, PairKind::Factual),
            (sim, PairKind::Similar),
            (pop, PairKind::Popular),
            (f.item, PairKind::Jitter),
        ] {
            positives.push(ExposurePair {
                item,
                timestamp: f.timestamp,
                kind,
            });
        }
        triples.push(CounterfactualTriple { sim, pop, delta });
    }
    let taken: HashSet<(usize, i64)> = positives.iter().map(|p| (p.item, p.timestamp)).collect();
    let (lo, hi) = ctx.span;
    let mut negatives = Vec::with_capacity(positives.len() * negative_ratio);
    for _ in 0..positives.len() * negative_ratio {
        let mut found = None;
        for _ in 0..MAX_REJECTIONS {
            let item = rng.gen_range(0..ctx.n_items);
            let timestamp = rng.gen_range(lo..=hi);
            if !taken.contains(&(item, timestamp)) {
                found = Some(ExposurePair {
                    item,
                    timestamp,
                    kind: PairKind::Sampled,
                });
                break;
            }
        }
        negatives.push(found.ok_or_else(|| {
            TipsError::Sampling(format!(
                "no unexposed item-time pair found after {MAX_REJECTIONS} draws"
            ))
        })?);
    }
    Ok(ExposureSampleSets {
        positives,
        negatives,
        triples,
        negative_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn similar_item_toy_and_duplicate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]]).unwrap();
        assert_eq!(similar_item(&h, 0, &mut rng).unwrap(), 1);
        let h = Tensor2::from_rows(&[vec![0.0, 1.0], vec![0.3, 0.7], vec![1.0, 0.0], vec![0.3, 0.7]])
            .unwrap();
        assert_eq!(similar_item(&h, 1, &mut rng).unwrap(), 3);
        assert_eq!(similar_item(&h, 3, &mut rng).unwrap(), 1);
    }

    #[test]
    fn zero_rows_skipped_and_fallback() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![-1.0, 0.1]]).unwrap();
        assert_eq!(similar_item(&h, 0, &mut rng).unwrap(), 2);
        let z = Tensor2::zeros(3, 2);
        for _ in 0..20 {
            assert_ne!(similar_item(&z, 1, &mut rng).unwrap(), 1);
        }
        assert!(similar_item(&Tensor2::zeros(1, 2), 0, &mut rng).is_err());
    }

    #[test]
    fn table_matches_single_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = crate::numerics::uniform_init(30, 5, 1.0, &mut rng);
        let t = SimilarityTable::build(&h, &mut rng).unwrap();
        for v in 0..30 {
            assert_eq!(t.similar(v), similar_item(&h, v, &mut rng).unwrap());
        }
    }

    fn index() -> PopularityIndex {
        // item 0 dominant, then 1, 2, 3
        let mut ev = Vec::new();
        for (item, n) in [(0usize, 5usize), (1, 3), (2, 2), (3, 1)] {
            for k in 0..n {
                ev.push((item, k as i64 * 10));
            }
        }
        PopularityIndex::build(5, ev)
    }

    #[test]
    fn popular_singleton_and_exclusion() {
        let idx = index();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert_eq!(popular_item(&idx, 3, 100, 1, None, &mut rng).unwrap(), 0);
            assert_eq!(popular_item(&idx, 0, 100, 1, None, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn empty_window_falls_back_to_global() {
        let idx = index();
        let mut s = PopularSampler::new(&idx, 2, Some(5)).unwrap();
        assert_eq!(s.support(4, 10_000).unwrap(), vec![0, 1]);
        assert_eq!(s.fallbacks(), 1);
        assert!(PopularSampler::new(&idx, 2, Some(0)).is_err());
    }

    #[test]
    fn delta_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = vec![0.5; 8];
        for _ in 0..100 {
            let p = perturb_time(&t, DEFAULT_DELTA_BOUND, &mut rng);
            assert!(p.iter().zip(&t).all(|(a, b)| (a - b).abs() <= DEFAULT_DELTA_BOUND));
        }
        assert_eq!(perturb_time(&t, 0.0, &mut rng), t);
    }

    fn ctx(sim: &SimilarityTable, n: usize, span: (i64, i64)) -> CounterfactualContext<'_> {
        CounterfactualContext {
            similar: sim,
            n_items: n,
            span,
            dim: 4,
            delta_bound: DEFAULT_DELTA_BOUND,
        }
    }

    #[test]
    fn sample_set_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = crate::numerics::uniform_init(5, 4, 1.0, &mut rng);
        let sim = SimilarityTable::build(&h, &mut rng).unwrap();
        let idx = index();
        let c = ctx(&sim, 5, (0, 40));
        let mut pop = PopularSampler::new(&idx, 3, None).unwrap();
        let f = FactualPair {
            item: 2,
            timestamp: 20,
            prev_timestamp: 10,
        };
        let sets = build_sample_sets(&[f], &c, &mut pop, 1, &mut rng).unwrap();
        assert_eq!((sets.positives.len(), sets.negatives.len()), (4, 4));
        assert_ne!(sets.triples[0].sim, 2);
        assert_ne!(sets.triples[0].pop, 2);
        assert!(build_sample_sets(&[], &c, &mut pop, 1, &mut rng).is_err());
    }

    #[test]
    fn tiny_collision_space_errors() {
        // two items, one timestamp, both already positive
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let sim = SimilarityTable::build(&h, &mut rng).unwrap();
        let idx = PopularityIndex::build(2, vec![(0, 7), (1, 7)]);
        let c = ctx(&sim, 2, (7, 7));
        let mut pop = PopularSampler::new(&idx, 3, None).unwrap();
        let f = FactualPair {
            item: 0,
            timestamp: 7,
            prev_timestamp: 7,
        };
        assert!(matches!(
            build_sample_sets(&[f], &c, &mut pop, 1, &mut rng),
            Err(TipsError::Sampling(_))
        ));
    }
}
