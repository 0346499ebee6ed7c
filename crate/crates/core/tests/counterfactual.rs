use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tips_core::counterfactual::{
    build_sample_sets, perturb_time, similar_item, CounterfactualContext, FactualPair, PopularSampler,
    SimilarityTable, DEFAULT_DELTA_BOUND,
};
use tips_core::data::{InteractionLog, PopularityIndex};
use tips_core::dataset::TrainingData;
use tips_core::model::{ModelConfig, TipsModel};
use tips_core::numerics::{uniform_init, Tensor2};
use tips_core::objective::{Mode, ObjectiveConfig, StaticPropensity};
use tips_core::train::{training_instances, BatchPlanner, CounterfactualConfig};

const DAY: i64 = 86_400;

fn context(sim: &SimilarityTable, n_items: usize, span: (i64, i64), dim: usize) -> CounterfactualContext<'_> {
    CounterfactualContext {
        similar: sim,
        n_items,
        span,
        dim,
        delta_bound: DEFAULT_DELTA_BOUND,
    }
}

proptest! {
    #[test]
    fn similar_item_ignores_positive_rescaling(seed in any::<u64>(), n in 2usize..12, d in 1usize..6, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = uniform_init(n, d, 1.0, &mut rng);
        let scaled = Tensor2::from_vec(n, d, h.data().iter().map(|x| x * scale).collect()).unwrap();
        let v = rng.gen_range(0..n);
        let a = similar_item(&h, v, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = similar_item(&scaled, v, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_ne!(a, v);
    }
}

#[test]
fn popular_draws_are_uniform_over_top_k() {
    // items 0..3 dominate the last week; 3..6 are popular only long before
    let mut events = Vec::new();
    for (item, n, at) in [(0, 9, 20 * DAY), (1, 7, 20 * DAY), (2, 5, 20 * DAY), (3, 30, DAY), (4, 30, DAY), (5, 1, 20 * DAY)] {
        events.extend((0..n).map(|k| (item, at + k as i64)));
    }
    let idx = PopularityIndex::build(7, events);
    let mut sampler = PopularSampler::new(&idx, 3, Some(7 * DAY)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let mut counts = [0usize; 7];
    for _ in 0..n {
        counts[sampler.sample(6, 21 * DAY, &mut rng).unwrap()] += 1;
    }
    assert_eq!(counts[3..].iter().sum::<usize>(), 0, "{counts:?}");
    let p = 1.0 / 3.0;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    for &c in &counts[..3] {
        assert!((c as f64 - n as f64 * p).abs() < 3.0 * sd, "{counts:?}");
    }
    assert_eq!(sampler.fallbacks(), 0);
}

#[test]
fn perturbation_has_zero_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = vec![0.25, -0.5, 1.0];
    let n = 100_000;
    let mut mean = vec![0.0; t.len()];
    for _ in 0..n {
        for (m, (p, x)) in mean.iter_mut().zip(perturb_time(&t, DEFAULT_DELTA_BOUND, &mut rng).iter().zip(&t)) {
            *m += (p - x) / n as f64;
        }
    }
    assert!(mean.iter().all(|m| m.abs() < 1e-6), "{mean:?}");
}

#[test]
fn exposed_and_sampled_sets_are_disjoint() {
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_items = rng.gen_range(2..8);
        let h = uniform_init(n_items, 4, 1.0, &mut rng);
        let sim = SimilarityTable::build(&h, &mut rng).unwrap();
        let events: Vec<(usize, i64)> = (0..20).map(|_| (rng.gen_range(0..n_items), rng.gen_range(0..10))).collect();
        let idx = PopularityIndex::build(n_items, events);
        let mut pop = PopularSampler::new(&idx, 2, None).unwrap();
        let batch: Vec<FactualPair> = (0..4)
            .map(|_| {
                let t = rng.gen_range(1..10);
                FactualPair { item: rng.gen_range(0..n_items), timestamp: t, prev_timestamp: t - 1 }
            })
            .collect();
        let sets = build_sample_sets(&batch, &context(&sim, n_items, (0, 10), 4), &mut pop, 2, &mut rng).unwrap();
        let pos: HashSet<(usize, i64)> = sets.positives.iter().map(|p| (p.item, p.timestamp)).collect();
        assert!(sets.negatives.iter().all(|p| !pos.contains(&(p.item, p.timestamp))), "seed {seed}");
        assert_eq!(sets.negatives.len(), 4 * 4 * 2);
    }
}

#[test]
fn two_item_catalogue_retries_deterministically() {
    // every item at t=7 is exposed, so only t=8 is admissible
    let h = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let run = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sim = SimilarityTable::build(&h, &mut rng).unwrap();
        let idx = PopularityIndex::build(2, vec![(0, 7), (1, 7)]);
        let mut pop = PopularSampler::new(&idx, 1, None).unwrap();
        let f = FactualPair { item: 0, timestamp: 7, prev_timestamp: 6 };
        build_sample_sets(&[f], &context(&sim, 2, (7, 8), 2), &mut pop, 1, &mut rng).unwrap()
    };
    for seed in 0..20 {
        let a = run(seed);
        assert!(a.negatives.iter().all(|p| p.timestamp == 8));
        assert_eq!(a, run(seed));
    }
}

#[test]
fn counterfactuals_are_exposure_positives_and_ranking_negatives() {
    let mut rows = Vec::new();
    for u in 0..5 {
        for k in 0..6 {
            rows.push((format!("u{u}"), format!("i{}", (u * 3 + k * 2) % 9), (u * 1_000 + k * 7_200) as i64));
        }
    }
    let log = InteractionLog::from_records(rows).unwrap();
    let data = TrainingData::from_log(&log, 4).unwrap();
    let model = TipsModel::new(&ModelConfig { dim: 8, heads: 2, max_len: 4, ..Default::default() }, data.n_items, 1).unwrap();
    let objective = ObjectiveConfig { mode: Mode::Tips, ..Default::default() };
    let cf = CounterfactualConfig { top_k: 3, ..Default::default() };
    let statics = StaticPropensity::from_index(&data.popularity, objective.static_alpha).unwrap();
    let planner = BatchPlanner { data: &data, objective: &objective, counterfactual: &cf, statics: &statics, dim: 8 };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let similar = SimilarityTable::build(model.params.value(model.layout.emb.h_e), &mut rng).unwrap();
    let mut popular = PopularSampler::new(&data.popularity, cf.top_k, Some(cf.tau_seconds())).unwrap();
    let instances = training_instances(&data);
    let plans = planner.plan(&instances, &similar, &mut popular, &mut rng).unwrap();
    for p in &plans {
        let e = p.exposure.as_ref().unwrap();
        assert_eq!(e.n_positive, 4);
        assert_eq!(&e.items[..4], &[p.target, p.negatives[0], p.negatives[1], p.target]);
        assert_eq!(p.negatives[2], p.target);
        assert_ne!(p.negatives[0], p.target);
        assert_ne!(p.negatives[1], p.target);
        assert!(e.delta.iter().all(|d| d.abs() <= DEFAULT_DELTA_BOUND));
    }
}
