use std::collections::HashSet;

use tips_core::simulator::{simulate, unbiased_testset, world_items, world_users, ExposurePolicy, WorldSpec};
use tips_core::stats::spearman;

fn small(policy: ExposurePolicy) -> WorldSpec {
    WorldSpec {
        n_users: 100,
        n_items: 50,
        latent_dim: 4,
        steps: 20,
        slate_size: 5,
        policy,
        personalization: 0.0,
        activity: 1.0,
        ..Default::default()
    }
}

#[test]
fn saturated_clicks_follow_every_exposure() {
    let spec = WorldSpec { click_scale: 0.0, click_bias: 40.0, ..small(ExposurePolicy::Uniform) };
    let b = simulate(&spec, 1).unwrap();
    assert!(!b.exposures.is_empty());
    let rate = b.clicks.len() as f64 / b.exposures.len() as f64;
    assert!(rate > 0.999, "{rate}");
}

#[test]
fn empty_slate_gives_empty_logs() {
    let b = simulate(&WorldSpec { slate_size: 0, ..small(ExposurePolicy::PopularitySkew { beta: 2.0 }) }, 0).unwrap();
    assert!(b.exposures.is_empty() && b.clicks.is_empty());
    assert_eq!(b.to_log().unwrap().len(), 0);
}

#[test]
fn exposure_counts_match_policy_within_three_sigma() {
    // no clicks, so every user faces the same per-step probabilities
    let spec = WorldSpec { click_scale: 0.0, click_bias: -60.0, ..small(ExposurePolicy::PopularitySkew { beta: 2.0 }) };
    let b = simulate(&spec, 7).unwrap();
    assert!(b.clicks.is_empty());
    let none = HashSet::new();
    let mut mean = vec![0.0; spec.n_items];
    let mut var = vec![0.0; spec.n_items];
    for step in 0..spec.steps {
        let p = b.policy_probabilities(0, step, &none);
        assert!((p.iter().sum::<f64>() - spec.slate_size as f64).abs() < 1e-9);
        for v in 0..spec.n_items {
            mean[v] += spec.n_users as f64 * p[v];
            var[v] += spec.n_users as f64 * p[v] * (1.0 - p[v]);
        }
    }
    let counts = b.exposure_counts();
    for v in 0..spec.n_items {
        let dev = (counts[v] as f64 - mean[v]).abs();
        assert!(dev <= 3.0 * var[v].sqrt(), "item {v}: {} vs {:.1} ± {:.1}", counts[v], mean[v], var[v].sqrt());
    }
}

#[test]
fn skewed_exposure_drives_clicks_under_uniform_affinity() {
    let spec = WorldSpec { click_scale: 0.0, click_bias: -1.0, ..small(ExposurePolicy::PopularitySkew { beta: 2.0 }) };
    let b = simulate(&spec, 3).unwrap();
    b.check_consistency().unwrap();
    let e: Vec<f64> = b.exposure_counts().iter().map(|&x| x as f64).collect();
    let c: Vec<f64> = b.click_counts().iter().map(|&x| x as f64).collect();
    let rho = spearman(&e, &c).unwrap();
    assert!(rho > 0.0, "{rho}");
}

#[test]
fn unbiased_positives_match_affinity_argsort() {
    let spec = WorldSpec { n_users: 20, n_items: 30, steps: 15, ..small(ExposurePolicy::PopularitySkew { beta: 2.0 }) };
    let b = simulate(&spec, 5).unwrap();
    let log = b.to_log().unwrap();
    let items = world_items(&log).unwrap();
    let users = world_users(&log).unwrap();
    let (positives, skipped) = unbiased_testset(&b, &log).unwrap();
    assert_eq!(positives.len() + skipped, log.n_users());
    for p in &positives {
        let wu = users[p.log_user];
        let clicked: HashSet<usize> = log.sequence(p.log_user).map(|r| items[r.item]).collect();
        let mut order: Vec<usize> = items.clone();
        order.sort_by(|&x, &y| b.affinity.get(wu, y).total_cmp(&b.affinity.get(wu, x)).then(x.cmp(&y)));
        let expected = order.into_iter().find(|v| !clicked.contains(v)).unwrap();
        assert_eq!(p.world_item, expected);
        assert_eq!(items[p.log_item], p.world_item);
    }
}

#[test]
fn never_exposed_top_item_becomes_the_positive() {
    let spec = WorldSpec { n_users: 40, n_items: 30, steps: 10, slate_size: 3, ..small(ExposurePolicy::PopularitySkew { beta: 3.0 }) };
    let b = simulate(&spec, 2).unwrap();
    let log = b.to_log().unwrap();
    let items = world_items(&log).unwrap();
    let users = world_users(&log).unwrap();
    let (positives, _) = unbiased_testset(&b, &log).unwrap();
    let mut found = 0;
    for p in &positives {
        let wu = users[p.log_user];
        let top = *items.iter().max_by(|&&x, &&y| b.affinity.get(wu, x).total_cmp(&b.affinity.get(wu, y))).unwrap();
        if !b.exposures.iter().any(|e| e.user == wu && e.item == top) {
            assert_eq!(p.world_item, top);
            found += 1;
        }
    }
    assert!(found > 0);
}

#[test]
fn users_who_clicked_everything_are_skipped() {
    let spec = WorldSpec {
        n_users: 3,
        n_items: 2,
        steps: 4,
        slate_size: 2,
        click_scale: 0.0,
        click_bias: 60.0,
        ..small(ExposurePolicy::Uniform)
    };
    let b = simulate(&spec, 0).unwrap();
    let log = b.to_log().unwrap();
    assert_eq!(log.len(), 6);
    let (positives, skipped) = unbiased_testset(&b, &log).unwrap();
    assert!(positives.is_empty());
    assert_eq!(skipped, 3);
}
