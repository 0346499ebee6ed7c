//! MovieLens-1M acceptance criteria. Needs `TIPS_ML1M_PATH` pointing at
//! `ratings.dat`; without it every criterion reports BLOCKED and fails.
//!
//! Optional: `TIPS_ML1M_FRACTION` (user subsample, default 0.2) and
//! `TIPS_ML1M_EPOCHS` (default 10).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use tips_core::config::RunConfig;
use tips_core::data::{load_log, LogFormat};
use tips_core::dataset::TrainingData;
use tips_core::objective::Mode;
use tips_core::pipeline::{analyze_propensity, evaluate_model, subsample_users, train_mode};
use tips_core::train::OptimizerKind;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn env_or<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn line(pass: bool, id: &str, name: &str, detail: &str) -> bool {
    println!("{} [{id}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() {
    let criteria = [
        ("ingest", "ML-1M statistics"),
        ("5", "propensity discriminability"),
        ("6", "ablation ordering (ML-1M)"),
        ("7", "TIPS vs base attention (ML-1M)"),
    ];
    let Some(path) = std::env::var_os("TIPS_ML1M_PATH").map(PathBuf::from) else {
        for (id, name) in criteria {
            line(false, id, name, "BLOCKED: TIPS_ML1M_PATH is not set (MovieLens-1M ratings.dat required)");
        }
        std::process::exit(1);
    };
    let full = match load_log(&path, &LogFormat::movielens()) {
        Ok(log) => log,
        Err(e) => {
            for (id, name) in criteria {
                line(false, id, name, &format!("BLOCKED: {e}"));
            }
            std::process::exit(1);
        }
    };
    let mut ok = true;
    let s = full.stats();
    ok &= line(
        s.n_users == 5950 && s.n_items == 3532 && s.n_interactions == 574_619,
        "ingest",
        "ML-1M statistics",
        &format!("{} users, {} items, {} interactions (expected 5950 / 3532 / 574619)", s.n_users, s.n_items, s.n_interactions),
    );

    let fraction = env_or("TIPS_ML1M_FRACTION", 0.2);
    let mut base = RunConfig::default();
    base.model.dim = 64;
    base.model.max_len = 50;
    base.train.optimizer = OptimizerKind::Adam;
    base.train.lr = 1e-3;
    base.train.batch_size = 64;
    base.train.epochs = env_or("TIPS_ML1M_EPOCHS", 10);
    base.data.user_fraction = fraction;

    let mut hr: Vec<BTreeMap<Mode, f64>> = Vec::new();
    let mut gap_line = None;
    for seed in SEEDS {
        let start = Instant::now();
        let cfg = RunConfig { seed, ..base.clone() };
        let log = subsample_users(&full, fraction, seed).unwrap();
        let data = TrainingData::from_log(&log, cfg.model.max_len).unwrap();
        let cases = data.test_cases();
        let mut row = BTreeMap::new();
        for mode in Mode::ALL {
            let (model, _) = train_mode(&cfg, &data, mode).unwrap();
            let report = evaluate_model(&cfg, &model, mode, &cases, data.n_items).unwrap();
            row.insert(mode, report.hr(10));
            if mode == Mode::Tips && seed == SEEDS[0] {
                let a = analyze_propensity(&cfg, &model, mode, &data, &cases, 100).unwrap();
                gap_line = Some((a.learned.mean, a.static_ips.mean, a.learned_wins));
            }
        }
        eprintln!(
            "  seed {seed} ({:.0}s): {}",
            start.elapsed().as_secs_f64(),
            row.iter().map(|(m, v)| format!("{m} {v:.4}")).collect::<Vec<_>>().join(", ")
        );
        hr.push(row);
    }

    let (learned, fixed, wins) = gap_line.unwrap();
    ok &= line(
        learned > 0.0 && wins >= 70,
        "5",
        "propensity discriminability",
        &format!("mean gap TIPS {learned:.4}, static {fixed:.4}; TIPS larger on {wins}/100 users (>= 70)"),
    );

    let votes = hr
        .iter()
        .filter(|h| {
            h[&Mode::Tips] > h[&Mode::NoTime]
                && h[&Mode::NoTime] >= h[&Mode::NoIps]
                && h[&Mode::NoIps] > h[&Mode::StaticIps]
        })
        .count();
    ok &= line(votes >= 3, "6", "ablation ordering (ML-1M)", &format!("ordering holds on {votes}/5 seeds"));

    let better = hr.iter().filter(|h| h[&Mode::Tips] > h[&Mode::None]).count();
    let rel: Vec<String> = hr
        .iter()
        .map(|h| format!("{:+.2}%", (h[&Mode::Tips] - h[&Mode::None]) / h[&Mode::None] * 100.0))
        .collect();
    ok &= line(
        better >= 4,
        "7",
        "TIPS vs base attention (ML-1M)",
        &format!("improvement > 0 on {better}/5 seeds ({})", rel.join(", ")),
    );
    if !ok {
        std::process::exit(1);
    }
}
