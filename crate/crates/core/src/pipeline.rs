//! End-to-end steps shared by the command line and the test suites: load a
//! log, train a mode, evaluate, compare ablations, analyse propensities.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{load_log, InteractionLog};
use crate::dataset::{EvalCase, TrainingData};
use crate::error::{Result, TipsError};
use crate::eval::{
    evaluate, histogram, propensity_gaps, summarize_gaps, GapSummary, MetricReport, ModelScorer, PropensitySource,
    UserGap,
};
use crate::model::TipsModel;
use crate::objective::{Mode, StaticPropensity};
use crate::simulator::PropensityProbe;
use crate::stats::spearman;
use crate::train::{train, TrainOutcome};

/// Keeps a seeded random `fraction` of users (at least one).
pub fn subsample_users(log: &InteractionLog, fraction: f64, seed: u64) -> Result<InteractionLog> {
    if fraction >= 1.0 {
        return Ok(log.clone());
    }
    let n = log.n_users();
    let keep = ((n as f64 * fraction).round() as usize).clamp(1, n.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut users = index::sample(&mut rng, n, keep).into_vec();
    users.sort_unstable();
    let mut records = Vec::new();
    for u in users {
        for r in log.sequence(u) {
            records.push((log.user_id(u).to_string(), log.item_id(r.item).to_string(), r.timestamp));
        }
    }
    InteractionLog::from_records(records)
}

/// The configured log, subsampled if requested.
pub fn load_configured_log(cfg: &RunConfig) -> Result<InteractionLog> {
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| TipsError::Config("data.path is not set".into()))?;
    let log = load_log(path, &cfg.data.format)?;
    subsample_users(&log, cfg.data.user_fraction, cfg.seed)
}

/// A fresh model for `data` trained under `cfg` with `mode`.
pub fn train_mode(cfg: &RunConfig, data: &TrainingData, mode: Mode) -> Result<(TipsModel, TrainOutcome)> {
    let mut model = TipsModel::new(&cfg.model, data.n_items, cfg.seed)?;
    let objective = crate::objective::ObjectiveConfig {
        mode,
        ..cfg.objective.clone()
    };
    let outcome = train(
        &mut model,
        data,
        &objective,
        &cfg.counterfactual,
        &cfg.train,
        &cfg.eval,
        cfg.seed,
    )?;
    Ok((model, outcome))
}

pub fn evaluate_model(
    cfg: &RunConfig,
    model: &TipsModel,
    mode: Mode,
    cases: &[EvalCase],
    n_items: usize,
) -> Result<MetricReport> {
    let scorer = ModelScorer {
        layout: &model.layout,
        params: &model.params,
        mode,
    };
    evaluate(&scorer, cases, n_items, &cfg.eval, &cfg.config_hash())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub label: String,
    pub metrics: BTreeMap<String, f64>,
    /// Relative change against the first row, in percent.
    pub delta_percent: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub seed: u64,
    pub config_hash: String,
}

impl AblationTable {
    pub fn from_reports(reports: &[(Mode, MetricReport)], seed: u64, config_hash: &str) -> Self {
        let base = reports.first().map(|r| r.1.metrics.clone()).unwrap_or_default();
        let rows = reports
            .iter()
            .map(|(mode, r)| AblationRow {
                mode: *mode,
                label: mode.label().to_string(),
                metrics: r.metrics.clone(),
                delta_percent: r
                    .metrics
                    .iter()
                    .map(|(k, v)| {
                        let b = base.get(k).copied().unwrap_or(f64::NAN);
                        let d = if b != 0.0 { (v - b) / b * 100.0 } else { 0.0 };
                        (k.clone(), d)
                    })
                    .collect(),
            })
            .collect();
        AblationTable {
            rows,
            seed,
            config_hash: config_hash.to_string(),
        }
    }

    pub fn hr10(&self, mode: Mode) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.mode == mode)
            .and_then(|r| r.metrics.get("HR@10").copied())
    }

    /// Plain-text table; deltas are relative to the first row.
    pub fn to_text(&self) -> String {
        let keys: Vec<String> = self.rows.first().map(|r| r.metrics.keys().cloned().collect()).unwrap_or_default();
        let mut out = format!("# config {} seed {}\n", self.config_hash, self.seed);
        let _ = write!(out, "{:<18}", "Variant");
        for k in &keys {
            let _ = write!(out, " {:>18}", k);
        }
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(out, "{:<18}", r.label);
            for k in &keys {
                let v = r.metrics[k];
                let cell = if i == 0 {
                    format!("{v:.4}")
                } else {
                    let d = r.delta_percent[k];
                    let sign = if d < 0.0 { "-" } else { "+" };
                    format!("{v:.4} ({sign}{:.2}%)", d.abs())
                };
                let _ = write!(out, " {:>18}", cell);
            }
            out.push('\n');
        }
        out
    }
}

/// Trains and evaluates every mode in `modes` under one seed.
pub fn ablate(
    cfg: &RunConfig,
    data: &TrainingData,
    cases: &[EvalCase],
    modes: &[Mode],
) -> Result<AblationTable> {
    let mut reports = Vec::with_capacity(modes.len());
    for &mode in modes {
        let (model, _) = train_mode(cfg, data, mode)?;
        reports.push((mode, evaluate_model(cfg, &model, mode, cases, data.n_items)?));
    }
    Ok(AblationTable::from_reports(&reports, cfg.seed, &cfg.config_hash()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropensityAnalysis {
    pub learned: GapSummary,
    pub static_ips: GapSummary,
    /// Users whose learned gap exceeds their static gap.
    pub learned_wins: usize,
    pub users: Vec<(UserGap, UserGap)>,
    pub seed: u64,
    pub config_hash: String,
}

impl PropensityAnalysis {
    /// Histogram bins of both gap distributions over a shared range.
    pub fn histogram_csv(&self, bins: usize) -> String {
        let all: Vec<f64> = self.users.iter().flat_map(|(a, b)| [a.gap, b.gap]).collect();
        let edges = histogram(&all, bins);
        let mut out = format!("# config {} seed {}\nbin_start,bin_end,learned,static\n", self.config_hash, self.seed);
        if edges.is_empty() {
            return out;
        }
        let lo = edges[0].0;
        let width = edges[0].1 - edges[0].0;
        let bin = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
        let mut learned = vec![0usize; bins];
        let mut statics = vec![0usize; bins];
        for (a, b) in &self.users {
            learned[bin(a.gap)] += 1;
            statics[bin(b.gap)] += 1;
        }
        for (i, (s, e, _)) in edges.iter().enumerate() {
            let _ = writeln!(out, "{s:.6},{e:.6},{},{}", learned[i], statics[i]);
        }
        out
    }
}

/// Per-user propensity gap of the learned model against the static
/// popularity propensity, on the same sampled users and candidates.
pub fn analyze_propensity(
    cfg: &RunConfig,
    model: &TipsModel,
    mode: Mode,
    data: &TrainingData,
    cases: &[EvalCase],
    n_users: usize,
) -> Result<PropensityAnalysis> {
    if !mode.uses_exposure_model() {
        return Err(TipsError::Precondition(format!("mode {mode} has no learned propensity")));
    }
    let learned_src = PropensitySource::Learned {
        layout: &model.layout,
        params: &model.params,
        mode,
    };
    let statics = StaticPropensity::from_index(&data.popularity, cfg.objective.static_alpha)?;
    let static_src = PropensitySource::Static(&statics);
    let learned = propensity_gaps(&learned_src, cases, data.n_items, &cfg.eval, n_users)?;
    let fixed = propensity_gaps(&static_src, cases, data.n_items, &cfg.eval, n_users)?;
    let learned_wins = learned.iter().zip(&fixed).filter(|(a, b)| a.gap > b.gap).count();
    Ok(PropensityAnalysis {
        learned: summarize_gaps(&learned),
        static_ips: summarize_gaps(&fixed),
        learned_wins,
        users: learned.into_iter().zip(fixed).collect(),
        seed: cfg.eval.seed,
        config_hash: cfg.config_hash(),
    })
}

/// Rank agreement of estimated propensities with the true inclusion
/// probabilities, pooled over every probed `(state, item)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub learned_spearman: f64,
    pub static_spearman: f64,
    pub pairs: usize,
}

pub fn propensity_calibration(
    cfg: &RunConfig,
    model: &TipsModel,
    mode: Mode,
    data: &TrainingData,
    probes: &[PropensityProbe],
) -> Result<Calibration> {
    if !mode.uses_exposure_model() {
        return Err(TipsError::Precondition(format!("mode {mode} has no learned propensity")));
    }
    let statics = StaticPropensity::from_index(&data.popularity, cfg.objective.static_alpha)?;
    let (mut truth, mut learned, mut fixed) = (Vec::new(), Vec::new(), Vec::new());
    for p in probes {
        let queries: Vec<(usize, f64)> = p.items.iter().map(|&(v, _)| (v, p.query_gap)).collect();
        let s = model.layout.propensities(&model.params, mode, &p.history, &p.gaps, &queries)?;
        for (&(v, t), s) in p.items.iter().zip(s) {
            truth.push(t);
            learned.push(s.s);
            fixed.push(statics.propensity(v));
        }
    }
    Ok(Calibration {
        learned_spearman: spearman(&learned, &truth)?,
        static_spearman: spearman(&fixed, &truth)?,
        pairs: truth.len(),
    })
}
