//! Optimiser loop: batch planning (counterfactual samples, negatives),
//! joint minimisation of the weighted BPR and exposure losses, per-epoch
//! validation and best-checkpoint selection.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::counterfactual::{
    build_sample_sets, CounterfactualContext, ExposureSampleSets, FactualPair, PopularSampler, SimilarityTable,
    DEFAULT_DELTA_BOUND,
};
use crate::dataset::TrainingData;
use crate::error::{Result, TipsError};
use crate::eval::{evaluate, EvalProtocol, ModelScorer};
use crate::model::{BatchLoss, ExposurePlan, InstancePlan, ModelLayout, Terms, TipsModel};
use crate::numerics::{GradStore, ParamRegistry, Tensor2};
use crate::objective::{Mode, ObjectiveConfig, StaticPropensity};

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Leading epochs that optimise only the exposure loss.
    pub ep_warmup_epochs: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    /// Keep the parameters of the best validation epoch.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 5e-5,
            batch_size: 16,
            epochs: 30,
            ep_warmup_epochs: 0,
            weight_decay: 0.0,
            max_grad_norm: 0.0,
            keep_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TipsError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TipsError::Config("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.max_grad_norm >= 0.0) {
            return Err(TipsError::Config("weight_decay and max_grad_norm must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterfactualConfig {
    /// Size of the popular-item support.
    pub top_k: usize,
    /// Popularity window in days.
    pub tau_days: f64,
    /// Bound of the uniform time perturbation.
    pub delta_bound: f64,
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        CounterfactualConfig {
            top_k: 10,
            tau_days: 30.0,
            delta_bound: DEFAULT_DELTA_BOUND,
        }
    }
}

impl CounterfactualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(TipsError::Config("top_k must be at least 1".into()));
        }
        if !(self.tau_days > 0.0 && self.tau_days.is_finite()) {
            return Err(TipsError::Config("tau_days must be positive".into()));
        }
        if !(self.delta_bound >= 0.0 && self.delta_bound.is_finite()) {
            return Err(TipsError::Config("delta_bound must be >= 0".into()));
        }
        Ok(())
    }

    pub fn tau_seconds(&self) -> i64 {
        ((self.tau_days * SECONDS_PER_DAY as f64).round() as i64).max(1)
    }
}

/// Plain SGD or Adam over every trainable parameter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, reg: &ParamRegistry) -> Self {
        let zeros: Vec<Tensor2> = reg
            .ids()
            .map(|id| {
                let (r, c) = reg.value(id).shape();
                Tensor2::zeros(r, c)
            })
            .collect();
        Optimizer {
            kind,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, reg: &mut ParamRegistry, grads: &GradStore) {
        self.t += 1;
        let ids: Vec<_> = reg.ids().collect();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in ids {
            if !reg.is_trainable(id) {
                continue;
            }
            let g = grads.get(id).data();
            let wd = self.weight_decay;
            let p = reg.value_mut(id).data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, &gi) in p.iter_mut().zip(g) {
                        *x -= self.lr * (gi + wd * *x);
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m[id.index()].data_mut();
                    let v = self.v[id.index()].data_mut();
                    for k in 0..p.len() {
                        let gi = g[k] + wd * p[k];
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gi;
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gi * gi;
                        p[k] -= self.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub bpr: f64,
    pub ep: f64,
    pub val_hr10: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_hr10: f64,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,loss,bpr,ep,val_hr10,grad_norm\n");
        for r in &self.history {
            let _ = writeln!(
                out,
                "{},{:.8},{:.8},{:.8},{:.6},{:.8}",
                r.epoch, r.loss, r.bpr, r.ep, r.val_hr10, r.grad_norm
            );
        }
        out
    }

    pub fn write_history(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.history_csv()).map_err(|e| TipsError::io(path, e))
    }
}

/// A `(user, position)` training instance: the item at `position` is
/// predicted from the items before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Instance {
    pub user: usize,
    pub position: usize,
}

pub fn training_instances(data: &TrainingData) -> Vec<Instance> {
    data.users
        .iter()
        .enumerate()
        .flat_map(|(u, p)| (1..p.items.len()).map(move |position| Instance { user: u, position }))
        .collect()
}

/// BPR negatives from the counterfactual triple: similar item, popular
/// item, and the factual item at the perturbed time.
pub const COUNTERFACTUAL_NEGATIVES: usize = 3;

/// Samples everything one batch needs.
pub struct BatchPlanner<'a> {
    pub data: &'a TrainingData,
    pub objective: &'a ObjectiveConfig,
    pub counterfactual: &'a CounterfactualConfig,
    pub statics: &'a StaticPropensity,
    pub dim: usize,
}

impl BatchPlanner<'_> {
    pub fn plan<R: Rng>(
        &self,
        batch: &[Instance],
        similar: &SimilarityTable,
        popular: &mut PopularSampler<'_>,
        rng: &mut R,
    ) -> Result<Vec<InstancePlan>> {
        let mode = self.objective.mode;
        let data = self.data;
        let factual: Vec<FactualPair> = batch
            .iter()
            .map(|inst| {
                let u = &data.users[inst.user];
                FactualPair {
                    item: u.items[inst.position],
                    timestamp: u.timestamps[inst.position],
                    prev_timestamp: u.timestamps[inst.position - 1],
                }
            })
            .collect();
        let sets: Option<ExposureSampleSets> = if mode.uses_counterfactuals() {
            let ratio = if mode.uses_exposure_model() {
                self.objective.negative_ratio
            } else {
                0
            };
            let ctx = CounterfactualContext {
                similar,
                n_items: data.n_items,
                span: data.span,
                dim: self.dim,
                delta_bound: self.counterfactual.delta_bound,
            };
            Some(build_sample_sets(&factual, &ctx, popular, ratio, rng)?)
        } else {
            None
        };
        let mut plans = Vec::with_capacity(batch.len());
        for (i, inst) in batch.iter().enumerate() {
            let u = &data.users[inst.user];
            let start = inst.position.saturating_sub(data.max_len);
            let target = u.items[inst.position];
            let mut negatives = match &sets {
                Some(s) => {
                    let t = &s.triples[i];
                    vec![t.sim, t.pop, target]
                }
                None => Vec::new(),
            };
            let n_uniform = match &sets {
                Some(_) => self.objective.uniform_negatives,
                None => self.objective.uniform_negatives.max(COUNTERFACTUAL_NEGATIVES),
            };
            negatives.extend((0..n_uniform).map(|_| {
                let j = rng.gen_range(0..data.n_items - 1);
                if j >= target {
                    j + 1
                } else {
                    j
                }
            }));
            let exposure = match &sets {
                Some(s) if mode.uses_exposure_model() => {
                    let prev = factual[i].prev_timestamp;
                    let mut items = Vec::new();
                    let mut gaps = Vec::new();
                    for p in s.positives_of(i) {
                        items.push(p.item);
                        gaps.push(u.gaps[inst.position]);
                    }
                    for p in s.negatives_of(i) {
                        items.push(p.item);
                        gaps.push(data.gap_norm.normalize((p.timestamp - prev).abs())?);
                    }
                    Some(ExposurePlan {
                        items,
                        gaps,
                        n_positive: 4,
                        jitter_row: 3,
                        delta: s.triples[i].delta.clone(),
                    })
                }
                _ => None,
            };
            plans.push(InstancePlan {
                history: u.items[start..inst.position].to_vec(),
                history_gaps: u.gaps[start..inst.position].to_vec(),
                target,
                target_gap: u.gaps[inst.position],
                negatives,
                exposure,
                static_pi: self.statics.propensity(target),
            });
        }
        Ok(plans)
    }
}

fn param_diagnostics(reg: &ParamRegistry) -> String {
    let mut out = String::from("param norms:");
    for id in reg.ids() {
        let _ = write!(out, " {}={:.3e}", reg.name(id), reg.value(id).norm_sq().sqrt());
    }
    out
}

/// Non-finite values surfacing inside a forward pass mean the run diverged.
fn diverged_on_numeric(epoch: usize, reg: &ParamRegistry) -> impl FnOnce(TipsError) -> TipsError + '_ {
    move |e| match e {
        TipsError::Numeric(msg) => TipsError::Diverged {
            epoch,
            diagnostics: format!("{msg}; {}", param_diagnostics(reg)),
        },
        e => e,
    }
}

fn diagnostics(reg: &ParamRegistry, grads: &GradStore, loss: &BatchLoss) -> String {
    let mut out = String::new();
    let _ = write!(out, "loss={} bpr={} ep={}; grad norms:", loss.total, loss.bpr, loss.ep);
    for id in reg.ids() {
        let _ = write!(out, " {}={:.3e}", reg.name(id), grads.get(id).norm_sq().sqrt());
    }
    let s: Vec<f64> = loss.factual.iter().flatten().map(|p| p.s).collect();
    if !s.is_empty() {
        let min = s.iter().copied().fold(f64::INFINITY, f64::min);
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let _ = write!(out, "; s min={min:.4} mean={mean:.4} max={max:.4}");
    }
    out
}

/// Validation HR@10 of the current parameters.
pub fn validation_hr10(
    layout: &ModelLayout,
    params: &ParamRegistry,
    mode: Mode,
    data: &TrainingData,
    protocol: &EvalProtocol,
) -> Result<f64> {
    let protocol = EvalProtocol {
        cutoffs: vec![10],
        ..protocol.clone()
    };
    let scorer = ModelScorer { layout, params, mode };
    Ok(evaluate(&scorer, &data.validation_cases(), data.n_items, &protocol, "")?.hr(10))
}

/// Trains `model` in place. With `keep_best`, the parameters of the best
/// validation epoch are restored at the end.
pub fn train(
    model: &mut TipsModel,
    data: &TrainingData,
    objective: &ObjectiveConfig,
    counterfactual: &CounterfactualConfig,
    cfg: &TrainConfig,
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<TrainOutcome> {
    objective.validate()?;
    counterfactual.validate()?;
    cfg.validate()?;
    let mode = objective.mode;
    let instances = training_instances(data);
    if instances.is_empty() {
        return Err(TipsError::Precondition("no training instance (all train sequences shorter than 2)".into()));
    }
    if data.n_items < 2 {
        return Err(TipsError::Precondition("need at least two items".into()));
    }
    let layout = model.layout;
    let statics = StaticPropensity::from_index(&data.popularity, objective.static_alpha)?;
    let planner = BatchPlanner {
        data,
        objective,
        counterfactual,
        statics: &statics,
        dim: layout.emb.dim,
    };
    let window = mode.popularity_window(counterfactual.tau_seconds());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay, &model.params);
    let mut grads = model.params.grad_store();
    let mut order = instances;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamRegistry)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let terms = if epoch <= cfg.ep_warmup_epochs && mode.uses_exposure_model() {
            Terms::EXPOSURE_ONLY
        } else {
            Terms::ALL
        };
        let similar = if mode.uses_counterfactuals() {
            SimilarityTable::build(model.params.value(layout.emb.h_e), &mut rng)
                .map_err(diverged_on_numeric(epoch, &model.params))?
        } else {
            SimilarityTable::default()
        };
        let mut popular = PopularSampler::new(&data.popularity, counterfactual.top_k, window)?;
        let (mut loss_sum, mut bpr_sum, mut ep_sum, mut norm_sum) = (0.0, 0.0, 0.0, 0.0);
        let mut n_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let plans = planner.plan(batch, &similar, &mut popular, &mut rng)?;
            grads.zero();
            let loss = layout
                .batch_objective(&model.params, objective, &plans, terms, None, Some(&mut grads))
                .map_err(diverged_on_numeric(epoch, &model.params))?;
            if !loss.total.is_finite() || !grads.all_finite() {
                return Err(TipsError::Diverged {
                    epoch,
                    diagnostics: diagnostics(&model.params, &grads, &loss),
                });
            }
            let norm = grads.global_norm();
            if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
                grads.scale(cfg.max_grad_norm / norm);
            }
            opt.step(&mut model.params, &grads);
            if !model.params.all_finite() {
                return Err(TipsError::Diverged {
                    epoch,
                    diagnostics: diagnostics(&model.params, &grads, &loss),
                });
            }
            loss_sum += loss.total;
            bpr_sum += loss.bpr;
            ep_sum += loss.ep;
            norm_sum += norm;
            n_batches += 1;
        }
        let nb = n_batches as f64;
        let val_hr10 = validation_hr10(&layout, &model.params, mode, data, protocol)
            .map_err(diverged_on_numeric(epoch, &model.params))?;
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / nb,
            bpr: bpr_sum / nb,
            ep: ep_sum / nb,
            val_hr10,
            grad_norm: norm_sum / nb,
        };
        info!(
            "[{mode}] epoch {epoch}: loss {:.5} bpr {:.5} ep {:.5} val HR@10 {:.4}",
            rec.loss, rec.bpr, rec.ep, rec.val_hr10
        );
        debug!("popular-window fallbacks so far: {}", popular.fallbacks());
        if best.as_ref().map_or(true, |b| val_hr10 > b.1) {
            best = Some((epoch, val_hr10, model.params.clone()));
        }
        history.push(rec);
    }
    let (best_epoch, best_val_hr10) = match best {
        Some((e, hr, params)) => {
            if cfg.keep_best {
                model.params = params;
            }
            (e, hr)
        }
        None => (0, f64::NAN),
    };
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_hr10,
    })
}
