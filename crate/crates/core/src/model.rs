//! The composed model: encoders, cross-attention propensity, backbone, and
//! the per-instance computation graph used by training and evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{exposure_queries, fuse_graph, DualItemEmbeddings, TimeEmbedder};
use crate::error::{Result, TipsError};
use crate::exposure::{exposure_log_likelihood, CrossAttentionParams, PropensityScore};
use crate::numerics::{AttentionConfig, GradStore, Graph, ParamRegistry, Tensor2, Var};
use crate::objective::{bpr_coefficients, instance_weight, Mode, ObjectiveConfig};
use crate::recommender::{AttentionBackbone, Backbone, BackboneKind, GenerativeBackbone, MeanBackbone};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub max_len: usize,
    pub backbone: BackboneKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            heads: 2,
            max_len: 50,
            backbone: BackboneKind::Attention,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        AttentionConfig::new(self.heads, self.dim)?;
        if self.max_len < 2 {
            return Err(TipsError::Config("max_len must be at least 2".into()));
        }
        if self.backbone == BackboneKind::Generative {
            GenerativeBackbone::new()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackboneImpl {
    Attention(AttentionBackbone),
    Mean(MeanBackbone),
}

impl Backbone for BackboneImpl {
    fn name(&self) -> &'static str {
        match self {
            BackboneImpl::Attention(b) => b.name(),
            BackboneImpl::Mean(b) => b.name(),
        }
    }

    fn encode_user_graph(&self, g: &mut Graph, s_hat: Var) -> Result<Var> {
        match self {
            BackboneImpl::Attention(b) => b.encode_user_graph(g, s_hat),
            BackboneImpl::Mean(b) => b.encode_user_graph(g, s_hat),
        }
    }
}

/// Parameter handles of every component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelLayout {
    pub emb: DualItemEmbeddings,
    pub time: TimeEmbedder,
    pub cross: CrossAttentionParams,
    pub backbone: BackboneImpl,
    pub max_len: usize,
}

/// Layout plus parameter values.
#[derive(Clone, Debug)]
pub struct TipsModel {
    pub layout: ModelLayout,
    pub params: ParamRegistry,
}

impl TipsModel {
    pub fn new(cfg: &ModelConfig, n_items: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if n_items < 2 {
            return Err(TipsError::Precondition("model needs at least two items".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reg = ParamRegistry::new();
        let att = AttentionConfig::new(cfg.heads, cfg.dim)?;
        let emb = DualItemEmbeddings::register(&mut reg, n_items, cfg.dim, &mut rng)?;
        let time = TimeEmbedder::register(&mut reg, cfg.dim, &mut rng)?;
        let cross = CrossAttentionParams::register(&mut reg, "exposure", att, &mut rng)?;
        let backbone = match cfg.backbone {
            BackboneKind::Attention => {
                BackboneImpl::Attention(AttentionBackbone::register(&mut reg, att, &mut rng)?)
            }
            BackboneKind::Mean => BackboneImpl::Mean(MeanBackbone),
            BackboneKind::Generative => {
                GenerativeBackbone::new()?;
                unreachable!()
            }
        };
        Ok(TipsModel {
            layout: ModelLayout {
                emb,
                time,
                cross,
                backbone,
                max_len: cfg.max_len,
            },
            params: reg,
        })
    }
}

/// Exposure samples of one training instance. Rows are the factual pair,
/// its three counterfactuals, then sampled unexposed pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposurePlan {
    pub items: Vec<usize>,
    pub gaps: Vec<f64>,
    pub n_positive: usize,
    /// Row receiving the time perturbation, and the perturbation.
    pub jitter_row: usize,
    pub delta: Vec<f64>,
}

/// Everything sampled for one `(history → target)` training instance, so
/// the objective is a deterministic function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePlan {
    pub history: Vec<usize>,
    pub history_gaps: Vec<f64>,
    pub target: usize,
    pub target_gap: f64,
    /// BPR negatives.
    pub negatives: Vec<usize>,
    pub exposure: Option<ExposurePlan>,
    /// Static propensity of the target (static mode only).
    pub static_pi: f64,
}

pub struct InstanceVars {
    /// `Σ_j ln σ(y_i - y_j)`.
    pub bpr: Var,
    /// `Σ⁺ log s + Σ⁻ log(1-s)` over this instance's exposure samples.
    pub ep: Option<Var>,
    pub n_exposure: usize,
    /// Propensity of the factual pair.
    pub factual: Option<PropensityScore>,
}

/// Which terms a batch optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Terms {
    pub bpr: bool,
    pub ep: bool,
}

impl Terms {
    pub const ALL: Terms = Terms { bpr: true, ep: true };
    pub const EXPOSURE_ONLY: Terms = Terms { bpr: false, ep: true };
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub bpr: f64,
    /// Mean exposure loss over the batch's exposure samples (0 when absent).
    pub ep: f64,
    pub factual: Vec<Option<PropensityScore>>,
}

impl ModelLayout {
    fn time_for(&self, mode: Mode) -> Option<&TimeEmbedder> {
        mode.uses_time().then_some(&self.time)
    }

    /// History encoding `S` and the sequence the backbone reads (`Ŝ` when
    /// the exposure model is active, else `S`), plus cross-attention state.
    fn sequence<'p>(
        &self,
        g: &mut Graph<'p>,
        mode: Mode,
        history: &[usize],
        gaps: &[f64],
        exposure: Option<&ExposurePlan>,
    ) -> Result<(Var, Option<Var>)> {
        if history.is_empty() {
            return Err(TipsError::Precondition("empty history".into()));
        }
        if history.len() > self.max_len {
            return Err(TipsError::Precondition(format!(
                "history length {} exceeds max length {}",
                history.len(),
                self.max_len
            )));
        }
        let time = self.time_for(mode);
        let s = fuse_graph(g, &self.emb, time, history, gaps)?;
        if !mode.uses_exposure_model() {
            return Ok((s, None));
        }
        let last = history.len() - 1;
        let mut items = vec![history[last]];
        let mut qgaps = vec![gaps[last]];
        let mut delta = None;
        if let Some(plan) = exposure {
            items.extend_from_slice(&plan.items);
            qgaps.extend_from_slice(&plan.gaps);
            let mut d = Tensor2::zeros(items.len(), self.emb.dim);
            d.row_mut(plan.jitter_row + 1).copy_from_slice(&plan.delta);
            delta = Some(d);
        }
        let queries = exposure_queries(g, &self.emb, time, &items, &qgaps, delta)?;
        let hist = self.cross.history(g, s)?;
        let att = self.cross.attend(g, &hist, queries)?;
        let s_hat = self.cross.exposure_aware(g, &hist, &att, 0)?;
        let raw = match exposure {
            Some(_) => Some(g.slice_rows(att.raw, 1, items.len() - 1)?),
            None => None,
        };
        Ok((s_hat, raw))
    }

    pub fn forward_instance(&self, g: &mut Graph, mode: Mode, plan: &InstancePlan) -> Result<InstanceVars> {
        let exposure = if mode.uses_exposure_model() {
            plan.exposure.as_ref()
        } else {
            None
        };
        let (seq, raw) = self.sequence(g, mode, &plan.history, &plan.history_gaps, exposure)?;
        let u = self.backbone.encode_user_graph(g, seq)?;
        let mut cands = Vec::with_capacity(1 + plan.negatives.len());
        cands.push(plan.target);
        cands.extend_from_slice(&plan.negatives);
        let c = self.emb.interaction_rows(g, &cands)?;
        let y = g.matmul_nt(u, c)?;
        // column j of D: e_0 - e_{j+1}, so y·D = [y_0 - y_j]
        let nneg = plan.negatives.len();
        let mut d = Tensor2::zeros(1 + nneg, nneg);
        for j in 0..nneg {
            d.set(0, j, 1.0);
            d.set(j + 1, j, -1.0);
        }
        let dv = g.input(d);
        let diffs = g.matmul(y, dv)?;
        let ls = g.log_sigmoid(diffs);
        let bpr = g.sum_all(ls);
        let (ep, n_exposure, factual) = match (raw, exposure) {
            (Some(raw), Some(plan)) => {
                let signs: Vec<f64> = (0..plan.items.len())
                    .map(|r| if r < plan.n_positive { 1.0 } else { -1.0 })
                    .collect();
                let factual = PropensityScore::from_raw(g.value(raw).get(0, 0));
                (
                    Some(exposure_log_likelihood(g, raw, &signs)?),
                    plan.items.len(),
                    Some(factual),
                )
            }
            _ => (None, 0, None),
        };
        Ok(InstanceVars {
            bpr,
            ep,
            n_exposure,
            factual,
        })
    }

    /// Forwards every instance, weights them, and (optionally) accumulates
    /// gradients. With `frozen`, those factual propensities are used for the
    /// weights instead of the ones just computed; either way they are
    /// constants for differentiation.
    pub fn batch_objective(
        &self,
        reg: &ParamRegistry,
        cfg: &ObjectiveConfig,
        plans: &[InstancePlan],
        terms: Terms,
        frozen: Option<&[f64]>,
        grads: Option<&mut GradStore>,
    ) -> Result<BatchLoss> {
        if plans.is_empty() {
            return Err(TipsError::Precondition("empty batch".into()));
        }
        let mode = cfg.mode;
        let mut graphs = Vec::with_capacity(plans.len());
        for plan in plans {
            let mut g = Graph::new(reg);
            let vars = self.forward_instance(&mut g, mode, plan)?;
            graphs.push((g, vars));
        }
        let weights: Vec<_> = plans
            .iter()
            .zip(&graphs)
            .enumerate()
            .map(|(i, (plan, (_, vars)))| {
                let s = match frozen {
                    Some(f) => Some(f[i]),
                    None => vars.factual.map(|p| p.s),
                };
                instance_weight(cfg, plan.target_gap, s, plan.static_pi)
            })
            .collect();
        let coef = bpr_coefficients(mode, &weights)?;
        let n_exposure: usize = graphs.iter().map(|(_, v)| v.n_exposure).sum();
        let ep_active = terms.ep && mode.uses_exposure_model() && n_exposure > 0;
        let ep_coef = if ep_active {
            -cfg.gamma / n_exposure as f64
        } else {
            0.0
        };
        let mut bpr = 0.0;
        let mut ep_sum = 0.0;
        for (i, (g, vars)) in graphs.iter().enumerate() {
            bpr += coef[i] * g.scalar(vars.bpr);
            if let Some(ep) = vars.ep {
                ep_sum += g.scalar(ep);
            }
        }
        let ep = if n_exposure > 0 {
            -ep_sum / n_exposure as f64
        } else {
            0.0
        };
        let bpr_term = if terms.bpr { bpr } else { 0.0 };
        let total = bpr_term + if ep_active { cfg.gamma * ep } else { 0.0 };
        if let Some(grads) = grads {
            for (i, (g, vars)) in graphs.iter().enumerate() {
                let mut seeds = Vec::with_capacity(2);
                if terms.bpr {
                    seeds.push((vars.bpr, Tensor2::filled(1, 1, coef[i])));
                }
                if let (true, Some(ep)) = (ep_active, vars.ep) {
                    seeds.push((ep, Tensor2::filled(1, 1, ep_coef)));
                }
                if !seeds.is_empty() {
                    g.backward(&seeds, grads)?;
                }
            }
        }
        Ok(BatchLoss {
            total,
            bpr,
            ep,
            factual: graphs.iter().map(|(_, v)| v.factual).collect(),
        })
    }

    /// User vector for a history (forward only).
    pub fn user_vector(&self, reg: &ParamRegistry, mode: Mode, history: &[usize], gaps: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new(reg);
        let (seq, _) = self.sequence(&mut g, mode, history, gaps, None)?;
        let u = self.backbone.encode_user_graph(&mut g, seq)?;
        Ok(g.value(u).data().to_vec())
    }

    /// Learned propensities of `(item, gap)` queries against a history.
    pub fn propensities(
        &self,
        reg: &ParamRegistry,
        mode: Mode,
        history: &[usize],
        gaps: &[f64],
        queries: &[(usize, f64)],
    ) -> Result<Vec<PropensityScore>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(reg);
        let time = self.time_for(mode);
        let s = fuse_graph(&mut g, &self.emb, time, history, gaps)?;
        let items: Vec<usize> = queries.iter().map(|q| q.0).collect();
        let qgaps: Vec<f64> = queries.iter().map(|q| q.1).collect();
        let q = exposure_queries(&mut g, &self.emb, time, &items, &qgaps, None)?;
        let hist = self.cross.history(&mut g, s)?;
        let att = self.cross.attend(&mut g, &hist, q)?;
        Ok(g.value(att.raw)
            .data()
            .iter()
            .map(|&r| PropensityScore::from_raw(r))
            .collect())
    }
}
