//! Sequential backbones producing a user vector, inner-product scoring, and
//! deterministic ranking.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TipsError};
use crate::numerics::{
    ops, tensor::dot, uniform_init, AttentionConfig, Graph, ParamId, ParamRegistry, Tensor2, Var,
};

/// Maps an exposure-aware sequence (`L×d`, valid rows only) to a `1×d` user
/// vector. Candidates are then scored independently against it.
pub trait Backbone {
    fn name(&self) -> &'static str;
    fn encode_user_graph(&self, g: &mut Graph, s_hat: Var) -> Result<Var>;

    fn encode_user(&self, reg: &ParamRegistry, s_hat: &Tensor2) -> Result<UserVector> {
        let mut g = Graph::new(reg);
        let x = g.input(s_hat.clone());
        let u = self.encode_user_graph(&mut g, x)?;
        Ok(UserVector {
            u: g.value(u).data().to_vec(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Attention,
    Mean,
    Generative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserVector {
    pub u: Vec<f64>,
}

/// One multi-head self-attention layer; the user vector is the output at
/// the last valid position, heads concatenated head-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionBackbone {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub cfg: AttentionConfig,
}

impl AttentionBackbone {
    pub fn register<R: Rng>(
        reg: &mut ParamRegistry,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut w = |name: &str, reg: &mut ParamRegistry| {
            reg.register(&format!("backbone.{name}"), uniform_init(d, d, bound, rng))
        };
        let wq = w("wq", reg)?;
        let wk = w("wk", reg)?;
        let wv = w("wv", reg)?;
        Ok(AttentionBackbone {
            wq,
            bq: reg.register("backbone.bq", Tensor2::zeros(1, d))?,
            wk,
            bk: reg.register("backbone.bk", Tensor2::zeros(1, d))?,
            wv,
            bv: reg.register("backbone.bv", Tensor2::zeros(1, d))?,
            cfg,
        })
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv]
    }
}

impl Backbone for AttentionBackbone {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn encode_user_graph(&self, g: &mut Graph, s_hat: Var) -> Result<Var> {
        let len = g.value(s_hat).rows();
        if len == 0 {
            return Err(TipsError::Precondition("empty sequence".into()));
        }
        let last = g.slice_rows(s_hat, len - 1, 1)?;
        let (wq, bq) = (g.param(self.wq), g.param(self.bq));
        let (wk, bk) = (g.param(self.wk), g.param(self.bk));
        let (wv, bv) = (g.param(self.wv), g.param(self.bv));
        let q = g.affine(last, wq, bq)?;
        let k = g.affine(s_hat, wk, bk)?;
        let v = g.affine(s_hat, wv, bv)?;
        let (u, _) = ops::multi_head_attend(g, &self.cfg, q, k, v)?;
        Ok(u)
    }
}

/// Parameter-free backbone: the user vector is the mean of the rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MeanBackbone;

impl Backbone for MeanBackbone {
    fn name(&self) -> &'static str {
        "mean"
    }

    fn encode_user_graph(&self, g: &mut Graph, s_hat: Var) -> Result<Var> {
        let len = g.value(s_hat).rows();
        if len == 0 {
            return Err(TipsError::Precondition("empty sequence".into()));
        }
        let ones = g.input(Tensor2::filled(1, len, 1.0 / len as f64));
        g.matmul(ones, s_hat)
    }
}

/// Placeholder for generative backbones; construction always fails.
#[derive(Debug)]
pub struct GenerativeBackbone {
    _private: (),
}

impl GenerativeBackbone {
    pub fn new() -> Result<Self> {
        Err(TipsError::NotImplemented(
            "generative (diffusion) backbones are not available; use `attention` or `mean`".into(),
        ))
    }
}

/// `y = ⟨u, c⟩`.
pub fn score(u: &UserVector, c: &[f64]) -> Result<f64> {
    if u.u.len() != c.len() {
        return Err(TipsError::Dimension {
            op: "score",
            left: (1, u.u.len()),
            right: (1, c.len()),
        });
    }
    Ok(dot(&u.u, c))
}

/// Scores of `candidates` against the interaction table.
pub fn score_items(
    reg: &ParamRegistry,
    h_c: ParamId,
    u: &UserVector,
    candidates: &[usize],
) -> Result<Vec<f64>> {
    let table = reg.value(h_c);
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
            score(u, table.row(v))
        })
        .collect()
}

/// Descending score, ties by ascending item index.
pub fn compare_scored(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Orders `(item, score)` pairs by [`compare_scored`].
pub fn rank_scored(mut scored: Vec<(usize, f64)>) -> Vec<usize> {
    scored.sort_by(|&a, &b| compare_scored(a, b));
    scored.into_iter().map(|(v, _)| v).collect()
}

pub fn rank(
    reg: &ParamRegistry,
    h_c: ParamId,
    u: &UserVector,
    candidates: &[usize],
) -> Result<Vec<usize>> {
    let scores = score_items(reg, h_c, u, candidates)?;
    Ok(rank_scored(candidates.iter().copied().zip(scores).collect()))
}

/// 1-based rank of `target` among `(item, score)` pairs under the same
/// ordering as [`rank_scored`], without sorting.
pub fn rank_of(target: (usize, f64), others: &[(usize, f64)]) -> usize {
    1 + others
        .iter()
        .filter(|&&o| compare_scored(o, target) == Ordering::Less)
        .count()
}
