//! Forward-only kernels plus graph-level attention building blocks.

use serde::{Deserialize, Serialize};

use super::graph::{softmax_rows, Graph, Var};
use super::tensor::{dot, Tensor2};
use crate::error::{Result, TipsError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub model_dim: usize,
}

impl AttentionConfig {
    pub fn new(heads: usize, model_dim: usize) -> Result<Self> {
        if heads == 0 || model_dim == 0 || model_dim % heads != 0 {
            return Err(TipsError::Config(format!(
                "model_dim {model_dim} must be a positive multiple of heads {heads}"
            )));
        }
        Ok(AttentionConfig { heads, model_dim })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Score scale `1/√d` with `d` the full model width.
    pub fn score_scale(&self) -> f64 {
        1.0 / (self.model_dim as f64).sqrt()
    }
}

/// `x·W + b` with `b` broadcast over rows.
pub fn affine(x: &Tensor2, w: &Tensor2, b: &[f64]) -> Result<Tensor2> {
    if b.len() != w.cols() {
        return Err(TipsError::Dimension {
            op: "affine bias",
            left: w.shape(),
            right: (1, b.len()),
        });
    }
    let mut out = x.matmul(w)?;
    for r in 0..out.rows() {
        for (o, v) in out.row_mut(r).iter_mut().zip(b) {
            *o += v;
        }
    }
    Ok(out)
}

/// `softmax(q·kᵀ/√c)·v` with `c` the column count of `q`.
pub fn scaled_dot_attention(q: &Tensor2, k: &Tensor2, v: &Tensor2) -> Result<Tensor2> {
    scaled_dot_attention_with_scale(q, k, v, 1.0 / (q.cols().max(1) as f64).sqrt())
}

pub fn scaled_dot_attention_with_scale(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    scale: f64,
) -> Result<Tensor2> {
    if k.rows() == 0 {
        return Err(TipsError::Precondition("attention over an empty key set".into()));
    }
    if k.rows() != v.rows() {
        return Err(TipsError::Dimension {
            op: "attention keys/values",
            left: k.shape(),
            right: v.shape(),
        });
    }
    let mut scores = q.matmul_nt(k)?;
    scores.scale_assign(scale);
    softmax_rows(&scores).matmul(v)
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TipsError::Dimension {
            op: "cosine_sim",
            left: (1, a.len()),
            right: (1, b.len()),
        });
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(TipsError::DegenerateVector("zero-norm input to cosine similarity".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean over the valid rows of a sequence, giving one row.
pub fn mean_pool(x: &Tensor2) -> Result<Vec<f64>> {
    if x.rows() == 0 {
        return Err(TipsError::Precondition("mean pooling over zero rows".into()));
    }
    let mut out = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (o, v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    let n = x.rows() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Single-head attention on the graph.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, scale: f64) -> Result<(Var, Var)> {
    if g.value(k).rows() == 0 {
        return Err(TipsError::Precondition("attention over an empty key set".into()));
    }
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, scale);
    let weights = g.softmax_rows(scores)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention over head-blocked projections. `q`, `k`, `v` hold
/// all heads side by side (head `n` in columns `n·h..(n+1)·h`). Outputs are
/// concatenated head-major. Returns the output and per-head weights.
pub fn multi_head_attend(
    g: &mut Graph,
    cfg: &AttentionConfig,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Vec<Var>)> {
    let h = cfg.head_dim();
    let scale = cfg.score_scale();
    let mut outs = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for n in 0..cfg.heads {
        let qn = g.slice_cols(q, n * h, h)?;
        let kn = g.slice_cols(k, n * h, h)?;
        let vn = g.slice_cols(v, n * h, h)?;
        let (o, w) = attend(g, qn, kn, vn, scale)?;
        outs.push(o);
        weights.push(w);
    }
    let out = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    Ok((out, weights))
}
