//! Cross-attention exposure propensity and its binary exposure loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{ExposureQuery, FusedSequence};
use crate::error::{Result, TipsError};
use crate::numerics::{
    log_sigmoid, sigmoid, uniform_init, AttentionConfig, Graph, ParamId, ParamRegistry, Tensor2,
    Var,
};

/// Per-head projections stored side by side: head `n` owns columns
/// `n·d/N .. (n+1)·d/N` of each `d×d` weight and `1×d` bias.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossAttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub cfg: AttentionConfig,
}

impl CrossAttentionParams {
    /// Value weights are drawn with zero row sums inside every head block and
    /// a zero bias, so the pooled score starts at exactly 0 (every
    /// propensity 0.5) whatever the attention weights are.
    pub fn register<R: Rng>(
        reg: &mut ParamRegistry,
        prefix: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut wv = uniform_init(d, d, bound, rng);
        let h = cfg.head_dim();
        for r in 0..d {
            for block in wv.row_mut(r).chunks_mut(h) {
                let mean = block.iter().sum::<f64>() / h as f64;
                block.iter_mut().for_each(|x| *x -= mean);
            }
        }
        Ok(CrossAttentionParams {
            wq: reg.register(&format!("{prefix}.wq"), uniform_init(d, d, bound, rng))?,
            bq: reg.register(&format!("{prefix}.bq"), Tensor2::zeros(1, d))?,
            wk: reg.register(&format!("{prefix}.wk"), uniform_init(d, d, bound, rng))?,
            bk: reg.register(&format!("{prefix}.bk"), Tensor2::zeros(1, d))?,
            wv: reg.register(&format!("{prefix}.wv"), wv)?,
            bv: reg.register(&format!("{prefix}.bv"), Tensor2::zeros(1, d))?,
            cfg,
        })
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv]
    }

    /// Projects the history rows once; every query against this history
    /// reuses the keys and values.
    pub fn history(&self, g: &mut Graph, s: Var) -> Result<HistoryKeys> {
        let len = g.value(s).rows();
        if len == 0 {
            return Err(TipsError::Precondition("propensity over an empty sequence".into()));
        }
        let (wk, bk, wv, bv) = (g.param(self.wk), g.param(self.bk), g.param(self.wv), g.param(self.bv));
        let k = g.affine(s, wk, bk)?;
        let v = g.affine(s, wv, bv)?;
        Ok(HistoryKeys { k, v, len })
    }

    /// Attends a batch of exposure queries (`nq×d`) over a history.
    pub fn attend(&self, g: &mut Graph, hist: &HistoryKeys, queries: Var) -> Result<CrossAttention> {
        let (wq, bq) = (g.param(self.wq), g.param(self.bq));
        let q = g.affine(queries, wq, bq)?;
        let h = self.cfg.head_dim();
        let scale = self.cfg.score_scale();
        let mut outs = Vec::with_capacity(self.cfg.heads);
        let mut weights = Vec::with_capacity(self.cfg.heads);
        for n in 0..self.cfg.heads {
            let qn = g.slice_cols(q, n * h, h)?;
            let kn = g.slice_cols(hist.k, n * h, h)?;
            let vn = g.slice_cols(hist.v, n * h, h)?;
            let (o, w) = crate::numerics::ops::attend(g, qn, kn, vn, scale)?;
            outs.push(o);
            weights.push(w);
        }
        let out = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        // pooled raw score = mean over all entries of Ŝ = row mean of `out`
        let raw = g.mean_cols(out);
        Ok(CrossAttention { out, weights, raw })
    }

    /// `Ŝ` (`L×d`) for query row `row`: position `m`, head `n` holds
    /// `L · a⁽ⁿ⁾_m · v⁽ⁿ⁾_m`, the per-position terms of that head's
    /// attention output, scaled so that averaging `Ŝ` equals averaging the
    /// attention output.
    pub fn exposure_aware(
        &self,
        g: &mut Graph,
        hist: &HistoryKeys,
        att: &CrossAttention,
        row: usize,
    ) -> Result<Var> {
        let h = self.cfg.head_dim();
        let mut parts = Vec::with_capacity(self.cfg.heads);
        for (n, &w) in att.weights.iter().enumerate() {
            let a = g.slice_rows(w, row, 1)?;
            let a = g.transpose(a);
            let a = g.scale(a, hist.len as f64);
            let vn = g.slice_cols(hist.v, n * h, h)?;
            parts.push(g.mul_col(vn, a)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_cols(&parts)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HistoryKeys {
    pub k: Var,
    pub v: Var,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct CrossAttention {
    /// `nq×d`, heads concatenated head-major.
    pub out: Var,
    /// Per head `nq×L` attention weights.
    pub weights: Vec<Var>,
    /// `nq×1` pooled raw scores.
    pub raw: Var,
}

/// Time-aware exposure propensity `s = σ(raw)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropensityScore {
    pub s: f64,
    pub raw: f64,
}

impl PropensityScore {
    /// The logistic squash, kept strictly inside `(0, 1)`.
    pub fn from_raw(raw: f64) -> Self {
        let s = sigmoid(raw).clamp(f64::EPSILON, 1.0 - f64::EPSILON);
        PropensityScore { s, raw }
    }
}

/// `Ŝ` with the same valid length as its input sequence (unpadded rows).
#[derive(Clone, Debug, PartialEq)]
pub struct ExposureAwareSequence {
    pub s_hat: Tensor2,
    pub valid_len: usize,
}

/// Forward-only propensity of one exposure query against a fused sequence.
pub fn propensity(
    reg: &ParamRegistry,
    params: &CrossAttentionParams,
    seq: &FusedSequence,
    query: &ExposureQuery,
) -> Result<(PropensityScore, ExposureAwareSequence)> {
    if seq.valid_len == 0 {
        return Err(TipsError::Precondition("fully masked sequence".into()));
    }
    let mut g = Graph::new(reg);
    let s = g.input(seq.valid_rows()?);
    let q = g.input(Tensor2::row_vector(&query.e_hat));
    let hist = params.history(&mut g, s)?;
    let att = params.attend(&mut g, &hist, q)?;
    let s_hat = params.exposure_aware(&mut g, &hist, &att, 0)?;
    let raw = g.mean_all(s_hat);
    Ok((
        PropensityScore::from_raw(g.scalar(raw)),
        ExposureAwareSequence {
            s_hat: g.value(s_hat).clone(),
            valid_len: seq.valid_len,
        },
    ))
}

/// `-(1/|E|) [Σ⁺ log s + Σ⁻ log(1 - s)]`, evaluated from raw scores so
/// saturated propensities stay finite.
pub fn exposure_loss(positives: &[PropensityScore], negatives: &[PropensityScore]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(TipsError::Precondition(
            "exposure loss needs positive and negative samples".into(),
        ));
    }
    let pos: f64 = positives.iter().map(|p| log_sigmoid(p.raw)).sum();
    let neg: f64 = negatives.iter().map(|p| log_sigmoid(-p.raw)).sum();
    Ok(-(pos + neg) / (positives.len() + negatives.len()) as f64)
}

/// Graph form: sum over rows of `log σ(sign·raw)`, with `sign = +1` for
/// exposed and `-1` for unexposed samples (not yet divided by `|E|`).
pub fn exposure_log_likelihood(g: &mut Graph, raw: Var, signs: &[f64]) -> Result<Var> {
    let sv = g.input(Tensor2::column_vector(signs));
    let signed = g.mul_col(raw, sv)?;
    let ll = g.log_sigmoid(signed);
    Ok(g.sum_all(ll))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize, heads: usize) -> (ParamRegistry, CrossAttentionParams) {
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = CrossAttentionParams::register(
            &mut reg,
            "x",
            AttentionConfig::new(heads, d).unwrap(),
            &mut rng,
        )
        .unwrap();
        (reg, p)
    }

    fn seq(rows: Vec<Vec<f64>>) -> FusedSequence {
        let n = rows.len();
        FusedSequence {
            s: Tensor2::from_rows(&rows).unwrap(),
            valid_len: n,
        }
    }

    #[test]
    fn zero_parameters_give_one_half() {
        let (mut reg, p) = params(4, 2);
        for id in p.ids() {
            reg.value_mut(id).fill(0.0);
        }
        let s = seq(vec![vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.5, 0.0, 2.0]]);
        let (ps, _) = propensity(&reg, &p, &s, &ExposureQuery { e_hat: vec![0.3; 4] }).unwrap();
        assert_eq!(ps.raw, 0.0);
        assert_eq!(ps.s, 0.5);
    }

    #[test]
    fn symmetric_init_gives_one_half() {
        let (reg, p) = params(8, 2);
        let s = seq((0..5).map(|i| (0..8).map(|k| (i * k) as f64 * 0.1 - 0.7).collect()).collect());
        let (ps, _) = propensity(&reg, &p, &s, &ExposureQuery { e_hat: vec![0.2; 8] }).unwrap();
        assert!(ps.raw.abs() < 1e-12);
    }

    #[test]
    fn singleton_sequence_ignores_query() {
        let (reg, p) = params(4, 1);
        let s = seq(vec![vec![0.5, -0.2, 0.1, 0.9]]);
        let a = propensity(&reg, &p, &s, &ExposureQuery { e_hat: vec![1.0, 0.0, 0.0, 0.0] }).unwrap();
        let b = propensity(&reg, &p, &s, &ExposureQuery { e_hat: vec![-3.0, 2.0, 0.0, 1.0] }).unwrap();
        assert!((a.0.raw - b.0.raw).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_forward() {
        // d = 4, one head, identity projections, b_V = 1
        let (mut reg, p) = params(4, 1);
        for id in [p.wq, p.wk, p.wv] {
            reg.set_value(id, Tensor2::identity(4)).unwrap();
        }
        for id in [p.bq, p.bk] {
            reg.value_mut(id).fill(0.0);
        }
        reg.value_mut(p.bv).fill(1.0);
        let rows = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 2.0, 0.0, 0.0]];
        let q = [0.0, 1.0, 0.0, 0.0];
        // scores q·k / √4: [0, 1]
        let z = 1.0 + 1f64.exp();
        let a = [1.0 / z, 1f64.exp() / z];
        // values: rows + 1
        let v = [[2.0, 1.0, 1.0, 1.0], [1.0, 3.0, 1.0, 1.0]];
        let out: Vec<f64> = (0..4).map(|k| a[0] * v[0][k] + a[1] * v[1][k]).collect();
        let raw = out.iter().sum::<f64>() / 4.0;
        let (ps, s_hat) = propensity(&reg, &p, &seq(rows), &ExposureQuery { e_hat: q.to_vec() }).unwrap();
        assert!((ps.raw - raw).abs() < 1e-14);
        assert!((ps.s - 1.0 / (1.0 + (-raw).exp())).abs() < 1e-14);
        for m in 0..2 {
            for k in 0..4 {
                assert!((s_hat.s_hat.get(m, k) - 2.0 * a[m] * v[m][k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn masked_sequence_rejected() {
        let (reg, p) = params(4, 1);
        let s = FusedSequence {
            s: Tensor2::zeros(3, 4),
            valid_len: 0,
        };
        assert!(matches!(
            propensity(&reg, &p, &s, &ExposureQuery { e_hat: vec![0.0; 4] }),
            Err(TipsError::Precondition(_))
        ));
    }

    #[test]
    fn exposure_loss_cases() {
        let half = PropensityScore::from_raw(0.0);
        let l = exposure_loss(&[half; 4], &[half; 4]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = exposure_loss(&[PropensityScore::from_raw(40.0)], &[PropensityScore::from_raw(-40.0)]).unwrap();
        assert!(l < 1e-15);
        let raws_p = [0.3, -1.2, 2.0, 0.0];
        let raws_n = [-0.5, 1.5, -2.2, 0.1];
        let brute = -(raws_p.iter().map(|&r| (1.0 / (1.0 + (-r as f64).exp())).ln()).sum::<f64>()
            + raws_n.iter().map(|&r| (1.0 - 1.0 / (1.0 + (-r as f64).exp())).ln()).sum::<f64>())
            / 8.0;
        let p: Vec<_> = raws_p.iter().map(|&r| PropensityScore::from_raw(r)).collect();
        let n: Vec<_> = raws_n.iter().map(|&r| PropensityScore::from_raw(r)).collect();
        assert!((exposure_loss(&p, &n).unwrap() - brute).abs() < 1e-12);
        assert!(exposure_loss(&p, &[]).is_err());
    }
}
