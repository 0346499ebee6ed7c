//! Dual item embeddings, the time-gap embedder, and sequence fusion.

use rand::Rng;

use crate::error::{Result, TipsError};
use crate::numerics::{uniform_init, Graph, ParamId, ParamRegistry, Tensor2, Var};

/// Interaction table `H_C` and exposure table `H_E`, both `|V|×d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DualItemEmbeddings {
    pub h_c: ParamId,
    pub h_e: ParamId,
    pub n_items: usize,
    pub dim: usize,
}

impl DualItemEmbeddings {
    pub fn register<R: Rng>(
        reg: &mut ParamRegistry,
        n_items: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let h_c = reg.register("item.interaction", uniform_init(n_items, dim, bound, rng))?;
        let h_e = reg.register("item.exposure", uniform_init(n_items, dim, bound, rng))?;
        Ok(DualItemEmbeddings {
            h_c,
            h_e,
            n_items,
            dim,
        })
    }

    /// `(c, e)` rows for one item.
    pub fn lookup_dual(&self, reg: &ParamRegistry, item: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if item >= self.n_items {
            return Err(TipsError::Index {
                what: "item",
                index: item,
                len: self.n_items,
            });
        }
        Ok((
            reg.value(self.h_c).row(item).to_vec(),
            reg.value(self.h_e).row(item).to_vec(),
        ))
    }

    pub fn interaction_rows(&self, g: &mut Graph, items: &[usize]) -> Result<Var> {
        g.rows(self.h_c, items)
    }

    pub fn exposure_rows(&self, g: &mut Graph, items: &[usize]) -> Result<Var> {
        g.rows(self.h_e, items)
    }
}

/// `t = W2·tanh(W1·gap + b1) + b2`, mapping a normalised gap to `d` dims.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeEmbedder {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub dim: usize,
}

impl TimeEmbedder {
    pub fn register<R: Rng>(reg: &mut ParamRegistry, dim: usize, rng: &mut R) -> Result<Self> {
        let w1 = reg.register("time.w1", uniform_init(1, dim, 1.0, rng))?;
        let b1 = reg.register("time.b1", uniform_init(1, dim, 1.0, rng))?;
        let w2 = reg.register(
            "time.w2",
            uniform_init(dim, dim, 1.0 / (dim as f64).sqrt(), rng),
        )?;
        let b2 = reg.register("time.b2", Tensor2::zeros(1, dim))?;
        Ok(TimeEmbedder { w1, b1, w2, b2, dim })
    }

    /// Embeds a column of gaps (`n×1`) into `n×d`.
    pub fn embed_graph(&self, g: &mut Graph, gaps: &[f64]) -> Result<Var> {
        if let Some(bad) = gaps.iter().find(|x| !x.is_finite()) {
            return Err(TipsError::Numeric(format!("time gap {bad}")));
        }
        let x = g.input(Tensor2::column_vector(gaps));
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.affine(x, w1, b1)?;
        let h = g.tanh(h);
        g.affine(h, w2, b2)
    }

    pub fn embed_time(&self, reg: &ParamRegistry, gap: f64) -> Result<Vec<f64>> {
        let mut g = Graph::new(reg);
        let t = self.embed_graph(&mut g, &[gap])?;
        Ok(g.value(t).data().to_vec())
    }
}

/// `M×d` fused sequence, left-padded with zero rows; only the last
/// `valid_len` rows are real.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedSequence {
    pub s: Tensor2,
    pub valid_len: usize,
}

impl FusedSequence {
    /// The unpadded rows.
    pub fn valid_rows(&self) -> Result<Tensor2> {
        let (m, d) = self.s.shape();
        Tensor2::from_vec(
            self.valid_len,
            d,
            self.s.data()[(m - self.valid_len) * d..].to_vec(),
        )
    }
}

/// `S[m] = c_{i_m} + t_{i_m}` over the valid rows, left-padded to `max_len`.
/// Passing `time = None` uses zero time embeddings.
pub fn fuse_sequence(
    reg: &ParamRegistry,
    emb: &DualItemEmbeddings,
    time: Option<&TimeEmbedder>,
    items: &[usize],
    gaps: &[f64],
    max_len: usize,
) -> Result<FusedSequence> {
    let mut g = Graph::new(reg);
    let s = fuse_graph(&mut g, emb, time, items, gaps)?;
    if items.len() > max_len {
        return Err(TipsError::Precondition(format!(
            "sequence of length {} exceeds max length {max_len}",
            items.len()
        )));
    }
    let d = emb.dim;
    let mut out = Tensor2::zeros(max_len, d);
    let pad = max_len - items.len();
    out.data_mut()[pad * d..].copy_from_slice(g.value(s).data());
    Ok(FusedSequence {
        s: out,
        valid_len: items.len(),
    })
}

/// Graph form of [`fuse_sequence`] over the valid rows only (masked rows
/// never enter any computation, so they are simply omitted).
pub fn fuse_graph(
    g: &mut Graph,
    emb: &DualItemEmbeddings,
    time: Option<&TimeEmbedder>,
    items: &[usize],
    gaps: &[f64],
) -> Result<Var> {
    if items.len() != gaps.len() {
        return Err(TipsError::Dimension {
            op: "fuse_sequence",
            left: (items.len(), 1),
            right: (gaps.len(), 1),
        });
    }
    let c = emb.interaction_rows(g, items)?;
    match time {
        Some(te) => {
            let t = te.embed_graph(g, gaps)?;
            g.add(c, t)
        }
        None => Ok(c),
    }
}

/// `ê = e_v + t` for a batch of item-time pairs (one row each). `extra` is
/// added to the time embedding (the counterfactual time perturbation).
pub fn exposure_queries(
    g: &mut Graph,
    emb: &DualItemEmbeddings,
    time: Option<&TimeEmbedder>,
    items: &[usize],
    gaps: &[f64],
    extra: Option<Tensor2>,
) -> Result<Var> {
    let e = emb.exposure_rows(g, items)?;
    let e = match time {
        Some(te) => {
            let t = te.embed_graph(g, gaps)?;
            g.add(e, t)?
        }
        None => e,
    };
    match extra {
        Some(delta) => {
            let dv = g.input(delta);
            g.add(e, dv)
        }
        None => Ok(e),
    }
}

/// A single exposure query vector `ê`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposureQuery {
    pub e_hat: Vec<f64>,
}

impl ExposureQuery {
    pub fn build(
        reg: &ParamRegistry,
        emb: &DualItemEmbeddings,
        time: Option<&TimeEmbedder>,
        item: usize,
        gap: f64,
    ) -> Result<Self> {
        let mut g = Graph::new(reg);
        let q = exposure_queries(&mut g, emb, time, &[item], &[gap], None)?;
        Ok(ExposureQuery {
            e_hat: g.value(q).data().to_vec(),
        })
    }
}
