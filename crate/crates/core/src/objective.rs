//! Training objective: time-decayed inverse-propensity BPR plus the
//! exposure loss, the static-propensity baseline, and ablation modes.

use serde::{Deserialize, Serialize};

use crate::data::PopularityIndex;
use crate::error::{Result, TipsError};
use crate::numerics::log_sigmoid;

/// Which terms of the objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Full model: time embeddings, learned propensities, time decay.
    Tips,
    /// No time embeddings, no decay, global popularity window.
    NoTime,
    /// Unit weights, batch size as normaliser; exposure loss kept.
    NoIps,
    /// No exposure model, no time; weights from smoothed global popularity.
    StaticIps,
    /// Plain backbone with uniformly sampled negatives.
    None,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Tips, Mode::NoTime, Mode::NoIps, Mode::StaticIps, Mode::None];
    pub const ABLATIONS: [Mode; 4] = [Mode::Tips, Mode::NoTime, Mode::NoIps, Mode::StaticIps];

    pub fn uses_time(self) -> bool {
        matches!(self, Mode::Tips | Mode::NoIps)
    }

    /// Cross-attention propensity model, `Ŝ`, and the exposure loss.
    pub fn uses_exposure_model(self) -> bool {
        matches!(self, Mode::Tips | Mode::NoTime | Mode::NoIps)
    }

    /// BPR negatives are the counterfactual triple (otherwise uniform).
    pub fn uses_counterfactuals(self) -> bool {
        self != Mode::None
    }

    /// Popularity window for counterfactual popular items.
    pub fn popularity_window(self, tau: i64) -> Option<i64> {
        if self.uses_time() {
            Some(tau)
        } else {
            None
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Mode::Tips => "TIPS",
            Mode::NoTime => "TIPS w/o time",
            Mode::NoIps => "TIPS w/o IPS",
            Mode::StaticIps => "TIPS w/o EP&time",
            Mode::None => "none",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::Tips => "tips",
            Mode::NoTime => "no-time",
            Mode::NoIps => "no-ips",
            Mode::StaticIps => "static-ips",
            Mode::None => "none",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Mode {
    type Err = TipsError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| TipsError::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub mu: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub negative_ratio: usize,
    /// Uniformly sampled BPR negatives kept next to the counterfactual
    /// ones (the backbone's own sampling). Mode `none` uses only these,
    /// with at least three.
    pub uniform_negatives: usize,
    pub mode: Mode,
    /// Additive smoothing of the static popularity propensity.
    pub static_alpha: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            mu: 0.5,
            gamma: 0.3,
            epsilon: 0.05,
            negative_ratio: 1,
            uniform_negatives: 1,
            mode: Mode::Tips,
            static_alpha: 1.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(TipsError::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(TipsError::Config(format!(
                "epsilon must lie in (0, 0.5), got {}",
                self.epsilon
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(TipsError::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.negative_ratio == 0 {
            return Err(TipsError::Config("negative_ratio must be at least 1".into()));
        }
        if !(self.static_alpha > 0.0) {
            return Err(TipsError::Config("static_alpha must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TipsWeight {
    pub w: f64,
    pub decay: f64,
    pub clamped_s: f64,
}

/// `exp(-μ·gap) / max(s, ε)`.
pub fn tips_weight(gap_norm: f64, s: f64, mu: f64, epsilon: f64) -> TipsWeight {
    let decay = (-mu * gap_norm).exp();
    let clamped_s = s.max(epsilon);
    TipsWeight {
        w: decay / clamped_s,
        decay,
        clamped_s,
    }
}

/// Smoothed global exposure frequency `π̂(v) = (count(v)+α) / Σ(count+α)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticPropensity {
    pi: Vec<f64>,
}

impl StaticPropensity {
    pub fn from_counts(counts: &[usize], alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(TipsError::Config("static_alpha must be positive".into()));
        }
        let total: f64 = counts.iter().map(|&c| c as f64 + alpha).sum();
        Ok(StaticPropensity {
            pi: counts.iter().map(|&c| (c as f64 + alpha) / total).collect(),
        })
    }

    pub fn from_index(index: &PopularityIndex, alpha: f64) -> Result<Self> {
        let counts: Vec<usize> = (0..index.n_items()).map(|v| index.total(v)).collect();
        Self::from_counts(&counts, alpha)
    }

    pub fn propensity(&self, v: usize) -> f64 {
        self.pi[v]
    }

    /// `1 / π̂(v)`.
    pub fn static_ips_weight(&self, v: usize) -> f64 {
        1.0 / self.pi[v]
    }
}

/// Per-instance weight and the propensity entering the batch normaliser.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceWeight {
    pub w: f64,
    pub s: f64,
}

/// Per-instance weight under `mode`. `s` is the learned propensity of the
/// factual pair (ignored by modes without one); `pi` the static one.
pub fn instance_weight(cfg: &ObjectiveConfig, gap_norm: f64, s: Option<f64>, pi: f64) -> InstanceWeight {
    match cfg.mode {
        Mode::Tips => {
            let s = s.unwrap_or(0.5);
            InstanceWeight {
                w: tips_weight(gap_norm, s, cfg.mu, cfg.epsilon).w,
                s,
            }
        }
        Mode::NoTime => {
            let s = s.unwrap_or(0.5);
            InstanceWeight {
                w: 1.0 / s.max(cfg.epsilon),
                s,
            }
        }
        Mode::NoIps | Mode::None => InstanceWeight { w: 1.0, s: 1.0 },
        Mode::StaticIps => InstanceWeight { w: 1.0 / pi, s: pi },
    }
}

/// Coefficient multiplying `Σ_j ln σ(y_i - y_j)` of each instance in the
/// minimised loss: `-w_i / (N · Σ s)`. Modes without learned propensities
/// use `s = 1` (so the normaliser is `N`); `none` uses a plain `1/N` mean.
pub fn bpr_coefficients(mode: Mode, weights: &[InstanceWeight]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(TipsError::Precondition("empty batch".into()));
    }
    let n = weights.len() as f64;
    let z = match mode {
        Mode::None => 1.0,
        _ => weights.iter().map(|w| w.s).sum::<f64>(),
    };
    Ok(weights.iter().map(|w| -w.w / (n * z)).collect())
}

/// Scalar form of the weighted BPR loss: `diffs[i]` holds `y_i - y_j` for
/// the negatives of positive `i`.
pub fn bpr_tips_loss(mode: Mode, weights: &[InstanceWeight], diffs: &[Vec<f64>]) -> Result<f64> {
    if weights.len() != diffs.len() {
        return Err(TipsError::Dimension {
            op: "bpr_tips_loss",
            left: (weights.len(), 1),
            right: (diffs.len(), 1),
        });
    }
    let coef = bpr_coefficients(mode, weights)?;
    Ok(coef
        .iter()
        .zip(diffs)
        .map(|(c, d)| c * d.iter().map(|&x| log_sigmoid(x)).sum::<f64>())
        .sum())
}
