//! Synthetic biased-exposure world. Latent-factor preferences, a logged
//! exposure policy, and clicks that can only happen on exposed items. The
//! trainee only sees the click log; the exposure log, affinities and true
//! propensities are kept for evaluation.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::InteractionLog;
use crate::dataset::{EvalCase, TrainingData};
use crate::error::{Result, TipsError};
use crate::numerics::{sigmoid, Tensor2};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExposurePolicy {
    /// Weight `exp(β·z_v(t))` on the drifting log-popularity `z_v(t)`.
    PopularitySkew { beta: f64 },
    /// Weight `exp(-β·|t - r_v| / horizon)` around each item's release step.
    RecencySkew { beta: f64 },
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    pub steps: usize,
    /// Expected number of exposed items per active user-step.
    pub slate_size: usize,
    pub step_seconds: i64,
    pub policy: ExposurePolicy,
    /// Added `κ·affinity` to the log exposure weight of skewed policies.
    pub personalization: f64,
    /// Std of the base log-popularity `z_v`.
    pub popularity_spread: f64,
    /// `z_v(t) = z_v + A·sin(2πt/P + φ_v)`.
    pub drift_amplitude: f64,
    pub drift_period: f64,
    /// `P(C=1 | E=1) = σ(click_scale·affinity + click_bias)`.
    pub click_scale: f64,
    pub click_bias: f64,
    /// Probability that a user is active at a step.
    pub activity: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_users: 500,
            n_items: 300,
            latent_dim: 8,
            steps: 60,
            slate_size: 10,
            step_seconds: 86_400,
            policy: ExposurePolicy::PopularitySkew { beta: 2.0 },
            personalization: 1.0,
            popularity_spread: 1.0,
            drift_amplitude: 1.0,
            drift_period: 30.0,
            click_scale: 2.0,
            click_bias: -1.0,
            activity: 0.5,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items < 2 || self.latent_dim == 0 {
            return Err(TipsError::Config(
                "world needs users, at least two items and a positive latent dim".into(),
            ));
        }
        if self.step_seconds <= 0 {
            return Err(TipsError::Config("step_seconds must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.activity) {
            return Err(TipsError::Config("activity must lie in [0, 1]".into()));
        }
        if !(self.drift_period > 0.0) {
            return Err(TipsError::Config("drift_period must be positive".into()));
        }
        let finite = [
            self.personalization,
            self.popularity_spread,
            self.drift_amplitude,
            self.click_scale,
            self.click_bias,
        ];
        if finite.iter().any(|x| !x.is_finite()) || self.popularity_spread < 0.0 {
            return Err(TipsError::Config("world parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn timestamp(&self, step: usize) -> i64 {
        step as i64 * self.step_seconds
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exposure {
    pub user: usize,
    pub item: usize,
    pub step: usize,
    pub probability: f64,
    pub clicked: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Click {
    pub user: usize,
    pub item: usize,
    pub step: usize,
    pub timestamp: i64,
}

/// Inclusion probabilities proportional to `weights`, capped at 1 and
/// summing to `min(slate, #positive weights)`.
pub fn water_fill(weights: &[f64], slate: usize) -> Vec<f64> {
    let mut p = vec![0.0; weights.len()];
    let mut order: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    if slate == 0 || order.is_empty() {
        return p;
    }
    if order.len() <= slate {
        order.iter().for_each(|&i| p[i] = 1.0);
        return p;
    }
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut capped = 0usize;
    let mut rest: f64 = order.iter().map(|&i| weights[i]).sum();
    loop {
        let c = (slate - capped) as f64 / rest;
        let top = order[capped];
        if capped < slate && c * weights[top] >= 1.0 {
            p[top] = 1.0;
            rest -= weights[top];
            capped += 1;
            continue;
        }
        for &i in &order[capped..] {
            p[i] = (c * weights[i]).min(1.0);
        }
        return p;
    }
}

/// Everything the simulation produced; only `clicks` reaches the trainee.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleBundle {
    pub spec: WorldSpec,
    pub seed: u64,
    /// `n_users × n_items` true affinities.
    pub affinity: Tensor2,
    pub base_popularity: Vec<f64>,
    pub phase: Vec<f64>,
    pub release: Vec<f64>,
    pub clicks: Vec<Click>,
    pub exposures: Vec<Exposure>,
}

impl OracleBundle {
    /// Exposure log weight of `item` for `user` at `step`.
    fn log_weight(&self, user: usize, item: usize, step: usize) -> Option<f64> {
        let s = &self.spec;
        let kappa = s.personalization * self.affinity.get(user, item);
        match s.policy {
            ExposurePolicy::Uniform => None,
            ExposurePolicy::PopularitySkew { beta } => {
                let t = step as f64;
                let z = self.base_popularity[item]
                    + s.drift_amplitude * (std::f64::consts::TAU * t / s.drift_period + self.phase[item]).sin();
                Some(beta * z + kappa)
            }
            ExposurePolicy::RecencySkew { beta } => {
                let horizon = s.steps.max(1) as f64;
                Some(-beta * (step as f64 - self.release[item]).abs() / horizon + kappa)
            }
        }
    }

    /// True inclusion probabilities of every item for `user` at `step`,
    /// given the items the user already clicked (which are never exposed
    /// again).
    pub fn policy_probabilities(&self, user: usize, step: usize, clicked: &HashSet<usize>) -> Vec<f64> {
        let n = self.spec.n_items;
        let logw: Vec<Option<f64>> = (0..n)
            .map(|v| (!clicked.contains(&v)).then(|| self.log_weight(user, v, step).unwrap_or(0.0)))
            .collect();
        let max = logw.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logw
            .iter()
            .map(|w| w.map_or(0.0, |w| (w - max).exp()))
            .collect();
        water_fill(&weights, self.spec.slate_size)
    }

    /// Items `user` clicked strictly before `step`.
    pub fn clicked_before(&self, user: usize, step: usize) -> HashSet<usize> {
        self.clicks
            .iter()
            .filter(|c| c.user == user && c.step < step)
            .map(|c| c.item)
            .collect()
    }

    /// Recomputes the logged propensity of `(user, item, step)`.
    pub fn true_propensity(&self, user: usize, item: usize, step: usize) -> f64 {
        self.policy_probabilities(user, step, &self.clicked_before(user, step))[item]
    }

    pub fn click_probability(&self, user: usize, item: usize) -> f64 {
        sigmoid(self.spec.click_scale * self.affinity.get(user, item) + self.spec.click_bias)
    }

    /// Every click has a matching exposure at the same step.
    pub fn check_consistency(&self) -> Result<()> {
        let exposed: HashSet<(usize, usize, usize)> =
            self.exposures.iter().map(|e| (e.user, e.item, e.step)).collect();
        for c in &self.clicks {
            if !exposed.contains(&(c.user, c.item, c.step)) {
                return Err(TipsError::DataCorruption(format!(
                    "click without exposure: user {} item {} step {}",
                    c.user, c.item, c.step
                )));
            }
        }
        Ok(())
    }

    /// The click log as an interaction log (`u<idx>`, `i<idx>` ids).
    pub fn to_log(&self) -> Result<InteractionLog> {
        InteractionLog::from_records(
            self.clicks
                .iter()
                .map(|c| (format!("u{}", c.user), format!("i{}", c.item), c.timestamp)),
        )
    }

    pub fn exposure_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.spec.n_items];
        self.exposures.iter().for_each(|e| out[e.item] += 1);
        out
    }

    pub fn click_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.spec.n_items];
        self.clicks.iter().for_each(|c| out[c.item] += 1);
        out
    }

    /// Writes the click log plus evaluation-only oracle files.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| TipsError::io(dir, e))?;
        if !self.clicks.is_empty() {
            self.to_log()?.write(&dir.join("interactions.tsv"), "\t")?;
        } else {
            std::fs::write(dir.join("interactions.tsv"), "").map_err(|e| TipsError::io(dir, e))?;
        }
        let oracle = dir.join("evaluation_only");
        std::fs::create_dir_all(&oracle).map_err(|e| TipsError::io(&oracle, e))?;
        let mut aff = String::from("# evaluation only\nuser,item,affinity\n");
        for u in 0..self.spec.n_users {
            for v in 0..self.spec.n_items {
                let _ = writeln!(aff, "u{u},i{v},{:.9}", self.affinity.get(u, v));
            }
        }
        let mut exp = String::from("# evaluation only\nuser,item,step,probability,clicked\n");
        for e in &self.exposures {
            let _ = writeln!(
                exp,
                "u{},i{},{},{:.9},{}",
                e.user, e.item, e.step, e.probability, e.clicked as u8
            );
        }
        for (name, body) in [("affinity.csv", aff), ("exposures.csv", exp)] {
            let p = oracle.join(name);
            std::fs::write(&p, body).map_err(|e| TipsError::io(&p, e))?;
        }
        let spec = serde_json::to_string_pretty(&(&self.spec, self.seed)).map_err(|e| TipsError::Serde(e.to_string()))?;
        let p = oracle.join("world.json");
        std::fs::write(&p, spec).map_err(|e| TipsError::io(&p, e))
    }
}

pub fn simulate(spec: &WorldSpec, seed: u64) -> Result<OracleBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).map_err(|e| TipsError::Config(e.to_string()))?;
    let k = spec.latent_dim;
    let users: Vec<f64> = (0..spec.n_users * k).map(|_| std_normal.sample(&mut rng)).collect();
    let items: Vec<f64> = (0..spec.n_items * k).map(|_| std_normal.sample(&mut rng)).collect();
    let mut affinity = Tensor2::zeros(spec.n_users, spec.n_items);
    let scale = 1.0 / (k as f64).sqrt();
    for u in 0..spec.n_users {
        for v in 0..spec.n_items {
            let a: f64 = (0..k).map(|j| users[u * k + j] * items[v * k + j]).sum();
            affinity.set(u, v, a * scale);
        }
    }
    let base_popularity = (0..spec.n_items)
        .map(|_| spec.popularity_spread * std_normal.sample(&mut rng))
        .collect();
    let phase = (0..spec.n_items)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let horizon = spec.steps as f64;
    let release = (0..spec.n_items).map(|_| rng.gen_range(0.0..=horizon.max(1.0))).collect();
    let mut bundle = OracleBundle {
        spec: spec.clone(),
        seed,
        affinity,
        base_popularity,
        phase,
        release,
        clicks: Vec::new(),
        exposures: Vec::new(),
    };
    for user in 0..spec.n_users {
        let mut urng = ChaCha8Rng::seed_from_u64(seed);
        urng.set_stream(user as u64 + 1);
        let mut clicked = HashSet::new();
        for step in 0..spec.steps {
            if urng.gen::<f64>() >= spec.activity {
                continue;
            }
            let probs = bundle.policy_probabilities(user, step, &clicked);
            let mut step_clicks = Vec::new();
            for (item, &p) in probs.iter().enumerate() {
                if p <= 0.0 || urng.gen::<f64>() >= p {
                    continue;
                }
                let click = urng.gen::<f64>() < bundle.click_probability(user, item);
                bundle.exposures.push(Exposure {
                    user,
                    item,
                    step,
                    probability: p,
                    clicked: click,
                });
                if click {
                    step_clicks.push(item);
                }
            }
            // within a step, clicks are spread in random order
            step_clicks.shuffle(&mut urng);
            let n = step_clicks.len() as i64;
            for (k, &item) in step_clicks.iter().enumerate() {
                bundle.clicks.push(Click {
                    user,
                    item,
                    step,
                    timestamp: spec.timestamp(step) + k as i64 * spec.step_seconds / (n + 1),
                });
                clicked.insert(item);
            }
        }
    }
    Ok(bundle)
}

/// World item index of every log item (`i<idx>` ids).
pub fn world_items(log: &InteractionLog) -> Result<Vec<usize>> {
    (0..log.n_items())
        .map(|i| parse_id(log.item_id(i), 'i'))
        .collect()
}

/// World user index of every log user (`u<idx>` ids).
pub fn world_users(log: &InteractionLog) -> Result<Vec<usize>> {
    (0..log.n_users())
        .map(|i| parse_id(log.user_id(i), 'u'))
        .collect()
}

fn parse_id(raw: &str, prefix: char) -> Result<usize> {
    raw.strip_prefix(prefix)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| TipsError::DataCorruption(format!("{raw:?} is not a simulator id")))
}

/// A user's held-out preference positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnbiasedPositive {
    pub log_user: usize,
    pub log_item: usize,
    pub world_item: usize,
}

/// For every log user, the highest-affinity item of the log vocabulary that
/// the user never clicked (ties to the lowest world index). Users who
/// clicked the whole vocabulary are skipped and counted.
pub fn unbiased_testset(bundle: &OracleBundle, log: &InteractionLog) -> Result<(Vec<UnbiasedPositive>, usize)> {
    let items = world_items(log)?;
    let users = world_users(log)?;
    let mut out = Vec::new();
    let mut skipped = 0;
    for (lu, &wu) in users.iter().enumerate() {
        let clicked: HashSet<usize> = log.sequence(lu).map(|r| r.item).collect();
        let mut best: Option<(usize, f64)> = None;
        for (li, &wi) in items.iter().enumerate() {
            if clicked.contains(&li) {
                continue;
            }
            let a = bundle.affinity.get(wu, wi);
            let better = match best {
                None => true,
                Some((bl, ba)) => a > ba || (a == ba && wi < items[bl]),
            };
            if better {
                best = Some((li, a));
            }
        }
        match best {
            Some((li, _)) => out.push(UnbiasedPositive {
                log_user: lu,
                log_item: li,
                world_item: items[li],
            }),
            None => skipped += 1,
        }
    }
    Ok((out, skipped))
}

/// Unbiased-test cases: each user's whole logged history (most recent
/// `max_len`) against the held-out preference positive. Users without a
/// positive or without a prepared history are skipped.
pub fn unbiased_cases(
    bundle: &OracleBundle,
    log: &InteractionLog,
    data: &TrainingData,
) -> Result<(Vec<EvalCase>, usize)> {
    let (positives, _) = unbiased_testset(bundle, log)?;
    let mut by_user = vec![None; log.n_users()];
    for p in positives {
        by_user[p.log_user] = Some(p);
    }
    let end = bundle.spec.timestamp(bundle.spec.steps);
    let mut cases = Vec::new();
    for u in &data.users {
        let Some(p) = by_user[u.user] else {
            continue;
        };
        let (history, gaps) = u.full_history(data.max_len);
        let positive_gap = data.gap_norm.gap(Some(u.test.timestamp), end.max(u.test.timestamp))?;
        cases.push(EvalCase {
            user: u.user,
            history,
            gaps,
            positive: p.log_item,
            positive_gap,
            exclude: u.interacted.clone(),
        });
    }
    let skipped = log.n_users() - cases.len();
    Ok((cases, skipped))
}

/// A propensity probe: the user's state just before a logged step, and
/// candidate items with their true inclusion probabilities at that step.
#[derive(Clone, Debug, PartialEq)]
pub struct PropensityProbe {
    pub log_user: usize,
    pub step: usize,
    pub history: Vec<usize>,
    pub gaps: Vec<f64>,
    pub query_gap: f64,
    /// `(log item, true propensity)`.
    pub items: Vec<(usize, f64)>,
}

/// Up to `per_user` probes per user at steps where the user clicked and
/// already had history; each probe holds the clicked item plus `extra`
/// random log items the user had not clicked before that step.
pub fn propensity_probes(
    bundle: &OracleBundle,
    log: &InteractionLog,
    data: &TrainingData,
    per_user: usize,
    extra: usize,
    seed: u64,
) -> Result<Vec<PropensityProbe>> {
    let items = world_items(log)?;
    let users = world_users(log)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = &bundle.spec;
    let mut out = Vec::new();
    for lu in 0..log.n_users() {
        let seq: Vec<(usize, i64)> = log.sequence(lu).map(|r| (r.item, r.timestamp)).collect();
        let mut steps: Vec<usize> = seq
            .iter()
            .map(|&(_, t)| (t / spec.step_seconds) as usize)
            .filter(|&s| seq.iter().any(|&(_, t)| t < spec.timestamp(s)))
            .collect();
        steps.dedup();
        steps.shuffle(&mut rng);
        steps.truncate(per_user);
        steps.sort_unstable();
        let wu = users[lu];
        for step in steps {
            let t0 = spec.timestamp(step);
            let before: Vec<(usize, i64)> = seq.iter().copied().filter(|&(_, t)| t < t0).collect();
            let mut gaps = Vec::with_capacity(before.len());
            let mut prev = None;
            for &(_, t) in &before {
                gaps.push(data.gap_norm.gap(prev, t)?);
                prev = Some(t);
            }
            let start = before.len().saturating_sub(data.max_len);
            let query_gap = data.gap_norm.gap(prev, t0)?;
            let clicked_world = bundle.clicked_before(wu, step);
            let probs = bundle.policy_probabilities(wu, step, &clicked_world);
            let clicked_now: Vec<usize> = seq
                .iter()
                .filter(|&&(_, t)| t >= t0 && t < t0 + spec.step_seconds)
                .map(|&(i, _)| i)
                .collect();
            let mut probe_items = vec![(clicked_now[0], probs[items[clicked_now[0]]])];
            let pool: Vec<usize> = (0..items.len())
                .filter(|&li| !clicked_world.contains(&items[li]) && li != clicked_now[0])
                .collect();
            for &li in pool.choose_multiple(&mut rng, extra) {
                probe_items.push((li, probs[items[li]]));
            }
            out.push(PropensityProbe {
                log_user: lu,
                step,
                history: before[start..].iter().map(|p| p.0).collect(),
                gaps: gaps[start..].to_vec(),
                query_gap,
                items: probe_items,
            });
        }
    }
    Ok(out)
}
