//! Logged trajectories: generation in the simulator, min-max normalization
//! and the return/constraint labels that condition the planner.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::auction::{
    competitor_coefficients, generate_impressions, realized_cpa, EnvConfig, Episode, StepRecord,
    StepState,
};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::expert::{rollout_expert, solve_env, DualMultipliers};
use crate::par::par_map;

/// Which environments get logged and which behavior policies play them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_seeds: usize,
    pub first_seed: u64,
    /// Constant-coefficient policies per seed, coefficient log-uniform.
    pub random_policies: usize,
    pub coef_range: (f64, f64),
    /// Expert-coefficient policies per seed, scaled by `exp(noise * u_t)`
    /// with `u_t` a unit-variance AR(1) process.
    pub noisy_expert_policies: usize,
    pub expert_noise: f64,
    pub noise_correlation: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_seeds: 32,
            first_seed: 1000,
            random_policies: 3,
            coef_range: (0.05, 1.5),
            noisy_expert_policies: 3,
            expert_noise: 0.3,
            noise_correlation: 0.9,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_seeds == 0 {
            return Err(Error::config("expert.train_seeds", "must be at least 1"));
        }
        let (lo, hi) = self.coef_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config(
                "expert.coef_range",
                format!("need 0 < lo <= hi, got ({lo}, {hi})"),
            ));
        }
        if !(self.expert_noise >= 0.0 && self.expert_noise.is_finite()) {
            return Err(Error::config("expert.expert_noise", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.noise_correlation) {
            return Err(Error::config("expert.noise_correlation", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.train_seeds as u64).map(|i| self.first_seed + i).collect()
    }
}

/// One logged episode of the controlled agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggedEpisode {
    pub seed: u64,
    pub policy: String,
    pub cpa_target: f64,
    pub budget: f64,
    /// `s_0`, before the first step.
    pub initial_state: Vec<f64>,
    pub steps: Vec<StepRecord>,
    #[serde(default)]
    pub duals: Option<DualMultipliers>,
}

impl LoggedEpisode {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn total_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.cost).sum()
    }

    pub fn is_expert(&self) -> bool {
        self.duals.is_some()
    }
}

/// Writes one episode per line.
pub fn to_jsonl(episodes: &[LoggedEpisode]) -> Result<String> {
    let mut out = String::new();
    for e in episodes {
        let line = serde_json::to_string(e).map_err(|source| Error::Json {
            context: format!("episode of seed {}", e.seed),
            source,
        })?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<LoggedEpisode>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| Error::Json {
                context: format!("trajectory line {}", i + 1),
                source,
            })
        })
        .collect()
}

pub fn read_jsonl(path: &Path) -> Result<Vec<LoggedEpisode>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_jsonl(&text)
}

/// Plays `coefficient(t)` for the controlled agent against the seed's
/// competitors.
pub fn play_coefficients(
    env: &EnvConfig,
    policy: &str,
    mut coefficient: impl FnMut(usize) -> f64,
) -> Result<LoggedEpisode> {
    let comp = competitor_coefficients(env);
    let mut ep = Episode::with_impressions(env, generate_impressions(env)?);
    let s0 = StepState::initial(env.initial_coefficient);
    let mut prev = s0.bid_coefficient;
    let mut steps = Vec::with_capacity(env.num_steps);
    while !ep.is_done() {
        let t = ep.step_index();
        let c = coefficient(t).max(0.0);
        let mut coefs = comp.clone();
        coefs[0] = c;
        let out = ep.step_episode(&coefs)?;
        steps.push(StepRecord {
            t,
            state: out.states[0].to_vec(),
            action: c - prev,
            reward: out.rewards[0],
            cost: out.costs[0],
            wins: out.wins[0],
        });
        prev = c;
    }
    Ok(LoggedEpisode {
        seed: env.seed,
        policy: policy.to_string(),
        cpa_target: env.cpa(0),
        budget: env.budget(0),
        initial_state: s0.to_vec(),
        steps,
        duals: None,
    })
}

/// Expert rollout of one seed as a logged episode.
pub fn expert_episode(env: &EnvConfig) -> Result<LoggedEpisode> {
    let sol = solve_env(env)?;
    let traj = rollout_expert(env, &sol.duals)?;
    Ok(LoggedEpisode {
        seed: env.seed,
        policy: "expert".into(),
        cpa_target: env.cpa(0),
        budget: env.budget(0),
        initial_state: StepState::initial(env.initial_coefficient).to_vec(),
        steps: traj.record.steps,
        duals: Some(sol.duals),
    })
}

/// Mean bid coefficient over an episode.
pub fn mean_coefficient(ep: &LoggedEpisode) -> f64 {
    ep.steps.iter().map(|s| s.state[0]).sum::<f64>() / ep.steps.len().max(1) as f64
}

fn log_uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
    } else {
        lo
    }
}

/// Expert and behavior episodes of one seed.
pub fn generate_seed(env: &EnvConfig, data: &DataConfig) -> Result<(LoggedEpisode, Vec<LoggedEpisode>)> {
    let expert = expert_episode(env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(data.seed);
    rng.set_stream(env.seed);
    let mut behavior = Vec::with_capacity(data.random_policies + data.noisy_expert_policies);
    for i in 0..data.random_policies {
        let c = log_uniform(&mut rng, data.coef_range);
        behavior.push(play_coefficients(env, &format!("constant_{i}"), |_| c)?);
    }
    let base = mean_coefficient(&expert);
    let rho = data.noise_correlation;
    let innov = (1.0 - rho * rho).sqrt();
    for i in 0..data.noisy_expert_policies {
        let mut u: f64 = rng.sample(StandardNormal);
        let path: Vec<f64> = (0..env.num_steps)
            .map(|_| {
                let c = base * (data.expert_noise * u).exp();
                let w: f64 = rng.sample(StandardNormal);
                u = rho * u + innov * w;
                c
            })
            .collect();
        behavior.push(play_coefficients(env, &format!("noisy_expert_{i}"), |t| path[t])?);
    }
    Ok((expert, behavior))
}

/// Logs every training seed; returns `(experts, behavior)`.
pub fn generate(env: &EnvConfig, data: &DataConfig) -> Result<(Vec<LoggedEpisode>, Vec<LoggedEpisode>)> {
    env.validate()?;
    data.validate()?;
    let seeds = data.seeds();
    let per_seed = par_map(&seeds, |&s| generate_seed(&env.with_seed(s), data));
    let mut experts = Vec::with_capacity(seeds.len());
    let mut behavior = Vec::new();
    for r in per_seed {
        let (e, b) = r?;
        experts.push(e);
        behavior.extend(b);
    }
    Ok((experts, behavior))
}

/// Per-feature min-max map onto `[-1, 1]`. Constant features map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut it = rows.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::Input("normalizer needs at least one row".into()))?;
        let mut min = first.to_vec();
        let mut max = first.to_vec();
        for r in it {
            if r.len() != min.len() {
                return Err(Error::shape("normalizer", format!("row of {} vs {}", r.len(), min.len())));
            }
            for (i, &v) in r.iter().enumerate() {
                min[i] = min[i].min(v);
                max[i] = max[i].max(v);
            }
        }
        Ok(Normalizer { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    fn span(&self, i: usize) -> f64 {
        self.max[i] - self.min[i]
    }

    pub fn normalize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(i, &v)| {
                let s = self.span(i);
                if s > 0.0 {
                    2.0 * (v - self.min[i]) / s - 1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn denormalize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(i, &v)| self.min[i] + (v + 1.0) * 0.5 * self.span(i))
            .collect()
    }

    pub fn normalize_rows(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let n: Vec<Vec<f64>> = rows.iter().map(|r| self.normalize(r)).collect();
        Tensor::from_rows(&n)
    }

    /// Scale from a raw change of feature `i` to its normalized change.
    pub fn unit(&self, i: usize) -> f64 {
        let s = self.span(i);
        if s > 0.0 {
            2.0 / s
        } else {
            0.0
        }
    }
}

/// Min-max return label; a degenerate range maps to 0.5.
pub fn return_label(r: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        ((r - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.5
    }
}

/// `min(target / realized CPA, 1)`, with 0 for episodes without conversions.
pub fn constraint_label(cost: f64, conversions: f64, cpa_target: f64) -> f64 {
    if conversions <= 0.0 {
        return 0.0;
    }
    let cpa = realized_cpa(cost, conversions);
    if cpa <= 0.0 {
        1.0
    } else {
        (cpa_target / cpa).min(1.0)
    }
}

/// A training trajectory in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub policy: String,
    /// `s_1..s_T`, normalized.
    pub states: Tensor,
    /// Raw coefficient changes `a_0..a_{T-1}`.
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub ret: f64,
    pub return_label: f64,
    pub constraint_label: f64,
    /// Index into [`Dataset::experts`].
    pub expert: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub horizon: usize,
    pub state_dim: usize,
    pub norm: Normalizer,
    pub return_range: (f64, f64),
    /// Normalized `s_0`.
    pub initial_state: Vec<f64>,
    /// Normalized expert trajectories.
    pub experts: Vec<Tensor>,
    pub expert_seeds: Vec<u64>,
    pub samples: Vec<Sample>,
}

/// Builds the normalized training set. Expert rollouts are also used as
/// trajectories; every behavior episode is paired with the expert of its seed.
pub fn build_dataset(behavior: &[LoggedEpisode], experts: &[LoggedEpisode]) -> Result<Dataset> {
    if experts.is_empty() {
        return Err(Error::Input("dataset needs at least one expert trajectory".into()));
    }
    let first = &experts[0];
    let horizon = first.steps.len();
    let state_dim = first.initial_state.len();
    if horizon == 0 || state_dim == 0 {
        return Err(Error::Input("expert trajectory is empty".into()));
    }
    let all: Vec<&LoggedEpisode> = experts.iter().chain(behavior).collect();
    for e in &all {
        if e.steps.len() != horizon || e.steps.iter().any(|s| s.state.len() != state_dim) {
            return Err(Error::shape(
                "build_dataset",
                format!("episode of seed {} ({}) does not match {horizon}×{state_dim}", e.seed, e.policy),
            ));
        }
    }
    let norm = Normalizer::fit(
        all.iter()
            .flat_map(|e| std::iter::once(e.initial_state.as_slice()).chain(e.steps.iter().map(|s| s.state.as_slice()))),
    )?;
    let rows = |e: &LoggedEpisode| -> Vec<Vec<f64>> { e.steps.iter().map(|s| s.state.clone()).collect() };
    let mut expert_tensors = Vec::with_capacity(experts.len());
    let mut expert_seeds = Vec::with_capacity(experts.len());
    for e in experts {
        if expert_seeds.contains(&e.seed) {
            return Err(Error::Input(format!("two expert trajectories for seed {}", e.seed)));
        }
        expert_tensors.push(norm.normalize_rows(&rows(e))?);
        expert_seeds.push(e.seed);
    }
    let returns: Vec<f64> = all.iter().map(|e| e.total_reward()).collect();
    let lo = returns.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut samples = Vec::with_capacity(all.len());
    for (e, &ret) in all.iter().zip(&returns) {
        let expert = expert_seeds
            .iter()
            .position(|&s| s == e.seed)
            .ok_or_else(|| Error::Input(format!("no expert trajectory for seed {}", e.seed)))?;
        samples.push(Sample {
            seed: e.seed,
            policy: e.policy.clone(),
            states: norm.normalize_rows(&rows(e))?,
            actions: e.steps.iter().map(|s| s.action).collect(),
            rewards: e.steps.iter().map(|s| s.reward).collect(),
            costs: e.steps.iter().map(|s| s.cost).collect(),
            ret,
            return_label: return_label(ret, (lo, hi)),
            constraint_label: constraint_label(e.total_cost(), ret, e.cpa_target),
            expert,
        });
    }
    Ok(Dataset {
        horizon,
        state_dim,
        initial_state: norm.normalize(&first.initial_state),
        norm,
        return_range: (lo, hi),
        experts: expert_tensors,
        expert_seeds,
        samples,
    })
}

impl Dataset {
    /// Normalized `[s_0; s_1..s_T]` of a sample.
    pub fn with_initial(&self, states: &Tensor) -> Result<Tensor> {
        let mut data = self.initial_state.clone();
        data.extend_from_slice(states.data());
        Tensor::matrix(states.rows() + 1, self.state_dim, data)
    }
}
