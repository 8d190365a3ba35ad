//! Online planning loop, baseline policies and score tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auction::{
    compute_score, competitor_coefficients, generate_impressions, EnvConfig, Episode, EpisodeRecord,
    ImpressionOpportunity, ScoreBreakdown, ScoreConfig, StepRecord, StepState,
};
use crate::autodiff::{ParamStore, Tensor};
use crate::baseline::{BcConfig, BehaviorClone, PidController, PidGains};
use crate::diffusion::{evals_per_plan, sample_reverse, NetDenoiser, SamplerConfig};
use crate::egcd::Condition;
use crate::error::{Error, Result};
use crate::expert::{rollout_expert, solve_env};
use crate::inverse::{apply_action, history_window};
use crate::io::Checkpoint;
use crate::par::par_map;
use crate::train::{DataMeta, Planner, TrainConfig, Trainer};
use crate::vae::standard_normal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    /// Constant coefficients tried for the fixed-bid grid baseline.
    pub grid_points: usize,
    pub grid_range: (f64, f64),
    pub target_return: f64,
    pub target_constraint: f64,
    pub replan_every: usize,
    /// Record wall-clock planning time; off gives a reproducible table.
    pub timing: bool,
    pub pid: PidGains,
    pub behavior_clone: BcConfig,
    pub score: ScoreConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seeds: vec![0, 1, 2, 3, 4],
            grid_points: 50,
            grid_range: (0.02, 2.0),
            target_return: 1.0,
            target_constraint: 1.0,
            replan_every: 1,
            timing: true,
            pid: PidGains::default(),
            behavior_clone: BcConfig::default(),
            score: ScoreConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("eval.seeds", "need at least one seed"));
        }
        let (lo, hi) = self.grid_range;
        if self.grid_points == 0 || !(lo > 0.0 && lo <= hi) {
            return Err(Error::config("eval.grid_range", "need grid_points >= 1 and 0 < lo <= hi"));
        }
        for (f, v) in [("eval.target_return", self.target_return), ("eval.target_constraint", self.target_constraint)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(f, format!("{v} outside [0, 1]")));
            }
        }
        if self.replan_every == 0 {
            return Err(Error::config("eval.replan_every", "must be at least 1"));
        }
        self.score.validate()
    }

    /// Log-spaced constant coefficients.
    pub fn grid(&self) -> Vec<f64> {
        let (lo, hi) = self.grid_range;
        let n = self.grid_points;
        (0..n)
            .map(|i| {
                if n == 1 {
                    lo
                } else {
                    (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp()
                }
            })
            .collect()
    }
}

/// Which bidder controls agent 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Egdp {
        checkpoint: PathBuf,
        #[serde(default)]
        label: Option<String>,
    },
    FixedBid {
        coefficient: f64,
    },
    Pid {
        #[serde(flatten)]
        gains: PidGains,
    },
    BehaviorClone {
        checkpoint: PathBuf,
    },
    ExpertOracle,
}

/// A trained planner ready for inference.
#[derive(Debug, Clone)]
pub struct LoadedPlanner {
    pub store: ParamStore,
    pub planner: Planner,
    pub data: DataMeta,
    pub config: TrainConfig,
}

impl LoadedPlanner {
    pub fn from_trainer(t: &Trainer) -> Self {
        LoadedPlanner {
            store: t.store.clone(),
            planner: t.planner.clone(),
            data: t.data.clone(),
            config: t.config.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_trainer(&Trainer::load(path)?))
    }

    pub fn gamma(&self, sampler: &SamplerConfig) -> usize {
        if self.planner.ablation.force_gamma_1 {
            1
        } else {
            sampler.gamma
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub action: f64,
    pub evals: usize,
    /// Planned `s_0..s_T`, normalized.
    pub trajectory: Tensor,
}

/// One planning call: `history` holds the raw states `s_0..s_t`.
pub fn plan_step<R: Rng + ?Sized>(
    lp: &LoadedPlanner,
    history: &[Vec<f64>],
    target: (f64, f64),
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<Plan> {
    let p = &lp.planner;
    let (big_t, ds) = (p.horizon, p.state_dim);
    if history.is_empty() || history.len() > big_t {
        return Err(Error::Input(format!(
            "planning needs 1..={big_t} history states, got {}",
            history.len()
        )));
    }
    let t = history.len() - 1;
    let norm = &lp.data.norm;
    let known = norm.normalize_rows(&history[1..].to_vec())?;
    let known = if known.is_empty() { Tensor::zeros(&[0, ds]) } else { known };
    let implicit = if p.ablation.disable_blend {
        Tensor::zeros(&[big_t, ds])
    } else {
        let z = standard_normal(&[1, p.vae.latent_dim], rng);
        p.vae.decode_values(&lp.store, &z, &[big_t, ds])?
    };
    let cond = Condition::new(implicit, target.0, target.1)?;
    let cfg = SamplerConfig {
        gamma: lp.gamma(sampler),
        ..*sampler
    };
    let den = NetDenoiser {
        net: &p.net,
        store: &lp.store,
    };
    let sample = sample_reverse(&den, &cond, &p.schedule, &cfg, &known, [big_t, ds], rng)?;
    let mut full = norm.normalize(&history[0]);
    full.extend_from_slice(sample.trajectory.data());
    let full = Tensor::matrix(big_t + 1, ds, full)?;
    let action = act_on_plan(lp, &full, t)?;
    Ok(Plan {
        action,
        evals: sample.evals,
        trajectory: full,
    })
}

fn act_on_plan(lp: &LoadedPlanner, full: &Tensor, t: usize) -> Result<f64> {
    let h = lp.planner.inverse.config.history;
    let window = history_window(full, t, h)?;
    lp.planner.inverse.predict_action(&lp.store, &window, full.row(t + 1))
}

/// Runtime form of a [`PolicySpec`].
#[derive(Debug, Clone)]
pub enum Policy {
    Egdp {
        planner: Arc<LoadedPlanner>,
        sampler: SamplerConfig,
        label: String,
    },
    FixedBid(f64),
    Pid(PidGains),
    BehaviorClone(Arc<BehaviorClone>),
    ExpertOracle,
}

impl Policy {
    pub fn load(spec: &PolicySpec, sampler: &SamplerConfig) -> Result<Self> {
        Ok(match spec {
            PolicySpec::Egdp { checkpoint, label } => {
                let lp = LoadedPlanner::load(checkpoint)?;
                let label = label.clone().unwrap_or_else(|| lp.planner.ablation.label().to_string());
                Policy::Egdp {
                    planner: Arc::new(lp),
                    sampler: *sampler,
                    label,
                }
            }
            PolicySpec::FixedBid { coefficient } => {
                if !(*coefficient >= 0.0 && coefficient.is_finite()) {
                    return Err(Error::config("policy.coefficient", format!("{coefficient} must be >= 0")));
                }
                Policy::FixedBid(*coefficient)
            }
            PolicySpec::Pid { gains } => Policy::Pid(*gains),
            PolicySpec::BehaviorClone { checkpoint } => {
                Policy::BehaviorClone(Arc::new(BehaviorClone::from_checkpoint(&Checkpoint::load(checkpoint)?)?))
            }
            PolicySpec::ExpertOracle => Policy::ExpertOracle,
        })
    }

    pub fn label(&self) -> String {
        match self {
            Policy::Egdp { label, .. } => label.clone(),
            Policy::FixedBid(c) => format!("fixed_bid({c})"),
            Policy::Pid(_) => "pid".into(),
            Policy::BehaviorClone(_) => "behavior_clone".into(),
            Policy::ExpertOracle => "expert_oracle".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub record: EpisodeRecord,
    pub score: ScoreBreakdown,
    pub plan_ms: f64,
    pub evals: usize,
}

/// Plays an episode where `choose(t, history)` returns the coefficient used
/// in step `t`; `history` holds `s_0..s_t`.
pub fn play_episode<F>(env: &EnvConfig, impressions: Vec<ImpressionOpportunity>, mut choose: F) -> Result<EpisodeRecord>
where
    F: FnMut(usize, &[StepState]) -> Result<f64>,
{
    let comp = competitor_coefficients(env);
    let mut ep = Episode::with_impressions(env, impressions);
    let mut history = vec![StepState::initial(env.initial_coefficient)];
    let mut steps = Vec::with_capacity(env.num_steps);
    while !ep.is_done() {
        let t = ep.step_index();
        let c = choose(t, &history)?;
        let prev = history[t].bid_coefficient;
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
        history.push(out.states[0]);
    }
    Ok(EpisodeRecord { steps, expert: None })
}

/// Runs one policy on one environment seed.
pub fn run_episode(policy: &Policy, env: &EnvConfig, eval: &EvalConfig) -> Result<EpisodeResult> {
    let mut plan_ms = 0.0;
    let mut evals = 0;
    let record = match policy {
        Policy::ExpertOracle => {
            let sol = solve_env(env)?;
            rollout_expert(env, &sol.duals)?.record
        }
        Policy::FixedBid(c) => play_episode(env, generate_impressions(env)?, |_, _| Ok(*c))?,
        Policy::Pid(g) => {
            let mut pid = PidController::new(*g);
            let big_t = env.num_steps as f64;
            play_episode(env, generate_impressions(env)?, |t, h| {
                let spent = 1.0 - h[t].remaining_budget_frac;
                Ok(pid.next(spent, t as f64 / big_t))
            })?
        }
        Policy::BehaviorClone(bc) => play_episode(env, generate_impressions(env)?, |t, h| {
            let s = &h[t];
            Ok(apply_action(s.bid_coefficient, bc.act(&s.to_vec())?))
        })?,
        Policy::Egdp { planner, sampler, .. } => {
            if planner.planner.horizon != env.num_steps || planner.data.state_dim != crate::auction::STATE_DIM {
                return Err(Error::config(
                    "env.num_steps",
                    format!("planner horizon {} does not match {}", planner.planner.horizon, env.num_steps),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
            rng.set_stream(env.seed);
            let target = (eval.target_return, eval.target_constraint);
            let mut cached: Option<Tensor> = None;
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(env.num_steps + 1);
            play_episode(env, generate_impressions(env)?, |t, h| {
                rows.truncate(0);
                rows.extend(h.iter().map(StepState::to_vec));
                let start = Instant::now();
                let action = match (&cached, t % eval.replan_every) {
                    (Some(plan), r) if r != 0 => {
                        // Re-anchor the cached plan on the true history.
                        let mut full = plan.clone();
                        for (i, r) in rows.iter().enumerate() {
                            full.row_mut(i).copy_from_slice(&planner.data.norm.normalize(r));
                        }
                        act_on_plan(planner, &full, t)?
                    }
                    _ => {
                        let p = plan_step(planner, &rows, target, sampler, &mut rng)?;
                        evals += p.evals;
                        cached = Some(p.trajectory);
                        p.action
                    }
                };
                if eval.timing {
                    plan_ms += start.elapsed().as_secs_f64() * 1e3;
                }
                Ok(apply_action(h[t].bid_coefficient, action))
            })?
        }
    };
    let score = compute_score(&record, env.cpa(0), &eval.score)?;
    Ok(EpisodeResult {
        record,
        score,
        plan_ms,
        evals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub policy: String,
    pub seed: u64,
    pub score: f64,
    pub conversions: f64,
    pub cost: f64,
    pub cpa: f64,
    pub budget_util: f64,
    pub plan_ms: f64,
    pub denoiser_evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub policy: String,
    pub episodes: usize,
    pub mean: f64,
    pub std: f64,
    pub mean_evals: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("policy,seed,score,conversions,cost,cpa,budget_util,plan_ms,denoiser_evals\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.policy, r.seed, r.score, r.conversions, r.cost, r.cpa, r.budget_util, r.plan_ms, r.denoiser_evals
            );
        }
        s
    }

    /// Mean and sample standard deviation of the score per policy, in first
    /// appearance order.
    pub fn summary(&self) -> Vec<Summary> {
        let mut order: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.policy.as_str()) {
                order.push(&r.policy);
            }
        }
        order
            .into_iter()
            .map(|p| {
                let rows: Vec<&ScoreRow> = self.rows.iter().filter(|r| r.policy == p).collect();
                let n = rows.len() as f64;
                let mean = rows.iter().map(|r| r.score).sum::<f64>() / n;
                let var = if rows.len() > 1 {
                    rows.iter().map(|r| (r.score - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                Summary {
                    policy: p.to_string(),
                    episodes: rows.len(),
                    mean,
                    std: var.sqrt(),
                    mean_evals: rows.iter().map(|r| r.denoiser_evals as f64).sum::<f64>() / n,
                }
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("policy,episodes,mean_score,std_score,mean_denoiser_evals\n");
        for m in self.summary() {
            let _ = writeln!(s, "{},{},{},{},{}", m.policy, m.episodes, m.mean, m.std, m.mean_evals);
        }
        s
    }

    pub fn mean_of(&self, policy: &str) -> Option<f64> {
        self.summary().into_iter().find(|m| m.policy == policy).map(|m| m.mean)
    }
}

/// Completed rows plus the first failure, if any.
#[derive(Debug)]
pub struct Evaluation {
    pub table: ScoreTable,
    pub failure: Option<Error>,
}

impl Evaluation {
    pub fn into_result(self) -> Result<ScoreTable> {
        match self.failure {
            Some(e) => Err(e),
            None => Ok(self.table),
        }
    }
}

fn row(label: &str, env: &EnvConfig, r: &EpisodeResult) -> ScoreRow {
    let budget = env.budget(0);
    ScoreRow {
        policy: label.to_string(),
        seed: env.seed,
        score: r.score.score,
        conversions: r.score.conversions,
        cost: r.score.cost,
        cpa: r.score.realized_cpa,
        budget_util: if budget > 0.0 { r.score.cost / budget } else { 0.0 },
        plan_ms: r.plan_ms,
        denoiser_evals: r.evals,
    }
}

/// Every policy on every seed (duplicates kept), in policy-major order.
pub fn evaluate(policies: &[Policy], env: &EnvConfig, eval: &EvalConfig) -> Evaluation {
    let jobs: Vec<(usize, u64)> = (0..policies.len())
        .flat_map(|p| eval.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let results = par_map(&jobs, |&(p, s)| {
        let e = env.with_seed(s);
        run_episode(&policies[p], &e, eval).map(|r| row(&policies[p].label(), &e, &r))
    });
    let mut table = ScoreTable::default();
    let mut failure = None;
    if policies.is_empty() {
        failure = Some(Error::Input("no policies to evaluate".into()));
    }
    for r in results {
        match r {
            Ok(row) => table.rows.push(row),
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    }
    Evaluation { table, failure }
}

/// Grid coefficient with the best mean score over `seeds`.
pub fn fixed_grid_best(env: &EnvConfig, seeds: &[u64], eval: &EvalConfig) -> Result<(f64, f64)> {
    if seeds.is_empty() {
        return Err(Error::Input("grid search needs at least one seed".into()));
    }
    let grid = eval.grid();
    let imps = par_map(seeds, |&s| generate_impressions(&env.with_seed(s)));
    let imps = imps.into_iter().collect::<Result<Vec<_>>>()?;
    let means = par_map(&grid, |&c| -> Result<f64> {
        let mut total = 0.0;
        for (&s, im) in seeds.iter().zip(&imps) {
            let e = env.with_seed(s);
            let rec = play_episode(&e, im.clone(), |_, _| Ok(c))?;
            total += compute_score(&rec, e.cpa(0), &eval.score)?.score;
        }
        Ok(total / seeds.len() as f64)
    });
    let mut best = (grid[0], f64::NEG_INFINITY);
    for (&c, m) in grid.iter().zip(means) {
        let m = m?;
        if m > best.1 {
            best = (c, m);
        }
    }
    Ok(best)
}

/// Sweepable hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Gamma,
    Delta,
    Xi,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(SweepParam::Gamma),
            "delta" => Ok(SweepParam::Delta),
            "xi" => Ok(SweepParam::Xi),
            o => Err(Error::config("--param", format!("unknown sweep parameter {o:?}; expected gamma, delta or xi"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_score: f64,
    pub std_score: f64,
    pub evals_per_plan: usize,
    pub checkpoint: Option<PathBuf>,
}

pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let name = match param {
        SweepParam::Gamma => "gamma",
        SweepParam::Delta => "delta",
        SweepParam::Xi => "xi",
    };
    let mut s = format!("{name},mean_score,std_score,evals_per_plan\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.value, r.mean_score, r.std_score, r.evals_per_plan);
    }
    s
}

/// Evaluates one value per row. Gamma reuses `base` (inference only); delta
/// and xi retrain through `retrain`, which returns the checkpoint path of the
/// trained planner.
pub fn sweep<F>(
    param: SweepParam,
    values: &[f64],
    base: &LoadedPlanner,
    sampler: &SamplerConfig,
    env: &EnvConfig,
    eval: &EvalConfig,
    mut retrain: F,
) -> Result<Vec<SweepRow>>
where
    F: FnMut(&TrainConfig) -> Result<(LoadedPlanner, PathBuf)>,
{
    if values.is_empty() {
        return Err(Error::config("--values", "sweep needs at least one value"));
    }
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        let (lp, ckpt, s) = match param {
            SweepParam::Gamma => {
                if !(v >= 1.0 && v.fract() == 0.0) {
                    return Err(Error::config("--values", format!("gamma {v} is not a positive integer")));
                }
                let s = SamplerConfig {
                    gamma: v as usize,
                    ..*sampler
                };
                (Arc::new(base.clone()), None, s)
            }
            SweepParam::Delta | SweepParam::Xi => {
                let mut cfg = base.config.clone();
                if param == SweepParam::Delta {
                    cfg.delta = v;
                } else {
                    cfg.xi = v;
                }
                cfg.validate()?;
                let (lp, path) = retrain(&cfg)?;
                (Arc::new(lp), Some(path), *sampler)
            }
        };
        let steps = lp.planner.schedule.steps();
        let gamma = lp.gamma(&s);
        let policy = Policy::Egdp {
            planner: lp,
            sampler: s,
            label: "egdp".into(),
        };
        let table = evaluate(std::slice::from_ref(&policy), env, eval).into_result()?;
        let m = &table.summary()[0];
        out.push(SweepRow {
            value: v,
            mean_score: m.mean,
            std_score: m.std,
            evals_per_plan: evals_per_plan(steps, gamma),
            checkpoint: ckpt,
        });
    }
    Ok(out)
}
