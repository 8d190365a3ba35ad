//! `egdp`: simulate, train, evaluate and sweep from the command line.
//!
//! Exit status: 0 on success, 2 for usage or configuration errors, 3 for
//! runtime and numeric failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use egdp_core::auction::{compute_score, EpisodeRecord, ScoreBreakdown, ScoreConfig};
use egdp_core::baseline::train_bc;
use egdp_core::config::RunConfig;
use egdp_core::data::{build_dataset, generate, read_jsonl, to_jsonl, Dataset};
use egdp_core::expert::{rollout_expert, solve_env};
use egdp_core::gradsuite;
use egdp_core::io::{atomic_write, Manifest};
use egdp_core::rollout::{
    evaluate, fixed_grid_best, run_episode, sweep, sweep_csv, LoadedPlanner, Policy, PolicySpec, SweepParam,
};
use egdp_core::train::{Ablation, Trainer};
use egdp_core::{Error, Result};

#[derive(Parser)]
#[command(name = "egdp", version, about = "Expert-guided diffusion planning for auto-bidding")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration (sections env, expert, train, sampler, eval)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seeds data generation, training, sampling and the environment of single-episode commands
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Play one episode with a constant bid coefficient
    Simulate {
        #[arg(long)]
        coefficient: Option<f64>,
    },
    /// Solve the dual multipliers in hindsight and replay the expert
    Expert,
    /// Log expert and behavior episodes over the training seeds
    GenData,
    /// Train the planner
    Train {
        /// Directory holding experts.jsonl and behavior.jsonl; generated when absent
        #[arg(long)]
        data: Option<PathBuf>,
        /// none, w/o-bf, w/o-ca, w/o-acc or all
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        xi: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        /// Also fit the behavior-cloning baseline
        #[arg(long)]
        bc: bool,
    },
    /// Play one episode with any policy
    Rollout {
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Score policies over the evaluation seeds
    Evaluate {
        /// EGDP checkpoints, one policy each
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// JSON list of policy specs
        #[arg(long)]
        policies: Option<PathBuf>,
        /// Add the fixed-bid grid-best, PID and expert baselines
        #[arg(long)]
        baselines: bool,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Vary gamma (inference only), delta or xi (retrained)
    Sweep {
        #[arg(long)]
        param: String,
        /// Comma-separated values
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Trained planner; its config is the template for retraining
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Finite-difference gradient checks of every component
    GradCheck,
    /// Penalized score of a recorded episode
    Score {
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        cpa: f64,
        #[arg(long)]
        lambda: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyKind {
    Egdp,
    FixedBid,
    Pid,
    Bc,
    Expert,
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long, value_enum, default_value = "egdp")]
    policy: PolicyKind,
    /// Checkpoint for egdp and bc
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Coefficient for fixed-bid
    #[arg(long)]
    coefficient: Option<f64>,
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long)]
    gamma: Option<usize>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
}

impl SamplerArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(g) = self.gamma {
            cfg.sampler.gamma = g;
        }
        if let Some(w) = self.omega {
            cfg.sampler.omega = w;
        }
        if let Some(t) = self.temperature {
            cfg.sampler.temperature = t;
        }
    }
}

/// Collects outputs and writes the manifest at the end.
struct Run {
    cfg: RunConfig,
    out: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.out.join(name);
        atomic_write(&p, bytes)?;
        self.manifest.add(&self.out, &p);
        Ok(p)
    }

    fn record(&mut self, path: &Path) {
        self.manifest.add(&self.out, path);
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.config = self.cfg.to_json();
        self.manifest.write(&self.out)?;
        Ok(())
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io { path, source } => Error::config("--config", format!("{}: {source}", path.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn json<T: serde::Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

fn print_score(s: &ScoreBreakdown) {
    println!(
        "score {} conversions {} cost {} cpa {} penalty {}",
        s.score, s.conversions, s.cost, s.realized_cpa, s.penalty
    );
}

fn dataset(cfg: &RunConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir {
        Some(d) => build_dataset(&read_jsonl(&d.join("behavior.jsonl"))?, &read_jsonl(&d.join("experts.jsonl"))?),
        None => {
            let (experts, behavior) = generate(&cfg.env, &cfg.expert)?;
            build_dataset(&behavior, &experts)
        }
    }
}

fn policy_from(args: &PolicyArgs, cfg: &RunConfig) -> Result<Policy> {
    let need = |what: &str| args.checkpoint.clone().ok_or_else(|| Error::config("--checkpoint", format!("required for {what}")));
    let spec = match args.policy {
        PolicyKind::Egdp => PolicySpec::Egdp {
            checkpoint: need("egdp")?,
            label: None,
        },
        PolicyKind::Bc => PolicySpec::BehaviorClone { checkpoint: need("bc")? },
        PolicyKind::FixedBid => PolicySpec::FixedBid {
            coefficient: args
                .coefficient
                .ok_or_else(|| Error::config("--coefficient", "required for fixed-bid"))?,
        },
        PolicyKind::Pid => PolicySpec::Pid { gains: cfg.eval.pid },
        PolicyKind::Expert => PolicySpec::ExpertOracle,
    };
    Policy::load(&spec, &cfg.sampler)
}

fn execute(command: Command, common: Common) -> Result<()> {
    let mut cfg = load_config(&common)?;
    let name = match &command {
        Command::Simulate { .. } => "simulate",
        Command::Expert => "expert",
        Command::GenData => "gen-data",
        Command::Train { .. } => "train",
        Command::Rollout { .. } => "rollout",
        Command::Evaluate { .. } => "evaluate",
        Command::Sweep { .. } => "sweep",
        Command::GradCheck => "grad-check",
        Command::Score { .. } => "score",
    };

    // Overrides land in the config before validation and the manifest echo.
    match &command {
        Command::Train {
            ablation, steps, xi, delta, ..
        } => {
            if let Some(a) = ablation {
                cfg.train.ablation = Ablation::parse(a)?;
            }
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            if let Some(x) = xi {
                cfg.train.xi = *x;
            }
            if let Some(d) = delta {
                cfg.train.delta = *d;
            }
        }
        Command::Rollout { sampler, .. } | Command::Evaluate { sampler, .. } | Command::Sweep { sampler, .. } => {
            sampler.apply(&mut cfg)
        }
        Command::Score { lambda: Some(l), .. } => cfg.eval.score.lambda = *l,
        _ => {}
    }
    // Single-episode commands also play environment `--seed`.
    if let (Some(s), Command::Simulate { .. } | Command::Expert | Command::Rollout { .. }) = (common.seed, &command) {
        cfg.env.seed = s;
    }
    let single_env = cfg.env.clone();
    cfg.validate()?;

    if let Command::Score { episode, cpa, .. } = &command {
        // Reads only; nothing goes under --out.
        let rec = EpisodeRecord::read(episode)?;
        let s = compute_score(&rec, *cpa, &ScoreConfig { lambda: cfg.eval.score.lambda })?;
        println!("{}", s.score);
        return Ok(());
    }

    std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    let mut run = Run {
        manifest: Manifest::new(name, cfg.to_json()),
        out: common.out.clone(),
        cfg: cfg.clone(),
    };

    match command {
        Command::Simulate { coefficient } => {
            let c = coefficient.unwrap_or(single_env.initial_coefficient);
            let res = run_episode(&Policy::load(&PolicySpec::FixedBid { coefficient: c }, &cfg.sampler)?, &single_env, &cfg.eval)?;
            run.write("episode.jsonl", res.record.to_jsonl().as_bytes())?;
            run.write("score.json", &json(&res.score))?;
            print_score(&res.score);
        }
        Command::Expert => {
            let sol = solve_env(&single_env)?;
            let traj = rollout_expert(&single_env, &sol.duals)?;
            let s = compute_score(&traj.record, single_env.cpa(0), &cfg.eval.score)?;
            run.write("expert.jsonl", traj.record.to_jsonl().as_bytes())?;
            run.write(
                "duals.json",
                &json(&serde_json::json!({"duals": sol.duals, "feasible": sol.feasible, "score": s})),
            )?;
            println!("alpha_b {} alpha_c {} feasible {}", sol.duals.alpha_b, sol.duals.alpha_c, sol.feasible);
            print_score(&s);
        }
        Command::GenData => {
            let (experts, behavior) = generate(&cfg.env, &cfg.expert)?;
            run.write("experts.jsonl", to_jsonl(&experts)?.as_bytes())?;
            run.write("behavior.jsonl", to_jsonl(&behavior)?.as_bytes())?;
            println!("{} expert and {} behavior episodes", experts.len(), behavior.len());
        }
        Command::Train { data, bc, .. } => {
            let ds = dataset(&cfg, data.as_deref())?;
            let mut trainer = Trainer::new(&cfg.train, &ds)?;
            let out = trainer.run(&ds, Some(&run.out.clone()))?;
            for p in &out.checkpoints {
                run.record(p);
            }
            if let Some(p) = &out.loss_csv {
                run.record(p);
            }
            if let Some(l) = trainer.losses.last() {
                println!(
                    "step {} L_ddpm {} L_exp {} L_inv {} L_total {}{}",
                    trainer.step,
                    l.ddpm,
                    l.exp,
                    l.inv,
                    l.total,
                    if out.stopped_early { " (plateau)" } else { "" }
                );
            }
            if bc {
                let (clone, losses) = train_bc(&ds, &cfg.eval.behavior_clone)?;
                let p = run.out.join("bc.egdp");
                clone.to_checkpoint().save(&p)?;
                run.record(&p);
                let mut csv = String::from("step,loss\n");
                for (i, l) in losses.iter().enumerate() {
                    csv.push_str(&format!("{},{l}\n", i + 1));
                }
                run.write("bc_loss.csv", csv.as_bytes())?;
            }
        }
        Command::Rollout { policy, .. } => {
            let p = policy_from(&policy, &cfg)?;
            let res = run_episode(&p, &single_env, &cfg.eval)?;
            run.write("episode.jsonl", res.record.to_jsonl().as_bytes())?;
            run.write(
                "score.json",
                &json(&serde_json::json!({
                    "policy": p.label(),
                    "seed": single_env.seed,
                    "score": res.score,
                    "denoiser_evals": res.evals,
                    "plan_ms": res.plan_ms,
                })),
            )?;
            print_score(&res.score);
        }
        Command::Evaluate {
            checkpoints,
            policies,
            baselines,
            ..
        } => {
            let mut list = Vec::new();
            for c in checkpoints {
                list.push(Policy::load(&PolicySpec::Egdp { checkpoint: c, label: None }, &cfg.sampler)?);
            }
            if let Some(p) = policies {
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                let specs: Vec<PolicySpec> = serde_json::from_str(&text).map_err(|source| Error::Json {
                    context: p.display().to_string(),
                    source,
                })?;
                for s in &specs {
                    list.push(Policy::load(s, &cfg.sampler)?);
                }
            }
            if baselines {
                // Grid-best is chosen on the training seeds, never the evaluation ones.
                let (c, _) = fixed_grid_best(&cfg.env, &cfg.expert.seeds(), &cfg.eval)?;
                list.push(Policy::FixedBid(c));
                list.push(Policy::Pid(cfg.eval.pid));
                list.push(Policy::ExpertOracle);
            }
            if list.is_empty() {
                return Err(Error::config("--checkpoint", "no policies given (use --checkpoint, --policies or --baselines)"));
            }
            let ev = evaluate(&list, &cfg.env, &cfg.eval);
            let table = ev.into_result()?;
            run.write("scores.csv", table.to_csv().as_bytes())?;
            let summary = table.summary_csv();
            run.write("summary.csv", summary.as_bytes())?;
            print!("{summary}");
        }
        Command::Sweep {
            param,
            values,
            checkpoint,
            ..
        } => {
            let param = SweepParam::parse(&param)?;
            let base = LoadedPlanner::load(&checkpoint)?;
            let mut ds: Option<Dataset> = None;
            let out = run.out.clone();
            let mut written = Vec::new();
            let rows = sweep(param, &values, &base, &cfg.sampler, &cfg.env, &cfg.eval, |tc| {
                if ds.is_none() {
                    ds = Some(dataset(&cfg, None)?);
                }
                let ds = ds.as_ref().expect("just built");
                let (key, v) = if param == SweepParam::Xi { ("xi", tc.xi) } else { ("delta", tc.delta) };
                let dir = out.join(format!("sweep_{key}_{v}"));
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let mut t = Trainer::new(tc, ds)?;
                let res = t.run(ds, Some(&dir))?;
                written.extend(res.checkpoints.iter().cloned());
                written.extend(res.loss_csv.iter().cloned());
                let path = res.checkpoints.last().cloned().expect("final checkpoint");
                Ok((LoadedPlanner::from_trainer(&t), path))
            })?;
            for p in &written {
                run.record(p);
            }
            let csv = sweep_csv(param, &rows);
            run.write("sweep.csv", csv.as_bytes())?;
            print!("{csv}");
        }
        Command::GradCheck => {
            let entries = gradsuite::run(cfg.train.seed)?;
            let mut report = Vec::new();
            for e in &entries {
                println!(
                    "{:<18} {} checked {:>5} max rel err {:.3e}",
                    e.component,
                    if e.passes() { "ok  " } else { "FAIL" },
                    e.report.checked,
                    e.report.max_rel_err
                );
                report.push(serde_json::json!({
                    "component": e.component,
                    "checked": e.report.checked,
                    "max_rel_err": e.report.max_rel_err,
                    "worst": e.report.worst,
                    "pass": e.passes(),
                }));
            }
            run.write("gradcheck.json", &json(&report))?;
            let failed: Vec<_> = entries.iter().filter(|e| !e.passes()).map(|e| e.component).collect();
            if !failed.is_empty() {
                run.finish()?;
                return Err(Error::State(format!(
                    "gradient check failed for {} (tolerance {:e})",
                    failed.join(", "),
                    gradsuite::TOLERANCE
                )));
            }
        }
        Command::Score { .. } => unreachable!("handled above"),
    }
    run.finish()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command, cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
