//! The planner's parameters and the training loop: blended forcing, condition
//! dropout, history inpainting and the combined diffusion, expert and
//! inverse-dynamics loss.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};
use crate::data::{Dataset, Normalizer};
use crate::diffusion::{inpaint, NoiseSchedule, ScheduleConfig};
use crate::egcd::{EgcdConfig, EgcdNet};
use crate::error::{Error, Result};
use crate::inverse::{history_window, InvDynConfig, InverseDynamics};
use crate::io::{atomic_write, Checkpoint};
use crate::par::par_map;
use crate::vae::{blend_choice, standard_normal, Forcing, Vae, VaeConfig};

pub const DENOISER: &str = "theta";
pub const VAE: &str = "phi";
pub const INVERSE: &str = "psi";

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub egcd: EgcdConfig,
    pub vae: VaeConfig,
    pub inverse: InvDynConfig,
}

/// Components switched off for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// "w/o BF.": raw expert condition in training, zeros at inference.
    pub disable_blend: bool,
    /// "w/o CA.": self-attention with the condition as a bias token.
    pub disable_cross_attn: bool,
    /// "w/o Acc.": sample with stride 1.
    pub force_gamma_1: bool,
}

impl Ablation {
    /// Parses `none`, `w/o-bf`, `w/o-ca` or `w/o-acc`.
    pub fn parse(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match name.to_ascii_lowercase().as_str() {
            "none" | "all" => {}
            "w/o-bf" | "wo-bf" => a.disable_blend = true,
            "w/o-ca" | "wo-ca" => a.disable_cross_attn = true,
            "w/o-acc" | "wo-acc" => a.force_gamma_1 = true,
            other => {
                return Err(Error::config(
                    "--ablation",
                    format!("unknown ablation {other:?}; expected none, w/o-bf, w/o-ca or w/o-acc"),
                ))
            }
        }
        Ok(a)
    }

    pub fn label(&self) -> &'static str {
        match (self.disable_blend, self.disable_cross_attn, self.force_gamma_1) {
            (false, false, false) => "egdp",
            (true, false, false) => "egdp_wo_bf",
            (false, true, false) => "egdp_wo_ca",
            (false, false, true) => "egdp_wo_acc",
            _ => "egdp_ablated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub xi: f64,
    pub delta: f64,
    pub p_uncond: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub checkpoint_every: usize,
    /// Stop once the mean loss of the latest 20% window improves on the one
    /// before by less than this fraction. Negative disables.
    pub plateau_tol: f64,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            xi: 1.0,
            delta: 0.4,
            p_uncond: 0.1,
            lr: 1e-3,
            batch_size: 16,
            steps: 2000,
            checkpoint_every: 500,
            plateau_tol: -1.0,
            seed: 0,
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::config("train.xi", format!("{} must be > 0", self.xi)));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::config("train.delta", format!("{} outside [0, 1]", self.delta)));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::config("train.p_uncond", format!("{} outside [0, 1]", self.p_uncond)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("train.checkpoint_every", "must be at least 1"));
        }
        NoiseSchedule::new(&self.schedule)?;
        self.model_config().egcd.validate()
    }

    /// Model configuration with the ablation applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model;
        if self.ablation.disable_cross_attn {
            m.egcd.use_cross_attention = false;
        }
        m
    }
}

/// Denoiser, VAE and inverse-dynamics head over one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Planner {
    pub horizon: usize,
    pub state_dim: usize,
    pub net: EgcdNet,
    pub vae: Vae,
    pub inverse: InverseDynamics,
    pub schedule: NoiseSchedule,
    pub ablation: Ablation,
}

impl Planner {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        horizon: usize,
        state_dim: usize,
        config: &TrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let m = config.model_config();
        m.inverse.validate(horizon + 1)?;
        Ok(Planner {
            horizon,
            state_dim,
            net: EgcdNet::new(store, DENOISER, horizon, state_dim, &m.egcd, rng)?,
            vae: Vae::new(store, VAE, horizon * state_dim, &m.vae, rng)?,
            inverse: InverseDynamics::new(store, INVERSE, state_dim, &m.inverse, rng)?,
            schedule: NoiseSchedule::new(&config.schedule)?,
            ablation: config.ablation,
        })
    }

    pub fn bind(store: &ParamStore, horizon: usize, state_dim: usize, config: &TrainConfig) -> Result<Self> {
        let m = config.model_config();
        Ok(Planner {
            horizon,
            state_dim,
            net: EgcdNet::bind(store, DENOISER, horizon, state_dim, &m.egcd)?,
            vae: Vae::bind(store, VAE, horizon * state_dim, m.vae.latent_dim)?,
            inverse: InverseDynamics::bind(store, INVERSE, state_dim, &m.inverse)?,
            schedule: NoiseSchedule::new(&config.schedule)?,
            ablation: config.ablation,
        })
    }

    /// Inverse-dynamics inputs for every decision of a trajectory; `full`
    /// holds `s_0..s_T`.
    pub fn inverse_inputs(&self, full: &Tensor) -> Result<Tensor> {
        let h = self.inverse.config.history;
        let t_max = full.rows() - 1;
        let mut data = Vec::with_capacity(t_max * (h + 2) * self.state_dim);
        for t in 0..t_max {
            let w = history_window(full, t, h)?;
            data.extend(self.inverse.input_row(&w, full.row(t + 1))?);
        }
        Tensor::matrix(t_max, (h + 2) * self.state_dim, data)
    }
}

/// One training trajectory in normalized coordinates.
#[derive(Debug, Clone, Copy)]
pub struct ItemData<'a> {
    /// `s_1..s_T`.
    pub states: &'a Tensor,
    /// `s_0..s_T`.
    pub full: &'a Tensor,
    pub expert: &'a Tensor,
    pub return_label: f64,
    pub constraint_label: f64,
    pub actions: &'a [f64],
}

/// Random choices of one batch item, drawn in this order.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemDraw {
    pub sample: usize,
    pub forcing: Forcing,
    pub latent_noise: Tensor,
    pub dropped: bool,
    pub k: usize,
    pub noise: Tensor,
    /// Number of leading rows overwritten with the clean trajectory.
    pub known: usize,
}

pub fn draw_item<R: Rng + ?Sized>(
    rng: &mut R,
    num_samples: usize,
    shape: [usize; 2],
    latent_dim: usize,
    steps: usize,
    config: &TrainConfig,
) -> ItemDraw {
    let sample = rng.random_range(0..num_samples);
    let forcing = blend_choice(config.delta, rng);
    let latent_noise = standard_normal(&[1, latent_dim], rng);
    let dropped = rng.random::<f64>() < config.p_uncond;
    let k = rng.random_range(1..=steps);
    let noise = standard_normal(&shape, rng);
    let known = rng.random_range(0..shape[0]);
    ItemDraw {
        sample,
        forcing,
        latent_noise,
        dropped,
        k,
        noise,
        known,
    }
}

/// Loss terms of one item.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub ddpm: f64,
    pub exp: f64,
    pub inv: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub ddpm: Var,
    pub exp: Var,
    pub inv: Var,
    pub total: Var,
}

/// `L_ddpm + xi (L_exp + L_inv)` for one item. `xi` is taken as given so the
/// decoupled limit can be probed.
pub fn item_loss(
    tape: &mut Tape,
    planner: &Planner,
    item: &ItemData,
    draw: &ItemDraw,
    xi: f64,
) -> Result<LossVars> {
    let n = planner.horizon * planner.state_dim;
    let xe = tape.input(item.expert.reshape(&[1, n])?);
    let vae = planner.vae.loss(tape, xe, &draw.latent_noise)?;
    let cvec = if draw.dropped {
        tape.param(planner.net.null_condition_id())
    } else {
        let implicit = match (planner.ablation.disable_blend, draw.forcing) {
            (true, _) | (false, Forcing::Teacher) => xe,
            (false, Forcing::Decode) => vae.decoded,
        };
        let labels = tape.input(Tensor::row_vector(vec![item.return_label, item.constraint_label]));
        tape.concat_cols(&[implicit, labels])?
    };
    let mut xk = planner.schedule.q_sample(item.states, draw.k, &draw.noise)?;
    let known = item.states.head_rows(draw.known)?;
    inpaint(&mut xk, &known)?;
    let xk = tape.input(xk);
    let pred = planner.net.forward_cond(tape, xk, draw.k, cvec)?.output;
    let target = tape.input(item.states.clone());
    let ddpm = tape.mse(pred, target)?;
    let inv_in = tape.input(planner.inverse_inputs(item.full)?);
    let inv = planner.inverse.loss(tape, inv_in, item.actions)?;
    let aux = tape.add(vae.total, inv)?;
    let aux_w = tape.scale(aux, xi);
    let total = tape.add(ddpm, aux_w)?;
    Ok(LossVars {
        ddpm,
        exp: vae.total,
        inv,
        total,
    })
}

/// Prepared per-sample tensors.
#[derive(Debug, Clone)]
pub struct Prepared {
    full: Vec<Tensor>,
}

impl Prepared {
    pub fn new(ds: &Dataset) -> Result<Self> {
        let full = ds
            .samples
            .iter()
            .map(|s| ds.with_initial(&s.states))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared { full })
    }

    pub fn item<'a>(&'a self, ds: &'a Dataset, i: usize) -> ItemData<'a> {
        let s = &ds.samples[i];
        ItemData {
            states: &s.states,
            full: &self.full[i],
            expert: &ds.experts[s.expert],
            return_label: s.return_label,
            constraint_label: s.constraint_label,
            actions: &s.actions,
        }
    }
}

/// Loss and parameter gradients of a batch, items reduced in draw order.
pub fn batch_gradients(
    store: &ParamStore,
    planner: &Planner,
    ds: &Dataset,
    prep: &Prepared,
    draws: &[ItemDraw],
    xi: f64,
) -> Result<(LossReport, Vec<Option<Tensor>>)> {
    let per_item = par_map(draws, |d| -> Result<(LossReport, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new(store);
        let item = prep.item(ds, d.sample);
        let l = item_loss(&mut tape, planner, &item, d, xi)?;
        let rep = LossReport {
            ddpm: tape.value(l.ddpm).item(),
            exp: tape.value(l.exp).item(),
            inv: tape.value(l.inv).item(),
            total: tape.value(l.total).item(),
        };
        Ok((rep, tape.backward(l.total)?.into_param_grads()))
    });
    let scale = 1.0 / draws.len() as f64;
    let mut report = LossReport::default();
    let mut sum: Vec<Option<Tensor>> = vec![None; store.len()];
    for r in per_item {
        let (rep, grads) = r?;
        report.ddpm += rep.ddpm * scale;
        report.exp += rep.exp * scale;
        report.inv += rep.inv * scale;
        report.total += rep.total * scale;
        for (acc, g) in sum.iter_mut().zip(grads) {
            if let Some(mut g) = g {
                g.scale_assign(scale);
                match acc {
                    Some(a) => a.add_assign(&g),
                    None => *acc = Some(g),
                }
            }
        }
    }
    Ok((report, sum))
}

/// Normalization data the planner needs at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMeta {
    pub horizon: usize,
    pub state_dim: usize,
    pub norm: Normalizer,
    pub return_range: (f64, f64),
    pub initial_state: Vec<f64>,
}

impl DataMeta {
    pub fn of(ds: &Dataset) -> Self {
        DataMeta {
            horizon: ds.horizon,
            state_dim: ds.state_dim,
            norm: ds.norm.clone(),
            return_range: ds.return_range,
            initial_state: ds.initial_state.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn of(rng: &ChaCha8Rng) -> Self {
        let mut seed = String::with_capacity(64);
        for b in rng.get_seed() {
            let _ = write!(seed, "{b:02x}");
        }
        RngState {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint {
            offset: 16,
            reason: "malformed rng state".into(),
        };
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainMeta {
    kind: String,
    step: usize,
    train: TrainConfig,
    ablation: Ablation,
    data: DataMeta,
    rng: RngState,
    adam_t: u64,
    losses: Vec<LossReport>,
}

/// Training state: parameters, optimizer, rng and loss history.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub planner: Planner,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub step: usize,
    pub losses: Vec<LossReport>,
    pub data: DataMeta,
}

/// Files written by a training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOutput {
    pub checkpoints: Vec<PathBuf>,
    pub loss_csv: Option<PathBuf>,
    pub stopped_early: bool,
}

impl Trainer {
    pub fn new(config: &TrainConfig, ds: &Dataset) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let planner = Planner::new(&mut store, ds.horizon, ds.state_dim, config, &mut rng)?;
        let adam = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &store,
        );
        Ok(Trainer {
            config: config.clone(),
            store,
            planner,
            adam,
            rng,
            step: 0,
            losses: Vec::new(),
            data: DataMeta::of(ds),
        })
    }

    pub fn draw_batch(&mut self, num_samples: usize) -> Vec<ItemDraw> {
        let shape = [self.planner.horizon, self.planner.state_dim];
        let dz = self.planner.vae.latent_dim;
        let steps = self.planner.schedule.steps();
        (0..self.config.batch_size)
            .map(|_| draw_item(&mut self.rng, num_samples, shape, dz, steps, &self.config))
            .collect()
    }

    /// One optimizer step on a freshly drawn batch.
    pub fn train_step(&mut self, ds: &Dataset, prep: &Prepared) -> Result<LossReport> {
        if ds.samples.is_empty() {
            return Err(Error::Input("dataset has no trajectories".into()));
        }
        let draws = self.draw_batch(ds.samples.len());
        let (report, grads) = batch_gradients(&self.store, &self.planner, ds, prep, &draws, self.config.xi)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite {
                context: format!("training loss at step {}", self.step + 1),
            });
        }
        self.store.zero_grads();
        self.store.accumulate(&grads, 1.0);
        self.adam.step(&mut self.store).map_err(|e| match e {
            Error::NonFinite { context } => Error::NonFinite {
                context: format!("{context} at step {}", self.step + 1),
            },
            other => other,
        })?;
        self.step += 1;
        self.losses.push(report);
        Ok(report)
    }

    fn plateaued(&self) -> bool {
        if self.config.plateau_tol < 0.0 {
            return false;
        }
        let w = (self.config.steps / 5).max(1);
        let n = self.losses.len();
        if n < 2 * w || n % w != 0 {
            return false;
        }
        let mean = |s: &[LossReport]| s.iter().map(|l| l.total).sum::<f64>() / s.len() as f64;
        let last = mean(&self.losses[n - w..]);
        let prev = mean(&self.losses[n - 2 * w..n - w]);
        (prev - last) / prev.abs().max(1e-12) < self.config.plateau_tol
    }

    /// Trains up to `config.steps`, writing `ckpt_<step>.egdp`, `final.egdp`
    /// and `loss.csv` under `out` when given.
    pub fn run(&mut self, ds: &Dataset, out: Option<&Path>) -> Result<TrainOutput> {
        let prep = Prepared::new(ds)?;
        let mut result = TrainOutput::default();
        while self.step < self.config.steps {
            self.train_step(ds, &prep)?;
            if let Some(dir) = out {
                if self.step % self.config.checkpoint_every == 0 && self.step < self.config.steps {
                    let p = dir.join(format!("ckpt_{:06}.egdp", self.step));
                    self.to_checkpoint()?.save(&p)?;
                    result.checkpoints.push(p);
                }
            }
            if self.plateaued() {
                result.stopped_early = true;
                break;
            }
        }
        if let Some(dir) = out {
            let p = dir.join("final.egdp");
            self.to_checkpoint()?.save(&p)?;
            result.checkpoints.push(p);
            let csv = dir.join("loss.csv");
            atomic_write(&csv, self.loss_csv().as_bytes())?;
            result.loss_csv = Some(csv);
        }
        Ok(result)
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,L_ddpm,L_exp,L_inv,L_total\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{},{}", i + 1, l.ddpm, l.exp, l.inv, l.total);
        }
        s
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = TrainMeta {
            kind: "egdp".into(),
            step: self.step,
            train: self.config.clone(),
            ablation: self.config.ablation,
            data: self.data.clone(),
            rng: RngState::of(&self.rng),
            adam_t: self.adam.t,
            losses: self.losses.clone(),
        };
        let meta = serde_json::to_value(&meta).map_err(|source| Error::Json {
            context: "checkpoint metadata".into(),
            source,
        })?;
        let mut tensors = Vec::with_capacity(3 * self.store.len());
        for (_, p) in self.store.iter() {
            tensors.push((p.name.clone(), p.value.clone()));
        }
        for (id, p) in self.store.iter() {
            tensors.push((format!("adam.m.{}", p.name), self.adam.m[id.index()].clone()));
            tensors.push((format!("adam.v.{}", p.name), self.adam.v[id.index()].clone()));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: TrainMeta = serde_json::from_value(ckpt.meta.clone()).map_err(|source| Error::Json {
            context: "checkpoint metadata".into(),
            source,
        })?;
        if meta.kind != "egdp" {
            return Err(Error::Checkpoint {
                offset: 16,
                reason: format!("expected an egdp checkpoint, found {:?}", meta.kind),
            });
        }
        let mut config = meta.train;
        config.ablation = meta.ablation;
        // Rebuild the layout, then overwrite every tensor from the file.
        let mut store = ParamStore::new();
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let planner = Planner::new(&mut store, meta.data.horizon, meta.data.state_dim, &config, &mut scratch)?;
        let mut adam = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &store,
        );
        adam.t = meta.adam_t;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let fetch = |n: &str, like: &Tensor| -> Result<Tensor> {
                let t = ckpt.tensor(n).ok_or_else(|| Error::Checkpoint {
                    offset: 16,
                    reason: format!("tensor {n} missing"),
                })?;
                if t.shape() != like.shape() {
                    return Err(Error::Checkpoint {
                        offset: 16,
                        reason: format!("tensor {n} has shape {:?}, expected {:?}", t.shape(), like.shape()),
                    });
                }
                Ok(t.clone())
            };
            let v = fetch(&name, store.value(id))?;
            adam.m[id.index()] = fetch(&format!("adam.m.{name}"), &v)?;
            adam.v[id.index()] = fetch(&format!("adam.v.{name}"), &v)?;
            *store.value_mut(id) = v;
        }
        Ok(Trainer {
            config,
            store,
            planner,
            adam,
            rng: meta.rng.restore()?,
            step: meta.step,
            losses: meta.losses,
            data: meta.data,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Trains from scratch and returns the trainer.
pub fn train(config: &TrainConfig, ds: &Dataset, out: Option<&Path>) -> Result<(Trainer, TrainOutput)> {
    let mut t = Trainer::new(config, ds)?;
    let o = t.run(ds, out)?;
    Ok((t, o))
}
