//! Finite-difference checks of every differentiable component at small sizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{check_all, GradCheckReport, ParamStore, Tensor};
use crate::diffusion::ScheduleConfig;
use crate::egcd::{Condition, EgcdConfig, EgcdNet};
use crate::error::Result;
use crate::inverse::{InvDynConfig, InverseDynamics};
use crate::train::{item_loss, ItemData, ItemDraw, ModelConfig, Planner, TrainConfig};
use crate::vae::{standard_normal, Forcing, Vae, VaeConfig};

pub const HORIZON: usize = 8;
pub const STATE_DIM: usize = 4;
pub const MODEL_DIM: usize = 16;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub component: &'static str,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        egcd: EgcdConfig {
            model_dim: MODEL_DIM,
            heads: 2,
            ffn_mult: 2,
            depth: 1,
            use_cross_attention: true,
        },
        vae: VaeConfig { latent_dim: 4 },
        inverse: InvDynConfig { history: 2, hidden: 8 },
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn egcd(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let net = EgcdNet::new(&mut store, "theta", HORIZON, STATE_DIM, &small_model().egcd, &mut rng)?;
    let x = standard_normal(&[HORIZON, STATE_DIM], &mut rng);
    let target = standard_normal(&[HORIZON, STATE_DIM], &mut rng);
    let cond = Condition::new(uniform(&[HORIZON, STATE_DIM], -1.0, 1.0, &mut rng), 0.8, 0.6)?;
    check_all(&store, |tape| {
        let xv = tape.input(x.clone());
        let y = net.forward(tape, xv, 5, &cond)?;
        let t = tape.input(target.clone());
        tape.mse(y, t)
    })
}

fn vae(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let n = HORIZON * STATE_DIM;
    let vae = Vae::new(&mut store, "phi", n, &small_model().vae, &mut rng)?;
    let x = uniform(&[1, n], -0.9, 0.9, &mut rng);
    let eps = standard_normal(&[1, vae.latent_dim], &mut rng);
    check_all(&store, |tape| {
        let xv = tape.input(x.clone());
        Ok(vae.loss(tape, xv, &eps)?.total)
    })
}

fn inverse(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = small_model().inverse;
    let inv = InverseDynamics::new(&mut store, "psi", STATE_DIM, &cfg, &mut rng)?;
    let rows = 6;
    let inputs = uniform(&[rows, (cfg.history + 2) * STATE_DIM], -1.0, 1.0, &mut rng);
    let actions: Vec<f64> = (0..rows).map(|_| rng.random_range(-0.2..0.2)).collect();
    check_all(&store, |tape| {
        let iv = tape.input(inputs.clone());
        inv.loss(tape, iv, &actions)
    })
}

fn total(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let config = TrainConfig {
        model: small_model(),
        schedule: ScheduleConfig {
            steps: 8,
            ..ScheduleConfig::default()
        },
        xi: 0.7,
        ..TrainConfig::default()
    };
    let planner = Planner::new(&mut store, HORIZON, STATE_DIM, &config, &mut rng)?;
    let full = uniform(&[HORIZON + 1, STATE_DIM], -1.0, 1.0, &mut rng);
    let states = Tensor::matrix(HORIZON, STATE_DIM, full.data()[STATE_DIM..].to_vec())?;
    let expert = uniform(&[HORIZON, STATE_DIM], -0.9, 0.9, &mut rng);
    let actions: Vec<f64> = (0..HORIZON).map(|_| rng.random_range(-0.2..0.2)).collect();
    let item = ItemData {
        states: &states,
        full: &full,
        expert: &expert,
        return_label: 0.7,
        constraint_label: 1.0,
        actions: &actions,
    };
    let draw = ItemDraw {
        sample: 0,
        forcing: Forcing::Decode,
        latent_noise: standard_normal(&[1, planner.vae.latent_dim], &mut rng),
        dropped: false,
        k: 3,
        noise: standard_normal(&[HORIZON, STATE_DIM], &mut rng),
        known: 2,
    };
    check_all(&store, |tape| Ok(item_loss(tape, &planner, &item, &draw, config.xi)?.total))
}

/// Runs the EGCD block, VAE, inverse-dynamics and full-objective checks.
pub fn run(seed: u64) -> Result<Vec<SuiteEntry>> {
    Ok(vec![
        SuiteEntry { component: "egcd", report: egcd(seed)? },
        SuiteEntry { component: "vae", report: vae(seed.wrapping_add(1))? },
        SuiteEntry { component: "inverse_dynamics", report: inverse(seed.wrapping_add(2))? },
        SuiteEntry { component: "total_loss", report: total(seed.wrapping_add(3))? },
    ])
}
