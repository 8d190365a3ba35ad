use egdp_core::autodiff::{ParamStore, Tensor};
use egdp_core::diffusion::{Denoiser, NoiseSchedule, SamplerConfig};
use egdp_core::egcd::{Condition, EgcdConfig, EgcdNet};
use egdp_core::vae::standard_normal;
use egdp_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn small_net(t: usize, ds: usize) -> (ParamStore, EgcdNet) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = EgcdConfig {
        model_dim: 8,
        heads: 2,
        ffn_mult: 2,
        depth: 1,
        use_cross_attention: true,
    };
    let net = EgcdNet::new(&mut store, "theta", t, ds, &cfg, &mut rng).unwrap();
    // Give the null condition its own value so guidance is not trivial.
    let id = store.id("theta.null_condition").unwrap();
    *store.value_mut(id) = standard_normal(&[1, t * ds + 2], &mut rng);
    (store, net)
}

pub fn condition(t: usize, ds: usize) -> Condition {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    Condition::new(standard_normal(&[t, ds], &mut rng).map(|v| 0.5 * v), 0.9, 1.0).unwrap()
}

/// Step-by-step DDPM sampler written directly from the one-step posterior.
pub fn reference_sampler(
    den: &dyn Denoiser,
    cond: &Condition,
    s: &NoiseSchedule,
    cfg: &SamplerConfig,
    history: &Tensor,
    shape: [usize; 2],
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let overwrite = |x: &mut Tensor| {
        for r in 0..history.rows() {
            x.row_mut(r).copy_from_slice(history.row(r));
        }
    };
    let mut x = standard_normal(&shape, rng);
    for k in (1..=s.steps()).rev() {
        overwrite(&mut x);
        let u = den.predict_x0(&x, k, &cond.dropped())?;
        let c = den.predict_x0(&x, k, cond)?;
        let mut x0 = u.zip_map(&c, |u, c| u + cfg.omega * (c - u));
        if cfg.clip_x0 {
            x0 = x0.map(|v| v.clamp(-1.0, 1.0));
        }
        let (ab, abp, a, b) = (s.alpha_bar(k), s.alpha_bar(k - 1), s.alpha(k), s.beta(k));
        let (sk, nk) = (ab.sqrt(), (1.0 - ab).sqrt());
        let coef_eps = (1.0 - abp) * a.sqrt() / nk;
        let mean = x.zip_map(&x0, |xk, x0| abp.sqrt() * x0 + coef_eps * ((xk - sk * x0) / nk));
        x = if k > 1 {
            let sd = (cfg.temperature * (b * (1.0 - abp) / (1.0 - ab))).sqrt();
            let z = standard_normal(&shape, rng);
            mean.zip_map(&z, |m, e| m + sd * e)
        } else {
            mean
        };
    }
    overwrite(&mut x);
    Ok(x)
}

/// Mean and sample variance of `q(x_k | x_0)` draws at a scalar `x0`.
pub fn forward_moments(s: &NoiseSchedule, x0: f64, k: usize, n: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let x = Tensor::row_vector(vec![x0]);
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let e = standard_normal(&[1, 1], rng);
            s.q_sample(&x, k, &e).unwrap().item()
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var)
}
