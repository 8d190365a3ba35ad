//! Noise schedule, forward marginals, the x0-parameterized posterior and the
//! guided skip-step reverse sampler with history inpainting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::egcd::{Condition, EgcdNet};
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::vae::standard_normal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 32,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear β schedule. Index `k` runs over `1..=K`; `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        Self::linear(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("train.schedule.steps", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(
                "train.schedule.beta_start",
                format!("need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"),
            ));
        }
        let mut betas = Vec::with_capacity(steps);
        for i in 0..steps {
            let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            betas.push(beta_start + (beta_end - beta_start) * frac);
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for (k, a) in alphas.iter().enumerate() {
            alpha_bars.push(alpha_bars[k] * a);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::Input(format!(
                "diffusion step {k} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `x_k = sqrt(abar_k) x_0 + sqrt(1 - abar_k) eps`.
    pub fn q_sample(&self, x0: &Tensor, k: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_step(k)?;
        if !x0.same_shape(eps) {
            return Err(Error::shape(
                "q_sample",
                format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()),
            ));
        }
        let ab = self.alpha_bar(k);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.zip_map(eps, |x, e| a * x + b * e))
    }

    /// Posterior mean and variance of `x_j` given `x_k` and a clean
    /// prediction, for `0 <= j < k`. For `j = k - 1` this is the one-step
    /// posterior with variance `beta_k (1 - abar_{k-1}) / (1 - abar_k)`.
    pub fn posterior(&self, x0_hat: &Tensor, x_k: &Tensor, k: usize, j: usize) -> Result<(Tensor, f64)> {
        self.check_step(k)?;
        if j >= k {
            return Err(Error::Input(format!("posterior target step {j} must be below {k}")));
        }
        if !x0_hat.same_shape(x_k) {
            return Err(Error::shape(
                "posterior",
                format!("x0 {:?} vs x_k {:?}", x0_hat.shape(), x_k.shape()),
            ));
        }
        let ab_k = self.alpha_bar(k);
        let ab_j = self.alpha_bar(j);
        let (a, b) = if j + 1 == k {
            (self.alpha(k), self.beta(k))
        } else {
            let r = ab_k / ab_j;
            (r, 1.0 - r)
        };
        let sk = ab_k.sqrt();
        let nk = (1.0 - ab_k).sqrt();
        let c0 = ab_j.sqrt();
        let ce = (1.0 - ab_j) * a.sqrt() / nk;
        let mean = x_k.zip_map(x0_hat, |xk, x0| {
            let eps = (xk - sk * x0) / nk;
            c0 * x0 + ce * eps
        });
        let var = b * (1.0 - ab_j) / (1.0 - ab_k);
        Ok((mean, var))
    }
}

/// Visited `(k, next)` pairs from `K` down to 0 with stride `gamma`; the last
/// stride is shortened when `gamma` does not divide `K`.
pub fn ladder(steps: usize, gamma: usize) -> Vec<(usize, usize)> {
    let gamma = gamma.max(1);
    let mut out = Vec::with_capacity(steps.div_ceil(gamma));
    let mut k = steps;
    while k > 0 {
        let j = k.saturating_sub(gamma);
        out.push((k, j));
        k = j;
    }
    out
}

/// Denoiser evaluations of one guided sampling pass.
pub fn evals_per_plan(steps: usize, gamma: usize) -> usize {
    2 * steps.div_ceil(gamma.max(1))
}

/// `uncond + omega (cond - uncond)`.
pub fn cfg_combine(uncond: &Tensor, cond: &Tensor, omega: f64) -> Result<Tensor> {
    if !uncond.same_shape(cond) {
        return Err(Error::shape(
            "cfg_combine",
            format!("{:?} vs {:?}", uncond.shape(), cond.shape()),
        ));
    }
    Ok(uncond.zip_map(cond, |u, c| u + omega * (c - u)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub gamma: usize,
    pub omega: f64,
    pub temperature: f64,
    /// Clamp guided clean predictions to the normalized range `[-1, 1]`.
    pub clip_x0: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            gamma: 4,
            omega: 1.5,
            temperature: 0.5,
            clip_x0: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(Error::config("sampler.gamma", "must be at least 1"));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::config("sampler.omega", format!("{} must be >= 0", self.omega)));
        }
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return Err(Error::config(
                "sampler.temperature",
                format!("{} outside (0, 1]", self.temperature),
            ));
        }
        Ok(())
    }
}

/// Anything that predicts the clean trajectory from a noisy one.
pub trait Denoiser {
    fn predict_x0(&self, x_k: &Tensor, k: usize, cond: &Condition) -> Result<Tensor>;
}

/// A network bound to its parameters.
#[derive(Debug, Clone, Copy)]
pub struct NetDenoiser<'a> {
    pub net: &'a EgcdNet,
    pub store: &'a ParamStore,
}

impl Denoiser for NetDenoiser<'_> {
    fn predict_x0(&self, x_k: &Tensor, k: usize, cond: &Condition) -> Result<Tensor> {
        self.net.predict(self.store, x_k, k, cond)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub trajectory: Tensor,
    pub evals: usize,
}

/// Overwrites the first rows of `x` with `history`.
pub fn inpaint(x: &mut Tensor, history: &Tensor) -> Result<()> {
    if history.is_empty() {
        return Ok(());
    }
    if history.cols() != x.cols() || history.rows() > x.rows() {
        return Err(Error::shape(
            "inpaint",
            format!("history {:?} into {:?}", history.shape(), x.shape()),
        ));
    }
    let n = history.len();
    x.data_mut()[..n].copy_from_slice(history.data());
    Ok(())
}

/// Guided reverse sampling from `x_K ~ N(0, I)` along the stride-`gamma`
/// ladder. `history` holds the known leading rows (possibly none).
#[allow(clippy::too_many_arguments)]
pub fn sample_reverse<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    cond: &Condition,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    history: &Tensor,
    shape: [usize; 2],
    rng: &mut R,
) -> Result<Sample> {
    cfg.validate()?;
    let uncond = cond.dropped();
    let mut x = standard_normal(&shape, rng);
    let mut evals = 0;
    for (k, j) in ladder(schedule.steps(), cfg.gamma) {
        inpaint(&mut x, history)?;
        let pu = denoiser.predict_x0(&x, k, &uncond)?;
        let pc = denoiser.predict_x0(&x, k, cond)?;
        evals += 2;
        let mut x0 = cfg_combine(&pu, &pc, cfg.omega)?;
        if cfg.clip_x0 {
            x0 = x0.map(|v| v.clamp(-1.0, 1.0));
        }
        if !x0.is_finite() {
            return Err(Error::NonFinite {
                context: format!("guided prediction at diffusion step {k}"),
            });
        }
        let (mean, var) = schedule.posterior(&x0, &x, k, j)?;
        x = if j == 0 {
            mean
        } else {
            let std = (cfg.temperature * var).sqrt();
            let z = standard_normal(&shape, rng);
            mean.zip_map(&z, |m, e| m + std * e)
        };
    }
    inpaint(&mut x, history)?;
    Ok(Sample { trajectory: x, evals })
}

/// Mean squared clean-trajectory error of `denoiser` over `(x_0, condition)`
/// pairs with uniform step draws and condition dropout.
pub fn ddpm_loss<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    batch: &[(Tensor, Condition)],
    schedule: &NoiseSchedule,
    p_uncond: f64,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty diffusion batch".into()));
    }
    let mut total = 0.0;
    for (x0, cond) in batch {
        let k = rng.random_range(1..=schedule.steps());
        let eps = standard_normal(x0.shape(), rng);
        let drop = rng.random::<f64>() < p_uncond;
        let xk = schedule.q_sample(x0, k, &eps)?;
        let c = if drop { cond.dropped() } else { cond.clone() };
        let pred = denoiser.predict_x0(&xk, k, &c)?;
        total += pred.zip_map(x0, |p, t| (p - t) * (p - t)).mean();
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "diffusion loss".into(),
        });
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_examples() {
        let s = NoiseSchedule::linear(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.81).abs() < 1e-15);
        let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 0.3);
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        // Independent product in log space.
        let log: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        assert!(log.exp() < 5e-5);
        assert!((s.alpha_bar(1000) / log.exp() - 1.0).abs() < 1e-9);
        assert!(NoiseSchedule::linear(0, 0.1, 0.1).is_err());
        assert!(NoiseSchedule::linear(4, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(4, 0.0, 0.1).is_err());
    }

    #[test]
    fn recursion_is_exact() {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        for k in 1..=s.steps() {
            assert_eq!(s.alpha_bar(k), s.alpha_bar(k - 1) * s.alpha(k));
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
            assert!(s.beta(k) > 0.0 && s.beta(k) < 1.0);
        }
    }

    #[test]
    fn q_sample_limits() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let x0 = Tensor::row_vector(vec![1.0, -2.0]);
        let z = Tensor::zeros(&[1, 2]);
        let xk = s.q_sample(&x0, 10, &z).unwrap();
        assert_eq!(xk.data(), &[s.alpha_bar(10).sqrt(), -2.0 * s.alpha_bar(10).sqrt()]);
        let e = Tensor::row_vector(vec![0.3, 0.7]);
        assert!(s.q_sample(&x0, 1000, &e).unwrap().max_abs_diff(&e) < 2e-2);
        assert!(s.q_sample(&x0, 1001, &e).is_err());
        assert!(s.q_sample(&x0, 5, &Tensor::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn posterior_matches_q_posterior() {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = standard_normal(&[3, 2], &mut rng);
        for k in 2..=32 {
            let eps = standard_normal(&[3, 2], &mut rng);
            let xk = s.q_sample(&x0, k, &eps).unwrap();
            let (mean, var) = s.posterior(&x0, &xk, k, k - 1).unwrap();
            // Closed form of q(x_{k-1} | x_k, x_0).
            let (ab, abp, a, b) = (s.alpha_bar(k), s.alpha_bar(k - 1), s.alpha(k), s.beta(k));
            let expect = x0.zip_map(&xk, |x0, xk| {
                abp.sqrt() * b / (1.0 - ab) * x0 + a.sqrt() * (1.0 - abp) / (1.0 - ab) * xk
            });
            assert!(mean.max_abs_diff(&expect) < 1e-12, "k={k}");
            assert!((var - b * (1.0 - abp) / (1.0 - ab)).abs() < 1e-15);
        }
    }

    #[test]
    fn stride_posterior_matches_q_posterior() {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = standard_normal(&[2, 2], &mut rng);
        let eps = standard_normal(&[2, 2], &mut rng);
        for (k, j) in [(32, 28), (9, 1), (5, 0), (17, 1)] {
            let xk = s.q_sample(&x0, k, &eps).unwrap();
            let (mean, var) = s.posterior(&x0, &xk, k, j).unwrap();
            let (ab, abj) = (s.alpha_bar(k), s.alpha_bar(j));
            let expect = x0.zip_map(&xk, |x0, xk| {
                abj.sqrt() * (1.0 - ab / abj) / (1.0 - ab) * x0
                    + (ab / abj).sqrt() * (1.0 - abj) / (1.0 - ab) * xk
            });
            assert!(mean.max_abs_diff(&expect) < 1e-12);
            assert!((var - (1.0 - ab / abj) * (1.0 - abj) / (1.0 - ab)).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_boundaries() {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let x0 = Tensor::row_vector(vec![0.4, -0.1]);
        let xk = Tensor::row_vector(vec![1.3, 0.2]);
        let (mean, var) = s.posterior(&x0, &xk, 1, 0).unwrap();
        assert!(mean.max_abs_diff(&x0) < 1e-15);
        assert_eq!(var, 0.0);
        let tiny = NoiseSchedule::linear(4, 1e-12, 1e-12).unwrap();
        let (mean, _) = tiny.posterior(&xk, &xk, 3, 2).unwrap();
        assert!(mean.max_abs_diff(&xk) < 1e-6);
        assert!(s.posterior(&x0, &xk, 3, 3).is_err());
        assert!(s.posterior(&x0, &xk, 0, 0).is_err());
    }

    #[test]
    fn ladder_arithmetic() {
        assert_eq!(ladder(32, 4).len(), 8);
        assert_eq!(ladder(32, 32), vec![(32, 0)]);
        assert_eq!(ladder(10, 4), vec![(10, 6), (6, 2), (2, 0)]);
        let one = ladder(5, 1);
        assert_eq!(one, vec![(5, 4), (4, 3), (3, 2), (2, 1), (1, 0)]);
        let counts: Vec<_> = [1, 2, 4, 8, 16].iter().map(|&g| evals_per_plan(32, g)).collect();
        assert_eq!(counts, vec![64, 32, 16, 8, 4]);
    }

    #[test]
    fn cfg_examples() {
        let u = Tensor::row_vector(vec![0.0]);
        let c = Tensor::row_vector(vec![1.0]);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 2.0).unwrap().item(), 2.0);
    }

    struct Oracle(Tensor);

    impl Denoiser for Oracle {
        fn predict_x0(&self, _: &Tensor, _: usize, _: &Condition) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn ddpm_loss_examples() {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = standard_normal(&[4, 3], &mut rng);
        let c = Condition::null(4, 3);
        let batch = vec![(x0.clone(), c)];
        assert_eq!(ddpm_loss(&Oracle(x0.clone()), &batch, &s, 0.1, &mut rng).unwrap(), 0.0);
        let zero = Oracle(Tensor::zeros(&[4, 3]));
        let l = ddpm_loss(&zero, &batch, &s, 0.1, &mut rng).unwrap();
        let ms = x0.data().iter().map(|v| v * v).sum::<f64>() / 12.0;
        assert!((l - ms).abs() < 1e-14);
        assert!(ddpm_loss(&zero, &[], &s, 0.1, &mut rng).is_err());
    }
}
