//! VAE over expert state trajectories and the blended-forcing selector.
//!
//! Encoder and decoder are single layers: an affine map to `(mu, log sigma²)`
//! and an affine map with `tanh` back to the normalized state range.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor, Var};
use crate::par::par_map;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig { latent_dim: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlendConfig {
    pub delta: f64,
}

impl Default for BlendConfig {
    fn default() -> Self {
        BlendConfig { delta: 0.4 }
    }
}

impl BlendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::config("train.delta", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Which source feeds the implicit expert condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Forcing {
    Teacher,
    Decode,
}

/// One Bernoulli draw: teacher forcing with probability `delta`.
pub fn blend_choice<R: Rng + ?Sized>(delta: f64, rng: &mut R) -> Forcing {
    let u: f64 = rng.random();
    if u < delta {
        Forcing::Teacher
    } else {
        Forcing::Decode
    }
}

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}

/// `-½ Σ (1 + logvar − mu² − exp(logvar))`, summed over latent dimensions.
pub fn kl_standard_normal(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = tape.square(mu);
    let var = tape.exp(logvar);
    let a = tape.add_scalar(logvar, 1.0);
    let b = tape.sub(a, mu2)?;
    let c = tape.sub(b, var)?;
    let s = tape.sum(c);
    Ok(tape.scale(s, -0.5))
}

#[derive(Debug, Clone, Copy)]
pub struct VaeLoss {
    /// Squared reconstruction error summed over the trajectory.
    pub recon: Var,
    pub kl: Var,
    pub total: Var,
    /// Decoded posterior sample, `1 × input_dim`.
    pub decoded: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    pub input_dim: usize,
    pub latent_dim: usize,
    enc_w: ParamId,
    enc_b: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
}

impl Vae {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        config: &VaeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let dz = config.latent_dim;
        if dz == 0 || input_dim == 0 {
            return Err(Error::config("vae.latent_dim", "dimensions must be positive"));
        }
        Ok(Vae {
            input_dim,
            latent_dim: dz,
            enc_w: store.insert_uniform(format!("{prefix}.enc.w"), input_dim, 2 * dz, rng)?,
            enc_b: store.insert(format!("{prefix}.enc.b"), Tensor::zeros(&[1, 2 * dz]))?,
            dec_w: store.insert_uniform(format!("{prefix}.dec.w"), dz, input_dim, rng)?,
            dec_b: store.insert(format!("{prefix}.dec.b"), Tensor::zeros(&[1, input_dim]))?,
        })
    }

    /// Re-binds to parameters already present in `store`.
    pub fn bind(store: &ParamStore, prefix: &str, input_dim: usize, latent_dim: usize) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(&format!("{prefix}.{n}"))
                .ok_or_else(|| Error::config(format!("{prefix}.{n}"), "missing parameter"))
        };
        Ok(Vae {
            input_dim,
            latent_dim,
            enc_w: get("enc.w")?,
            enc_b: get("enc.b")?,
            dec_w: get("dec.w")?,
            dec_b: get("dec.b")?,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.enc_w, self.enc_b, self.dec_w, self.dec_b]
    }

    fn flat_input(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.value(x).len();
        if n != self.input_dim {
            return Err(Error::shape(
                "vae.encode",
                format!("expected {} inputs, got {}", self.input_dim, n),
            ));
        }
        tape.reshape(x, &[1, n])
    }

    /// `(mu, log sigma²)`, each `1 × latent_dim`.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let flat = self.flat_input(tape, x)?;
        let h = tape.dense(flat, self.enc_w, self.enc_b)?;
        let mu = tape.slice_cols(h, 0, self.latent_dim)?;
        let logvar = tape.slice_cols(h, self.latent_dim, self.latent_dim)?;
        Ok((mu, logvar))
    }

    pub fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        if tape.value(z).len() != self.latent_dim {
            return Err(Error::shape(
                "vae.decode",
                format!("expected latent of {}, got {:?}", self.latent_dim, tape.value(z).shape()),
            ));
        }
        let z = tape.reshape(z, &[1, self.latent_dim])?;
        let h = tape.dense(z, self.dec_w, self.dec_b)?;
        Ok(tape.tanh(h))
    }

    /// Reparameterized pass `z = mu + sigma·eps` with the expert-loss terms.
    pub fn loss(&self, tape: &mut Tape, x: Var, eps: &Tensor) -> Result<VaeLoss> {
        let (mu, logvar) = self.encode(tape, x)?;
        let half = tape.scale(logvar, 0.5);
        let sigma = tape.exp(half);
        let e = tape.input(eps.reshape(&[1, self.latent_dim])?);
        let se = tape.mul(sigma, e)?;
        let z = tape.add(mu, se)?;
        let decoded = self.decode(tape, z)?;
        let flat = tape.reshape(x, &[1, self.input_dim])?;
        let d = tape.sub(decoded, flat)?;
        let sq = tape.square(d);
        let recon = tape.sum(sq);
        let kl = kl_standard_normal(tape, mu, logvar)?;
        let total = tape.add(recon, kl)?;
        Ok(VaeLoss {
            recon,
            kl,
            total,
            decoded,
        })
    }

    /// `(mu, sigma)` for a concrete input.
    pub fn encode_values(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new(store);
        let xv = tape.input(x.clone());
        let (mu, logvar) = self.encode(&mut tape, xv)?;
        let sigma = tape.value(logvar).map(|v| (0.5 * v).exp());
        Ok((tape.value(mu).clone(), sigma))
    }

    /// Decoded trajectory reshaped to `shape`.
    pub fn decode_values(&self, store: &ParamStore, z: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if !z.is_finite() {
            return Err(Error::NonFinite {
                context: "vae latent".into(),
            });
        }
        let mut tape = Tape::new(store);
        let zv = tape.input(z.clone());
        let out = self.decode(&mut tape, zv)?;
        tape.value(out).reshape(shape)
    }

    /// Decode of a posterior sample of `x`.
    pub fn reconstruct_sample<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        x: &Tensor,
        rng: &mut R,
    ) -> Result<Tensor> {
        let (mu, sigma) = self.encode_values(store, x)?;
        let eps = standard_normal(&[1, self.latent_dim], rng);
        let noise = sigma.zip_map(&eps, |s, e| s * e);
        let z = mu.zip_map(&noise, |m, n| m + n);
        self.decode_values(store, &z, x.shape())
    }

    /// Blended forcing: `x_e` itself with probability `delta`, otherwise the
    /// decode of a posterior sample.
    pub fn blend<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        x_e: &Tensor,
        delta: f64,
        rng: &mut R,
    ) -> Result<(Tensor, Forcing)> {
        match blend_choice(delta, rng) {
            Forcing::Teacher => Ok((x_e.clone(), Forcing::Teacher)),
            Forcing::Decode => Ok((self.reconstruct_sample(store, x_e, rng)?, Forcing::Decode)),
        }
    }

    /// Expert loss value for a concrete input and fixed noise.
    pub fn loss_value(&self, store: &ParamStore, x: &Tensor, eps: &Tensor) -> Result<(f64, f64)> {
        let mut tape = Tape::new(store);
        let xv = tape.input(x.clone());
        let l = self.loss(&mut tape, xv, eps)?;
        let (r, k) = (tape.value(l.recon).item(), tape.value(l.kl).item());
        if !(r.is_finite() && k.is_finite()) {
            return Err(Error::NonFinite {
                context: "expert loss".into(),
            });
        }
        Ok((r, k))
    }
}

/// Batch-mean expert-loss terms of one [`fit_vae`] step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeStep {
    pub recon: f64,
    pub kl: f64,
}

/// Trains the VAE alone on flattened trajectories with Adam, one full batch
/// per step.
pub fn fit_vae<R: Rng + ?Sized>(
    vae: &Vae,
    store: &mut ParamStore,
    data: &[Tensor],
    steps: usize,
    lr: f64,
    rng: &mut R,
) -> Result<Vec<VaeStep>> {
    if data.is_empty() {
        return Err(Error::Input("no trajectories to fit".into()));
    }
    let mut adam = Adam::new(AdamConfig { lr, ..AdamConfig::default() }, store);
    let scale = 1.0 / data.len() as f64;
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let noise: Vec<Tensor> = data.iter().map(|_| standard_normal(&[1, vae.latent_dim], rng)).collect();
        let items: Vec<(&Tensor, &Tensor)> = data.iter().zip(&noise).collect();
        let snapshot = &*store;
        let per_item = par_map(&items, |(x, eps)| -> Result<(f64, f64, Vec<Option<Tensor>>)> {
            let mut tape = Tape::new(snapshot);
            let xv = tape.input(x.reshape(&[1, vae.input_dim])?);
            let l = vae.loss(&mut tape, xv, eps)?;
            let (r, k) = (tape.value(l.recon).item(), tape.value(l.kl).item());
            Ok((r, k, tape.backward(l.total)?.into_param_grads()))
        });
        let mut step = VaeStep { recon: 0.0, kl: 0.0 };
        for r in per_item {
            let (rec, kl, grads) = r?;
            step.recon += rec * scale;
            step.kl += kl * scale;
            store.accumulate(&grads, scale);
        }
        if !(step.recon.is_finite() && step.kl.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("expert loss at vae step {}", history.len() + 1),
            });
        }
        adam.step(store)?;
        history.push(step);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_all, Adam, AdamConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vae(input: usize, dz: usize, seed: u64) -> (ParamStore, Vae) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Vae::new(&mut store, "phi", input, &VaeConfig { latent_dim: dz }, &mut rng).unwrap();
        (store, v)
    }

    #[test]
    fn zero_encoder_gives_standard_posterior() {
        let (mut store, v) = vae(6, 3, 0);
        store.zero_values();
        let x = Tensor::matrix(2, 3, vec![0.3, -0.2, 0.9, 0.1, 0.0, -1.0]).unwrap();
        let (mu, sigma) = v.encode_values(&store, &x).unwrap();
        assert!(mu.data().iter().all(|&m| m == 0.0));
        assert!(sigma.data().iter().all(|&s| s == 1.0));
        let out = v.decode_values(&store, &Tensor::row_vector(vec![1.0, 2.0, 3.0]), &[2, 3]).unwrap();
        assert!(out.data().iter().all(|&o| o == 0.0));
    }

    #[test]
    fn wrong_input_dimension_is_shape_error() {
        let (store, v) = vae(6, 3, 0);
        let err = v.encode_values(&store, &Tensor::zeros(&[1, 5])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn kl_closed_forms() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let mu = tape.input(Tensor::row_vector(vec![0.0, 0.0]));
        let lv = tape.input(Tensor::row_vector(vec![0.0, 0.0]));
        let kl = kl_standard_normal(&mut tape, mu, lv).unwrap();
        assert_eq!(tape.value(kl).item(), 0.0);
        let mu = tape.input(Tensor::row_vector(vec![1.0]));
        let lv = tape.input(Tensor::row_vector(vec![0.0]));
        let kl = kl_standard_normal(&mut tape, mu, lv).unwrap();
        assert!((tape.value(kl).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn perfect_reconstruction_at_prior_has_zero_loss() {
        let (mut store, v) = vae(4, 2, 1);
        store.zero_values();
        let x = Tensor::zeros(&[1, 4]);
        let (r, k) = v.loss_value(&store, &x, &Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(r + k, 0.0);
    }

    #[test]
    fn blend_boundaries() {
        let (store, v) = vae(4, 2, 2);
        let x = Tensor::row_vector(vec![0.5, -0.5, 0.25, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (out, f) = v.blend(&store, &x, 1.0, &mut rng).unwrap();
            assert_eq!(f, Forcing::Teacher);
            assert_eq!(out, x);
            let (_, f) = v.blend(&store, &x, 0.0, &mut rng).unwrap();
            assert_eq!(f, Forcing::Decode);
        }
    }

    #[test]
    fn blend_fraction_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let tf = (0..n)
            .filter(|_| blend_choice(0.5, &mut rng) == Forcing::Teacher)
            .count();
        assert!((tf as f64 / n as f64 - 0.5).abs() <= 0.02);
    }

    #[test]
    fn different_latents_decode_differently() {
        let (store, v) = vae(6, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = v.decode_values(&store, &standard_normal(&[1, 3], &mut rng), &[1, 6]).unwrap();
        let b = v.decode_values(&store, &standard_normal(&[1, 3], &mut rng), &[1, 6]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (store, v) = vae(8, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = standard_normal(&[2, 4], &mut rng).map(|t| 0.5 * t.tanh());
        let eps = standard_normal(&[1, 3], &mut rng);
        let report = check_all(&store, |tape| {
            let xv = tape.input(x.clone());
            Ok(v.loss(tape, xv, &eps)?.total)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn overfits_single_point() {
        let (mut store, v) = vae(8, 4, 8);
        let x = Tensor::row_vector(vec![0.5, -0.3, 0.1, 0.8, -0.6, 0.0, 0.2, -0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut adam = Adam::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() }, &store);
        for _ in 0..1500 {
            let eps = standard_normal(&[1, 4], &mut rng);
            let grads = {
                let mut tape = Tape::new(&store);
                let xv = tape.input(x.clone());
                let l = v.loss(&mut tape, xv, &eps).unwrap();
                tape.backward(l.total).unwrap().into_param_grads()
            };
            store.accumulate(&grads, 1.0);
            adam.step(&mut store).unwrap();
        }
        let (mu, _) = v.encode_values(&store, &x).unwrap();
        let rec = v.decode_values(&store, &mu, &[1, 8]).unwrap();
        let mse = rec.zip_map(&x, |a, b| (a - b).powi(2)).mean();
        assert!(mse < 1e-2, "mse {mse}");
    }
}
