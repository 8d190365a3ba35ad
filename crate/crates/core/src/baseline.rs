//! Baseline bidders: PID budget pacing and behavior cloning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor};
use crate::data::{Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::io::Checkpoint;

/// Multiplicative budget-pacing controller: the coefficient is
/// `initial * exp(-u)` with `u` the PID output on the gap between the spent
/// budget fraction and the elapsed time fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidGains {
    pub initial: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        PidGains {
            initial: 0.3,
            kp: 2.0,
            ki: 0.2,
            kd: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PidController {
    gains: PidGains,
    integral: f64,
    prev: f64,
}

impl PidController {
    pub fn new(gains: PidGains) -> Self {
        PidController {
            gains,
            integral: 0.0,
            prev: 0.0,
        }
    }

    /// Next coefficient from the spent budget fraction after `elapsed` of
    /// the episode.
    pub fn next(&mut self, spent_frac: f64, elapsed: f64) -> f64 {
        let e = spent_frac - elapsed;
        self.integral += e;
        let d = e - self.prev;
        self.prev = e;
        let g = self.gains;
        let u = g.kp * e + g.ki * self.integral + g.kd * d;
        (g.initial * (-u).exp()).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            hidden: 64,
            steps: 2000,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// MLP from the normalized current state to the coefficient change.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorClone {
    pub store: ParamStore,
    pub norm: Normalizer,
    w0: ParamId,
    b0: ParamId,
    w1: ParamId,
    b1: ParamId,
}

impl BehaviorClone {
    pub fn new(state_dim: usize, hidden: usize, norm: Normalizer, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let w0 = store.insert_uniform("bc.mlp0.w", state_dim, hidden, rng)?;
        let b0 = store.insert("bc.mlp0.b", Tensor::zeros(&[1, hidden]))?;
        let w1 = store.insert_uniform("bc.mlp1.w", hidden, 1, rng)?;
        let b1 = store.insert("bc.mlp1.b", Tensor::zeros(&[1, 1]))?;
        Ok(BehaviorClone {
            store,
            norm,
            w0,
            b0,
            w1,
            b1,
        })
    }

    fn loss(&self, store: &ParamStore, x: &Tensor, y: &Tensor) -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new(store);
        let xv = tape.input(x.clone());
        let h = tape.dense(xv, self.w0, self.b0)?;
        let h = tape.gelu(h);
        let p = tape.dense(h, self.w1, self.b1)?;
        let yv = tape.input(y.clone());
        let l = tape.mse(p, yv)?;
        let v = tape.value(l).item();
        Ok((v, tape.backward(l)?.into_param_grads()))
    }

    /// Action for a raw state.
    pub fn act(&self, state: &[f64]) -> Result<f64> {
        let x = Tensor::row_vector(self.norm.normalize(state));
        let mut tape = Tape::new(&self.store);
        let xv = tape.input(x);
        let h = tape.dense(xv, self.w0, self.b0)?;
        let h = tape.gelu(h);
        let p = tape.dense(h, self.w1, self.b1)?;
        let a = tape.value(p).item();
        if !a.is_finite() {
            return Err(Error::NonFinite {
                context: "behavior-clone action".into(),
            });
        }
        Ok(a)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: serde_json::json!({
                "kind": "bc",
                "state_dim": self.norm.dim(),
                "hidden": self.store.value(self.b0).len(),
                "norm": self.norm,
            }),
            tensors: self.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint { offset: 16, reason };
        if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some("bc") {
            return Err(bad("not a behavior-clone checkpoint".into()));
        }
        let norm: Normalizer = serde_json::from_value(ckpt.meta["norm"].clone())
            .map_err(|e| bad(format!("normalizer: {e}")))?;
        let hidden = ckpt.meta["hidden"].as_u64().ok_or_else(|| bad("missing hidden width".into()))? as usize;
        let mut bc = BehaviorClone::new(norm.dim(), hidden, norm, &mut ChaCha8Rng::seed_from_u64(0))?;
        let ids: Vec<_> = bc.store.ids().collect();
        for id in ids {
            let name = bc.store.get(id).name.clone();
            let t = ckpt.tensor(&name).ok_or_else(|| bad(format!("tensor {name} missing")))?;
            if t.shape() != bc.store.value(id).shape() {
                return Err(bad(format!("tensor {name} has shape {:?}", t.shape())));
            }
            *bc.store.value_mut(id) = t.clone();
        }
        Ok(bc)
    }
}

/// Fits the clone on every `(s_t, a_t)` pair of the dataset.
pub fn train_bc(ds: &Dataset, cfg: &BcConfig) -> Result<(BehaviorClone, Vec<f64>)> {
    if cfg.hidden == 0 || cfg.batch_size == 0 {
        return Err(Error::config("eval.behavior_clone", "hidden and batch_size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bc = BehaviorClone::new(ds.state_dim, cfg.hidden, ds.norm.clone(), &mut rng)?;
    let mut xs: Vec<&[f64]> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in &ds.samples {
        for t in 0..ds.horizon {
            xs.push(if t == 0 { &ds.initial_state } else { s.states.row(t - 1) });
            ys.push(s.actions[t]);
        }
    }
    if xs.is_empty() {
        return Err(Error::Input("no state-action pairs to clone".into()));
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &bc.store,
    );
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..xs.len())).collect();
        let mut xd = Vec::with_capacity(cfg.batch_size * ds.state_dim);
        for &i in &idx {
            xd.extend_from_slice(xs[i]);
        }
        let x = Tensor::matrix(cfg.batch_size, ds.state_dim, xd)?;
        let y = Tensor::matrix(cfg.batch_size, 1, idx.iter().map(|&i| ys[i]).collect())?;
        let (l, grads) = bc.loss(&bc.store, &x, &y)?;
        bc.store.zero_grads();
        bc.store.accumulate(&grads, 1.0);
        adam.step(&mut bc.store)?;
        losses.push(l);
    }
    Ok((bc, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gain_pid_is_constant() {
        let mut pid = PidController::new(PidGains {
            initial: 0.4,
            kp: 0.0,
            ki: 0.0,
            kd: 0.0,
        });
        for t in 0..10 {
            assert_eq!(pid.next(0.9, t as f64 / 10.0), 0.4);
        }
    }

    #[test]
    fn overspending_lowers_the_coefficient() {
        let mut pid = PidController::new(PidGains::default());
        assert!(pid.next(0.5, 0.1) < 0.3);
        let mut pid = PidController::new(PidGains::default());
        assert!(pid.next(0.0, 0.5) > 0.3);
    }
}
