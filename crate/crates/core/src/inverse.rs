//! Inverse dynamics head: a state window plus the planned next state map to
//! the bid-coefficient change that reaches it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvDynConfig {
    pub history: usize,
    pub hidden: usize,
}

impl Default for InvDynConfig {
    fn default() -> Self {
        InvDynConfig {
            history: 4,
            hidden: 64,
        }
    }
}

impl InvDynConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.history == 0 || self.history + 1 > horizon {
            return Err(Error::config(
                "train.inverse.history",
                format!("{} must be in 1..{horizon}", self.history),
            ));
        }
        if self.hidden == 0 {
            return Err(Error::config("train.inverse.hidden", "must be positive"));
        }
        Ok(())
    }
}

/// Rows `s_{t-h..=t}` of `states` (which holds `s_0..`), repeating `s_0`
/// where the window reaches before the start.
pub fn history_window(states: &Tensor, t: usize, h: usize) -> Result<Tensor> {
    if t >= states.rows() {
        return Err(Error::shape(
            "history_window",
            format!("state {t} requested from {} rows", states.rows()),
        ));
    }
    let cols = states.cols();
    let mut data = Vec::with_capacity((h + 1) * cols);
    for i in 0..=h {
        let idx = (t + i).saturating_sub(h);
        data.extend_from_slice(states.row(idx));
    }
    Tensor::matrix(h + 1, cols, data)
}

/// Executed coefficient after applying an action.
pub fn apply_action(coefficient: f64, action: f64) -> f64 {
    (coefficient + action).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseDynamics {
    pub config: InvDynConfig,
    pub state_dim: usize,
    w0: ParamId,
    b0: ParamId,
    w1: ParamId,
    b1: ParamId,
}

impl InverseDynamics {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        state_dim: usize,
        config: &InvDynConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let input = (config.history + 2) * state_dim;
        Ok(InverseDynamics {
            config: *config,
            state_dim,
            w0: store.insert_uniform(format!("{prefix}.mlp0.w"), input, config.hidden, rng)?,
            b0: store.insert(format!("{prefix}.mlp0.b"), Tensor::zeros(&[1, config.hidden]))?,
            w1: store.insert_uniform(format!("{prefix}.mlp1.w"), config.hidden, 1, rng)?,
            b1: store.insert(format!("{prefix}.mlp1.b"), Tensor::zeros(&[1, 1]))?,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str, state_dim: usize, config: &InvDynConfig) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(&format!("{prefix}.{n}"))
                .ok_or_else(|| Error::config(format!("{prefix}.{n}"), "missing parameter"))
        };
        Ok(InverseDynamics {
            config: *config,
            state_dim,
            w0: get("mlp0.w")?,
            b0: get("mlp0.b")?,
            w1: get("mlp1.w")?,
            b1: get("mlp1.b")?,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w0, self.b0, self.w1, self.b1]
    }

    fn input_len(&self) -> usize {
        (self.config.history + 2) * self.state_dim
    }

    /// Batched forward: `inputs` holds one flattened `window ⊕ next` per row.
    pub fn forward(&self, tape: &mut Tape, inputs: Var) -> Result<Var> {
        let x = tape.value(inputs);
        if x.cols() != self.input_len() {
            return Err(Error::shape(
                "inverse_dynamics",
                format!("expected rows of {}, got {:?}", self.input_len(), x.shape()),
            ));
        }
        let h = tape.dense(inputs, self.w0, self.b0)?;
        let h = tape.gelu(h);
        tape.dense(h, self.w1, self.b1)
    }

    /// Flattened network input for one decision.
    pub fn input_row(&self, window: &Tensor, next: &[f64]) -> Result<Vec<f64>> {
        let h = self.config.history;
        if window.rows() != h + 1 || window.cols() != self.state_dim || next.len() != self.state_dim {
            return Err(Error::shape(
                "inverse_dynamics",
                format!(
                    "window {:?} and next state of {}, expected [{}, {}]",
                    window.shape(),
                    next.len(),
                    h + 1,
                    self.state_dim
                ),
            ));
        }
        let mut row = window.data().to_vec();
        row.extend_from_slice(next);
        Ok(row)
    }

    pub fn predict_action(&self, store: &ParamStore, window: &Tensor, next: &[f64]) -> Result<f64> {
        let row = self.input_row(window, next)?;
        let mut tape = Tape::new(store);
        let x = tape.input(Tensor::row_vector(row));
        let y = self.forward(&mut tape, x)?;
        let a = tape.value(y).item();
        if !a.is_finite() {
            return Err(Error::NonFinite {
                context: "inverse dynamics action".into(),
            });
        }
        Ok(a)
    }

    /// Mean squared action error over rows of `inputs` against `actions`.
    pub fn loss(&self, tape: &mut Tape, inputs: Var, actions: &[f64]) -> Result<Var> {
        let pred = self.forward(tape, inputs)?;
        let target = tape.input(Tensor::matrix(actions.len(), 1, actions.to_vec())?);
        tape.mse(pred, target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_all, Adam, AdamConfig};
    use crate::vae::standard_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(ds: usize, h: usize, hidden: usize) -> (ParamStore, InverseDynamics) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = InvDynConfig { history: h, hidden };
        let net = InverseDynamics::new(&mut store, "psi", ds, &cfg, &mut rng).unwrap();
        (store, net)
    }

    #[test]
    fn window_padding() {
        let states = Tensor::matrix(5, 1, vec![0., 1., 2., 3., 4.]).unwrap();
        assert_eq!(history_window(&states, 0, 2).unwrap().data(), &[0., 0., 0.]);
        assert_eq!(history_window(&states, 1, 2).unwrap().data(), &[0., 0., 1.]);
        assert_eq!(history_window(&states, 4, 2).unwrap().data(), &[2., 3., 4.]);
        // No padding once t >= h.
        for t in 2..5 {
            let w = history_window(&states, t, 2).unwrap();
            assert_eq!(w.data(), &[t as f64 - 2.0, t as f64 - 1.0, t as f64]);
        }
        assert!(history_window(&states, 5, 2).is_err());
    }

    #[test]
    fn zero_network_keeps_coefficient() {
        let (mut store, net) = head(3, 2, 8);
        store.zero_values();
        let w = Tensor::filled(&[3, 3], 0.4);
        let a = net.predict_action(&store, &w, &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(a, 0.0);
        assert_eq!(apply_action(0.7, a), 0.7);
    }

    #[test]
    fn clamps_at_zero() {
        assert_eq!(apply_action(0.2, -0.5), 0.0);
        assert_eq!(apply_action(0.2, 0.5), 0.7);
    }

    #[test]
    fn shape_errors() {
        let (store, net) = head(3, 2, 8);
        assert!(net.predict_action(&store, &Tensor::zeros(&[2, 3]), &[0.; 3]).is_err());
        assert!(net.predict_action(&store, &Tensor::zeros(&[3, 3]), &[0.; 2]).is_err());
        assert!(InvDynConfig { history: 8, hidden: 4 }.validate(8).is_err());
    }

    #[test]
    fn loss_examples() {
        let (mut store, net) = head(1, 1, 4);
        store.zero_values();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::zeros(&[3, 3]));
        let l = net.loss(&mut tape, x, &[1.0, -1.0, 1.0]).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::zeros(&[2, 3]));
        let l = net.loss(&mut tape, x, &[0.0, 0.0]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, net) = head(3, 2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = standard_normal(&[5, 12], &mut rng);
        let a = standard_normal(&[5, 1], &mut rng);
        let report = check_all(&store, |tape| {
            let xv = tape.input(x.clone());
            net.loss(tape, xv, a.data())
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn learns_linear_action_rule() {
        // a_t = s'_{t+1}[0] - s_t[0] on random states.
        let (mut store, net) = head(2, 1, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = standard_normal(&[64, 6], &mut rng).map(|v| 0.5 * v);
        let actions: Vec<f64> = (0..64).map(|r| x.get(r, 4) - x.get(r, 2)).collect();
        let mut adam = Adam::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() }, &store);
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            let grads = {
                let mut tape = Tape::new(&store);
                let xv = tape.input(x.clone());
                let l = net.loss(&mut tape, xv, &actions).unwrap();
                last = tape.value(l).item();
                tape.backward(l).unwrap().into_param_grads()
            };
            store.accumulate(&grads, 1.0);
            adam.step(&mut store).unwrap();
        }
        assert!(last < 1e-3, "loss {last}");
        let probe = history_window(&Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, -0.1]).unwrap(), 1, 1).unwrap();
        let a = net.predict_action(&store, &probe, &[0.45, 0.0]).unwrap();
        assert!((a - (0.45 - 0.3)).abs() < 0.05, "{a}");
    }
}
