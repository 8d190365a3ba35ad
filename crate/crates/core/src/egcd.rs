//! Expert-guided conditional denoiser.
//!
//! Each trajectory position builds a query from its noisy state, a sinusoidal
//! embedding of the diffusion step and the explicit (return, constraint)
//! condition. The query cross-attends over the condition tokens: one token per
//! step of the implicit expert trajectory plus one for the explicit block. A
//! feed-forward residual block and an output MLP map back to states, giving
//! the clean-trajectory prediction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Width of the diffusion-step embedding.
pub const STEP_EMBED_DIM: usize = 16;
/// Width of the explicit condition block `(f(R), f'(C))`.
pub const EXPLICIT_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgcdConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub depth: usize,
    pub use_cross_attention: bool,
}

impl Default for EgcdConfig {
    fn default() -> Self {
        EgcdConfig {
            model_dim: 64,
            heads: 4,
            ffn_mult: 4,
            depth: 1,
            use_cross_attention: true,
        }
    }
}

impl EgcdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::config(
                "train.model.model_dim",
                format!("{} is not divisible into {} heads", self.model_dim, self.heads),
            ));
        }
        if self.depth == 0 || self.ffn_mult == 0 {
            return Err(Error::config("train.model.depth", "depth and ffn_mult must be positive"));
        }
        Ok(())
    }
}

/// Conditioning input of the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    /// Implicit expert trajectory, `horizon × state_dim`.
    pub implicit: Tensor,
    pub explicit_return: f64,
    pub explicit_constraint: f64,
    /// When set, the whole condition is replaced by the learned null vector.
    pub dropped: bool,
}

impl Condition {
    pub fn new(implicit: Tensor, ret: f64, constraint: f64) -> Result<Self> {
        for (name, v) in [("return", ret), ("constraint", constraint)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!("explicit {name} condition {v} outside [0, 1]")));
            }
        }
        Ok(Condition {
            implicit,
            explicit_return: ret,
            explicit_constraint: constraint,
            dropped: false,
        })
    }

    pub fn null(horizon: usize, state_dim: usize) -> Self {
        Condition {
            implicit: Tensor::zeros(&[horizon, state_dim]),
            explicit_return: 0.0,
            explicit_constraint: 0.0,
            dropped: true,
        }
    }

    pub fn dropped(&self) -> Self {
        Condition {
            dropped: true,
            ..self.clone()
        }
    }

    /// Implicit block flattened, followed by the explicit pair.
    pub fn to_vector(&self) -> Tensor {
        let mut v = self.implicit.data().to_vec();
        v.push(self.explicit_return);
        v.push(self.explicit_constraint);
        Tensor::row_vector(v)
    }
}

/// Sinusoidal embedding of diffusion step `k`.
pub fn step_embedding(k: usize) -> Vec<f64> {
    let half = STEP_EMBED_DIM / 2;
    let mut out = Vec::with_capacity(STEP_EMBED_DIM);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = k as f64 * freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Dense {
            w: store.insert_uniform(format!("{name}.w"), fan_in, fan_out, rng)?,
            b: store.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]))?,
        })
    }

    fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Dense {
            w: lookup(store, &format!("{name}.w"))?,
            b: lookup(store, &format!("{name}.b"))?,
        })
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.dense(x, self.w, self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Norm {
            gamma: store.insert(format!("{name}.gamma"), Tensor::filled(&[1, dim], 1.0))?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[1, dim]))?,
        })
    }

    fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Norm {
            gamma: lookup(store, &format!("{name}.gamma"))?,
            beta: lookup(store, &format!("{name}.beta"))?,
        })
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::config(name.to_string(), "missing parameter"))
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    query_norm: Option<Norm>,
    norm: Norm,
    ffn_in: Dense,
    ffn_out: Dense,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct EgcdTrace {
    pub output: Var,
    pub query: Var,
    pub h0: Var,
    /// Attention weights per block and head, `horizon × tokens`.
    pub attention: Vec<Vec<Var>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgcdNet {
    pub config: EgcdConfig,
    pub horizon: usize,
    pub state_dim: usize,
    query_in: Dense,
    query_out: Dense,
    query_norm: Norm,
    expert_proj: Dense,
    explicit_proj: Dense,
    blocks: Vec<Block>,
    out_hidden: Dense,
    out_proj: Dense,
    null_condition: ParamId,
}

impl EgcdNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        horizon: usize,
        state_dim: usize,
        config: &EgcdConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let o_dim = state_dim + STEP_EMBED_DIM + EXPLICIT_DIM;
        let query_in = Dense::new(store, &format!("{prefix}.query.mlp0"), o_dim, d, rng)?;
        let query_out = Dense::new(store, &format!("{prefix}.query.mlp1"), d, d, rng)?;
        let query_norm = Norm::new(store, &format!("{prefix}.query.norm"), d)?;
        let expert_proj = Dense::new(store, &format!("{prefix}.cond.expert"), state_dim, d, rng)?;
        let explicit_proj = Dense::new(store, &format!("{prefix}.cond.explicit"), EXPLICIT_DIM, d, rng)?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("{prefix}.block{i}");
            blocks.push(Block {
                wq: store.insert_uniform(format!("{p}.attn.wq"), d, d, rng)?,
                wk: store.insert_uniform(format!("{p}.attn.wk"), d, d, rng)?,
                wv: store.insert_uniform(format!("{p}.attn.wv"), d, d, rng)?,
                query_norm: if i > 0 {
                    Some(Norm::new(store, &format!("{p}.query_norm"), d)?)
                } else {
                    None
                },
                norm: Norm::new(store, &format!("{p}.norm"), d)?,
                ffn_in: Dense::new(store, &format!("{p}.ffn0"), d, config.ffn_mult * d, rng)?,
                ffn_out: Dense::new(store, &format!("{p}.ffn1"), config.ffn_mult * d, d, rng)?,
            });
        }
        let out_hidden = Dense::new(store, &format!("{prefix}.out.mlp0"), d, d, rng)?;
        let out_proj = Dense::new(store, &format!("{prefix}.out.mlp1"), d, state_dim, rng)?;
        let null_condition = store.insert(
            format!("{prefix}.null_condition"),
            Tensor::zeros(&[1, horizon * state_dim + EXPLICIT_DIM]),
        )?;
        Ok(EgcdNet {
            config: *config,
            horizon,
            state_dim,
            query_in,
            query_out,
            query_norm,
            expert_proj,
            explicit_proj,
            blocks,
            out_hidden,
            out_proj,
            null_condition,
        })
    }

    /// Re-binds to parameters already present in `store`.
    pub fn bind(
        store: &ParamStore,
        prefix: &str,
        horizon: usize,
        state_dim: usize,
        config: &EgcdConfig,
    ) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("{prefix}.block{i}");
            blocks.push(Block {
                wq: lookup(store, &format!("{p}.attn.wq"))?,
                wk: lookup(store, &format!("{p}.attn.wk"))?,
                wv: lookup(store, &format!("{p}.attn.wv"))?,
                query_norm: if i > 0 {
                    Some(Norm::bind(store, &format!("{p}.query_norm"))?)
                } else {
                    None
                },
                norm: Norm::bind(store, &format!("{p}.norm"))?,
                ffn_in: Dense::bind(store, &format!("{p}.ffn0"))?,
                ffn_out: Dense::bind(store, &format!("{p}.ffn1"))?,
            });
        }
        Ok(EgcdNet {
            config: *config,
            horizon,
            state_dim,
            query_in: Dense::bind(store, &format!("{prefix}.query.mlp0"))?,
            query_out: Dense::bind(store, &format!("{prefix}.query.mlp1"))?,
            query_norm: Norm::bind(store, &format!("{prefix}.query.norm"))?,
            expert_proj: Dense::bind(store, &format!("{prefix}.cond.expert"))?,
            explicit_proj: Dense::bind(store, &format!("{prefix}.cond.explicit"))?,
            blocks,
            out_hidden: Dense::bind(store, &format!("{prefix}.out.mlp0"))?,
            out_proj: Dense::bind(store, &format!("{prefix}.out.mlp1"))?,
            null_condition: lookup(store, &format!("{prefix}.null_condition"))?,
        })
    }

    pub fn null_condition_id(&self) -> ParamId {
        self.null_condition
    }

    pub fn condition_len(&self) -> usize {
        self.horizon * self.state_dim + EXPLICIT_DIM
    }

    /// Feed-forward and output-MLP parameters (for residual-path tests).
    pub fn head_param_ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend([b.ffn_in.w, b.ffn_in.b, b.ffn_out.w, b.ffn_out.b]);
        }
        v
    }

    pub fn query_mlp_ids(&self) -> Vec<ParamId> {
        vec![self.query_in.w, self.query_in.b, self.query_out.w, self.query_out.b]
    }

    pub fn attention_ids(&self, block: usize) -> [ParamId; 3] {
        let b = &self.blocks[block];
        [b.wq, b.wk, b.wv]
    }

    /// Condition vector on the tape: the null parameter when dropped.
    pub fn condition_var(&self, tape: &mut Tape, cond: &Condition) -> Result<Var> {
        if cond.dropped {
            return Ok(tape.param(self.null_condition));
        }
        if cond.implicit.rows() != self.horizon || cond.implicit.cols() != self.state_dim {
            return Err(Error::shape(
                "egcd.condition",
                format!(
                    "implicit block {:?}, expected [{}, {}]",
                    cond.implicit.shape(),
                    self.horizon,
                    self.state_dim
                ),
            ));
        }
        Ok(tape.input(cond.to_vector()))
    }

    /// Query `Q = LayerNorm(MLP(x_k ⊕ emb(k) ⊕ C^g))`; also returns the
    /// pre-norm projection used on the residual path.
    pub fn build_query(&self, tape: &mut Tape, x_k: Var, k: usize, explicit: Var) -> Result<(Var, Var)> {
        let xt = tape.value(x_k);
        if xt.rows() != self.horizon || xt.cols() != self.state_dim {
            return Err(Error::shape(
                "egcd.build_query",
                format!("x_k {:?}, expected [{}, {}]", xt.shape(), self.horizon, self.state_dim),
            ));
        }
        let emb = tape.input(Tensor::row_vector(step_embedding(k)));
        let emb = tape.repeat_rows(emb, self.horizon)?;
        let cg = tape.repeat_rows(explicit, self.horizon)?;
        let o = tape.concat_cols(&[x_k, emb, cg])?;
        let h = self.query_in.apply(tape, o)?;
        let h = tape.gelu(h);
        let p = self.query_out.apply(tape, h)?;
        let q = self.query_norm.apply(tape, p)?;
        Ok((q, p))
    }

    /// Condition tokens: one per expert step, then the explicit token.
    pub fn condition_tokens(&self, tape: &mut Tape, cond_vec: Var) -> Result<(Var, Var, Var)> {
        let n = self.horizon * self.state_dim;
        let implicit = tape.slice_cols(cond_vec, 0, n)?;
        let implicit = tape.reshape(implicit, &[self.horizon, self.state_dim])?;
        let explicit = tape.slice_cols(cond_vec, n, EXPLICIT_DIM)?;
        let expert_tokens = self.expert_proj.apply(tape, implicit)?;
        let explicit_token = self.explicit_proj.apply(tape, explicit)?;
        Ok((expert_tokens, explicit_token, explicit))
    }

    /// Multi-head attention of `q` over `kv`, scaled by `1/sqrt(model_dim)`.
    pub fn attend(
        &self,
        tape: &mut Tape,
        block: usize,
        q: Var,
        kv: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let b = &self.blocks[block];
        let d = self.config.model_dim;
        let dh = d / self.config.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (wq, wk, wv) = (tape.param(b.wq), tape.param(b.wk), tape.param(b.wv));
        let qp = tape.matmul(q, wq)?;
        let kp = tape.matmul(kv, wk)?;
        let vp = tape.matmul(kv, wv)?;
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut weights = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(qp, h * dh, dh)?;
            let kh = tape.slice_cols(kp, h * dh, dh)?;
            let vh = tape.slice_cols(vp, h * dh, dh)?;
            let logits = tape.matmul_t(qh, kh)?;
            let logits = tape.scale(logits, scale);
            let a = tape.softmax(logits);
            weights.push(a);
            heads.push(tape.matmul(a, vh)?);
        }
        let out = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        Ok((out, weights))
    }

    /// Predicts the clean trajectory from `x_k` at step `k`.
    pub fn forward_trace(&self, tape: &mut Tape, x_k: Var, k: usize, cond: &Condition) -> Result<EgcdTrace> {
        let cvec = self.condition_var(tape, cond)?;
        self.forward_cond(tape, x_k, k, cvec)
    }

    /// Forward pass with the condition already on the tape as a
    /// `1 × (T·D_s + 2)` row.
    pub fn forward_cond(&self, tape: &mut Tape, x_k: Var, k: usize, cvec: Var) -> Result<EgcdTrace> {
        let cl = tape.value(cvec).len();
        if cl != self.condition_len() {
            return Err(Error::shape(
                "egcd.condition",
                format!("condition of {cl} entries, expected {}", self.condition_len()),
            ));
        }
        let (expert_tokens, explicit_token, explicit) = self.condition_tokens(tape, cvec)?;
        let (q0, p0) = self.build_query(tape, x_k, k, explicit)?;
        let tokens = if self.config.use_cross_attention {
            Some(tape.concat_rows(&[expert_tokens, explicit_token])?)
        } else {
            None
        };
        let bias_token = if self.config.use_cross_attention {
            None
        } else {
            let pooled = tape.mean_rows(expert_tokens);
            Some(tape.add(pooled, explicit_token)?)
        };

        let mut attention = Vec::with_capacity(self.blocks.len());
        let (mut q, mut resid) = (q0, p0);
        let mut first_h0 = None;
        let mut hidden = None;
        for (i, blk) in self.blocks.iter().enumerate() {
            if let Some(norm) = &blk.query_norm {
                q = norm.apply(tape, resid)?;
            }
            let kv = match (tokens, bias_token) {
                (Some(t), _) => t,
                (None, Some(bt)) => tape.concat_rows(&[q, bt])?,
                _ => unreachable!(),
            };
            let (h0, w) = self.attend(tape, i, q, kv)?;
            attention.push(w);
            first_h0.get_or_insert(h0);
            let s = tape.add(h0, resid)?;
            let s = blk.norm.apply(tape, s)?;
            let f = blk.ffn_in.apply(tape, s)?;
            let f = tape.gelu(f);
            let h1 = blk.ffn_out.apply(tape, f)?;
            let h = tape.add(h1, h0)?;
            resid = h;
            hidden = Some(h);
        }
        let h = hidden.expect("depth >= 1");
        let o = self.out_hidden.apply(tape, h)?;
        let o = tape.gelu(o);
        let output = self.out_proj.apply(tape, o)?;
        Ok(EgcdTrace {
            output,
            query: q0,
            h0: first_h0.expect("depth >= 1"),
            attention,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x_k: Var, k: usize, cond: &Condition) -> Result<Var> {
        Ok(self.forward_trace(tape, x_k, k, cond)?.output)
    }

    /// Forward pass on concrete values.
    pub fn predict(&self, store: &ParamStore, x_k: &Tensor, k: usize, cond: &Condition) -> Result<Tensor> {
        let mut tape = Tape::new(store);
        let x = tape.input(x_k.clone());
        let out = self.forward(&mut tape, x, k, cond)?;
        let out = tape.value(out).clone();
        if !out.is_finite() {
            return Err(Error::NonFinite {
                context: format!("denoiser output at step {k}"),
            });
        }
        Ok(out)
    }
}
