//! Layers built on the tape: linear maps, layer norm, block multi-head
//! attention, feed-forward blocks and a GRU cell.

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add_glorot(format!("{name}.weight"), input, output, rng),
            bias: Some(store.add_zeros(format!("{name}.bias"), 1, output)),
        }
    }

    pub fn without_bias<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add_glorot(format!("{name}.weight"), input, output, rng),
            bias: None,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer norm with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_ones(format!("{name}.gain"), 1, dim),
            shift: store.add_zeros(format!("{name}.shift"), 1, dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x);
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.shift);
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, b)
    }
}

/// Multi-head attention over aligned blocks of rows. Each head owns its own
/// query/key/value projections and a slice of the output projection, which
/// is the same function as the usual split-and-concatenate formulation.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    heads: Vec<Head>,
    out_bias: ParamId,
    head_dim: usize,
}

#[derive(Debug, Clone)]
struct Head {
    query: Linear,
    key: Linear,
    value: Linear,
    out: ParamId,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, num_heads: usize, rng: &mut R) -> Self {
        assert!(num_heads > 0 && dim % num_heads == 0, "dim {dim} not divisible by {num_heads} heads");
        let head_dim = dim / num_heads;
        let heads = (0..num_heads)
            .map(|h| Head {
                query: Linear::new(store, &format!("{name}.h{h}.query"), dim, head_dim, rng),
                key: Linear::new(store, &format!("{name}.h{h}.key"), dim, head_dim, rng),
                value: Linear::new(store, &format!("{name}.h{h}.value"), dim, head_dim, rng),
                out: store.add_glorot(format!("{name}.h{h}.out"), head_dim, dim, rng),
            })
            .collect();
        Self {
            heads,
            out_bias: store.add_zeros(format!("{name}.out_bias"), 1, dim),
            head_dim,
        }
    }

    /// `queries` has blocks of `lq` rows, `memory` blocks of `lk` rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        memory: Var,
        lq: usize,
        lk: usize,
    ) -> Result<Var> {
        self.run(tape, store, queries, memory, lq, lk, false)
    }

    /// Self-attention over blocks of `len` rows where each row sees only
    /// itself and earlier rows of its block.
    pub fn forward_causal(&self, tape: &mut Tape, store: &ParamStore, x: Var, len: usize) -> Result<Var> {
        self.run(tape, store, x, x, len, len, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        memory: Var,
        lq: usize,
        lk: usize,
        causal: bool,
    ) -> Result<Var> {
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut total: Option<Var> = None;
        for head in &self.heads {
            let q = head.query.forward(tape, store, queries)?;
            let k = head.key.forward(tape, store, memory)?;
            let v = head.value.forward(tape, store, memory)?;
            let att = if causal {
                tape.causal_block_attention(q, k, v, lq, scale)?
            } else {
                tape.block_attention(q, k, v, lq, lk, scale)?
            };
            let wo = tape.param(store, head.out);
            let proj = tape.matmul(att, wo)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, proj)?,
                None => proj,
            });
        }
        let b = tape.param(store, self.out_bias);
        tape.add_row(total.expect("at least one head"), b)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), dim, hidden, rng),
            outer: Linear::new(store, &format!("{name}.outer"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.outer.forward(tape, store, h)
    }
}

/// Gated recurrent unit cell.
#[derive(Debug, Clone)]
pub struct GruCell {
    input_reset: Linear,
    input_update: Linear,
    input_new: Linear,
    hidden_reset: Linear,
    hidden_update: Linear,
    hidden_new: Linear,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            input_reset: Linear::new(store, &format!("{name}.input_reset"), input, hidden, rng),
            input_update: Linear::new(store, &format!("{name}.input_update"), input, hidden, rng),
            input_new: Linear::new(store, &format!("{name}.input_new"), input, hidden, rng),
            hidden_reset: Linear::without_bias(store, &format!("{name}.hidden_reset"), hidden, hidden, rng),
            hidden_update: Linear::without_bias(store, &format!("{name}.hidden_update"), hidden, hidden, rng),
            hidden_new: Linear::new(store, &format!("{name}.hidden_new"), hidden, hidden, rng),
            hidden_dim: hidden,
        }
    }

    /// `h' = n + z ∘ (h - n)` with `n = tanh(W_n x + r ∘ (U_n h + b))`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let xr = self.input_reset.forward(tape, store, x)?;
        let hr = self.hidden_reset.forward(tape, store, h)?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);

        let xz = self.input_update.forward(tape, store, x)?;
        let hz = self.hidden_update.forward(tape, store, h)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);

        let xn = self.input_new.forward(tape, store, x)?;
        let hn = self.hidden_new.forward(tape, store, h)?;
        let gated = tape.mul(r, hn)?;
        let n = tape.add(xn, gated)?;
        let n = tape.tanh(n);

        let diff = tape.sub(h, n)?;
        let kept = tape.mul(z, diff)?;
        tape.add(n, kept)
    }
}
