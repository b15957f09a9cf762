//! Layers built from tape ops.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, Prng};
use crate::tensor::Tensor;

/// Whether a forward pass trains (dropout, sampled masks) or evaluates.
pub struct Mode {
    training: bool,
    dropout: f64,
    rng: Prng,
}

impl Mode {
    pub fn eval() -> Self {
        Self { training: false, dropout: 0.0, rng: rng::seeded(0) }
    }

    pub fn train(seed: u64, dropout: f64) -> Self {
        Self { training: true, dropout, rng: rng::seeded(seed) }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> &mut Prng {
        &mut self.rng
    }

    pub fn dropout(&mut self, tape: &mut Tape<'_>, x: Var) -> Var {
        if !self.training || self.dropout <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.dropout;
        let n = tape.value(x).len();
        let mask: Rc<[f64]> = (0..n)
            .map(|_| if rng::uniform(&mut self.rng, 0.0, 1.0) < keep { 1.0 / keep } else { 0.0 })
            .collect::<Vec<_>>()
            .into();
        tape.mul_const(x, mask)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Prng) -> Self {
        let weight = store.add_uniform(&format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng);
        let bias = store.add_uniform(&format!("{name}.bias"), &[fan_out], fan_in, rng);
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w);
        tape.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head self-attention over `[G, T, D]` token groups; each group
/// attends only within itself.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionOutput {
    pub output: Var,
    /// `[G * heads, T, T]` post-softmax weights.
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Prng) -> Self {
        assert!(dim.is_multiple_of(heads), "dim must split evenly across heads");
        let qkv = Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng);
        let out = Linear::new(store, &format!("{name}.out"), dim, dim, rng);
        Self { qkv, out, heads, dim }
    }

    /// `mask`, when given, is `[G, T, T]` with weights in `[0, 1]`; row `m`
    /// column `n` scales how much token `m` may attend to token `n`.
    pub fn forward(&self, tape: &mut Tape<'_>, mode: &mut Mode, x: Var, mask: Option<Var>) -> AttentionOutput {
        let shape = tape.shape(x).to_vec();
        let (g, t, d) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        let dh = d / h;
        let qkv = self.qkv.forward(tape, x);

        let split = |offset: usize| -> Rc<[usize]> {
            let mut idx = Vec::with_capacity(g * t * d);
            for gi in 0..g {
                for hi in 0..h {
                    for ti in 0..t {
                        let base = (gi * t + ti) * 3 * d + offset + hi * dh;
                        idx.extend(base..base + dh);
                    }
                }
            }
            idx.into()
        };
        let q = tape.gather(qkv, split(0), &[g * h, t, dh]);
        let k = tape.gather(qkv, split(d), &[g * h, t, dh]);
        let v = tape.gather(qkv, split(2 * d), &[g * h, t, dh]);

        let scores = tape.bmm(q, k, true);
        let scores = tape.scale(scores, 1.0 / libm::sqrt(dh as f64));
        let weights = tape.masked_softmax(scores, mask, h);
        let dropped = mode.dropout(tape, weights);
        let ctx = tape.bmm(dropped, v, false);

        let mut merge = Vec::with_capacity(g * t * d);
        for gi in 0..g {
            for ti in 0..t {
                for hi in 0..h {
                    let base = ((gi * h + hi) * t + ti) * dh;
                    merge.extend(base..base + dh);
                }
            }
        }
        let merged = tape.gather(ctx, merge.into(), &[g, t, d]);
        let output = self.out.forward(tape, merged);
        AttentionOutput { output, weights }
    }
}

/// Position-wise `D -> 4D -> D` with GELU.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut Prng) -> Self {
        let up = Linear::new(store, &format!("{name}.up"), dim, 4 * dim, rng);
        let down = Linear::new(store, &format!("{name}.down"), 4 * dim, dim, rng);
        Self { up, down }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, mode: &mut Mode, x: Var) -> Var {
        let hdn = self.up.forward(tape, x);
        let hdn = tape.gelu(hdn);
        let y = self.down.forward(tape, hdn);
        mode.dropout(tape, y)
    }
}

/// Where the attention residual starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Residual {
    /// `x' = LN(x); x* = x' + MHSA(x'); out = x* + FFN(LN(x*))`.
    FromNormalized,
    /// `y = x + MHSA(LN(x)); out = y + FFN(LN(y))`.
    PreNorm,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub residual: Residual,
}

pub struct EncoderOutput {
    pub output: Var,
    pub attention: Var,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        residual: Residual,
        rng: &mut Prng,
    ) -> Self {
        Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, rng),
            residual,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, mode: &mut Mode, x: Var, mask: Option<Var>) -> EncoderOutput {
        let normed = self.norm_attn.forward(tape, x);
        let att = self.attn.forward(tape, mode, normed, mask);
        let attn_out = mode.dropout(tape, att.output);
        let base = match self.residual {
            Residual::FromNormalized => normed,
            Residual::PreNorm => x,
        };
        let mid = tape.add(base, attn_out);
        let n2 = self.norm_ffn.forward(tape, mid);
        let f = self.ffn.forward(tape, mode, n2);
        let output = tape.add(mid, f);
        EncoderOutput { output, attention: att.weights }
    }

    /// Every parameter id owned by this layer.
    pub fn param_ids(&self) -> [ParamId; 12] {
        [
            self.norm_attn.gamma,
            self.norm_attn.beta,
            self.attn.qkv.weight,
            self.attn.qkv.bias,
            self.attn.out.weight,
            self.attn.out.bias,
            self.norm_ffn.gamma,
            self.norm_ffn.beta,
            self.ffn.up.weight,
            self.ffn.up.bias,
            self.ffn.down.weight,
            self.ffn.down.bias,
        ]
    }
}
