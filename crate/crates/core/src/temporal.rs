//! Transformer encoder over each node's history window.
//!
//! Sequences are processed as a batch `[G, T, D]` of independent node
//! histories (un-batched `[T, D]` inputs are accepted too). Attention is full
//! and bidirectional: the window only holds past observations.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Query/key/value/output projections.
///
/// The per-head `D x d_k` projections are stored side by side as one `D x D`
/// matrix: head `h` owns columns `h*d_k .. (h+1)*d_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: usize) -> Result<Self> {
        let d = wq.shape().first().copied().unwrap_or(0);
        if heads == 0 || d == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument { op: "attention", msg: format!("model width {d} is not divisible by {heads} heads") });
        }
        for w in [&wq, &wk, &wv, &wo] {
            if w.shape() != [d, d] {
                return Err(Error::shape("attention", w.shape(), &[d, d]));
            }
        }
        Ok(Self { wq, wk, wv, wo, heads })
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            wq: tape.param(self.wq.clone()),
            wk: tape.param(self.wk.clone()),
            wv: tape.param(self.wv.clone()),
            wo: tape.param(self.wo.clone()),
            heads: self.heads,
        }
    }
}

/// Attention, a ReLU feed-forward `D -> D_ff -> D`, and two layer norms.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub attention: AttentionParams,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderBlockVars {
    pub attention: AttentionVars,
    pub ff_w1: Var,
    pub ff_b1: Var,
    pub ff_w2: Var,
    pub ff_b2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

impl EncoderBlock {
    /// Block with the given attention and feed-forward weights; layer norms
    /// start at gain 1, bias 0.
    pub fn new(attention: AttentionParams, ff_w1: Tensor, ff_b1: Tensor, ff_w2: Tensor, ff_b2: Tensor) -> Result<Self> {
        let d = attention.dim();
        let d_ff = ff_w1.shape().get(1).copied().unwrap_or(0);
        if ff_w1.shape() != [d, d_ff] || ff_b1.shape() != [d_ff] || ff_w2.shape() != [d_ff, d] || ff_b2.shape() != [d] {
            return Err(Error::InvalidArgument { op: "encoder_block", msg: format!("feed-forward weights do not chain {d} -> {d_ff} -> {d}") });
        }
        Ok(Self {
            attention,
            ff_w1,
            ff_b1,
            ff_w2,
            ff_b2,
            ln1_gain: Tensor::ones(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::ones(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
        })
    }

    pub fn dim(&self) -> usize {
        self.attention.dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> EncoderBlockVars {
        EncoderBlockVars {
            attention: self.attention.bind(tape),
            ff_w1: tape.param(self.ff_w1.clone()),
            ff_b1: tape.param(self.ff_b1.clone()),
            ff_w2: tape.param(self.ff_w2.clone()),
            ff_b2: tape.param(self.ff_b2.clone()),
            ln1_gain: tape.param(self.ln1_gain.clone()),
            ln1_bias: tape.param(self.ln1_bias.clone()),
            ln2_gain: tape.param(self.ln2_gain.clone()),
            ln2_bias: tape.param(self.ln2_bias.clone()),
        }
    }
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V`. Returns `(context, weights)`.
///
/// Accepts `[T, d_k]` or batched `[G, T, d_k]` operands.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let qs = tape.shape(q).to_vec();
    if qs.len() < 2 || qs.len() > 3 || tape.shape(k) != qs.as_slice() || tape.shape(v) != qs.as_slice() {
        return Err(Error::shape("scaled_dot_attention", &qs, tape.shape(k)));
    }
    let d_k = qs[qs.len() - 1];
    if d_k == 0 {
        return Err(Error::InvalidArgument { op: "scaled_dot_attention", msg: "key dimension must be at least 1".into() });
    }
    let kt = if qs.len() == 2 { tape.permute(k, &[1, 0])? } else { tape.permute(k, &[0, 2, 1])? };
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax_rows(scaled)?;
    let context = tape.matmul(weights, v)?;
    Ok((context, weights))
}

fn as_batch(tape: &mut Tape, x: Var) -> Result<(Var, bool)> {
    match tape.shape(x).len() {
        3 => Ok((x, false)),
        2 => {
            let s = tape.shape(x).to_vec();
            Ok((tape.reshape(x, &[1, s[0], s[1]])?, true))
        }
        _ => Err(Error::InvalidArgument { op: "temporal", msg: format!("expected [T, D] or [G, T, D], got {:?}", tape.shape(x)) }),
    }
}

fn unbatch(tape: &mut Tape, x: Var, squeeze: bool) -> Result<Var> {
    if !squeeze {
        return Ok(x);
    }
    let s = tape.shape(x)[1..].to_vec();
    tape.reshape(x, &s)
}

/// Multi-head self-attention. Returns the `[.., T, D]` output and the
/// attention weights `[G * heads, T, T]`.
pub fn multi_head_attention(tape: &mut Tape, x: Var, params: &AttentionVars) -> Result<(Var, Var)> {
    let (xb, squeeze) = as_batch(tape, x)?;
    let [g, t, d] = <[usize; 3]>::try_from(tape.shape(xb)).expect("batched input is rank 3");
    let heads = params.heads;
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument { op: "multi_head_attention", msg: format!("width {d} is not divisible by {heads} heads") });
    }
    if tape.shape(params.wq) != [d, d] {
        return Err(Error::shape("multi_head_attention", &[g, t, d], tape.shape(params.wq)));
    }
    let d_k = d / heads;
    let split = |tape: &mut Tape, w: Var| -> Result<Var> {
        let p = tape.matmul(xb, w)?;
        let p = tape.reshape(p, &[g, t, heads, d_k])?;
        let p = tape.permute(p, &[0, 2, 1, 3])?;
        tape.reshape(p, &[g * heads, t, d_k])
    };
    let q = split(tape, params.wq)?;
    let k = split(tape, params.wk)?;
    let v = split(tape, params.wv)?;
    let (ctx, weights) = scaled_dot_attention(tape, q, k, v)?;
    let ctx = tape.reshape(ctx, &[g, heads, t, d_k])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[g, t, d])?;
    let out = tape.matmul(ctx, params.wo)?;
    Ok((unbatch(tape, out, squeeze)?, weights))
}

/// Sinusoidal position table `[T, D]`.
pub fn positional_encoding(t: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::InvalidArgument { op: "positional_encoding", msg: format!("width must be even, got {d}") });
    }
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![t, d], data)
}

fn norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layer_norm(x, LAYER_NORM_EPS)?;
    let n = tape.mul_suffix(n, gain)?;
    tape.add_suffix(n, bias)
}

/// `y = LN(x + MHA(x))`, `out = LN(y + FFN(y))`. Returns the output and the
/// block's attention weights.
pub fn encoder_block(tape: &mut Tape, x: Var, block: &EncoderBlockVars) -> Result<(Var, Var)> {
    let (attn, weights) = multi_head_attention(tape, x, &block.attention)?;
    let res = tape.add(x, attn)?;
    let y = norm(tape, res, block.ln1_gain, block.ln1_bias)?;
    let h = tape.matmul(y, block.ff_w1)?;
    let h = tape.add_suffix(h, block.ff_b1)?;
    let h = tape.relu(h);
    let f = tape.matmul(h, block.ff_w2)?;
    let f = tape.add_suffix(f, block.ff_b2)?;
    let res = tape.add(y, f)?;
    Ok((norm(tape, res, block.ln2_gain, block.ln2_bias)?, weights))
}

/// Output of [`temporal_encode`].
#[derive(Clone, Debug)]
pub struct TemporalOutput {
    /// Last-time-step representation, `[G, D]` (or `[D]` for a single sequence).
    pub summary: Var,
    /// Attention weights of each block, in order.
    pub attention: Vec<Var>,
}

/// Adds positional encoding, runs the blocks and keeps the last time step.
pub fn temporal_encode(tape: &mut Tape, seq: Var, blocks: &[EncoderBlockVars]) -> Result<TemporalOutput> {
    if blocks.is_empty() {
        return Err(Error::InvalidArgument { op: "temporal_encode", msg: "at least one encoder block is required".into() });
    }
    let (xb, squeeze) = as_batch(tape, seq)?;
    let [g, t, d] = <[usize; 3]>::try_from(tape.shape(xb)).expect("batched input is rank 3");
    let pe = tape.constant(positional_encoding(t, d)?);
    let mut x = tape.add_suffix(xb, pe)?;
    let mut attention = Vec::with_capacity(blocks.len());
    for block in blocks {
        let (y, w) = encoder_block(tape, x, block)?;
        x = y;
        attention.push(w);
    }
    let flat = tape.reshape(x, &[g * t, d])?;
    let rows: Vec<usize> = (0..g).map(|i| i * t + t - 1).collect();
    let mut summary = tape.gather_rows(flat, &rows)?;
    if squeeze {
        summary = tape.reshape(summary, &[d])?;
    }
    Ok(TemporalOutput { summary, attention })
}
