//! Unit-scaled operations.
//!
//! Every op is built from the same three pieces: `scale_bwd` on each input
//! (its backward factor β), the unscaled primitive, and `scale_fwd` on the
//! output (the forward factor α). Under the default constraint the β of every
//! input that is not a cut edge is replaced by α, so the gradient reaching
//! those inputs differs from the exact one by a constant only.

use alloc::vec::Vec;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::math;
use crate::numerics::{log_interpolate, stats, FloatFormat};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    #[default]
    ToOutputScale,
    None,
}

/// Resolved scale factors of one op. `betas_bwd` lists the constrained inputs
/// first, then the cut-edge inputs in the order given.
#[derive(Clone, Debug, PartialEq)]
pub struct OpScales {
    pub alpha_fwd: f64,
    pub betas_bwd: Vec<f64>,
}

/// Applies `c` to the backward factors in `constrained`; factors in `cut`
/// belong to cut edges and are kept verbatim.
pub fn apply_constraint(c: Constraint, alpha: f64, constrained: &[f64], cut: &[f64]) -> Result<OpScales> {
    ensure_positive("alpha", alpha)?;
    for &b in constrained.iter().chain(cut) {
        ensure_positive("beta", b)?;
    }
    let mut betas_bwd: Vec<f64> = match c {
        Constraint::ToOutputScale => constrained.iter().map(|_| alpha).collect(),
        Constraint::None => constrained.to_vec(),
    };
    betas_bwd.extend_from_slice(cut);
    Ok(OpScales {
        alpha_fwd: alpha,
        betas_bwd,
    })
}

/// Attention output scale: `1 / log_interpolate(1/(1 + 4·d_head/α²), 1, √(ln s / s))`.
pub fn attention_scale(alpha_attn: f64, d_head: usize, seq: usize) -> Result<f64> {
    ensure_positive("alpha_attn", alpha_attn)?;
    if d_head == 0 || seq < 2 {
        return Err(Error::invalid(
            "attention",
            alloc::format!("need d_head >= 1 and seq >= 2, got d_head={d_head} seq={seq}"),
        ));
    }
    let s = seq as f64;
    let w = 1.0 / (1.0 + 4.0 * d_head as f64 / (alpha_attn * alpha_attn));
    Ok(1.0 / log_interpolate(w, 1.0, math::sqrt(math::ln(s) / s))?)
}

/// Gated-SiLU output scale: `1 / log_interpolate(1/(1 + 1/α²), 1/√2, 1/2)`.
pub fn gated_silu_scale(alpha_ffn_act: f64) -> Result<f64> {
    ensure_positive("alpha_ffn_act", alpha_ffn_act)?;
    let w = 1.0 / (1.0 + 1.0 / (alpha_ffn_act * alpha_ffn_act));
    Ok(1.0 / log_interpolate(w, core::f64::consts::FRAC_1_SQRT_2, 0.5)?)
}

/// Softmax-Jacobian compensation of the cross-entropy gradient, `s/√(s−1)`.
pub fn xent_beta(classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(Error::invalid("classes", alloc::format!("need at least 2, got {classes}")));
    }
    let s = classes as f64;
    Ok(s / math::sqrt(s - 1.0))
}

/// Forward and backward factors of the unit-scaled hardtanh.
pub fn hardtanh_scales() -> (f64, f64) {
    let y_scale = 1.0 / math::sqrt(1.0 - math::sqrt(2.0 / (core::f64::consts::PI * core::f64::consts::E)));
    let grad_scale = 1.0 / math::sqrt(math::erf(core::f64::consts::FRAC_1_SQRT_2));
    (y_scale, grad_scale)
}

/// Casts around one matmul. `input` and `weight` quantize the operands in the
/// forward pass, `grad_out` quantizes the gradient arriving at the product.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MatmulCasts {
    pub input: Option<FloatFormat>,
    pub weight: Option<FloatFormat>,
    pub grad_out: Option<FloatFormat>,
    /// Normalize the input by its std before the input cast.
    pub dynamic_rescale: bool,
}

/// Nodes of one scaled matmul, for RMS reporting: the operands as the raw
/// product sees them, the raw product itself (whose gradient is the
/// grad-output), and the scaled output.
#[derive(Clone, Copy, Debug)]
pub struct MatmulTrace {
    /// The input as handed to the input cast (after any dynamic rescale).
    pub cast_input: Var,
    pub input: Var,
    pub weight: Var,
    pub product: Var,
    pub out: Var,
}

fn matmul_dims(tape: &Tape, x: Var, w: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    let (sx, sw) = (tape.shape(x), tape.shape(w));
    if sw.len() != 2 || sx.is_empty() || *sx.last().unwrap() != sw[0] {
        return Err(Error::shape(op, sx, sw));
    }
    let fan_in = sw[0];
    let batch = tape.value(x).len() / fan_in.max(1);
    Ok((fan_in, sw[1], batch))
}

/// Shared body of the matmul-shaped ops.
fn scaled_matmul(
    tape: &mut Tape,
    x: Var,
    w: Var,
    scales: &OpScales,
    casts: &MatmulCasts,
) -> Result<MatmulTrace> {
    let mut xi = tape.scale_bwd(x, scales.betas_bwd[0])?;
    let wi = tape.scale_bwd(w, scales.betas_bwd[1])?;
    let mut sigma = None;
    if casts.dynamic_rescale {
        let s = stats(tape.value(xi).data())?.std;
        if s > 0.0 && s.is_finite() {
            xi = tape.scale(xi, 1.0 / s);
            sigma = Some(s);
        } else {
            warn!("dynamic rescale skipped: input std is {s}");
        }
    }
    let cast_input = xi;
    if let Some(f) = &casts.input {
        xi = tape.cast_fwd(xi, f);
    }
    let wq = match &casts.weight {
        Some(f) => tape.cast_fwd(wi, f),
        None => wi,
    };
    let product = tape.matmul(xi, wq)?;
    let mut y = product;
    if let Some(f) = &casts.grad_out {
        y = tape.cast_bwd(y, f);
    }
    if let Some(s) = sigma {
        y = tape.scale(y, s);
    }
    let out = tape.scale_fwd(y, scales.alpha_fwd)?;
    Ok(MatmulTrace {
        cast_input,
        input: xi,
        weight: wq,
        product,
        out,
    })
}

/// `x·w / √fan_in`. The input gradient factor `1/√fan_out` is constrained by
/// `c`; the weight gradient gets `1/√batch` (cut edge), where batch counts all
/// rows of `x`.
pub fn u_matmul(tape: &mut Tape, x: Var, w: Var, c: Constraint) -> Result<Var> {
    Ok(u_matmul_traced(tape, x, w, c, &MatmulCasts::default())?.out)
}

pub fn u_matmul_traced(
    tape: &mut Tape,
    x: Var,
    w: Var,
    c: Constraint,
    casts: &MatmulCasts,
) -> Result<MatmulTrace> {
    let (fan_in, fan_out, batch) = matmul_dims(tape, x, w, "u_matmul")?;
    let scales = apply_constraint(
        c,
        1.0 / math::sqrt(fan_in as f64),
        &[1.0 / math::sqrt(fan_out as f64)],
        &[1.0 / math::sqrt(batch as f64)],
    )?;
    scaled_matmul(tape, x, w, &scales, casts)
}

/// [`u_matmul`] with the input normalized by its std before the matmul and
/// the std multiplied back after. The std is a constant to the backward pass,
/// so the two factors cancel there and the gradients match [`u_matmul`]. Only
/// meaningful with a cast in between.
pub fn dynamic_rescale_matmul(
    tape: &mut Tape,
    x: Var,
    w: Var,
    c: Constraint,
    input_cast: Option<FloatFormat>,
) -> Result<Var> {
    let casts = MatmulCasts {
        input: input_cast,
        dynamic_rescale: true,
        ..MatmulCasts::default()
    };
    Ok(u_matmul_traced(tape, x, w, c, &casts)?.out)
}

/// Plain `x·w` with the casts of [`u_matmul_traced`] and no static scaling.
pub fn plain_matmul_traced(tape: &mut Tape, x: Var, w: Var, casts: &MatmulCasts) -> Result<MatmulTrace> {
    matmul_dims(tape, x, w, "matmul")?;
    let scales = OpScales {
        alpha_fwd: 1.0,
        betas_bwd: alloc::vec![1.0, 1.0],
    };
    scaled_matmul(tape, x, w, &scales, casts)
}

/// Output projection: forward `x·w / fan_in`, input gradient `1/√fan_in`,
/// weight gradient `1/√batch`. Both inputs are cut edges.
pub fn u_linear_output(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    Ok(u_linear_output_traced(tape, x, w, &MatmulCasts::default())?.out)
}

pub fn u_linear_output_traced(tape: &mut Tape, x: Var, w: Var, casts: &MatmulCasts) -> Result<MatmulTrace> {
    let (fan_in, _, batch) = matmul_dims(tape, x, w, "u_linear_output")?;
    let scales = apply_constraint(
        Constraint::None,
        1.0 / fan_in as f64,
        &[],
        &[1.0 / math::sqrt(fan_in as f64), 1.0 / math::sqrt(batch as f64)],
    )?;
    scaled_matmul(tape, x, w, &scales, casts)
}

/// Row gather from `table: [vocab, width]`; no scaling in either pass.
pub fn u_embedding_lookup(tape: &mut Tape, table: Var, ids: &[usize]) -> Result<Var> {
    tape.gather_rows(table, ids)
}

/// Multi-head attention on `[batch, heads, seq, d_head]` inputs with
/// `α_attn/d_head` logit scaling. Output and all three input gradients carry
/// [`attention_scale`].
pub fn u_attention(tape: &mut Tape, q: Var, k: Var, v: Var, alpha_attn: f64, causal: bool) -> Result<Var> {
    let shape = tape.shape(q).to_vec();
    if shape.len() != 4 || tape.shape(k) != shape.as_slice() || tape.shape(v) != shape.as_slice() {
        return Err(Error::shape("u_attention", &shape, tape.shape(k)));
    }
    let (seq, d_head) = (shape[2], shape[3]);
    let f = attention_scale(alpha_attn, d_head, seq)?;
    let (q, k, v) = (tape.scale_bwd(q, f)?, tape.scale_bwd(k, f)?, tape.scale_bwd(v, f)?);
    let out = attention(tape, q, k, v, alpha_attn / d_head as f64, causal)?;
    tape.scale_fwd(out, f)
}

/// Unscaled multi-head attention on `[batch, heads, seq, d_head]` with logits
/// multiplied by `logit_scale`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, logit_scale: f64, causal: bool) -> Result<Var> {
    let seq = tape.shape(q)[2];
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let mut logits = tape.scale(logits, logit_scale);
    if causal {
        let mask: Vec<bool> = (0..seq * seq).map(|i| i % seq > i / seq).collect();
        logits = tape.mask_fill(logits, &mask, &[seq, seq], f64::NEG_INFINITY)?;
    }
    let probs = tape.softmax(logits);
    tape.matmul(probs, v)
}

/// `x_in ⊙ x_gate ⊙ sigmoid(α·x_gate)` scaled by [`gated_silu_scale`] in
/// both passes.
pub fn u_gated_silu(tape: &mut Tape, x_in: Var, x_gate: Var, alpha_ffn_act: f64) -> Result<Var> {
    if tape.shape(x_in) != tape.shape(x_gate) {
        return Err(Error::shape("u_gated_silu", tape.shape(x_in), tape.shape(x_gate)));
    }
    let f = gated_silu_scale(alpha_ffn_act)?;
    let xi = tape.scale_bwd(x_in, f)?;
    let xg = tape.scale_bwd(x_gate, f)?;
    let y = gated_silu(tape, xi, xg, alpha_ffn_act)?;
    tape.scale_fwd(y, f)
}

/// Unscaled `x_in ⊙ x_gate ⊙ sigmoid(α·x_gate)`.
pub fn gated_silu(tape: &mut Tape, x_in: Var, x_gate: Var, alpha: f64) -> Result<Var> {
    let pre = tape.scale(x_gate, alpha);
    let gate = tape.sigmoid(pre);
    let h = tape.mul(x_in, x_gate)?;
    tape.mul(h, gate)
}

/// Mean cross-entropy of `softmax(α·logits)` against `targets`, for
/// `logits: [rows, classes]`. The gradient to the logits is multiplied by
/// [`xent_beta`] and, separately, by `rows` to undo the batch mean, which
/// together give it unit scale.
pub fn u_softmax_xent(tape: &mut Tape, logits: Var, targets: &[usize], alpha_loss_softmax: f64) -> Result<Var> {
    ensure_positive("alpha_loss_softmax", alpha_loss_softmax)?;
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::shape("u_softmax_xent", &shape, &[targets.len()]));
    }
    let beta = xent_beta(shape[1])?;
    let batch_factor = shape[0] as f64;
    let z = tape.scale_bwd(logits, batch_factor)?;
    let z = tape.scale_bwd(z, beta)?;
    let z = tape.scale(z, alpha_loss_softmax);
    softmax_xent(tape, z, targets)
}

/// Unscaled mean cross-entropy of `softmax(logits)` for `logits: [rows, classes]`.
pub fn softmax_xent(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax(logits);
    let picked = tape.pick(logp, targets)?;
    let mean = tape.mean(picked);
    Ok(tape.neg(mean))
}

/// Non-parametric RMSNorm; exact in both passes.
pub fn u_rmsnorm(tape: &mut Tape, x: Var, eps: f64) -> Var {
    tape.rmsnorm(x, eps)
}

/// Rotary position embedding; exact in both passes.
pub fn rope(tape: &mut Tape, x: Var, positions: &[usize]) -> Result<Var> {
    tape.rope(x, positions)
}

/// `clip(x, −1, 1)` with the factors of [`hardtanh_scales`].
pub fn u_hardtanh(tape: &mut Tape, x: Var, c: Constraint) -> Result<Var> {
    let (y_scale, grad_scale) = hardtanh_scales();
    let scales = apply_constraint(c, y_scale, &[grad_scale], &[])?;
    let xi = tape.scale_bwd(x, scales.betas_bwd[0])?;
    let y = tape.clamp(xi, -1.0, 1.0);
    tape.scale_fwd(y, scales.alpha_fwd)
}
