//! Llama-style pre-norm decoder: RMSNorm, RoPE, SwiGLU, un-tied embeddings
//! and non-trainable norms, in u-μP, μP and SP variants.
//!
//! Depth is counted in residual branches throughout: a model with `n_blocks`
//! blocks has `L = 2·n_blocks` (one attention and one FFN branch per block).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::{stats, FloatFormat, FormatKind};
use crate::parametrization::{
    abc_multipliers, init_param, lr_for_param, mup_branch_multiplier, ParamKind, ParamSpec, ParamTag, Scheme,
    SchemeKind,
};
use crate::residual::{branch_input, build_schedule, residual_add, ResidualSchedule};
use crate::rng::Rng;
use crate::scaled_ops::{
    attention, gated_silu, plain_matmul_traced, softmax_xent, u_attention, u_embedding_lookup, u_gated_silu,
    u_linear_output_traced, u_matmul_traced, u_rmsnorm, u_softmax_xent, Constraint, MatmulCasts, MatmulTrace,
};
use crate::tensor::{Gradients, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-6;

/// The linear layers of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Q,
    K,
    V,
    AttnOut,
    Gate,
    Up,
    Down,
    Head,
}

impl Projection {
    pub const ALL: [Projection; 8] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::AttnOut,
        Projection::Gate,
        Projection::Up,
        Projection::Down,
        Projection::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::AttnOut => "o",
            Projection::Gate => "gate",
            Projection::Up => "up",
            Projection::Down => "down",
            Projection::Head => "head",
        }
    }

    /// Attention out and FFN down: the inputs whose scale grows in training.
    pub fn is_branch_output(self) -> bool {
        matches!(self, Projection::AttnOut | Projection::Down)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionMode {
    #[default]
    Full,
    /// E4M3 everywhere except E5M2 inputs to the attention-out and FFN-down projections.
    Fp8Primary,
    /// As `Fp8Primary` but those two inputs stay unquantized.
    Fp8Partial,
}

/// Where emulated FP8 casts go. Casts sit at the boundaries of the linear
/// layers only; the attention score and value products stay high precision.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrecisionPolicy {
    pub mode: PrecisionMode,
    /// Turns on dynamic rescaling for `dynamic_rescale_layers`.
    pub dynamic_rescale: bool,
    pub dynamic_rescale_layers: Vec<Projection>,
}

impl Default for PrecisionPolicy {
    fn default() -> Self {
        Self {
            mode: PrecisionMode::Full,
            dynamic_rescale: false,
            dynamic_rescale_layers: vec![Projection::AttnOut, Projection::Down],
        }
    }
}

impl PrecisionPolicy {
    pub fn new(mode: PrecisionMode) -> Self {
        Self { mode, ..Self::default() }
    }

    /// Format of the activation input of `p`.
    pub fn input_format(&self, p: Projection) -> Option<FormatKind> {
        match (self.mode, p.is_branch_output()) {
            (PrecisionMode::Full, _) => None,
            (PrecisionMode::Fp8Primary, true) => Some(FormatKind::E5M2),
            (PrecisionMode::Fp8Partial, true) => None,
            (_, false) => Some(FormatKind::E4M3),
        }
    }

    /// Format of the weight and of the output gradient of `p`.
    pub fn weight_format(&self, _p: Projection) -> Option<FormatKind> {
        match self.mode {
            PrecisionMode::Full => None,
            _ => Some(FormatKind::E4M3),
        }
    }

    pub fn casts(&self, p: Projection) -> MatmulCasts {
        let fmt = |k: Option<FormatKind>| k.map(FloatFormat::preset);
        MatmulCasts {
            input: fmt(self.input_format(p)),
            weight: fmt(self.weight_format(p)),
            grad_out: fmt(self.weight_format(p)),
            dynamic_rescale: self.dynamic_rescale && self.dynamic_rescale_layers.contains(&p),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub width: usize,
    pub n_blocks: usize,
    /// `None` means `width / d_head`.
    pub n_heads: Option<usize>,
    pub d_head: usize,
    /// `None` means `8·width/3` rounded up to a multiple of 8.
    pub ffn_width: Option<usize>,
    pub vocab: usize,
    pub seq_len: usize,
    pub scheme: Scheme,
    pub tied_embeddings: bool,
    pub precision: PrecisionPolicy,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            width: 128,
            n_blocks: 4,
            n_heads: None,
            d_head: 64,
            ffn_width: None,
            vocab: 256,
            seq_len: 128,
            scheme: Scheme::u_mup(1.0),
            tied_embeddings: false,
            precision: PrecisionPolicy::default(),
        }
    }
}

impl TransformerConfig {
    pub fn heads(&self) -> usize {
        self.n_heads.unwrap_or(self.width / self.d_head.max(1))
    }

    pub fn ffn(&self) -> usize {
        self.ffn_width.unwrap_or((8 * self.width).div_ceil(3).div_ceil(8) * 8)
    }

    /// Residual depth `L = 2·n_blocks`.
    pub fn depth(&self) -> usize {
        2 * self.n_blocks
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: String| Err(Error::invalid(name, reason));
        if self.width == 0 || self.d_head == 0 || self.n_blocks == 0 || self.seq_len == 0 {
            return bad("model", String::from("width, d_head, n_blocks and seq_len must be positive"));
        }
        if self.heads() == 0 || self.heads() * self.d_head != self.width {
            return bad(
                "model.n_heads",
                format!("n_heads ({}) × d_head ({}) must equal width ({})", self.heads(), self.d_head, self.width),
            );
        }
        if !self.d_head.is_multiple_of(2) {
            return bad("model.d_head", format!("rotary embedding needs an even d_head, got {}", self.d_head));
        }
        if self.vocab < 2 {
            return bad("model.vocab", format!("need at least 2, got {}", self.vocab));
        }
        if self.ffn() == 0 {
            return bad("model.ffn_width", String::from("must be positive"));
        }
        self.scheme.hps.validate()
    }

    /// Every parameter tensor in storage order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (d, f, v) = (self.width, self.ffn(), self.vocab);
        let spec = |name: String, fan_in: usize, fan_out: usize, tag: ParamTag| ParamSpec {
            name,
            shape: vec![fan_in, fan_out],
            tag,
        };
        let hidden = |fan_in, fan_out, end| ParamTag::new(ParamKind::WeightHidden, fan_in, fan_out, d).on_branch(end);
        let mut out = vec![spec(String::from("embed"), v, d, ParamTag::new(ParamKind::WeightInput, v, d, d))];
        for i in 0..self.n_blocks {
            for (p, fi, fo) in [
                (Projection::Q, d, d),
                (Projection::K, d, d),
                (Projection::V, d, d),
                (Projection::AttnOut, d, d),
                (Projection::Gate, d, f),
                (Projection::Up, d, f),
                (Projection::Down, f, d),
            ] {
                out.push(spec(layer_name(i, p), fi, fo, hidden(fi, fo, p.is_branch_output())));
            }
        }
        if !self.tied_embeddings {
            out.push(spec(String::from("head"), d, v, head_tag(self)));
        }
        out
    }
}

fn head_tag(cfg: &TransformerConfig) -> ParamTag {
    ParamTag::new(ParamKind::WeightOutput, cfg.width, cfg.vocab, cfg.width)
}

/// `blocks.{i}.attn.q`, `blocks.{i}.ffn.down`, ...
pub fn layer_name(block: usize, p: Projection) -> String {
    match p {
        Projection::Head => String::from("head"),
        Projection::Q | Projection::K | Projection::V | Projection::AttnOut => {
            format!("blocks.{block}.attn.{}", p.name())
        }
        _ => format!("blocks.{block}.ffn.{}", p.name()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: TransformerConfig,
    pub specs: Vec<ParamSpec>,
    pub params: Vec<Tensor>,
    /// Multiplier the model applies to each tensor before its op. Under u-μP
    /// the ops already carry the scheme's `A`, so this starts at 1.
    pub multipliers: Vec<f64>,
    /// `C/η` (times any per-tensor override) for each tensor.
    pub lr_mults: Vec<f64>,
    /// Multiplier on the readout when it shares the embedding table.
    pub tied_head_multiplier: f64,
    /// Factor on Adam's ε for each tensor. Gradients of a shifted tensor grow
    /// by θ, so the exact twin scales ε with them.
    pub eps_mults: Vec<f64>,
    schedule: Option<ResidualSchedule>,
}

/// A linear layer's nodes on the tape.
#[derive(Clone, Debug)]
pub struct MatmulRecord {
    pub name: String,
    pub projection: Projection,
    pub trace: MatmulTrace,
}

/// Handles into one recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub loss: Var,
    pub params: Vec<Var>,
    pub matmuls: Vec<MatmulRecord>,
    /// The residual stream after the embedding and after every branch.
    pub stream: Vec<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmsRole {
    Input,
    Weight,
    GradOut,
}

impl RmsRole {
    pub fn name(self) -> &'static str {
        match self {
            RmsRole::Input => "input",
            RmsRole::Weight => "weight",
            RmsRole::GradOut => "grad_out",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsRow {
    pub step: u64,
    pub tensor: String,
    pub role: RmsRole,
    pub rms: f64,
    pub abs_max: f64,
}

pub fn build_model(cfg: TransformerConfig, rng: &mut Rng) -> Result<Model> {
    cfg.validate()?;
    let specs = cfg.param_specs();
    let depth = cfg.depth();
    let params = specs
        .iter()
        .map(|s| init_param(s, depth, &cfg.scheme, rng))
        .collect::<Result<Vec<_>>>()?;
    Model::from_params(cfg, params)
}

impl Model {
    /// Wraps existing parameter values, e.g. from a checkpoint.
    pub fn from_params(cfg: TransformerConfig, params: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let specs = cfg.param_specs();
        if specs.len() != params.len() {
            return Err(Error::invalid(
                "params",
                format!("model has {} tensors, got {}", specs.len(), params.len()),
            ));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.shape.as_slice() != p.shape() {
                return Err(Error::shape("Model::from_params", &s.shape, p.shape()));
            }
        }
        let depth = cfg.depth();
        let own_multiplier = |tag: &ParamTag| -> Result<f64> {
            Ok(match cfg.scheme.kind {
                SchemeKind::UMup => 1.0,
                _ => abc_multipliers(tag, depth, &cfg.scheme)?.a,
            })
        };
        let multipliers = specs.iter().map(|s| own_multiplier(&s.tag)).collect::<Result<Vec<_>>>()?;
        let lr_mults = specs
            .iter()
            .map(|s| lr_for_param(s, depth, &cfg.scheme, 1.0))
            .collect::<Result<Vec<_>>>()?;
        let tied_head_multiplier = own_multiplier(&head_tag(&cfg))?;
        let schedule = match cfg.scheme.kind {
            SchemeKind::UMup => Some(build_schedule(depth, cfg.scheme.hps.alpha_res, cfg.scheme.hps.alpha_res_attn_ratio)?),
            _ => None,
        };
        Ok(Self {
            cfg,
            eps_mults: vec![1.0; specs.len()],
            specs,
            params,
            multipliers,
            lr_mults,
            tied_head_multiplier,
            schedule,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn residual_schedule(&self) -> Option<&ResidualSchedule> {
        self.schedule.as_ref()
    }

    /// The abc-symmetric twin `(A·θ, B/θ, C/θ)`: every multiplier times θ,
    /// every tensor divided by θ, every LR multiplier divided by θ, and Adam's
    /// ε times θ to match the gradients.
    pub fn abc_shifted(&self, theta: f64) -> Result<Model> {
        crate::error::ensure_positive("theta", theta)?;
        let mut m = self.clone();
        for p in &mut m.params {
            *p = p.map(|w| w / theta);
        }
        for a in &mut m.multipliers {
            *a *= theta;
        }
        for c in &mut m.lr_mults {
            *c /= theta;
        }
        for e in &mut m.eps_mults {
            *e *= theta;
        }
        m.tied_head_multiplier *= theta;
        Ok(m)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<usize> {
        let row = self.cfg.seq_len + 1;
        if tokens.is_empty() || !tokens.len().is_multiple_of(row) {
            return Err(Error::invalid(
                "tokens",
                format!("need whole rows of seq_len + 1 = {row} ids, got {}", tokens.len()),
            ));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::IndexOutOfRange {
                op: "tokens",
                index: t,
                size: self.cfg.vocab,
            });
        }
        Ok(tokens.len() / row)
    }

    /// Records the forward pass of `tokens` (`[batch, seq_len + 1]`, row-major)
    /// on `tape`, ending in the mean next-token cross-entropy.
    pub fn forward(&self, tape: &mut Tape, tokens: &[usize]) -> Result<ForwardPass> {
        let batch = self.check_tokens(tokens)?;
        let cfg = &self.cfg;
        let (s, d, h, dh) = (cfg.seq_len, cfg.width, cfg.heads(), cfg.d_head);
        let rows = batch * s;
        let mut inputs = Vec::with_capacity(rows);
        let mut targets = Vec::with_capacity(rows);
        for r in tokens.chunks(s + 1) {
            inputs.extend_from_slice(&r[..s]);
            targets.extend_from_slice(&r[1..]);
        }
        let positions: Vec<usize> = (0..s).collect();
        let params: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let umup = cfg.scheme.kind == SchemeKind::UMup;
        let hps = &cfg.scheme.hps;
        let mut matmuls = Vec::new();
        let mut stream_log = Vec::new();

        let embed = self.scaled(tape, params[0], self.multipliers[0]);
        let mut stream = u_embedding_lookup(tape, embed, &inputs)?;
        stream_log.push(stream);

        let branch_mult = match cfg.scheme.kind {
            SchemeKind::Mup => mup_branch_multiplier(cfg.depth(), &cfg.scheme),
            _ => 1.0,
        };
        let mut linear = |tape: &mut Tape, x: Var, idx: usize, block: usize, p: Projection| -> Result<Var> {
            let w = self.scaled(tape, params[idx], self.multipliers[idx]);
            let casts = cfg.precision.casts(p);
            let trace = if umup {
                u_matmul_traced(tape, x, w, Constraint::ToOutputScale, &casts)?
            } else {
                plain_matmul_traced(tape, x, w, &casts)?
            };
            matmuls.push(MatmulRecord {
                name: layer_name(block, p),
                projection: p,
                trace,
            });
            Ok(trace.out)
        };

        for blk in 0..cfg.n_blocks {
            let base = 1 + 7 * blk;
            // attention branch
            let coeffs = self.schedule.as_ref().map(|sch| *sch.coeffs(2 * blk + 1));
            let x = match coeffs {
                Some(c) => branch_input(tape, stream, c.a)?,
                None => stream,
            };
            let x = u_rmsnorm(tape, x, NORM_EPS);
            let mut heads = [x; 3];
            for (j, p) in [Projection::Q, Projection::K, Projection::V].into_iter().enumerate() {
                let y = linear(tape, x, base + j, blk, p)?;
                let y = tape.reshape(y, &[batch, s, h, dh])?;
                heads[j] = tape.permute(y, &[0, 2, 1, 3])?;
            }
            let q = tape.rope(heads[0], &positions)?;
            let k = tape.rope(heads[1], &positions)?;
            let att = if umup {
                u_attention(tape, q, k, heads[2], hps.alpha_attn_softmax, true)?
            } else {
                let scale = match cfg.scheme.kind {
                    SchemeKind::Mup => hps.alpha_attn / dh as f64,
                    _ => 1.0 / math::sqrt(dh as f64),
                };
                attention(tape, q, k, heads[2], scale, true)?
            };
            let att = tape.permute(att, &[0, 2, 1, 3])?;
            let att = tape.reshape(att, &[rows, d])?;
            let out = linear(tape, att, base + 3, blk, Projection::AttnOut)?;
            stream = self.merge(tape, out, stream, coeffs.map(|c| (c.a, c.b)), branch_mult)?;
            stream_log.push(stream);

            // FFN branch
            let coeffs = self.schedule.as_ref().map(|sch| *sch.coeffs(2 * blk + 2));
            let x = match coeffs {
                Some(c) => branch_input(tape, stream, c.a)?,
                None => stream,
            };
            let x = u_rmsnorm(tape, x, NORM_EPS);
            let gate = linear(tape, x, base + 4, blk, Projection::Gate)?;
            let up = linear(tape, x, base + 5, blk, Projection::Up)?;
            let act = if umup {
                u_gated_silu(tape, up, gate, hps.alpha_ffn_act)?
            } else {
                gated_silu(tape, up, gate, 1.0)?
            };
            let out = linear(tape, act, base + 6, blk, Projection::Down)?;
            stream = self.merge(tape, out, stream, coeffs.map(|c| (c.a, c.b)), branch_mult)?;
            stream_log.push(stream);
        }

        let x = u_rmsnorm(tape, stream, NORM_EPS);
        let (head, head_mult) = if cfg.tied_embeddings {
            (tape.transpose(params[0])?, self.tied_head_multiplier)
        } else {
            let i = params.len() - 1;
            (params[i], self.multipliers[i])
        };
        let head = self.scaled(tape, head, head_mult);
        let casts = cfg.precision.casts(Projection::Head);
        let trace = if umup {
            u_linear_output_traced(tape, x, head, &casts)?
        } else {
            plain_matmul_traced(tape, x, head, &casts)?
        };
        matmuls.push(MatmulRecord {
            name: layer_name(0, Projection::Head),
            projection: Projection::Head,
            trace,
        });
        let loss = if umup {
            u_softmax_xent(tape, trace.out, &targets, hps.alpha_loss_softmax)?
        } else {
            softmax_xent(tape, trace.out, &targets)?
        };
        Ok(ForwardPass {
            loss,
            params,
            matmuls,
            stream: stream_log,
        })
    }

    fn scaled(&self, tape: &mut Tape, w: Var, mult: f64) -> Var {
        if mult == 1.0 {
            w
        } else {
            tape.scale(w, mult)
        }
    }

    fn merge(&self, tape: &mut Tape, out: Var, skip: Var, ab: Option<(f64, f64)>, mult: f64) -> Result<Var> {
        match ab {
            Some((a, b)) => residual_add(tape, out, skip, a, b),
            None => {
                let out = self.scaled(tape, out, mult);
                tape.add(out, skip)
            }
        }
    }

    /// Loss and per-tensor gradients in storage order.
    pub fn loss_and_grads(&self, tape: &mut Tape, tokens: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        let fp = self.forward(tape, tokens)?;
        let mut grads = tape.backward(fp.loss)?;
        let loss = tape.value(fp.loss).item();
        let out = fp
            .params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((loss, out))
    }
}

/// Mean next-token cross-entropy of `tokens` (`[batch, seq_len + 1]`).
pub fn forward_loss(model: &Model, tokens: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let fp = model.forward(&mut tape, tokens)?;
    Ok(tape.value(fp.loss).item())
}

/// Input, weight and output-gradient statistics of every linear layer, three
/// rows per matmul in layer order.
pub fn rms_report(model: &Model, tokens: &[usize], step: u64) -> Result<Vec<RmsRow>> {
    let mut tape = Tape::new();
    let fp = model.forward(&mut tape, tokens)?;
    let grads = tape.backward(fp.loss)?;
    rms_rows(&tape, &fp, &grads, step)
}

/// [`rms_report`] over an already recorded pass.
pub fn rms_rows(tape: &Tape, fp: &ForwardPass, grads: &Gradients, step: u64) -> Result<Vec<RmsRow>> {
    let mut rows = Vec::with_capacity(3 * fp.matmuls.len());
    for m in &fp.matmuls {
        let go = grads.get_or_zeros(m.trace.product, tape.shape(m.trace.product));
        for (role, t) in [
            (RmsRole::Input, tape.value(m.trace.input)),
            (RmsRole::Weight, tape.value(m.trace.weight)),
            (RmsRole::GradOut, &go),
        ] {
            let st = stats(t.data())?;
            rows.push(RmsRow {
                step,
                tensor: m.name.clone(),
                role,
                rms: st.rms,
                abs_max: st.abs_max,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{AdamConfig, AdamState};
    use crate::parametrization::HpSet;
    use crate::tensor::{Precision, ScalingMode};

    fn cfg(width: usize, blocks: usize, scheme: Scheme) -> TransformerConfig {
        TransformerConfig {
            width,
            n_blocks: blocks,
            d_head: 16,
            seq_len: 16,
            scheme,
            ..TransformerConfig::default()
        }
    }

    fn random_tokens(batch: usize, seq: usize, vocab: usize, seed: u64) -> Vec<usize> {
        let mut rng = Rng::new(seed);
        (0..batch * (seq + 1)).map(|_| rng.below(vocab)).collect()
    }

    #[test]
    fn parameter_count_matches_shapes() {
        let c = TransformerConfig {
            width: 256,
            n_blocks: 2,
            vocab: 256,
            ..TransformerConfig::default()
        };
        // 8·256/3 = 682.67 → 683 → 688
        assert_eq!(c.ffn(), 688);
        let m = build_model(c, &mut Rng::new(0)).unwrap();
        let per_block = 4 * 256 * 256 + 3 * 256 * 688;
        assert_eq!(m.param_count(), 2 * 256 * 256 + 2 * per_block);
        assert_eq!(m.specs.len(), 2 + 2 * 7);
        assert_eq!(m.specs[4].name, "blocks.0.attn.o");
        assert!(m.specs[4].tag.branch_output && m.specs[7].tag.branch_output);
    }

    #[test]
    fn rejects_bad_configs_and_tokens() {
        let mut c = cfg(32, 1, Scheme::u_mup(1.0));
        c.n_heads = Some(3);
        assert!(build_model(c, &mut Rng::new(0)).is_err());
        let c = cfg(32, 1, Scheme::u_mup(1.0));
        let m = build_model(c, &mut Rng::new(0)).unwrap();
        assert!(forward_loss(&m, &[1, 2, 3]).is_err());
        let mut t = random_tokens(1, 16, 256, 1);
        t[3] = 256;
        assert!(matches!(forward_loss(&m, &t), Err(Error::IndexOutOfRange { index: 256, .. })));
    }

    #[test]
    fn init_loss_is_near_uniform() {
        for scheme in [Scheme::u_mup(1.0), Scheme::sp(1.0)] {
            let m = build_model(cfg(64, 2, scheme), &mut Rng::new(3)).unwrap();
            let loss = forward_loss(&m, &random_tokens(4, 16, 256, 9)).unwrap();
            let lnv = (256f64).ln();
            assert!((loss - lnv).abs() < 0.05 * lnv, "{loss}");
        }
    }

    #[test]
    fn umup_init_rms_is_unit_away_from_attention() {
        let mut c = cfg(128, 2, Scheme::u_mup(1.0));
        (c.seq_len, c.d_head) = (128, 64);
        let m = build_model(c, &mut Rng::new(5)).unwrap();
        let rows = rms_report(&m, &random_tokens(4, 128, 256, 2), 0).unwrap();
        assert_eq!(rows.len(), 3 * (2 * 7 + 1));
        for r in &rows {
            // Softmax gradients are small at init, and the second block's
            // attention averages positions that the first block correlated.
            let qk_grad = r.role == RmsRole::GradOut && (r.tensor.ends_with(".q") || r.tensor.ends_with(".k"));
            let late_attn_out = r.role == RmsRole::Input && r.tensor == "blocks.1.attn.o";
            if !(qk_grad || late_attn_out) {
                assert!((0.5..=2.0).contains(&r.rms), "{} {:?} {}", r.tensor, r.role, r.rms);
            }
        }
    }

    #[test]
    fn residual_stream_has_unit_std_before_positions_mix() {
        for blocks in [1, 2, 4, 8] {
            let mut c = cfg(64, blocks, Scheme::u_mup(1.0));
            c.seq_len = 128;
            let m = build_model(c, &mut Rng::new(blocks as u64)).unwrap();
            let mut tape = Tape::new();
            let fp = m.forward(&mut tape, &random_tokens(2, 128, 256, 4)).unwrap();
            assert_eq!(fp.stream.len(), 1 + 2 * blocks);
            // the embedding and the first block see independent positions
            for &v in &fp.stream[..3] {
                let sd = stats(tape.value(v).data()).unwrap().std;
                assert!((0.9..=1.1).contains(&sd), "blocks {blocks}: {sd}");
            }
        }
    }

    #[test]
    fn every_alpha_reaches_the_graph() {
        let tokens = random_tokens(2, 16, 256, 7);
        let base = build_model(cfg(32, 1, Scheme::u_mup(1.0)), &mut Rng::new(1)).unwrap();
        let l0 = forward_loss(&base, &tokens).unwrap();
        for name in ["alpha_ffn_act", "alpha_attn_softmax", "alpha_res", "alpha_res_attn_ratio", "alpha_loss_softmax"] {
            let mut hps = HpSet::default();
            hps.set(name, 4.0).unwrap();
            let c = cfg(32, 1, Scheme::new(SchemeKind::UMup, hps));
            let m = build_model(c, &mut Rng::new(1)).unwrap();
            assert_ne!(forward_loss(&m, &tokens).unwrap(), l0, "{name}");
        }
    }

    #[test]
    fn fp8_casts_by_mode() {
        let primary = PrecisionPolicy::new(PrecisionMode::Fp8Primary);
        let partial = PrecisionPolicy::new(PrecisionMode::Fp8Partial);
        for p in Projection::ALL {
            let (a, b) = (primary.casts(p), partial.casts(p));
            assert_eq!(a.weight.unwrap().kind, FormatKind::E4M3);
            assert_eq!(a.grad_out.unwrap().kind, FormatKind::E4M3);
            if p.is_branch_output() {
                assert_eq!(a.input.unwrap().kind, FormatKind::E5M2);
                assert!(b.input.is_none());
                assert_eq!((a.weight, a.grad_out), (b.weight, b.grad_out));
            } else {
                assert_eq!(a, b);
                assert_eq!(a.input.unwrap().kind, FormatKind::E4M3);
            }
            assert!(!a.dynamic_rescale);
        }
        assert_eq!(PrecisionPolicy::default().casts(Projection::Q), MatmulCasts::default());
    }

    #[test]
    fn fp8_init_loss_close_to_full() {
        let mut c = cfg(64, 2, Scheme::u_mup(1.0));
        let tokens = random_tokens(4, 16, 256, 11);
        let full = forward_loss(&build_model(c.clone(), &mut Rng::new(2)).unwrap(), &tokens).unwrap();
        c.precision = PrecisionPolicy::new(PrecisionMode::Fp8Primary);
        let fp8 = forward_loss(&build_model(c, &mut Rng::new(2)).unwrap(), &tokens).unwrap();
        assert!(((fp8 - full) / full).abs() < 0.01, "{full} {fp8}");
    }

    #[test]
    fn schemes_differ_and_step_stays_finite() {
        let tokens = random_tokens(2, 16, 256, 3);
        let mut losses = Vec::new();
        for scheme in [Scheme::u_mup(1.0), Scheme::mup(1.0 / 64.0)] {
            let mut m = build_model(cfg(32, 1, scheme), &mut Rng::new(8)).unwrap();
            let (l0, g) = m.loss_and_grads(&mut Tape::new(), &tokens).unwrap();
            let mut st = AdamState::new(&m.params);
            let lrs: Vec<f64> = m.lr_mults.iter().map(|c| c * 0.01).collect();
            st.step(&mut m.params, &g, &lrs, &AdamConfig::default()).unwrap();
            let l1 = forward_loss(&m, &tokens).unwrap();
            assert!(l1.is_finite());
            losses.push(l0);
        }
        assert_ne!(losses[0], losses[1]);
    }

    #[test]
    fn abc_shift_keeps_the_function() {
        let tokens = random_tokens(2, 16, 256, 3);
        for scheme in [Scheme::mup(0.01), Scheme::u_mup(1.0), Scheme::sp(0.01)] {
            let m = build_model(cfg(32, 1, scheme), &mut Rng::new(8)).unwrap();
            let t = m.abc_shifted(2.0).unwrap();
            let (a, b) = (forward_loss(&m, &tokens).unwrap(), forward_loss(&t, &tokens).unwrap());
            assert!((a - b).abs() < 1e-12 * a, "{a} {b}");
        }
    }

    #[test]
    fn tied_embeddings_share_the_table() {
        let mut c = cfg(32, 1, Scheme::mup(0.01));
        c.tied_embeddings = true;
        let m = build_model(c, &mut Rng::new(1)).unwrap();
        assert_eq!(m.params.len(), 1 + 7);
        let (loss, g) = m.loss_and_grads(&mut Tape::new(), &random_tokens(2, 16, 256, 1)).unwrap();
        assert!(loss.is_finite() && g[0].data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn gradients_match_exact_twin_up_to_constants() {
        let tokens = random_tokens(2, 16, 256, 3);
        let m = build_model(cfg(32, 2, Scheme::u_mup(1.0)), &mut Rng::new(8)).unwrap();
        let (_, scaled) = m.loss_and_grads(&mut Tape::new(), &tokens).unwrap();
        let (_, exact) = m
            .loss_and_grads(&mut Tape::with_modes(Precision::F64, ScalingMode::Exact), &tokens)
            .unwrap();
        for (i, (g, e)) in scaled.iter().zip(&exact).enumerate() {
            let ratios: Vec<f64> = g
                .data()
                .iter()
                .zip(e.data())
                .filter(|(_, e)| e.abs() > 1e-14)
                .map(|(g, e)| g / e)
                .collect();
            let st = stats(&ratios).unwrap();
            assert!(st.mean > 0.0 && st.std / st.mean < 1e-6, "{} {:?}", m.specs[i].name, st);
        }
    }
}

