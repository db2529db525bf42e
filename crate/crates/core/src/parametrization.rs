//! abc-parametrizations: parameter multiplier `A`, init std `B` and Adam LR
//! multiplier `C` for each weight, under u-μP, μP and a standard baseline.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    WeightInput,
    WeightHidden,
    WeightOutput,
    Bias,
    Norm,
}

/// Role of one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamTag {
    pub kind: ParamKind,
    pub fan_in: usize,
    pub fan_out: usize,
    /// Lives inside an attention or FFN branch.
    pub on_residual_branch: bool,
    /// Last projection of its branch (attention out, FFN down).
    pub branch_output: bool,
    /// Model width `d_model`; the width that `base_width` is compared to.
    pub width: usize,
}

impl ParamTag {
    pub fn new(kind: ParamKind, fan_in: usize, fan_out: usize, width: usize) -> Self {
        Self {
            kind,
            fan_in,
            fan_out,
            on_residual_branch: false,
            branch_output: false,
            width,
        }
    }

    pub fn on_branch(mut self, branch_output: bool) -> Self {
        self.on_residual_branch = true;
        self.branch_output = branch_output;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    UMup,
    Mup,
    Sp,
}

impl core::str::FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().replace('-', "_").as_str() {
            "u_mup" | "umup" | "u_μp" => Ok(Self::UMup),
            "mup" | "μp" => Ok(Self::Mup),
            "sp" => Ok(Self::Sp),
            _ => Err(Error::invalid("scheme", alloc::format!("unknown scheme {s:?}"))),
        }
    }
}

impl SchemeKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::UMup => "u_mup",
            Self::Mup => "mup",
            Self::Sp => "sp",
        }
    }
}

/// Hyperparameters of all three schemes. Fields a scheme does not use are
/// ignored by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpSet {
    pub eta: f64,
    pub alpha_ffn_act: f64,
    pub alpha_attn_softmax: f64,
    pub alpha_res: f64,
    pub alpha_res_attn_ratio: f64,
    pub alpha_loss_softmax: f64,
    pub sigma_init: f64,
    pub alpha_emb: f64,
    pub alpha_attn: f64,
    pub alpha_out: f64,
    pub eta_emb_hat: f64,
    /// Per-tensor LR multipliers keyed by parameter name; missing means 1.
    pub lr_mults: BTreeMap<String, f64>,
}

impl Default for HpSet {
    fn default() -> Self {
        Self {
            eta: 1.0,
            alpha_ffn_act: 1.0,
            alpha_attn_softmax: 1.0,
            alpha_res: 1.0,
            alpha_res_attn_ratio: 1.0,
            alpha_loss_softmax: 1.0,
            sigma_init: 1.0,
            alpha_emb: 1.0,
            alpha_attn: 1.0,
            alpha_out: 1.0,
            eta_emb_hat: 1.0,
            lr_mults: BTreeMap::new(),
        }
    }
}

/// Names accepted by [`HpSet::get`] / [`HpSet::set`].
pub const HP_NAMES: &[&str] = &[
    "eta",
    "alpha_ffn_act",
    "alpha_attn_softmax",
    "alpha_res",
    "alpha_res_attn_ratio",
    "alpha_loss_softmax",
    "sigma_init",
    "alpha_emb",
    "alpha_attn",
    "alpha_out",
    "eta_emb_hat",
];

impl HpSet {
    fn slot(&mut self, name: &str) -> Option<&mut f64> {
        Some(match name {
            "eta" => &mut self.eta,
            "alpha_ffn_act" => &mut self.alpha_ffn_act,
            "alpha_attn_softmax" => &mut self.alpha_attn_softmax,
            "alpha_res" => &mut self.alpha_res,
            "alpha_res_attn_ratio" => &mut self.alpha_res_attn_ratio,
            "alpha_loss_softmax" => &mut self.alpha_loss_softmax,
            "sigma_init" => &mut self.sigma_init,
            "alpha_emb" => &mut self.alpha_emb,
            "alpha_attn" => &mut self.alpha_attn,
            "alpha_out" => &mut self.alpha_out,
            "eta_emb_hat" => &mut self.eta_emb_hat,
            _ => return None,
        })
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        Ok(match name {
            "eta" => self.eta,
            "alpha_ffn_act" => self.alpha_ffn_act,
            "alpha_attn_softmax" => self.alpha_attn_softmax,
            "alpha_res" => self.alpha_res,
            "alpha_res_attn_ratio" => self.alpha_res_attn_ratio,
            "alpha_loss_softmax" => self.alpha_loss_softmax,
            "sigma_init" => self.sigma_init,
            "alpha_emb" => self.alpha_emb,
            "alpha_attn" => self.alpha_attn,
            "alpha_out" => self.alpha_out,
            "eta_emb_hat" => self.eta_emb_hat,
            _ => return Err(Error::invalid("hp", alloc::format!("unknown HP {name:?}"))),
        })
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        ensure_positive("hp value", value)?;
        match self.slot(name) {
            Some(v) => {
                *v = value;
                Ok(())
            }
            None => Err(Error::invalid("hp", alloc::format!("unknown HP {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for name in HP_NAMES {
            ensure_positive(name, self.get(name)?)?;
        }
        for v in self.lr_mults.values() {
            ensure_positive("lr_mults", *v)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scheme {
    pub kind: SchemeKind,
    pub hps: HpSet,
    /// μP only.
    pub base_width: usize,
    /// μP only; counted in residual branches like the model depth.
    pub base_depth: usize,
}

impl Default for Scheme {
    fn default() -> Self {
        Self::u_mup(1.0)
    }
}

impl Scheme {
    pub fn new(kind: SchemeKind, hps: HpSet) -> Self {
        Self {
            kind,
            hps,
            base_width: 256,
            base_depth: 8,
        }
    }

    pub fn u_mup(eta: f64) -> Self {
        Self::new(SchemeKind::UMup, HpSet { eta, ..HpSet::default() })
    }

    pub fn mup(eta: f64) -> Self {
        Self::new(SchemeKind::Mup, HpSet { eta, ..HpSet::default() })
    }

    pub fn sp(eta: f64) -> Self {
        Self::new(SchemeKind::Sp, HpSet { eta, ..HpSet::default() })
    }

    /// `σ_init`, which u-μP does not have.
    pub fn sigma_init(&self) -> Result<f64> {
        match self.kind {
            SchemeKind::UMup => Err(Error::NotAnHp("sigma_init")),
            _ => Ok(self.hps.sigma_init),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbcMultipliers {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Backward-only replacement for `a` on the input gradient (u-μP output layer).
    pub a_bwd_override: Option<f64>,
}

/// Multipliers of one tensor. `depth` counts residual branches (twice the
/// number of blocks). Branch-end residual multipliers of μP are not part of
/// any weight and come from [`mup_branch_multiplier`].
pub fn abc_multipliers(tag: &ParamTag, depth: usize, scheme: &Scheme) -> Result<AbcMultipliers> {
    if tag.fan_in == 0 || tag.fan_out == 0 || tag.width == 0 {
        return Err(Error::invalid("tag", alloc::format!("zero dimension in {tag:?}")));
    }
    if depth == 0 {
        return Err(Error::invalid("depth", String::from("must be positive")));
    }
    let hp = &scheme.hps;
    let fan_in = tag.fan_in as f64;
    let fan_out = tag.fan_out as f64;
    let depth_factor = |ratio: f64| if tag.on_residual_branch { math::sqrt(ratio) } else { 1.0 };
    let mut m = match scheme.kind {
        SchemeKind::UMup => {
            let (a, c, over) = match tag.kind {
                ParamKind::WeightInput => (1.0, hp.eta / math::sqrt(fan_out), None),
                ParamKind::WeightHidden => (1.0 / math::sqrt(fan_in), hp.eta / math::sqrt(fan_in), None),
                ParamKind::WeightOutput => (1.0 / fan_in, hp.eta, Some(1.0 / math::sqrt(fan_in))),
                ParamKind::Bias | ParamKind::Norm => (1.0, hp.eta, None),
            };
            AbcMultipliers {
                a,
                b: 1.0,
                c: c * depth_factor(1.0 / depth as f64),
                a_bwd_override: over,
            }
        }
        SchemeKind::Mup => {
            if scheme.base_width == 0 || scheme.base_depth == 0 {
                return Err(Error::invalid("base shape", String::from("base_width and base_depth must be positive")));
            }
            // base-fan-in / fan-in for width-proportional fan-ins
            let ratio = scheme.base_width as f64 / tag.width as f64;
            // σ_init scales a fan-in init 1/√(base-fan-in) of the base model,
            // so at the base shape hidden and output weights match SP
            let base_init = 1.0 / math::sqrt(fan_in * ratio);
            let (a, b, c) = match tag.kind {
                ParamKind::WeightInput => (hp.alpha_emb, hp.sigma_init, hp.eta * hp.eta_emb_hat),
                ParamKind::WeightHidden => (1.0, hp.sigma_init * math::sqrt(ratio) * base_init, hp.eta * ratio),
                ParamKind::WeightOutput => (hp.alpha_out * ratio, hp.sigma_init * base_init, hp.eta),
                ParamKind::Bias | ParamKind::Norm => (1.0, 0.0, hp.eta),
            };
            AbcMultipliers {
                a,
                b,
                c: c * depth_factor(scheme.base_depth as f64 / depth as f64),
                a_bwd_override: None,
            }
        }
        SchemeKind::Sp => {
            let width = tag.width as f64;
            let blocks = (depth / 2).max(1) as f64;
            let b = match tag.kind {
                ParamKind::Bias | ParamKind::Norm => 0.0,
                _ if tag.branch_output => 2.0 / (blocks * math::sqrt(width)),
                _ => math::sqrt(2.0 / (5.0 * width)),
            };
            AbcMultipliers {
                a: 1.0,
                b,
                c: hp.eta,
                a_bwd_override: None,
            }
        }
    };
    if matches!(tag.kind, ParamKind::Bias | ParamKind::Norm) {
        m.c = hp.eta;
    }
    Ok(m)
}

/// μP residual multiplier `√(base_depth/depth)` applied at the end of each branch.
pub fn mup_branch_multiplier(depth: usize, scheme: &Scheme) -> f64 {
    math::sqrt(scheme.base_depth as f64 / depth as f64)
}

/// `(A·θ, B/θ, C/θ)`, the transform that leaves Adam training unchanged.
pub fn abc_shift(m: &AbcMultipliers, theta: f64) -> Result<AbcMultipliers> {
    ensure_positive("theta", theta)?;
    Ok(AbcMultipliers {
        a: m.a * theta,
        b: m.b / theta,
        c: m.c / theta,
        a_bwd_override: m.a_bwd_override.map(|v| v * theta),
    })
}

/// A named parameter with its shape and role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub tag: ParamTag,
}

/// Learning rate of one tensor at a step whose scheduled global rate is
/// `step_lr`: `step_lr · C/η · η̂_W`.
pub fn lr_for_param(spec: &ParamSpec, depth: usize, scheme: &Scheme, step_lr: f64) -> Result<f64> {
    let m = abc_multipliers(&spec.tag, depth, scheme)?;
    let mult = scheme.hps.lr_mults.get(&spec.name).copied().unwrap_or(1.0);
    Ok(step_lr * m.c / scheme.hps.eta * mult)
}

/// I.i.d. normal draw with std `B`.
pub fn init_param(spec: &ParamSpec, depth: usize, scheme: &Scheme, rng: &mut Rng) -> Result<Tensor> {
    let m = abc_multipliers(&spec.tag, depth, scheme)?;
    Ok(Tensor::randn(&spec.shape, m.b, rng))
}

/// One row of the parametrization dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReportRow {
    pub name: String,
    pub tag: ParamTag,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub a_bwd_override: Option<f64>,
    /// `C/η · η̂_W`, the factor applied to the scheduled LR.
    pub lr_multiplier: f64,
}

pub fn param_report(specs: &[ParamSpec], depth: usize, scheme: &Scheme) -> Result<Vec<ParamReportRow>> {
    specs
        .iter()
        .map(|s| {
            let m = abc_multipliers(&s.tag, depth, scheme)?;
            Ok(ParamReportRow {
                name: s.name.clone(),
                tag: s.tag,
                a: m.a,
                b: m.b,
                c: m.c,
                a_bwd_override: m.a_bwd_override,
                lr_multiplier: lr_for_param(s, depth, scheme, 1.0)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::stats;
    use crate::scaled_ops::{u_linear_output, u_matmul, Constraint};
    use crate::tensor::Tape;

    fn hidden(fan_in: usize, fan_out: usize, width: usize) -> ParamTag {
        ParamTag::new(ParamKind::WeightHidden, fan_in, fan_out, width)
    }

    #[test]
    fn u_mup_table_rows() {
        let s = Scheme::u_mup(1.0);
        let m = abc_multipliers(&hidden(1024, 1024, 1024), 4, &s).unwrap();
        assert_eq!((m.a, m.b, m.c), (1.0 / 32.0, 1.0, 1.0 / 32.0));
        let s2 = Scheme::u_mup(2.0);
        let emb = ParamTag::new(ParamKind::WeightInput, 256, 1024, 1024);
        let m = abc_multipliers(&emb, 4, &s2).unwrap();
        assert_eq!((m.a, m.b, m.c), (1.0, 1.0, 1.0 / 16.0));
        let out = ParamTag::new(ParamKind::WeightOutput, 1024, 256, 1024);
        let m = abc_multipliers(&out, 4, &s).unwrap();
        assert_eq!((m.a, m.b, m.c, m.a_bwd_override), (1.0 / 1024.0, 1.0, 1.0, Some(1.0 / 32.0)));
        // residual-branch weights take 1/√depth on C
        let m = abc_multipliers(&hidden(1024, 1024, 1024).on_branch(false), 16, &s).unwrap();
        assert_eq!(m.c, 1.0 / 32.0 / 4.0);
    }

    #[test]
    fn u_mup_sigma_init_is_not_an_hp() {
        assert_eq!(Scheme::u_mup(1.0).sigma_init(), Err(Error::NotAnHp("sigma_init")));
        assert_eq!(Scheme::mup(1.0).sigma_init(), Ok(1.0));
    }

    #[test]
    fn mup_at_base_shape_has_unit_ratios() {
        let mut s = Scheme::mup(0.01);
        s.hps.sigma_init = 0.5;
        s.base_width = 512;
        s.base_depth = 8;
        let m = abc_multipliers(&hidden(512, 512, 512).on_branch(false), 8, &s).unwrap();
        assert_eq!((m.a, m.c), (1.0, 0.01));
        assert!((m.b - 0.5 / 512f64.sqrt()).abs() < 1e-15);
        assert_eq!(mup_branch_multiplier(8, &s), 1.0);
        // doubling width halves the hidden LR and divides init std by √2
        let m = abc_multipliers(&hidden(1024, 1024, 1024).on_branch(false), 8, &s).unwrap();
        assert!((m.b - 0.5 / 512f64.sqrt() / 2f64.sqrt()).abs() < 1e-15 && m.c == 0.005);
        let out = ParamTag::new(ParamKind::WeightOutput, 1024, 256, 1024);
        assert_eq!(abc_multipliers(&out, 8, &s).unwrap().a, 0.5);
    }

    #[test]
    fn shift_round_trips_and_maps_eq4_to_eq5() {
        let m = AbcMultipliers {
            a: 0.3,
            b: 0.7,
            c: 0.01,
            a_bwd_override: None,
        };
        assert_eq!(abc_shift(&m, 1.0).unwrap(), m);
        let back = abc_shift(&abc_shift(&m, 3.7).unwrap(), 1.0 / 3.7).unwrap();
        assert!((back.a - m.a).abs() < 1e-15 && (back.b - m.b).abs() < 1e-15 && (back.c - m.c).abs() < 1e-15);
        assert!(abc_shift(&m, 0.0).is_err());
        // (1, 1/√n, η/n) shifted by θ = 1/√n is (1/√n, 1, η/√n)
        let n: f64 = 1024.0;
        let eq4 = AbcMultipliers {
            a: 1.0,
            b: 1.0 / n.sqrt(),
            c: 2.0 / n,
            a_bwd_override: None,
        };
        let eq5 = abc_shift(&eq4, 1.0 / n.sqrt()).unwrap();
        let want = abc_multipliers(&hidden(1024, 64, 1024), 4, &Scheme::u_mup(2.0)).unwrap();
        assert_eq!((eq5.a, eq5.b, eq5.c), (want.a, want.b, want.c));
    }

    #[test]
    fn embedding_lr_rule_across_widths() {
        let s = Scheme::u_mup(1.0);
        for width in [128usize, 256, 512, 1024, 2048, 4096] {
            let spec = ParamSpec {
                name: "embed".into(),
                shape: alloc::vec![256, width],
                tag: ParamTag::new(ParamKind::WeightInput, 256, width, width),
            };
            assert_eq!(lr_for_param(&spec, 4, &s, 0.5).unwrap(), 0.5 / (width as f64).sqrt());
        }
        let mut mup = Scheme::mup(1.0);
        mup.hps.eta_emb_hat = 16.0;
        let spec = ParamSpec {
            name: "embed".into(),
            shape: alloc::vec![256, 4096],
            tag: ParamTag::new(ParamKind::WeightInput, 256, 4096, 4096),
        };
        assert_eq!(lr_for_param(&spec, 4, &mup, 0.5).unwrap(), 8.0);
    }

    #[test]
    fn per_tensor_multiplier_and_norm_rule() {
        let mut s = Scheme::u_mup(1.0);
        s.hps.lr_mults.insert("w".into(), 4.0);
        let spec = ParamSpec {
            name: "w".into(),
            shape: alloc::vec![64, 64],
            tag: hidden(64, 64, 64),
        };
        assert_eq!(lr_for_param(&spec, 2, &s, 1.0).unwrap(), 0.5);
        let norm = ParamSpec {
            name: "g".into(),
            shape: alloc::vec![64],
            tag: ParamTag::new(ParamKind::Norm, 64, 64, 64),
        };
        assert_eq!(lr_for_param(&norm, 2, &s, 0.3).unwrap(), 0.3);
    }

    #[test]
    fn init_std_and_determinism() {
        let spec = ParamSpec {
            name: "w".into(),
            shape: alloc::vec![1024, 1024],
            tag: hidden(1024, 1024, 1024),
        };
        let s = Scheme::u_mup(1.0);
        let t = init_param(&spec, 4, &s, &mut Rng::new(1)).unwrap();
        assert!((stats(t.data()).unwrap().std - 1.0).abs() < 0.01);
        let t2 = init_param(&spec, 4, &s, &mut Rng::new(1)).unwrap();
        assert_eq!(t, t2);
        let mut mup = Scheme::mup(1.0);
        mup.hps.sigma_init = 0.25;
        mup.base_width = 1024;
        let t = init_param(&spec, 4, &mup, &mut Rng::new(2)).unwrap();
        assert!((stats(t.data()).unwrap().std * 32.0 - 0.25).abs() < 0.0025);
    }

    #[test]
    fn folded_multipliers_match_scaled_ops() {
        // The u-μP A of hidden and output weights lives inside the scaled op.
        let s = Scheme::u_mup(1.0);
        let (rows, d, v) = (3, 16, 5);
        let mut rng = Rng::new(3);
        let xt = Tensor::randn(&[rows, d], 1.0, &mut rng);
        let wt = Tensor::randn(&[d, v], 1.0, &mut rng);
        let raw: Vec<f64> = (0..rows * v)
            .map(|k| (0..d).map(|p| xt.data()[(k / v) * d + p] * wt.data()[p * v + k % v]).sum())
            .collect();
        let mut t = Tape::new();
        let x = t.param(xt.clone());
        let w = t.param(wt.clone());
        let h = u_matmul(&mut t, x, w, Constraint::ToOutputScale).unwrap();
        let o = u_linear_output(&mut t, x, w).unwrap();
        let ah = abc_multipliers(&hidden(d, v, d), 2, &s).unwrap().a;
        let ao = abc_multipliers(&ParamTag::new(ParamKind::WeightOutput, d, v, d), 2, &s).unwrap();
        for ((hk, ok), r) in t.value(h).data().iter().zip(t.value(o).data()).zip(&raw) {
            assert!((hk - ah * r).abs() < 1e-12);
            assert!((ok - ao.a * r).abs() < 1e-12);
        }
        let l = t.sum(o);
        let g = t.backward(l).unwrap();
        // grad-x of the output op = override · (1·wᵀ)
        for r in 0..rows {
            for p in 0..d {
                let want: f64 = ao.a_bwd_override.unwrap() * (0..v).map(|j| wt.data()[p * v + j]).sum::<f64>();
                assert!((g.get(x).unwrap().data()[r * d + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hp_set_access() {
        let mut h = HpSet::default();
        h.set("alpha_res", 2.0).unwrap();
        assert_eq!(h.get("alpha_res").unwrap(), 2.0);
        assert!(h.set("nope", 1.0).is_err());
        assert!(h.set("eta", -1.0).is_err());
        assert!(h.validate().is_ok());
        assert_eq!("u-μP".parse::<SchemeKind>().unwrap(), SchemeKind::UMup);
        assert_eq!("u-mup".parse::<SchemeKind>().unwrap(), SchemeKind::UMup);
        assert_eq!("SP".parse::<SchemeKind>().unwrap(), SchemeKind::Sp);
    }
}
