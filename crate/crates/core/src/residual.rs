//! Unit-scaled pre-norm residual stream.
//!
//! A stream `R̂_l = a_l·f_l(R̂_{l−1}) + b_l·R̂_{l−1}` with `a_l² + b_l² = 1`
//! keeps unit variance, and with `a_l/b_l = τ_l` it computes the same
//! function as the plain stream `R_l = r_l·f_l(R_{l−1}) + R_{l−1}` up to the
//! factor `√(Σ_{i≤l} r_i²)`, which the zero-homogeneous head discards.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::{Tape, Var};

/// Coefficients of branch `l` (1-based; odd = attention, even = FFN).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchCoeffs {
    pub l: usize,
    pub tau_sq: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualSchedule {
    /// Number of residual branches, twice the number of blocks.
    pub depth: usize,
    pub alpha_res: f64,
    pub alpha_res_attn_ratio: f64,
    pub branches: Vec<BranchCoeffs>,
}

impl ResidualSchedule {
    pub fn coeffs(&self, l: usize) -> &BranchCoeffs {
        &self.branches[l - 1]
    }
}

fn coeffs_from_tau_sq(l: usize, tau_sq: f64) -> BranchCoeffs {
    BranchCoeffs {
        l,
        tau_sq,
        a: math::sqrt(tau_sq / (tau_sq + 1.0)),
        b: math::sqrt(1.0 / (tau_sq + 1.0)),
    }
}

/// Per-type branch multipliers `(â_a², â_f²)` of the two residual HPs.
pub fn branch_multipliers_sq(alpha_res: f64, alpha_ratio: f64) -> (f64, f64) {
    let rho2 = alpha_ratio * alpha_ratio;
    let f2 = 2.0 / (rho2 + 1.0) * alpha_res * alpha_res;
    (rho2 * f2, f2)
}

pub fn build_schedule(depth: usize, alpha_res: f64, alpha_ratio: f64) -> Result<ResidualSchedule> {
    if depth < 2 || !depth.is_multiple_of(2) {
        return Err(Error::invalid(
            "depth",
            alloc::format!("residual depth must be even and at least 2, got {depth}"),
        ));
    }
    ensure_positive("alpha_res", alpha_res)?;
    ensure_positive("alpha_res_attn_ratio", alpha_ratio)?;
    let (a2, f2) = branch_multipliers_sq(alpha_res, alpha_ratio);
    let half = depth as f64 / 2.0;
    let branches = (1..=depth)
        .map(|l| {
            let ell = ((l - 1) / 2) as f64;
            let tau_sq = if l % 2 == 1 {
                a2 / (half + ell * a2 + ell * f2)
            } else {
                f2 / (half + (ell + 1.0) * a2 + ell * f2)
            };
            coeffs_from_tau_sq(l, tau_sq)
        })
        .collect();
    Ok(ResidualSchedule {
        depth,
        alpha_res,
        alpha_res_attn_ratio: alpha_ratio,
        branches,
    })
}

/// `τ_l² = r_l² / Σ_{i<l} r_i²` for `l = 1..=L`, from `r = [r_0, …, r_L]`.
pub fn tau_sq_from_multipliers(r: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(r.len().saturating_sub(1));
    for (i, &ri) in r.iter().enumerate() {
        if i > 0 {
            out.push(ri * ri / acc);
        }
        acc += ri * ri;
    }
    out
}

/// Marks the point where a branch reads the stream. The branch's residual
/// coefficient `a` is applied here in the backward pass, so everything inside
/// the branch sees unit-scaled gradients.
pub fn branch_input(tape: &mut Tape, stream: Var, a: f64) -> Result<Var> {
    tape.scale_bwd(stream, a)
}

fn check_coeffs(a: f64, b: f64) -> Result<()> {
    if !(a >= 0.0 && b >= 0.0 && (a * a + b * b - 1.0).abs() <= 1e-9) {
        return Err(Error::invalid(
            "residual coefficients",
            alloc::format!("need a² + b² = 1, got a={a} b={b}"),
        ));
    }
    Ok(())
}

/// `a·branch_out + b·skip` with the branch-side backward factor delayed to
/// [`branch_input`].
pub fn residual_add(tape: &mut Tape, branch_out: Var, skip: Var, a: f64, b: f64) -> Result<Var> {
    check_coeffs(a, b)?;
    if tape.shape(branch_out) != tape.shape(skip) {
        return Err(Error::shape("residual_add", tape.shape(branch_out), tape.shape(skip)));
    }
    let branch = if a > 0.0 { tape.scale_fwd(branch_out, a)? } else { tape.scale(branch_out, 0.0) };
    let skip = tape.scale(skip, b);
    tape.add(branch, skip)
}

/// `a·branch_out + b·skip` with `a` applied in both passes at the add.
pub fn residual_add_immediate(tape: &mut Tape, branch_out: Var, skip: Var, a: f64, b: f64) -> Result<Var> {
    check_coeffs(a, b)?;
    let branch = tape.scale(branch_out, a);
    let skip = tape.scale(skip, b);
    tape.add(branch, skip)
}

/// A residual branch function on plain vectors.
pub trait BranchFn {
    fn apply(&self, x: &[f64]) -> Vec<f64>;
}

/// RMSNorm followed by a dense map, optionally through `tanh`. Zero-homogeneous.
#[derive(Clone, Debug)]
pub struct NormLinearBranch {
    width: usize,
    weight: Vec<f64>,
    nonlinear: bool,
}

impl NormLinearBranch {
    /// Weights drawn with std `1/√width`, so outputs start unit-scaled.
    pub fn random(width: usize, nonlinear: bool, rng: &mut Rng) -> Self {
        let mut weight = alloc::vec![0.0; width * width];
        rng.fill_normal(&mut weight, 1.0 / math::sqrt(width as f64));
        Self {
            width,
            weight,
            nonlinear,
        }
    }
}

impl BranchFn for NormLinearBranch {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.width;
        let ms = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / math::sqrt(ms);
        (0..d)
            .map(|j| {
                let y: f64 = (0..d).map(|i| x[i] * r * self.weight[i * d + j]).sum();
                if self.nonlinear {
                    libm::tanh(y)
                } else {
                    y
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    /// Largest relative deviation of `R̂_l` from `R_l/√(Σ_{i≤l} r_i²)` over `l = 0..=L`.
    pub max_stream_deviation: f64,
    /// Relative deviation between the two final outputs.
    pub output_deviation: f64,
}

fn rel_dev(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = got.iter().zip(want).fold(0.0f64, |m, (g, w)| m.max((g - w).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Runs the plain stream and the unit-scaled stream on `x` and compares them.
/// `r = [r_0, …, r_L]`; `fns = [f_1, …, f_{L+1}]`, each zero-homogeneous.
pub fn lemma_f1_check(r: &[f64], fns: &[&dyn BranchFn], x: &[f64]) -> Result<LemmaReport> {
    if r.is_empty() || fns.len() != r.len() {
        return Err(Error::invalid(
            "lemma_f1_check",
            alloc::format!("need L+1 multipliers and L+1 functions, got {} and {}", r.len(), fns.len()),
        ));
    }
    ensure_positive("r_0", r[0])?;
    if let Some(&bad) = r[1..].iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::invalid("r", alloc::format!("branch multipliers must be finite and >= 0, got {bad}")));
    }
    let doubled: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
    for (i, f) in fns.iter().enumerate() {
        if rel_dev(&f.apply(&doubled), &f.apply(x)) > 1e-9 {
            return Err(Error::NotZeroHomogeneous(i + 1));
        }
    }
    let depth = r.len() - 1;
    let tau_sq = tau_sq_from_multipliers(r);
    let mut plain: Vec<f64> = x.iter().map(|v| r[0] * v).collect();
    let mut unit: Vec<f64> = x.to_vec();
    let mut sum_sq = r[0] * r[0];
    let mut worst = rel_dev(&unit, &plain.iter().map(|v| v / math::sqrt(sum_sq)).collect::<Vec<_>>());
    for l in 1..=depth {
        let fp = fns[l - 1].apply(&plain);
        let fu = fns[l - 1].apply(&unit);
        let c = coeffs_from_tau_sq(l, tau_sq[l - 1]);
        for j in 0..plain.len() {
            plain[j] += r[l] * fp[j];
            unit[j] = c.a * fu[j] + c.b * unit[j];
        }
        sum_sq += r[l] * r[l];
        let norm = math::sqrt(sum_sq);
        let want: Vec<f64> = plain.iter().map(|v| v / norm).collect();
        worst = worst.max(rel_dev(&unit, &want));
    }
    let out_plain = fns[depth].apply(&plain);
    let out_unit = fns[depth].apply(&unit);
    Ok(LemmaReport {
        max_stream_deviation: worst,
        output_deviation: rel_dev(&out_unit, &out_plain),
    })
}

/// One randomized trial of [`lemma_f1_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaTrial {
    pub depth: usize,
    pub r: Vec<f64>,
    pub report: LemmaReport,
}

/// `trials` random pre-norm networks of depth `1..=max_depth`, with branch
/// multipliers log-uniform in `[1/8, 8]` and norm-linear branches (every
/// other one through `tanh`) of the given width.
pub fn lemma_trials(max_depth: usize, trials: usize, width: usize, seed: u64) -> Result<Vec<LemmaTrial>> {
    if max_depth == 0 || width == 0 {
        return Err(Error::invalid("lemma_trials", "depth and width must be positive"));
    }
    let mut rng = Rng::new(seed);
    (0..trials)
        .map(|_| {
            let depth = 1 + rng.below(max_depth);
            let r: Vec<f64> = (0..=depth).map(|_| math::powf(8.0, 2.0 * rng.uniform() - 1.0)).collect();
            let fns: Vec<NormLinearBranch> = (0..=depth).map(|i| NormLinearBranch::random(width, i % 2 == 1, &mut rng)).collect();
            let refs: Vec<&dyn BranchFn> = fns.iter().map(|f| f as &dyn BranchFn).collect();
            let x: Vec<f64> = (0..width).map(|_| rng.normal()).collect();
            let report = lemma_f1_check(&r, &refs, &x)?;
            Ok(LemmaTrial { depth, r, report })
        })
        .collect()
}
