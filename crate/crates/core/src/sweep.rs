//! Hyperparameter search: the three-phase independent search, random search,
//! the transfer-error statistic and LR-transfer summaries.
//!
//! Runs are delegated to an [`Evaluator`]; a loss that is NaN or infinite
//! marks a diverged run, which never wins an argmin.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::parametrization::SchemeKind;
use crate::rng::Rng;

/// Values for named hyperparameters.
pub type Assignment = BTreeMap<String, f64>;

/// Runs one training job per assignment and returns its final loss.
pub trait Evaluator {
    fn evaluate(&self, hps: &Assignment) -> Result<f64>;

    /// Evaluates a batch of independent runs. Results are in input order.
    fn evaluate_all(&self, batch: &[Assignment]) -> Vec<Result<f64>> {
        batch.iter().map(|a| self.evaluate(a)).collect()
    }
}

impl<F: Fn(&Assignment) -> Result<f64>> Evaluator for F {
    fn evaluate(&self, hps: &Assignment) -> Result<f64> {
        self(hps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Independent,
    Random { n: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    /// Ordered candidate values per hyperparameter.
    pub grids: BTreeMap<String, Vec<f64>>,
    /// Values of hyperparameters outside their own sweep; missing means 1.
    pub defaults: Assignment,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            grids: BTreeMap::new(),
            defaults: BTreeMap::new(),
            strategy: Strategy::Independent,
            seed: 0,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grids.is_empty() {
            return Err(Error::invalid("sweep.grids", String::from("no hyperparameter grids given")));
        }
        for (name, g) in &self.grids {
            if g.is_empty() {
                return Err(Error::invalid("sweep.grids", format!("grid for {name} is empty")));
            }
            if let Some(v) = g.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                return Err(Error::invalid("sweep.grids", format!("grid for {name} has non-positive value {v}")));
            }
        }
        Ok(())
    }

    fn default_of(&self, name: &str) -> f64 {
        self.defaults.get(name).copied().unwrap_or(1.0)
    }

    /// The default assignment over every swept hyperparameter.
    pub fn base_assignment(&self) -> Assignment {
        let mut a = self.defaults.clone();
        for name in self.grids.keys() {
            a.insert(name.clone(), self.default_of(name));
        }
        a
    }
}

/// `2^lo, 2^(lo+step), …, 2^hi`.
pub fn log2_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || hi < lo {
        return Err(Error::invalid("grid", format!("need lo <= hi and step > 0, got {lo}..{hi} by {step}")));
    }
    let n = ((hi - lo) / step + 1e-9) as usize + 1;
    Ok((0..n).map(|i| math::powf(2.0, lo + i as f64 * step)).collect())
}

/// Default search grids of each scheme, log₂-spaced with step `2^½`.
pub fn default_grids(kind: SchemeKind) -> BTreeMap<String, Vec<f64>> {
    let g = |lo: f64, hi: f64| log2_grid(lo, hi, 0.5).expect("static grid");
    let mut out = BTreeMap::new();
    let mut put = |names: &[&str], lo: f64, hi: f64| {
        for n in names {
            out.insert(String::from(*n), g(lo, hi));
        }
    };
    match kind {
        SchemeKind::UMup => {
            put(&["eta"], -1.0, 3.0);
            put(&["alpha_attn_softmax"], -2.0, 2.0);
            put(&["alpha_res", "alpha_res_attn_ratio", "alpha_ffn_act", "alpha_loss_softmax"], -3.0, 3.0);
        }
        SchemeKind::Mup => {
            put(&["eta"], -10.0, -6.0);
            put(&["eta_emb_hat"], 0.0, 8.0);
            put(&["sigma_init", "alpha_emb", "alpha_attn", "alpha_out"], -2.0, 2.0);
        }
        SchemeKind::Sp => {
            put(&["eta"], -12.0, -4.0);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// 1, 2 or 3 for the independent search; 0 for random search.
    pub phase: u8,
    pub hps: Assignment,
    /// `+∞` when diverged.
    pub loss: f64,
    pub diverged: bool,
}

fn record(phase: u8, hps: Assignment, r: Result<f64>) -> RunRecord {
    let loss = match r {
        Ok(l) => l,
        Err(e) => {
            log::warn!("run failed: {e}");
            f64::NAN
        }
    };
    let diverged = !loss.is_finite();
    RunRecord {
        phase,
        hps,
        loss: if diverged { f64::INFINITY } else { loss },
        diverged,
    }
}

/// Index of the smallest finite value, ties to the lowest index.
pub fn argmin(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        if !x.is_finite() {
            continue;
        }
        match best {
            Some(b) if xs[b] <= x => {
                if xs[b] == x {
                    log::debug!("argmin tie between indices {b} and {i}; keeping {b}");
                }
            }
            _ => best = Some(i),
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Assignment,
    pub best_loss: f64,
    pub log: Vec<RunRecord>,
}

/// Line search over η with everything else at its default, then one line
/// search per remaining hyperparameter at that η, then a single run that
/// combines every per-hyperparameter argmin. Returns the better of the phase-1
/// and phase-3 assignments.
pub fn independent_search(spec: &SweepSpec, eval: &dyn Evaluator) -> Result<SearchResult> {
    spec.validate()?;
    let eta_grid = spec
        .grids
        .get("eta")
        .ok_or_else(|| Error::invalid("sweep.grids", String::from("the independent search needs an eta grid")))?;
    let base = spec.base_assignment();
    let mut log = Vec::new();

    let batch: Vec<Assignment> = eta_grid
        .iter()
        .map(|&eta| {
            let mut a = base.clone();
            a.insert(String::from("eta"), eta);
            a
        })
        .collect();
    let results = eval.evaluate_all(&batch);
    let phase1: Vec<RunRecord> = batch.into_iter().zip(results).map(|(a, r)| record(1, a, r)).collect();
    let losses: Vec<f64> = phase1.iter().map(|r| r.loss).collect();
    let best1 = argmin(&losses)
        .ok_or_else(|| Error::invalid("sweep", String::from("every learning-rate run diverged")))?;
    let (p1_hps, p1_loss) = (phase1[best1].hps.clone(), phase1[best1].loss);
    let eta = eta_grid[best1];
    log.extend(phase1);

    let others: Vec<(&String, &Vec<f64>)> = spec.grids.iter().filter(|(n, _)| n.as_str() != "eta").collect();
    let mut batch = Vec::new();
    for (name, grid) in &others {
        for &v in grid.iter() {
            let mut a = p1_hps.clone();
            a.insert((*name).clone(), v);
            batch.push(a);
        }
    }
    let results = eval.evaluate_all(&batch);
    let phase2: Vec<RunRecord> = batch.into_iter().zip(results).map(|(a, r)| record(2, a, r)).collect();
    let mut combined = p1_hps.clone();
    combined.insert(String::from("eta"), eta);
    let mut offset = 0;
    for (name, grid) in &others {
        let losses: Vec<f64> = phase2[offset..offset + grid.len()].iter().map(|r| r.loss).collect();
        match argmin(&losses) {
            Some(i) => {
                combined.insert((*name).clone(), grid[i]);
            }
            None => log::warn!("every run for {name} diverged; keeping its default"),
        }
        offset += grid.len();
    }
    log.extend(phase2);

    let r3 = record(3, combined.clone(), eval.evaluate(&combined));
    let p3_loss = r3.loss;
    log.push(r3);

    let (best, best_loss) = if p3_loss < p1_loss { (combined, p3_loss) } else { (p1_hps, p1_loss) };
    Ok(SearchResult { best, best_loss, log })
}

/// Total runs of [`independent_search`]: `|η grid| + Σ other grids + 1`.
pub fn independent_run_count(spec: &SweepSpec) -> usize {
    spec.grids.values().map(Vec::len).sum::<usize>() + 1
}

/// Draws `n` distinct points uniformly from the grid product and ranks them
/// by loss, diverged runs last.
pub fn random_search(spec: &SweepSpec, n: usize, seed: u64, eval: &dyn Evaluator) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("sweep.n", String::from("must be at least 1")));
    }
    let sizes: Vec<usize> = spec.grids.values().map(Vec::len).collect();
    let total = sizes
        .iter()
        .try_fold(1usize, |acc, &s| acc.checked_mul(s))
        .ok_or_else(|| Error::invalid("sweep.grids", String::from("grid product is too large")))?;
    let n = if n > total {
        log::warn!("random search asked for {n} samples from a grid of {total}; using all");
        total
    } else {
        n
    };
    let mut rng = Rng::new(seed);
    let mut seen = BTreeSet::new();
    let mut batch = Vec::with_capacity(n);
    while batch.len() < n {
        let idx = rng.below(total);
        if !seen.insert(idx) {
            continue;
        }
        let mut a = spec.defaults.clone();
        let mut rest = idx;
        for ((name, grid), &s) in spec.grids.iter().zip(&sizes) {
            a.insert(name.clone(), grid[rest % s]);
            rest /= s;
        }
        batch.push(a);
    }
    let results = eval.evaluate_all(&batch);
    let mut runs: Vec<RunRecord> = batch.into_iter().zip(results).map(|(a, r)| record(0, a, r)).collect();
    runs.sort_by(|a, b| a.loss.total_cmp(&b.loss));
    Ok(runs)
}

/// Best run among `k` drawn without replacement, to emulate a shorter search.
pub fn best_of_subsample<'a>(runs: &'a [RunRecord], k: usize, rng: &mut Rng) -> Option<&'a RunRecord> {
    let mut idx: Vec<usize> = (0..runs.len()).collect();
    rng.shuffle(&mut idx);
    idx.truncate(k);
    idx.into_iter().map(|i| &runs[i]).filter(|r| !r.diverged).min_by(|a, b| a.loss.total_cmp(&b.loss))
}

/// How much the optimum of the transfer HP (columns) depends on the fixed HP
/// (rows): the mean, over rows other than the best, of the loss the best row
/// pays for using that row's optimal column instead of its own.
pub fn transfer_error(grid: &[Vec<f64>]) -> Result<f64> {
    let n = grid.len();
    let cols = grid.first().map(Vec::len).unwrap_or(0);
    if n == 0 || cols == 0 {
        return Err(Error::Empty("transfer_error"));
    }
    for row in grid {
        if row.len() != cols {
            return Err(Error::shape("transfer_error", &[n, cols], &[row.len()]));
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid("transfer_error", format!("loss grid must be finite, found {v}")));
        }
    }
    let flat: Vec<f64> = grid.iter().flatten().copied().collect();
    let g = argmin(&flat).ok_or(Error::Empty("transfer_error"))?;
    let (fs, ts) = (g / cols, g % cols);
    if n == 1 {
        return Ok(0.0);
    }
    let mut err = 0.0;
    for (f, row) in grid.iter().enumerate() {
        if f == fs {
            continue;
        }
        let t = argmin(row).ok_or(Error::Empty("transfer_error"))?;
        err += grid[fs][t] - grid[fs][ts];
    }
    Ok(err / (n - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrCell {
    pub width: usize,
    pub lr: f64,
    /// Replica losses; `+∞` for diverged replicas.
    pub losses: Vec<f64>,
    /// Mean over replicas; `+∞` if any replica diverged.
    pub mean: f64,
    pub sem: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthOptimum {
    pub width: usize,
    /// `None` when every cell of the width diverged.
    pub lr_index: Option<usize>,
    pub lr: Option<f64>,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrTransferReport {
    pub lr_grid: Vec<f64>,
    pub cells: Vec<LrCell>,
    pub optima: Vec<WidthOptimum>,
    /// Spread of the argmin across widths in grid steps; `None` if some width
    /// has no finite cell.
    pub drift_steps: Option<usize>,
}

/// Builds the report from `losses[width][lr][replica]`.
pub fn summarize_lr_transfer(widths: &[usize], lr_grid: &[f64], losses: &[Vec<Vec<f64>>]) -> Result<LrTransferReport> {
    if widths.is_empty() || lr_grid.is_empty() {
        return Err(Error::Empty("lr_transfer"));
    }
    if losses.len() != widths.len() || losses.iter().any(|w| w.len() != lr_grid.len()) {
        return Err(Error::shape(
            "lr_transfer",
            &[widths.len(), lr_grid.len()],
            &[losses.len(), losses.first().map(Vec::len).unwrap_or(0)],
        ));
    }
    let mut cells = Vec::new();
    let mut optima = Vec::new();
    for (&width, per_lr) in widths.iter().zip(losses) {
        let mut means = Vec::with_capacity(lr_grid.len());
        for (&lr, reps) in lr_grid.iter().zip(per_lr) {
            let reps: Vec<f64> = reps.iter().map(|&l| if l.is_finite() { l } else { f64::INFINITY }).collect();
            let diverged = reps.is_empty() || reps.iter().any(|l| l.is_infinite());
            let (mean, sem) = if diverged { (f64::INFINITY, f64::NAN) } else { mean_sem(&reps) };
            means.push(mean);
            cells.push(LrCell {
                width,
                lr,
                losses: reps,
                mean,
                sem,
                diverged,
            });
        }
        let i = argmin(&means);
        optima.push(WidthOptimum {
            width,
            lr_index: i,
            lr: i.map(|i| lr_grid[i]),
            loss: i.map(|i| means[i]).unwrap_or(f64::INFINITY),
        });
    }
    let idx: Option<Vec<usize>> = optima.iter().map(|o| o.lr_index).collect();
    let drift_steps = idx.map(|v| v.iter().max().unwrap() - v.iter().min().unwrap());
    Ok(LrTransferReport {
        lr_grid: lr_grid.to_vec(),
        cells,
        optima,
        drift_steps,
    })
}

/// Trains every `(width, lr, replica)` cell through `run` and summarizes.
pub fn lr_transfer_report(
    widths: &[usize],
    lr_grid: &[f64],
    replicas: usize,
    run: &dyn Fn(usize, f64, usize) -> Result<f64>,
) -> Result<LrTransferReport> {
    if replicas == 0 {
        return Err(Error::invalid("replicas", String::from("must be at least 1")));
    }
    let mut losses = Vec::with_capacity(widths.len());
    for &w in widths {
        let mut per_lr = Vec::with_capacity(lr_grid.len());
        for &lr in lr_grid {
            let reps = (0..replicas)
                .map(|r| match run(w, lr, r) {
                    Ok(l) => l,
                    Err(e) => {
                        log::warn!("cell width={w} lr={lr} replica={r} failed: {e}");
                        f64::INFINITY
                    }
                })
                .collect();
            per_lr.push(reps);
        }
        losses.push(per_lr);
    }
    summarize_lr_transfer(widths, lr_grid, &losses)
}

/// Mean and standard error of the mean (sample std over √n; 0 for one value).
pub fn mean_sem(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, math::sqrt(var / n))
}
