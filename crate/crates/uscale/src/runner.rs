//! Model-backed experiments and the worker pool that runs them.
//!
//! Every run is independent: it builds its own model from the config and a
//! seed, trains on a shared read-only token stream and reports its final
//! validation loss. Results are stored by input position, so the output
//! does not depend on which worker finished first.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use uscale_core::model::build_model;
use uscale_core::sweep::{log2_grid, summarize_lr_transfer, Assignment, Evaluator, LrTransferReport};
use uscale_core::train::{train_run, TokenStream, TrainOutcome};
use uscale_core::Rng;

use crate::config::RunConfig;
use crate::error::{invalid, Error, Result};

/// Applies `f` to every item on up to `workers` threads. Output order
/// matches input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item is processed"))
        .collect()
}

/// Sets hyperparameters by name. `eta` sets both the scheme's η and the
/// peak of the LR schedule.
pub fn apply_hps(cfg: &mut RunConfig, hps: &Assignment) -> Result<()> {
    for (name, &v) in hps {
        if name == "eta" {
            cfg.train.peak_lr = v;
        }
        cfg.model.scheme.hps.set(name, v).map_err(invalid)?;
    }
    Ok(())
}

/// Builds the model from `cfg` (seeded by `cfg.train.seed`) and trains it.
pub fn train_one(cfg: &RunConfig, stream: &TokenStream) -> Result<TrainOutcome> {
    let mut model = build_model(cfg.model.clone(), &mut Rng::derive(cfg.train.seed, 1))?;
    Ok(train_run(&mut model, stream, &cfg.train, &mut ())?)
}

/// Final validation loss, with divergence and errors mapped to NaN.
fn final_loss(r: Result<TrainOutcome>) -> f64 {
    match r {
        Ok(o) if !o.diverged => o.final_val_loss,
        Ok(_) => f64::NAN,
        Err(e) => {
            log::warn!("run failed: {e}");
            f64::NAN
        }
    }
}

/// Trains one model per assignment on top of a base config.
pub struct ModelEvaluator<'a> {
    pub base: RunConfig,
    pub stream: &'a TokenStream,
    pub workers: usize,
}

impl ModelEvaluator<'_> {
    fn run(&self, hps: &Assignment) -> f64 {
        let mut cfg = self.base.clone();
        if let Err(e) = apply_hps(&mut cfg, hps) {
            log::warn!("skipping {hps:?}: {e}");
            return f64::NAN;
        }
        let loss = final_loss(train_one(&cfg, self.stream));
        log::info!("{hps:?} -> {loss}");
        loss
    }
}

impl Evaluator for ModelEvaluator<'_> {
    fn evaluate(&self, hps: &Assignment) -> uscale_core::Result<f64> {
        Ok(self.run(hps))
    }

    fn evaluate_all(&self, batch: &[Assignment]) -> Vec<uscale_core::Result<f64>> {
        parallel_map(batch, self.workers, |a| Ok(self.run(a)))
    }
}

pub fn lr_grid(cfg: &RunConfig) -> Result<Vec<f64>> {
    let t = &cfg.lr_transfer;
    log2_grid(t.lr_log2_lo, t.lr_log2_hi, t.lr_log2_step).map_err(invalid)
}

/// Trains every `(width, lr, replica)` cell of `cfg.lr_transfer`. Replica `r`
/// uses seed `cfg.train.seed + r`; all cells of one replica share it.
pub fn lr_transfer(cfg: &RunConfig, stream: &TokenStream, workers: usize) -> Result<LrTransferReport> {
    let t = &cfg.lr_transfer;
    if t.widths.is_empty() || t.replicas == 0 {
        return Err(Error::Invalid(String::from("lr_transfer needs at least one width and one replica")));
    }
    let lrs = lr_grid(cfg)?;
    let mut cells = Vec::new();
    for &w in &t.widths {
        let mut c = cfg.clone();
        c.model.width = w;
        c.validate()?;
        for &lr in &lrs {
            for r in 0..t.replicas {
                cells.push((w, lr, r));
            }
        }
    }
    let losses = parallel_map(&cells, workers, |&(w, lr, r)| {
        let mut c = cfg.clone();
        c.model.width = w;
        c.model.scheme.hps.eta = lr;
        c.train.peak_lr = lr;
        c.train.seed = cfg.train.seed + r as u64;
        let loss = final_loss(train_one(&c, stream));
        log::info!("width {w} lr {lr} replica {r} -> {loss}");
        loss
    });
    let mut nested = Vec::new();
    let mut it = losses.into_iter();
    for _ in &t.widths {
        nested.push((0..lrs.len()).map(|_| it.by_ref().take(t.replicas).collect()).collect());
    }
    Ok(summarize_lr_transfer(&t.widths, &lrs, &nested)?)
}

/// Final losses over the grid `fixed × transfer` of two hyperparameters.
/// Diverged cells take the largest finite loss of the grid, so they never
/// win an argmin but keep the grid complete.
pub fn pair_grid(
    cfg: &RunConfig,
    stream: &TokenStream,
    fixed: (&str, &[f64]),
    transfer: (&str, &[f64]),
    workers: usize,
) -> Vec<Vec<f64>> {
    let ev = ModelEvaluator {
        base: cfg.clone(),
        stream,
        workers,
    };
    let cells: Vec<Assignment> = fixed
        .1
        .iter()
        .flat_map(|&f| {
            transfer.1.iter().map(move |&t| {
                Assignment::from([(fixed.0.to_string(), f), (transfer.0.to_string(), t)])
            })
        })
        .collect();
    let mut flat = parallel_map(&cells, workers, |a| ev.run(a));
    let worst = flat.iter().copied().filter(|l| l.is_finite()).fold(f64::NAN, f64::max);
    for l in &mut flat {
        if !l.is_finite() {
            *l = worst;
        }
    }
    flat.chunks(transfer.1.len()).map(<[f64]>::to_vec).collect()
}
