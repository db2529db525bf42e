//! Token streams, the LR schedule and the training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::model::{forward_loss, rms_rows, Model, RmsRow};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Tape, Tensor};

/// Token ids with their vocabulary size. Every id is below `vocab`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    ids: Vec<u32>,
    vocab: u32,
    pub source: String,
}

impl TokenStream {
    pub fn new(ids: Vec<u32>, vocab: u32, source: impl Into<String>) -> Result<Self> {
        if let Some(pos) = ids.iter().position(|&t| t >= vocab) {
            return Err(Error::invalid(
                "token stream",
                format!("id {} at index {pos} is not below vocab {vocab}", ids[pos]),
            ));
        }
        Ok(Self {
            ids,
            vocab,
            source: source.into(),
        })
    }

    /// Byte-level tokens, vocabulary 256.
    pub fn from_bytes(bytes: &[u8], source: impl Into<String>) -> Self {
        Self {
            ids: bytes.iter().map(|&b| b as u32).collect(),
            vocab: 256,
            source: source.into(),
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index where the held-out tail (the last `frac` of the stream) starts.
    pub fn split_point(&self, frac: f64) -> usize {
        self.ids.len() - (self.ids.len() as f64 * frac) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub warmup_steps: usize,
    pub batch: usize,
    /// The global LR η; each tensor's rate is this times its LR multiplier.
    pub peak_lr: f64,
    pub final_lr_frac: f64,
    /// Seed for the model initialization; batches are read in order.
    pub seed: u64,
    /// Validation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Number of validation batches per evaluation.
    pub eval_batches: usize,
    /// RMS report interval in steps; 0 disables it.
    pub rms_every: usize,
    /// Fraction of the stream held out for validation.
    pub val_frac: f64,
    /// Wrap around the training split instead of failing when it runs out.
    pub allow_repeat: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            warmup_steps: 100,
            batch: 16,
            peak_lr: 1.0,
            final_lr_frac: 0.1,
            seed: 0,
            eval_every: 0,
            eval_batches: 4,
            rms_every: 0,
            val_frac: 0.05,
            allow_repeat: false,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::invalid("train", String::from("steps and batch must be positive")));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::invalid(
                "train.warmup_steps",
                format!("{} exceeds steps {}", self.warmup_steps, self.steps),
            ));
        }
        if !(self.final_lr_frac > 0.0 && self.final_lr_frac <= 1.0) {
            return Err(Error::invalid(
                "train.final_lr_frac",
                format!("must lie in (0, 1], got {}", self.final_lr_frac),
            ));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::invalid("train.peak_lr", format!("must be finite and non-negative, got {}", self.peak_lr)));
        }
        if !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return Err(Error::invalid("train.val_frac", format!("must lie in (0, 1), got {}", self.val_frac)));
        }
        if self.eval_batches == 0 {
            return Err(Error::invalid("train.eval_batches", String::from("must be positive")));
        }
        self.adam.validate()
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to
/// `final_lr_frac · peak_lr` at `steps`.
pub fn cosine_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.peak_lr;
    if step < cfg.warmup_steps {
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return peak;
    }
    let p = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    let floor = cfg.final_lr_frac * peak;
    floor + (peak - floor) * 0.5 * (1.0 + math::cos(core::f64::consts::PI * p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One line of the metrics log. Validation rows carry the step's LR and no
/// gradient norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: Option<f64>,
}

/// Receives rows as training produces them.
pub trait Observer {
    fn metric(&mut self, _row: &MetricRow) {}
    fn rms(&mut self, _rows: &[RmsRow]) {}
}

impl Observer for () {}

/// Keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct Recorder {
    pub metrics: Vec<MetricRow>,
    pub rms: Vec<RmsRow>,
}

impl Observer for Recorder {
    fn metric(&mut self, row: &MetricRow) {
        self.metrics.push(row.clone());
    }

    fn rms(&mut self, rows: &[RmsRow]) {
        self.rms.extend_from_slice(rows);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Training loss of the first batch, before any update.
    pub init_loss: f64,
    pub final_train_loss: f64,
    /// Validation loss at the last evaluation; infinite if the run diverged.
    pub final_val_loss: f64,
    pub best_val_loss: f64,
    /// Loss became NaN or exceeded twice the initial loss.
    pub diverged: bool,
    pub steps_done: usize,
}

/// Windows of `seq_len + 1` tokens with stride `seq_len`, so every token in
/// a region is a target once.
struct Windows {
    start: usize,
    count: usize,
    seq: usize,
}

impl Windows {
    fn new(start: usize, end: usize, seq: usize) -> Self {
        let count = if end > start + seq { (end - start - 1) / seq } else { 0 };
        Self { start, count, seq }
    }

    fn gather(&self, ids: &[u32], first: usize, n: usize, out: &mut Vec<usize>) {
        out.clear();
        for r in 0..n {
            let w = self.start + ((first + r) % self.count) * self.seq;
            out.extend(ids[w..w + self.seq + 1].iter().map(|&t| t as usize));
        }
    }
}

fn global_norm(grads: &[Tensor]) -> f64 {
    math::sqrt(grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum())
}

/// Trains `model` in place on sequential contiguous batches from the head of
/// `stream`, evaluating on its tail.
pub fn train_run(model: &mut Model, stream: &TokenStream, cfg: &TrainConfig, obs: &mut dyn Observer) -> Result<TrainOutcome> {
    cfg.validate()?;
    if stream.vocab() as usize > model.cfg.vocab {
        return Err(Error::invalid(
            "token stream",
            format!("vocab {} exceeds the model's {}", stream.vocab(), model.cfg.vocab),
        ));
    }
    let seq = model.cfg.seq_len;
    let split = stream.split_point(cfg.val_frac);
    let train = Windows::new(0, split, seq);
    let val = Windows::new(split, stream.len(), seq);
    if train.count < cfg.batch || val.count == 0 {
        return Err(Error::InsufficientData {
            needed: (cfg.batch * seq + 1).max(seq + 1),
            available: stream.len(),
        });
    }
    let rows_needed = cfg.steps * cfg.batch;
    if rows_needed > train.count {
        if cfg.allow_repeat {
            log::warn!(
                "training repeats data: {rows_needed} windows requested, {} available ({:.2} epochs)",
                train.count,
                rows_needed as f64 / train.count as f64
            );
        } else {
            return Err(Error::InsufficientData {
                needed: rows_needed * seq + 1,
                available: split,
            });
        }
    }

    let ids = stream.ids();
    let val_rows = val.count.min(cfg.eval_batches * cfg.batch);
    let mut val_tokens = Vec::new();
    val.gather(ids, 0, val_rows, &mut val_tokens);
    let eval = |m: &Model| -> Result<f64> {
        let per = (seq + 1) * cfg.batch;
        let mut total = 0.0;
        let mut n = 0usize;
        for chunk in val_tokens.chunks(per) {
            let rows = chunk.len() / (seq + 1);
            total += forward_loss(m, chunk)? * rows as f64;
            n += rows;
        }
        Ok(total / n as f64)
    };

    let mut adam = AdamState::new(&model.params);
    let mut batch = Vec::new();
    let mut out = TrainOutcome {
        init_loss: f64::NAN,
        final_train_loss: f64::NAN,
        final_val_loss: f64::INFINITY,
        best_val_loss: f64::INFINITY,
        diverged: false,
        steps_done: 0,
    };
    for step in 1..=cfg.steps {
        train.gather(ids, (step - 1) * cfg.batch, cfg.batch, &mut batch);
        let lr = cosine_schedule(step, cfg);
        let mut tape = Tape::new();
        let fp = model.forward(&mut tape, &batch)?;
        let loss = tape.value(fp.loss).item();
        if step == 1 {
            out.init_loss = loss;
        }
        if !loss.is_finite() || loss > 2.0 * out.init_loss {
            log::warn!("diverged at step {step}: loss {loss}");
            out.diverged = true;
            out.final_train_loss = loss;
            out.final_val_loss = f64::INFINITY;
            return Ok(out);
        }
        let mut g = tape.backward(fp.loss)?;
        if cfg.rms_every > 0 && (step - 1) % cfg.rms_every == 0 {
            obs.rms(&rms_rows(&tape, &fp, &g, step as u64 - 1)?);
        }
        let grads: Vec<Tensor> = fp
            .params
            .iter()
            .zip(&model.params)
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        drop(tape);
        let grad_norm = global_norm(&grads);
        obs.metric(&MetricRow {
            step,
            split: Split::Train,
            loss,
            lr,
            grad_norm: Some(grad_norm),
        });
        let lrs: Vec<f64> = model.lr_mults.iter().map(|c| c * lr).collect();
        adam.step_scaled(&mut model.params, &grads, &lrs, &model.eps_mults, &cfg.adam)?;
        out.final_train_loss = loss;
        out.steps_done = step;
        if step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            let v = eval(model)?;
            obs.metric(&MetricRow {
                step,
                split: Split::Val,
                loss: v,
                lr,
                grad_norm: None,
            });
            if !v.is_finite() {
                out.diverged = true;
                out.final_val_loss = f64::INFINITY;
                return Ok(out);
            }
            out.final_val_loss = v;
            out.best_val_loss = out.best_val_loss.min(v);
        }
    }
    Ok(out)
}

/// Loss curves of a model and its abc-shifted twin trained side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbcCheck {
    pub theta: f64,
    pub base: Vec<f64>,
    pub shifted: Vec<f64>,
    /// Largest `|base − shifted| / |base|` over steps.
    pub max_rel_dev: f64,
}

/// Trains `model` and `model.abc_shifted(theta)` with the same data. Weight
/// decay is turned off: independent decay does not commute with the shift.
pub fn abc_check(model: &Model, stream: &TokenStream, cfg: &TrainConfig, theta: f64) -> Result<AbcCheck> {
    let mut cfg = cfg.clone();
    if cfg.adam.weight_decay != 0.0 {
        log::info!("abc check runs with weight_decay = 0 (was {})", cfg.adam.weight_decay);
        cfg.adam.weight_decay = 0.0;
    }
    let curve = |mut m: Model| -> Result<Vec<f64>> {
        let mut rec = Recorder::default();
        train_run(&mut m, stream, &cfg, &mut rec)?;
        Ok(rec.metrics.iter().filter(|r| r.split == Split::Train).map(|r| r.loss).collect())
    };
    let base = curve(model.clone())?;
    let shifted = curve(model.abc_shifted(theta)?)?;
    if base.len() != shifted.len() {
        return Err(Error::invalid(
            "abc_check",
            format!("runs stopped at different steps ({} vs {})", base.len(), shifted.len()),
        ));
    }
    let max_rel_dev = base
        .iter()
        .zip(&shifted)
        .map(|(a, b)| if a.is_finite() && b.is_finite() { (a - b).abs() / a.abs() } else { f64::INFINITY })
        .fold(0.0, f64::max);
    Ok(AbcCheck {
        theta,
        base,
        shifted,
        max_rel_dev,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, TransformerConfig};
    use crate::parametrization::Scheme;
    use crate::rng::Rng;
    use proptest::prelude::{prop_assert, proptest};

    fn sched(steps: usize, warmup: usize) -> TrainConfig {
        TrainConfig {
            steps,
            warmup_steps: warmup,
            peak_lr: 2.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = sched(1000, 100);
        assert_eq!(cosine_schedule(0, &c), 0.0);
        assert_eq!(cosine_schedule(100, &c), 2.0);
        assert!((cosine_schedule(1000, &c) - 0.2).abs() < 1e-15);
        assert!((cosine_schedule(550, &c) - 1.1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn schedule_is_continuous(steps in 2usize..3000, wfrac in 0.01f64..0.99) {
            let warmup = ((steps as f64 * wfrac) as usize).clamp(1, steps - 1);
            let c = sched(steps, warmup);
            let bound = c.peak_lr * (1.0 / warmup as f64 + core::f64::consts::PI / (steps - warmup) as f64);
            for s in 0..steps {
                let d = (cosine_schedule(s + 1, &c) - cosine_schedule(s, &c)).abs();
                prop_assert!(d <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn more_steps_keep_warmup_and_restretch_decay() {
        let (a, b) = (sched(1000, 100), sched(2000, 100));
        for s in 0..=100 {
            assert_eq!(cosine_schedule(s, &a), cosine_schedule(s, &b));
        }
        assert!((cosine_schedule(550, &a) - cosine_schedule(1050, &b)).abs() < 1e-12);
        assert_eq!(cosine_schedule(1000, &a), cosine_schedule(2000, &b));
    }

    #[test]
    fn rejects_bad_config_and_stream() {
        assert!(sched(10, 11).validate().is_err());
        let mut c = sched(10, 1);
        c.final_lr_frac = 0.0;
        assert!(c.validate().is_err());
        assert!(TokenStream::new(alloc::vec![1, 300], 256, "x").is_err());
        assert_eq!(TokenStream::from_bytes(b"ab", "x").ids(), &[97, 98]);
    }

    fn small_model(seed: u64) -> Model {
        let c = TransformerConfig {
            width: 32,
            n_blocks: 1,
            d_head: 16,
            seq_len: 16,
            scheme: Scheme::u_mup(1.0),
            ..TransformerConfig::default()
        };
        build_model(c, &mut Rng::new(seed)).unwrap()
    }

    fn corpus(n: usize, seed: u64) -> TokenStream {
        // a noisy order-1 source: next byte mostly determined by the current one
        let mut rng = Rng::new(seed);
        let mut ids = Vec::with_capacity(n);
        let mut t = 0u32;
        for _ in 0..n {
            t = if rng.uniform() < 0.8 { (t * 7 + 3) % 64 } else { rng.below(64) as u32 };
            ids.push(t);
        }
        TokenStream::new(ids, 256, "synthetic").unwrap()
    }

    #[test]
    fn abc_shift_keeps_the_loss_curve() {
        let mut cfg = TransformerConfig {
            width: 32,
            n_blocks: 1,
            d_head: 16,
            seq_len: 16,
            scheme: Scheme::mup(2f64.powi(-6)),
            ..TransformerConfig::default()
        };
        cfg.scheme.base_width = 32;
        let m = build_model(cfg, &mut Rng::new(3)).unwrap();
        let c = TrainConfig { steps: 20, warmup_steps: 2, batch: 4, peak_lr: 2f64.powi(-6), ..TrainConfig::default() };
        let r = abc_check(&m, &corpus(4000, 9), &c, 2.0).unwrap();
        assert_eq!(r.base.len(), 20);
        assert!(r.max_rel_dev < 1e-5, "{r:?}");
        assert!(r.base[19] < r.base[0]);
    }

    #[test]
    fn insufficient_data_is_an_error() {
        let mut m = small_model(0);
        let s = corpus(600, 1);
        let c = TrainConfig { steps: 100, batch: 4, ..TrainConfig::default() };
        assert!(matches!(train_run(&mut m, &s, &c, &mut ()), Err(Error::InsufficientData { .. })));
        let c = TrainConfig { allow_repeat: true, ..c };
        assert!(train_run(&mut m, &s, &c, &mut ()).is_ok());
    }

    #[test]
    fn zero_lr_only_decays() {
        let mut m = small_model(2);
        let before = m.params.clone();
        let c = TrainConfig {
            steps: 3,
            warmup_steps: 1,
            batch: 2,
            peak_lr: 0.0,
            ..TrainConfig::default()
        };
        let mut rec = Recorder::default();
        train_run(&mut m, &corpus(4000, 3), &c, &mut rec).unwrap();
        let keep = (1.0 - c.adam.weight_decay).powi(3);
        for (a, b) in m.params.iter().zip(&before) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y * keep).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }
        let losses: Vec<f64> = rec.metrics.iter().filter(|r| r.split == Split::Train).map(|r| r.loss).collect();
        assert_eq!(losses.len(), 3);
        let spread = losses.iter().fold(0.0f64, |m, l| m.max((l - losses[0]).abs()));
        assert!(spread < 0.05, "{losses:?}");
    }

    #[test]
    fn learns_and_is_deterministic() {
        let s = corpus(60_000, 5);
        let c = TrainConfig {
            steps: 300,
            warmup_steps: 30,
            batch: 8,
            peak_lr: 2f64.powf(1.5),
            eval_every: 100,
            rms_every: 100,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = small_model(7);
            let mut rec = Recorder::default();
            let out = train_run(&mut m, &s, &c, &mut rec).unwrap();
            (out, rec)
        };
        let (a, ra) = run();
        assert!(!a.diverged);
        assert!(a.final_val_loss < (256f64).ln() - 1.0, "{a:?}");
        assert_eq!(ra.metrics.iter().filter(|r| r.split == Split::Val).count(), 3);
        assert_eq!(ra.rms.len(), 3 * 3 * 8);
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra.metrics, rb.metrics);
    }

    #[test]
    fn memorizes_a_repeated_pattern() {
        let ids: Vec<u32> = (0..20_000u32).map(|i| [5, 9, 2, 7][(i % 4) as usize]).collect();
        let s = TokenStream::new(ids, 256, "repeat").unwrap();
        let mut m = small_model(3);
        let c = TrainConfig {
            steps: 200,
            warmup_steps: 20,
            batch: 4,
            peak_lr: 2f64.powf(1.5),
            ..TrainConfig::default()
        };
        let out = train_run(&mut m, &s, &c, &mut ()).unwrap();
        assert!(out.final_val_loss < 0.1, "{out:?}");
    }

    #[test]
    fn validation_windows_stay_in_the_tail() {
        let s = corpus(1000, 1);
        let split = s.split_point(0.05);
        assert_eq!(split, 950);
        let (tr, va) = (Windows::new(0, split, 16), Windows::new(split, s.len(), 16));
        let mut buf = Vec::new();
        tr.gather(s.ids(), 0, tr.count, &mut buf);
        // training windows end at or before the split
        assert!(tr.start + tr.count * 16 < split);
        va.gather(s.ids(), 0, va.count, &mut buf);
        let head: Vec<usize> = s.ids()[split..split + 17].iter().map(|&t| t as usize).collect();
        assert_eq!(&buf[..17], head.as_slice());
    }
}
