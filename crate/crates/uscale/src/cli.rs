//! The `uscale` command line.
//!
//! Exit codes: 0 on success, 1 when the configuration or arguments are
//! invalid (nothing is computed), 2 on a runtime failure such as I/O, a
//! diverged training run or a failed check.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use uscale_core::model::{build_model, rms_report, Model};
use uscale_core::numerics::{make_format, quant_report, stats};
use uscale_core::parametrization::param_report;
use uscale_core::residual::lemma_trials;
use uscale_core::sweep::{independent_search, random_search, transfer_error, Strategy};
use uscale_core::train::{abc_check, train_run, TokenStream};
use uscale_core::Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::report;
use crate::runner::{lr_transfer, pair_grid, ModelEvaluator};

#[derive(Parser, Debug)]
#[command(name = "uscale", version, about = "Unit-scaled μP training, sweeps and numerics checks")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config file; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config leaf, e.g. `model.width=128`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parallel training runs (sweep, transfer-error, lr-transfer).
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Output directory.
    #[arg(long, global = true, env = "USCALE_OUT", default_value = "uscale-out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Verb {
    /// Train one model: metrics.csv, rms.csv, checkpoint/, summary.json.
    Train,
    /// Hyperparameter search per `sweep` in the config: sweep.csv.
    Sweep,
    /// Transfer error between pairs of hyperparameters.
    TransferError {
        /// Compute from an existing loss matrix instead of training.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// LR sweep at several widths: lr_transfer.csv and lr_transfer.json.
    LrTransfer,
    /// Per-matmul RMS of inputs, weights and output gradients on one batch.
    RmsReport {
        /// Load the model from a checkpoint directory instead of initializing it.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Clipping statistics of casting a tensor to each format.
    QuantizeReport {
        /// Whitespace-separated numbers; Gaussian samples if omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        std: f64,
        #[arg(long, default_value_t = 1 << 20)]
        count: usize,
        #[arg(long, value_delimiter = ',', default_value = "e4m3,e5m2,bf16,fp16,fp32")]
        formats: Vec<String>,
        /// Divide by the standard deviation before casting.
        #[arg(long)]
        rescale: bool,
    },
    /// Per-parameter A, B, C and LR multiplier: params.json.
    ParamReport,
    /// Random networks against the residual equivalence lemma.
    LemmaCheck {
        #[arg(long, default_value_t = 8)]
        depth: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
    },
    /// Train a model and its abc-shifted twin and compare loss curves.
    AbcCheck {
        #[arg(long, default_value_t = 2.0)]
        theta: f64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
}

/// Parses `argv`, runs the verb and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut sets = c.set.clone();
    if let Some(s) = c.seed {
        sets.push(format!("train.seed={s}"));
    }
    let cfg = RunConfig::load(c.config.as_deref(), &sets)?;
    cfg.validate()?;
    if c.workers == 0 {
        return Err(Error::Invalid(String::from("--workers must be at least 1")));
    }
    Ok(cfg)
}

fn out_file(c: &Common, name: &str) -> PathBuf {
    c.out.join(name)
}

fn save_json<T: Serialize>(c: &Common, name: &str, v: &T) -> Result<PathBuf> {
    let p = out_file(c, name);
    report::write_json(&p, v)?;
    Ok(p)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.verb {
        Verb::Train => cmd_train(c),
        Verb::Sweep => cmd_sweep(c),
        Verb::TransferError { grid } => cmd_transfer_error(c, grid.as_deref()),
        Verb::LrTransfer => cmd_lr_transfer(c),
        Verb::RmsReport { checkpoint } => cmd_rms_report(c, checkpoint.as_deref()),
        Verb::QuantizeReport {
            input,
            std,
            count,
            formats,
            rescale,
        } => cmd_quantize_report(c, input.as_deref(), *std, *count, formats, *rescale),
        Verb::ParamReport => {
            let cfg = load_config(c)?;
            let rows = param_report(&cfg.model.param_specs(), cfg.model.depth(), &cfg.model.scheme)?;
            let p = save_json(c, "params.json", &rows)?;
            println!("{} parameter tensors written to {}", rows.len(), p.display());
            Ok(())
        }
        Verb::LemmaCheck { depth, trials, width } => cmd_lemma(c, *depth, *trials, *width),
        Verb::AbcCheck { theta, steps } => cmd_abc(c, *theta, *steps),
    }
}

/// The first `batch` training windows of the stream.
fn first_batch(stream: &TokenStream, seq: usize, batch: usize) -> Result<Vec<usize>> {
    let ids = stream.ids();
    if ids.len() < batch * seq + 1 {
        return Err(uscale_core::Error::InsufficientData {
            needed: batch * seq + 1,
            available: ids.len(),
        }
        .into());
    }
    Ok((0..batch).flat_map(|r| ids[r * seq..r * seq + seq + 1].iter().map(|&t| t as usize)).collect())
}

fn init_model(cfg: &RunConfig) -> Result<Model> {
    Ok(build_model(cfg.model.clone(), &mut Rng::derive(cfg.train.seed, 1))?)
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let stream = cfg.data.load()?;
    let mut model = init_model(&cfg)?;
    save_json(c, "config.json", &cfg)?;
    let metrics = report::create(&out_file(c, "metrics.csv"))?;
    let rms = report::create(&out_file(c, "rms.csv"))?;
    let mut obs = report::CsvObserver::new(metrics, rms)?;
    if cfg.train.rms_every == 0 {
        let batch = first_batch(&stream, cfg.model.seq_len, cfg.train.batch)?;
        uscale_core::train::Observer::rms(&mut obs, &rms_report(&model, &batch, 0)?);
    }
    let outcome = train_run(&mut model, &stream, &cfg.train, &mut obs)?;
    obs.finish()?;
    checkpoint::save(&out_file(c, "checkpoint"), &model)?;
    save_json(c, "summary.json", &outcome)?;
    println!(
        "init loss {} final train loss {} final val loss {} ({} steps)",
        outcome.init_loss, outcome.final_train_loss, outcome.final_val_loss, outcome.steps_done
    );
    if outcome.diverged {
        return Err(Error::Diverged {
            step: outcome.steps_done + 1,
            loss: outcome.final_train_loss,
        });
    }
    Ok(())
}

fn cmd_sweep(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let spec = cfg.sweep_spec();
    spec.validate().map_err(crate::error::invalid)?;
    let stream = cfg.data.load()?;
    let ev = ModelEvaluator {
        base: cfg.clone(),
        stream: &stream,
        workers: c.workers,
    };
    let (name, runs, best) = match spec.strategy {
        Strategy::Independent => {
            let r = independent_search(&spec, &ev)?;
            ("independent", r.log, (r.best, r.best_loss))
        }
        Strategy::Random { n } => {
            let runs = random_search(&spec, n, spec.seed, &ev)?;
            let best = (runs[0].hps.clone(), runs[0].loss);
            ("random", runs, best)
        }
    };
    report::write_sweep(report::create(&out_file(c, "sweep.csv"))?, name, cfg.train.seed, &runs)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        strategy: &'a str,
        runs: usize,
        best: &'a uscale_core::sweep::Assignment,
        best_loss: f64,
    }
    save_json(
        c,
        "sweep_summary.json",
        &Summary {
            strategy: name,
            runs: runs.len(),
            best: &best.0,
            best_loss: best.1,
        },
    )?;
    println!("{} runs; best loss {} at {:?}", runs.len(), best.1, best.0);
    Ok(())
}

#[derive(Serialize)]
struct PairError {
    fixed: String,
    transfer: String,
    error: f64,
}

#[derive(Serialize)]
struct TransferSummary {
    pairs: Vec<PairError>,
    mean_pairwise_error: f64,
}

fn cmd_transfer_error(c: &Common, grid: Option<&Path>) -> Result<()> {
    if let Some(path) = grid {
        let m = report::read_matrix(path)?;
        let e = transfer_error(&m).map_err(crate::error::invalid)?;
        save_json(
            c,
            "transfer_error.json",
            &TransferSummary {
                pairs: vec![PairError {
                    fixed: String::from("rows"),
                    transfer: String::from("columns"),
                    error: e,
                }],
                mean_pairwise_error: e,
            },
        )?;
        println!("transfer error {e}");
        return Ok(());
    }
    let cfg = load_config(c)?;
    let spec = cfg.sweep_spec();
    spec.validate().map_err(crate::error::invalid)?;
    let stream = cfg.data.load()?;
    let names: Vec<&String> = spec.grids.keys().collect();
    let mut pairs = Vec::new();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            let (ga, gb) = (&spec.grids[*a], &spec.grids[*b]);
            let g = pair_grid(&cfg, &stream, (a, ga), (b, gb), c.workers);
            if g.iter().flatten().any(|l| !l.is_finite()) {
                log::warn!("every run of the {a} × {b} grid diverged; skipping the pair");
                continue;
            }
            report::write_matrix(report::create(&out_file(c, &format!("transfer_{a}__{b}.csv")))?, (a, ga), (b, gb), &g)?;
            let t: Vec<Vec<f64>> = (0..gb.len()).map(|j| g.iter().map(|r| r[j]).collect()).collect();
            pairs.push(PairError {
                fixed: a.to_string(),
                transfer: b.to_string(),
                error: transfer_error(&g)?,
            });
            pairs.push(PairError {
                fixed: b.to_string(),
                transfer: a.to_string(),
                error: transfer_error(&t)?,
            });
        }
    }
    let mean = pairs.iter().map(|p| p.error).sum::<f64>() / pairs.len().max(1) as f64;
    save_json(
        c,
        "transfer_summary.json",
        &TransferSummary {
            pairs,
            mean_pairwise_error: mean,
        },
    )?;
    println!("mean pairwise transfer error {mean}");
    Ok(())
}

fn cmd_lr_transfer(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let stream = cfg.data.load()?;
    let rep = lr_transfer(&cfg, &stream, c.workers)?;
    report::write_lr_transfer(report::create(&out_file(c, "lr_transfer.csv"))?, &rep)?;
    save_json(c, "lr_transfer.json", &rep)?;
    for o in &rep.optima {
        match o.lr {
            Some(lr) => println!("width {}: best lr {lr} (loss {})", o.width, o.loss),
            None => println!("width {}: every cell diverged", o.width),
        }
    }
    match rep.drift_steps {
        Some(d) => println!("argmin drift: {d} grid steps"),
        None => println!("argmin drift: undefined (a width diverged everywhere)"),
    }
    Ok(())
}

fn cmd_rms_report(c: &Common, ckpt: Option<&Path>) -> Result<()> {
    let cfg = load_config(c)?;
    let model = match ckpt {
        Some(dir) => checkpoint::load(dir)?,
        None => init_model(&cfg)?,
    };
    let stream = cfg.data.load()?;
    let batch = first_batch(&stream, model.cfg.seq_len, cfg.train.batch)?;
    let rows = rms_report(&model, &batch, 0)?;
    let p = out_file(c, "rms.csv");
    report::write_rms(report::create(&p)?, &rows)?;
    let outside = rows.iter().filter(|r| !(0.5..=2.0).contains(&r.rms)).count();
    println!("{} rows written to {}; {outside} outside [0.5, 2]", rows.len(), p.display());
    Ok(())
}

fn cmd_quantize_report(c: &Common, input: Option<&Path>, std: f64, count: usize, formats: &[String], rescale: bool) -> Result<()> {
    let fmts = formats
        .iter()
        .map(|f| make_format(f.trim()).map_err(crate::error::invalid))
        .collect::<Result<Vec<_>>>()?;
    let mut xs = match input {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.split_whitespace()
                .enumerate()
                .map(|(i, t)| {
                    t.parse::<f64>()
                        .map_err(|e| Error::Invalid(format!("{}: value {}: {e}", p.display(), i + 1)))
                })
                .collect::<Result<Vec<f64>>>()?
        }
        None => {
            if !(std > 0.0 && std.is_finite()) || count == 0 {
                return Err(Error::Invalid(String::from("--std must be positive and --count at least 1")));
            }
            let mut rng = Rng::derive(c.seed.unwrap_or(0), 2);
            let mut v = vec![0.0; count];
            rng.fill_normal(&mut v, std);
            v
        }
    };
    if rescale {
        let s = stats(&xs)?.std;
        if s > 0.0 {
            xs.iter_mut().for_each(|x| *x /= s);
        } else {
            log::warn!("zero-variance input; casting unscaled");
        }
    }
    let rows = fmts.iter().map(|f| quant_report(&xs, f)).collect::<uscale_core::Result<Vec<_>>>()?;
    let p = out_file(c, "quantize.csv");
    report::write_quant(report::create(&p)?, &rows)?;
    for r in &rows {
        println!(
            "{}: underflow {} overflow {} rms {} -> {}",
            r.format.name(),
            r.underflow_frac,
            r.overflow_frac,
            r.rms_before,
            r.rms_after
        );
    }
    Ok(())
}

pub const LEMMA_TOL: f64 = 1e-6;
pub const ABC_TOL: f64 = 1e-5;

fn cmd_lemma(c: &Common, depth: usize, trials: usize, width: usize) -> Result<()> {
    if depth == 0 || trials == 0 || width == 0 {
        return Err(Error::Invalid(String::from("--depth, --trials and --width must be positive")));
    }
    let t = lemma_trials(depth, trials, width, c.seed.unwrap_or(0))?;
    let worst = t
        .iter()
        .map(|x| x.report.max_stream_deviation.max(x.report.output_deviation))
        .fold(0.0, f64::max);
    save_json(c, "lemma.json", &t)?;
    println!("max deviation {worst:e} over {trials} networks");
    if worst < LEMMA_TOL {
        Ok(())
    } else {
        Err(Error::CheckFailed(format!("max deviation {worst:e} exceeds {LEMMA_TOL:e}")))
    }
}

fn cmd_abc(c: &Common, theta: f64, steps: usize) -> Result<()> {
    let mut cfg = load_config(c)?;
    if !(theta > 0.0 && theta.is_finite()) || steps == 0 {
        return Err(Error::Invalid(String::from("--theta must be positive and --steps at least 1")));
    }
    cfg.train.steps = steps;
    cfg.train.warmup_steps = cfg.train.warmup_steps.min(steps);
    cfg.train.eval_every = 0;
    cfg.train.validate().map_err(crate::error::invalid)?;
    let stream = cfg.data.load()?;
    let model = init_model(&cfg)?;
    let r = abc_check(&model, &stream, &cfg.train, theta)?;
    save_json(c, "abc.json", &r)?;
    println!("max loss deviation {:e} over {} steps (theta {theta})", r.max_rel_dev, r.base.len());
    if r.max_rel_dev < ABC_TOL {
        Ok(())
    } else {
        Err(Error::CheckFailed(format!("max loss deviation {:e} exceeds {ABC_TOL:e}", r.max_rel_dev)))
    }
}
