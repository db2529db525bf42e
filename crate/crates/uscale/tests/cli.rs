use std::path::Path;

use uscale::cli::run;
use uscale::config::RunConfig;
use uscale::runner::{lr_transfer, parallel_map, ModelEvaluator};
use uscale_core::sweep::{independent_search, SweepSpec};
use uscale_core::train::TokenStream;

const SMALL: &[&str] = &[
    "--set",
    "model.width=32",
    "--set",
    "model.n_blocks=1",
    "--set",
    "model.d_head=16",
    "--set",
    "model.seq_len=16",
    "--set",
    "train.batch=4",
    "--set",
    "train.steps=20",
    "--set",
    "train.warmup_steps=4",
    "--set",
    "data.synthetic_bytes=60000",
];

fn uscale(out: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["uscale".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    argv.push("--out".into());
    argv.push(out.display().to_string());
    run(argv)
}

fn with_small<'a>(verb: &[&'a str]) -> Vec<&'a str> {
    let mut v = verb.to_vec();
    v.extend_from_slice(SMALL);
    v
}

#[test]
fn train_writes_metrics_rms_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train": {"peak_lr": 2.0}}"#).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut args = with_small(&["train", "--config", cfg.to_str().unwrap()]);
    args.extend(["--set", "model.width=64", "--set", "model.d_head=32"]);
    assert_eq!(uscale(&a, &args), 0);
    for f in ["metrics.csv", "rms.csv", "checkpoint/params.bin", "checkpoint/manifest.json", "summary.json", "config.json"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    let resolved: RunConfig = serde_json::from_slice(&std::fs::read(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved.model.width, 64);
    assert_eq!(resolved.train.peak_lr, 2.0);
    assert_eq!(uscale(&b, &args), 0);
    for f in ["metrics.csv", "rms.csv", "checkpoint/params.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let ck = a.join("checkpoint");
    let mut rms_args = with_small(&["rms-report", "--checkpoint", ck.to_str().unwrap()]);
    rms_args.extend(["--set", "model.width=64", "--set", "model.d_head=32"]);
    assert_eq!(uscale(&dir.path().join("r"), &rms_args), 0);
    let rows = std::fs::read_to_string(dir.path().join("r/rms.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3 * 8);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(uscale(out, &["train", "--set", "model.widht=3"]), 1);
    assert_eq!(uscale(out, &["train", "--config", "/nonexistent/c.json"]), 2);
    assert_eq!(uscale(out, &["param-report", "--set", "model.d_head=7", "--set", "model.width=14"]), 1);
    assert_eq!(uscale(out, &["no-such-verb"]), 1);
    // diverges immediately: a huge LR on SP
    let mut args = with_small(&["train", "--set", "model.scheme.kind=sp", "--set", "train.peak_lr=1000"]);
    args.extend(["--set", "train.warmup_steps=0"]);
    assert_eq!(uscale(&out.join("div"), &args), 2);
    // not enough data without repetition
    let mut args = with_small(&["train"]);
    args.extend(["--set", "data.synthetic_bytes=500"]);
    assert_eq!(uscale(out, &args), 2);
    assert_eq!(uscale(out, &["transfer-error", "--grid", "/nonexistent.csv"]), 1);
}

#[test]
fn lemma_and_abc_checks() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(uscale(dir.path(), &["lemma-check", "--depth", "8", "--trials", "20"]), 0);
    let t: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("lemma.json")).unwrap()).unwrap();
    assert_eq!(t.as_array().unwrap().len(), 20);
    let mut args = with_small(&["abc-check", "--theta", "2", "--steps", "50"]);
    args.extend(["--set", "model.scheme.kind=mup", "--set", "model.scheme.base_width=32", "--set", "train.peak_lr=0.01"]);
    args.extend(["--set", "train.steps=50", "--set", "data.synthetic_bytes=200000"]);
    assert_eq!(uscale(dir.path(), &args), 0);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("abc.json")).unwrap()).unwrap();
    assert!(r["max_rel_dev"].as_f64().unwrap() < 1e-5);
    assert_eq!(r["base"].as_array().unwrap().len(), 50);
}

#[test]
fn param_and_quantize_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(uscale(out, &["param-report", "--set", "model.n_blocks=2"]), 0);
    let rows: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("params.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 1 + 2 * 7 + 1);
    assert_eq!(rows[0]["name"], "embed");
    for key in ["a", "b", "c", "lr_multiplier", "tag"] {
        assert!(rows[0].get(key).is_some(), "{key}");
    }

    assert_eq!(uscale(out, &["quantize-report", "--std", "1000", "--count", "50000", "--formats", "e4m3"]), 0);
    let raw = std::fs::read_to_string(out.join("quantize.csv")).unwrap();
    let over: f64 = raw.lines().nth(1).unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert!(over > 0.5);
    assert_eq!(
        uscale(out, &["quantize-report", "--std", "1000", "--count", "50000", "--formats", "e4m3", "--rescale"]),
        0
    );
    let raw = std::fs::read_to_string(out.join("quantize.csv")).unwrap();
    assert_eq!(raw.lines().next().unwrap(), "format,input_count,underflow_frac,overflow_frac,rms_before,rms_after");
    assert_eq!(raw.lines().nth(1).unwrap().split(',').nth(3).unwrap(), "0");
    assert_eq!(uscale(out, &["quantize-report", "--formats", "e9m9"]), 1);
}

#[test]
fn transfer_error_from_a_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.csv");
    std::fs::write(&p, "f\\t,1,2\n1,1,2\n2,2,1\n").unwrap();
    assert_eq!(uscale(dir.path(), &["transfer-error", "--grid", p.to_str().unwrap()]), 0);
    let s: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("transfer_error.json")).unwrap()).unwrap();
    assert_eq!(s["mean_pairwise_error"], 1.0);
}

#[test]
fn parallel_map_keeps_input_order() {
    let items: Vec<u64> = (0..50).collect();
    let out = parallel_map(&items, 4, |&x| {
        std::thread::sleep(std::time::Duration::from_micros((50 - x) * 20));
        x * x
    });
    assert_eq!(out, items.iter().map(|x| x * x).collect::<Vec<_>>());
    assert!(parallel_map(&Vec::<u8>::new(), 3, |&x| x).is_empty());
}

fn small_config() -> RunConfig {
    let sets: Vec<String> = SMALL.iter().filter(|s| **s != "--set").map(|s| s.to_string()).collect();
    RunConfig::load(None, &sets).unwrap()
}

#[test]
fn worker_count_does_not_change_results() {
    let cfg = small_config();
    let stream = cfg.data.load().unwrap();
    let spec = SweepSpec {
        grids: [("eta".to_string(), vec![0.5, 2.0]), ("alpha_res".to_string(), vec![0.5, 2.0])].into(),
        ..SweepSpec::default()
    };
    let search = |workers| {
        let ev = ModelEvaluator {
            base: cfg.clone(),
            stream: &stream,
            workers,
        };
        independent_search(&spec, &ev).unwrap()
    };
    let (a, b) = (search(1), search(3));
    assert_eq!(a, b);
    assert_eq!(a.log.len(), 2 + 2 + 1);
}

#[test]
fn lr_transfer_runs_every_cell() {
    let mut cfg = small_config();
    cfg.lr_transfer.widths = vec![16, 32];
    cfg.lr_transfer.lr_log2_lo = -1.0;
    cfg.lr_transfer.lr_log2_hi = 1.0;
    cfg.lr_transfer.replicas = 2;
    let stream: TokenStream = cfg.data.load().unwrap();
    let rep = lr_transfer(&cfg, &stream, 2).unwrap();
    assert_eq!(rep.cells.len(), 2 * 3);
    assert!(rep.cells.iter().all(|c| c.losses.len() == 2));
    assert!(rep.drift_steps.is_some());
    cfg.lr_transfer.widths = vec![30];
    assert!(lr_transfer(&cfg, &stream, 1).is_err());
}

#[test]
fn sweep_verb_writes_the_run_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = with_small(&["sweep", "--workers", "2"]);
    args.extend(["--set", r#"sweep.grids={"eta": [0.5, 2], "alpha_ffn_act": [0.5, 1, 2]}"#]);
    assert_eq!(uscale(dir.path(), &args), 0);
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "strategy,phase,hp_json,seed,final_loss,diverged");
    assert_eq!(lines.len(), 1 + 2 + 3 + 1);
    assert!(lines[1].starts_with("independent,1,"));
    assert!(lines[6].starts_with("independent,3,"));

    let mut args = with_small(&["sweep"]);
    args.extend(["--set", r#"sweep.grids={"eta": [0.5, 2], "alpha_res": [1, 2]}"#]);
    args.extend(["--set", r#"sweep.strategy={"random": {"n": 3}}"#]);
    assert_eq!(uscale(dir.path(), &args), 0);
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 3);
    assert!(text.lines().nth(1).unwrap().starts_with("random,0,"));
}
