use std::path::Path;

use uscale::checkpoint;
use uscale::config::{apply_override, RunConfig};
use uscale::corpus::synthetic_corpus;
use uscale::report::{self, CsvObserver};
use uscale::tokens::{self, decode, encode, ingest, IngestMode, HEADER_LEN};
use uscale::Error;
use uscale_core::model::{build_model, TransformerConfig};
use uscale_core::parametrization::Scheme;
use uscale_core::sweep::{summarize_lr_transfer, RunRecord};
use uscale_core::train::{train_run, TokenStream, TrainConfig};
use uscale_core::Rng;

#[test]
fn text_bytes_become_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.txt");
    std::fs::write(&p, "ab").unwrap();
    let s = ingest(&p, IngestMode::Text).unwrap();
    assert_eq!(s.ids(), &[97, 98]);
    assert_eq!(s.vocab(), 256);
}

#[test]
fn token_file_layout_is_exact() {
    let bytes = encode(&[1, 300, 7], 1000).unwrap();
    let mut want = b"UTOK".to_vec();
    want.extend_from_slice(&1u32.to_le_bytes());
    want.extend_from_slice(&1000u32.to_le_bytes());
    want.extend_from_slice(&2u32.to_le_bytes());
    want.extend_from_slice(&3u64.to_le_bytes());
    for t in [1u16, 300, 7] {
        want.extend_from_slice(&t.to_le_bytes());
    }
    assert_eq!(bytes, want);
    let wide = encode(&[70_000], 100_000).unwrap();
    assert_eq!(u32::from_le_bytes(wide[12..16].try_into().unwrap()), 4);
    assert_eq!(decode(&wide, Path::new("w")).unwrap().ids(), &[70_000]);
}

#[test]
fn text_binary_text_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let text = synthetic_corpus(20_000, 4);
    let tp = dir.path().join("c.txt");
    std::fs::write(&tp, &text).unwrap();
    let s = ingest(&tp, IngestMode::Text).unwrap();
    let bp = dir.path().join("c.utok");
    tokens::write_tokens(&bp, &s).unwrap();
    let back = ingest(&bp, IngestMode::Binary).unwrap();
    assert_eq!(back.ids(), s.ids());
    assert_eq!(tokens::to_text(&back).unwrap(), text);
    // bit-exact re-encode
    assert_eq!(encode(back.ids(), back.vocab()).unwrap(), std::fs::read(&bp).unwrap());
}

#[test]
fn out_of_vocab_id_reports_its_offset() {
    let mut bytes = encode(&[1, 2, 3], 256).unwrap();
    // id index 1 → 300
    bytes[HEADER_LEN + 2..HEADER_LEN + 4].copy_from_slice(&300u16.to_le_bytes());
    match decode(&bytes, Path::new("x.utok")) {
        Err(Error::Format { offset, reason, .. }) => {
            assert_eq!(offset, (HEADER_LEN + 2) as u64);
            assert!(reason.contains("300"), "{reason}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_headers_are_rejected_with_offsets() {
    let good = encode(&[1, 2], 256).unwrap();
    let cases: Vec<(Vec<u8>, u64)> = vec![
        ({ let mut b = good.clone(); b[0] = b'X'; b }, 0),
        ({ let mut b = good.clone(); b[4] = 2; b }, 4),
        ({ let mut b = good.clone(); b[12] = 3; b }, 12),
        (good[..good.len() - 1].to_vec(), 16),
        (good[..10].to_vec(), 10),
    ];
    for (bytes, want) in cases {
        match decode(&bytes, Path::new("f")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, want),
            other => panic!("{other:?}"),
        }
    }
    assert!(encode(&[5], 5).is_err());
}

#[test]
fn overrides_reach_leaf_keys() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, r#"{"model": {"width": 96, "d_head": 32}, "train": {"steps": 7}}"#).unwrap();
    let cfg = RunConfig::load(
        Some(&p),
        &["model.width=128".into(), "model.scheme.kind=mup".into(), "sweep.grids.eta=[1,2]".into()],
    )
    .unwrap();
    assert_eq!(cfg.model.width, 128);
    assert_eq!(cfg.model.d_head, 32);
    assert_eq!(cfg.train.steps, 7);
    assert_eq!(cfg.model.scheme.kind, uscale_core::parametrization::SchemeKind::Mup);
    assert_eq!(cfg.sweep.grids["eta"], vec![1.0, 2.0]);
    assert_eq!(cfg.train.batch, TrainConfig::default().batch);
}

#[test]
fn config_errors_name_the_key() {
    let bad = |sets: &[&str]| match RunConfig::load(None, &sets.iter().map(|s| s.to_string()).collect::<Vec<_>>()) {
        Err(Error::Invalid(msg)) => msg,
        other => panic!("{other:?}"),
    };
    assert!(bad(&["model.widht=3"]).contains("widht"));
    assert!(bad(&["train.steps=\"many\""]).contains("train.steps"));
    assert!(bad(&["nokey"]).contains("KEY=VALUE"));
    let mut tree = serde_json::json!({"a": 1});
    assert!(apply_override(&mut tree, "a.b=2").is_err());
    // validation comes after overrides
    let cfg = RunConfig::load(None, &["train.warmup_steps=5000".into()]).unwrap();
    assert!(matches!(cfg.validate(), Err(Error::Invalid(m)) if m.contains("warmup")));
}

fn tiny_config() -> TransformerConfig {
    TransformerConfig {
        width: 32,
        n_blocks: 1,
        d_head: 16,
        seq_len: 16,
        ..TransformerConfig::default()
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for scheme in [Scheme::u_mup(1.0), Scheme::mup(0.01), Scheme::sp(0.001)] {
        let m = build_model(TransformerConfig { scheme, ..tiny_config() }, &mut Rng::new(3)).unwrap();
        checkpoint::save(dir.path(), &m).unwrap();
        let back = checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, m);
    }
    let p = dir.path().join(checkpoint::PARAMS_FILE);
    let mut bytes = std::fs::read(&p).unwrap();
    bytes.pop();
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(checkpoint::load(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn metrics_and_rms_csv_are_deterministic() {
    let stream = TokenStream::from_bytes(&synthetic_corpus(40_000, 1), "c");
    let cfg = TrainConfig {
        steps: 12,
        warmup_steps: 2,
        batch: 4,
        eval_every: 6,
        rms_every: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = build_model(tiny_config(), &mut Rng::new(1)).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        let mut obs = CsvObserver::new(&mut a, &mut b).unwrap();
        train_run(&mut m, &stream, &cfg, &mut obs).unwrap();
        obs.finish().unwrap();
        (String::from_utf8(a).unwrap(), String::from_utf8(b).unwrap())
    };
    let (m1, r1) = run();
    assert_eq!((m1.clone(), r1.clone()), run());
    let lines: Vec<&str> = m1.lines().collect();
    assert_eq!(lines[0], "step,split,loss,lr,grad_norm");
    assert_eq!(lines.len(), 1 + 12 + 2);
    assert!(lines.iter().any(|l| l.starts_with("6,val,") && l.ends_with(',')));
    let rms: Vec<&str> = r1.lines().collect();
    assert_eq!(rms[0], "step,tensor,role,rms,abs_max");
    // steps 0, 5, 10; 8 linear layers; 3 roles
    assert_eq!(rms.len(), 1 + 3 * 8 * 3);
    assert!(rms.iter().any(|l| l.contains(",blocks.0.ffn.down,grad_out,")));
}

#[test]
fn floats_round_trip_through_csv() {
    let runs = vec![RunRecord {
        phase: 2,
        hps: [("eta".to_string(), 0.1f64 + 0.2), ("alpha_res".to_string(), 1.0 / 3.0)].into(),
        loss: 2.0f64.sqrt(),
        diverged: false,
    }];
    let mut buf = Vec::new();
    report::write_sweep(&mut buf, "independent", 5, &runs).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let rec = r.records().next().unwrap().unwrap();
    assert_eq!(&rec[0], "independent");
    let hps: std::collections::BTreeMap<String, f64> = serde_json::from_str(&rec[2]).unwrap();
    assert_eq!(hps, runs[0].hps);
    assert_eq!(rec[4].parse::<f64>().unwrap(), 2.0f64.sqrt());
    assert_eq!(&rec[5], "false");
}

#[test]
fn matrix_and_lr_transfer_csv() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    let grid = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
    report::write_matrix(report::create(&p).unwrap(), ("a", &[0.5, 1.0]), ("b", &[1.0, 2.0]), &grid).unwrap();
    assert_eq!(report::read_matrix(&p).unwrap(), grid);
    assert!(std::fs::read_to_string(&p).unwrap().starts_with("a\\b,1,2\n0.5,1,2\n"));

    let rep = summarize_lr_transfer(&[8], &[1.0, 2.0], &[vec![vec![3.0, 3.5], vec![f64::NAN, 2.0]]]).unwrap();
    let mut buf = Vec::new();
    report::write_lr_transfer(&mut buf, &rep).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "width,lr,mean,sem,ci_lo,ci_hi,diverged,losses");
    assert_eq!(lines[1], "8,1,3.25,0.25,2.75,3.75,false,3;3.5");
    assert!(lines[2].starts_with("8,2,inf,NaN,") && lines[2].ends_with(",true,inf;2"), "{}", lines[2]);
}
