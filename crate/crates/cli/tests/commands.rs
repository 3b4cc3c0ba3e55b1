use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ltricd_core::corpus::CorpusSplits;
use ltricd_core::model::{is_decoder, Model};
use ltricd_core::ranking::{read_predictions, write_predictions, RankedPrediction};
use ltricd_core::training::{param_digest, Checkpoint};
use serde_json::{json, Value};

fn ltricd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltricd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ltricd(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "seed": 5,
        "synth": {
            "diagnosis_codes": 12, "procedure_codes": 6,
            "train_docs": 24, "validation_docs": 8, "test_docs": 8,
            "diagnosis_count": {"mean": 2.5, "sd": 1.0, "min": 1, "max": 5},
            "procedure_count": {"mean": 1.0, "sd": 0.8, "min": 0, "max": 3},
            "filler_vocab": 30, "filler_per_doc": 6
        },
        "model": {
            "d_e": 8, "d_c": 8, "kernel": 3, "segment_len": 16, "max_input_len": 48,
            "d_ff": 16, "d_dec": 8, "dec_ff": 16, "max_output_len": 16
        },
        "train": {"epochs_phase1": 2, "epochs_phase2": 2, "lr_phase2": 0.01},
        "k_list": [1, 2, 3, 5]
    });
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

/// Synthesizes and trains both phases once; returns (config, corpus, ckpt dir).
fn trained(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let cfg = tiny_config(dir);
    let corpus = dir.join("corpus");
    let ck = dir.join("ck");
    ok(&["--config", s(&cfg), "synth", "--out", s(&corpus)]);
    ok(&["--config", s(&cfg), "train", "--corpus", s(&corpus), "--out", s(&ck)]);
    (cfg, corpus, ck)
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_is_reproducible_and_needs_out() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--config", s(&cfg), "--seed", "7", "synth", "--out", s(&a)]);
    ok(&["--config", s(&cfg), "--seed", "7", "synth", "--out", s(&b)]);
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
    let names: Vec<String> = read_dir_bytes(&a).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["stats.json", "test.jsonl", "train.jsonl", "validation.jsonl"]);
    assert_eq!(ltricd(&["synth"]).status.code(), Some(2));
    assert_eq!(ltricd(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn default_synth_stats_track_the_targets() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    ok(&["synth", "--out", s(&out)]);
    let stats: Value = serde_json::from_str(&fs::read_to_string(out.join("stats.json")).unwrap()).unwrap();
    let all = &stats["all"];
    assert_eq!(all["documents"], 1300);
    let d = all["diagnosis"]["mean"].as_f64().unwrap();
    let p = all["procedure"]["mean"].as_f64().unwrap();
    assert!((d - 11.0).abs() < 0.6, "diagnosis mean {d}");
    assert!((p - 4.0).abs() < 0.4, "procedure mean {p}");
    assert!(all["diagnosis"]["max"].as_u64().unwrap() <= 39);
}

#[test]
fn training_phases_and_freeze() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, corpus, ck) = trained(dir.path());
    let digests: Value = serde_json::from_str(&fs::read_to_string(ck.join("digests.json")).unwrap()).unwrap();
    for part in ["encoder", "decoder"] {
        assert_eq!(digests["phase1"][part], digests["phase2"][part]);
    }
    let log = fs::read_to_string(ck.join("train_log.jsonl")).unwrap();
    assert!(log.lines().count() >= 8);
    assert!(log.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));

    let one = dir.path().join("one");
    ok(&["--config", s(&cfg), "train", "--corpus", s(&corpus), "--out", s(&one), "--phase", "1"]);
    assert!(one.join("phase1.ckpt.json").exists());
    assert!(!one.join("phase2.ckpt.json").exists());
    let c = Checkpoint::load(&one.join("phase1.ckpt.json")).unwrap();
    let init = Model::init(c.model.clone(), 5).unwrap();
    if c.epoch > 0 {
        assert_ne!(param_digest(&init.params, is_decoder), param_digest(&c.model().unwrap().params, is_decoder));
    }

    let two = dir.path().join("two");
    ok(&[
        "--config", s(&cfg), "train", "--corpus", s(&corpus), "--out", s(&two), "--phase", "2", "--init",
        s(&one.join("phase1.ckpt.json")),
    ]);
    assert!(two.join("phase2.ckpt.json").exists());
    let out = ltricd(&["--config", s(&cfg), "train", "--corpus", s(&corpus), "--out", s(&two), "--phase", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_settings_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let corpus = dir.path().join("corpus");
    ok(&["--config", s(&cfg), "synth", "--out", s(&corpus)]);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"alpha": -0.5}}"#).unwrap();
    let out = ltricd(&["--config", s(&bad), "train", "--corpus", s(&corpus), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(&bad, "{not json").unwrap();
    assert_eq!(ltricd(&["--config", s(&bad), "synth", "--out", s(&dir.path().join("y"))]).status.code(), Some(2));
    let missing = ltricd(&["train", "--corpus", s(&dir.path().join("nope")), "--out", s(&dir.path().join("z"))]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn predict_merge_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, corpus, ck) = trained(dir.path());
    let ckpt = ck.join("phase2.ckpt.json");
    let (p1, p2) = (dir.path().join("p1"), dir.path().join("p2"));
    for p in [&p1, &p2] {
        ok(&["--config", s(&cfg), "predict", "--checkpoint", s(&ckpt), "--corpus", s(&corpus), "--out", s(p), "--beam", "1"]);
    }
    assert_eq!(read_dir_bytes(&p1), read_dir_bytes(&p2));
    let out = ltricd(&["--config", s(&cfg), "predict", "--checkpoint", s(&ckpt), "--corpus", s(&corpus), "--out", s(&p1), "--beam", "6"]);
    assert_eq!(out.status.code(), Some(2));

    let gen = read_predictions(&p1.join("generative.jsonl"), None).unwrap();
    let clf = read_predictions(&p1.join("classifier.jsonl"), None).unwrap();
    assert_eq!(gen.len(), 8);
    for file in ["generative.jsonl", "classifier.jsonl"] {
        for line in fs::read_to_string(p1.join(file)).unwrap().lines() {
            let v: Value = serde_json::from_str(line).unwrap();
            let codes: Vec<&str> = v["codes"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
            assert_eq!(codes.iter().collect::<HashSet<_>>().len(), codes.len(), "{line}");
        }
    }

    let merged = dir.path().join("merged.jsonl");
    ok(&["merge", "--generative", s(&p1.join("generative.jsonl")), "--classifier", s(&p1.join("classifier.jsonl")), "--out", s(&merged)]);
    let m = read_predictions(&merged, None).unwrap();
    for (a, c) in m.iter().zip(&clf) {
        assert_eq!(a.id, c.id);
        assert_eq!(a.codes.iter().collect::<HashSet<_>>(), c.codes.iter().collect::<HashSet<_>>());
    }

    let ev = dir.path().join("ev");
    ok(&["--config", s(&cfg), "evaluate", "--predictions", s(&merged), "--corpus", s(&corpus), "--out", s(&ev), "--name", "m"]);
    for f in ["m_diagnosis.csv", "m_procedure.csv", "m_combined.csv", "m_combined_cg.csv", "m.json"] {
        assert!(ev.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(ev.join("m_combined.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("K,F1,Prec,Rec,MAP,NDCG,CG"));
    assert_eq!(csv.lines().count(), 5);
    let cg = fs::read_to_string(ev.join("m_combined_cg.csv")).unwrap();
    assert_eq!(cg.lines().count(), 6);
}

#[test]
fn merge_contract_cases() {
    let dir = tempfile::tempdir().unwrap();
    let d = |x: &str| ltricd_core::icd::IcdCode::diagnosis(x).unwrap();
    let write = |name: &str, preds: &[RankedPrediction]| {
        let p = dir.path().join(name);
        write_predictions(&p, preds).unwrap();
        p
    };
    let g = write("g.jsonl", &[RankedPrediction::new("a", vec![d("4019"), d("25000")]), RankedPrediction::new("b", vec![d("4280")])]);
    let c = write("c.jsonl", &[RankedPrediction::new("a", vec![]), RankedPrediction::new("b", vec![d("5849"), d("4280")])]);
    let out = dir.path().join("m.jsonl");
    ok(&["merge", "--generative", s(&g), "--classifier", s(&c), "--out", s(&out)]);
    let m = read_predictions(&out, None).unwrap();
    assert!(m[0].codes.is_empty());
    assert_eq!(m[1].codes, vec![d("4280"), d("5849")]);

    let other = write("o.jsonl", &[RankedPrediction::new("a", vec![]), RankedPrediction::new("zz", vec![])]);
    let res = ltricd(&["merge", "--generative", s(&g), "--classifier", s(&other), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(3));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("zz") && err.contains('b'), "{err}");
}

#[test]
fn evaluation_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let corpus = dir.path().join("corpus");
    ok(&["--config", s(&cfg), "synth", "--out", s(&corpus)]);
    let splits = CorpusSplits::load_dir(&corpus).unwrap();
    let gold: Vec<RankedPrediction> = splits
        .test
        .iter()
        .map(|d| RankedPrediction::new(d.id.clone(), ltricd_cli::evaluate::gold_ranking(d)))
        .collect();
    let gold_path = dir.path().join("gold.jsonl");
    write_predictions(&gold_path, &gold).unwrap();
    let ev = dir.path().join("ev");
    ok(&[
        "--config", s(&cfg), "evaluate", "--predictions", s(&gold_path), "--corpus", s(&corpus), "--out", s(&ev),
        "--k-list", "1,2,3,4,5,6,7,8,9,10,11,39", "--kinds", "diag",
    ]);
    let csv = fs::read_to_string(ev.join("eval_diagnosis.csv")).unwrap();
    let ks: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "11", "39"]);
    let report: Value = serde_json::from_str(&fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    for scope in report.as_array().unwrap() {
        for row in scope["rows"].as_array().unwrap() {
            for m in ["f1", "precision", "recall", "map", "ndcg", "cg"] {
                assert_eq!(row[m].as_f64().unwrap(), 1.0, "{m} {row}");
            }
        }
    }
    assert!(!ev.join("eval_procedure.csv").exists());

    let diag_only: Vec<RankedPrediction> = gold
        .iter()
        .map(|p| RankedPrediction::new(p.id.clone(), p.codes.iter().filter(|c| c.kind() == ltricd_core::icd::CodeKind::Diagnosis).cloned().collect()))
        .collect();
    let dp = dir.path().join("diag.jsonl");
    write_predictions(&dp, &diag_only).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ltricd"))
        .args(["--config", s(&cfg), "evaluate", "--predictions", s(&dp), "--corpus", s(&corpus), "--out", s(&ev), "--kinds", "proc", "--name", "p"])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
    let csv = fs::read_to_string(ev.join("p_procedure.csv")).unwrap();
    for line in csv.lines().skip(1) {
        assert!(line.split(',').skip(1).all(|v| v.parse::<f64>().unwrap() == 0.0), "{line}");
    }
}

#[test]
fn threads_flag_and_env() {
    assert_eq!(ltricd_cli::thread_count(Some(3)).unwrap(), Some(3));
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ltricd"))
        .args(["synth", "--out", s(&dir.path().join("c"))])
        .env("LTRICD_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
