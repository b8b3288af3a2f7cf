use std::path::{Path, PathBuf};
use std::process::Command;

use mosr::corpus::{CorpusSplits, VocabOptions};
use mosr::heads::{HeadConfig, HeadKind};
use mosr::training::{Checkpoint, Model, ModelConfig, RngState, TrainConfig};

fn data_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn mosr(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("mosr").chain(args.iter().copied());
    let code = mosr::cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn json_lines(s: &str) -> Vec<serde_json::Value> {
    s.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_mosr");
    let none = Command::new(bin).output().unwrap();
    assert_eq!(none.status.code(), Some(2));
    let unknown = Command::new(bin).args(["eval", "--bogus"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(2));
    let help = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("bottleneck"));
}

#[test]
fn missing_files_are_named() {
    let (code, _, err) = mosr(&["eval", "--ckpt", "/nonexistent/model.ckpt", "--corpus", "/tmp"]);
    assert_eq!(code, 1);
    assert!(err.contains("/nonexistent/model.ckpt"), "{err}");
}

#[test]
fn eval_of_uniform_checkpoint_gives_vocabulary_perplexity() {
    let corpus = data_dir("toy_word");
    let splits = CorpusSplits::load(&corpus, VocabOptions::word(10_000)).unwrap();
    let m = splits.vocab.len();
    let cfg = ModelConfig::new(m, 8, 8, 1, HeadConfig::new(HeadKind::Mos, 8, 2));
    let ckpt = Checkpoint {
        train: TrainConfig::word_defaults(cfg),
        vocab: splits.vocab.clone(),
        model: Model::zeros(cfg).unwrap(),
        rng: RngState { seed: 0, word_pos: 0 },
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("u.ckpt");
    ckpt.save(&path).unwrap();
    let (code, out, err) = mosr(&[
        "eval",
        "--ckpt",
        path.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--split",
        "valid",
    ]);
    assert_eq!(code, 0, "{err}");
    let v = &json_lines(&out)[0];
    let ppl = v["ppl"].as_f64().unwrap();
    assert!((ppl - m as f64).abs() < 1e-9 * m as f64);
    assert_eq!(v["tokens"].as_u64().unwrap() as usize, splits.valid.len() - 1);

    let (code, _, err) = mosr(&[
        "eval",
        "--ckpt",
        path.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--split",
        "dev",
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("dev"));
}

#[test]
fn train_then_analyze_end_to_end() {
    let corpus = data_dir("toy_word");
    let corpus = corpus.to_str().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let train = |out: &str| {
        mosr(&[
            "train", "--corpus", corpus, "--head", "mos", "--d", "8", "--k", "2", "--hidden", "16",
            "--epochs", "1", "--seed", "3", "--out", out,
        ])
    };
    let (code, out, err) = train(ckpt);
    assert_eq!(code, 0, "{err}");
    let lines = json_lines(&out);
    assert_eq!(lines.len(), 2);
    for key in ["epoch", "train_nll", "valid_nll", "train_ppl", "valid_ppl"] {
        assert!(lines[1].get(key).is_some(), "{key}");
    }
    assert!(lines[1].get("wall_seconds").is_none());

    let again = dir.path().join("n.ckpt");
    let (_, out2, _) = train(again.to_str().unwrap());
    assert_eq!(out, out2);
    assert_eq!(std::fs::read(ckpt).unwrap(), std::fs::read(&again).unwrap());

    let (code, out, err) = mosr(&["rank", "--ckpt", ckpt, "--corpus", corpus, "--max-rows", "300"]);
    assert_eq!(code, 0, "{err}");
    let r = &json_lines(&out)[0];
    assert_eq!(r["rows"], 300);
    assert_eq!(r["head"], "mos");
    assert!(r["rank"].as_u64().unwrap() >= 1);

    let csv = dir.path().join("spec.csv");
    let (code, out, err) = mosr(&[
        "spectrum", "--ckpt", ckpt, "--corpus", corpus, "--max-rows", "300", "--grid", "11",
        "--out", csv.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(json_lines(&out)[0]["percent_below_0.01"].as_f64().is_some());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("threshold,cum_percent"));
    assert_eq!(text.lines().count(), 12);
    assert!(text.lines().last().unwrap().ends_with(",100"));

    let (code, out, err) = mosr(&["kld", "--ckpt", ckpt, "--corpus", corpus, "--pairs", "200"]);
    assert_eq!(code, 0, "{err}");
    assert!(json_lines(&out)[0]["kld"].as_f64().unwrap() > 0.0);
}

#[test]
fn bottleneck_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let run = || {
        mosr(&[
            "bottleneck", "--n", "12", "--m", "10", "--r", "6", "--d-grid", "2,4", "--k-grid", "1,2",
            "--iterations", "50", "--restarts", "1", "--out", out.to_str().unwrap(),
        ])
    };
    let (code, stdout, err) = run();
    assert_eq!(code, 0, "{err}");
    assert_eq!(json_lines(&stdout)[0]["cells"], 2 + 2 * 2 * 2);
    let first = std::fs::read_to_string(&out).unwrap();
    let mut rdr = csv::Reader::from_reader(first.as_bytes());
    let header: Vec<String> = rdr.headers().unwrap().iter().map(str::to_owned).collect();
    assert_eq!(header, ["head", "d", "K", "restarts", "final_kl", "rank", "iters", "seed"]);
    let heads: Vec<String> = rdr.records().map(|r| r.unwrap()[0].to_owned()).collect();
    assert_eq!(heads, ["softmax", "softmax", "moc", "moc", "moc", "moc", "mos", "mos", "mos", "mos"]);
    run();
    assert_eq!(std::fs::read_to_string(&out).unwrap(), first);
}

#[test]
fn bench_reports_every_head() {
    let (code, out, err) = mosr(&[
        "bench", "--grid", "2", "--vocab", "30", "--d", "4", "--hidden", "4", "--batch-size", "2",
        "--bptt", "3", "--warmup", "1", "--timed", "2",
    ]);
    assert_eq!(code, 0, "{err}");
    let rows = json_lines(&out);
    assert!(rows.len() >= 2);
    assert!(rows.iter().all(|r| r["median_step_seconds"].as_f64().unwrap() > 0.0));
}
