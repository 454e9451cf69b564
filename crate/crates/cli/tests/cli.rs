use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use afg_core::pipeline::{initial_checkpoint, load_checkpoint, save_checkpoint, PipelineConfig};
use clap::CommandFactory;

fn afg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afg")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_MODEL: &str = r#"{"vocab_size": 96, "d_model": 16, "heads": 2, "enc_layers": 1, "dec_layers": 1,
    "d_ff": 32, "max_src_pos": 128, "max_tgt_pos": 32, "attention": {"window": 8, "global_indices": [0]}}"#;

fn write_config(dir: &Path, stages: &str, extra: &str) -> PathBuf {
    let path = dir.join("pipeline.json");
    std::fs::write(&path, format!(r#"{{"model": {TINY_MODEL}, "seed": 5{extra}, "stages": [{stages}]}}"#)).unwrap();
    path
}

const SUMMARIZE_STAGE: &str =
    r#"{"name": "s", "corpus": {"synthetic": {"role": "summarize", "size": 8, "seed": 1}}, "epochs": EPOCHS}"#;

fn train(config: &Path, dir: &Path) -> (Output, PathBuf, PathBuf) {
    let ckpt = dir.join("model.ckpt");
    let log = dir.join("metrics.jsonl");
    let out = afg(&["train", "--pipeline-config", p(config), "--out-checkpoint", p(&ckpt), "--log", p(&log)]);
    (out, ckpt, log)
}

#[test]
fn help_documents_every_flag() {
    let top = afg(&["--help"]);
    assert_eq!(code(&top), 0);
    let cmd = afg_cli::Cli::command();
    for sub in cmd.get_subcommands() {
        let out = afg(&[sub.get_name(), "--help"]);
        assert_eq!(code(&out), 0, "{}", sub.get_name());
        let text = String::from_utf8(out.stdout).unwrap();
        for arg in sub.get_arguments().filter_map(|a| a.get_long()) {
            assert!(text.contains(&format!("--{arg}")), "{} --{arg}", sub.get_name());
        }
        assert!(String::from_utf8_lossy(&top.stdout).contains(sub.get_name()));
    }
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = afg(&["make-synthetic", "--role", "essay", "--size", "3", "--out", "x", "--manifest-out", "y"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("Usage: afg make-synthetic"));
    assert_eq!(code(&afg(&["frobnicate"])), 1);
    assert_eq!(code(&afg(&["rouge", "--candidates", "a"])), 1);
    let bad_size = ["make-synthetic", "--role", "review", "--size", "0"];
    let out_path = dir.path().join("x.jsonl");
    let manifest = dir.path().join("m.json");
    let mut args = bad_size.to_vec();
    args.extend(["--out", p(&out_path), "--manifest-out", p(&manifest)]);
    assert_eq!(code(&afg(&args)), 1);
}

#[test]
fn make_synthetic_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let out = dir.path().join(format!("{tag}.jsonl"));
        let manifest = dir.path().join(format!("{tag}.manifest.json"));
        let args = ["make-synthetic", "--role", "feedback", "--size", "70", "--length-scale", "2", "--seed", "4"];
        let mut args = args.to_vec();
        args.extend(["--out", p(&out), "--manifest-out", p(&manifest)]);
        assert_eq!(code(&afg(&args)), 0);
        (std::fs::read(out).unwrap(), std::fs::read(manifest).unwrap())
    };
    let (a, ma) = run("a");
    let (b, mb) = run("b");
    assert_eq!((&a, &ma), (&b, &mb));
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 70);
    let manifest: serde_json::Value = serde_json::from_slice(&ma).unwrap();
    assert_eq!(manifest["entries"].as_object().unwrap().len(), 70);

    let args = ["make-synthetic", "--role", "review", "--size", "3", "--out", "/nonexistent/dir/x.jsonl"];
    let mut args = args.to_vec();
    args.extend(["--manifest-out", "/nonexistent/dir/m.json"]);
    assert_eq!(code(&afg(&args)), 2);
}

#[test]
fn zero_epoch_train_writes_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &SUMMARIZE_STAGE.replace("EPOCHS", "0"), "");
    let (out, ckpt, log) = train(&config, dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let trained = load_checkpoint(&ckpt).unwrap();
    let init = initial_checkpoint(&PipelineConfig::load(&config).unwrap()).unwrap();
    assert_eq!(trained.params, init.params);
    assert_eq!(std::fs::read_to_string(&log).unwrap(), "");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["provenance"][0]["stage"], "s");
}

#[test]
fn train_reports_failures_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = r#"{"name": "s", "corpus": {"path": "missing-corpus.jsonl"}, "epochs": 1}"#;
    let config = write_config(dir.path(), missing, "");
    let (out, _, _) = train(&config, dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("missing-corpus.jsonl"), "{}", stderr(&out));

    std::fs::write(&config, "{\"model\": ").unwrap();
    assert_eq!(code(&train(&config, dir.path()).0), 1);
    let config = write_config(dir.path(), &SUMMARIZE_STAGE.replace("EPOCHS", "1").replace("\"s\"", "\"\""), "");
    assert_eq!(code(&train(&config, dir.path()).0), 1);

    let config = write_config(dir.path(), &SUMMARIZE_STAGE.replace("EPOCHS", "0"), "");
    let mut ckpt = initial_checkpoint(&PipelineConfig::load(&config).unwrap()).unwrap();
    ckpt.params.get_mut("lm_head.bias").unwrap().data_mut()[5] = f64::INFINITY;
    let poisoned = dir.path().join("poisoned.ckpt");
    save_checkpoint(&ckpt, &poisoned).unwrap();
    let config = write_config(dir.path(), &SUMMARIZE_STAGE.replace("EPOCHS", "1"), r#", "init_checkpoint": "poisoned.ckpt""#);
    let (out, _, _) = train(&config, dir.path());
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite loss"));
}

#[test]
fn generate_handles_empty_and_mismatched_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &SUMMARIZE_STAGE.replace("EPOCHS", "1"), "");
    let (out, ckpt, _) = train(&config, dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let gen_out = dir.path().join("gen.jsonl");
    let out = afg(&["generate", "--checkpoint", p(&ckpt), "--input-file", p(&empty), "--out", p(&gen_out)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read(&gen_out).unwrap(), b"");

    let input = dir.path().join("in.jsonl");
    std::fs::write(&input, "{\"id\": \"q1\", \"source\": \"the stable model improves the energy .\"}\n").unwrap();
    let args = ["generate", "--checkpoint", p(&ckpt), "--input-file", p(&input), "--out", p(&gen_out)];
    let mut capped = args.to_vec();
    capped.extend(["--max-new-tokens", "3"]);
    assert_eq!(code(&afg(&capped)), 0);
    let line: serde_json::Value = serde_json::from_str(std::fs::read_to_string(&gen_out).unwrap().trim()).unwrap();
    assert_eq!(line["id"], "q1");
    assert!(line["output"].as_str().unwrap().split_whitespace().count() <= 3);
    let mut too_long = args.to_vec();
    too_long.extend(["--max-new-tokens", "500"]);
    assert_eq!(code(&afg(&too_long)), 2);

    let bytes = std::fs::read(&ckpt).unwrap();
    let text = String::from_utf8_lossy(&bytes);
    let at = text.find("\"d_ff\":32").unwrap();
    let mut edited = bytes.clone();
    edited[at..at + 9].copy_from_slice(b"\"d_ff\":64");
    let mismatched = dir.path().join("mismatched.ckpt");
    std::fs::write(&mismatched, edited).unwrap();
    let out = afg(&["generate", "--checkpoint", p(&mismatched), "--input-file", p(&input), "--out", p(&gen_out)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("d_ff") || stderr(&out).contains("shape"), "{}", stderr(&out));
}

#[test]
fn rouge_reports_six_decimals() {
    let dir = tempfile::tempdir().unwrap();
    let score = |cands: &str, refs: &str| {
        let (c, r, o) = (dir.path().join("c.txt"), dir.path().join("r.txt"), dir.path().join("o.json"));
        std::fs::write(&c, cands).unwrap();
        std::fs::write(&r, refs).unwrap();
        let out = afg(&["rouge", "--candidates", p(&c), "--references", p(&r), "--out", p(&o)]);
        (code(&out), std::fs::read_to_string(&o).unwrap_or_default())
    };
    let (rc, report) = score("a b c .\nthe cat\n", "a b c .\nthe cat\n");
    assert_eq!(rc, 0);
    assert_eq!(report.matches("\"f1\": 1.000000").count(), 4);

    let (_, report) = score("the cat\n", "the cat sat\n");
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(report.contains("\"rouge1\": {\"precision\": 1.000000, \"recall\": 0.666667, \"f1\": 0.800000}"));
    assert!(report.contains("\"rouge2\": {\"precision\": 1.000000, \"recall\": 0.500000, \"f1\": 0.666667}"));
    assert_eq!(v["rougeL"]["f1"], v["rouge1"]["f1"]);

    let (_, report) = score("a b\nx y\n", "a b\nz w\n");
    assert_eq!(report.matches("\"f1\": 0.500000").count(), 4, "{report}");

    assert_eq!(score("a\nb\n", "a\n").0, 2);
}

#[test]
fn attn_bench_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("bench.csv");
    let run = |extra: &[&str]| {
        let mut args = vec!["attn-bench", "--out", p(&out_path)];
        args.extend_from_slice(extra);
        let out = afg(&args);
        (code(&out), std::fs::read_to_string(&out_path).unwrap_or_default())
    };
    let (rc, csv) = run(&["--n-list", "4,8", "--window", "2", "--globals", "0"]);
    assert_eq!(rc, 0);
    assert_eq!(csv, "n,dense_pairs,sparse_pairs,window,globals\n4,16,10,2,0\n8,64,22,2,0\n");

    let (_, csv) = run(&["--n-list", "128,256,512,1024", "--window", "8", "--globals", "1"]);
    let rows: Vec<(f64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (f[1], f[2])
        })
        .collect();
    for w in rows.windows(2) {
        assert_eq!(w[1].0 / w[0].0, 4.0);
        assert!(w[1].1 / w[0].1 <= 2.2);
    }
    assert_eq!(run(&["--n-list", "8", "--window", "3"]).0, 2);
    assert_eq!(run(&["--n-list", "2", "--globals", "3"]).0, 2);
}
