use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use uidlm::corpus::{analytic_entropy_rate, tokenize, MarkovSourceSpec, Vocabulary};
use uidlm::model::{Checkpoint, ModelConfig, ParamId, TransformerLm};
use uidlm::stats::{paired_permutation_test, PairedScores, Resampling};
use uidlm::trainer::TrainReport;

fn uidlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uidlm"))
        .args(args)
        .env("UIDLM_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = uidlm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    uidlm(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SENTENCES: [&str; 10] = [
    "the cat sat on the mat",
    "a dog ran",
    "the dog sat",
    "a cat ran on the mat",
    "the mat",
    "a dog sat on a cat",
    "the cat ran",
    "dog",
    "the dog ran on the mat",
    "a cat sat",
];

/// Prepared corpus plus an experiment file that trains quickly.
fn workspace(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    let text: String = (0..6).flat_map(|_| SENTENCES).map(|l| format!("{l}\n")).collect();
    fs::write(&corpus, text).unwrap();
    ok(&["prepare", "--input", s(&corpus), "--vocab-size", "20", "--seed", "4", "--out", s(&dir.path().join("data"))]);
    let config = dir.path().join("exp.toml");
    fs::write(
        &config,
        format!(
            "[data]\nvocab = \"data/vocab.txt\"\ntrain = \"data/train.txt\"\ndev = \"data/dev.txt\"\n\
             test = \"data/test.txt\"\noutput_dir = \"run\"\n\n[model]\nd_model = 16\nn_layers = 1\nd_ff = 32\n\
             max_seq_len = 16\ndropout = 0.1\n\n[train]\nlr = 0.003\nwarmup = 5\nmax_updates = 12\neval_interval = 4\n\
             max_tokens = 64\n{extra}"
        ),
    )
    .unwrap();
    (dir, config)
}

#[test]
fn prepare_splits_ten_lines_eight_one_one() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    fs::write(&corpus, SENTENCES.map(|l| format!("{l}\n")).concat()).unwrap();
    let out = dir.path().join("p");
    let printed = ok(&["prepare", "--input", s(&corpus), "--vocab-size", "8", "--seed", "1", "--out", s(&out)]);
    let count = |n: &str| fs::read_to_string(out.join(n)).unwrap().lines().count();
    assert_eq!((count("train.txt"), count("dev.txt"), count("test.txt")), (8, 1, 1));

    let train: Vec<String> = fs::read_to_string(out.join("train.txt")).unwrap().lines().map(String::from).collect();
    let build = Vocabulary::build(train.iter().map(|l| tokenize(l, false)), 8).unwrap();
    assert!(printed.contains(&format!("coverage: {}\n", build.coverage)));
    assert_eq!(Vocabulary::load(&out.join("vocab.txt")).unwrap(), build.vocab);

    let again = dir.path().join("q");
    ok(&["prepare", "--input", s(&corpus), "--vocab-size", "8", "--seed", "1", "--out", s(&again)]);
    for f in ["vocab.txt", "train.txt", "dev.txt", "test.txt"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap());
    }
}

#[test]
fn synth_prints_the_analytic_rate() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("initial = [0.5, 0.5]\ntransition = [[0.5, 0.5], [0.5, 0.5]]\nmax_length = 12\n", Some("0.6931")),
        ("initial = [1.0]\ntransition = [[1.0]]\ntermination = 1.0\n", Some("0")),
        ("initial = [0.2, 0.8]\ntransition = [[0.1, 0.9], [0.6, 0.4]]\ntermination = 0.2\n", None),
    ];
    for (i, (text, prefix)) in cases.iter().enumerate() {
        let spec = dir.path().join(format!("s{i}.toml"));
        fs::write(&spec, text).unwrap();
        let corpus = dir.path().join(format!("c{i}.txt"));
        let out = ok(&["synth", "--spec", s(&spec), "--n", "50", "--seed", "3", "--out", s(&corpus)]);
        let printed: f64 = out.trim().strip_prefix("entropy rate: ").unwrap().strip_suffix(" nats/token").unwrap().parse().unwrap();
        let exact = analytic_entropy_rate(&MarkovSourceSpec::from_toml_str(text).unwrap()).unwrap();
        assert!((printed - exact).abs() <= 1e-9);
        if let Some(p) = prefix {
            assert!(format!("{printed:.4}").starts_with(p), "{printed}");
        }
        assert_eq!(fs::read_to_string(&corpus).unwrap().lines().count(), 50);
    }
}

#[test]
fn train_writes_report_checkpoints_and_marker() {
    let (dir, config) = workspace("[train.objective]\nregularizer = \"variance\"\nbeta = 0.01\n");
    let printed = ok(&["train", "--config", s(&config)]);
    assert!(printed.starts_with("best: update "));
    let run = dir.path().join("run");
    let report = TrainReport::from_jsonl(&fs::read_to_string(run.join("report.jsonl")).unwrap()).unwrap();
    assert_eq!(report.records.len(), 3);
    assert!(report.records.iter().all(|r| r.dev_reg_per_sequence > 0.0));
    let marker = fs::read_to_string(run.join("best")).unwrap();
    assert_eq!(Some(marker.trim()), report.best_record().checkpoint.as_deref());
    assert!(run.join(marker.trim()).is_file());
}

#[test]
fn train_rerun_is_byte_identical() {
    let (dir, config) = workspace("");
    ok(&["train", "--config", s(&config)]);
    let run = dir.path().join("run");
    let first: Vec<(PathBuf, Vec<u8>)> = {
        let mut v: Vec<_> = fs::read_dir(&run).unwrap().map(|e| e.unwrap().path()).collect();
        v.sort();
        v.into_iter().map(|p| (p.clone(), fs::read(&p).unwrap())).collect()
    };
    fs::remove_dir_all(&run).unwrap();
    ok(&["train", "--config", s(&config)]);
    for (path, bytes) in first {
        assert_eq!(fs::read(&path).unwrap(), bytes, "{}", path.display());
    }
}

#[test]
fn sweep_rows_follow_the_beta_list() {
    let (dir, config) = workspace("max_updates = 4\n");
    let config_text = fs::read_to_string(&config).unwrap().replace("max_updates = 12\n", "");
    fs::write(&config, config_text).unwrap();
    let rows = |out: &str| out.lines().count() - 1;
    assert_eq!(rows(&ok(&["sweep", "--config", s(&config), "--betas", "0"])), 1);
    let extended = ok(&["sweep", "--config", s(&config), "--betas", "-0.01,0,0.01,0.03,0.05,0.07,0.09"]);
    assert_eq!(rows(&extended), 7);
    assert!(extended.lines().nth(1).unwrap().starts_with("-0.01,variance,"));
    assert_eq!(rows(&ok(&["sweep", "--config", s(&config)])), 7);
    assert!(dir.path().join("run/sweep.csv").is_file());
}

fn uniform_checkpoint(dir: &Path, vocab: &Vocabulary) -> PathBuf {
    let cfg = ModelConfig {
        d_model: 8,
        n_layers: 1,
        d_ff: 16,
        max_seq_len: 16,
        ..ModelConfig::desk(vocab.len())
    };
    let mut m = TransformerLm::<f32>::new(cfg).unwrap();
    for id in [ParamId::OutputWeight, ParamId::OutputBias] {
        m.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    let path = dir.join("uniform.ckpt");
    Checkpoint::new(m, vocab.fingerprint()).save(&path).unwrap();
    path
}

#[test]
fn eval_uniform_checkpoint_and_conventions() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocabulary::build([["w", "x", "y", "z"]], 8).unwrap().vocab;
    let vpath = dir.path().join("vocab.txt");
    vocab.save(&vpath).unwrap();
    let ck = uniform_checkpoint(dir.path(), &vocab);
    let test = dir.path().join("test.txt");
    fs::write(&test, "w x y z w\nx\ny z\n").unwrap();
    let json = ok(&["eval", "--checkpoint", s(&ck), "--vocab", s(&vpath), "--test", s(&test), "--pooled"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    for key in ["ppl_seq_avg", "ppl_token", "nll_per_token", "uid_behavior", "uid_behavior_pooled", "token_count", "sequence_count"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert!((v["ppl_token"].as_f64().unwrap() - 8.0).abs() < 1e-4);
    assert!((v["ppl_seq_avg"].as_f64().unwrap() - 8.0).abs() < 1e-4);
    assert_eq!(v["token_count"], 11);
}

#[test]
fn eval_conventions_match_surprisal_oracle() {
    let (dir, config) = workspace("");
    ok(&["train", "--config", s(&config)]);
    let run = dir.path().join("run");
    let ck = run.join(fs::read_to_string(run.join("best")).unwrap().trim());
    let csv = dir.path().join("u.csv");
    let vocab = dir.path().join("data/vocab.txt");
    let test = dir.path().join("data/test.txt");
    let json = ok(&["eval", "--checkpoint", s(&ck), "--vocab", s(&vocab), "--test", s(&test), "--surprisals", s(&csv)]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();

    let mut per_seq: Vec<Vec<f64>> = Vec::new();
    for line in fs::read_to_string(&csv).unwrap().lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let id: usize = f[0].parse().unwrap();
        if per_seq.len() <= id {
            per_seq.resize(id + 1, Vec::new());
        }
        per_seq[id].push(f[3].parse().unwrap());
    }
    let n = per_seq.len() as f64;
    let seq_avg = (per_seq.iter().map(|u| u.iter().sum::<f64>() / u.len() as f64).sum::<f64>() / n).exp();
    let all: Vec<f64> = per_seq.concat();
    let token = (all.iter().sum::<f64>() / all.len() as f64).exp();
    assert!((v["ppl_seq_avg"].as_f64().unwrap() - seq_avg).abs() < 1e-9 * seq_avg);
    assert!((v["ppl_token"].as_f64().unwrap() - token).abs() < 1e-9 * token);
    assert_ne!(seq_avg, token);
}

#[test]
fn sampling_is_seeded_and_decodes() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocabulary::build([["a", "b"]], 6).unwrap().vocab;
    let vpath = dir.path().join("vocab.txt");
    vocab.save(&vpath).unwrap();
    let ck = uniform_checkpoint(dir.path(), &vocab);
    let mut c = Checkpoint::load(&ck).unwrap();
    let a = vocab.id_of("a").unwrap() as usize;
    c.model.params_mut().get_mut(ParamId::OutputBias).data_mut()[a] = 60.0;
    c.save(&ck).unwrap();

    let out = dir.path().join("one.txt");
    let args = ["sample", "--checkpoint", s(&ck), "--vocab", s(&vpath), "--k", "1", "--seed", "0", "--cap", "3", "--out", s(&out)];
    let json = ok(&args);
    assert_eq!(fs::read_to_string(&out).unwrap(), "a a a\n");
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!((v["samples"].as_u64(), v["capped"].as_u64()), (Some(1), Some(1)));

    let uniform = uniform_checkpoint(dir.path(), &vocab);
    let (p, q) = (dir.path().join("p.txt"), dir.path().join("q.txt"));
    for f in [&p, &q] {
        ok(&["sample", "--checkpoint", s(&uniform), "--vocab", s(&vpath), "--k", "40", "--seed", "9", "--out", s(f)]);
    }
    assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 40);
}

#[test]
fn significance_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    let xs = [3.1, 2.8, 3.5, 4.0, 2.2, 3.3, 2.9, 3.8];
    let ys = [2.7, 2.9, 3.0, 3.2, 2.1, 3.1, 2.4, 3.5];
    let write = |p: &Path, v: &[f64]| fs::write(p, v.iter().map(|x| format!("{x}\n")).collect::<String>()).unwrap();
    write(&a, &xs);
    write(&b, &xs);
    let same = ok(&["significance", "--a", s(&a), "--b", s(&b), "--seed", "1"]);
    assert!(same.contains("p: 1.0000\n"), "{same}");

    write(&b, &ys);
    let out = ok(&["significance", "--a", s(&a), "--b", s(&b), "--seed", "1", "--exhaustive"]);
    let oracle = paired_permutation_test(&PairedScores::new(xs.to_vec(), ys.to_vec()).unwrap(), Resampling::Exhaustive, 0)
        .unwrap()
        .p_value;
    let p_line = out.lines().find(|l| l.starts_with("p: ")).unwrap();
    assert!(p_line.starts_with(&format!("p: {oracle:.4}")));
    assert_eq!(p_line.ends_with('†'), oracle < 0.05);
    assert!(oracle < 0.05, "fixture should be significant: {oracle}");
}

#[test]
fn significance_reads_surprisal_tables() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    fs::write(&a, "sequence_id,position,token,surprisal\n0,1,5,1.0\n0,2,2,3.0\n1,1,2,4.0\n").unwrap();
    let b = dir.path().join("b.txt");
    fs::write(&b, "2.0\n4.0\n").unwrap();
    let out = ok(&["significance", "--a", s(&a), "--b", s(&b), "--seed", "1"]);
    assert!(out.contains("p: 1.0000"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(code(&["train", "--config", s(&missing)]), 2);
    assert_eq!(code(&["train"]), 3);
    assert_eq!(code(&["frobnicate"]), 3);
    assert_eq!(code(&["--help"]), 0);

    let (_w, config) = workspace("");
    let text = fs::read_to_string(&config).unwrap();
    fs::write(&config, text.replace("[model]\n", "[model]\nwidth = 3\n")).unwrap();
    assert_eq!(code(&["train", "--config", s(&config)]), 3);
    fs::write(&config, text.replace("lr = 0.003", "lr = -1.0")).unwrap();
    assert_eq!(code(&["train", "--config", s(&config)]), 3);
    fs::write(&config, text.replace("data/dev.txt", "data/missing.txt")).unwrap();
    assert_eq!(code(&["train", "--config", s(&config)]), 2);

    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "1.0\nnot a number\n").unwrap();
    assert_eq!(code(&["significance", "--a", s(&bad), "--b", s(&bad), "--seed", "0"]), 3);
}

#[test]
fn divergence_exits_with_training_failure() {
    let (_w, config) = workspace("");
    let text = fs::read_to_string(&config)
        .unwrap()
        .replace("lr = 0.003", "lr = 50.0\nclip_norm = 1e9\nadam_eps = 1e-3")
        .replace("warmup = 5", "warmup = 0")
        .replace("dropout = 0.1", "dropout = 0.0");
    fs::write(&config, text).unwrap();
    let out = uidlm(&["train", "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}
