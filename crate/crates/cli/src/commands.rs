use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use uidlm::corpus::{
    analytic_entropy_rate, encode_lines, generate_synthetic, split_corpus, tokenize, MarkovSourceSpec, Vocabulary,
};
use uidlm::eval::{evaluate, generation_report, sample_many, write_surprisal_csv};
use uidlm::io::{lines_to_string, read_lines, write_atomic};
use uidlm::model::Checkpoint;
use uidlm::objective::{ObjectiveConfig, RegularizerKind};
use uidlm::stats::{format_p_value, paired_permutation_test, PairedScores, Resampling};
use uidlm::trainer::{
    ablation_csv, size_ablation, sweep_beta, sweep_csv, train, CheckpointSink, ObjectiveVariant, TrainOutcome,
};

use crate::config::Experiment;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Default β grid of the sweep command.
pub const DEFAULT_BETAS: [f64; 7] = [0.006, 0.008, 0.01, 0.02, 0.03, 0.04, 0.05];

pub const BEST_MARKER: &str = "best";
pub const REPORT_FILE: &str = "report.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

pub struct PrepareArgs<'a> {
    pub input: &'a Path,
    pub vocab_size: usize,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub out: &'a Path,
    pub lowercase: bool,
}

/// Splits a line-per-sequence corpus and builds the vocabulary on the train part.
pub fn prepare(a: &PrepareArgs<'_>) -> Result<String> {
    let lines: Vec<String> = read_lines(a.input)?.into_iter().filter(|l| !l.trim().is_empty()).collect();
    let splits = split_corpus(&lines, a.ratios, a.seed)?;
    let build = Vocabulary::build(splits.train.iter().map(|l| tokenize(l, a.lowercase)), a.vocab_size)?;
    create_dir(a.out)?;
    build.vocab.save(&a.out.join("vocab.txt"))?;
    for (name, part) in [("train", &splits.train), ("dev", &splits.dev), ("test", &splits.test)] {
        write_atomic(&a.out.join(format!("{name}.txt")), lines_to_string(part).as_bytes())?;
    }
    Ok(format!(
        "coverage: {}\nvocabulary: {} ids\nsplit: {} train, {} dev, {} test\n",
        build.coverage,
        build.vocab.len(),
        splits.train.len(),
        splits.dev.len(),
        splits.test.len()
    ))
}

fn run_training(exp: &Experiment, dir: &Path) -> Result<TrainOutcome> {
    create_dir(dir)?;
    let sink = CheckpointSink {
        dir,
        vocab_hash: exp.vocab.fingerprint(),
    };
    let out = train(&exp.config.train, &exp.config.model, &exp.splits, Some(sink))?;
    out.report.save(&dir.join(REPORT_FILE))?;
    let best = out.report.best_record();
    let name = best.checkpoint.as_deref().expect("interval checkpoints are written");
    write_atomic(&dir.join(BEST_MARKER), format!("{name}\n").as_bytes())?;
    Ok(out)
}

pub fn train_cmd(config: &Path) -> Result<String> {
    let exp = Experiment::load(config)?;
    let dir = exp.config.data.output_dir.clone();
    let out = run_training(&exp, &dir)?;
    let best = out.report.best_record();
    Ok(format!(
        "best: update {} ({}), dev NLL {:.6} nats/token\nreport: {}\n",
        best.update,
        best.checkpoint.as_deref().unwrap_or("-"),
        best.dev_nll_per_token,
        dir.join(REPORT_FILE).display()
    ))
}

fn sweep_kind(objective: &ObjectiveConfig, override_kind: Option<RegularizerKind>) -> RegularizerKind {
    match (override_kind, objective.regularizer) {
        (Some(k), _) => k,
        (None, RegularizerKind::None) => RegularizerKind::Variance,
        (None, k) => k,
    }
}

fn require_test(exp: &Experiment) -> Result<()> {
    if exp.splits.test.is_empty() {
        return Err(CliError::validation("this command needs data.test in the config"));
    }
    Ok(())
}

pub fn sweep_cmd(config: &Path, betas: &[f64], kind: Option<RegularizerKind>) -> Result<String> {
    let exp = Experiment::load(config)?;
    require_test(&exp)?;
    let kind = sweep_kind(&exp.config.train.objective, kind);
    let rows = sweep_beta(&exp.config.train, &exp.config.model, kind, betas, &exp.splits)?;
    let dir = &exp.config.data.output_dir;
    create_dir(dir)?;
    let csv = sweep_csv(&rows)?;
    write_atomic(&dir.join("sweep.csv"), csv.as_bytes())?;
    Ok(csv)
}

pub fn ablation_cmd(config: &Path, sizes: &[usize], beta: f64, seed: u64) -> Result<String> {
    let exp = Experiment::load(config)?;
    require_test(&exp)?;
    let base = &exp.config.train.objective;
    let variant = |label: &str, regularizer, beta| ObjectiveVariant {
        label: label.into(),
        objective: ObjectiveConfig {
            regularizer,
            beta,
            ..base.clone()
        },
    };
    let variants = [
        variant("baseline", RegularizerKind::None, 0.0),
        variant("variance", RegularizerKind::Variance, beta),
        variant("local_consistency", RegularizerKind::LocalConsistency, beta),
    ];
    let rows = size_ablation(&exp.config.train, &exp.config.model, sizes, &variants, &exp.splits, seed)?;
    let dir = &exp.config.data.output_dir;
    create_dir(dir)?;
    let csv = ablation_csv(&rows)?;
    write_atomic(&dir.join("ablation.csv"), csv.as_bytes())?;
    Ok(csv)
}

fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.vocab_hash != [0; 32] && ck.vocab_hash != vocab.fingerprint() {
        return Err(CliError::validation(format!(
            "{} was trained with a different vocabulary",
            path.display()
        )));
    }
    if ck.model.config().vocab_size != vocab.len() {
        return Err(CliError::validation(format!(
            "checkpoint has {} output ids but the vocabulary has {}",
            ck.model.config().vocab_size,
            vocab.len()
        )));
    }
    Ok(ck)
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub vocab: &'a Path,
    pub test: &'a Path,
    pub lowercase: bool,
    pub pooled: bool,
    pub max_tokens: usize,
    pub out: Option<&'a Path>,
    pub surprisals: Option<&'a Path>,
}

pub fn eval_cmd(a: &EvalArgs<'_>) -> Result<String> {
    let vocab = Vocabulary::load(a.vocab)?;
    let ck = load_checkpoint(a.checkpoint, &vocab)?;
    let seqs = encode_lines(&read_lines(a.test)?, &vocab, a.lowercase);
    let report = evaluate(&ck.model, &seqs, a.max_tokens, a.pooled)?;
    if let Some(path) = a.surprisals {
        let vectors = ck.model.score_all(&seqs, a.max_tokens)?;
        write_surprisal_csv(path, &vectors)?;
    }
    let json = to_json(&report);
    if let Some(path) = a.out {
        write_atomic(path, json.as_bytes())?;
    }
    Ok(json)
}

pub struct SampleArgs<'a> {
    pub checkpoint: &'a Path,
    pub vocab: &'a Path,
    pub k: usize,
    pub seed: u64,
    pub cap: usize,
    pub out: &'a Path,
    pub report: Option<&'a Path>,
}

pub fn sample_cmd(a: &SampleArgs<'_>) -> Result<String> {
    let vocab = Vocabulary::load(a.vocab)?;
    let ck = load_checkpoint(a.checkpoint, &vocab)?;
    let samples = sample_many(&ck.model, a.k, a.seed, a.cap)?;
    let lines: Vec<String> = samples
        .iter()
        .map(|s| {
            s.body
                .iter()
                .map(|&id| vocab.token_of(id).expect("sampled ids are in range"))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    write_atomic(a.out, lines_to_string(&lines).as_bytes())?;
    let json = to_json(&generation_report(&samples)?);
    if let Some(path) = a.report {
        write_atomic(path, json.as_bytes())?;
    }
    Ok(json)
}

/// Per-sequence scores from either a surprisal table written by `eval`
/// (averaged per sequence) or a plain file with one number per line.
pub fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let bad = |line: usize, what: &str| CliError::validation(format!("{}:{line}: {what}", path.display()));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, first)) = lines.clone().next() else {
        return Err(CliError::validation(format!("{}: no scores", path.display())));
    };
    if first.trim() != "sequence_id,position,token,surprisal" {
        return lines
            .map(|(i, l)| l.trim().parse::<f64>().map_err(|_| bad(i + 1, "not a number")))
            .collect();
    }
    lines.next();
    let mut sums: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for (i, l) in lines {
        let fields: Vec<&str> = l.split(',').collect();
        let [id, _, _, s] = fields[..] else {
            return Err(bad(i + 1, "expected 4 columns"));
        };
        let id: u64 = id.parse().map_err(|_| bad(i + 1, "bad sequence id"))?;
        let s: f64 = s.parse().map_err(|_| bad(i + 1, "bad surprisal"))?;
        let e = sums.entry(id).or_default();
        e.0 += s;
        e.1 += 1;
    }
    Ok(sums.values().map(|(s, n)| s / *n as f64).collect())
}

pub fn significance_cmd(a: &Path, b: &Path, mode: Resampling, seed: u64) -> Result<String> {
    let scores = PairedScores::new(read_scores(a)?, read_scores(b)?)?;
    let r = paired_permutation_test(&scores, mode, seed)?;
    Ok(format!(
        "statistic: {}\np: {}\nresamples: {}{}\n",
        r.statistic,
        format_p_value(r.p_value),
        r.resamples,
        if r.exhaustive { " (exhaustive)" } else { "" }
    ))
}

pub fn synth_cmd(spec: &Path, n: usize, seed: u64, out: &Path) -> Result<String> {
    let spec = MarkovSourceSpec::load(spec)?;
    let lines = generate_synthetic(&spec, n, seed)?;
    write_atomic(out, lines_to_string(&lines).as_bytes())?;
    let h = analytic_entropy_rate(&spec)?;
    Ok(format!("entropy rate: {h} nats/token\n"))
}

pub fn best_checkpoint(dir: &Path) -> Result<PathBuf> {
    let marker = dir.join(BEST_MARKER);
    let name = fs::read_to_string(&marker).map_err(|e| CliError::io(format!("{}: {e}", marker.display())))?;
    Ok(dir.join(name.trim()))
}
