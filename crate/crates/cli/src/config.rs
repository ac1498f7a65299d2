use std::path::{Path, PathBuf};

use serde::Deserialize;
use uidlm::corpus::{encode_lines, CorpusSplits, TokenSequence, Vocabulary};
use uidlm::io::read_lines;
use uidlm::model::ModelConfig;
use uidlm::trainer::TrainConfig;

use crate::error::CliError;

/// Experiment file: data locations, architecture, and training settings.
///
/// ```toml
/// [data]
/// vocab = "prepared/vocab.txt"
/// train = "prepared/train.txt"
/// dev = "prepared/dev.txt"
/// test = "prepared/test.txt"
/// output_dir = "runs/variance-0.02"
///
/// [model]
/// d_model = 64
///
/// [train]
/// max_updates = 2000
///
/// [train.objective]
/// regularizer = "variance"
/// beta = 0.02
///
/// [train.seeds]
/// init = 1
/// data = 2
/// dropout = 3
/// ```
///
/// Relative paths resolve against the directory holding the file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default = "empty_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn empty_model() -> ModelConfig {
    ModelConfig::desk(0)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub vocab: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub lowercase: bool,
}

/// Everything a training command needs, loaded and checked.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub vocab: Vocabulary,
    pub splits: CorpusSplits<TokenSequence>,
}

impl ExperimentConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::validation(e.to_string()))?;
        let d = &mut cfg.data;
        for p in [&mut d.vocab, &mut d.train, &mut d.dev, &mut d.output_dir] {
            *p = base.join(&*p);
        }
        if let Some(t) = &mut d.test {
            *t = base.join(&*t);
        }
        for p in [Some(&d.vocab), Some(&d.train), Some(&d.dev), d.test.as_ref()].into_iter().flatten() {
            if !p.is_file() {
                return Err(CliError::io(format!("{}: no such file", p.display())));
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut config = ExperimentConfig::load(path)?;
        let vocab = Vocabulary::load(&config.data.vocab)?;
        match config.model.vocab_size {
            0 => config.model.vocab_size = vocab.len(),
            v if v != vocab.len() => {
                return Err(CliError::validation(format!(
                    "model vocab_size {v} disagrees with the vocabulary file ({} entries)",
                    vocab.len()
                )))
            }
            _ => {}
        }
        config.model.validate()?;
        let d = &config.data;
        let read = |p: &Path| -> Result<Vec<TokenSequence>, CliError> {
            Ok(encode_lines(&read_lines(p)?, &vocab, d.lowercase))
        };
        let train = read(&d.train)?;
        let dev = read(&d.dev)?;
        let test = match &d.test {
            Some(p) => read(p)?,
            None => Vec::new(),
        };
        let splits = CorpusSplits {
            indices: [(0..train.len()).collect(), (0..dev.len()).collect(), (0..test.len()).collect()],
            train,
            dev,
            test,
            seed: config.train.seeds.data,
            ratios: uidlm::corpus::DEFAULT_RATIOS,
        };
        Ok(Experiment { config, vocab, splits })
    }
}
