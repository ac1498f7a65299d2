use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::sequence::TokenSequence;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: usize = 4;

/// Header lines of a vocabulary file, in id order.
pub const RESERVED_NAMES: [&str; RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ↔ id map. Ids `0..4` are reserved; corpus tokens start at 4 in
/// descending training frequency, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// A vocabulary together with the fraction of training occurrences it covers.
#[derive(Debug, Clone)]
pub struct VocabBuild {
    pub vocab: Vocabulary,
    pub coverage: f64,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), (i + RESERVED) as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Keeps the `max_size - 4` most frequent tokens of `lines`.
    pub fn build<I, L, T>(lines: I, max_size: usize) -> Result<VocabBuild>
    where
        I: IntoIterator<Item = L>,
        L: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        if max_size < RESERVED + 1 {
            return Err(Error::Config(format!("vocabulary size {max_size} must be at least 5")));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut total = 0u64;
        for line in lines {
            for tok in line {
                *counts.entry(tok.as_ref().to_owned()).or_default() += 1;
                total += 1;
            }
        }
        if total == 0 {
            return Err(Error::Invalid("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED);
        let kept: u64 = ranked.iter().map(|(_, c)| c).sum();
        let vocab = Self::from_tokens(ranked.into_iter().map(|(t, _)| t).collect())?;
        Ok(VocabBuild {
            vocab,
            coverage: kept as f64 / total as f64,
        })
    }

    /// Total id count, reserved ids included.
    pub fn len(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        let id = id as usize;
        if id < RESERVED {
            Some(RESERVED_NAMES[id])
        } else {
            self.tokens.get(id - RESERVED).map(String::as_str)
        }
    }

    /// Corpus tokens in id order (no reserved entries).
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Wraps `tokens` in BOS/EOS, mapping out-of-vocabulary tokens to UNK.
    pub fn encode<T: AsRef<str>>(&self, tokens: &[T]) -> TokenSequence {
        let body: Vec<u32> = tokens
            .iter()
            .map(|t| self.id_of(t.as_ref()).unwrap_or(UNK))
            .collect();
        TokenSequence::from_body(&body).expect("vocabulary ids are never BOS/EOS/PAD")
    }

    /// Inverse of [`encode`](Self::encode) on raw ids; BOS and EOS are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        let seq = TokenSequence::new(ids.to_vec())?;
        seq.body()
            .iter()
            .map(|&id| {
                self.token_of(id)
                    .map(str::to_owned)
                    .ok_or_else(|| Error::MalformedSequence(format!("id {id} is not in the vocabulary")))
            })
            .collect()
    }

    /// File form: the four reserved names, then one token per line.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for name in RESERVED_NAMES.iter().copied().chain(self.tokens.iter().map(String::as_str)) {
            let _ = writeln!(s, "{name}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        for expected in RESERVED_NAMES {
            match lines.next() {
                Some(l) if l == expected => {}
                other => {
                    return Err(Error::Invalid(format!(
                        "vocabulary header: expected {expected:?}, found {other:?}"
                    )))
                }
            }
        }
        Self::from_tokens(lines.map(str::to_owned).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// SHA-256 of the file form; stored in checkpoints to tie them to a vocabulary.
    pub fn fingerprint(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }
}
