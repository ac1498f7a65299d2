//! Text ingestion: tokenization, vocabularies, splits, batching, and
//! synthetic Markov corpora.

mod batch;
mod sequence;
mod split;
mod synthetic;
mod tokenize;
mod vocab;

pub use batch::{make_batches, Batch};
pub use sequence::TokenSequence;
pub use split::{split_corpus, CorpusSplits, DEFAULT_RATIOS};
pub use synthetic::{analytic_entropy_rate, generate_synthetic, symbol_name, MarkovSourceSpec};
pub use tokenize::tokenize;
pub use vocab::{VocabBuild, Vocabulary, BOS, EOS, PAD, RESERVED, RESERVED_NAMES, UNK};

/// Tokenizes and encodes every line.
pub fn encode_lines<S: AsRef<str>>(lines: &[S], vocab: &Vocabulary, lowercase: bool) -> Vec<TokenSequence> {
    lines
        .iter()
        .map(|l| vocab.encode(&tokenize(l.as_ref(), lowercase)))
        .collect()
}
