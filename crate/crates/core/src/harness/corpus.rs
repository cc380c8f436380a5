//! Text corpora: a seeded Markov generator and a one-document-per-line reader.

use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::tokenizer::{encode, EOS};
use crate::error::{Error, Result};

const SYLLABLES: [&str; 24] = [
    "ka", "to", "ri", "mu", "se", "na", "lo", "vi", "de", "pa", "shi", "ru", "me", "ko", "ta", "ne", "bo", "li",
    "sa", "fu", "gi", "ya", "no", "he",
];
const LEXICON: usize = 1500;
const SUCCESSORS: usize = 8;
/// Held-out share of the token stream.
const VALID_FRACTION: f64 = 0.1;

/// Token streams, documents joined by end-of-sequence markers.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub n_docs: usize,
}

impl Corpus {
    pub fn from_documents<S: AsRef<str>>(docs: &[S]) -> Result<Self> {
        let mut stream = Vec::new();
        let mut n_docs = 0;
        for d in docs.iter().map(|d| d.as_ref().trim()).filter(|d| !d.is_empty()) {
            stream.extend(encode(d));
            stream.push(EOS);
            n_docs += 1;
        }
        if n_docs == 0 {
            return Err(Error::Input("corpus has no nonempty documents".into()));
        }
        let cut = ((stream.len() as f64) * (1.0 - VALID_FRACTION)).round() as usize;
        let cut = cut.clamp(1, stream.len().saturating_sub(1).max(1));
        let valid = stream.split_off(cut);
        Ok(Corpus { train: stream, valid, n_docs })
    }

    /// One document per line.
    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        Self::from_documents(&lines)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn markov(n_docs: usize, seed: u64) -> Self {
        Self::from_documents(&markov_documents(n_docs, seed)).expect("generator emits nonempty documents")
    }
}

/// Sentences from a sparse word-bigram chain over a synthetic lexicon.
pub fn markov_documents(n_docs: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // the lexicon and chain are fixed so every seed samples the same language
    let mut lang = ChaCha8Rng::seed_from_u64(0x1e81c0);
    let words: Vec<String> = (0..LEXICON)
        .map(|_| {
            let n = lang.gen_range(1..=4);
            (0..n).map(|_| *SYLLABLES.choose(&mut lang).expect("nonempty")).collect()
        })
        .collect();
    let zipf: Vec<f64> = (1..=LEXICON).map(|r| 1.0 / r as f64).collect();
    let start = WeightedIndex::new(&zipf).expect("positive weights");
    let succ: Vec<Vec<usize>> = (0..LEXICON)
        .map(|_| (0..SUCCESSORS).map(|_| start.sample(&mut lang)).collect())
        .collect();
    let succ_w = WeightedIndex::new([8.0, 5.0, 3.0, 2.0, 1.5, 1.0, 1.0, 0.5]).expect("positive weights");

    (0..n_docs)
        .map(|_| {
            let sentences = rng.gen_range(2..=5);
            let mut doc = Vec::new();
            for _ in 0..sentences {
                let len = rng.gen_range(4..=10);
                let mut w = start.sample(&mut rng);
                let mut s = Vec::with_capacity(len);
                for _ in 0..len {
                    s.push(words[w].as_str());
                    w = succ[w][succ_w.sample(&mut rng)];
                }
                doc.push(format!("{}.", s.join(" ")));
            }
            doc.join(" ")
        })
        .collect()
}
