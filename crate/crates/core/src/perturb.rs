//! Order-destroying input manipulations applied to encoded pairs.
//!
//! Only the query and passage spans are rearranged, each within its own
//! bounds; `[CLS]`, both `[SEP]`s, segment ids and padding never move.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tokenizer::TokenizedPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PerturbMode {
    Natural,
    /// Token ids in decreasing order within each span.
    SortDesc,
    /// Keyed Fisher-Yates shuffle within each span.
    Shuffle { seed: u64 },
}

impl PerturbMode {
    /// Short name without the seed, for file names and tables.
    pub fn label(&self) -> &'static str {
        match self {
            PerturbMode::Natural => "natural",
            PerturbMode::SortDesc => "sort",
            PerturbMode::Shuffle { .. } => "shuffle",
        }
    }
}

impl fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerturbMode::Shuffle { seed } => write!(f, "shuffle:{seed}"),
            other => f.write_str(other.label()),
        }
    }
}

impl FromStr for PerturbMode {
    type Err = Error;

    /// `natural | sort | shuffle:<seed>`
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural" => Ok(PerturbMode::Natural),
            "sort" => Ok(PerturbMode::SortDesc),
            _ => match s.strip_prefix("shuffle:") {
                Some(seed) => seed
                    .parse()
                    .map(|seed| PerturbMode::Shuffle { seed })
                    .map_err(|_| Error::Config(format!("bad shuffle seed in `{s}`"))),
                None => Err(Error::Config(format!(
                    "unknown perturbation `{s}` (expected natural | sort | shuffle:<seed>)"
                ))),
            },
        }
    }
}

impl Serialize for PerturbMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PerturbMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Two independent generators (query span, passage span) derived from a
/// global seed and a per-example key.
pub fn span_rngs(seed: u64, example_key: &str) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(example_key.as_bytes());
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    let base = u64::from_le_bytes(word);
    let mut q = ChaCha8Rng::seed_from_u64(base);
    let mut p = ChaCha8Rng::seed_from_u64(base);
    q.set_stream(0);
    p.set_stream(1);
    (q, p)
}

/// Fisher-Yates from the back: for `i = n-1 .. 1`, swap `i` with a uniform
/// `j` in `0..=i`.
pub fn fisher_yates<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Applies `mode` to `pair`. `example_key` only matters for shuffling.
pub fn apply(pair: &TokenizedPair, mode: PerturbMode, example_key: &str) -> TokenizedPair {
    apply_with_permutation(pair, mode, example_key).0
}

/// Like [`apply`], also returning `source` with `source[i]` the original
/// position of the token now at position `i`.
pub fn apply_with_permutation(
    pair: &TokenizedPair,
    mode: PerturbMode,
    example_key: &str,
) -> (TokenizedPair, Vec<usize>) {
    let mut source: Vec<usize> = (0..pair.ids.len()).collect();
    match mode {
        PerturbMode::Natural => {}
        PerturbMode::SortDesc => {
            for span in [pair.query_span.clone(), pair.passage_span.clone()] {
                source[span].sort_by(|&a, &b| pair.ids[b].cmp(&pair.ids[a]));
            }
        }
        PerturbMode::Shuffle { seed } => {
            let (mut rq, mut rp) = span_rngs(seed, example_key);
            fisher_yates(&mut source[pair.query_span.clone()], &mut rq);
            fisher_yates(&mut source[pair.passage_span.clone()], &mut rp);
        }
    }
    let mut out = pair.clone();
    for (i, &s) in source.iter().enumerate() {
        out.ids[i] = pair.ids[s];
    }
    (out, source)
}
