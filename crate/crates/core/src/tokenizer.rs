//! WordPiece-style subword tokenizer and query/passage pair encoding.
//!
//! Text is lowercased and split on whitespace; punctuation characters become
//! tokens of their own. Each word is then cut greedily into the longest
//! vocabulary prefix, with continuation pieces carrying a `##` prefix. A word
//! that cannot be fully decomposed maps to `[UNK]`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use crate::corpus::{read_text, write_text};
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
pub const CONTINUATION: &str = "##";

/// Words longer than this (in characters) are mapped to `[UNK]` directly.
const MAX_WORD_CHARS: usize = 100;

/// Token table with dense ids; ids 0..4 are the reserved specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercases and splits into words and single-character punctuation tokens.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars().flat_map(char::to_lowercase) {
            if is_punct(c) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            } else {
                word.push(c);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

fn by_freq_then_lex(counts: HashMap<String, u64>) -> Vec<(String, u64)> {
    let mut v: Vec<_> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

impl Vocab {
    /// Builds a vocabulary from token strings in id order. The first four
    /// must be the reserved specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED).any(|(t, r)| t != r)
        {
            return Err(Error::Invalid(format!(
                "vocabulary must start with {}",
                RESERVED.join(" ")
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Invalid(format!("bad vocabulary token at id {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Frequency-driven vocabulary: every character, then the most frequent
    /// whole words, then the most frequent `##` word suffixes, until
    /// `target_size` entries (specials included). Ties break lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, target_size: usize) -> Result<Self> {
        let mut word_counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for w in pre_tokenize(text) {
                *word_counts.entry(w).or_default() += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(Error::Invalid("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut char_counts: HashMap<String, u64> = HashMap::new();
        for (w, n) in &word_counts {
            for c in w.chars() {
                *char_counts.entry(c.to_string()).or_default() += n;
            }
        }
        if target_size < char_counts.len() + RESERVED.len() {
            return Err(Error::Invalid(format!(
                "target size {target_size} is below {} characters + {} specials",
                char_counts.len(),
                RESERVED.len()
            )));
        }

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(by_freq_then_lex(char_counts).into_iter().map(|(c, _)| c));

        let words = by_freq_then_lex(word_counts);
        for (w, _) in &words {
            if tokens.len() >= target_size {
                break;
            }
            if w.chars().count() > 1 {
                tokens.push(w.clone());
            }
        }

        // Suffix pieces let unseen words decompose at tokenization time.
        if tokens.len() < target_size {
            let mut suffix_counts: HashMap<String, u64> = HashMap::new();
            for (w, n) in &words {
                for (i, _) in w.char_indices().skip(1) {
                    *suffix_counts
                        .entry(format!("{CONTINUATION}{}", &w[i..]))
                        .or_default() += n;
                }
            }
            for (s, _) in by_freq_then_lex(suffix_counts) {
                if tokens.len() >= target_size {
                    break;
                }
                tokens.push(s);
            }
        }
        Vocab::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    fn word_pieces(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(UNK_ID);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut buf = String::new();
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                buf.clear();
                if start > 0 {
                    buf.push_str(CONTINUATION);
                }
                buf.extend(&chars[start..end]);
                if let Some(id) = self.id(&buf) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK_ID);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Token ids of `text`. Total: anything unknown becomes `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in pre_tokenize(text) {
            self.word_pieces(&w, &mut out);
        }
        out
    }

    /// Token strings for ids; unknown ids render as `[UNK]`.
    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK_ID as usize]))
            .collect()
    }

    /// Encodes `[CLS] query [SEP] passage [SEP]`, truncating the passage
    /// tail first and then the query tail when over `max_len`.
    pub fn encode_pair(&self, query: &str, passage: &str, max_len: usize) -> Result<TokenizedPair> {
        if max_len < 8 {
            return Err(Error::Config(format!("max_len {max_len} is below 8")));
        }
        let mut q = self.tokenize(query);
        let mut p = self.tokenize(passage);
        if q.is_empty() {
            return Err(Error::Invalid(format!("query `{query}` has no tokens")));
        }
        let budget = max_len - 3;
        if q.len() + p.len() > budget {
            let excess = q.len() + p.len() - budget;
            let cut = excess.min(p.len());
            p.truncate(p.len() - cut);
            if q.len() + p.len() > budget {
                q.truncate(budget);
            }
        }
        Ok(TokenizedPair::from_parts(&q, &p))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }
}

pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocab> {
    Vocab::parse(&read_text(path.as_ref())?)
}

pub fn save_vocab(vocab: &Vocab, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &vocab.to_text())
}

/// Encoded query/passage input.
///
/// `ids` may carry trailing `[PAD]`s beyond `n_total`; those positions are
/// masked out of attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPair {
    pub ids: Vec<u32>,
    /// 0 up to and including the first `[SEP]`, 1 afterwards.
    pub segments: Vec<u8>,
    pub query_span: Range<usize>,
    pub passage_span: Range<usize>,
    pub sep_positions: [usize; 2],
    pub n_total: usize,
}

impl TokenizedPair {
    /// Lays out `[CLS] query [SEP] passage [SEP]` without any truncation.
    pub fn from_parts(query: &[u32], passage: &[u32]) -> Self {
        let n = query.len() + passage.len() + 3;
        let mut ids = Vec::with_capacity(n);
        ids.push(CLS_ID);
        ids.extend_from_slice(query);
        ids.push(SEP_ID);
        ids.extend_from_slice(passage);
        ids.push(SEP_ID);
        let first_sep = query.len() + 1;
        let segments = (0..n).map(|i| u8::from(i > first_sep)).collect();
        TokenizedPair {
            ids,
            segments,
            query_span: 1..first_sep,
            passage_span: first_sep + 1..n - 1,
            sep_positions: [first_sep, n - 1],
            n_total: n,
        }
    }

    pub fn query_ids(&self) -> &[u32] {
        &self.ids[self.query_span.clone()]
    }

    pub fn passage_ids(&self) -> &[u32] {
        &self.ids[self.passage_span.clone()]
    }

    /// Copy with `[PAD]` appended up to `len` positions.
    pub fn padded(&self, len: usize) -> Self {
        let mut out = self.clone();
        if len > out.ids.len() {
            out.ids.resize(len, PAD_ID);
            out.segments.resize(len, 0);
        }
        out
    }

    pub fn validate(&self, max_len: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("tokenized pair: {m}")));
        let n = self.n_total;
        if self.ids.len() != self.segments.len() || n > self.ids.len() {
            return bad("length mismatch");
        }
        if self.ids.len() > max_len {
            return bad("longer than max_len");
        }
        if n < 3 || self.ids[0] != CLS_ID {
            return bad("must start with [CLS]");
        }
        let [s1, s2] = self.sep_positions;
        if self.query_span != (1..s1) || self.passage_span != (s1 + 1..s2) || s2 + 1 != n {
            return bad("spans do not match separator positions");
        }
        if self.ids[s1] != SEP_ID || self.ids[s2] != SEP_ID {
            return bad("separators missing");
        }
        let seps = self.ids[..n].iter().filter(|&&i| i == SEP_ID).count();
        if seps != 2 || self.ids[..n].iter().filter(|&&i| i == CLS_ID).count() != 1 {
            return bad("special tokens inside spans");
        }
        if self.ids[n..].iter().any(|&i| i != PAD_ID) {
            return bad("non-pad token after the final [SEP]");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(extra: &[&str]) -> Vocab {
        Vocab::from_tokens(
            RESERVED
                .iter()
                .chain(extra.iter())
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn frequency_vocab_small_corpus() {
        let v = Vocab::build(["aa", "aa", "ab"], 8).unwrap();
        assert_eq!(v.len(), 8);
        for t in ["a", "b", "aa"] {
            assert!(v.id(t).is_some(), "missing {t}");
        }
        assert_eq!(v.decode(&[4, 5, 6, 7]), ["a", "b", "aa", "ab"]);
        assert_eq!(v, Vocab::build(["aa", "aa", "ab"], 8).unwrap());
    }

    #[test]
    fn vocab_target_too_small() {
        assert!(Vocab::build(["abc"], 6).is_err());
        assert!(Vocab::build(["   "], 100).is_err());
    }

    #[test]
    fn suffix_pieces_fill_remaining_room() {
        // 5 characters + 3 words leave one slot; "##b" and "##y" tie on
        // frequency and "##b" wins lexicographically.
        let v = Vocab::build(["xy xy ab cb"], 4 + 5 + 3 + 1).unwrap();
        assert!(v.id("xy").is_some() && v.id("ab").is_some());
        assert!(v.id("##b").is_some());
        assert!(v.id("##y").is_none());
        assert_eq!(v.decode(&v.tokenize("xb")), ["x", "##b"]);
    }

    #[test]
    fn whole_word() {
        let v = vocab(&["white"]);
        assert_eq!(v.decode(&v.tokenize("White")), ["white"]);
    }

    #[test]
    fn greedy_subwords() {
        let v = vocab(&["b", "##lea", "##ch", "##l"]);
        assert_eq!(v.decode(&v.tokenize("bleach")), ["b", "##lea", "##ch"]);
    }

    #[test]
    fn unknown_word() {
        let v = vocab(&["a"]);
        assert_eq!(v.tokenize("zzz"), [UNK_ID]);
        assert_eq!(v.tokenize("az"), [UNK_ID]);
    }

    #[test]
    fn punctuation_is_kept() {
        assert_eq!(pre_tokenize("Clothes, white's."), ["clothes", ",", "white", "'", "s", "."]);
    }

    #[test]
    fn pair_layout() {
        let v = vocab(&["a", "b", "c"]);
        let p = v.encode_pair("a", "b c", 16).unwrap();
        assert_eq!(p.ids, [CLS_ID, 4, SEP_ID, 5, 6, SEP_ID]);
        assert_eq!(p.segments, [0, 0, 0, 1, 1, 1]);
        assert_eq!(p.query_span, 1..2);
        assert_eq!(p.passage_span, 3..5);
        assert_eq!(p.sep_positions, [2, 5]);
        p.validate(16).unwrap();
    }

    #[test]
    fn passage_truncated_first() {
        let v = vocab(&["a", "b"]);
        let passage = vec!["b"; 100].join(" ");
        let p = v.encode_pair("a", &passage, 10).unwrap();
        assert_eq!(p.passage_ids().len(), 6);
        assert_eq!(p.n_total, 10);
        let long_query = vec!["a"; 20].join(" ");
        let p = v.encode_pair(&long_query, &passage, 10).unwrap();
        assert_eq!((p.query_ids().len(), p.passage_ids().len()), (7, 0));
        p.validate(10).unwrap();
    }

    #[test]
    fn empty_query_rejected() {
        let v = vocab(&["a"]);
        assert!(v.encode_pair(" ,", "a", 16).is_ok());
        assert!(v.encode_pair("   ", "a", 16).is_err());
        assert!(v.encode_pair("a", "a", 7).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::build(["the quick brown fox", "the lazy dog"], 40).unwrap();
        assert_eq!(Vocab::parse(&v.to_text()).unwrap(), v);
        assert!(Vocab::parse("a\nb\n").is_err());
    }

    proptest! {
        #[test]
        fn pair_spans_hold_truncated_tokens(
            q in "[a-e ]{1,30}", p in "[a-e ,.]{0,80}", max_len in 8usize..40
        ) {
            let v = Vocab::build(["ab cd e", "abc de"], 30).unwrap();
            let qt = v.tokenize(&q);
            prop_assume!(!qt.is_empty());
            let pt = v.tokenize(&p);
            let pair = v.encode_pair(&q, &p, max_len).unwrap();
            pair.validate(max_len).unwrap();
            prop_assert!(pair.n_total <= max_len);
            prop_assert!(qt.starts_with(pair.query_ids()));
            prop_assert!(pt.starts_with(pair.passage_ids()));
            prop_assert_eq!(v.tokenize(&q), qt);
        }
    }
}
