//! Reproducible synthetic collections with controlled relevance.
//!
//! Every passage is generated for one target query and one target grade.
//! A passage is a "title" run of query terms (in query order) inside a
//! Zipf-distributed body drawn from the most frequent tenth of the
//! vocabulary, the function words that never appear in queries. The title
//! opens the passage or, for overlap passages, starts within the first
//! `title_window` positions. Grades are then recomputed for every
//! (query, passage) pair from the texts alone, so the qrels are a pure
//! function of the rule.
//!
//! Two rules are available:
//!
//! * [`RelevanceRule::Overlap`]: grade `floor(3 * o / |q|)` where `o` counts
//!   distinct query terms present in the passage. Order-free.
//! * [`RelevanceRule::BigramOrder`]: the passage must share a term with the
//!   query; the grade then depends only on where the two global marker
//!   terms sit relative to each other (see [`bigram_grade`]). Every
//!   generated passage carries both markers exactly once, so relevant and
//!   non-relevant passages have the same bag-of-words distribution.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use super::{Collection, Qrels, QuerySet, Triple, TripleStream};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceRule {
    Overlap,
    BigramOrder,
}

impl std::str::FromStr for RelevanceRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlap" => Ok(RelevanceRule::Overlap),
            "bigram_order" | "bigram" => Ok(RelevanceRule::BigramOrder),
            _ => Err(Error::Config(format!("unknown relevance rule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub n_docs: usize,
    pub n_queries: usize,
    /// Inclusive passage length bounds, in terms.
    pub doc_len_range: (usize, usize),
    /// Inclusive query length bounds, in distinct terms.
    pub query_len_range: (usize, usize),
    pub relevance_rule: RelevanceRule,
    pub zipf_exponent: f64,
    /// Training triples per positive passage, each with its own negative.
    pub negatives_per_positive: usize,
    /// Overlap passages start their title run at an offset drawn uniformly
    /// from `0..=title_window`.
    pub title_window: usize,
    /// Fraction of body tokens drawn (Zipf) from off-topic terms that never
    /// occur in queries; the rest are function words.
    pub off_topic_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 1000,
            n_docs: 2000,
            n_queries: 200,
            doc_len_range: (12, 24),
            query_len_range: (3, 5),
            relevance_rule: RelevanceRule::Overlap,
            zipf_exponent: 1.1,
            negatives_per_positive: 3,
            title_window: 0,
            off_topic_rate: 0.0,
            seed: 7,
        }
    }
}

/// Minimum body length needed to place the bigram markers at any of the
/// generated offsets.
const MARKER_ROOM: usize = 6;

impl SyntheticSpec {
    /// Index range of terms that may appear in queries: everything except
    /// the most frequent tenth of the vocabulary and the two markers, or
    /// the first half of that when passages carry off-topic terms.
    fn topical_band(&self) -> std::ops::Range<usize> {
        let (start, end) = (self.vocab_size / 10, self.vocab_size - 2);
        if self.off_topic_rate > 0.0 {
            start..start + (end - start) / 2
        } else {
            start..end
        }
    }

    /// Terms that only ever appear in passage bodies.
    fn off_topic_band(&self) -> std::ops::Range<usize> {
        self.topical_band().end..(self.vocab_size - 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.vocab_size < 12 || self.n_docs == 0 || self.n_queries == 0 {
            return bad("vocab_size >= 12, n_docs and n_queries must be positive".into());
        }
        let (qmin, qmax) = self.query_len_range;
        let (dmin, dmax) = self.doc_len_range;
        if qmin == 0 || qmin > qmax {
            return bad(format!("invalid query_len_range {qmin}..={qmax}"));
        }
        if dmin == 0 || dmin > dmax {
            return bad(format!("invalid doc_len_range {dmin}..={dmax}"));
        }
        if qmax > self.topical_band().len() {
            return bad(format!(
                "query length {qmax} exceeds the {} topical terms available",
                self.topical_band().len()
            ));
        }
        let need = match self.relevance_rule {
            RelevanceRule::Overlap => qmax,
            RelevanceRule::BigramOrder => qmax + MARKER_ROOM,
        };
        if dmin < need {
            return bad(format!("doc_len_range must start at >= {need}"));
        }
        if self.negatives_per_positive == 0 {
            return bad("negatives_per_positive must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.off_topic_rate) {
            return bad("off_topic_rate must lie in [0, 1]".into());
        }
        if !(self.zipf_exponent > 0.0) {
            return bad("zipf_exponent must be positive".into());
        }
        Ok(())
    }
}

/// Pseudo-word for a term index: base-70 digits over consonant-vowel
/// syllables, offset so every word has at least two syllables.
pub(crate) fn term_word(index: usize) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let base = C.len() * V.len();
    let mut n = index + base;
    let mut syllables = Vec::new();
    while n > 0 {
        let s = n % base;
        syllables.push([C[s / V.len()], V[s % V.len()]]);
        n /= base;
    }
    syllables.iter().rev().flatten().map(|&b| b as char).collect()
}

/// `floor(3 * o / |q|)` with `o` the number of distinct query terms present.
pub fn overlap_grade(query_terms: &[&str], doc_terms: &[&str]) -> u32 {
    let q: HashSet<&str> = query_terms.iter().copied().collect();
    if q.is_empty() {
        return 0;
    }
    let d: HashSet<&str> = doc_terms.iter().copied().collect();
    let o = q.iter().filter(|t| d.contains(*t)).count();
    (3 * o / q.len()) as u32
}

/// Order-sensitive grade. Zero unless the passage shares a term with the
/// query and contains both markers. With `delta` = position of the second
/// marker minus position of the first: `+1` gives 3, `+2` gives 2, `-1`
/// gives 1, anything else 0.
pub fn bigram_grade(query_terms: &[&str], doc_terms: &[&str], markers: (&str, &str)) -> u32 {
    let q: HashSet<&str> = query_terms.iter().copied().collect();
    if !doc_terms.iter().any(|t| q.contains(t)) {
        return 0;
    }
    let first = doc_terms.iter().position(|t| *t == markers.0);
    let second = doc_terms.iter().position(|t| *t == markers.1);
    match (first, second) {
        (Some(a), Some(b)) => match b as isize - a as isize {
            1 => 3,
            2 => 2,
            -1 => 1,
            _ => 0,
        },
        _ => 0,
    }
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub collection: Collection,
    pub queries: QuerySet,
    pub qrels: Qrels,
    pub triples: TripleStream,
    /// Query id of each triple, parallel to `triples`.
    pub triple_qids: Vec<String>,
    /// Marker words used by the bigram rule.
    pub markers: (String, String),
}

impl SyntheticCorpus {
    /// Grade of `doc_terms` for `query_terms` under the rule that generated
    /// this corpus.
    pub fn grade(&self, rule: RelevanceRule, query_terms: &[&str], doc_terms: &[&str]) -> u32 {
        match rule {
            RelevanceRule::Overlap => overlap_grade(query_terms, doc_terms),
            RelevanceRule::BigramOrder => bigram_grade(
                query_terms,
                doc_terms,
                (self.markers.0.as_str(), self.markers.1.as_str()),
            ),
        }
    }
}

struct Background {
    function: Zipf<f64>,
    off_topic: Option<(Zipf<f64>, usize)>,
    rate: f64,
}

impl Background {
    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        match &self.off_topic {
            Some((zipf, start)) if rng.random_bool(self.rate) => start + zipf.sample(rng) as usize - 1,
            _ => self.function.sample(rng) as usize - 1,
        }
    }
}

/// Generates a collection, queries, qrels and triples. Deterministic in the
/// spec (seed included).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let words: Vec<String> = (0..spec.vocab_size).map(term_word).collect();
    let markers = (spec.vocab_size - 2, spec.vocab_size - 1);
    let band = spec.topical_band();
    let zipf = |n: usize| {
        Zipf::new(n as f64, spec.zipf_exponent).map_err(|e| Error::Config(format!("zipf: {e}")))
    };
    let off = spec.off_topic_band();
    let background = Background {
        function: zipf(band.start)?,
        off_topic: if spec.off_topic_rate > 0.0 {
            Some((zipf(off.len())?, off.start))
        } else {
            None
        },
        rate: spec.off_topic_rate,
    };

    let queries: Vec<Vec<usize>> = (0..spec.n_queries)
        .map(|_| {
            let len = rng.random_range(spec.query_len_range.0..=spec.query_len_range.1);
            index::sample(&mut rng, band.len(), len)
                .into_iter()
                .map(|i| band.start + i)
                .collect()
        })
        .collect();

    // Doc ids are assigned through a permutation so that id order carries
    // no information about the target grade.
    let mut id_order: Vec<usize> = (0..spec.n_docs).collect();
    id_order.shuffle(&mut rng);

    const GRADE_CYCLE: [u32; 4] = [3, 0, 2, 1];
    let mut docs: Vec<Vec<usize>> = Vec::with_capacity(spec.n_docs);
    let mut targets: Vec<(usize, u32)> = Vec::with_capacity(spec.n_docs);
    for j in 0..spec.n_docs {
        let qi = j % spec.n_queries;
        let grade = GRADE_CYCLE[(j / spec.n_queries) % 4];
        let terms = match spec.relevance_rule {
            RelevanceRule::Overlap => {
                overlap_doc(&mut rng, spec, &background, &queries[qi], grade)
            }
            RelevanceRule::BigramOrder => {
                bigram_doc(&mut rng, spec, &background, &queries[qi], markers, grade)
            }
        };
        docs.push(terms);
        targets.push((qi, grade));
    }

    let doc_id = |j: usize| format!("d{:06}", id_order[j]);
    let query_id = |i: usize| format!("q{:05}", i);
    let text = |terms: &[usize]| {
        terms
            .iter()
            .map(|&t| words[t].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut collection = Collection::new();
    for (j, terms) in docs.iter().enumerate() {
        collection.insert(doc_id(j), text(terms))?;
    }
    let mut query_set = QuerySet::new();
    for (i, q) in queries.iter().enumerate() {
        query_set.insert(query_id(i), text(q))?;
    }

    let marker_words = (words[markers.0].clone(), words[markers.1].clone());
    let doc_words: Vec<Vec<&str>> = docs
        .iter()
        .map(|d| d.iter().map(|&t| words[t].as_str()).collect())
        .collect();
    let mut qrels = Qrels::new();
    // Judged pool per query: its targeted passages plus every other passage
    // the rule grades above zero.
    let mut targeted: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, &(qi, _)) in targets.iter().enumerate() {
        targeted.entry(qi).or_default().push(j);
    }
    // Both rules grade 0 unless the passage shares a term with the query.
    let mut containing: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, d) in docs.iter().enumerate() {
        let distinct: HashSet<usize> = d.iter().copied().collect();
        for t in distinct {
            containing.entry(t).or_default().push(j);
        }
    }
    for (qi, q) in queries.iter().enumerate() {
        let q_words: Vec<&str> = q.iter().map(|&t| words[t].as_str()).collect();
        let mut candidates: Vec<usize> = q
            .iter()
            .filter_map(|t| containing.get(t))
            .flatten()
            .copied()
            .chain(targeted.get(&qi).into_iter().flatten().copied())
            .collect();
        candidates.sort_unstable();
        candidates.dedup();
        for j in candidates {
            let d = &doc_words[j];
            let g = match spec.relevance_rule {
                RelevanceRule::Overlap => overlap_grade(&q_words, d),
                RelevanceRule::BigramOrder => {
                    bigram_grade(&q_words, d, (&marker_words.0, &marker_words.1))
                }
            };
            if g > 0 || targets[j].0 == qi {
                qrels.insert(query_id(qi), doc_id(j), g)?;
            }
        }
    }

    // Each positive is paired with a targeted zero-grade passage, a random
    // zero-grade passage and, when one exists, a zero-grade passage sharing
    // a term with the query.
    let mut triples = Vec::new();
    let mut triple_qids = Vec::new();
    for (qi, js) in &targeted {
        let qid = query_id(*qi);
        let grade_of = |j: usize| qrels.grade(&qid, &doc_id(j)).unwrap_or(0);
        let pos: Vec<usize> = js.iter().copied().filter(|&j| grade_of(j) >= 2).collect();
        let neg: Vec<usize> = js.iter().copied().filter(|&j| grade_of(j) == 0).collect();
        if neg.is_empty() {
            continue;
        }
        let mut hard: Vec<usize> = queries[*qi]
            .iter()
            .filter_map(|t| containing.get(t))
            .flatten()
            .copied()
            .filter(|&j| grade_of(j) == 0)
            .collect();
        hard.sort_unstable();
        hard.dedup();
        for (k, &p) in pos.iter().enumerate() {
            let mut negatives = vec![neg[k % neg.len()]];
            for _ in 0..spec.negatives_per_positive.saturating_sub(1) {
                let n = if !hard.is_empty() && rng.random_bool(0.5) {
                    hard[rng.random_range(0..hard.len())]
                } else {
                    loop {
                        let j = rng.random_range(0..docs.len());
                        if grade_of(j) == 0 {
                            break j;
                        }
                    }
                };
                negatives.push(n);
            }
            for n in negatives {
                triples.push(Triple::new(
                    text(&queries[*qi]),
                    text(&docs[p]),
                    text(&docs[n]),
                )?);
                triple_qids.push(qid.clone());
            }
        }
    }

    Ok(SyntheticCorpus {
        collection,
        queries: query_set,
        qrels,
        triples,
        triple_qids,
        markers: marker_words,
    })
}

/// Number of distinct query terms a passage of `grade` should contain for a
/// query of `m` terms; uniform over the admissible counts.
fn overlap_count(rng: &mut ChaCha8Rng, m: usize, grade: u32) -> usize {
    let admissible: Vec<usize> = (0..=m).filter(|&o| (3 * o / m) as u32 == grade).collect();
    if admissible.is_empty() {
        // grade unreachable for this m (cannot happen for m >= 1, kept total)
        return 0;
    }
    admissible[rng.random_range(0..admissible.len())]
}

fn title_and_body(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    background: &Background,
    query: &[usize],
    overlap: usize,
) -> Vec<usize> {
    let len = rng.random_range(spec.doc_len_range.0..=spec.doc_len_range.1);
    let mut chosen = index::sample(rng, query.len(), overlap).into_vec();
    chosen.sort_unstable();
    let mut terms: Vec<usize> = chosen.iter().map(|&i| query[i]).collect();
    while terms.len() < len {
        terms.push(background.sample(rng));
    }
    terms
}

fn overlap_doc(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    background: &Background,
    query: &[usize],
    grade: u32,
) -> Vec<usize> {
    let o = overlap_count(rng, query.len(), grade);
    let mut terms = title_and_body(rng, spec, background, query, o);
    // move the title run to a random offset within the window
    let at = rng.random_range(0..=(terms.len() - o).min(spec.title_window));
    terms[..at + o].rotate_left(o);
    terms
}

fn bigram_doc(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    background: &Background,
    query: &[usize],
    markers: (usize, usize),
    grade: u32,
) -> Vec<usize> {
    let o = rng.random_range(1..=query.len());
    let mut terms = title_and_body(rng, spec, background, query, o);
    let delta: isize = match grade {
        3 => 1,
        2 => 2,
        1 => -1,
        _ => [-3, -2, 3, 4][rng.random_range(0..4)],
    };
    // Overwrite two body slots `delta` apart with the markers.
    let body = o..terms.len();
    let span = delta.unsigned_abs();
    let start = rng.random_range(body.start..body.end - span);
    let (a, b) = if delta > 0 {
        (start, start + span)
    } else {
        (start + span, start)
    };
    terms[a] = markers.0;
    terms[b] = markers.1;
    terms
}
