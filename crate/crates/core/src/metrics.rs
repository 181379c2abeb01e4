//! Caption corpus metrics.
//!
//! One tokenizer rule feeds everything: lowercase, split on runs of
//! non-alphanumeric characters, drop empties. Trigrams never cross caption
//! boundaries. BLEU is sentence-level with clipped precision and brevity
//! penalty, strict zeros unless smoothing is requested. CIDEr follows the
//! TF-IDF n-gram cosine (n = 1..4, averaged, ×10) with document frequencies
//! counted per image; the idf uses `ln((M+1)/max(1, df))` so weights stay
//! positive on small corpora.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// corpus types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caption {
    pub raw: String,
    pub tokens: Vec<String>,
}

impl Caption {
    pub fn new(raw: &str) -> Self {
        Caption {
            raw: raw.to_string(),
            tokens: tokenize(raw),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EnvTags {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub waterway: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weather: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lighting: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_of_day: Option<String>,
}

impl EnvTags {
    fn values(&self) -> Vec<(&'static str, &str)> {
        let mut out = Vec::new();
        if let Some(v) = &self.waterway {
            out.push(("waterway", v.as_str()));
        }
        if let Some(v) = &self.weather {
            out.push(("weather", v.as_str()));
        }
        if let Some(v) = &self.lighting {
            out.push(("lighting", v.as_str()));
        }
        if let Some(v) = &self.time_of_day {
            out.push(("time_of_day", v.as_str()));
        }
        out
    }
}

/// One JSON-lines record: `{image_id, caption, tags{...}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSample {
    pub image_id: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<EnvTags>,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub captions: Vec<Caption>,
    /// Parallel to `captions`; `None` for untagged samples.
    pub tags: Vec<Option<EnvTags>>,
}

impl Corpus {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let captions: Vec<Caption> = texts.into_iter().map(Caption::new).collect();
        let tags = vec![None; captions.len()];
        Corpus { captions, tags }
    }

    pub fn from_samples(samples: &[CorpusSample]) -> Self {
        Corpus {
            captions: samples.iter().map(|s| Caption::new(&s.caption)).collect(),
            tags: samples.iter().map(|s| s.tags.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }
}

pub fn load_corpus_jsonl(path: &Path) -> Result<Vec<CorpusSample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: CorpusSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            detail: format!("line {}: {e}", lineno + 1),
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// tokenizer and corpus complexity
// ---------------------------------------------------------------------------

/// Lowercase, split on any non-alphanumeric run, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .collect()
}

fn ngrams(tokens: &[String], n: usize) -> impl Iterator<Item = &[String]> {
    tokens.windows(n)
}

/// Unique-to-total trigram ratio, trigrams counted within captions.
pub fn tgc(corpus: &Corpus) -> Result<f64> {
    let mut seen: HashMap<&[String], ()> = HashMap::new();
    let mut total = 0usize;
    for caption in &corpus.captions {
        for gram in ngrams(&caption.tokens, 3) {
            seen.entry(gram).or_insert(());
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric {
            detail: "corpus has no trigrams (every caption shorter than 3 tokens)".to_string(),
        });
    }
    Ok(seen.len() as f64 / total as f64)
}

/// Fraction of tokens strictly longer than seven characters.
pub fn cwr(corpus: &Corpus) -> Result<f64> {
    let mut complex = 0usize;
    let mut total = 0usize;
    for caption in &corpus.captions {
        for token in &caption.tokens {
            total += 1;
            if token.chars().count() > 7 {
                complex += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric {
            detail: "corpus has no tokens".to_string(),
        });
    }
    Ok(complex as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuScore {
    pub score: f64,
    /// Set when the candidate was empty and the score was forced to 0.
    pub empty_candidate: bool,
}

fn count_ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in ngrams(tokens, n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU-n: clipped modified precision for orders 1..=n, geometric
/// mean, brevity penalty against the closest reference length (ties to the
/// shorter). Zero n-gram overlap at any order gives 0 unless `smoothing`
/// replaces empty counts with add-one estimates.
pub fn bleu_n_with(
    candidate: &[String],
    references: &[Vec<String>],
    n: usize,
    smoothing: bool,
) -> Result<BleuScore> {
    if n == 0 {
        return Err(Error::config("BLEU order must be at least 1"));
    }
    if references.is_empty() || references.iter().any(|r| r.is_empty()) {
        return Err(Error::UndefinedMetric {
            detail: "BLEU needs at least one non-empty reference".to_string(),
        });
    }
    if candidate.is_empty() {
        return Ok(BleuScore {
            score: 0.0,
            empty_candidate: true,
        });
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let cand_counts = count_ngrams(candidate, k);
        let total: usize = cand_counts.values().sum();
        let mut clipped = 0usize;
        for (gram, &count) in &cand_counts {
            let max_ref = references
                .iter()
                .map(|r| count_ngrams(r, k).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += count.min(max_ref);
        }
        let p = if total == 0 || clipped == 0 {
            if smoothing {
                1.0 / (total + 1) as f64
            } else {
                return Ok(BleuScore {
                    score: 0.0,
                    empty_candidate: false,
                });
            }
        } else {
            clipped as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(BleuScore {
        score: bp * (log_sum / n as f64).exp(),
        empty_candidate: false,
    })
}

pub fn bleu_n(candidate: &[String], references: &[Vec<String>], n: usize) -> Result<BleuScore> {
    bleu_n_with(candidate, references, n, false)
}

// ---------------------------------------------------------------------------
// ROUGE
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeVariant {
    Rouge1,
    Rouge2,
    RougeL,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn f1_from(matched: f64, cand_total: f64, ref_total: f64) -> RougeScore {
    let precision = if cand_total > 0.0 { matched / cand_total } else { 0.0 };
    let recall = if ref_total > 0.0 { matched / ref_total } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    RougeScore { precision, recall, f1 }
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            curr[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

pub fn rouge(candidate: &[String], reference: &[String], variant: RougeVariant) -> Result<RougeScore> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::UndefinedMetric {
            detail: "ROUGE needs non-empty candidate and reference".to_string(),
        });
    }
    match variant {
        RougeVariant::Rouge1 | RougeVariant::Rouge2 => {
            let n = if variant == RougeVariant::Rouge1 { 1 } else { 2 };
            let cand = count_ngrams(candidate, n);
            let refc = count_ngrams(reference, n);
            let matched: usize = cand
                .iter()
                .map(|(gram, &c)| c.min(refc.get(gram).copied().unwrap_or(0)))
                .sum();
            let cand_total: usize = cand.values().sum();
            let ref_total: usize = refc.values().sum();
            Ok(f1_from(matched as f64, cand_total as f64, ref_total as f64))
        }
        RougeVariant::RougeL => {
            let lcs = lcs_len(candidate, reference) as f64;
            Ok(f1_from(lcs, candidate.len() as f64, reference.len() as f64))
        }
    }
}

// ---------------------------------------------------------------------------
// CIDEr
// ---------------------------------------------------------------------------

const CIDER_MAX_N: usize = 4;

/// Per-image document frequencies over n-grams (n = 1..4).
pub struct DocFreq {
    df: Vec<HashMap<Vec<String>, usize>>,
    images: usize,
}

impl DocFreq {
    /// `references[i]` is the reference set of image i; an n-gram's document
    /// frequency is the number of images whose set contains it, so
    /// duplicating references leaves the statistics unchanged.
    pub fn from_references(references: &[Vec<Vec<String>>]) -> Self {
        let mut df = vec![HashMap::new(); CIDER_MAX_N];
        for image_refs in references {
            for (n, table) in df.iter_mut().enumerate() {
                let mut present: HashMap<Vec<String>, ()> = HashMap::new();
                for reference in image_refs {
                    for gram in ngrams(reference, n + 1) {
                        present.entry(gram.to_vec()).or_insert(());
                    }
                }
                for (gram, _) in present {
                    *table.entry(gram).or_insert(0) += 1;
                }
            }
        }
        DocFreq {
            df,
            images: references.len(),
        }
    }

    fn idf(&self, n: usize, gram: &[String]) -> f64 {
        let df = self.df[n - 1].get(gram).copied().unwrap_or(0).max(1);
        ((self.images as f64 + 1.0) / df as f64).ln()
    }
}

/// TF-IDF vector of one sentence at order n: relative n-gram frequency
/// weighted by idf.
fn tfidf(tokens: &[String], n: usize, df: &DocFreq) -> HashMap<Vec<String>, f64> {
    let counts = count_ngrams(tokens, n);
    let total: usize = counts.values().sum();
    let mut out = HashMap::new();
    if total == 0 {
        return out;
    }
    for (gram, count) in counts {
        let g = gram.to_vec();
        let w = count as f64 / total as f64 * df.idf(n, &g);
        out.insert(g, w);
    }
    out
}

fn cosine(a: &HashMap<Vec<String>, f64>, b: &HashMap<Vec<String>, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(g, &va)| b.get(g).map(|&vb| va * vb))
        .sum();
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// CIDEr over a set of images: per image, the mean over n = 1..4 of the
/// cosine between the candidate's TF-IDF vector and the mean of the
/// reference TF-IDF vectors, ×10; then averaged over images.
pub fn cider(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    df: &DocFreq,
) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::dim(
            "cider",
            format!(
                "{} candidates vs {} reference sets",
                candidates.len(),
                references.len()
            ),
        ));
    }
    if candidates.is_empty() {
        return Err(Error::UndefinedMetric {
            detail: "cider needs at least one image".to_string(),
        });
    }
    let mut corpus_score = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::UndefinedMetric {
                detail: "an image has an empty reference set".to_string(),
            });
        }
        let mut image_score = 0.0;
        for n in 1..=CIDER_MAX_N {
            let cand_vec = tfidf(cand, n, df);
            // Mean of the reference vectors.
            let mut mean: HashMap<Vec<String>, f64> = HashMap::new();
            for reference in refs {
                for (gram, w) in tfidf(reference, n, df) {
                    *mean.entry(gram).or_insert(0.0) += w;
                }
            }
            for w in mean.values_mut() {
                *w /= refs.len() as f64;
            }
            image_score += cosine(&cand_vec, &mean);
        }
        corpus_score += image_score / CIDER_MAX_N as f64 * 10.0;
    }
    Ok(corpus_score / candidates.len() as f64)
}

// ---------------------------------------------------------------------------
// corpus statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    /// Token-count histogram with bin width 5, keyed by bin start.
    pub length_histogram: BTreeMap<usize, usize>,
    /// Symmetric co-occurrence counts over pairs of tag values from
    /// different variable groups; diagonal stays zero.
    pub env_cooccurrence: BTreeMap<String, BTreeMap<String, usize>>,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut histogram = BTreeMap::new();
    for caption in &corpus.captions {
        let bin = caption.tokens.len() / 5 * 5;
        *histogram.entry(bin).or_insert(0) += 1;
    }
    let mut matrix: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for tags in corpus.tags.iter().flatten() {
        let values = tags.values();
        for (i, (group_a, a)) in values.iter().enumerate() {
            for (group_b, b) in values.iter().skip(i + 1) {
                if group_a == group_b || a == b {
                    continue;
                }
                *matrix
                    .entry(a.to_string())
                    .or_default()
                    .entry(b.to_string())
                    .or_insert(0) += 1;
                *matrix
                    .entry(b.to_string())
                    .or_default()
                    .entry(a.to_string())
                    .or_insert(0) += 1;
            }
        }
    }
    CorpusStats {
        length_histogram: histogram,
        env_cooccurrence: matrix,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(toks("The boat, a barge."), vec!["the", "boat", "a", "barge"]);
        assert_eq!(toks(""), Vec::<String>::new());
        assert_eq!(toks("USV-mounted"), vec!["usv", "mounted"]);
    }

    #[test]
    fn tgc_hand_enumeration() {
        // "a b c a b c": trigrams abc, bca, cab, abc → 3 unique of 4.
        let corpus = Corpus::from_texts(["a b c a b c"]);
        assert!((tgc(&corpus).unwrap() - 0.75).abs() < 1e-15);

        // All-distinct trigrams hit the upper bound.
        let corpus = Corpus::from_texts(["a b c d e"]);
        assert_eq!(tgc(&corpus).unwrap(), 1.0);

        // No trigram at all is undefined.
        let corpus = Corpus::from_texts(["a b"]);
        assert!(matches!(tgc(&corpus), Err(Error::UndefinedMetric { .. })));
    }

    #[test]
    fn tgc_does_not_cross_captions() {
        // Two captions of two tokens each produce no trigrams even though
        // the concatenation would.
        let corpus = Corpus::from_texts(["a b", "c d"]);
        assert!(tgc(&corpus).is_err());
    }

    #[test]
    fn cwr_counts_strictly_longer_than_seven() {
        let corpus = Corpus::from_texts(["waterway boat"]);
        assert_eq!(cwr(&corpus).unwrap(), 0.5);

        let corpus = Corpus::from_texts(["short words only here"]);
        assert_eq!(cwr(&corpus).unwrap(), 0.0);

        // Exactly seven characters does not count.
        let corpus = Corpus::from_texts(["sevensy"]);
        assert_eq!(cwr(&corpus).unwrap(), 0.0);

        let corpus = Corpus::from_texts([""]);
        assert!(matches!(cwr(&corpus), Err(Error::UndefinedMetric { .. })));
    }

    #[test]
    fn metrics_invariant_under_caption_reordering() {
        let a = Corpus::from_texts(["a b c d", "waterway boats drifting slowly"]);
        let b = Corpus::from_texts(["waterway boats drifting slowly", "a b c d"]);
        assert_eq!(tgc(&a).unwrap(), tgc(&b).unwrap());
        assert_eq!(cwr(&a).unwrap(), cwr(&b).unwrap());
    }

    #[test]
    fn bleu_identity_zero_and_clipping() {
        let cand = toks("the cat is on the mat");
        assert!((bleu_n(&cand, &[cand.clone()], 3).unwrap().score - 1.0).abs() < 1e-12);

        let other = toks("dogs bark loudly tonight always");
        assert_eq!(bleu_n(&cand, &[other], 2).unwrap().score, 0.0);

        // Clipped unigram precision 2/7 for the classic degenerate candidate.
        let cand = toks("the the the the the the the");
        let reference = toks("the cat is on the mat");
        let score = bleu_n(&cand, &[reference], 1).unwrap().score;
        // BP = 1 (candidate longer than reference), so BLEU-1 = 2/7.
        assert!((score - 2.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_empty_candidate_flags() {
        let reference = toks("a boat");
        let out = bleu_n(&[], &[reference], 2).unwrap();
        assert_eq!(out.score, 0.0);
        assert!(out.empty_candidate);
    }

    #[test]
    fn bleu_brevity_penalty() {
        // Perfect 1-gram precision but half the reference length:
        // BP = exp(1 - 4/2) = e^-1.
        let cand = toks("a b");
        let reference = toks("a b c d");
        let score = bleu_n(&cand, &[reference], 1).unwrap().score;
        assert!((score - (-1.0_f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_identity_lcs_and_disjoint() {
        let x = toks("a boat on the water");
        for variant in [RougeVariant::Rouge1, RougeVariant::Rouge2, RougeVariant::RougeL] {
            let s = rouge(&x, &x, variant).unwrap();
            assert!((s.f1 - 1.0).abs() < 1e-12);
        }

        // cand [a,b,c,d] vs ref [a,c,b,d]: LCS 3 → F1 = 0.75.
        let cand = toks("a b c d");
        let reference = toks("a c b d");
        let s = rouge(&cand, &reference, RougeVariant::RougeL).unwrap();
        assert!((s.f1 - 0.75).abs() < 1e-12);

        let s = rouge(&toks("x y z"), &toks("p q r"), RougeVariant::Rouge1).unwrap();
        assert_eq!(s.f1, 0.0);

        assert!(rouge(&[], &x, RougeVariant::Rouge1).is_err());
    }

    #[test]
    fn cider_identity_disjoint_and_ref_order() {
        let cand = toks("a red buoy floats near the dock");
        let refs = vec![vec![cand.clone()]];
        let df = DocFreq::from_references(&refs);
        let score = cider(&[cand.clone()], &refs, &df).unwrap();
        assert!((score - 10.0).abs() < 1e-12, "got {score}");

        // Disjoint vocabulary scores zero.
        let other = toks("entirely different words appear here now often");
        let score = cider(&[other], &refs, &df).unwrap();
        assert_eq!(score, 0.0);

        // Reference order does not matter.
        let r1 = toks("a boat sails along the canal");
        let r2 = toks("the canal carries a boat");
        let refs_a = vec![vec![r1.clone(), r2.clone()]];
        let refs_b = vec![vec![r2, r1]];
        let df_a = DocFreq::from_references(&refs_a);
        let df_b = DocFreq::from_references(&refs_b);
        let sa = cider(&[cand.clone()], &refs_a, &df_a).unwrap();
        let sb = cider(&[cand.clone()], &refs_b, &df_b).unwrap();
        assert!((sa - sb).abs() < 1e-12);

        // Duplicating every reference leaves the score unchanged.
        let refs_dup = vec![vec![
            refs_a[0][0].clone(),
            refs_a[0][1].clone(),
            refs_a[0][0].clone(),
            refs_a[0][1].clone(),
        ]];
        let df_dup = DocFreq::from_references(&refs_dup);
        let sd = cider(&[cand], &refs_dup, &df_dup).unwrap();
        assert!((sa - sd).abs() < 1e-12);
    }

    #[test]
    fn stats_histogram_and_cooccurrence() {
        let long_a = vec!["w"; 88].join(" ");
        let long_b = vec!["w"; 92].join(" ");
        let corpus = Corpus::from_texts([long_a.as_str(), long_b.as_str()]);
        let stats = corpus_stats(&corpus);
        assert_eq!(stats.length_histogram.get(&85), Some(&1));
        assert_eq!(stats.length_histogram.get(&90), Some(&1));

        let mut corpus = Corpus::from_texts(["a boat", "a barge"]);
        corpus.tags = vec![
            Some(EnvTags {
                waterway: Some("canal".into()),
                weather: Some("sunny".into()),
                lighting: None,
                time_of_day: Some("daytime".into()),
            }),
            None,
        ];
        let stats = corpus_stats(&corpus);
        let m = &stats.env_cooccurrence;
        assert_eq!(m["canal"]["sunny"], 1);
        assert_eq!(m["sunny"]["canal"], 1);
        assert_eq!(m["canal"]["daytime"], 1);
        assert!(m.get("canal").unwrap().get("canal").is_none());

        // Untagged corpus still yields the histogram.
        let corpus = Corpus::from_texts(["a boat"]);
        let stats = corpus_stats(&corpus);
        assert!(stats.env_cooccurrence.is_empty());
        assert_eq!(stats.length_histogram.len(), 1);
    }
}
