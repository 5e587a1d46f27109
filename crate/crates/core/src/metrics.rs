//! Word/character error rates with utterance filtering, and centroid-based
//! embedding similarity.
//!
//! Transcripts, embeddings and external scores come from files produced by
//! other tools; nothing here runs a speech model.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::checkpoint::{read_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::tensor::{cosine_f64, Tensor, MIN_NORM};

/// Hypotheses faster than this many words per second are discarded.
pub const MAX_WORDS_PER_SECOND: f64 = 6.0;
/// References with fewer words than this are discarded.
pub const MIN_REFERENCE_WORDS: usize = 2;
/// Utterances this long or longer are discarded.
pub const MAX_DURATION_SECONDS: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LangMode {
    /// Lowercase, drop Unicode punctuation, collapse whitespace.
    #[default]
    BasicEn,
    /// Leave text untouched; for transcripts normalized elsewhere.
    None,
}

impl std::str::FromStr for LangMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic_en" => Ok(LangMode::BasicEn),
            "none" => Ok(LangMode::None),
            other => Err(Error::Config(format!(
                "unknown lang mode `{other}` (expected basic_en or none)"
            ))),
        }
    }
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

pub fn normalize_text(s: &str, mode: LangMode) -> String {
    match mode {
        LangMode::None => s.to_string(),
        LangMode::BasicEn => s
            .to_lowercase()
            .chars()
            .filter(|&c| !is_punctuation(c))
            .collect::<String>()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" "),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditCounts {
    pub hits: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn edits(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn reference_len(&self) -> usize {
        self.hits + self.substitutions + self.deletions
    }

    fn add(&mut self, other: &EditCounts) {
        self.hits += other.hits;
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
    }
}

/// Minimum-edit-distance alignment with unit costs.
///
/// When several alignments have the same cost the backtrace prefers, at each
/// cell, a diagonal step (match or substitution), then an insertion, then a
/// deletion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for (j, c) in cost.iter_mut().take(w).enumerate() {
        *c = j;
    }
    for i in 1..=n {
        cost[i * w] = i;
        for j in 1..=m {
            let sub = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let ins = cost[i * w + j - 1] + 1;
            let del = cost[(i - 1) * w + j] + 1;
            cost[i * w + j] = sub.min(ins).min(del);
        }
    }

    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if cost[(i - 1) * w + j - 1] + usize::from(!same) == here {
                if same {
                    counts.hits += 1;
                } else {
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && cost[i * w + j - 1] + 1 == here {
            counts.insertions += 1;
            j -= 1;
        } else {
            counts.deletions += 1;
            i -= 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerResult {
    pub wer: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

pub fn wer<S: AsRef<str>>(ref_tokens: &[S], hyp_tokens: &[S]) -> Result<WerResult> {
    if ref_tokens.is_empty() {
        return Err(Error::EmptyReference);
    }
    let r: Vec<&str> = ref_tokens.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hyp_tokens.iter().map(AsRef::as_ref).collect();
    let c = align(&r, &h);
    Ok(WerResult {
        wer: c.edits() as f64 / r.len() as f64,
        substitutions: c.substitutions,
        insertions: c.insertions,
        deletions: c.deletions,
    })
}

/// Character error rate; spaces count as characters. No normalization is
/// applied here.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let c = char_counts(reference, hypothesis)?;
    Ok(c.edits() as f64 / c.reference_len() as f64)
}

pub fn char_counts(reference: &str, hypothesis: &str) -> Result<EditCounts> {
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(Error::EmptyReference);
    }
    let h: Vec<char> = hypothesis.chars().collect();
    Ok(align(&r, &h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(rename = "ref")]
    pub ref_text: String,
    #[serde(rename = "hyp")]
    pub hyp_text: String,
    pub duration_seconds: f64,
}

impl EvalRecord {
    pub fn new(ref_text: impl Into<String>, hyp_text: impl Into<String>, duration_seconds: f64) -> Result<Self> {
        let r = EvalRecord {
            id: None,
            ref_text: ref_text.into(),
            hyp_text: hyp_text.into(),
            duration_seconds,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_seconds.is_finite() && self.duration_seconds > 0.0) {
            return Err(Error::Config(format!(
                "duration_seconds must be positive, got {}",
                self.duration_seconds
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterRule {
    /// Hypothesis exceeds [`MAX_WORDS_PER_SECOND`].
    WordRate,
    /// Reference has fewer than [`MIN_REFERENCE_WORDS`] words.
    MinWords,
    /// Duration is at least [`MAX_DURATION_SECONDS`].
    MaxDuration,
}

impl FilterRule {
    pub fn name(self) -> &'static str {
        match self {
            FilterRule::WordRate => "word_rate",
            FilterRule::MinWords => "min_words",
            FilterRule::MaxDuration => "max_duration",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    /// Position in the input list.
    pub index: usize,
    pub record: EvalRecord,
    pub rule: FilterRule,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<EvalRecord>,
    pub rejected: Vec<Rejection>,
}

/// The first rule a record breaks, checked in the order word rate, minimum
/// reference words, maximum duration. Words are whitespace-separated tokens
/// of the raw text.
pub fn rejection_rule(r: &EvalRecord) -> Option<FilterRule> {
    let hyp_words = r.hyp_text.split_whitespace().count();
    if hyp_words as f64 / r.duration_seconds > MAX_WORDS_PER_SECOND {
        Some(FilterRule::WordRate)
    } else if r.ref_text.split_whitespace().count() < MIN_REFERENCE_WORDS {
        Some(FilterRule::MinWords)
    } else if r.duration_seconds >= MAX_DURATION_SECONDS {
        Some(FilterRule::MaxDuration)
    } else {
        None
    }
}

pub fn filter_records(records: &[EvalRecord]) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for (index, r) in records.iter().enumerate() {
        match rejection_rule(r) {
            None => out.kept.push(r.clone()),
            Some(rule) => out.rejected.push(Rejection {
                index,
                record: r.clone(),
                rule,
            }),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRates {
    pub wer: f64,
    pub cer: f64,
    pub words: EditCounts,
    pub chars: EditCounts,
    pub kept: usize,
    pub rejected: Vec<Rejection>,
}

/// Pooled error rates over the records that survive filtering: total edits
/// divided by total reference length, not a mean of per-utterance rates.
pub fn corpus_error_rates(records: &[EvalRecord], mode: LangMode) -> Result<CorpusRates> {
    let FilterOutcome { kept, rejected } = filter_records(records);
    if kept.is_empty() {
        return Err(Error::AllFiltered);
    }
    let (mut words, mut chars) = (EditCounts::default(), EditCounts::default());
    for r in &kept {
        let rn = normalize_text(&r.ref_text, mode);
        let hn = normalize_text(&r.hyp_text, mode);
        let rt: Vec<&str> = rn.split_whitespace().collect();
        let ht: Vec<&str> = hn.split_whitespace().collect();
        words.add(&align(&rt, &ht));
        let rc: Vec<char> = rn.chars().collect();
        let hc: Vec<char> = hn.chars().collect();
        chars.add(&align(&rc, &hc));
    }
    if words.reference_len() == 0 || chars.reference_len() == 0 {
        return Err(Error::EmptyReference);
    }
    Ok(CorpusRates {
        wer: words.edits() as f64 / words.reference_len() as f64,
        cer: chars.edits() as f64 / chars.reference_len() as f64,
        words,
        chars,
        kept: kept.len(),
        rejected,
    })
}

/// Reads records from JSON Lines (`.jsonl`, `.json`) or CSV (anything else)
/// with fields `ref`, `hyp`, `duration_seconds` and optional `id`.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    let path = path.as_ref();
    let jsonl = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("json") | Some("ndjson")
    );
    let records: Vec<EvalRecord> = if jsonl {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?
    } else {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        csv::Reader::from_reader(file)
            .deserialize()
            .collect::<std::result::Result<_, _>>()?
    };
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

/// Embeddings of real speech for one accent (or speaker).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    embeddings: Vec<Vec<f64>>,
    pub label: String,
}

impl EmbeddingSet {
    pub fn new(embeddings: Vec<Tensor>, label: impl Into<String>) -> Result<Self> {
        let first = embeddings
            .first()
            .ok_or_else(|| Error::Config("embedding set is empty".into()))?
            .numel();
        let mut rows = Vec::with_capacity(embeddings.len());
        for e in &embeddings {
            if e.numel() != first {
                return Err(Error::DimMismatch {
                    expected: first,
                    found: e.numel(),
                });
            }
            let v = e.to_f64();
            if v.iter().map(|x| x * x).sum::<f64>().sqrt() < MIN_NORM {
                return Err(Error::ZeroNorm);
            }
            rows.push(v);
        }
        Ok(EmbeddingSet {
            embeddings: rows,
            label: label.into(),
        })
    }

    /// Every 1-D tensor of the checkpoint is one utterance; the label comes
    /// from the `label` metadata key.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let tensors: Vec<Tensor> = ckpt
            .tensors()
            .filter(|(_, t)| t.rank() == 1)
            .map(|(_, t)| t.clone())
            .collect();
        let label = ckpt.metadata().get("label").cloned().unwrap_or_default();
        EmbeddingSet::new(tensors, label)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        EmbeddingSet::from_checkpoint(&read_checkpoint(path)?)
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    /// Arithmetic mean of the embeddings, in 64-bit.
    pub fn centroid(&self) -> Vec<f64> {
        let n = self.embeddings.len() as f64;
        let mut c = vec![0.0; self.dim()];
        for e in &self.embeddings {
            for (ci, x) in c.iter_mut().zip(e) {
                *ci += x;
            }
        }
        c.iter_mut().for_each(|x| *x /= n);
        c
    }
}

/// Cosine similarity between `sample` and the centroid of `reference_set`.
pub fn accent_similarity(sample: &Tensor, reference_set: &EmbeddingSet) -> Result<f64> {
    if sample.numel() != reference_set.dim() {
        return Err(Error::DimMismatch {
            expected: reference_set.dim(),
            found: sample.numel(),
        });
    }
    cosine_f64(&sample.to_f64(), &reference_set.centroid())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub utterance_id: String,
    pub metric_name: String,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Per-utterance scores produced by external evaluators (MOS predictors,
/// classifiers, language ID), ingested for aggregation only.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let rows: Vec<ScoreRow> = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(file)
            .deserialize()
            .collect::<std::result::Result<_, _>>()?;
        if let Some(r) = rows.iter().find(|r| !r.value.is_finite()) {
            return Err(Error::Config(format!(
                "non-finite score for {}/{}",
                r.utterance_id, r.metric_name
            )));
        }
        Ok(ScoreTable { rows })
    }

    /// Per-metric summary over rows whose utterance id passes `keep`.
    pub fn summarize_where(&self, keep: impl Fn(&str) -> bool) -> BTreeMap<String, ScoreSummary> {
        let mut out: BTreeMap<String, (usize, f64, f64, f64)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| keep(&r.utterance_id)) {
            let e = out
                .entry(r.metric_name.clone())
                .or_insert((0, 0.0, f64::INFINITY, f64::NEG_INFINITY));
            e.0 += 1;
            e.1 += r.value;
            e.2 = e.2.min(r.value);
            e.3 = e.3.max(r.value);
        }
        out.into_iter()
            .map(|(k, (count, sum, min, max))| {
                (
                    k,
                    ScoreSummary {
                        count,
                        mean: sum / count as f64,
                        min,
                        max,
                    },
                )
            })
            .collect()
    }

    pub fn summarize(&self) -> BTreeMap<String, ScoreSummary> {
        self.summarize_where(|_| true)
    }
}
