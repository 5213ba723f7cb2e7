//! Personalization metrics and retrieval experiments.
//!
//! Caption scores are micro-aggregated: counts are summed over all samples
//! before dividing. A correct concept mentioned twice counts once toward
//! recall, but every mention counts toward the precision denominator, and
//! names that are not in the store are always wrong.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{RapError, Result};
use crate::names::Delimiters;
use crate::perception::{embed_image, Embedder};
use crate::retriever::knn;
use crate::store::{ConceptStore, NewConcept, StoreSnapshot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionSample {
    pub generated_caption: String,
    pub ground_truth_concepts: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedName {
    pub name: String,
    pub known: bool,
}

/// Every wrapped token in `caption`, in order with repeats.
pub fn extract_concept_names(
    caption: &str,
    known_names: &HashSet<String>,
    delimiters: &Delimiters,
) -> Vec<ExtractedName> {
    delimiters
        .scan(caption)
        .into_iter()
        .map(|t| ExtractedName {
            name: t.to_string(),
            known: known_names.contains(t),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub true_mentions: usize,
    pub total_gt: usize,
    pub correct_names: usize,
    pub total_names: usize,
}

impl MetricCounts {
    fn add(&mut self, o: &MetricCounts) {
        self.true_mentions += o.true_mentions;
        self.total_gt += o.total_gt;
        self.correct_names += o.correct_names;
        self.total_names += o.total_names;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percentages in `[0, 100]`.
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub counts: MetricCounts,
    pub per_sample: Vec<MetricCounts>,
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Harmonic mean of two percentages; zero when both are zero.
pub fn f1(precision_pct: f64, recall_pct: f64) -> f64 {
    let s = precision_pct + recall_pct;
    if s == 0.0 {
        0.0
    } else {
        2.0 * precision_pct * recall_pct / s
    }
}

pub fn caption_metrics(
    samples: &[CaptionSample],
    known_names: &HashSet<String>,
    delimiters: &Delimiters,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(RapError::EmptyInput("no caption samples".into()));
    }
    let mut total = MetricCounts::default();
    let per_sample: Vec<MetricCounts> = samples
        .iter()
        .map(|s| {
            let mentions = extract_concept_names(&s.generated_caption, known_names, delimiters);
            let mentioned: HashSet<&str> = mentions.iter().map(|m| m.name.as_str()).collect();
            let c = MetricCounts {
                true_mentions: s
                    .ground_truth_concepts
                    .iter()
                    .filter(|g| mentioned.contains(g.as_str()))
                    .count(),
                total_gt: s.ground_truth_concepts.len(),
                correct_names: mentions
                    .iter()
                    .filter(|m| m.known && s.ground_truth_concepts.contains(&m.name))
                    .count(),
                total_names: mentions.len(),
            };
            total.add(&c);
            c
        })
        .collect();
    let recall = pct(total.true_mentions, total.total_gt);
    let precision = pct(total.correct_names, total.total_names);
    Ok(MetricsReport {
        recall,
        precision,
        f1: f1(precision, recall),
        counts: total,
        per_sample,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecognitionResult {
    pub split: Split,
    /// `None` when the reply held no yes/no token; counted as wrong.
    pub predicted: Option<bool>,
    pub expected: bool,
}

impl RecognitionResult {
    /// Positive images expect "yes", negative images "no".
    pub fn from_reply(split: Split, reply: &str) -> Self {
        Self {
            split,
            predicted: parse_yes_no(reply),
            expected: split == Split::Positive,
        }
    }
}

/// First standalone `yes`/`no` word, case-insensitive.
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    reply
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .find_map(|w| {
            if w.eq_ignore_ascii_case("yes") {
                Some(true)
            } else if w.eq_ignore_ascii_case("no") {
                Some(false)
            } else {
                None
            }
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryAccuracy {
    pub positive_acc: f64,
    pub negative_acc: f64,
    pub weighted: f64,
}

fn accuracy(hits: impl Iterator<Item = bool>, what: &str) -> Result<f64> {
    let (mut n, mut ok) = (0usize, 0usize);
    for h in hits {
        n += 1;
        ok += h as usize;
    }
    if n == 0 {
        return Err(RapError::EmptyInput(format!("no {what} results")));
    }
    Ok(ok as f64 / n as f64)
}

pub fn binary_accuracy(results: &[RecognitionResult]) -> Result<BinaryAccuracy> {
    let correct = |split: Split| {
        results
            .iter()
            .filter(move |r| r.split == split)
            .map(|r| r.predicted == Some(r.expected))
    };
    let positive_acc = accuracy(correct(Split::Positive), "positive")?;
    let negative_acc = accuracy(correct(Split::Negative), "negative")?;
    Ok(BinaryAccuracy {
        positive_acc,
        negative_acc,
        weighted: (positive_acc + negative_acc) / 2.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QaAccuracy {
    pub visual: f64,
    pub text: f64,
    pub weighted: f64,
}

pub fn qa_accuracy(visual_results: &[bool], text_results: &[bool]) -> Result<QaAccuracy> {
    let visual = accuracy(visual_results.iter().copied(), "visual QA")?;
    let text = accuracy(text_results.iter().copied(), "text-only QA")?;
    Ok(QaAccuracy {
        visual,
        text,
        weighted: (visual + text) / 2.0,
    })
}

/// A query embedding and the name of the concept it should retrieve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledQuery {
    pub embedding: EmbeddingVector,
    pub truth: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub recall: f64,
    pub precision: f64,
}

/// Top-K recall and precision of exact retrieval for each database size in
/// `ns` and each `k` in `ks`. `store_builder(n)` returns the store of size `n`.
pub fn retriever_sweep<F>(
    store_builder: F,
    queries: &[LabeledQuery],
    ns: &[usize],
    ks: &[usize],
) -> Result<Vec<SweepRow>>
where
    F: Fn(usize) -> Result<Arc<StoreSnapshot>>,
{
    if queries.is_empty() {
        return Err(RapError::EmptyInput("no labeled queries".into()));
    }
    let mut rows = Vec::with_capacity(ns.len() * ks.len());
    for &n in ns {
        let snap = store_builder(n)?;
        if let Some(q) = queries.iter().find(|q| snap.get_by_name(&q.truth).is_none()) {
            return Err(RapError::UnknownTruth(q.truth.clone()));
        }
        for &k in ks {
            let correct: Vec<bool> = queries
                .par_iter()
                .map(|q| {
                    let hits = knn(&snap, &q.embedding, k)?;
                    Ok(hits
                        .iter()
                        .any(|h| snap.get(&h.concept_id).is_some_and(|r| r.name == q.truth)))
                })
                .collect::<Result<_>>()?;
            let found = correct.iter().filter(|&&c| c).count();
            rows.push(SweepRow {
                n,
                k,
                recall: found as f64 / queries.len() as f64,
                // Each query has exactly one relevant concept.
                precision: found as f64 / (k * queries.len()) as f64,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `metric,value` rows.
pub fn write_metrics_csv<W: Write>(metrics: &[(&str, f64)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "value"]).map_err(csv_err)?;
    for (name, value) in metrics {
        w.write_record([name.to_string(), value.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> RapError {
    RapError::Io(std::io::Error::other(e))
}

impl MetricsReport {
    pub fn csv_rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("recall", self.recall),
            ("precision", self.precision),
            ("f1", self.f1),
            ("true_mentions", self.counts.true_mentions as f64),
            ("total_gt", self.counts.total_gt as f64),
            ("correct_names", self.counts.correct_names as f64),
            ("total_names", self.counts.total_names as f64),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationTiming {
    pub per_concept_ms: Vec<f64>,
    pub cumulative_ms: Vec<f64>,
    pub total_ms: f64,
}

/// Wall-clock cost of adding `n` concepts, each including its embedding call.
/// `image_for(i)` supplies the i-th concept image; names are `⟨perf-<len+i>⟩`.
pub fn time_personalization<F>(
    store: &mut ConceptStore,
    embedder: &dyn Embedder,
    n: usize,
    image_for: F,
) -> Result<PersonalizationTiming>
where
    F: Fn(usize) -> Vec<u8>,
{
    let offset = store.len();
    let mut per_concept_ms = Vec::with_capacity(n);
    let mut cumulative_ms = Vec::with_capacity(n);
    let mut total = 0.0;
    for i in 0..n {
        let image = image_for(i);
        let name = store.delimiters().wrap(&format!("perf-{}", offset + i));
        let t = Instant::now();
        let embedding = embed_image(embedder, &image, store.dim())?;
        store.add_concept(NewConcept {
            name,
            category: "object".into(),
            description: String::new(),
            image_ref: format!("perf/{i}.png"),
            embedding,
        })?;
        let ms = t.elapsed().as_secs_f64() * 1000.0;
        per_concept_ms.push(ms);
        total += ms;
        cumulative_ms.push(total);
    }
    Ok(PersonalizationTiming {
        per_concept_ms,
        cumulative_ms,
        total_ms: total,
    })
}
