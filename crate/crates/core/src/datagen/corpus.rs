//! Batch synthesis over a JSON-lines corpus.
//!
//! Every record index draws from its own ChaCha stream (`seed`, stream = index),
//! so output is independent of thread scheduling and byte-identical across
//! runs with the same seed, corpus and config.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentOp};
use super::records::{
    inject_negatives, make_grounding_record, make_instruction_record, make_recognition_record, AnnotatedSample,
    AnnotationRequest, AnnotationTask, Annotator, ConceptRef, Polarity, Task, TrainingRecord,
};
use crate::error::{RapError, Result};
use crate::perception::{crop, decode_image, encode_png};

/// Relative task weights. Defaults follow the published dataset mix
/// (100K grounding, 40K recognition, 37K caption and description, 16K QA).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMix {
    pub grounding: f64,
    pub recognition: f64,
    pub caption_description: f64,
    pub qa: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self {
            grounding: 100.0,
            recognition: 40.0,
            caption_description: 37.0,
            qa: 16.0,
        }
    }
}

impl TaskMix {
    fn weights(&self) -> [f64; 4] {
        [self.grounding, self.recognition, self.caption_description, self.qa]
    }

    /// Largest-remainder split of `total` into `[grounding, recognition,
    /// caption_description, qa]`.
    pub fn quotas(&self, total: usize) -> Result<[usize; 4]> {
        let w = self.weights();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(RapError::InvalidInput(
                "task mix weights must be non-negative with a positive sum".into(),
            ));
        }
        let sum: f64 = w.iter().sum();
        let exact: Vec<f64> = w.iter().map(|x| total as f64 * x / sum).collect();
        let mut q: [usize; 4] = [0; 4];
        for i in 0..4 {
            q[i] = exact[i].floor() as usize;
        }
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor())
                .total_cmp(&(exact[a] - exact[a].floor()))
                .then(a.cmp(&b))
        });
        let mut left = total - q.iter().sum::<usize>();
        for i in order {
            if left == 0 {
                break;
            }
            q[i] += 1;
            left -= 1;
        }
        Ok(q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    pub total_records: usize,
    pub seed: u64,
    pub mix: TaskMix,
    /// Fraction of records that receive noise concepts.
    pub negative_rate: f64,
    pub negatives_per_record: usize,
    pub augment_ops: Vec<AugmentOp>,
    pub variants_per_crop: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            total_records: 1000,
            seed: 0,
            mix: TaskMix::default(),
            negative_rate: 0.3,
            negatives_per_record: 1,
            augment_ops: AugmentOp::ALL.to_vec(),
            variants_per_crop: 2,
        }
    }
}

/// Counts per task type, laid out like the dataset statistics table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    #[serde(rename = "Visual Grounding")]
    pub grounding: usize,
    #[serde(rename = "Recognition")]
    pub recognition: usize,
    #[serde(rename = "Caption & Description")]
    pub caption_description: usize,
    #[serde(rename = "Question Answering")]
    pub qa: usize,
    #[serde(rename = "Total")]
    pub total: usize,
}

impl DatasetStats {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a TrainingRecord>) -> Self {
        let mut s = Self::default();
        for r in records {
            match r.task {
                Task::Grounding => s.grounding += 1,
                Task::Recognition => s.recognition += 1,
                Task::Caption | Task::Description => s.caption_description += 1,
                Task::Qa => s.qa += 1,
            }
            s.total += 1;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedRecord {
    pub record: TrainingRecord,
    /// The record before noise injection, when noise was injected.
    pub source: Option<TrainingRecord>,
}

#[derive(Debug, Clone)]
pub struct DatagenReport {
    pub records: Vec<GeneratedRecord>,
    pub stats: DatasetStats,
}

pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<AnnotatedSample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: AnnotatedSample =
            serde_json::from_str(&line).map_err(|e| RapError::InvalidInput(format!("corpus line {}: {e}", i + 1)))?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

/// Per-sample concept references after cropping and augmentation.
struct PreparedSample {
    /// One entry per box: the crop plus its augmented variants.
    crop_refs: Vec<Vec<String>>,
    descriptions: Vec<String>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn prepare_sample(
    idx: usize,
    sample: &AnnotatedSample,
    corpus_root: &Path,
    out_dir: &Path,
    annotator: &dyn Annotator,
    config: &DatagenConfig,
) -> Result<PreparedSample> {
    let image_path = corpus_root.join(&sample.image_ref);
    let image =
        fs::read(&image_path).map_err(|e| RapError::InvalidInput(format!("reading {}: {e}", image_path.display())))?;
    let mut crop_refs = Vec::with_capacity(sample.boxes.len());
    let mut descriptions = Vec::with_capacity(sample.boxes.len());
    for (j, b) in sample.boxes.iter().enumerate() {
        let cropped = crop(&image, &b.bbox)?;
        let decoded = decode_image(&cropped)?;
        let base = format!("crops/s{idx:05}_b{j}");
        let mut refs = vec![format!("{base}.png")];
        fs::write(out_dir.join(&refs[0]), encode_png(&decoded)?)?;
        if !config.augment_ops.is_empty() && config.variants_per_crop > 0 {
            let seed = config.seed ^ ((idx as u64) << 16 | j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            for (k, v) in augment(&decoded, &config.augment_ops, seed, config.variants_per_crop)?
                .into_iter()
                .enumerate()
            {
                let r = format!("{base}_v{k}.png");
                fs::write(out_dir.join(&r), encode_png(&v.image)?)?;
                refs.push(r);
            }
        }
        crop_refs.push(refs);
        let description = match &b.description {
            Some(d) => d.clone(),
            None => annotator.annotate(&AnnotationRequest {
                task: AnnotationTask::Concept,
                image_ref: sample.image_ref.clone(),
                concepts: vec![b.concept_name.clone()],
                instruction: String::new(),
            })?,
        };
        descriptions.push(description);
    }
    Ok(PreparedSample {
        crop_refs,
        descriptions,
    })
}

/// Synthesizes `config.total_records` records from `samples` (images resolved
/// against `corpus_root`) and writes crops, `records.jsonl` and `stats.json`
/// under `out_dir`.
pub fn generate_dataset(
    samples: &[AnnotatedSample],
    corpus_root: &Path,
    out_dir: &Path,
    annotator: &dyn Annotator,
    config: &DatagenConfig,
) -> Result<DatagenReport> {
    let usable: Vec<usize> = (0..samples.len()).filter(|&i| !samples[i].boxes.is_empty()).collect();
    if usable.is_empty() {
        return Err(RapError::EmptyInput("corpus has no annotated boxes".into()));
    }
    if !(0.0..=1.0).contains(&config.negative_rate) {
        return Err(RapError::InvalidInput("negative_rate must be in [0, 1]".into()));
    }
    fs::create_dir_all(out_dir.join("crops"))?;

    let prepared: Vec<Option<PreparedSample>> = (0..samples.len())
        .into_par_iter()
        .map(|i| {
            if samples[i].boxes.is_empty() {
                Ok(None)
            } else {
                prepare_sample(i, &samples[i], corpus_root, out_dir, annotator, config).map(Some)
            }
        })
        .collect::<Result<_>>()?;

    // First occurrence of each concept name, in corpus order.
    let mut pool: BTreeMap<String, ConceptRef> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let Some(p) = &prepared[i] else { continue };
        for (j, b) in s.boxes.iter().enumerate() {
            pool.entry(b.concept_name.clone()).or_insert_with(|| ConceptRef {
                name: b.concept_name.clone(),
                image_ref: p.crop_refs[j][0].clone(),
                description: p.descriptions[j].clone(),
            });
        }
    }
    let pool: Vec<ConceptRef> = pool.into_values().collect();

    let [g, r, cd, qa] = config.mix.quotas(config.total_records)?;
    let mut schedule = Vec::with_capacity(config.total_records);
    schedule.extend(std::iter::repeat_n(Task::Grounding, g));
    schedule.extend(std::iter::repeat_n(Task::Recognition, r));
    schedule.extend((0..cd).map(|i| if i % 2 == 0 { Task::Caption } else { Task::Description }));
    schedule.extend(std::iter::repeat_n(Task::Qa, qa));
    schedule.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));

    let records: Vec<GeneratedRecord> = schedule
        .par_iter()
        .enumerate()
        .map(|(i, &task)| {
            let mut rng = stream_rng(config.seed, i as u64 + 1);
            let si = usable[rng.random_range(0..usable.len())];
            let sample = &samples[si];
            let prep = prepared[si].as_ref().expect("usable samples are prepared");
            let concepts: Vec<ConceptRef> = sample
                .boxes
                .iter()
                .enumerate()
                .map(|(j, b)| ConceptRef {
                    name: b.concept_name.clone(),
                    image_ref: prep.crop_refs[j][rng.random_range(0..prep.crop_refs[j].len())].clone(),
                    description: prep.descriptions[j].clone(),
                })
                .collect();
            let absent: Vec<&ConceptRef> = pool.iter().filter(|c| !sample.has_concept(&c.name)).collect();

            let record = match task {
                Task::Grounding => {
                    let j = rng.random_range(0..concepts.len());
                    make_grounding_record(sample, j, &concepts[j].description, &concepts[j].image_ref, &mut rng)?
                }
                Task::Recognition => {
                    if !absent.is_empty() && rng.random_bool(0.5) {
                        let c = absent[rng.random_range(0..absent.len())];
                        make_recognition_record(sample, c, Polarity::Negative, &mut rng)?
                    } else {
                        let c = &concepts[rng.random_range(0..concepts.len())];
                        make_recognition_record(sample, c, Polarity::Positive, &mut rng)?
                    }
                }
                Task::Caption | Task::Description | Task::Qa => {
                    make_instruction_record(sample, task, &concepts, annotator, &mut rng)?
                }
            };

            let noise_count = config.negatives_per_record.min(absent.len());
            let noise: Vec<ConceptRef> = absent
                .iter()
                .filter(|c| !record.target.contains(&c.name) && !record.concept_names().any(|n| n == c.name))
                .map(|c| (*c).clone())
                .collect();
            let noise_count = noise_count.min(noise.len());
            if noise_count > 0 && rng.random_bool(config.negative_rate) {
                let noisy = inject_negatives(&record, &noise, noise_count, &mut rng)?;
                Ok(GeneratedRecord {
                    record: noisy,
                    source: Some(record),
                })
            } else {
                Ok(GeneratedRecord { record, source: None })
            }
        })
        .collect::<Result<_>>()?;

    for r in &records {
        r.record.validate()?;
    }
    let stats = DatasetStats::from_records(records.iter().map(|r| &r.record));

    let mut out = std::io::BufWriter::new(fs::File::create(out_dir.join("records.jsonl"))?);
    for r in &records {
        serde_json::to_writer(&mut out, &r.record).expect("records serialize");
        out.write_all(b"\n")?;
    }
    out.flush()?;
    fs::write(
        out_dir.join("stats.json"),
        serde_json::to_vec_pretty(&stats).expect("stats serialize"),
    )?;
    Ok(DatagenReport { records, stats })
}

pub fn records_path(out_dir: &Path) -> PathBuf {
    out_dir.join("records.jsonl")
}
