use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::templates::{self, TemplateBank};
use crate::error::{RapError, Result, Stage};
use crate::http::JsonClient;
use crate::perception::{crop, BoundingBox};
use crate::store::ConceptRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedBox {
    pub bbox: BoundingBox,
    pub concept_name: String,
    pub category: String,
    /// Personalized description, if the corpus already has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

/// One corpus line: an image with box-level concept annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSample {
    pub image_ref: String,
    pub boxes: Vec<AnnotatedBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

impl AnnotatedSample {
    pub fn validate(&self) -> Result<()> {
        for b in &self.boxes {
            b.bbox.validate()?;
            if b.concept_name.is_empty() {
                return Err(RapError::InvalidInput(format!(
                    "empty concept name in {}",
                    self.image_ref
                )));
            }
        }
        Ok(())
    }

    pub fn has_concept(&self, name: &str) -> bool {
        self.boxes.iter().any(|b| b.concept_name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Grounding,
    Recognition,
    Caption,
    Description,
    Qa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Concept reference as injected into a training input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptRef {
    pub name: String,
    pub image_ref: String,
    pub description: String,
}

impl From<&ConceptRecord> for ConceptRef {
    fn from(r: &ConceptRecord) -> Self {
        Self {
            name: r.name.clone(),
            image_ref: r.image_ref.clone(),
            description: r.description.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainingInput {
    Concept(ConceptRef),
    Image { image_ref: String },
    Text { text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub task: Task,
    pub inputs: Vec<TrainingInput>,
    pub target: String,
    #[serde(default)]
    pub negatives_injected: Vec<String>,
}

impl TrainingRecord {
    pub fn concept_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.iter().filter_map(|i| match i {
            TrainingInput::Concept(c) => Some(c.name.as_str()),
            _ => None,
        })
    }

    pub fn instruction(&self) -> Option<&str> {
        self.inputs.iter().rev().find_map(|i| match i {
            TrainingInput::Text { text } => Some(text.as_str()),
            _ => None,
        })
    }

    /// Grounding targets are two-decimal boxes and no injected negative may be
    /// named in the target.
    pub fn validate(&self) -> Result<()> {
        if self.task == Task::Grounding && !is_bbox_target(&self.target) {
            return Err(RapError::InvalidInput(format!(
                "bad grounding target {:?}",
                self.target
            )));
        }
        if let Some(n) = self
            .negatives_injected
            .iter()
            .find(|n| self.target.contains(n.as_str()))
        {
            return Err(RapError::NoiseOverlapsTarget(n.clone()));
        }
        Ok(())
    }
}

/// `[d.dd, d.dd, d.dd, d.dd]`
pub fn is_bbox_target(s: &str) -> bool {
    let Some(inner) = s.strip_prefix('[').and_then(|s| s.strip_suffix(']')) else {
        return false;
    };
    let parts: Vec<&str> = inner.split(", ").collect();
    parts.len() == 4
        && parts.iter().all(|p| {
            let Some((int, frac)) = p.split_once('.') else {
                return false;
            };
            !int.is_empty()
                && int.bytes().all(|b| b.is_ascii_digit())
                && frac.len() == 2
                && frac.bytes().all(|b| b.is_ascii_digit())
        })
}

pub fn make_crops(sample: &AnnotatedSample, image: &[u8]) -> Result<Vec<(String, Vec<u8>)>> {
    sample
        .boxes
        .iter()
        .map(|b| Ok((b.concept_name.clone(), crop(image, &b.bbox)?)))
        .collect()
}

fn concept_input(name: &str, image_ref: &str, description: &str) -> TrainingInput {
    TrainingInput::Concept(ConceptRef {
        name: name.to_string(),
        image_ref: image_ref.to_string(),
        description: description.to_string(),
    })
}

/// Grounding: the concept and the full image in, its box out.
pub fn make_grounding_record<R: Rng + ?Sized>(
    sample: &AnnotatedSample,
    box_index: usize,
    description: &str,
    crop_ref: &str,
    rng: &mut R,
) -> Result<TrainingRecord> {
    let b = sample.boxes.get(box_index).ok_or(RapError::IndexOutOfRange {
        index: box_index,
        len: sample.boxes.len(),
    })?;
    let bank = TemplateBank::builtin();
    let instruction = templates::fill(
        templates::pick(&bank.grounding, rng),
        templates::CONCEPT_SLOT,
        &b.concept_name,
    );
    Ok(TrainingRecord {
        task: Task::Grounding,
        inputs: vec![
            concept_input(&b.concept_name, crop_ref, description),
            TrainingInput::Image {
                image_ref: sample.image_ref.clone(),
            },
            TrainingInput::Text { text: instruction },
        ],
        target: b.bbox.format_2dp(),
        negatives_injected: Vec::new(),
    })
}

pub fn make_recognition_record<R: Rng + ?Sized>(
    sample: &AnnotatedSample,
    concept: &ConceptRef,
    polarity: Polarity,
    rng: &mut R,
) -> Result<TrainingRecord> {
    let present = sample.has_concept(&concept.name);
    match polarity {
        Polarity::Negative if present => return Err(RapError::PolarityContradiction(concept.name.clone())),
        Polarity::Positive if !present => {
            return Err(RapError::InvalidInput(format!(
                "positive recognition for {} which is not in {}",
                concept.name, sample.image_ref
            )))
        }
        _ => {}
    }
    let bank = TemplateBank::builtin();
    let question = templates::fill(
        templates::pick(&bank.recognition, rng),
        templates::CONCEPT_SLOT,
        &concept.name,
    );
    let answers = match polarity {
        Polarity::Positive => &templates::POSITIVE_ANSWERS,
        Polarity::Negative => &templates::NEGATIVE_ANSWERS,
    };
    let target = answers[rng.random_range(0..answers.len())].replace("{}", &concept.name);
    Ok(TrainingRecord {
        task: Task::Recognition,
        inputs: vec![
            TrainingInput::Concept(concept.clone()),
            TrainingInput::Image {
                image_ref: sample.image_ref.clone(),
            },
            TrainingInput::Text { text: question },
        ],
        target,
        negatives_injected: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationTask {
    Caption,
    Description,
    Qa,
    /// Personalized description of a single concept crop.
    Concept,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub task: AnnotationTask,
    pub image_ref: String,
    pub concepts: Vec<String>,
    pub instruction: String,
}

/// Stand-in for the multimodal LLM that writes captions, descriptions and answers.
pub trait Annotator: Send + Sync {
    fn annotate(&self, req: &AnnotationRequest) -> Result<String>;
}

/// Answers from a JSON file:
///
/// ```json
/// {"caption": {"img.jpg": "..."}, "description": {"img.jpg": "..."},
///  "qa": {"img.jpg": {"What color is ⟨mug*⟩?": "..."}}, "concept": {"⟨mug*⟩": "..."}}
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FileAnnotator {
    #[serde(default)]
    pub caption: HashMap<String, String>,
    #[serde(default)]
    pub description: HashMap<String, String>,
    #[serde(default)]
    pub qa: HashMap<String, HashMap<String, String>>,
    #[serde(default)]
    pub concept: HashMap<String, String>,
}

impl FileAnnotator {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| RapError::InvalidInput(format!("annotation file {}: {e}", path.display())))
    }
}

impl Annotator for FileAnnotator {
    fn annotate(&self, req: &AnnotationRequest) -> Result<String> {
        let found = match req.task {
            AnnotationTask::Caption => self.caption.get(&req.image_ref),
            AnnotationTask::Description => self.description.get(&req.image_ref),
            AnnotationTask::Qa => self.qa.get(&req.image_ref).and_then(|m| m.get(&req.instruction)),
            AnnotationTask::Concept => req.concepts.first().and_then(|c| self.concept.get(c)),
        };
        found.cloned().ok_or_else(|| {
            RapError::AnnotatorUnavailable(format!(
                "no {:?} annotation for {} {:?}",
                req.task, req.image_ref, req.instruction
            ))
        })
    }
}

/// Remote LLM annotator. Unconfigured instances always fail; a configured one
/// POSTs the request as JSON and reads back `{"text": ...}`.
#[derive(Debug, Clone, Default)]
pub struct RemoteAnnotator {
    client: Option<JsonClient>,
}

impl RemoteAnnotator {
    pub fn unconfigured() -> Self {
        Self { client: None }
    }

    pub fn new(url: &str, timeout: Duration) -> Self {
        Self {
            client: Some(JsonClient::new(url, Stage::Annotate, timeout)),
        }
    }
}

impl Annotator for RemoteAnnotator {
    fn annotate(&self, req: &AnnotationRequest) -> Result<String> {
        let client = self
            .client
            .as_ref()
            .ok_or_else(|| RapError::AnnotatorUnavailable("remote annotator is not configured".into()))?;
        #[derive(Deserialize)]
        struct Reply {
            text: String,
        }
        let reply: Reply = client
            .post(req)
            .map_err(|e| RapError::AnnotatorUnavailable(e.to_string()))?;
        Ok(reply.text)
    }
}

/// Caption, description or QA record; `concepts` are the sample's concepts
/// with their crop references, in box order.
pub fn make_instruction_record<R: Rng + ?Sized>(
    sample: &AnnotatedSample,
    task: Task,
    concepts: &[ConceptRef],
    annotator: &dyn Annotator,
    rng: &mut R,
) -> Result<TrainingRecord> {
    let bank = TemplateBank::builtin();
    let (annotation_task, instruction) = match task {
        Task::Caption => (AnnotationTask::Caption, templates::pick(&bank.caption, rng).to_string()),
        Task::Description => (
            AnnotationTask::Description,
            templates::pick(&bank.description, rng).to_string(),
        ),
        Task::Qa => (AnnotationTask::Qa, qa_question(sample, concepts, bank, rng)?),
        Task::Grounding | Task::Recognition => {
            return Err(RapError::InvalidInput(format!("{task:?} is not an instruction task")))
        }
    };
    let target = annotator.annotate(&AnnotationRequest {
        task: annotation_task,
        image_ref: sample.image_ref.clone(),
        concepts: concepts.iter().map(|c| c.name.clone()).collect(),
        instruction: instruction.clone(),
    })?;
    let mut inputs: Vec<TrainingInput> = concepts.iter().cloned().map(TrainingInput::Concept).collect();
    inputs.push(TrainingInput::Image {
        image_ref: sample.image_ref.clone(),
    });
    inputs.push(TrainingInput::Text { text: instruction });
    Ok(TrainingRecord {
        task,
        inputs,
        target,
        negatives_injected: Vec::new(),
    })
}

/// Seed question for the sample: multi-concept when two or more concepts are
/// present (half the time), otherwise person or object by category.
pub fn qa_question<R: Rng + ?Sized>(
    sample: &AnnotatedSample,
    concepts: &[ConceptRef],
    bank: &TemplateBank,
    rng: &mut R,
) -> Result<String> {
    if concepts.is_empty() {
        return Err(RapError::InvalidInput(format!(
            "no concepts for QA in {}",
            sample.image_ref
        )));
    }
    if concepts.len() >= 2 && rng.random_bool(0.5) {
        let t = templates::pick(&bank.qa_multi, rng);
        return Ok(t
            .replace(templates::FIRST_SLOT, &concepts[0].name)
            .replace(templates::SECOND_SLOT, &concepts[1].name));
    }
    let i = rng.random_range(0..concepts.len());
    let c = &concepts[i];
    let is_person = sample
        .boxes
        .iter()
        .find(|b| b.concept_name == c.name)
        .is_some_and(|b| b.category.eq_ignore_ascii_case("person"));
    Ok(if is_person {
        templates::fill(templates::pick(&bank.qa_person, rng), templates::PERSON_SLOT, &c.name)
    } else {
        templates::fill(templates::pick(&bank.qa_object, rng), templates::OBJECT_SLOT, &c.name)
    })
}

/// Adds `count` noise concepts at seeded positions in the concept block. The
/// target is left untouched.
pub fn inject_negatives<R: Rng + ?Sized>(
    record: &TrainingRecord,
    noise_concepts: &[ConceptRef],
    count: usize,
    rng: &mut R,
) -> Result<TrainingRecord> {
    if count == 0 {
        return Ok(record.clone());
    }
    for n in noise_concepts {
        if record.target.contains(&n.name) || record.concept_names().any(|c| c == n.name) {
            return Err(RapError::NoiseOverlapsTarget(n.name.clone()));
        }
    }
    if count > noise_concepts.len() {
        return Err(RapError::InvalidInput(format!(
            "asked for {count} noise concepts, only {} given",
            noise_concepts.len()
        )));
    }
    let mut out = record.clone();
    let mut chosen = index::sample(rng, noise_concepts.len(), count).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let n = &noise_concepts[i];
        let concept_slots = out
            .inputs
            .iter()
            .filter(|x| matches!(x, TrainingInput::Concept(_)))
            .count();
        let at = rng.random_range(0..=concept_slots);
        out.inputs.insert(at, TrainingInput::Concept(n.clone()));
        out.negatives_injected.push(n.name.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> AnnotatedSample {
        AnnotatedSample {
            image_ref: "img/0.png".into(),
            boxes: vec![
                AnnotatedBox {
                    bbox: BoundingBox::new(0.57, 0.67, 0.68, 0.84).unwrap(),
                    concept_name: "⟨head*⟩".into(),
                    category: "person".into(),
                    description: None,
                },
                AnnotatedBox {
                    bbox: BoundingBox::FULL,
                    concept_name: "⟨mug*⟩".into(),
                    category: "cup".into(),
                    description: Some("A blue mug.".into()),
                },
            ],
            caption: None,
        }
    }

    fn cref(name: &str) -> ConceptRef {
        ConceptRef {
            name: name.into(),
            image_ref: format!("crops/{name}.png"),
            description: String::new(),
        }
    }

    #[test]
    fn grounding_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = make_grounding_record(&sample(), 0, "desc", "c.png", &mut rng).unwrap();
        assert_eq!(r.target, "[0.57, 0.67, 0.68, 0.84]");
        assert!(r.instruction().unwrap().contains("⟨head*⟩"));
        let r = make_grounding_record(&sample(), 1, "desc", "c.png", &mut rng).unwrap();
        assert_eq!(r.target, "[0.00, 0.00, 1.00, 1.00]");
        assert!(matches!(
            make_grounding_record(&sample(), 2, "", "", &mut rng),
            Err(RapError::IndexOutOfRange { index: 2, len: 2 })
        ));

        let a = make_grounding_record(&sample(), 0, "d", "c", &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_grounding_record(&sample(), 0, "d", "c", &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bbox_target_format() {
        assert!(is_bbox_target("[0.36, 0.16, 0.59, 0.41]"));
        assert!(is_bbox_target("[1.00, 0.00, 1.00, 1.00]"));
        assert!(!is_bbox_target("[0.36, 0.16, 0.59]"));
        assert!(!is_bbox_target("[0.360, 0.16, 0.59, 0.41]"));
        assert!(!is_bbox_target("(0.36, 0.16, 0.59, 0.41)"));
    }

    #[test]
    fn recognition_polarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pos = make_recognition_record(&sample(), &cref("⟨head*⟩"), Polarity::Positive, &mut rng).unwrap();
        assert!(pos.target.starts_with("Yes"));
        let neg = make_recognition_record(&sample(), &cref("⟨cat*⟩"), Polarity::Negative, &mut rng).unwrap();
        assert!(neg.target.starts_with("No"));
        assert!(matches!(
            make_recognition_record(&sample(), &cref("⟨head*⟩"), Polarity::Negative, &mut rng),
            Err(RapError::PolarityContradiction(_))
        ));

        // The canonical recognition question turns up among the seeded draws.
        let seen = (0..200).any(|s| {
            let r = make_recognition_record(
                &sample(),
                &cref("⟨head*⟩"),
                Polarity::Positive,
                &mut ChaCha8Rng::seed_from_u64(s),
            )
            .unwrap();
            r.instruction() == Some("Is ⟨head*⟩ in this image?")
        });
        assert!(seen);
    }

    #[test]
    fn instruction_records_use_annotator() {
        let mut ann = FileAnnotator::default();
        ann.caption.insert("img/0.png".into(), "⟨A⟩ sits on a chair".into());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = make_instruction_record(&sample(), Task::Caption, &[cref("⟨A⟩")], &ann, &mut rng).unwrap();
        assert_eq!(r.target, "⟨A⟩ sits on a chair");
        assert!(TemplateBank::builtin()
            .caption
            .iter()
            .any(|t| Some(t.as_str()) == r.instruction()));

        assert!(matches!(
            make_instruction_record(&sample(), Task::Description, &[cref("⟨A⟩")], &ann, &mut rng),
            Err(RapError::AnnotatorUnavailable(_))
        ));
        assert!(matches!(
            make_instruction_record(
                &sample(),
                Task::Caption,
                &[],
                &RemoteAnnotator::unconfigured(),
                &mut rng
            ),
            Err(RapError::AnnotatorUnavailable(_))
        ));
    }

    #[test]
    fn description_template_is_drawn() {
        let mut ann = FileAnnotator::default();
        ann.description.insert("img/0.png".into(), "x".into());
        let seen = (0..200).any(|s| {
            let r = make_instruction_record(
                &sample(),
                Task::Description,
                &[],
                &ann,
                &mut ChaCha8Rng::seed_from_u64(s),
            )
            .unwrap();
            r.instruction() == Some("Describe the image in detail.")
        });
        assert!(seen);
    }

    #[test]
    fn qa_seed_substitution() {
        let s = AnnotatedSample {
            boxes: vec![sample().boxes[1].clone()],
            ..sample()
        };
        let seen = (0..300).any(|seed| {
            let q = qa_question(
                &s,
                &[cref("⟨mug*⟩")],
                TemplateBank::builtin(),
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            q == "What color is ⟨mug*⟩?"
        });
        assert!(seen);
        // Person category draws from the person bank.
        let p = AnnotatedSample {
            boxes: vec![sample().boxes[0].clone()],
            ..sample()
        };
        let q = qa_question(
            &p,
            &[cref("⟨head*⟩")],
            TemplateBank::builtin(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(TemplateBank::builtin().qa_person.iter().any(|t| templates::fill(
            t,
            templates::PERSON_SLOT,
            "⟨head*⟩"
        ) == q));
    }

    #[test]
    fn negatives_keep_target() {
        let mut ann = FileAnnotator::default();
        ann.caption.insert("img/0.png".into(), "⟨A⟩ sits on a chair".into());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = make_instruction_record(&sample(), Task::Caption, &[cref("⟨A⟩")], &ann, &mut rng).unwrap();

        let noisy = inject_negatives(&base, &[cref("⟨B⟩")], 1, &mut rng).unwrap();
        assert_eq!(noisy.target, base.target);
        assert_eq!(noisy.negatives_injected, ["⟨B⟩"]);
        let names: Vec<&str> = noisy.concept_names().collect();
        assert!(names.contains(&"⟨A⟩") && names.contains(&"⟨B⟩"));
        assert_eq!(noisy.inputs.len(), base.inputs.len() + 1);
        assert!(matches!(noisy.inputs.last(), Some(TrainingInput::Text { .. })));
        noisy.validate().unwrap();

        assert_eq!(inject_negatives(&base, &[cref("⟨B⟩")], 0, &mut rng).unwrap(), base);
        assert!(matches!(
            inject_negatives(&base, &[cref("⟨A⟩")], 1, &mut rng),
            Err(RapError::NoiseOverlapsTarget(_))
        ));
    }

    #[test]
    fn make_crops_per_box() {
        use crate::perception::{decode_image, encode_png};
        use image::{DynamicImage, GenericImageView, RgbaImage};
        let img = DynamicImage::ImageRgba8(RgbaImage::new(100, 100));
        let bytes = encode_png(&img).unwrap();
        let mut s = sample();
        s.boxes[0].bbox = BoundingBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        let crops = make_crops(&s, &bytes).unwrap();
        assert_eq!(crops.len(), 2);
        assert_eq!(crops[0].0, "⟨head*⟩");
        assert_eq!(decode_image(&crops[0].1).unwrap().dimensions(), (50, 50));
        assert_eq!(crops[1].1, bytes);
    }
}
