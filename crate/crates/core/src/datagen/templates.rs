use std::sync::OnceLock;

use rand::Rng;
use serde::Deserialize;

/// Instruction banks for each synthesized task, with `⟨V⟩`, `⟨H⟩`, `⟨O⟩`,
/// `⟨C1⟩` and `⟨C2⟩` placeholders.
#[derive(Debug, Clone, Deserialize)]
pub struct TemplateBank {
    pub recognition: Vec<String>,
    pub grounding: Vec<String>,
    pub caption: Vec<String>,
    pub description: Vec<String>,
    pub qa_person: Vec<String>,
    pub qa_object: Vec<String>,
    pub qa_multi: Vec<String>,
}

pub const CONCEPT_SLOT: &str = "⟨V⟩";
pub const PERSON_SLOT: &str = "⟨H⟩";
pub const OBJECT_SLOT: &str = "⟨O⟩";
pub const FIRST_SLOT: &str = "⟨C1⟩";
pub const SECOND_SLOT: &str = "⟨C2⟩";

static BANK: OnceLock<TemplateBank> = OnceLock::new();

impl TemplateBank {
    pub fn builtin() -> &'static TemplateBank {
        BANK.get_or_init(|| {
            serde_json::from_str(include_str!("../../data/templates.json")).expect("bundled templates parse")
        })
    }
}

pub fn pick<'a, R: Rng + ?Sized>(bank: &'a [String], rng: &mut R) -> &'a str {
    &bank[rng.random_range(0..bank.len())]
}

pub fn fill(template: &str, slot: &str, name: &str) -> String {
    template.replace(slot, name)
}

pub const POSITIVE_ANSWERS: [&str; 3] = ["Yes.", "Yes, {} is in the image.", "Yes, I can see {} in this picture."];
pub const NEGATIVE_ANSWERS: [&str; 3] = [
    "No.",
    "No, {} is not in the image.",
    "No, I don't see {} in this picture.",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bank_sizes() {
        let b = TemplateBank::builtin();
        assert_eq!(b.recognition.len(), 15);
        assert_eq!(b.grounding.len(), 10);
        assert_eq!(b.caption.len(), 11);
        assert_eq!(b.description.len(), 8);
        assert_eq!(b.qa_person.len(), 11);
        assert_eq!(b.qa_object.len(), 11);
        assert_eq!(b.qa_multi.len(), 5);
        assert!(b.recognition.iter().all(|t| t.contains(CONCEPT_SLOT)));
        assert!(b.grounding.iter().all(|t| t.contains(CONCEPT_SLOT)));
        assert!(b.qa_object.iter().all(|t| t.contains(OBJECT_SLOT)));
        assert!(b.description.iter().any(|t| t == "Describe the image in detail."));
    }

    #[test]
    fn fill_slot() {
        assert_eq!(
            fill("What color is ⟨O⟩?", OBJECT_SLOT, "⟨mug*⟩"),
            "What color is ⟨mug*⟩?"
        );
        assert_eq!(
            fill("Give ⟨V⟩'s bounding box in the image.", CONCEPT_SLOT, "⟨dog⟩"),
            "Give ⟨dog⟩'s bounding box in the image."
        );
    }
}
