//! Personalization training-data synthesis from a box-annotated corpus:
//! crops, geometric augmentation, templated instructions and noise-concept
//! injection.

pub mod augment;
pub mod corpus;
pub mod records;
pub mod templates;

pub use augment::{apply_ops, augment, AugmentOp, AugmentedVariant};
pub use corpus::{generate_dataset, read_corpus, DatagenConfig, DatagenReport, DatasetStats, GeneratedRecord, TaskMix};
pub use records::{
    inject_negatives, is_bbox_target, make_crops, make_grounding_record, make_instruction_record,
    make_recognition_record, AnnotatedBox, AnnotatedSample, AnnotationRequest, AnnotationTask, Annotator, ConceptRef,
    FileAnnotator, Polarity, RemoteAnnotator, Task, TrainingInput, TrainingRecord,
};
pub use templates::TemplateBank;
