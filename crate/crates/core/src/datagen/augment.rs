use image::DynamicImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RapError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    FlipH,
    FlipV,
    Rot90,
    Rot180,
    Rot270,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 5] = [
        AugmentOp::FlipH,
        AugmentOp::FlipV,
        AugmentOp::Rot90,
        AugmentOp::Rot180,
        AugmentOp::Rot270,
    ];

    pub fn apply(self, img: &DynamicImage) -> DynamicImage {
        match self {
            AugmentOp::FlipH => img.fliph(),
            AugmentOp::FlipV => img.flipv(),
            AugmentOp::Rot90 => img.rotate90(),
            AugmentOp::Rot180 => img.rotate180(),
            AugmentOp::Rot270 => img.rotate270(),
        }
    }
}

pub fn apply_ops(img: &DynamicImage, ops: &[AugmentOp]) -> DynamicImage {
    ops.iter().fold(img.clone(), |acc, op| op.apply(&acc))
}

#[derive(Debug, Clone)]
pub struct AugmentedVariant {
    pub ops: Vec<AugmentOp>,
    pub image: DynamicImage,
}

/// `variants` seeded draws; each variant applies one or two ops from `ops`.
pub fn augment(crop: &DynamicImage, ops: &[AugmentOp], seed: u64, variants: usize) -> Result<Vec<AugmentedVariant>> {
    if ops.is_empty() {
        return Err(RapError::InvalidInput("augment needs at least one op".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..variants)
        .map(|_| {
            let len = rng.random_range(1..=2);
            let seq: Vec<AugmentOp> = (0..len).map(|_| ops[rng.random_range(0..ops.len())]).collect();
            AugmentedVariant {
                image: apply_ops(crop, &seq),
                ops: seq,
            }
        })
        .collect())
}
