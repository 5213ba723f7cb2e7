#![allow(dead_code)]

use std::cmp::Ordering;
use std::io::Cursor;

use image::{DynamicImage, ImageFormat, Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rap_core::{ConceptStore, EmbeddingVector, NewConcept, StoreSnapshot};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec<R: Rng>(rng: &mut R, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

pub fn emb(v: Vec<f32>) -> EmbeddingVector {
    EmbeddingVector::new(v).unwrap()
}

pub fn concept(name: &str, v: Vec<f32>) -> NewConcept {
    NewConcept {
        name: format!("⟨{name}⟩"),
        category: "object".into(),
        description: String::new(),
        image_ref: format!("{name}.png"),
        embedding: emb(v),
    }
}

/// Store of `n` random concepts named `⟨c0⟩..`.
pub fn random_store<R: Rng>(rng: &mut R, n: usize, dim: usize) -> ConceptStore {
    let mut store = ConceptStore::new(dim).unwrap();
    for i in 0..n {
        store
            .add_concept(concept(&format!("c{i}"), random_vec(rng, dim)))
            .unwrap();
    }
    store
}

/// Brute force: every row's distance by a plain loop, full sort by (distance, id).
pub fn oracle_knn(snapshot: &StoreSnapshot, query: &[f32], k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = snapshot
        .records()
        .iter()
        .map(|r| {
            let mut acc = 0.0f64;
            for (i, &x) in r.embedding.as_slice().iter().enumerate() {
                let d = x as f64 - query[i] as f64;
                acc += d * d;
            }
            (r.id.clone(), acc.sqrt())
        })
        .collect();
    all.sort_by(|a, b| match a.1.partial_cmp(&b.1).unwrap() {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    all.truncate(k);
    all
}

pub fn solid_png(w: u32, h: u32, rgb: [u8; 3]) -> Vec<u8> {
    png(&RgbaImage::from_pixel(w, h, Rgba([rgb[0], rgb[1], rgb[2], 255])))
}

/// Left half one colour, right half another.
pub fn split_png(w: u32, h: u32, left: [u8; 3], right: [u8; 3]) -> Vec<u8> {
    png(&RgbaImage::from_fn(w, h, |x, _| {
        let c = if x < w / 2 { left } else { right };
        Rgba([c[0], c[1], c[2], 255])
    }))
}

pub fn png(img: &RgbaImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    DynamicImage::ImageRgba8(img.clone())
        .write_to(&mut out, ImageFormat::Png)
        .unwrap();
    out.into_inner()
}

/// Distinct colour for index `i`.
pub fn colour(i: usize) -> [u8; 3] {
    [(i * 37 % 251) as u8, (i * 91 % 241) as u8, (i * 13 % 239 + 7) as u8]
}

pub mod corpus {
    use std::path::Path;

    use rap_core::datagen::{AnnotatedBox, AnnotatedSample, AnnotationRequest, AnnotationTask, Annotator};
    use rap_core::{BoundingBox, Result};

    use super::{colour, png};
    use image::{Rgba, RgbaImage};

    /// Replies derived only from the request, so runs are reproducible.
    pub struct EchoAnnotator;

    impl Annotator for EchoAnnotator {
        fn annotate(&self, req: &AnnotationRequest) -> Result<String> {
            Ok(match req.task {
                AnnotationTask::Concept => format!("{} is a small thing with a round shape.", req.concepts.join(" ")),
                task => format!("{task:?} of {} showing {}.", req.image_ref, req.concepts.join(" and ")),
            })
        }
    }

    const BOXES: [[f64; 4]; 3] = [[0.0, 0.0, 0.5, 0.5], [0.5, 0.0, 1.0, 0.5], [0.1, 0.55, 0.8, 0.95]];

    /// `images` 32x32 scenes, each with 1-3 boxes drawn from a pool of 12 names.
    pub fn write(dir: &Path, images: usize) -> Vec<AnnotatedSample> {
        std::fs::create_dir_all(dir.join("img")).unwrap();
        (0..images)
            .map(|i| {
                let img = RgbaImage::from_fn(32, 32, |x, y| {
                    let c = colour(i * 4 + (x / 16 + 2 * (y / 16)) as usize);
                    Rgba([c[0], c[1], c[2], 255])
                });
                let image_ref = format!("img/{i:03}.png");
                std::fs::write(dir.join(&image_ref), png(&img)).unwrap();
                let boxes = (0..1 + i % 3)
                    .map(|j| {
                        let c = (i + 5 * j) % 12;
                        let [x1, y1, x2, y2] = BOXES[j];
                        AnnotatedBox {
                            bbox: BoundingBox::new(x1, y1, x2, y2).unwrap(),
                            concept_name: format!("⟨n{c}⟩"),
                            category: if c % 4 == 0 { "person".into() } else { "object".into() },
                            description: (c % 3 != 0).then(|| format!("Concept number {c}.")),
                        }
                    })
                    .collect();
                AnnotatedSample {
                    image_ref,
                    boxes,
                    caption: None,
                }
            })
            .collect()
    }
}
