//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rap_core::{ConceptStore, EmbeddingVector, NewConcept};

pub fn random_embedding(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    EmbeddingVector::new((0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).expect("finite values")
}

/// A store of `n` random concepts named `⟨c{i}⟩`.
pub fn random_store(n: usize, dim: usize, seed: u64) -> ConceptStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ConceptStore::new(dim).expect("positive dim");
    for i in 0..n {
        store
            .add_concept(NewConcept {
                name: format!("⟨c{i}⟩"),
                category: "object".into(),
                description: format!("concept number {i}"),
                image_ref: format!("c{i}.png"),
                embedding: random_embedding(&mut rng, dim),
            })
            .expect("unique names");
    }
    store
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
