//! Fixtures shared by the benchmarks: the synthetic benchmark's objects, a
//! labeled pool, and an initialized embedding network.

use decorr_core::data::{self, SamplingOptions};
use decorr_core::{nn, EmbeddingModel, EmbeddingSnapshot, LabeledTriplet, ObjectSet, Triplet};

pub struct Fixture {
    pub objects: ObjectSet,
    pub pool: Vec<Triplet>,
    pub labeled: Vec<LabeledTriplet>,
    pub model: EmbeddingModel,
}

impl Fixture {
    /// `n` objects in `d` dimensions, `count` labeled triplets and a
    /// `[d, 10, 20, 10]` network.
    pub fn new(n: usize, d: usize, count: usize, seed: u64) -> Self {
        let (objects, metric) = data::generate_synthetic(n, d, seed).expect("valid sizes");
        let pool = data::sample_triplets(&objects, &metric, count, seed + 1, SamplingOptions::default())
            .expect("enough triplets");
        let labeled = pool
            .labeled()
            .expect("sampled pools are labeled")
            .map(|(t, c)| t.label(c))
            .collect();
        let params = nn::init_params(&[d, 10, 20, 10], seed + 2).expect("valid architecture");
        Self {
            objects,
            pool: pool.triplets().to_vec(),
            labeled,
            model: EmbeddingModel::new(params),
        }
    }

    pub fn snapshot(&self) -> EmbeddingSnapshot {
        EmbeddingSnapshot::new(&self.model, self.objects.features()).expect("matching shapes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shapes() {
        let f = Fixture::new(20, 4, 50, 1);
        assert_eq!(f.pool.len(), 50);
        assert_eq!(f.labeled.len(), 50);
        assert_eq!(f.model.embed_dim(), 10);
        assert!(f
            .snapshot()
            .expected_last_layer_gradient(&f.pool[0], Default::default())
            .iter()
            .all(|x| x.is_finite()));
    }
}
