//! Fixtures shared by the benchmarks.

use causalpix_core::data::synthetic;
use causalpix_core::{Images, Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A desk model and a batch of `n` synthetic `side x side` images.
pub fn desk_fixture(n: usize, side: usize) -> (Model<f32>, Images) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::new(ModelConfig::desk(), &mut rng).expect("desk config is valid");
    let data = synthetic(n, side, 1).expect("synthetic data");
    (model, data.images)
}
