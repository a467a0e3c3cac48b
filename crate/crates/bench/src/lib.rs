//! Inputs shared by the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmae::geometry::{synthetic_dataset, transform_to_frame};
use tmae::{PointFrame, RunConfig, Tensor};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// An aligned `(prev, cur)` pair three frames apart from the default scene.
pub fn default_pair(cfg: &RunConfig) -> (PointFrame, PointFrame) {
    let seqs = synthetic_dataset(&cfg.scene).expect("default scene");
    let frames = &seqs[0].frames;
    let cur = frames[3].clone();
    let prev = transform_to_frame(&frames[0], &cur.pose).expect("valid poses");
    (prev, cur)
}
