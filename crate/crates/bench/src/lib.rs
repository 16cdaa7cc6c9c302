//! Fixtures shared by the benchmarks.

use deco_core::config::RunConfig;
use deco_core::data::{generate_scene, normalize, Scene};
use deco_core::matching::CostMatrix;
use deco_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random `rows x cols` cost matrix with entries in `[0, 10)`.
pub fn random_costs(rows: usize, cols: usize, seed: u64) -> CostMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(0.0..10.0)).collect();
    CostMatrix::new(rows, cols, data).expect("sized to rows x cols")
}

/// First training scene of the default config and its normalized image.
pub fn toy_scene() -> (RunConfig, Scene, Tensor<f32>) {
    let cfg = RunConfig::default();
    let scene = generate_scene(&cfg.data, 0);
    let image = normalize(&scene.image, cfg.data.mean, cfg.data.std);
    (cfg, scene, image)
}
