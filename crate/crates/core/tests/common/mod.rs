#![allow(dead_code)]

use donn_core::dataio::{Dataset, LabeledImageSet};
use donn_core::field::Geometry;
use donn_core::train::{Mode, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn geometry(n: usize) -> Geometry {
    Geometry::new(n, 36e-6, 532e-9, 0.004).unwrap()
}

/// 8x8 images: label 0 lights the left half, label 4 the right half, next
/// to the detectors of those classes.
pub fn two_class(count: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(count * 64);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = if i % 2 == 0 { 0 } else { 4 };
        labels.push(label);
        for _r in 0..8 {
            for c in 0..8 {
                let lit = (c < 4) == (label == 0);
                pixels.push(if lit { rng.gen_range(150..=255) } else { rng.gen_range(0..30) });
            }
        }
    }
    let set = LabeledImageSet::new(8, 8, pixels, labels).unwrap();
    Dataset::new(set, geometry(8)).with_input_power(30.0).unwrap()
}

/// Small in-memory config; data paths are unused because datasets are passed in.
pub fn tiny_config(mode: Mode) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.mode = mode;
    cfg.geometry = geometry(8);
    cfg.depth = 1;
    cfg.epochs = 15;
    cfg.batch_size = 8;
    cfg.learning_rate = 0.05;
    cfg.p = 1e-4;
    cfg.q = 1e-3;
    cfg.slr.block_size = 2;
    cfg.slr.sparsity_ratio = 0.25;
    cfg.slr.outer_iters = 4;
    cfg.slr.finetune_epochs = 3;
    cfg.slr.surrogate_samples = 16;
    cfg.gs.steps = 200;
    cfg
}
