#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use donn_core::dataio::{encode_idx, LabeledImageSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn donn() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_donn"));
    // keep the caller's DONN_* variables out of the runs
    for (k, _) in std::env::vars() {
        if k.starts_with("DONN_") {
            cmd.env_remove(k);
        }
    }
    cmd
}

/// 12x12 images where the digit's class sets the position of a bright bar.
pub fn synthetic_set(count: usize, seed: u64) -> LabeledImageSet {
    const SIDE: usize = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = vec![0u8; count * SIDE * SIDE];
    let mut labels = Vec::with_capacity(count);
    for (i, img) in pixels.chunks_mut(SIDE * SIDE).enumerate() {
        let label = i % 10;
        labels.push(label as u8);
        let (r0, c0) = (1 + 6 * (label / 5), 1 + 2 * (label % 5));
        for r in r0..r0 + 4 {
            for c in c0..c0 + 2 {
                img[r * SIDE + c] = rng.gen_range(160..=255);
            }
        }
        for _ in 0..6 {
            img[rng.gen_range(0..SIDE * SIDE)] = rng.gen_range(0..80);
        }
    }
    LabeledImageSet::new(SIDE, SIDE, pixels, labels).unwrap()
}

pub fn write_idx(dir: &Path, stem: &str, set: &LabeledImageSet) -> (PathBuf, PathBuf) {
    let (images, labels) = encode_idx(set);
    let ip = dir.join(format!("{stem}-images-idx3-ubyte"));
    let lp = dir.join(format!("{stem}-labels-idx1-ubyte"));
    fs::write(&ip, images).unwrap();
    fs::write(&lp, labels).unwrap();
    (ip, lp)
}

/// Writes train/test IDX files and a small config into `dir`, returns the config path.
pub fn tiny_setup(dir: &Path, extra: &str) -> PathBuf {
    let (tri, trl) = write_idx(dir, "train", &synthetic_set(40, 1));
    let (tei, tel) = write_idx(dir, "t10k", &synthetic_set(20, 2));
    let cfg = format!(
        r#"{extra}
depth = 2
epochs = 2
batch_size = 10
learning_rate = 0.05
p = 1e-5
q = 1e-4
input_power = 300.0

[geometry]
n = 16
distance = 0.005

[data]
train_images = "{}"
train_labels = "{}"
test_images = "{}"
test_labels = "{}"
train_samples = 0
test_samples = 0

[slr]
block_size = 4
sparsity_ratio = 0.25
outer_iters = 2
inner_steps = 2
finetune_epochs = 1
surrogate_samples = 10

[gs]
steps = 60
"#,
        tri.display(),
        trl.display(),
        tei.display(),
        tel.display()
    );
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg).unwrap();
    path
}

pub fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}
