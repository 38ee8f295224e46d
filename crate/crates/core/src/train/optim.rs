use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{batch_data_grad, regularizer_grad, regularizer_terms, GradientSet, Regularization};
use crate::dataio::Dataset;
use crate::error::{DonnError, Result};
use crate::field::DonnModel;
use crate::train::adam::{adam_step, AdamState};

/// Seeded mini-batch order; reshuffles at every epoch boundary.
#[derive(Clone, Debug)]
pub struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch_size == 0 {
            return Err(DonnError::InvalidArgument(format!(
                "cannot batch {len} samples in batches of {batch_size}"
            )));
        }
        let mut s = Self {
            order: (0..len).collect(),
            pos: 0,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Next batch; the last batch of an epoch may be short.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// Loss components measured on one batch before its update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub data: f64,
    /// Unweighted sum of per-layer roughness (0 when `p = 0`).
    pub roughness: f64,
    /// Unweighted sum of per-layer intra-block variance (0 when `q = 0`).
    pub intra_block: f64,
    /// `data + p * roughness + q * intra_block`.
    pub objective: f64,
}

/// Extra gradient contribution, e.g. augmented-Lagrangian penalties.
pub type GradHook<'a> = &'a dyn Fn(&DonnModel, &mut GradientSet) -> Result<()>;

/// Mini-batch Adam over every phase of a model.
pub struct Trainer {
    pub reg: Regularization,
    pub lr: f64,
    adam: AdamState,
    stream: BatchStream,
}

impl Trainer {
    pub fn new(model: &DonnModel, reg: Regularization, lr: f64, batch_size: usize, samples: usize, seed: u64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(DonnError::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            reg,
            lr,
            adam: AdamState::like(&model.phases()),
            stream: BatchStream::new(samples, batch_size, seed)?,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.stream.batches_per_epoch()
    }

    /// One update on the next batch. Gradients inside frozen blocks are
    /// dropped and the masks re-enforced afterwards.
    pub fn step(&mut self, model: &mut DonnModel, data: &Dataset, hook: Option<GradHook>) -> Result<LossTerms> {
        let batch = data.batch(&self.stream.next_batch())?;
        let (loss, mut grad) = batch_data_grad(model, batch.iter().map(|(f, l)| (f, *l)))?;
        let terms = regularizer_terms(model, &self.reg)?;
        if self.reg.is_active() {
            grad.add_scaled(&regularizer_grad(model, &self.reg)?, 1.0);
        }
        if let Some(h) = hook {
            h(model, &mut grad)?;
        }
        for (g, m) in grad.layers.iter_mut().zip(model.masks()) {
            if let Some(bm) = &m.block_mask {
                for ((i, j), v) in g.indexed_iter_mut() {
                    if bm.covers(i, j) {
                        *v = 0.0;
                    }
                }
            }
        }
        let out = LossTerms {
            data: loss,
            roughness: terms.roughness,
            intra_block: terms.intra_block,
            objective: loss + self.reg.p * terms.roughness + self.reg.q * terms.intra_block,
        };
        if !out.objective.is_finite() || !grad.is_finite() {
            return Err(DonnError::Divergence(format!("non-finite loss {}", out.objective)));
        }
        let masks = model.masks_mut();
        adam_step(masks.iter_mut().map(|m| &mut m.phase), &grad.layers, &mut self.adam, self.lr)?;
        for m in masks.iter_mut() {
            m.enforce_block_mask();
        }
        Ok(out)
    }

    /// `steps` updates; returns the batch-mean of each loss component.
    pub fn run(&mut self, model: &mut DonnModel, data: &Dataset, steps: usize, hook: Option<GradHook>) -> Result<LossTerms> {
        let mut acc = LossTerms::default();
        for _ in 0..steps {
            let t = self.step(model, data, hook)?;
            acc.data += t.data;
            acc.roughness += t.roughness;
            acc.intra_block += t.intra_block;
            acc.objective += t.objective;
        }
        let k = steps.max(1) as f64;
        Ok(LossTerms {
            data: acc.data / k,
            roughness: acc.roughness / k,
            intra_block: acc.intra_block / k,
            objective: acc.objective / k,
        })
    }

    pub fn epoch(&mut self, model: &mut DonnModel, data: &Dataset, hook: Option<GradHook>) -> Result<LossTerms> {
        let steps = self.batches_per_epoch();
        self.run(model, data, steps, hook)
    }
}
