//! Block sparsification of phase masks by surrogate Lagrangian relaxation,
//! plus the unstructured and bank-balanced patterns it is compared against.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{objective, GradientSet, Regularization};
use crate::dataio::Dataset;
use crate::error::{DonnError, Result};
use crate::field::{BlockMask, ComplexField, DonnModel};
use crate::train::optim::{LossTerms, Trainer};

/// Square `b x b` tiling of an `n x n` mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockPartition {
    pub n: usize,
    pub block_size: usize,
}

impl BlockPartition {
    pub fn new(n: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 || n == 0 || n % block_size != 0 {
            return Err(DonnError::Partition { n, block: block_size });
        }
        Ok(Self { n, block_size })
    }

    /// Blocks per side.
    pub fn grid(&self) -> usize {
        self.n / self.block_size
    }

    pub fn count(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Number of blocks to zero: `ceil(ratio * count)`.
    pub fn budget(&self, ratio: f64) -> Result<usize> {
        check_ratio(ratio)?;
        // the slack keeps e.g. 0.3 * 10 = 3.0000000000000004 from rounding up to 4
        Ok(((ratio * self.count() as f64 - 1e-9).ceil().max(0.0) as usize).min(self.count()))
    }

    /// L2 norm of every block, row-major.
    pub fn block_norms(&self, w: &Array2<f64>) -> Result<Vec<f64>> {
        if w.dim() != (self.n, self.n) {
            return Err(DonnError::Dimension(format!("{:?} matrix for a {n}x{n} partition", w.dim(), n = self.n)));
        }
        let (g, b) = (self.grid(), self.block_size);
        Ok((0..g * g)
            .map(|k| {
                let (bi, bj) = (k / g, k % g);
                w.slice(s![bi * b..(bi + 1) * b, bj * b..(bj + 1) * b])
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect())
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(DonnError::InvalidRatio(ratio));
    }
    Ok(())
}

/// Which blocks `block_project` zeroes: the `budget` smallest norms, ties by
/// row-major index.
pub fn select_blocks(w: &Array2<f64>, partition: &BlockPartition, ratio: f64) -> Result<BlockMask> {
    let norms = partition.block_norms(w)?;
    let m = partition.budget(ratio)?;
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let g = partition.grid();
    let mut zeroed = Array2::from_elem((g, g), false);
    for &k in &order[..m] {
        zeroed[[k / g, k % g]] = true;
    }
    Ok(BlockMask {
        block_size: partition.block_size,
        zeroed,
    })
}

fn apply_block_mask(w: &Array2<f64>, mask: &BlockMask) -> Array2<f64> {
    let mut out = w.clone();
    let b = mask.block_size;
    for ((bi, bj), &z) in mask.zeroed.indexed_iter() {
        if z {
            out.slice_mut(s![bi * b..(bi + 1) * b, bj * b..(bj + 1) * b]).fill(0.0);
        }
    }
    out
}

/// Euclidean projection onto matrices with `ceil(ratio * #blocks)` zero blocks.
pub fn block_project(w: &Array2<f64>, partition: &BlockPartition, ratio: f64) -> Result<Array2<f64>> {
    Ok(block_project_with_mask(w, partition, ratio)?.0)
}

pub fn block_project_with_mask(w: &Array2<f64>, partition: &BlockPartition, ratio: f64) -> Result<(Array2<f64>, BlockMask)> {
    let mask = select_blocks(w, partition, ratio)?;
    Ok((apply_block_mask(w, &mask), mask))
}

/// Counts `b x b` blocks whose entries are all exactly zero.
pub fn zero_block_count(w: &Array2<f64>, partition: &BlockPartition) -> usize {
    let (g, b) = (partition.grid(), partition.block_size);
    (0..g * g)
        .filter(|k| {
            let (bi, bj) = (k / g, k % g);
            w.slice(s![bi * b..(bi + 1) * b, bj * b..(bj + 1) * b]).iter().all(|&v| v == 0.0)
        })
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityScheme {
    Unstructured,
    BankBalanced { bank: usize },
    Block { block_size: usize },
}

fn zero_smallest(values: &mut [f64], ratio: f64) {
    let m = ((ratio * values.len() as f64 - 1e-9).ceil().max(0.0) as usize).min(values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
    for &k in &order[..m] {
        values[k] = 0.0;
    }
}

/// Magnitude pruning under the given pattern.
pub fn alt_sparsify(w: &Array2<f64>, ratio: f64, scheme: SparsityScheme) -> Result<Array2<f64>> {
    check_ratio(ratio)?;
    let (rows, cols) = w.dim();
    match scheme {
        SparsityScheme::Unstructured => {
            let mut v: Vec<f64> = w.iter().copied().collect();
            zero_smallest(&mut v, ratio);
            Ok(Array2::from_shape_vec((rows, cols), v).expect("same shape"))
        }
        SparsityScheme::BankBalanced { bank } => {
            if bank == 0 || cols % bank != 0 {
                return Err(DonnError::BankSize { n: cols, bank });
            }
            let mut out = w.clone();
            for mut row in out.rows_mut() {
                let mut v: Vec<f64> = row.iter().copied().collect();
                for chunk in v.chunks_mut(bank) {
                    zero_smallest(chunk, ratio);
                }
                row.iter_mut().zip(v).for_each(|(d, s)| *d = s);
            }
            Ok(out)
        }
        SparsityScheme::Block { block_size } => {
            if rows != cols {
                return Err(DonnError::Dimension(format!("block scheme needs a square matrix, got {rows}x{cols}")));
            }
            block_project(w, &BlockPartition::new(rows, block_size)?, ratio)
        }
    }
}

fn default_rho() -> f64 {
    0.1
}
fn default_m() -> f64 {
    300.0
}
fn default_r() -> f64 {
    0.1
}
fn default_s0() -> f64 {
    0.01
}
fn default_ratio() -> f64 {
    0.1
}
fn default_outer() -> usize {
    10
}
fn default_lr() -> f64 {
    0.01
}
fn default_finetune() -> usize {
    3
}
fn default_surrogate_samples() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlrConfig {
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Stepsize parameter `M`.
    #[serde(default = "default_m")]
    pub m: f64,
    /// Stepsize exponent parameter `r`.
    #[serde(default = "default_r")]
    pub r: f64,
    #[serde(default = "default_s0")]
    pub s0: f64,
    #[serde(default = "default_ratio")]
    pub sparsity_ratio: f64,
    pub block_size: usize,
    /// Adam steps per W-subproblem; 0 means one epoch over the training set.
    #[serde(default)]
    pub inner_steps: usize,
    #[serde(default = "default_outer")]
    pub outer_iters: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Masked fine-tuning epochs after the hard projection.
    #[serde(default = "default_finetune")]
    pub finetune_epochs: usize,
    /// Fixed training subset on which surrogate values are compared.
    #[serde(default = "default_surrogate_samples")]
    pub surrogate_samples: usize,
}

impl SlrConfig {
    pub fn with_block_size(block_size: usize) -> Self {
        Self {
            rho: default_rho(),
            m: default_m(),
            r: default_r(),
            s0: default_s0(),
            sparsity_ratio: default_ratio(),
            block_size,
            inner_steps: 0,
            outer_iters: default_outer(),
            learning_rate: default_lr(),
            finetune_epochs: default_finetune(),
            surrogate_samples: default_surrogate_samples(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DonnError::Config(m));
        if !(self.rho > 0.0) {
            return bad(format!("slr.rho must be > 0, got {}", self.rho));
        }
        if !(self.m > 1.0) {
            return bad(format!("slr.m must be > 1, got {}", self.m));
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return bad(format!("slr.r must be in (0, 1), got {}", self.r));
        }
        if !(self.s0 > 0.0) {
            return bad(format!("slr.s0 must be > 0, got {}", self.s0));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("slr.learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.block_size == 0 {
            return bad("slr.block_size must be > 0".into());
        }
        if self.surrogate_samples == 0 {
            return bad("slr.surrogate_samples must be > 0".into());
        }
        check_ratio(self.sparsity_ratio)
    }
}

pub const STEP_MIN: f64 = 1e-12;
pub const STEP_MAX: f64 = 1e3;

/// `alpha_k = 1 - 1 / (M k^(1 - k^-r))`.
pub fn stepsize_alpha(k: usize, m: f64, r: f64) -> f64 {
    let k = k.max(1) as f64;
    let pk = 1.0 - 1.0 / k.powf(r);
    1.0 - 1.0 / (m * k.powf(pk))
}

fn scaled_step(alpha: f64, prev: f64, num: f64, den: f64) -> f64 {
    if den == 0.0 || !den.is_finite() || !num.is_finite() {
        return prev.clamp(STEP_MIN, STEP_MAX);
    }
    (alpha * prev * num / den).clamp(STEP_MIN, STEP_MAX)
}

/// `s'_k = alpha_k s_{k-1} |W^{k-1} - Z^{k-1}| / |W^k - Z^{k-1}|`.
pub fn first_stepsize(s_prev: f64, gap_prev: f64, gap_mid: f64, k: usize, m: f64, r: f64) -> f64 {
    scaled_step(stepsize_alpha(k, m, r), s_prev, gap_prev, gap_mid)
}

/// `s_k = alpha_k s'_k |W^k - Z^{k-1}| / |W^k - Z^k|`.
pub fn second_stepsize(s_first: f64, gap_mid: f64, gap_new: f64, k: usize, m: f64, r: f64) -> f64 {
    scaled_step(stepsize_alpha(k, m, r), s_first, gap_mid, gap_new)
}

/// Frobenius distances between iterates, over all layers together.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterateGaps {
    /// `|W^{k-1} - Z^{k-1}|`
    pub prev: f64,
    /// `|W^k - Z^{k-1}|`
    pub mid: f64,
    /// `|W^k - Z^k|`
    pub new: f64,
}

pub fn slr_stepsizes(s_prev: f64, gaps: IterateGaps, k: usize, m: f64, r: f64) -> (f64, f64) {
    let s1 = first_stepsize(s_prev, gaps.prev, gaps.mid, k, m, r);
    (s1, second_stepsize(s1, gaps.mid, gaps.new, k, m, r))
}

pub fn frobenius_gap(a: &[Array2<f64>], b: &[Array2<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y.iter()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn check_shapes(model: &DonnModel, z: &[Array2<f64>], lambda: &[Array2<f64>]) -> Result<()> {
    let n = model.geometry().n;
    if z.len() != model.depth() || lambda.len() != model.depth() || z.iter().chain(lambda).any(|a| a.dim() != (n, n)) {
        return Err(DonnError::Dimension(format!(
            "Z/Lambda must be {} arrays of {n}x{n}",
            model.depth()
        )));
    }
    Ok(())
}

/// `sum_i tr(Lambda_i^T (W_i - Z_i)) + rho/2 |W_i - Z_i|^2`.
pub fn penalty_terms(w: &[Array2<f64>], z: &[Array2<f64>], lambda: &[Array2<f64>], rho: f64) -> f64 {
    let mut total = 0.0;
    for ((w, z), l) in w.iter().zip(z).zip(lambda) {
        for ((&wv, &zv), &lv) in w.iter().zip(z.iter()).zip(l.iter()) {
            let d = wv - zv;
            total += lv * d + 0.5 * rho * d * d;
        }
    }
    total
}

/// Data loss plus regularizers plus the multiplier and quadratic penalties.
pub fn augmented_lagrangian(
    model: &DonnModel,
    batch: &[(ComplexField, usize)],
    z: &[Array2<f64>],
    lambda: &[Array2<f64>],
    rho: f64,
    reg: &Regularization,
) -> Result<f64> {
    check_shapes(model, z, lambda)?;
    let base = objective(model, batch.iter().map(|(f, l)| (f, *l)), reg)?;
    let w = model.phases();
    Ok(base + penalty_terms(&w, z, lambda, rho))
}

/// Multipliers and auxiliary variables of the relaxation.
#[derive(Clone, Debug, PartialEq)]
pub struct SlrState {
    pub z: Vec<Array2<f64>>,
    pub lambda: Vec<Array2<f64>>,
    pub s_first: f64,
    pub s: f64,
    pub k: usize,
    pub surrogate: f64,
}

/// One row of the outer-loop trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlrTraceRow {
    pub k: usize,
    pub surrogate: f64,
    /// `|W - Z|_F` after the Z-step.
    pub gap: f64,
    pub s_first: f64,
    pub s: f64,
    /// Training-subset accuracy of the unprojected W, if measured.
    pub accuracy: Option<f64>,
    pub first_update: bool,
    pub second_update: bool,
}

pub const SLR_TRACE_HEADER: &str = "k,surrogate,gap,s_first,s,accuracy";

pub fn slr_trace_csv(rows: &[SlrTraceRow]) -> String {
    let mut out = format!("{SLR_TRACE_HEADER}\n");
    for r in rows {
        let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{},{}\n", r.k, r.surrogate, r.gap, r.s_first, r.s, acc));
    }
    out
}

/// Result of [`slr_sparsify`].
#[derive(Clone, Debug)]
pub struct SlrOutcome {
    pub state: SlrState,
    pub trace: Vec<SlrTraceRow>,
    /// Per-epoch loss terms of the masked fine-tuning.
    pub finetune: Vec<LossTerms>,
}

/// Optimizer settings shared with ordinary training.
#[derive(Clone, Copy, Debug)]
pub struct InnerSettings {
    pub batch_size: usize,
    pub seed: u64,
    /// Measure subset accuracy after each outer iteration.
    pub track_accuracy: bool,
}

fn subset_accuracy(model: &DonnModel, batch: &[(ComplexField, usize)]) -> Result<f64> {
    let mut hits = 0usize;
    for (f, label) in batch {
        let det = crate::field::forward(model, f)?;
        if crate::field::predict(&det.sums)? == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / batch.len() as f64)
}

/// Alternating W/Z minimization of the augmented Lagrangian with
/// surrogate-gated multiplier updates, then a hard projection, frozen block
/// masks and masked fine-tuning. The returned model satisfies the block
/// constraint exactly.
///
/// Phases are first mapped into `[-π, π]`, so a block's norm measures how far
/// its transmission is from that of a zeroed block.
pub fn slr_sparsify(
    model: &DonnModel,
    data: &Dataset,
    cfg: &SlrConfig,
    reg: &Regularization,
    inner: InnerSettings,
) -> Result<(DonnModel, SlrOutcome)> {
    cfg.validate()?;
    let n = model.geometry().n;
    let partition = BlockPartition::new(n, cfg.block_size)?;
    let mut model = model.clone();
    for m in model.masks_mut() {
        m.block_mask = None;
        m.wrap_centered();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(inner.seed ^ 0x5eed_0051);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(cfg.surrogate_samples.min(data.len()));
    let surrogate_batch = data.batch(&idx)?;

    let project_all = |w: &[Array2<f64>]| -> Result<Vec<Array2<f64>>> {
        w.iter().map(|x| block_project(x, &partition, cfg.sparsity_ratio)).collect()
    };
    let lagrangian = |m: &DonnModel, z: &[Array2<f64>], l: &[Array2<f64>]| {
        augmented_lagrangian(m, &surrogate_batch, z, l, cfg.rho, reg)
    };

    let w0 = model.phases();
    let mut state = SlrState {
        z: project_all(&w0)?,
        lambda: vec![Array2::zeros((n, n)); model.depth()],
        s_first: cfg.s0,
        s: cfg.s0,
        k: 0,
        surrogate: 0.0,
    };
    state.surrogate = lagrangian(&model, &state.z, &state.lambda)?;
    let initial = state.surrogate;
    let mut trace = Vec::new();

    let mut trainer = Trainer::new(&model, *reg, cfg.learning_rate, inner.batch_size, data.len(), inner.seed)?;
    let steps = if cfg.inner_steps == 0 {
        trainer.batches_per_epoch()
    } else {
        cfg.inner_steps
    };

    for k in 1..=cfg.outer_iters {
        let w_prev = model.phases();
        let gap_prev = frobenius_gap(&w_prev, &state.z);

        // W-subproblem
        let (z_ref, l_ref, rho) = (&state.z, &state.lambda, cfg.rho);
        let hook = |m: &DonnModel, g: &mut GradientSet| -> Result<()> {
            for ((gl, ml), (zl, ll)) in g.layers.iter_mut().zip(m.masks()).zip(z_ref.iter().zip(l_ref)) {
                ndarray::Zip::from(gl).and(&ml.phase).and(zl).and(ll).for_each(|g, &w, &z, &l| {
                    *g += l + rho * (w - z);
                });
            }
            Ok(())
        };
        trainer.run(&mut model, data, steps, Some(&hook))?;
        let w = model.phases();
        let gap_mid = frobenius_gap(&w, &state.z);

        let s_first = first_stepsize(state.s, gap_prev, gap_mid, k, cfg.m, cfg.r);
        let mut prev_model = model.clone();
        for (m, wp) in prev_model.masks_mut().iter_mut().zip(&w_prev) {
            m.phase.assign(wp);
        }
        let l_new = lagrangian(&model, &state.z, &state.lambda)?;
        let l_old = lagrangian(&prev_model, &state.z, &state.lambda)?;
        let first_update = l_new < l_old;
        let mut lambda_mid = state.lambda.clone();
        if first_update {
            for ((l, wl), zl) in lambda_mid.iter_mut().zip(&w).zip(&state.z) {
                l.scaled_add(s_first, &(wl - zl));
            }
        }

        // Z-subproblem: projection of W + Lambda'/rho
        let shifted: Vec<Array2<f64>> = w.iter().zip(&lambda_mid).map(|(wl, l)| wl + &(l / cfg.rho)).collect();
        let z_new = project_all(&shifted)?;
        let gap_new = frobenius_gap(&w, &z_new);
        let s = second_stepsize(s_first, gap_mid, gap_new, k, cfg.m, cfg.r);
        // the data and regularizer terms cancel when only Z changes
        let second_update =
            penalty_terms(&w, &z_new, &lambda_mid, cfg.rho) < penalty_terms(&w, &state.z, &lambda_mid, cfg.rho);
        if second_update {
            for ((l, wl), zl) in lambda_mid.iter_mut().zip(&w).zip(&z_new) {
                l.scaled_add(s, &(wl - zl));
            }
        }
        state.z = z_new;
        state.lambda = lambda_mid;
        state.s_first = s_first;
        state.s = s;
        state.k = k;
        state.surrogate = lagrangian(&model, &state.z, &state.lambda)?;

        let accuracy = if inner.track_accuracy {
            Some(subset_accuracy(&model, &surrogate_batch)?)
        } else {
            None
        };
        trace.push(SlrTraceRow {
            k,
            surrogate: state.surrogate,
            gap: gap_new,
            s_first,
            s,
            accuracy,
            first_update,
            second_update,
        });
        log::info!(
            "slr k={k} surrogate={:.6} gap={gap_new:.4e} s'={s_first:.3e} s={s:.3e}",
            state.surrogate
        );

        if !state.surrogate.is_finite() || state.surrogate > 10.0 * initial.abs().max(f64::MIN_POSITIVE) {
            return Err(DonnError::Divergence(format!(
                "surrogate {} at outer iteration {k} exceeds 10x its initial value {initial}",
                state.surrogate
            )));
        }
        let w_norm = frobenius_gap(&w, &vec![Array2::zeros((n, n)); w.len()]);
        if gap_new <= 1e-3 * w_norm {
            break;
        }
    }

    // hard projection and frozen masks
    for mask in model.masks_mut() {
        let bm = select_blocks(&mask.phase, &partition, cfg.sparsity_ratio)?;
        mask.set_block_mask(bm)?;
    }
    let mut finetune = Vec::new();
    if cfg.finetune_epochs > 0 && partition.budget(cfg.sparsity_ratio)? > 0 {
        let mut ft = Trainer::new(&model, *reg, cfg.learning_rate, inner.batch_size, data.len(), inner.seed ^ 0xf1e7)?;
        for _ in 0..cfg.finetune_epochs {
            finetune.push(ft.epoch(&mut model, data, None)?);
        }
    }
    Ok((model, SlrOutcome { state, trace, finetune }))
}
