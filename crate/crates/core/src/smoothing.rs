//! Roughness reduction by adding 0 or 2π to each pixel. The optical response
//! is unchanged, so only the neighbor differences move.
//!
//! The per-pixel choice is relaxed with Gumbel-Softmax over two logits and
//! optimized with Adam while the temperature anneals geometrically.

use std::f64::consts::PI;

use ndarray::{Array2, Zip};
use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DonnError, Result};
use crate::field::{DonnModel, PhaseMask};
use crate::roughness::{mask_roughness, roughness_grad, NeighborMode};
use crate::train::adam::{adam_step, AdamState};

pub const TWO_PI: f64 = 2.0 * PI;

/// Largest side length [`brute_force_offsets`] accepts (2^16 assignments).
pub const BRUTE_FORCE_MAX_N: usize = 4;

/// Per-pixel logits for the choices `[0, 2π]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionLogits {
    pub zero: Array2<f64>,
    pub two_pi: Array2<f64>,
    pub temperature: f64,
}

impl SelectionLogits {
    pub fn new(n: usize, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(DonnError::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
        }
        Ok(Self {
            zero: Array2::zeros((n, n)),
            two_pi: Array2::zeros((n, n)),
            temperature,
        })
    }

    /// Hard choice: `true` where the 2π logit is strictly larger.
    pub fn argmax(&self) -> OffsetAssignment {
        OffsetAssignment {
            bits: Zip::from(&self.zero).and(&self.two_pi).map_collect(|&a, &b| b > a),
        }
    }
}

/// `true` = add 2π to that pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OffsetAssignment {
    pub bits: Array2<bool>,
}

impl OffsetAssignment {
    pub fn none(n: usize) -> Self {
        Self {
            bits: Array2::from_elem((n, n), false),
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Row-major bits, pixel 0 as the least significant bit.
    pub fn from_code(n: usize, code: u64) -> Self {
        Self {
            bits: Array2::from_shape_fn((n, n), |(i, j)| code >> (i * n + j) & 1 == 1),
        }
    }
}

fn offset_phase(phase: &Array2<f64>, bits: &Array2<bool>) -> Array2<f64> {
    Zip::from(phase).and(bits).map_collect(|&p, &b| if b { p + TWO_PI } else { p })
}

/// `phase + 2π * bits`. Zeroed blocks may be lifted to 2π, which
/// [`PhaseMask::satisfies_block_mask`] still accepts.
pub fn apply_offsets(mask: &PhaseMask, offsets: &OffsetAssignment) -> Result<PhaseMask> {
    if mask.phase.dim() != offsets.bits.dim() {
        return Err(DonnError::Dimension(format!(
            "offsets {:?} for a {:?} mask",
            offsets.bits.dim(),
            mask.phase.dim()
        )));
    }
    Ok(PhaseMask {
        phase: offset_phase(&mask.phase, &offsets.bits),
        block_mask: mask.block_mask.clone(),
    })
}

fn default_steps() -> usize {
    1000
}
fn default_logit_lr() -> f64 {
    0.01
}
fn default_tau_start() -> f64 {
    5.0
}
fn default_tau_end() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GsConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_logit_lr")]
    pub logit_lr: f64,
    #[serde(default = "default_tau_start")]
    pub tau_start: f64,
    #[serde(default = "default_tau_end")]
    pub tau_end: f64,
}

impl Default for GsConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            logit_lr: default_logit_lr(),
            tau_start: default_tau_start(),
            tau_end: default_tau_end(),
        }
    }
}

impl GsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.logit_lr > 0.0) || !(self.tau_start > 0.0) || !(self.tau_end > 0.0) {
            return Err(DonnError::Config(format!(
                "gs.logit_lr, gs.tau_start and gs.tau_end must be > 0 (got {}, {}, {})",
                self.logit_lr, self.tau_start, self.tau_end
            )));
        }
        Ok(())
    }

    pub fn temperature(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.tau_end;
        }
        let t = step as f64 / (self.steps - 1) as f64;
        self.tau_start * (self.tau_end / self.tau_start).powf(t)
    }
}

/// Outcome for one mask.
#[derive(Clone, Debug, PartialEq)]
pub struct GsResult {
    pub offsets: OffsetAssignment,
    pub before: f64,
    pub after: f64,
}

fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.sample(Open01);
    -(-u.ln()).ln()
}

/// Optimizes the `{0, 2π}` choice per pixel; never returns an assignment
/// rougher than the input.
pub fn gs_optimize(mask: &PhaseMask, mode: NeighborMode, cfg: &GsConfig, rng: &mut ChaCha8Rng) -> Result<GsResult> {
    cfg.validate()?;
    let n = mask.n();
    let phase = &mask.phase;
    let before = mask_roughness(phase, mode);

    let mut logits = SelectionLogits::new(n, cfg.tau_start)?;
    let mut adam = AdamState::new([(n, n), (n, n)]);
    let mut soft = Array2::<f64>::zeros((n, n));
    let mut dsoft = Array2::<f64>::zeros((n, n));
    for step in 0..cfg.steps {
        let tau = cfg.temperature(step);
        logits.temperature = tau;
        // y = softmax((l + g) / tau) for the 2π choice
        for ((i, j), y) in soft.indexed_iter_mut() {
            let a = (logits.zero[[i, j]] + gumbel(rng)) / tau;
            let b = (logits.two_pi[[i, j]] + gumbel(rng)) / tau;
            *y = 1.0 / (1.0 + (a - b).exp());
        }
        let relaxed = phase + &soft.mapv(|y| TWO_PI * y);
        let g = roughness_grad(&relaxed, mode);
        Zip::from(&mut dsoft).and(&g).and(&soft).for_each(|d, &g, &y| {
            *d = g * TWO_PI * y * (1.0 - y) / tau;
        });
        let grads = [-&dsoft, dsoft.clone()];
        adam_step([&mut logits.zero, &mut logits.two_pi], &grads, &mut adam, cfg.logit_lr)?;
    }

    let mut offsets = logits.argmax();
    let mut after = mask_roughness(&offset_phase(phase, &offsets.bits), mode);
    if after > before {
        offsets = OffsetAssignment::none(n);
        after = before;
    }
    Ok(GsResult { offsets, before, after })
}

/// Exhaustive minimum over all `2^(n^2)` assignments; ties go to the
/// smallest row-major binary code.
pub fn brute_force_offsets(phase: &Array2<f64>, mode: NeighborMode) -> Result<(OffsetAssignment, f64)> {
    let n = phase.nrows();
    if n > BRUTE_FORCE_MAX_N {
        return Err(DonnError::SizeGuard {
            n,
            max: BRUTE_FORCE_MAX_N,
        });
    }
    let mut best = (0u64, f64::INFINITY);
    for code in 0..1u64 << (n * n) {
        let bits = OffsetAssignment::from_code(n, code);
        let r = mask_roughness(&offset_phase(phase, &bits.bits), mode);
        if r < best.1 {
            best = (code, r);
        }
    }
    Ok((OffsetAssignment::from_code(n, best.0), best.1))
}

/// Per-layer smoothing outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSmoothing {
    pub layer: usize,
    pub before: f64,
    pub after: f64,
    pub offsets_added: usize,
}

impl LayerSmoothing {
    pub fn percent_reduction(&self) -> f64 {
        if self.before == 0.0 {
            0.0
        } else {
            100.0 * (self.before - self.after) / self.before
        }
    }
}

/// Independent RNG stream per layer, derived from the run seed.
pub fn layer_rng(seed: u64, layer: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer as u64 + 1);
    rng
}

/// Smooths every layer of a model.
pub fn smooth_model(model: &DonnModel, mode: NeighborMode, cfg: &GsConfig, seed: u64) -> Result<(DonnModel, Vec<LayerSmoothing>)> {
    let mut out = model.clone();
    let mut rows = Vec::with_capacity(model.depth());
    for (l, mask) in model.masks().iter().enumerate() {
        let res = gs_optimize(mask, mode, cfg, &mut layer_rng(seed, l))?;
        out.masks_mut()[l] = apply_offsets(mask, &res.offsets)?;
        rows.push(LayerSmoothing {
            layer: l,
            before: res.before,
            after: res.after,
            offsets_added: res.offsets.count(),
        });
    }
    Ok((out, rows))
}

pub const SMOOTHING_HEADER: &str = "layer,R_before,R_after,pct";

/// Per-layer rows plus an `overall` row of layer means.
pub fn smoothing_csv(rows: &[LayerSmoothing]) -> String {
    let mut out = format!("{SMOOTHING_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.layer, r.before, r.after, r.percent_reduction()));
    }
    if !rows.is_empty() {
        let k = rows.len() as f64;
        let overall = LayerSmoothing {
            layer: 0,
            before: rows.iter().map(|r| r.before).sum::<f64>() / k,
            after: rows.iter().map(|r| r.after).sum::<f64>() / k,
            offsets_added: 0,
        };
        out.push_str(&format!(
            "overall,{},{},{}\n",
            overall.before,
            overall.after,
            overall.percent_reduction()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_and_full_offsets() {
        let m = PhaseMask::from_phase(array![[0.1, 0.2], [0.3, 0.4]]).unwrap();
        assert_eq!(apply_offsets(&m, &OffsetAssignment::none(2)).unwrap(), m);
        let all = OffsetAssignment {
            bits: Array2::from_elem((2, 2), true),
        };
        let shifted = apply_offsets(&m, &all).unwrap();
        assert!(shifted.phase.iter().zip(m.phase.iter()).all(|(a, b)| (a - b - TWO_PI).abs() < 1e-15));
        assert!(apply_offsets(&m, &OffsetAssignment::none(3)).is_err());
    }

    #[test]
    fn full_offset_changes_only_boundary_terms() {
        // interior differences are unchanged; every zero-padded neighbor
        // contributes |phi + 2π| instead of |phi|
        let mut r = rng(5);
        let phase = Array2::from_shape_fn((6, 6), |_| r.gen_range(0.0..TWO_PI));
        let all = Array2::from_elem((6, 6), true);
        for mode in [NeighborMode::Four, NeighborMode::Eight] {
            let k = mode.k() as f64;
            let mut boundary = 0.0;
            for i in 0..6isize {
                for j in 0..6isize {
                    for &(di, dj) in mode.offsets() {
                        let (a, b) = (i + di, j + dj);
                        if !(0..6).contains(&a) || !(0..6).contains(&b) {
                            // phases are positive so |phi + 2π| - |phi| = 2π
                            boundary += TWO_PI / k;
                        }
                    }
                }
            }
            let diff = mask_roughness(&offset_phase(&phase, &all), mode) - mask_roughness(&phase, mode);
            assert!((diff - boundary).abs() < 1e-9, "{mode}: {diff} vs {boundary}");
        }
    }

    #[test]
    fn zeroed_block_lifts_to_two_pi() {
        let mut m = PhaseMask::from_phase(Array2::from_elem((6, 6), 6.0)).unwrap();
        m.set_block_mask(crate::field::BlockMask {
            block_size: 2,
            zeroed: array![[false, false, false], [false, true, false], [false, false, false]],
        })
        .unwrap();
        let res = gs_optimize(&m, NeighborMode::Eight, &GsConfig::default(), &mut rng(1)).unwrap();
        let out = apply_offsets(&m, &res.offsets).unwrap();
        assert!(res.after < res.before);
        for (i, j) in [(2, 2), (2, 3), (3, 2), (3, 3)] {
            assert_eq!(out.phase[[i, j]], TWO_PI);
        }
        assert!(out.satisfies_block_mask());
        let mut half = out.clone();
        half.phase[[2, 2]] = PI;
        assert!(!half.satisfies_block_mask());
    }

    #[test]
    fn constant_mask_never_worse() {
        let m = PhaseMask::from_phase(Array2::from_elem((5, 5), 1.0)).unwrap();
        let res = gs_optimize(&m, NeighborMode::Eight, &GsConfig::default(), &mut rng(2)).unwrap();
        assert!(res.after <= res.before);
        assert_eq!(res.before, mask_roughness(&m.phase, NeighborMode::Eight));
    }

    #[test]
    fn brute_force_guards_and_zero_mask() {
        let (bits, r) = brute_force_offsets(&Array2::zeros((2, 2)), NeighborMode::Eight).unwrap();
        assert_eq!(bits, OffsetAssignment::none(2));
        assert_eq!(r, 0.0);
        assert!(matches!(
            brute_force_offsets(&Array2::zeros((5, 5)), NeighborMode::Four),
            Err(DonnError::SizeGuard { n: 5, max: 4 })
        ));
    }

    #[test]
    fn brute_force_is_a_minimum() {
        let mut r = rng(9);
        let phase = Array2::from_shape_fn((3, 3), |_| r.gen_range(0.0..TWO_PI));
        let (best, opt) = brute_force_offsets(&phase, NeighborMode::Eight).unwrap();
        for code in 0..512 {
            let bits = OffsetAssignment::from_code(3, code);
            assert!(opt <= mask_roughness(&offset_phase(&phase, &bits.bits), NeighborMode::Eight));
        }
        assert_eq!(mask_roughness(&offset_phase(&phase, &best.bits), NeighborMode::Eight), opt);
    }

    #[test]
    fn two_by_two_example_with_four_neighbors() {
        let phase = array![[6.2, 0.1], [0.1, 6.2]];
        let (best, opt) = brute_force_offsets(&phase, NeighborMode::Four).unwrap();
        assert_eq!(best.bits, array![[false, true], [true, false]]);
        let m = PhaseMask::from_phase(phase).unwrap();
        let res = gs_optimize(&m, NeighborMode::Four, &GsConfig::default(), &mut rng(4)).unwrap();
        assert_eq!(res.offsets, best);
        assert!((res.after - opt).abs() < 1e-12);
    }

    #[test]
    fn seeded_runs_agree() {
        let mut r = rng(11);
        let m = PhaseMask::from_phase(Array2::from_shape_fn((8, 8), |_| r.gen_range(0.0..TWO_PI))).unwrap();
        let a = gs_optimize(&m, NeighborMode::Eight, &GsConfig::default(), &mut rng(3)).unwrap();
        let b = gs_optimize(&m, NeighborMode::Eight, &GsConfig::default(), &mut rng(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn temperature_schedule_is_geometric() {
        let c = GsConfig::default();
        assert!((c.temperature(0) - 5.0).abs() < 1e-12);
        assert!((c.temperature(999) - 0.5).abs() < 1e-12);
        let mid = c.temperature(333) / c.temperature(332);
        assert!((mid - c.temperature(1) / c.temperature(0)).abs() < 1e-12);
    }
}
