//! Reverse-mode gradients of the classification loss with respect to every
//! phase, derived by hand for the fixed propagate/modulate chain.
//!
//! Complex cotangents follow the Wirtinger convention
//! `G = dL/dRe(f) + i dL/dIm(f)`, so that `dL = Re(conj(G) df)`. Under that
//! convention a linear map `A` pulls `G` back to `A^H G`, the intensity
//! `|f|^2` pulls a real cotangent `c` back to `2 c f`, and a phase factor
//! `f' = u exp(i phi)` gives `dL/dphi = -Im(conj(G') f')`.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{DonnError, Result};
use crate::field::{run_chain, softmax, data_loss, propagate, ComplexField, DonnModel, NUM_CLASSES};
use crate::roughness::{intra_block_grad, intra_block_variance, mask_roughness, roughness_grad, NeighborMode};

/// Intermediates of one forward pass, enough for one backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    revision: u64,
    /// Field arriving at each layer, before its modulation.
    pub arrived: Vec<ComplexField>,
    /// Field at the detector plane.
    pub output: ComplexField,
    pub sums: [f64; NUM_CLASSES],
    pub softmax: Vec<f64>,
}

/// One `n x n` gradient array per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<Array2<f64>>,
}

impl GradientSet {
    pub fn zeros(depth: usize, n: usize) -> Self {
        Self {
            layers: vec![Array2::zeros((n, n)); depth],
        }
    }

    pub fn zeros_like(model: &DonnModel) -> Self {
        Self::zeros(model.depth(), model.geometry().n)
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.scaled_add(scale, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.layers {
            a.mapv_inplace(|v| v * factor);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|a| a.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|a| a.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Largest entrywise difference, relative to the largest entry of `reference`.
    pub fn max_rel_err(&self, reference: &GradientSet) -> f64 {
        let scale = reference.max_abs().max(f64::MIN_POSITIVE);
        self.layers
            .iter()
            .zip(&reference.layers)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
            / scale
    }
}

pub fn forward_with_tape(model: &DonnModel, input: &ComplexField) -> Result<([f64; NUM_CLASSES], ForwardTape)> {
    let mut arrived = Vec::with_capacity(model.depth());
    let output = run_chain(model, input, Some(&mut arrived))?;
    let sums = model.layout().sums(&output.intensity());
    let tape = ForwardTape {
        revision: model.revision(),
        arrived,
        output,
        sums,
        softmax: softmax(&sums),
    };
    Ok((sums, tape))
}

/// Gradient of [`data_loss`] with respect to the class sums.
fn loss_grad_wrt_sums(probs: &[f64], target: usize) -> Vec<f64> {
    let k = probs.len() as f64;
    let d_prob: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(c, &s)| 2.0 / k * (s - if c == target { 1.0 } else { 0.0 }))
        .collect();
    let inner: f64 = probs.iter().zip(&d_prob).map(|(s, d)| s * d).sum();
    probs.iter().zip(&d_prob).map(|(s, d)| s * (d - inner)).collect()
}

/// `d data_loss / d phase_l` for every layer.
pub fn backward(tape: &ForwardTape, model: &DonnModel, target: usize) -> Result<GradientSet> {
    if tape.revision != model.revision() {
        return Err(DonnError::TapeInvalid {
            captured: tape.revision,
            current: model.revision(),
        });
    }
    if tape.arrived.len() != model.depth() {
        return Err(DonnError::Dimension(format!(
            "tape has {} stages, model has {} layers",
            tape.arrived.len(),
            model.depth()
        )));
    }
    if target >= NUM_CLASSES {
        return Err(DonnError::InvalidClass(target));
    }
    let d_sums = loss_grad_wrt_sums(&tape.softmax, target);

    // intensity -> detector field
    let mut cot = ComplexField::zeros(tape.output.geometry);
    for (region, &d) in model.layout().regions().iter().zip(&d_sums) {
        for i in region.row0..region.row0 + region.height {
            for j in region.col0..region.col0 + region.width {
                cot.data[[i, j]] = 2.0 * d * tape.output.data[[i, j]];
            }
        }
    }

    let adjoint = model.adjoint_kernel();
    let mut cot = propagate(&cot, adjoint)?;
    let mut layers = vec![Array2::zeros((0, 0)); model.depth()];
    for l in (0..model.depth()).rev() {
        let phase = &model.masks()[l].phase;
        let arrived = &tape.arrived[l].data;
        let mut grad = Array2::<f64>::zeros(phase.dim());
        ndarray::Zip::from(&mut grad)
            .and(&mut cot.data)
            .and(arrived)
            .and(phase)
            .for_each(|g, c, &u, &p| {
                let rot = Complex64::cis(p);
                *g = -(c.conj() * u * rot).im;
                *c *= rot.conj();
            });
        layers[l] = grad;
        if l > 0 {
            cot = propagate(&cot, adjoint)?;
        }
    }
    Ok(GradientSet { layers })
}

/// Data loss of one sample.
pub fn sample_loss(model: &DonnModel, input: &ComplexField, target: usize) -> Result<f64> {
    let (sums, _) = forward_with_tape(model, input)?;
    data_loss(&sums, target)
}

/// Central-difference gradient of the data loss, one full forward per probe.
pub fn finite_diff_grad(model: &DonnModel, input: &ComplexField, target: usize, eps: f64) -> Result<GradientSet> {
    finite_diff(model, eps, |m| sample_loss(m, input, target))
}

/// Central differences of an arbitrary scalar function of the phases.
pub fn finite_diff<F>(model: &DonnModel, eps: f64, mut f: F) -> Result<GradientSet>
where
    F: FnMut(&DonnModel) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(DonnError::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = model.clone();
    let mut out = GradientSet::zeros_like(model);
    let n = model.geometry().n;
    for l in 0..model.depth() {
        for i in 0..n {
            for j in 0..n {
                let orig = probe.masks()[l].phase[[i, j]];
                probe.masks_mut()[l].phase[[i, j]] = orig + eps;
                let hi = f(&probe)?;
                probe.masks_mut()[l].phase[[i, j]] = orig - eps;
                let lo = f(&probe)?;
                probe.masks_mut()[l].phase[[i, j]] = orig;
                out.layers[l][[i, j]] = (hi - lo) / (2.0 * eps);
            }
        }
    }
    Ok(out)
}

/// Weights of the roughness and intra-block smoothness regularizers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Regularization {
    pub p: f64,
    pub q: f64,
    pub mode: NeighborMode,
    pub block_size: usize,
}

impl Regularization {
    pub fn none() -> Self {
        Self {
            p: 0.0,
            q: 0.0,
            mode: NeighborMode::Eight,
            block_size: 1,
        }
    }

    pub fn is_active(&self) -> bool {
        self.p != 0.0 || self.q != 0.0
    }
}

/// Unweighted regularizer totals over all layers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegularizerTerms {
    pub roughness: f64,
    pub intra_block: f64,
}

pub fn regularizer_terms(model: &DonnModel, reg: &Regularization) -> Result<RegularizerTerms> {
    let mut terms = RegularizerTerms::default();
    for m in model.masks() {
        if reg.p != 0.0 {
            terms.roughness += mask_roughness(&m.phase, reg.mode);
        }
        if reg.q != 0.0 {
            terms.intra_block += intra_block_variance(&m.phase, reg.block_size)?;
        }
    }
    Ok(terms)
}

/// `p * sum R(W_l) + q * sum R_intra(W_l)`.
pub fn regularizer_value(model: &DonnModel, reg: &Regularization) -> Result<f64> {
    let t = regularizer_terms(model, reg)?;
    Ok(reg.p * t.roughness + reg.q * t.intra_block)
}

pub fn regularizer_grad(model: &DonnModel, reg: &Regularization) -> Result<GradientSet> {
    let mut out = GradientSet::zeros_like(model);
    for (g, m) in out.layers.iter_mut().zip(model.masks()) {
        if reg.p != 0.0 {
            g.scaled_add(reg.p, &roughness_grad(&m.phase, reg.mode));
        }
        if reg.q != 0.0 {
            g.scaled_add(reg.q, &intra_block_grad(&m.phase, reg.block_size)?);
        }
    }
    Ok(out)
}

/// Mean data loss and mean gradient over a batch, reduced in sample order.
pub fn batch_data_grad<'a, I>(model: &DonnModel, samples: I) -> Result<(f64, GradientSet)>
where
    I: IntoIterator<Item = (&'a ComplexField, usize)>,
{
    let mut total = 0.0;
    let mut grad = GradientSet::zeros_like(model);
    let mut count = 0usize;
    for (input, label) in samples {
        let (sums, tape) = forward_with_tape(model, input)?;
        total += data_loss(&sums, label)?;
        let g = backward(&tape, model, label)?;
        grad.add_scaled(&g, 1.0);
        count += 1;
    }
    if count == 0 {
        return Err(DonnError::InvalidArgument("empty batch".into()));
    }
    grad.scale(1.0 / count as f64);
    Ok((total / count as f64, grad))
}

/// Mean data loss over samples plus the regularizers.
pub fn objective<'a, I>(model: &DonnModel, samples: I, reg: &Regularization) -> Result<f64>
where
    I: IntoIterator<Item = (&'a ComplexField, usize)>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for (input, label) in samples {
        total += sample_loss(model, input, label)?;
        count += 1;
    }
    if count == 0 {
        return Err(DonnError::InvalidArgument("empty batch".into()));
    }
    Ok(total / count as f64 + regularizer_value(model, reg)?)
}

/// Gradient of [`objective`]: batch data gradient plus regularizer gradients.
pub fn objective_grad<'a, I>(model: &DonnModel, samples: I, reg: &Regularization) -> Result<(f64, GradientSet)>
where
    I: IntoIterator<Item = (&'a ComplexField, usize)>,
{
    let (loss, mut grad) = batch_data_grad(model, samples)?;
    grad.add_scaled(&regularizer_grad(model, reg)?, 1.0);
    Ok((loss + regularizer_value(model, reg)?, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{forward, DetectorLayout, Geometry, PhaseMask, Region};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_model(n: usize, depth: usize, seed: u64, layout: DetectorLayout) -> DonnModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Geometry::new(n, 36e-6, 532e-9, 0.004).unwrap();
        let masks = (0..depth)
            .map(|_| PhaseMask::from_phase(Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..2.0 * PI))).unwrap())
            .collect();
        DonnModel::with_masks(g, masks, layout, false).unwrap()
    }

    fn random_input(model: &DonnModel, seed: u64) -> ComplexField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = model.geometry().n;
        let data = Array2::from_shape_fn((n, n), |_| Complex64::new(rng.gen_range(0.0..1.0), 0.0));
        let f = ComplexField::new(*model.geometry(), data).unwrap();
        let p = f.power();
        f.scaled(Complex64::new(3.0 / p.sqrt(), 0.0))
    }

    fn tiny_layout() -> DetectorLayout {
        let regions = (0..10)
            .map(|c| Region {
                row0: c / 4,
                col0: c % 4,
                height: 1,
                width: 1,
            })
            .collect();
        DetectorLayout::new(regions, 4).unwrap()
    }

    #[test]
    fn tape_sums_equal_forward() {
        let m = random_model(16, 3, 1, DetectorLayout::even(16).unwrap());
        let x = random_input(&m, 2);
        let (sums, tape) = forward_with_tape(&m, &x).unwrap();
        assert_eq!(sums, forward(&m, &x).unwrap().sums);
        assert_eq!(tape.arrived.len(), 3);
        let (zs, zt) = forward_with_tape(&m, &ComplexField::zeros(*m.geometry())).unwrap();
        assert!(zs.iter().all(|&v| v == 0.0));
        assert!(zt.arrived.iter().all(|f| f.power() == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences_8x8() {
        for seed in 0..4 {
            let m = random_model(8, 2, seed, DetectorLayout::even(8).unwrap());
            let x = random_input(&m, 100 + seed);
            let (_, tape) = forward_with_tape(&m, &x).unwrap();
            let g = backward(&tape, &m, (seed as usize) % 10).unwrap();
            let fd = finite_diff_grad(&m, &x, (seed as usize) % 10, 1e-6).unwrap();
            let err = g.max_rel_err(&fd);
            assert!(err <= 1e-5, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn backward_matches_finite_differences_4x4_single_layer() {
        let m = random_model(4, 1, 9, tiny_layout());
        let x = random_input(&m, 10);
        let (_, tape) = forward_with_tape(&m, &x).unwrap();
        let g = backward(&tape, &m, 3).unwrap();
        let fd = finite_diff_grad(&m, &x, 3, 1e-6).unwrap();
        assert!(g.max_rel_err(&fd) <= 1e-5);
    }

    #[test]
    fn finite_difference_error_shrinks_quadratically() {
        let m = random_model(4, 1, 3, tiny_layout());
        let x = random_input(&m, 4);
        let (_, tape) = forward_with_tape(&m, &x).unwrap();
        let g = backward(&tape, &m, 5).unwrap();
        let e1 = finite_diff_grad(&m, &x, 5, 1e-2).unwrap().max_rel_err(&g);
        let e2 = finite_diff_grad(&m, &x, 5, 5e-3).unwrap().max_rel_err(&g);
        let ratio = e1 / e2;
        assert!(ratio > 3.0 && ratio < 5.0, "ratio {ratio}");
    }

    #[test]
    fn zero_input_gives_zero_gradients() {
        let m = random_model(4, 1, 1, tiny_layout());
        let zero = ComplexField::zeros(*m.geometry());
        let fd = finite_diff_grad(&m, &zero, 0, 1e-6).unwrap();
        assert_eq!(fd.max_abs(), 0.0);
        let (_, tape) = forward_with_tape(&m, &zero).unwrap();
        assert_eq!(backward(&tape, &m, 0).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn saturated_target_is_stationary() {
        // funnel essentially all light onto class 0 by scaling the input up
        let m = random_model(8, 1, 5, DetectorLayout::even(8).unwrap());
        let x = random_input(&m, 6);
        let (sums, _) = forward_with_tape(&m, &x).unwrap();
        let best = crate::field::predict(&sums).unwrap();
        let margin = sums[best] - sums.iter().enumerate().filter(|(c, _)| *c != best).map(|(_, v)| *v).fold(0.0, f64::max);
        let big = x.scaled(Complex64::new((1e4 / margin).sqrt(), 0.0));
        let (_, tape) = forward_with_tape(&m, &big).unwrap();
        let g = backward(&tape, &m, best).unwrap();
        assert!(g.norm() <= 1e-9, "norm {}", g.norm());
    }

    #[test]
    fn gradient_invariant_under_two_pi_shift() {
        let m = random_model(8, 2, 7, DetectorLayout::even(8).unwrap());
        let x = random_input(&m, 8);
        let mut shifted = m.clone();
        for mask in shifted.masks_mut() {
            mask.phase.mapv_inplace(|v| v + 2.0 * PI);
        }
        let (_, t1) = forward_with_tape(&m, &x).unwrap();
        let (_, t2) = forward_with_tape(&shifted, &x).unwrap();
        let g1 = backward(&t1, &m, 2).unwrap();
        let g2 = backward(&t2, &shifted, 2).unwrap();
        let diff = g1.layers.iter().zip(&g2.layers).flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max);
        assert!(diff <= 1e-10);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut m = random_model(8, 1, 1, DetectorLayout::even(8).unwrap());
        let x = random_input(&m, 2);
        let (_, tape) = forward_with_tape(&m, &x).unwrap();
        m.masks_mut()[0].phase[[0, 0]] += 0.1;
        assert!(matches!(backward(&tape, &m, 0), Err(DonnError::TapeInvalid { .. })));
    }

    #[test]
    fn backward_is_deterministic() {
        let m = random_model(8, 2, 3, DetectorLayout::even(8).unwrap());
        let x = random_input(&m, 3);
        let (_, tape) = forward_with_tape(&m, &x).unwrap();
        assert_eq!(backward(&tape, &m, 1).unwrap(), backward(&tape, &m, 1).unwrap());
    }

    #[test]
    fn regularized_objective_gradient_matches_finite_differences() {
        let m = random_model(8, 2, 11, DetectorLayout::even(8).unwrap());
        let xs: Vec<ComplexField> = (0..2).map(|s| random_input(&m, 50 + s)).collect();
        let batch: Vec<(&ComplexField, usize)> = xs.iter().zip([1usize, 6]).collect();
        let reg = Regularization {
            p: 1e-3,
            q: 2e-3,
            mode: NeighborMode::Eight,
            block_size: 4,
        };
        let (_, g) = objective_grad(&m, batch.iter().copied(), &reg).unwrap();
        let fd = finite_diff(&m, 1e-6, |mm| objective(mm, batch.iter().copied(), &reg)).unwrap();
        assert!(g.max_rel_err(&fd) <= 1e-5, "{}", g.max_rel_err(&fd));
    }

    #[test]
    fn padded_model_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let g = Geometry::new(8, 36e-6, 532e-9, 0.004).unwrap();
        let masks = (0..2)
            .map(|_| PhaseMask::from_phase(Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.0..2.0 * PI))).unwrap())
            .collect();
        let m = DonnModel::with_masks(g, masks, DetectorLayout::even(8).unwrap(), true).unwrap();
        let x = random_input(&m, 1);
        let (_, tape) = forward_with_tape(&m, &x).unwrap();
        let an = backward(&tape, &m, 4).unwrap();
        let fd = finite_diff_grad(&m, &x, 4, 1e-6).unwrap();
        assert!(an.max_rel_err(&fd) <= 1e-5);
    }
}
