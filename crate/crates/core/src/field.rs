//! Free-space optics: angular-spectrum propagation, phase modulation, the
//! propagate-then-modulate stage chain, detector readout and the
//! classification loss.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{s, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{DonnError, Result};
use crate::fft::Fft2;

/// Number of classes read out at the detector plane.
pub const NUM_CLASSES: usize = 10;

/// Grid and optical constants shared by every plane of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    /// Grid side length in pixels.
    pub n: usize,
    /// Pixel pitch in meters.
    pub pixel_pitch: f64,
    /// Wavelength in meters.
    pub wavelength: f64,
    /// Gap between consecutive planes in meters.
    pub distance: f64,
}

impl Geometry {
    pub fn new(n: usize, pixel_pitch: f64, wavelength: f64, distance: f64) -> Result<Self> {
        let g = Self {
            n,
            pixel_pitch,
            wavelength,
            distance,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.n % 2 != 0 {
            return Err(DonnError::InvalidGeometry(format!(
                "grid size must be even and >= 2, got {}",
                self.n
            )));
        }
        if !(self.pixel_pitch > 0.0 && self.pixel_pitch.is_finite()) {
            return Err(DonnError::InvalidGeometry(format!(
                "pixel pitch must be positive, got {}",
                self.pixel_pitch
            )));
        }
        if !(self.wavelength > 0.0 && self.wavelength.is_finite()) {
            return Err(DonnError::InvalidGeometry(format!(
                "wavelength must be positive, got {}",
                self.wavelength
            )));
        }
        if !(self.distance >= 0.0 && self.distance.is_finite()) {
            return Err(DonnError::InvalidGeometry(format!(
                "distance must be non-negative, got {}",
                self.distance
            )));
        }
        Ok(())
    }

    /// Physical side length of one plane.
    pub fn extent(&self) -> f64 {
        self.n as f64 * self.pixel_pitch
    }

    /// Same sampling grid (size, pitch, wavelength); distance may differ.
    pub fn same_grid(&self, other: &Geometry) -> bool {
        self.n == other.n && self.pixel_pitch == other.pixel_pitch && self.wavelength == other.wavelength
    }

    /// Full-scale system: 200x200 pixels of 36 um, 532 nm, 27.94 cm gaps.
    pub fn paper() -> Self {
        Self {
            n: 200,
            pixel_pitch: 36e-6,
            wavelength: 532e-9,
            distance: 0.2794,
        }
    }

    /// Desk-scale system with roughly the same Fresnel number as [`Geometry::paper`].
    pub fn desk() -> Self {
        Self {
            n: 64,
            pixel_pitch: 36e-6,
            wavelength: 532e-9,
            distance: 0.028,
        }
    }
}

/// Complex amplitudes on one plane, row-major `n x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    pub geometry: Geometry,
    pub data: Array2<Complex64>,
}

impl ComplexField {
    pub fn zeros(geometry: Geometry) -> Self {
        Self {
            geometry,
            data: Array2::zeros((geometry.n, geometry.n)),
        }
    }

    pub fn new(geometry: Geometry, data: Array2<Complex64>) -> Result<Self> {
        if data.dim() != (geometry.n, geometry.n) {
            return Err(DonnError::Dimension(format!(
                "field is {:?}, geometry expects {}x{}",
                data.dim(),
                geometry.n,
                geometry.n
            )));
        }
        if data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(DonnError::InvalidArgument("field contains non-finite values".into()));
        }
        Ok(Self { geometry, data })
    }

    /// Total power `sum |f|^2`.
    pub fn power(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn intensity(&self) -> Array2<f64> {
        self.data.mapv(|v| v.norm_sqr())
    }

    pub fn scaled(&self, factor: Complex64) -> Self {
        Self {
            geometry: self.geometry,
            data: self.data.mapv(|v| v * factor),
        }
    }
}

/// Spectral transfer function for one propagation distance.
///
/// Cloning is cheap: the transfer function and FFT plans are shared.
#[derive(Clone, Debug)]
pub struct PropagationKernel {
    geometry: Geometry,
    z: f64,
    padded: bool,
    /// Transfer function in natural `[ky][kx]`-major FFT order (size `m x m`).
    h: Arc<Array2<Complex64>>,
    /// Transposed copy pre-divided by `m^2`, consumed by [`Fft2::filter`].
    h_scaled_t: Arc<Vec<Complex64>>,
    fft: Arc<Fft2>,
}

/// FFT-order spatial frequency of bin `k` on an `m`-point grid with spacing `d`.
pub fn fft_frequency(k: usize, m: usize, d: f64) -> f64 {
    let signed = if k < m.div_ceil(2) { k as f64 } else { k as f64 - m as f64 };
    signed / (m as f64 * d)
}

/// Band-limited angular-spectrum kernel with circular convolution.
pub fn build_kernel(geometry: &Geometry, z: f64) -> Result<PropagationKernel> {
    PropagationKernel::new(geometry, z, false)
}

impl PropagationKernel {
    /// `padded = true` runs the transform on a `2n x 2n` zero-padded grid
    /// (linear instead of circular convolution).
    pub fn new(geometry: &Geometry, z: f64, padded: bool) -> Result<Self> {
        geometry.validate()?;
        if !(z >= 0.0 && z.is_finite()) {
            return Err(DonnError::InvalidGeometry(format!("propagation distance must be >= 0, got {z}")));
        }
        let m = if padded { 2 * geometry.n } else { geometry.n };
        let inv_lambda_sq = 1.0 / (geometry.wavelength * geometry.wavelength);
        let h = Array2::from_shape_fn((m, m), |(ky, kx)| {
            let fy = fft_frequency(ky, m, geometry.pixel_pitch);
            let fx = fft_frequency(kx, m, geometry.pixel_pitch);
            let f2 = fx * fx + fy * fy;
            if f2 <= inv_lambda_sq {
                let kz = (inv_lambda_sq - f2).sqrt();
                Complex64::from_polar(1.0, 2.0 * PI * z * kz)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        let fft = Arc::new(Fft2::new(m));
        Ok(Self::from_transfer(*geometry, z, padded, h, fft))
    }

    fn from_transfer(geometry: Geometry, z: f64, padded: bool, h: Array2<Complex64>, fft: Arc<Fft2>) -> Self {
        let m = h.nrows();
        let scale = 1.0 / (m * m) as f64;
        let h_scaled_t: Vec<Complex64> = h.t().iter().map(|v| v * scale).collect();
        Self {
            geometry,
            z,
            padded,
            h: Arc::new(h),
            h_scaled_t: Arc::new(h_scaled_t),
            fft,
        }
    }

    /// Kernel with `conj(H)`: the adjoint (and, on the propagating band, the
    /// inverse) of this propagation.
    pub fn conjugate(&self) -> Self {
        let h = self.h.mapv(|v| v.conj());
        Self::from_transfer(self.geometry, self.z, self.padded, h, Arc::clone(&self.fft))
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn is_padded(&self) -> bool {
        self.padded
    }

    /// Transfer function `H` indexed `[ky][kx]` in FFT order.
    pub fn transfer(&self) -> &Array2<Complex64> {
        &self.h
    }

    fn apply(&self, data: &Array2<Complex64>) -> Array2<Complex64> {
        let n = self.geometry.n;
        if !self.padded {
            let mut buf = data.as_standard_layout().into_owned();
            self.fft
                .filter(buf.as_slice_mut().expect("standard layout"), &self.h_scaled_t);
            return buf;
        }
        let m = 2 * n;
        let off = n / 2;
        let mut buf = Array2::<Complex64>::zeros((m, m));
        buf.slice_mut(s![off..off + n, off..off + n]).assign(data);
        self.fft
            .filter(buf.as_slice_mut().expect("standard layout"), &self.h_scaled_t);
        buf.slice(s![off..off + n, off..off + n]).to_owned()
    }
}

/// `iFFT(FFT(field) * H)`.
pub fn propagate(field: &ComplexField, kernel: &PropagationKernel) -> Result<ComplexField> {
    if !field.geometry.same_grid(&kernel.geometry) {
        return Err(DonnError::Dimension(format!(
            "field grid {:?} does not match kernel grid {:?}",
            field.geometry, kernel.geometry
        )));
    }
    Ok(ComplexField {
        geometry: field.geometry,
        data: kernel.apply(&field.data),
    })
}

/// Diffractive layer phases. `block_mask`, when present, pins whole blocks to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseMask {
    pub phase: Array2<f64>,
    pub block_mask: Option<BlockMask>,
}

/// Which `b x b` blocks of a mask are forced to zero phase.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    pub block_size: usize,
    /// `true` = block forced to phase 0.
    pub zeroed: Array2<bool>,
}

impl BlockMask {
    pub fn zeroed_count(&self) -> usize {
        self.zeroed.iter().filter(|&&z| z).count()
    }

    pub fn covers(&self, i: usize, j: usize) -> bool {
        self.zeroed[[i / self.block_size, j / self.block_size]]
    }
}

impl PhaseMask {
    pub fn zeros(n: usize) -> Self {
        Self {
            phase: Array2::zeros((n, n)),
            block_mask: None,
        }
    }

    pub fn from_phase(phase: Array2<f64>) -> Result<Self> {
        if phase.nrows() != phase.ncols() {
            return Err(DonnError::Dimension(format!("phase mask must be square, got {:?}", phase.dim())));
        }
        if phase.iter().any(|v| !v.is_finite()) {
            return Err(DonnError::InvalidArgument("phase mask contains non-finite values".into()));
        }
        Ok(Self {
            phase,
            block_mask: None,
        })
    }

    pub fn n(&self) -> usize {
        self.phase.nrows()
    }

    /// Attach a block mask and zero every covered pixel.
    pub fn set_block_mask(&mut self, mask: BlockMask) -> Result<()> {
        let n = self.n();
        let b = mask.block_size;
        if b == 0 || n % b != 0 || mask.zeroed.dim() != (n / b, n / b) {
            return Err(DonnError::Partition { n, block: b });
        }
        self.block_mask = Some(mask);
        self.enforce_block_mask();
        Ok(())
    }

    pub fn enforce_block_mask(&mut self) {
        if let Some(bm) = &self.block_mask {
            let b = bm.block_size;
            for ((bi, bj), &z) in bm.zeroed.indexed_iter() {
                if z {
                    self.phase.slice_mut(s![bi * b..(bi + 1) * b, bj * b..(bj + 1) * b]).fill(0.0);
                }
            }
        }
    }

    /// Every pixel inside a masked block is exactly 0, or exactly 2π after
    /// smoothing (same transmission).
    pub fn satisfies_block_mask(&self) -> bool {
        match &self.block_mask {
            None => true,
            Some(bm) => self
                .phase
                .indexed_iter()
                .all(|((i, j), &v)| !bm.covers(i, j) || v == 0.0 || v == std::f64::consts::TAU),
        }
    }

    /// Maps every phase into `[0, 2π]`; the transmission is unchanged up to rounding.
    pub fn wrap(&mut self) {
        self.phase.mapv_inplace(|v| v.rem_euclid(std::f64::consts::TAU));
    }

    /// Maps every phase into `[-π, π]`, so magnitudes measure the circular
    /// distance from zero phase.
    pub fn wrap_centered(&mut self) {
        use std::f64::consts::TAU;
        self.phase.mapv_inplace(|v| v - TAU * (v / TAU).round());
    }
}

/// `field * exp(i * phase)` pixelwise.
pub fn modulate(field: &ComplexField, mask: &PhaseMask) -> Result<ComplexField> {
    if mask.phase.dim() != field.data.dim() {
        return Err(DonnError::Dimension(format!(
            "mask {:?} does not match field {:?}",
            mask.phase.dim(),
            field.data.dim()
        )));
    }
    let mut out = field.data.clone();
    out.zip_mut_with(&mask.phase, |v, &p| *v *= Complex64::cis(p));
    Ok(ComplexField {
        geometry: field.geometry,
        data: out,
    })
}

/// One propagate-then-modulate stage.
pub fn diff_mod(field: &ComplexField, mask: &PhaseMask, kernel: &PropagationKernel) -> Result<ComplexField> {
    modulate(&propagate(field, kernel)?, mask)
}

/// Axis-aligned detector rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    fn overlaps(&self, o: &Region) -> bool {
        self.row0 < o.row0 + o.height
            && o.row0 < self.row0 + self.height
            && self.col0 < o.col0 + o.width
            && o.col0 < self.col0 + self.width
    }
}

/// One detector region per class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorLayout {
    regions: Vec<Region>,
}

impl DetectorLayout {
    /// Validates: one region per class, equal square non-empty regions,
    /// in bounds and pairwise disjoint.
    pub fn new(regions: Vec<Region>, n: usize) -> Result<Self> {
        if regions.len() != NUM_CLASSES {
            return Err(DonnError::InvalidGeometry(format!(
                "detector layout needs {NUM_CLASSES} regions, got {}",
                regions.len()
            )));
        }
        let size = regions[0].height;
        for (c, r) in regions.iter().enumerate() {
            if r.height == 0 || r.height != r.width || r.height != size {
                return Err(DonnError::InvalidGeometry(format!(
                    "region {c} must be a non-empty {size}x{size} square, got {}x{}",
                    r.height, r.width
                )));
            }
            if r.row0 + r.height > n || r.col0 + r.width > n {
                return Err(DonnError::InvalidGeometry(format!("region {c} extends past the {n}x{n} grid")));
            }
            for (d, o) in regions.iter().enumerate().skip(c + 1) {
                if r.overlaps(o) {
                    return Err(DonnError::InvalidGeometry(format!("regions {c} and {d} overlap")));
                }
            }
        }
        Ok(Self { regions })
    }

    /// Two rows of five square regions of side `max(1, n/10)`, centered on
    /// rows `n/3`, `2n/3` and columns `n(2k+1)/10`.
    pub fn even(n: usize) -> Result<Self> {
        let size = (n / 10).max(1);
        let rows = [n / 3, 2 * n / 3];
        let regions = rows
            .iter()
            .flat_map(|&rc| {
                (0..5).map(move |k| {
                    let cc = n * (2 * k + 1) / 10;
                    Region {
                        row0: rc.saturating_sub(size / 2),
                        col0: cc.saturating_sub(size / 2),
                        height: size,
                        width: size,
                    }
                })
            })
            .collect();
        Self::new(regions, n)
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn sums(&self, intensity: &Array2<f64>) -> [f64; NUM_CLASSES] {
        let mut out = [0.0; NUM_CLASSES];
        for (o, r) in out.iter_mut().zip(&self.regions) {
            *o = intensity
                .slice(s![r.row0..r.row0 + r.height, r.col0..r.col0 + r.width])
                .sum();
        }
        out
    }
}

/// A stack of phase masks with a shared propagation kernel and detector layout.
#[derive(Clone, Debug)]
pub struct DonnModel {
    geometry: Geometry,
    masks: Vec<PhaseMask>,
    layout: DetectorLayout,
    kernel: PropagationKernel,
    adjoint: PropagationKernel,
    revision: u64,
}

impl DonnModel {
    /// Model with `depth` all-zero masks.
    pub fn new(geometry: Geometry, depth: usize, layout: DetectorLayout) -> Result<Self> {
        Self::with_masks(geometry, vec![PhaseMask::zeros(geometry.n); depth], layout, false)
    }

    pub fn with_masks(geometry: Geometry, masks: Vec<PhaseMask>, layout: DetectorLayout, padded: bool) -> Result<Self> {
        geometry.validate()?;
        if masks.is_empty() {
            return Err(DonnError::InvalidArgument("model needs at least one layer".into()));
        }
        for (l, m) in masks.iter().enumerate() {
            if m.phase.dim() != (geometry.n, geometry.n) {
                return Err(DonnError::Dimension(format!(
                    "mask {l} is {:?}, geometry expects {}x{}",
                    m.phase.dim(),
                    geometry.n,
                    geometry.n
                )));
            }
        }
        for r in layout.regions() {
            if r.row0 + r.height > geometry.n || r.col0 + r.width > geometry.n {
                return Err(DonnError::InvalidGeometry("detector layout exceeds grid".into()));
            }
        }
        let kernel = PropagationKernel::new(&geometry, geometry.distance, padded)?;
        let adjoint = kernel.conjugate();
        Ok(Self {
            geometry,
            masks,
            layout,
            kernel,
            adjoint,
            revision: 0,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn depth(&self) -> usize {
        self.masks.len()
    }

    pub fn masks(&self) -> &[PhaseMask] {
        &self.masks
    }

    /// Mutable access; invalidates any tape captured earlier.
    pub fn masks_mut(&mut self) -> &mut [PhaseMask] {
        self.revision += 1;
        &mut self.masks
    }

    pub fn layout(&self) -> &DetectorLayout {
        &self.layout
    }

    pub fn kernel(&self) -> &PropagationKernel {
        &self.kernel
    }

    /// `conj(H)` counterpart of [`DonnModel::kernel`].
    pub fn adjoint_kernel(&self) -> &PropagationKernel {
        &self.adjoint
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn is_padded(&self) -> bool {
        self.kernel.is_padded()
    }

    /// Copy of the phase arrays, one per layer.
    pub fn phases(&self) -> Vec<Array2<f64>> {
        self.masks.iter().map(|m| m.phase.clone()).collect()
    }
}

/// Detector-plane readout of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub intensity: Array2<f64>,
    pub sums: [f64; NUM_CLASSES],
}

/// Runs the stage chain, optionally keeping each pre-modulation field.
pub(crate) fn run_chain(
    model: &DonnModel,
    input: &ComplexField,
    mut keep: Option<&mut Vec<ComplexField>>,
) -> Result<ComplexField> {
    if !input.geometry.same_grid(&model.geometry) {
        return Err(DonnError::Dimension(format!(
            "input grid {:?} does not match model grid {:?}",
            input.geometry, model.geometry
        )));
    }
    let mut field = input.clone();
    for mask in &model.masks {
        let arrived = propagate(&field, &model.kernel)?;
        field = modulate(&arrived, mask)?;
        if let Some(k) = keep.as_deref_mut() {
            k.push(arrived);
        }
    }
    propagate(&field, &model.kernel)
}

/// Full forward model: `L` stages, a final hop to the detector, then readout.
pub fn forward(model: &DonnModel, input: &ComplexField) -> Result<Detection> {
    let out = run_chain(model, input, None)?;
    let intensity = out.intensity();
    let sums = model.layout.sums(&intensity);
    Ok(Detection { intensity, sums })
}

/// Index of the largest sum; ties go to the lowest index.
pub fn predict(sums: &[f64]) -> Result<usize> {
    if sums.iter().any(|v| v.is_nan()) {
        return Err(DonnError::InvalidIntensity);
    }
    let mut best = 0;
    for (i, &v) in sums.iter().enumerate().skip(1) {
        if v > sums[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Mean squared error between `softmax(sums)` and the one-hot target.
pub fn data_loss(sums: &[f64], target: usize) -> Result<f64> {
    if target >= sums.len() {
        return Err(DonnError::InvalidClass(target));
    }
    if sums.iter().any(|v| !v.is_finite()) {
        return Err(DonnError::InvalidIntensity);
    }
    let s = softmax(sums);
    let k = s.len() as f64;
    Ok(s.iter()
        .enumerate()
        .map(|(c, &v)| {
            let t = if c == target { 1.0 } else { 0.0 };
            (v - t) * (v - t)
        })
        .sum::<f64>()
        / k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(n: usize, z: f64) -> Geometry {
        Geometry::new(n, 36e-6, 532e-9, z).unwrap()
    }

    fn random_field(g: Geometry, seed: u64) -> ComplexField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((g.n, g.n), |_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        ComplexField::new(g, data).unwrap()
    }

    fn random_mask(n: usize, seed: u64) -> PhaseMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PhaseMask::from_phase(Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..2.0 * PI))).unwrap()
    }

    #[test]
    fn geometry_rejects_bad_values() {
        assert!(Geometry::new(3, 1e-6, 1e-6, 0.0).is_err());
        assert!(Geometry::new(0, 1e-6, 1e-6, 0.0).is_err());
        assert!(matches!(Geometry::new(8, 0.0, 1e-6, 0.0), Err(DonnError::InvalidGeometry(_))));
        assert!(matches!(Geometry::new(8, 1e-6, -1.0, 0.0), Err(DonnError::InvalidGeometry(_))));
        assert!(Geometry::new(8, 1e-6, 1e-6, -0.1).is_err());
    }

    #[test]
    fn zero_distance_kernel_is_identity_on_band() {
        let k = build_kernel(&geom(16, 0.0), 0.0).unwrap();
        for v in k.transfer() {
            assert!(*v == Complex64::new(1.0, 0.0) || *v == Complex64::new(0.0, 0.0));
        }
        let f = random_field(geom(16, 0.0), 1);
        let out = propagate(&f, &k).unwrap();
        for (a, b) in out.data.iter().zip(f.data.iter()) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn full_scale_kernel_has_unit_magnitude() {
        let g = Geometry::paper();
        let k = build_kernel(&g, g.distance).unwrap();
        let inv_l2 = 1.0 / (g.wavelength * g.wavelength);
        for ((ky, kx), v) in k.transfer().indexed_iter() {
            let fx = fft_frequency(kx, g.n, g.pixel_pitch);
            let fy = fft_frequency(ky, g.n, g.pixel_pitch);
            if fx * fx + fy * fy <= inv_l2 {
                assert!((v.norm() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn evanescent_band_is_zeroed() {
        // pitch below half a wavelength puts the grid corners beyond 1/lambda
        let g = Geometry::new(16, 200e-9, 532e-9, 1e-6).unwrap();
        let k = build_kernel(&g, g.distance).unwrap();
        let inv_l2 = 1.0 / (g.wavelength * g.wavelength);
        let mut evanescent = 0;
        for ((ky, kx), v) in k.transfer().indexed_iter() {
            let fx = fft_frequency(kx, g.n, g.pixel_pitch);
            let fy = fft_frequency(ky, g.n, g.pixel_pitch);
            if fx * fx + fy * fy > inv_l2 {
                evanescent += 1;
                assert_eq!(*v, Complex64::new(0.0, 0.0));
            } else {
                assert!((v.norm() - 1.0).abs() < 1e-12);
            }
        }
        assert!(evanescent > 0);
    }

    #[test]
    fn fft_frequency_ordering() {
        let f: Vec<f64> = (0..4).map(|k| fft_frequency(k, 4, 1.0)).collect();
        assert_eq!(f, vec![0.0, 0.25, -0.5, -0.25]);
    }

    #[test]
    fn constant_field_picks_up_plane_wave_phase() {
        let g = geom(8, 0.01);
        let k = build_kernel(&g, g.distance).unwrap();
        let c = Complex64::new(0.3, -0.7);
        let f = ComplexField::new(g, Array2::from_elem((8, 8), c)).unwrap();
        let out = propagate(&f, &k).unwrap();
        let expect = c * Complex64::cis(2.0 * PI * g.distance / g.wavelength);
        for v in out.data.iter() {
            assert!((v - expect).norm() < 1e-9);
            assert!((v.norm_sqr() - c.norm_sqr()).abs() < 1e-12);
        }
    }

    #[test]
    fn propagation_conserves_power() {
        let g = geom(32, 0.05);
        let k = build_kernel(&g, g.distance).unwrap();
        let f = random_field(g, 7);
        let out = propagate(&f, &k).unwrap();
        assert!((out.power() - f.power()).abs() / f.power() < 1e-10);
    }

    #[test]
    fn conjugate_kernel_inverts_propagation() {
        let g = geom(32, 0.05);
        let k = build_kernel(&g, g.distance).unwrap();
        let f = random_field(g, 3);
        let back = propagate(&propagate(&f, &k).unwrap(), &k.conjugate()).unwrap();
        let err = back.data.iter().zip(f.data.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-8, "max error {err}");
    }

    #[test]
    fn propagate_rejects_mismatched_grid() {
        let k = build_kernel(&geom(8, 0.01), 0.01).unwrap();
        let f = ComplexField::zeros(geom(16, 0.01));
        assert!(matches!(propagate(&f, &k), Err(DonnError::Dimension(_))));
    }

    #[test]
    fn modulation_identities() {
        let g = geom(8, 0.0);
        let f = random_field(g, 11);
        let zero = PhaseMask::zeros(8);
        assert_eq!(modulate(&f, &zero).unwrap(), f);

        let pi = PhaseMask::from_phase(Array2::from_elem((8, 8), PI)).unwrap();
        let neg = modulate(&f, &pi).unwrap();
        for (a, b) in neg.data.iter().zip(f.data.iter()) {
            assert!((a + b).norm() <= 1e-15 * (1.0 + b.norm()));
        }

        let m = random_mask(8, 2);
        let out = modulate(&f, &m).unwrap();
        for (a, b) in out.data.iter().zip(f.data.iter()) {
            assert!((a.norm_sqr() - b.norm_sqr()).abs() < 1e-14);
        }

        assert!(matches!(modulate(&f, &PhaseMask::zeros(4)), Err(DonnError::Dimension(_))));
    }

    #[test]
    fn diff_mod_matches_manual_composition() {
        let g = geom(16, 0.02);
        let k = build_kernel(&g, g.distance).unwrap();
        let f = random_field(g, 5);
        let m = random_mask(16, 6);
        let manual = modulate(&propagate(&f, &k).unwrap(), &m).unwrap();
        assert_eq!(diff_mod(&f, &m, &k).unwrap(), manual);

        let zero = ComplexField::zeros(g);
        assert!(diff_mod(&zero, &m, &k).unwrap().data.iter().all(|v| v.norm() == 0.0));

        let k0 = build_kernel(&g, 0.0).unwrap();
        let id = diff_mod(&f, &PhaseMask::zeros(16), &k0).unwrap();
        for (a, b) in id.data.iter().zip(f.data.iter()) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn even_layout_matches_formula() {
        let layout = DetectorLayout::even(200).unwrap();
        let r = layout.regions();
        assert_eq!(r[0], Region { row0: 56, col0: 10, height: 20, width: 20 });
        assert_eq!(r[9], Region { row0: 123, col0: 170, height: 20, width: 20 });
        let l64 = DetectorLayout::even(64).unwrap();
        assert!(l64.regions().iter().all(|r| r.height == 6));
        assert!(DetectorLayout::even(8).is_ok());
    }

    #[test]
    fn layout_rejects_overlap_and_out_of_bounds() {
        let mut regions: Vec<Region> = (0..10).map(|c| Region { row0: 0, col0: 2 * c, height: 2, width: 2 }).collect();
        assert!(DetectorLayout::new(regions.clone(), 20).is_ok());
        regions[1].col0 = 1;
        assert!(DetectorLayout::new(regions.clone(), 20).is_err());
        regions[1].col0 = 2;
        assert!(DetectorLayout::new(regions.clone(), 19).is_err());
        assert!(DetectorLayout::new(regions[..9].to_vec(), 20).is_err());
    }

    #[test]
    fn forward_of_zero_input_is_zero() {
        let g = geom(16, 0.01);
        let model = DonnModel::new(g, 3, DetectorLayout::even(16).unwrap()).unwrap();
        let d = forward(&model, &ComplexField::zeros(g)).unwrap();
        assert!(d.intensity.iter().all(|&v| v == 0.0));
        assert!(d.sums.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transparent_layer_equals_two_hops() {
        let g = geom(16, 0.01);
        let model = DonnModel::new(g, 1, DetectorLayout::even(16).unwrap()).unwrap();
        let f = random_field(g, 9);
        let d = forward(&model, &f).unwrap();
        let k2 = build_kernel(&g, 2.0 * g.distance).unwrap();
        let direct = propagate(&f, &k2).unwrap().intensity();
        for (a, b) in d.intensity.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_linearity() {
        let g = geom(16, 0.01);
        let masks = (0..2).map(|l| random_mask(16, 20 + l)).collect();
        let model = DonnModel::with_masks(g, masks, DetectorLayout::even(16).unwrap(), false).unwrap();
        let f = random_field(g, 4);
        let alpha = Complex64::new(0.6, -1.3);
        let a = forward(&model, &f).unwrap();
        let b = forward(&model, &f.scaled(alpha)).unwrap();
        for (x, y) in a.intensity.iter().zip(b.intensity.iter()) {
            assert!((x * alpha.norm_sqr() - y).abs() <= 1e-10 * y.abs().max(1e-12));
        }
    }

    #[test]
    fn predict_argmax_and_ties() {
        assert_eq!(predict(&[0., 0., 0., 0., 0., 0., 0., 5., 0., 0.]).unwrap(), 7);
        assert_eq!(predict(&[1.0; 10]).unwrap(), 0);
        assert_eq!(predict(&[1., 3., 2., 0., 0., 0., 0., 0., 0., 0.]).unwrap(), 1);
        let mut nan = [0.0; 10];
        nan[3] = f64::NAN;
        assert!(matches!(predict(&nan), Err(DonnError::InvalidIntensity)));
    }

    #[test]
    fn data_loss_examples() {
        assert!((data_loss(&[0.4; 10], 3).unwrap() - 0.09).abs() < 1e-15);
        // a huge margin saturates softmax to exactly one-hot
        let mut sums = [0.0; 10];
        sums[2] = 1e4;
        assert_eq!(data_loss(&sums, 2).unwrap(), 0.0);
        assert!(matches!(data_loss(&sums, 10), Err(DonnError::InvalidClass(10))));

        let base = [0.1, 0.5, 0.2, 0.9, 0.3, 0.0, 0.7, 0.4, 0.6, 0.8];
        let perm = [3, 1, 4, 9, 0, 2, 8, 5, 7, 6];
        let permuted: Vec<f64> = perm.iter().map(|&i| base[i]).collect();
        // position 2 of `permuted` holds base[4]
        let a = data_loss(&base, 4).unwrap();
        let b = data_loss(&permuted, 2).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn padded_kernel_runs_and_adjoint_matches() {
        let g = geom(8, 0.01);
        let k = PropagationKernel::new(&g, g.distance, true).unwrap();
        let f = random_field(g, 1);
        let h = random_field(g, 2);
        // <P f, h> == <f, P^H h>
        let pf = propagate(&f, &k).unwrap();
        let ph = propagate(&h, &k.conjugate()).unwrap();
        let lhs: Complex64 = pf.data.iter().zip(h.data.iter()).map(|(a, b)| a * b.conj()).sum();
        let rhs: Complex64 = f.data.iter().zip(ph.data.iter()).map(|(a, b)| a * b.conj()).sum();
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn wrap_keeps_transmission_and_zero_blocks() {
        let g = geom(8, 0.0);
        let f = random_field(g, 3);
        let mut m = PhaseMask::from_phase(Array2::from_shape_fn((8, 8), |(i, j)| (i as f64 - 4.0) * 2.5 + j as f64)).unwrap();
        m.set_block_mask(BlockMask {
            block_size: 4,
            zeroed: ndarray::array![[true, false], [false, false]],
        })
        .unwrap();
        let mut w = m.clone();
        w.wrap();
        assert!(w.phase.iter().all(|&v| (0.0..=2.0 * PI).contains(&v)));
        let mut c = m.clone();
        c.wrap_centered();
        assert!(c.phase.iter().all(|&v| (-PI..=PI).contains(&v)));
        assert_eq!(c.phase[[7, 0]], 7.5 - 2.0 * PI);
        for x in [&w, &c] {
            assert!(x.satisfies_block_mask());
            assert_eq!(x.phase[[0, 0]], 0.0);
        }
        let a = modulate(&f, &m).unwrap();
        for b in [modulate(&f, &w).unwrap(), modulate(&f, &c).unwrap()] {
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                assert!((x - y).norm() <= 1e-14);
            }
        }
    }
}
