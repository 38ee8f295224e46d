//! Upsampling of small grayscale images and amplitude encoding onto the
//! input plane.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;

use crate::dataio::idx::LabeledImageSet;
use crate::error::{DonnError, Result};
use crate::field::{ComplexField, Geometry};

/// Bilinear upsampling of a `rows x cols` byte image to `n x n`, corners
/// aligned, scaled to `[0, 1]`.
pub fn resize_bilinear(image: &[u8], rows: usize, cols: usize, n: usize) -> Result<Array2<f64>> {
    if image.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(DonnError::Dimension(format!(
            "image buffer of {} bytes is not {rows}x{cols}",
            image.len()
        )));
    }
    if n < rows || n < cols {
        return Err(DonnError::InvalidArgument(format!(
            "downscaling {rows}x{cols} to {n}x{n} is not supported"
        )));
    }
    let px = |r: usize, c: usize| image[r * cols + c] as f64 / 255.0;
    let coord = |i: usize, src: usize| -> (usize, usize, f64) {
        if n == 1 || src == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (src - 1) as f64 / (n - 1) as f64;
        let lo = (x.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, x - lo as f64)
    };
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        let (r0, r1, fr) = coord(i, rows);
        let (c0, c1, fc) = coord(j, cols);
        let top = px(r0, c0) * (1.0 - fc) + px(r0, c1) * fc;
        let bottom = px(r1, c0) * (1.0 - fc) + px(r1, c1) * fc;
        (top * (1.0 - fr) + bottom * fr).clamp(0.0, 1.0)
    }))
}

/// Amplitude encoding with zero phase, normalized to unit total power.
pub fn encode_input(image: &Array2<f64>, geometry: &Geometry) -> Result<ComplexField> {
    let power: f64 = image.iter().map(|v| v * v).sum();
    if !(power > 0.0) {
        return Err(DonnError::ZeroPower);
    }
    let scale = 1.0 / power.sqrt();
    ComplexField::new(*geometry, image.mapv(|v| Complex64::new(v * scale, 0.0)))
}

/// A labeled image set viewed through a model geometry; fields are encoded on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    set: Arc<LabeledImageSet>,
    geometry: Geometry,
    input_power: f64,
}

impl Dataset {
    pub fn new(set: LabeledImageSet, geometry: Geometry) -> Self {
        Self {
            set: Arc::new(set),
            geometry,
            input_power: 1.0,
        }
    }

    /// Total power of every encoded field (default 1).
    pub fn with_input_power(mut self, power: f64) -> Result<Self> {
        if !(power > 0.0 && power.is_finite()) {
            return Err(DonnError::InvalidArgument(format!("input power must be > 0, got {power}")));
        }
        self.input_power = power;
        Ok(self)
    }

    pub fn input_power(&self) -> f64 {
        self.input_power
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn images(&self) -> &LabeledImageSet {
        &self.set
    }

    pub fn label(&self, i: usize) -> usize {
        self.set.label(i)
    }

    pub fn field(&self, i: usize) -> Result<ComplexField> {
        let img = resize_bilinear(self.set.image(i), self.set.rows, self.set.cols, self.geometry.n)?;
        let field = encode_input(&img, &self.geometry)?;
        if self.input_power == 1.0 {
            Ok(field)
        } else {
            Ok(field.scaled(Complex64::new(self.input_power.sqrt(), 0.0)))
        }
    }

    /// Encoded `(field, label)` pairs for the given indices, in order.
    pub fn batch(&self, indices: &[usize]) -> Result<Vec<(ComplexField, usize)>> {
        indices.iter().map(|&i| Ok((self.field(i)?, self.label(i)))).collect()
    }
}
