//! Square 2-D FFT built from planned 1-D row transforms.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Planned forward/inverse transforms for an `m x m` row-major grid.
#[derive(Clone)]
pub struct Fft2 {
    m: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fft2").field("m", &self.m).finish()
    }
}

impl Fft2 {
    pub fn new(m: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            m,
            forward: planner.plan_fft_forward(m),
            inverse: planner.plan_fft_inverse(m),
        }
    }

    pub fn size(&self) -> usize {
        self.m
    }

    /// In-place `iFFT2(FFT2(data) * spectrum)`.
    ///
    /// `spectrum_t` is the transfer function stored transposed (indexed
    /// `[ky][kx]`) and already divided by `m^2`; the column pass leaves the
    /// spectrum transposed, so only two transposes are needed per call.
    pub fn filter(&self, data: &mut [Complex64], spectrum_t: &[Complex64]) {
        let m = self.m;
        debug_assert_eq!(data.len(), m * m);
        debug_assert_eq!(spectrum_t.len(), m * m);
        let mut scratch =
            vec![Complex64::default(); self.forward.get_inplace_scratch_len().max(self.inverse.get_inplace_scratch_len())];

        self.forward.process_with_scratch(data, &mut scratch);
        transpose_in_place(data, m);
        self.forward.process_with_scratch(data, &mut scratch);

        for (v, h) in data.iter_mut().zip(spectrum_t) {
            *v *= *h;
        }

        self.inverse.process_with_scratch(data, &mut scratch);
        transpose_in_place(data, m);
        self.inverse.process_with_scratch(data, &mut scratch);
    }
}

fn transpose_in_place(data: &mut [Complex64], m: usize) {
    for r in 0..m {
        for c in (r + 1)..m {
            data.swap(r * m + c, c * m + r);
        }
    }
}
