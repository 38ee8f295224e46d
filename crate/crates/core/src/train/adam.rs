use ndarray::Array2;

use crate::error::{DonnError, Result};

/// Bias-corrected Adam moments for a list of 2-D parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let m: Vec<Array2<f64>> = shapes.into_iter().map(Array2::zeros).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn like(params: &[Array2<f64>]) -> Self {
        Self::new(params.iter().map(|p| p.dim()))
    }
}

/// One Adam update of every parameter array in place.
pub fn adam_step<'a, P>(params: P, grads: &[Array2<f64>], state: &mut AdamState, lr: f64) -> Result<()>
where
    P: IntoIterator<Item = &'a mut Array2<f64>>,
{
    let params: Vec<&mut Array2<f64>> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(DonnError::Dimension(format!(
            "{} parameter arrays, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.dim() != g.dim() || p.dim() != m.dim() {
            return Err(DonnError::Dimension(format!(
                "parameter {:?} vs gradient {:?}",
                p.dim(),
                g.dim()
            )));
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
    Ok(())
}
