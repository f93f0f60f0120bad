use crate::tensor::Tensor;

use super::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for one parameter list; buffers follow parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    shapes: Vec<Vec<usize>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
        }
    }

    pub fn first_moment(&self, i: usize) -> &[f32] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f32] {
        &self.v[i]
    }
}

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter changes, so a failed step leaves parameters and state intact.
pub fn adam_step(params: &mut [(String, &mut Tensor)], grads: &[Option<&[f32]>], state: &mut AdamState) -> Result<()> {
    if params.len() != state.shapes.len() || grads.len() != params.len() {
        return Err(TrainError::Shape(format!(
            "optimizer tracks {} parameters, got {} parameters and {} gradients",
            state.shapes.len(),
            params.len(),
            grads.len()
        )));
    }
    for (i, ((name, p), g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != state.shapes[i].as_slice() {
            return Err(TrainError::Shape(format!(
                "parameter {name} has shape {:?}, optimizer expects {:?}",
                p.shape(),
                state.shapes[i]
            )));
        }
        let g = g.ok_or_else(|| TrainError::MissingGradient(name.clone()))?;
        if g.len() != p.numel() {
            return Err(TrainError::Shape(format!("gradient for {name} has {} values, expected {}", g.len(), p.numel())));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - (beta1 as f64).powi(t);
    let c2 = 1.0 - (beta2 as f64).powi(t);
    let step_size = (lr as f64 / c1) as f32;
    let c2_sqrt = c2.sqrt() as f32;
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let g = g.expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            *w -= step_size * *mi / (vi.sqrt() / c2_sqrt + eps);
        }
    }
    Ok(())
}
