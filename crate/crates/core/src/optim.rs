//! Bias-corrected Adam without weight decay.

use ndarray::Array2;

use crate::model::ModelParams;
use crate::objective::GradientSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators, one pair per parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Array2<f64>>,
    pub second_moment: Vec<Array2<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &ModelParams) -> Self {
        let d = model.dim();
        let zeros = || model.param_kinds().iter().map(|_| Array2::zeros((d, d))).collect();
        Self {
            first_moment: zeros(),
            second_moment: zeros(),
            step: 0,
        }
    }
}

/// Applies one Adam update to `params` in place.
pub fn adam_step(state: &mut OptimizerState, params: &mut ModelParams, grads: &GradientSet, config: &AdamConfig) {
    assert_eq!(
        state.first_moment.len(),
        grads.entries.len(),
        "optimizer state does not match gradient set"
    );
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (i, (kind, g)) in grads.entries.iter().enumerate() {
        let p = params.param_mut(*kind);
        assert_eq!(p.dim(), g.dim(), "gradient shape mismatch for {}", kind.name());
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        ndarray::Zip::from(p)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = config.beta1 * *m + (1.0 - config.beta1) * g;
                *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
            });
    }
}
