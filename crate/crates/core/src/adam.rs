//! Adam optimizer with bias correction.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Per-parameter-group Adam moment state.
///
/// Moment accumulators are allocated lazily on the first step and then
/// checked against parameter shapes on every subsequent step.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta_moments: (f64, f64),
    pub epsilon: f64,
    pub step_count: u64,
    first_moments: Vec<Vec<f64>>,
    second_moments: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta_moments: (0.9, 0.999),
            epsilon: 1e-8,
            step_count: 0,
            first_moments: Vec::new(),
            second_moments: Vec::new(),
        }
    }

    /// Rebuild from checkpointed fields.
    pub fn restore(
        learning_rate: f64,
        beta_moments: (f64, f64),
        epsilon: f64,
        step_count: u64,
        first_moments: Vec<Vec<f64>>,
        second_moments: Vec<Vec<f64>>,
    ) -> Self {
        AdamState {
            learning_rate,
            beta_moments,
            epsilon,
            step_count,
            first_moments,
            second_moments,
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first_moments, &self.second_moments)
    }

    /// One bias-corrected update over a parameter group. A `None` gradient
    /// means the loss did not touch that parameter this step; it is treated
    /// as zero (moments still decay).
    pub fn adam_step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&[f64]>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(CoreError::shape(format!(
                "adam_step: {} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.first_moments.is_empty() {
            self.first_moments = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second_moments = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.first_moments.len() != params.len() {
            return Err(CoreError::shape(format!(
                "adam_step: state holds {} groups, got {} params",
                self.first_moments.len(),
                params.len()
            )));
        }
        for (idx, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            if let Some(g) = g {
                if g.len() != p.numel() {
                    return Err(CoreError::shape(format!(
                        "adam_step: param {} has {} entries, grad has {}",
                        idx,
                        p.numel(),
                        g.len()
                    )));
                }
                if g.iter().any(|x| x.is_nan()) {
                    return Err(CoreError::numerical(format!(
                        "adam_step: NaN gradient in parameter {} at step {}",
                        idx,
                        self.step_count + 1
                    )));
                }
            }
        }

        self.step_count += 1;
        let (b1, b2) = self.beta_moments;
        let bc1 = 1.0 - b1.powi(self.step_count as i32);
        let bc2 = 1.0 - b2.powi(self.step_count as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.first_moments.iter_mut().zip(self.second_moments.iter_mut()))
        {
            let data = p.data_mut();
            for k in 0..data.len() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                data[k] -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
