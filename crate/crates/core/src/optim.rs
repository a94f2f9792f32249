//! Adam optimizer state and the reduce-on-plateau learning-rate schedule.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// Adam moment-decay and stability constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates for one tensor.
#[derive(Debug, Clone)]
pub struct Moments<T> {
    pub m: T,
    pub v: T,
}

impl Moments<Array2<f64>> {
    fn like2(shape: (usize, usize)) -> Self {
        Self {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
        }
    }
}

impl Moments<Array1<f64>> {
    fn like1(len: usize) -> Self {
        Self {
            m: Array1::zeros(len),
            v: Array1::zeros(len),
        }
    }
}

/// Optimizer state for every parameter group of the meta layer plus head.
/// Frozen groups keep zero state and are never read.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub projections: Vec<Moments<Array2<f64>>>,
    pub biases: Vec<Moments<Array1<f64>>>,
    pub alphas: Moments<Array1<f64>>,
    pub attention: Option<(Moments<Array1<f64>>, Moments<f64>)>,
    pub head_weight: Moments<Array2<f64>>,
    pub head_bias: Moments<Array1<f64>>,
}

impl AdamState {
    pub fn new(
        projection_shapes: &[(usize, usize)],
        bias_len: usize,
        facet_count: usize,
        attention_len: Option<usize>,
        head_shape: (usize, usize),
    ) -> Self {
        Self {
            step: 0,
            projections: projection_shapes
                .iter()
                .map(|&s| Moments::like2(s))
                .collect(),
            biases: (0..facet_count).map(|_| Moments::like1(bias_len)).collect(),
            alphas: Moments::like1(facet_count),
            attention: attention_len.map(|len| {
                (
                    Moments::like1(len),
                    Moments { m: 0.0, v: 0.0 },
                )
            }),
            head_weight: Moments::like2(head_shape),
            head_bias: Moments::like1(head_shape.0),
        }
    }
}

/// One Adam update over a flat slice of parameters.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    cfg: &AdamConfig,
    step: u64,
) {
    debug_assert_eq!(params.len(), grads.len());
    let bias1 = 1.0 - cfg.beta1.powi(step as i32);
    let bias2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Reduce-on-plateau schedule: when the validation metric (higher is better)
/// fails to strictly improve on the best seen for `patience` consecutive
/// epochs, the learning rate is multiplied by `factor` and the stale counter
/// resets. Any strict improvement also resets the counter.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    factor: f64,
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(initial_lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr: initial_lr,
            factor,
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's validation metric. Returns true when the learning
    /// rate was reduced by this observation.
    pub fn observe(&mut self, metric: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some(best) => metric > best,
        };
        if improved {
            self.best = Some(metric);
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.lr *= self.factor;
            self.stale = 0;
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_drops_after_patience_without_improvement() {
        // Metrics 0.5, 0.5, 0.5 with patience 2: the drop lands on the third
        // observation.
        let mut s = PlateauSchedule::new(0.001, 0.1, 2);
        assert!(!s.observe(0.5));
        assert!(!s.observe(0.5));
        assert!(s.observe(0.5));
        assert!((s.lr() - 0.0001).abs() < 1e-18);
    }

    #[test]
    fn plateau_untouched_by_strict_improvement() {
        let mut s = PlateauSchedule::new(0.001, 0.1, 2);
        for m in [0.1, 0.2, 0.3, 0.4] {
            assert!(!s.observe(m));
        }
        assert_eq!(s.lr(), 0.001);
    }

    #[test]
    fn plateau_counter_resets_on_improvement() {
        // Metrics 0.5, 0.6, 0.6, 0.6: the drop lands on the fourth
        // observation.
        let mut s = PlateauSchedule::new(0.001, 0.1, 2);
        assert!(!s.observe(0.5));
        assert!(!s.observe(0.6));
        assert!(!s.observe(0.6));
        assert!(s.observe(0.6));
        assert!((s.lr() - 0.0001).abs() < 1e-18);
    }

    #[test]
    fn adam_zero_grad_zero_state_is_a_no_op() {
        let mut p = [1.5, -2.5];
        let mut m = [0.0, 0.0];
        let mut v = [0.0, 0.0];
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 0.01, &AdamConfig::default(), 1);
        assert_eq!(p, [1.5, -2.5]);
    }

    #[test]
    fn adam_first_step_moves_by_about_lr() {
        let mut p = [0.0];
        let mut m = [0.0];
        let mut v = [0.0];
        adam_update(&mut p, &[0.3], &mut m, &mut v, 0.01, &AdamConfig::default(), 1);
        // With bias correction the first step is lr * g / (|g| + eps').
        assert!((p[0] + 0.01).abs() < 1e-6);
    }
}
