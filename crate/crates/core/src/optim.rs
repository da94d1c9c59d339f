//! First-order optimizers over [`Params`].

use nalgebra::DMatrix;

use crate::config::OptimizerKind;
use crate::encoder::Params;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer hyperparameters and moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub grad_clip: f64,
    /// SGD velocity, or Adam first moment.
    pub first: Params,
    /// Adam second moment (zeros for SGD).
    pub second: Params,
    pub steps: u64,
}

/// `sqrt(Σ g²)` over every tensor.
pub fn global_norm(grads: &Params) -> f64 {
    grads.named().iter().map(|(_, g)| g.norm_squared()).sum::<f64>().sqrt()
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, momentum: f64, grad_clip: f64, like: &Params) -> Self {
        Self {
            kind,
            learning_rate,
            momentum,
            grad_clip,
            first: like.zeros_like(),
            second: like.zeros_like(),
            steps: 0,
        }
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        let norm = global_norm(grads);
        let scale = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        self.steps += 1;
        let lr = self.learning_rate;
        let g_all: Vec<&DMatrix<f64>> = grads.named().into_iter().map(|(_, g)| g).collect();
        let p_all = params.tensors_mut();
        let m_all = self.first.tensors_mut();
        let v_all = self.second.tensors_mut();
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, m), g) in p_all.into_iter().zip(m_all).zip(g_all) {
                    *m *= self.momentum;
                    *m += g * scale;
                    *p -= &*m * lr;
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, m), v), g) in p_all.into_iter().zip(m_all).zip(v_all).zip(g_all) {
                    for i in 0..p.len() {
                        let gi = g[i] * scale;
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> Params {
        let cfg = ModelConfig {
            input_dim: 3,
            hidden_dims: vec![2],
            num_classes: 2,
            head: Default::default(),
            pair_rule: Default::default(),
        };
        Params::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn ones_like(p: &Params) -> Params {
        p.map(|m| DMatrix::from_element(m.nrows(), m.ncols(), 1.0))
    }

    #[test]
    fn sgd_with_momentum_accumulates_velocity() {
        let mut p = params();
        let start = p.clone();
        let g = ones_like(&p);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.5, 0.0, &p);
        opt.step(&mut p, &g);
        opt.step(&mut p, &g);
        // displacement 0.1·1 + 0.1·1.5
        for ((_, a), (_, b)) in p.named().iter().zip(start.named()) {
            assert!((b - *a).iter().all(|d| (d - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn clipping_caps_the_update() {
        let mut p = params();
        let start = p.clone();
        let g = ones_like(&p);
        let norm = global_norm(&g);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1.0, 0.0, 1.0, &p);
        opt.step(&mut p, &g);
        let moved: f64 = p
            .named()
            .iter()
            .zip(start.named())
            .map(|((_, a), (_, b))| (*a - b).norm_squared())
            .sum::<f64>()
            .sqrt();
        assert!(norm > 1.0);
        assert!((moved - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = params();
        let start = p.clone();
        let g = ones_like(&p);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, 0.0, 0.0, &p);
        opt.step(&mut p, &g);
        for ((_, a), (_, b)) in p.named().iter().zip(start.named()) {
            assert!((b - *a).iter().all(|d| (d - 0.01).abs() < 1e-9));
        }
    }
}
