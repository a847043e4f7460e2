use super::tensor::Tensor;
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update over `params`, which must be passed in the same order on
    /// every call. Parameters without a gradient are only decayed.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() || params.iter().zip(&self.first).any(|(p, m)| p.len() != m.len()) {
            return Err(Error::dim("adamw_step", "parameter set changed between steps"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;

        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad().map(<[f64]>::to_vec);
            let data = p.data_mut();
            for x in data.iter_mut() {
                *x *= decay;
            }
            let Some(grad) = grad else { continue };
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

pub fn global_grad_norm(params: &[&mut Tensor]) -> f64 {
    params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients jointly so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(params: &mut [&mut Tensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Parameter(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = global_grad_norm(params);
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    Ok(norm)
}

pub fn zero_grads(params: &mut [&mut Tensor]) {
    params.iter_mut().for_each(|p| p.zero_grad());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_halves_when_norm_is_twice_max() {
        // norm sqrt(4*9) = 6
        let mut a = Tensor::vector(vec![0.0; 4]);
        a.set_grad(vec![3.0, -3.0, 3.0, -3.0]).unwrap();
        let mut params = [&mut a];
        let before = clip_global_norm(&mut params, 3.0).unwrap();
        assert_eq!(before, 6.0);
        assert_eq!(a.grad().unwrap(), &[1.5, -1.5, 1.5, -1.5]);
    }

    #[test]
    fn clip_is_noop_below_max() {
        let mut a = Tensor::vector(vec![0.0; 2]);
        a.set_grad(vec![0.3, 0.4]).unwrap();
        clip_global_norm(&mut [&mut a], 1.0).unwrap();
        assert_eq!(a.grad().unwrap(), &[0.3, 0.4]);
    }

    #[test]
    fn one_step_on_square_reduces_magnitude() {
        let mut x = Tensor::vector(vec![1.0]);
        x.set_grad(vec![2.0]).unwrap(); // d/dx x^2 at 1
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut [&mut x]).unwrap();
        let after = x.data()[0];
        assert!(after.abs() < 1.0);
        // First Adam step moves by lr * g / (|g| + eps).
        assert!((after - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-12);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut x = Tensor::vector(vec![2.0]);
        let mut opt = AdamW::new(0.5, 0.1);
        opt.step(&mut [&mut x]).unwrap();
        assert!((x.data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }
}
