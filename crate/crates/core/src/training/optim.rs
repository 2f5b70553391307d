use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments, one pair of buffers per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub hyper: AdamParams,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(hyper: AdamParams, params: &[&Tensor]) -> Self {
        Self {
            hyper,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// Applies one update from the gradients held by `params`, replacing each
    /// tensor with a fresh leaf. Missing gradients count as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor], names: &[String]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
            .collect();
        for (i, g) in grads.iter().enumerate() {
            if g.len() != self.m[i].len() {
                return Err(Error::shape("adam_step", &[self.m[i].len()], &[g.len()]));
            }
            if g.iter().any(|x| !x.is_finite()) {
                let name = names.get(i).map_or("<unnamed>", String::as_str);
                return Err(Error::Training(format!("non-finite gradient in {name}")));
            }
        }
        self.step += 1;
        let AdamParams {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = p.values().to_vec();
            for (j, x) in data.iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            **p = Tensor::param(data, p.shape())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{mul, sum};

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::param(vec![1.0, -2.0], &[2]).unwrap();
        let mut opt = OptimState::new(AdamParams::default(), &[&p]);
        opt.step(&mut [&mut p], &names(1)).unwrap();
        assert_eq!(p.values(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::param(vec![0.5, 0.5, 0.5], &[3]).unwrap();
        let c = Tensor::vector(vec![3.0, -0.01, 250.0]);
        sum(&mul(&p, &c).unwrap()).backward().unwrap();
        let mut opt = OptimState::new(AdamParams::default(), &[&p]);
        opt.step(&mut [&mut p], &names(1)).unwrap();
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + ε)
        for (x, g) in p.values().iter().zip(c.values()) {
            let expected = 0.5 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-15);
            assert!(((0.5 - x).abs() - 1e-3).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = Tensor::param(vec![1.0], &[1]).unwrap();
        let c = Tensor::vector(vec![f64::INFINITY]);
        sum(&mul(&p, &c).unwrap()).backward().unwrap();
        let mut opt = OptimState::new(AdamParams::default(), &[&p]);
        match opt.step(&mut [&mut p], &names(1)) {
            Err(Error::Training(msg)) => assert!(msg.contains("p0")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = Tensor::param(vec![0.1, 0.2], &[2]).unwrap();
            let mut opt = OptimState::new(AdamParams::default(), &[&p]);
            for _ in 0..3 {
                sum(&mul(&p, &p).unwrap()).backward().unwrap();
                opt.step(&mut [&mut p], &names(1)).unwrap();
            }
            p.values().to_vec()
        };
        assert_eq!(run(), run());
    }
}
