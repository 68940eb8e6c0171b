//! Adam over candle variables.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use super::config::AdamConfig;
use crate::error::Result;

pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    config: AdamConfig,
    step: i32,
}

impl Adam {
    pub fn new(vars: Vec<Var>, config: AdamConfig) -> Result<Self> {
        let m = vars
            .iter()
            .map(|v| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            v: m.clone(),
            m,
            vars,
            config,
            step: 0,
        })
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One bias-corrected update. Variables without a gradient keep their
    /// value and moments.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for ((var, m), v) in self.vars.iter().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = &g.detach();
            *m = ((&*m * beta1)? + (g * (1.0 - beta1))?)?;
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let denom = ((&*v / c2)?.sqrt()? + eps)?;
            let update = ((&*m / c1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            *m = m.detach();
            *v = v.detach();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let x = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![x.clone()], AdamConfig::default()).unwrap();
        let loss = (x.as_tensor() * Tensor::new(&[3.0f64, -1.0, 0.0], &Device::Cpu).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        opt.step(&loss.backward().unwrap(), 0.1).unwrap();
        let got: Vec<f64> = x.as_tensor().to_vec1().unwrap();
        assert!((got[0] - 0.9).abs() < 1e-6);
        assert!((got[1] - -1.9).abs() < 1e-6);
        assert_eq!(got[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let x = Var::from_tensor(&Tensor::full(5f32, 4, &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![x.clone()], AdamConfig::default()).unwrap();
        for _ in 0..500 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap(), 0.05).unwrap();
        }
        let max = x.as_tensor().abs().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap();
        assert!(max.to_scalar::<f64>().unwrap() < 1e-2);
        assert_eq!(opt.steps(), 500);
    }
}
