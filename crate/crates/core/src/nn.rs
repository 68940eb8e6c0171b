//! Minimal layer toolkit over candle: a seeded parameter store, conv,
//! linear and batch-normalization layers with running statistics.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    Normal(f64),
    /// Normal with std sqrt(2 / fan_in).
    Kaiming { fan_in: usize },
}

/// Named trainable parameters and non-trainable buffers, created in a
/// deterministic order from a seeded generator.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn values(&mut self, n: usize, init: Init) -> Vec<f64> {
        let std = match init {
            Init::Const(c) => return vec![c; n],
            Init::Normal(s) => s,
            Init::Kaiming { fan_in } => (2.0 / fan_in.max(1) as f64).sqrt(),
        };
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!("duplicate parameter '{name}'")));
        }
        let n = shape.iter().product();
        let data = self.values(n, init);
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.params.push((name.to_string(), var));
        Ok(out)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = Tensor::full(value, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.buffers.push((name.to_string(), var.clone()));
        Ok(var)
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named_params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn all(&self) -> impl Iterator<Item = &(String, Var)> {
        self.params.iter().chain(self.buffers.iter())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .all()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path).map_err(Error::from)
    }

    /// Overwrites every parameter and buffer in place; names and shapes must agree.
    pub fn load(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint weights not found"),
            ));
        }
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        let expected: usize = self.all().count();
        if loaded.len() != expected {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model expects {expected}",
                loaded.len()
            )));
        }
        for (name, var) in self.all() {
            let t = loaded
                .get(name)
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks tensor '{name}'")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "tensor '{name}' has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.param(
            &format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            Init::Kaiming { fan_in },
        )?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), &[out_ch], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight_init: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[out_dim, in_dim], weight_init)?,
            bias: store.param(&format!("{name}.bias"), &[out_dim], Init::Const(0.0))?,
        })
    }

    /// (B, in) -> (B, out)
    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

/// Batch normalization over the given dims, with per-element statistics
/// along the remaining (kept) dims. Running statistics are updated in
/// training mode with momentum 0.1.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Var,
    pub running_var: Var,
    reduce_dims: Vec<usize>,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    /// `stat_shape` is the keep-dim shape of the statistics, e.g.
    /// `[1, C, 1, 1]` for images or `[1, J, C]` for per-joint features.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        stat_shape: &[usize],
        reduce_dims: &[usize],
    ) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.gamma"), stat_shape, Init::Const(1.0))?,
            beta: store.param(&format!("{name}.beta"), stat_shape, Init::Const(0.0))?,
            running_mean: store.buffer(&format!("{name}.running_mean"), stat_shape, 0.0)?,
            running_var: store.buffer(&format!("{name}.running_var"), stat_shape, 1.0)?,
            reduce_dims: reduce_dims.to_vec(),
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn image(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Self::new(store, name, &[1, channels, 1, 1], &[0, 2, 3])
    }

    fn mean_over(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut m = x.clone();
        for &d in &self.reduce_dims {
            m = m.mean_keepdim(d)?;
        }
        Ok(m)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let (mean, var) = if train {
            let mean = self.mean_over(x)?;
            let var = self.mean_over(&x.broadcast_sub(&mean)?.sqr()?)?;
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (var.detach() * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().clone(),
                self.running_var.as_tensor().clone(),
            )
        };
        x.broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)
    }
}
