//! Volumetric joint heatmap head and differentiable soft-argmax decoding.

use candle_core::{Device, Tensor};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};

#[derive(Debug, Clone)]
pub struct Heatmap3D {
    /// (B, J, D, h, w) logits
    pub volume: Tensor,
}

#[derive(Debug, Clone)]
pub struct Pose3D {
    /// (B, J, 3): x, y in crop pixels; z root-relative in mm.
    pub joints: Tensor,
    /// (B, J)
    pub confidence: Tensor,
}

#[derive(Debug, Clone)]
pub struct PoseNet3D {
    head: Conv2d,
    num_joints: usize,
    depth_bins: usize,
}

impl PoseNet3D {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        num_joints: usize,
        depth_bins: usize,
    ) -> Result<Self> {
        if num_joints == 0 || depth_bins == 0 {
            return Err(Error::Config("pose head needs positive joints and depth bins".into()));
        }
        Ok(Self {
            head: Conv2d::new(store, name, in_channels, num_joints * depth_bins, 1, 1, 0, true)?,
            num_joints,
            depth_bins,
        })
    }

    pub fn depth_bins(&self) -> usize {
        self.depth_bins
    }

    pub fn predict_heatmap3d(&self, f: &FeatureMap) -> Result<Heatmap3D> {
        let (b, _, h, w) = f.data.dims4()?;
        let y = self.head.forward(&f.data)?;
        Ok(Heatmap3D {
            volume: y.reshape((b, self.num_joints, self.depth_bins, h, w))?,
        })
    }
}

/// Grid coordinates per flattened cell (D·h·w, 3) in depth-major order.
fn cell_coordinates(
    d: usize,
    h: usize,
    w: usize,
    stride: f64,
    depth_range: f64,
    device: &Device,
) -> candle_core::Result<Tensor> {
    let mut out = Vec::with_capacity(d * h * w * 3);
    for k in 0..d {
        let z = if d > 1 {
            (k as f64 / (d - 1) as f64 - 0.5) * 2.0 * depth_range
        } else {
            0.0
        };
        for r in 0..h {
            for c in 0..w {
                out.push((c as f64 + 0.5) * stride);
                out.push((r as f64 + 0.5) * stride);
                out.push(z);
            }
        }
    }
    Tensor::from_vec(out, (d * h * w, 3), device)
}

/// Per-joint softmax over all cells, then the expected cell coordinate.
/// Confidence is the maximum normalized probability.
pub fn soft_argmax3d(heatmap: &Heatmap3D, stride: usize, depth_range: f64) -> Result<Pose3D> {
    if !(depth_range > 0.0) {
        return Err(Error::Config(format!("depth_range must be positive, got {depth_range}")));
    }
    let (b, j, d, h, w) = heatmap.volume.dims5()?;
    let flat = heatmap.volume.reshape((b, j, d * h * w))?;
    let max = flat.max_keepdim(2)?.detach();
    let e = flat.broadcast_sub(&max)?.exp()?;
    let prob = e.broadcast_div(&e.sum_keepdim(2)?)?;
    let grid = cell_coordinates(d, h, w, stride as f64, depth_range, flat.device())?
        .to_dtype(flat.dtype())?;
    let joints = prob.broadcast_matmul(&grid)?;
    let confidence = prob.max(2)?;
    Ok(Pose3D { joints, confidence })
}
