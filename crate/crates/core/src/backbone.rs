//! Pose-guided feature extractor: an early convolution stage, fusion with
//! the 2D pose heatmaps, and a residual late stage producing F′.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, ParamStore};

/// Stride of the early feature map F relative to the crop.
pub const EARLY_STRIDE: usize = 4;
/// Stride of F′ relative to the crop.
pub const LATE_STRIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub early_channels: usize,
    /// Output channels per late stage; each stage halves the resolution.
    pub late_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub heatmap_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            early_channels: 32,
            late_channels: vec![64, 128],
            blocks_per_stage: 2,
            heatmap_channels: crate::joints::NUM_SUPERSET,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.early_channels == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Config("backbone channels and blocks must be positive".into()));
        }
        if self.late_channels.len() != 2 || self.late_channels.contains(&0) {
            return Err(Error::Config(
                "backbone needs exactly two late stages with positive widths".into(),
            ));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.late_channels.last().expect("validated")
    }
}

/// 2×2 stride-2 max-pool whose gradient goes to a single argmax per
/// window, also under ties. Candle's pooling op scales its gradient by
/// 1/4, so it is not used for training.
pub fn max_pool2x2(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (h2, w2) = (h / 2, w / 2);
    let windows = x
        .narrow(2, 0, 2 * h2)?
        .narrow(3, 0, 2 * w2)?
        .contiguous()?
        .reshape((b, c, h2, 2, w2, 2))?
        .permute((0, 1, 2, 4, 3, 5))?
        .contiguous()?
        .reshape((b, c, h2, w2, 4))?;
    let idx = windows.detach().argmax_keepdim(4)?;
    windows.gather(&idx, 4)?.squeeze(4)
}

#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// (B, C, h, w)
    pub data: Tensor,
    pub stride: usize,
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, stride, pad, false)?,
            bn: BatchNorm::image(store, &format!("{name}.bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, train)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    a: ConvBn,
    b: ConvBn,
    shortcut: Option<ConvBn>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || cin != cout {
            Some(ConvBn::new(store, &format!("{name}.down"), cin, cout, 1, stride, 0)?)
        } else {
            None
        };
        Ok(Self {
            a: ConvBn::new(store, &format!("{name}.a"), cin, cout, 3, stride, 1)?,
            b: ConvBn::new(store, &format!("{name}.b"), cout, cout, 3, 1, 1)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let y = self.a.forward(x, train)?.relu()?;
        let y = self.b.forward(&y, train)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x, train)?,
            None => x.clone(),
        };
        (y + skip)?.relu()
    }
}

#[derive(Debug, Clone)]
pub struct GuidedBackbone {
    config: BackboneConfig,
    stem: ConvBn,
    fuse: ConvBn,
    stages: Vec<ResBlock>,
}

impl GuidedBackbone {
    pub fn new(store: &mut ParamStore, name: &str, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let c = config.early_channels;
        let stem = ConvBn::new(store, &format!("{name}.stem"), 3, c, 7, 2, 3)?;
        let fuse = ConvBn::new(
            store,
            &format!("{name}.fuse"),
            c + config.heatmap_channels,
            c,
            3,
            1,
            1,
        )?;
        let mut stages = Vec::new();
        let mut cin = c;
        for (s, &cout) in config.late_channels.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                let stride = if b == 0 { 2 } else { 1 };
                stages.push(ResBlock::new(
                    store,
                    &format!("{name}.stage{s}.block{b}"),
                    cin,
                    cout,
                    stride,
                )?);
                cin = cout;
            }
        }
        Ok(Self {
            config: config.clone(),
            stem,
            fuse,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Crop (B,3,4H,4W) -> F (B,C,H,W).
    pub fn early_features(&self, crop: &Tensor, train: bool) -> Result<FeatureMap> {
        let (_, ch, h, w) = crop.dims4()?;
        if ch != 3 || h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "crop must be (B,3,H,W) with H, W positive multiples of 16, got {:?}",
                crop.dims()
            )));
        }
        let y = self.stem.forward(crop, train)?.relu()?;
        let y = max_pool2x2(&y)?;
        Ok(FeatureMap {
            data: y,
            stride: EARLY_STRIDE,
        })
    }

    /// Concatenates F with the heatmaps and fuses back to C channels.
    pub fn fuse_pose(&self, f: &FeatureMap, heatmaps: &Tensor, train: bool) -> Result<FeatureMap> {
        let (b, _, h, w) = f.data.dims4()?;
        let (hb, hc, hh, hw) = heatmaps.dims4()?;
        if (hb, hh, hw) != (b, h, w) || hc != self.config.heatmap_channels {
            return Err(Error::Shape(format!(
                "heatmaps {:?} do not match feature map {:?} with {} channels",
                heatmaps.dims(),
                f.data.dims(),
                self.config.heatmap_channels
            )));
        }
        let cat = Tensor::cat(&[&f.data, heatmaps], 1)?;
        Ok(FeatureMap {
            data: self.fuse.forward(&cat, train)?.relu()?,
            stride: f.stride,
        })
    }

    /// Fused (B,C,H,W) -> F′ (B,C′,H/4,W/4).
    pub fn late_features(&self, fused: &FeatureMap, train: bool) -> Result<FeatureMap> {
        let (_, _, h, w) = fused.data.dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!(
                "late stage needs spatial dims divisible by 4, got {h}×{w}"
            )));
        }
        let mut y = fused.data.clone();
        for block in &self.stages {
            y = block.forward(&y, train)?;
        }
        Ok(FeatureMap {
            data: y,
            stride: fused.stride * 4,
        })
    }

    pub fn forward(&self, crop: &Tensor, heatmaps: &Tensor, train: bool) -> Result<FeatureMap> {
        let f = self.early_features(crop, train)?;
        let fused = self.fuse_pose(&f, heatmaps, train)?;
        self.late_features(&fused, train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn max_pool_matches_forward_and_routes_full_gradient() {
        let x = Tensor::randn(0f64, 1.0, (2, 3, 6, 5), &Device::Cpu).unwrap();
        let ours = max_pool2x2(&x).unwrap();
        let reference = x.max_pool2d_with_stride(2, 2).unwrap();
        assert_eq!(ours.dims(), reference.dims());
        let diff: f64 = (ours - reference).unwrap().abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert_eq!(diff, 0.0);

        let v = candle_core::Var::from_tensor(&x).unwrap();
        let g = max_pool2x2(v.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let g = g.get(v.as_tensor()).unwrap();
        let total: f64 = g.sum_all().unwrap().to_scalar().unwrap();
        assert_eq!(total, (2 * 3 * 3 * 2) as f64);
        let ones: f64 = g.eq(1.0).unwrap().to_dtype(DType::F64).unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert_eq!(ones, total);

        let flat = candle_core::Var::from_tensor(&Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let g = max_pool2x2(flat.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let total: f64 = g.get(flat.as_tensor()).unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert_eq!(total, 4.0);
    }

    fn setup(c: usize, late: [usize; 2]) -> (ParamStore, GuidedBackbone) {
        let mut store = ParamStore::new(5, DType::F32, &Device::Cpu);
        let cfg = BackboneConfig {
            early_channels: c,
            late_channels: late.to_vec(),
            ..Default::default()
        };
        let bb = GuidedBackbone::new(&mut store, "backbone", &cfg).unwrap();
        (store, bb)
    }

    fn randn(shape: &[usize]) -> Tensor {
        Tensor::randn(0f32, 1.0, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn shapes_follow_the_stride_budget() {
        let (_s, bb) = setup(32, [64, 128]);
        let crop = randn(&[2, 3, 64, 64]);
        let f = bb.early_features(&crop, false).unwrap();
        assert_eq!(f.data.dims(), &[2, 32, 16, 16]);
        let fused = bb.fuse_pose(&f, &randn(&[2, 19, 16, 16]), false).unwrap();
        assert_eq!(fused.data.dims(), &[2, 32, 16, 16]);
        let late = bb.late_features(&fused, false).unwrap();
        assert_eq!(late.data.dims(), &[2, 128, 4, 4]);
        assert_eq!(late.stride, LATE_STRIDE);
    }

    #[test]
    fn paper_scale_early_stage() {
        let (_s, bb) = setup(64, [128, 512]);
        let f = bb.early_features(&Tensor::zeros((1, 3, 256, 256), DType::F32, &Device::Cpu).unwrap(), false).unwrap();
        assert_eq!(f.data.dims(), &[1, 64, 64, 64]);
    }

    #[test]
    fn zero_input_gives_spatially_constant_early_features() {
        let (_s, bb) = setup(8, [16, 32]);
        let f = bb
            .early_features(&Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap(), false)
            .unwrap();
        let v: Vec<Vec<Vec<f32>>> = f.data.squeeze(0).unwrap().to_vec3().unwrap();
        for ch in v {
            let first = ch[0][0];
            assert!(ch.iter().flatten().all(|&x| x == first));
        }
    }

    #[test]
    fn heatmaps_reach_the_features_and_input_magnitude_matters() {
        let (_s, bb) = setup(8, [16, 32]);
        let crop = randn(&[1, 3, 64, 64]);
        let hm0 = Tensor::zeros((1, 19, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let hm1 = randn(&[1, 19, 16, 16]).abs().unwrap();
        let a = bb.forward(&crop, &hm0, false).unwrap().data;
        let b = bb.forward(&crop, &hm1, false).unwrap().data;
        let d = (a.clone() - b).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d > 0.0);
        let c = bb.forward(&(crop * 2.0).unwrap(), &hm0, false).unwrap().data;
        let d = (a - c).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d > 0.0);
    }

    #[test]
    fn shape_errors() {
        let (_s, bb) = setup(8, [16, 32]);
        assert!(matches!(bb.early_features(&randn(&[1, 3, 40, 64]), false), Err(Error::Shape(_))));
        let f = bb.early_features(&randn(&[1, 3, 64, 64]), false).unwrap();
        assert!(matches!(bb.fuse_pose(&f, &randn(&[1, 19, 8, 8]), false), Err(Error::Shape(_))));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (_s, bb) = setup(8, [16, 32]);
        let crop = randn(&[1, 3, 32, 32]);
        let hm = randn(&[1, 19, 8, 8]);
        let a: Vec<f32> = bb.forward(&crop, &hm, false).unwrap().data.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = bb.forward(&crop, &hm, false).unwrap().data.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }
}
