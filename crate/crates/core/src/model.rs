//! The full network: pose-guided backbone, 3D pose head and the
//! joint-based body regressor, plus input preparation, batching and
//! checkpoints.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FeatureMap, GuidedBackbone, EARLY_STRIDE, LATE_STRIDE};
use crate::body_model::tensor::BodyLayer;
use crate::body_model::{BodyModel, BodyModelConfig, BodyParams, Mesh, NUM_BETAS};
use crate::error::{Error, Result};
use crate::joints::{COMMON, COMMON_EDGES, NUM_COMMON, NUM_SUPERSET, ROOT};
use crate::losses::{
    self, JointMask, LossParts, LossWeights, ParamMask, ParamSet, SupervisionMask,
};
use crate::nn::ParamStore;
use crate::pose2d::{
    bbox_from_pose, crop_and_resize, make_heatmaps, synthesize_pose_errors, Affine2, BBox,
    ErrorSynthesisConfig, Pose2D,
};
use crate::posenet::{soft_argmax3d, Pose3D, PoseNet3D};
use crate::scene::SceneSample;
use crate::shapenet::{
    assemble_fs, build_skeleton_graph, project_weak_persp, sample_joint_features, GraphNetwork,
    GraphNetworkConfig, HmrHead, PoseParamHead, ShapeCamHead,
};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const CONFIG_FILE: &str = "config.json";
const WEIGHTS_FILE: &str = "params.safetensors";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Heatmap-fused features and the joint-based regressor.
    Guided,
    /// Same network with the heatmap input zeroed.
    Unguided,
    /// Guided features, all parameters from pooled F′ through an MLP.
    HmrStyle,
    /// No 3D pose head; joint features sampled at the input 2D pose.
    NoPosenet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Guided,
        Variant::Unguided,
        Variant::HmrStyle,
        Variant::NoPosenet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Guided => "guided",
            Variant::Unguided => "unguided",
            Variant::HmrStyle => "hmr_style",
            Variant::NoPosenet => "no_posenet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }

    fn has_posenet(self) -> bool {
        self != Variant::NoPosenet
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub crop_size: usize,
    pub backbone: BackboneConfig,
    pub depth_bins: usize,
    pub depth_range_mm: f64,
    pub graph: GraphNetworkConfig,
    pub hmr_hidden: usize,
    /// Heatmap Gaussian std in cells of the early feature grid.
    pub heatmap_sigma: f64,
    pub keep_threshold: f64,
    pub bbox_margin: f64,
    pub normalize_xy: bool,
    pub body_model_seed: u64,
    pub body_model: BodyModelConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Guided,
            crop_size: 64,
            backbone: BackboneConfig::default(),
            depth_bins: 8,
            depth_range_mm: 1000.0,
            graph: GraphNetworkConfig::default(),
            hmr_hidden: 256,
            heatmap_sigma: 2.0,
            keep_threshold: crate::pose2d::DEFAULT_KEEP_THRESHOLD,
            bbox_margin: 1.2,
            normalize_xy: true,
            body_model_seed: 0,
            body_model: BodyModelConfig::default(),
        }
    }
}

impl ModelConfig {
    /// The full-resolution profile: 256 crop, C=64, C′=512.
    pub fn paper() -> Self {
        Self {
            crop_size: 256,
            backbone: BackboneConfig {
                early_channels: 64,
                late_channels: vec![256, 512],
                ..BackboneConfig::default()
            },
            depth_bins: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.crop_size == 0 || self.crop_size % LATE_STRIDE != 0 {
            return Err(Error::Config(format!(
                "crop_size must be a positive multiple of {LATE_STRIDE}, got {}",
                self.crop_size
            )));
        }
        if self.backbone.heatmap_channels != NUM_SUPERSET {
            return Err(Error::Config(format!(
                "backbone.heatmap_channels must be {NUM_SUPERSET}, got {}",
                self.backbone.heatmap_channels
            )));
        }
        if self.depth_bins == 0 || self.hmr_hidden == 0 {
            return Err(Error::Config("depth_bins and hmr_hidden must be positive".into()));
        }
        for (name, v) in [
            ("depth_range_mm", self.depth_range_mm),
            ("heatmap_sigma", self.heatmap_sigma),
            ("bbox_margin", self.bbox_margin),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.keep_threshold) {
            return Err(Error::Config(format!(
                "keep_threshold {} outside [0,1]",
                self.keep_threshold
            )));
        }
        self.body_model.validate()
    }

    pub fn heatmap_size(&self) -> usize {
        self.crop_size / EARLY_STRIDE
    }
}

/// Everything the network consumes for one person, plus targets when known.
#[derive(Debug, Clone)]
pub struct PreparedPerson {
    /// 3×S×S
    pub crop: Array3<f32>,
    /// J_s×S/4×S/4
    pub heatmaps: Array3<f32>,
    /// Input 2D pose on the common joints, crop pixels.
    pub input_xy: Vec<[f64; 2]>,
    pub input_conf: Vec<f64>,
    /// Image pixels to crop pixels.
    pub affine: Affine2,
    pub bbox: BBox,
    pub target: Option<Target>,
}

#[derive(Debug, Clone)]
pub struct Target {
    /// J_s×2 crop pixels.
    pub joints2d: Vec<[f64; 2]>,
    /// J_s×3 root-relative mm.
    pub joints3d_mm: Vec<[f64; 3]>,
    pub params: BodyParams,
}

/// Crops the image around `pose` (superset, image pixels) and renders the
/// heatmap guide. A pose too degenerate for a box is an error.
pub fn prepare_input(
    image: ArrayView3<f32>,
    pose: &Pose2D,
    config: &ModelConfig,
) -> Result<PreparedPerson> {
    if pose.len() != NUM_SUPERSET {
        return Err(Error::Shape(format!(
            "input pose must be on the {NUM_SUPERSET}-joint superset, got {}",
            pose.len()
        )));
    }
    let bbox = bbox_from_pose(pose, config.bbox_margin, config.keep_threshold)?;
    Ok(prepare_with_box(image, pose, bbox, config))
}

fn prepare_with_box(
    image: ArrayView3<f32>,
    pose: &Pose2D,
    bbox: BBox,
    config: &ModelConfig,
) -> PreparedPerson {
    let s = config.crop_size;
    let (crop, affine) = crop_and_resize(image, &bbox, (s, s));
    let in_crop = pose.transformed(&affine);
    let hm = config.heatmap_size();
    let heatmaps = make_heatmaps(&in_crop, (s, s), hm, hm, config.heatmap_sigma, config.keep_threshold);
    let input_xy = COMMON.iter().map(|&j| in_crop.joints[j]).collect();
    let input_conf = COMMON
        .iter()
        .map(|&j| {
            let c = in_crop.confidence[j];
            if c >= config.keep_threshold {
                c
            } else {
                0.0
            }
        })
        .collect();
    PreparedPerson {
        crop,
        heatmaps: heatmaps.maps,
        input_xy,
        input_conf,
        affine,
        bbox,
        target: None,
    }
}

/// Prepares person `index` of a scene. With `errors`, the input 2D pose is
/// drawn from the error model; otherwise the clean GT pose is used. A
/// synthesized pose too degenerate for a box falls back to the GT box.
pub fn prepare_person(
    sample: &SceneSample,
    index: usize,
    config: &ModelConfig,
    errors: Option<(&ErrorSynthesisConfig, &mut dyn rand::RngCore)>,
) -> Result<PreparedPerson> {
    let person = sample
        .persons
        .get(index)
        .ok_or_else(|| Error::Config(format!("scene {} has no person {index}", sample.id)))?;
    let gt = person.pose2d();
    let input = match errors {
        Some((cfg, rng)) => {
            let others: Vec<Pose2D> = sample
                .persons
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != index)
                .map(|(_, p)| p.pose2d())
                .collect();
            let mut rng = rng;
            synthesize_pose_errors(&gt, &others, &mut rng, cfg)?
        }
        None => gt.clone(),
    };
    let bbox = match bbox_from_pose(&input, config.bbox_margin, config.keep_threshold) {
        Ok(b) => b,
        Err(Error::DegeneratePose(_)) => bbox_from_pose(&gt, config.bbox_margin, 0.0)?,
        Err(e) => return Err(e),
    };
    let mut prepared = prepare_with_box(sample.image.view(), &input, bbox, config);
    prepared.target = Some(Target {
        joints2d: gt.transformed(&prepared.affine).joints,
        joints3d_mm: person.joints3d_mm.clone(),
        params: person.params.clone(),
    });
    Ok(prepared)
}

#[derive(Debug, Clone)]
pub struct BatchTargets {
    /// (B,J_c,3): crop-pixel x, y and root-relative z in mm.
    pub pose: Tensor,
    /// (B,J_s,3) root-relative mm.
    pub joints3d_mm: Tensor,
    /// (B,J_s,2) crop pixels.
    pub joints2d: Tensor,
    pub theta_g: Tensor,
    pub theta: Tensor,
    pub beta: Tensor,
    pub mask: SupervisionMask,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub crops: Tensor,
    pub heatmaps: Tensor,
    pub input_xy: Tensor,
    pub input_conf: Tensor,
    pub targets: Option<BatchTargets>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.crops.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn stack3(items: &[&Array3<f32>], dtype: DType, device: &Device) -> Result<Tensor> {
    let (c, h, w) = items[0].dim();
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for a in items {
        if a.dim() != (c, h, w) {
            return Err(Error::Shape(format!("cannot batch {:?} with {:?}", a.dim(), (c, h, w))));
        }
        data.extend(a.iter().copied());
    }
    Ok(Tensor::from_vec(data, (items.len(), c, h, w), device)?.to_dtype(dtype)?)
}

fn rows<const N: usize>(
    items: impl Iterator<Item = Vec<[f64; N]>>,
    b: usize,
    n: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let data: Vec<f64> = items.flat_map(|r| r.into_iter().flatten()).collect();
    Ok(Tensor::from_vec(data, (b, n, N), device)?.to_dtype(dtype)?)
}

/// Stacks prepared persons into tensors; targets are included only when
/// every person has them. Synthetic targets are fully valid.
pub fn collate(items: &[PreparedPerson], dtype: DType, device: &Device) -> Result<Batch> {
    if items.is_empty() {
        return Err(Error::Shape("cannot collate an empty batch".into()));
    }
    let b = items.len();
    let crops = stack3(&items.iter().map(|p| &p.crop).collect::<Vec<_>>(), dtype, device)?;
    let heatmaps = stack3(&items.iter().map(|p| &p.heatmaps).collect::<Vec<_>>(), dtype, device)?;
    let input_xy = rows(items.iter().map(|p| p.input_xy.clone()), b, NUM_COMMON, dtype, device)?;
    let conf: Vec<f64> = items.iter().flat_map(|p| p.input_conf.iter().copied()).collect();
    let input_conf = Tensor::from_vec(conf, (b, NUM_COMMON), device)?.to_dtype(dtype)?;

    let targets = if items.iter().all(|p| p.target.is_some()) {
        let ts: Vec<&Target> = items.iter().map(|p| p.target.as_ref().expect("checked")).collect();
        let pose = rows(
            ts.iter().map(|t| {
                COMMON
                    .iter()
                    .map(|&j| [t.joints2d[j][0], t.joints2d[j][1], t.joints3d_mm[j][2]])
                    .collect()
            }),
            b,
            NUM_COMMON,
            dtype,
            device,
        )?;
        let joints3d_mm = rows(ts.iter().map(|t| t.joints3d_mm.clone()), b, NUM_SUPERSET, dtype, device)?;
        let joints2d = rows(ts.iter().map(|t| t.joints2d.clone()), b, NUM_SUPERSET, dtype, device)?;
        let kp = ts[0].params.theta.len();
        if ts.iter().any(|t| t.params.theta.len() != kp) {
            return Err(Error::Shape("targets disagree on the number of pose joints".into()));
        }
        let theta_g = Tensor::from_vec(
            ts.iter().flat_map(|t| t.params.theta_g).collect::<Vec<_>>(),
            (b, 3),
            device,
        )?
        .to_dtype(dtype)?;
        let theta = rows(ts.iter().map(|t| t.params.theta.clone()), b, kp, dtype, device)?;
        let beta = Tensor::from_vec(
            ts.iter().flat_map(|t| t.params.beta).collect::<Vec<_>>(),
            (b, NUM_BETAS),
            device,
        )?
        .to_dtype(dtype)?;
        let ones = |n: usize| Tensor::ones((b, n), DType::U8, device);
        let ones1 = || Tensor::ones(b, DType::U8, device);
        let mask = SupervisionMask {
            pose: JointMask::new(ones(NUM_COMMON)?, ones(NUM_COMMON)?)?,
            shape: JointMask::new(ones(NUM_SUPERSET)?, ones(NUM_SUPERSET)?)?,
            params: ParamMask {
                theta_g: ones1()?,
                theta: ones1()?,
                beta: ones1()?,
            },
        };
        Some(BatchTargets {
            pose,
            joints3d_mm,
            joints2d,
            theta_g,
            theta,
            beta,
            mask,
        })
    } else {
        None
    };
    Ok(Batch {
        crops,
        heatmaps,
        input_xy,
        input_conf,
        targets,
    })
}

#[derive(Debug, Clone)]
pub struct Output {
    pub features: FeatureMap,
    /// Joint-level 3D pose on J_c (from the input pose for `no_posenet`).
    pub pose3d: Pose3D,
    pub theta_g: Tensor,
    pub theta: Tensor,
    pub beta: Tensor,
    pub k: Tensor,
    /// (B,V,3) model units.
    pub vertices: Tensor,
    /// (B,J_s,3) model units.
    pub joints3d: Tensor,
    /// (B,J_s,2) crop pixels.
    pub joints2d: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub pose: f64,
    pub param: f64,
    pub coord: f64,
    pub total: f64,
}

enum Regressor {
    Joint {
        graph: GraphNetwork,
        pose_head: PoseParamHead,
        shape_head: ShapeCamHead,
    },
    Hmr(HmrHead),
}

pub struct CrowdNet {
    config: ModelConfig,
    store: ParamStore,
    backbone: GuidedBackbone,
    posenet: Option<PoseNet3D>,
    regressor: Regressor,
    body_model: BodyModel,
    body: BodyLayer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    dtype: String,
    model: ModelConfig,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Config(format!("unsupported model dtype {other:?}"))),
    }
}

impl CrowdNet {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let body_model = BodyModel::build(config.body_model_seed, config.body_model)?;
        Self::with_body_model(config, seed, dtype, device, body_model)
    }

    fn with_body_model(
        config: &ModelConfig,
        seed: u64,
        dtype: DType,
        device: &Device,
        body_model: BodyModel,
    ) -> Result<Self> {
        config.validate()?;
        dtype_name(dtype)?;
        let mut store = ParamStore::new(seed, dtype, device);
        let backbone = GuidedBackbone::new(&mut store, "backbone", &config.backbone)?;
        let c_late = config.backbone.out_channels();
        let posenet = if config.variant.has_posenet() {
            Some(PoseNet3D::new(&mut store, "posenet", c_late, NUM_COMMON, config.depth_bins)?)
        } else {
            None
        };
        let kp = body_model.num_pose_joints();
        let regressor = if config.variant == Variant::HmrStyle {
            Regressor::Hmr(HmrHead::new(&mut store, "hmr", c_late, config.hmr_hidden, kp)?)
        } else {
            let skeleton = build_skeleton_graph(NUM_COMMON, &COMMON_EDGES)?;
            let graph = GraphNetwork::new(&mut store, "graph", &skeleton, c_late + 4, &config.graph)?;
            let pose_head = PoseParamHead::new(
                &mut store,
                "pose_head",
                NUM_COMMON * config.graph.channels,
                kp,
            )?;
            let shape_head = ShapeCamHead::new(&mut store, "shape_head", c_late)?;
            Regressor::Joint {
                graph,
                pose_head,
                shape_head,
            }
        };
        let body = BodyLayer::new(&body_model, dtype, device)?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            posenet,
            regressor,
            body_model,
            body,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn body_model(&self) -> &BodyModel {
        &self.body_model
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn forward(&self, batch: &Batch, train: bool) -> Result<Output> {
        let cfg = &self.config;
        let heatmaps = match cfg.variant {
            Variant::Unguided => batch.heatmaps.zeros_like()?,
            _ => batch.heatmaps.clone(),
        };
        let features = self.backbone.forward(&batch.crops, &heatmaps, train)?;
        let pose3d = match &self.posenet {
            Some(head) => {
                let hm = head.predict_heatmap3d(&features)?;
                soft_argmax3d(&hm, features.stride, cfg.depth_range_mm)?
            }
            None => {
                let b = batch.len();
                let z = Tensor::zeros((b, NUM_COMMON, 1), self.dtype(), self.device())?;
                Pose3D {
                    joints: Tensor::cat(&[&batch.input_xy, &z], 2)?,
                    confidence: batch.input_conf.clone(),
                }
            }
        };
        let (theta_g, theta, beta, k) = match &self.regressor {
            Regressor::Joint {
                graph,
                pose_head,
                shape_head,
            } => {
                let xy = pose3d.joints.narrow(2, 0, 2)?;
                let sampled = sample_joint_features(&features, &xy)?;
                let fs = assemble_fs(
                    &sampled,
                    &pose3d.joints,
                    &pose3d.confidence,
                    cfg.crop_size as f64,
                    cfg.depth_range_mm,
                    cfg.normalize_xy,
                )?;
                let hidden = graph.forward(&fs, train)?;
                let (theta_g, theta) = pose_head.forward(&hidden)?;
                let (beta, k) = shape_head.forward(&features.data)?;
                (theta_g, theta, beta, k)
            }
            Regressor::Hmr(head) => head.forward(&features.data)?,
        };
        let vertices = self.body.decode(&theta_g, &theta, &beta)?;
        let joints3d = self.body.regress_joints(&vertices)?;
        let joints2d = project_weak_persp(&joints3d, &k, cfg.crop_size as f64)?;
        Ok(Output {
            features,
            pose3d,
            theta_g,
            theta,
            beta,
            k,
            vertices,
            joints3d,
            joints2d,
        })
    }

    /// Loss terms on a common scale: crop pixels as fractions of the crop,
    /// depth as a fraction of the depth volume, 3D joints in model units.
    pub fn loss(&self, out: &Output, batch: &Batch) -> Result<(Tensor, LossValues)> {
        self.loss_weighted(out, batch, &LossWeights::default())
    }

    pub fn loss_weighted(
        &self,
        out: &Output,
        batch: &Batch,
        weights: &LossWeights,
    ) -> Result<(Tensor, LossValues)> {
        let t = batch
            .targets
            .as_ref()
            .ok_or_else(|| Error::Config("batch has no targets".into()))?;
        let s = self.config.crop_size as f64;
        let pose_scale = Tensor::new(
            &[1.0 / s, 1.0 / s, 1.0 / (2.0 * self.config.depth_range_mm)],
            self.device(),
        )?
        .to_dtype(self.dtype())?;
        let pose = if self.posenet.is_some() {
            losses::loss_pose(
                &out.pose3d.joints.broadcast_mul(&pose_scale)?,
                &t.pose.broadcast_mul(&pose_scale)?,
                &t.mask.pose,
            )?
            .value
        } else {
            Tensor::zeros((), self.dtype(), self.device())?
        };
        let param = losses::loss_param(
            &ParamSet {
                theta_g: &out.theta_g,
                theta: &out.theta,
                beta: &out.beta,
            },
            &ParamSet {
                theta_g: &t.theta_g,
                theta: &t.theta,
                beta: &t.beta,
            },
            &t.mask.params,
        )?
        .value;
        let coord = losses::loss_coord_shape(
            &out.joints3d,
            &(&out.joints2d / s)?,
            &(&t.joints3d_mm / 1000.0)?,
            &(&t.joints2d / s)?,
            &t.mask.shape,
        )?
        .value;
        let parts = LossParts { pose, param, coord };
        let total = losses::total_loss(&parts, weights)?;
        let scalar = |x: &Tensor| -> Result<f64> { Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let values = LossValues {
            pose: scalar(&parts.pose)?,
            param: scalar(&parts.param)?,
            coord: scalar(&parts.coord)?,
            total: scalar(&total)?,
        };
        Ok((total, values))
    }

    /// Per-sample body parameters from an output.
    pub fn params(&self, out: &Output) -> Result<Vec<BodyParams>> {
        let f = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?) };
        let b = out.theta_g.dim(0)?;
        let kp = out.theta.dim(1)?;
        let (g, th, be, k) = (f(&out.theta_g)?, f(&out.theta)?, f(&out.beta)?, f(&out.k)?);
        Ok((0..b)
            .map(|i| BodyParams {
                theta_g: std::array::from_fn(|c| g[i * 3 + c]),
                theta: (0..kp)
                    .map(|j| std::array::from_fn(|c| th[(i * kp + j) * 3 + c]))
                    .collect(),
                beta: std::array::from_fn(|c| be[i * NUM_BETAS + c]),
                k: std::array::from_fn(|c| k[i * 3 + c]),
            })
            .collect())
    }

    /// Per-sample predicted meshes (model units), decoded in double
    /// precision from the predicted parameters.
    pub fn meshes(&self, out: &Output) -> Result<Vec<Mesh>> {
        Ok(self
            .params(out)?
            .iter()
            .map(|p| self.body_model.decode(p))
            .collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dtype: dtype_name(self.dtype())?.to_string(),
            model: self.config.clone(),
        };
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
        self.store.save(&dir.join(WEIGHTS_FILE))
    }

    pub fn load(dir: &Path, device: &Device) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            offset: 0,
            msg: e.to_string(),
        })?;
        let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                path,
                found,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let meta: CheckpointMeta = serde_json::from_value(value)?;
        let dtype = match meta.dtype.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(Error::Config(format!("unsupported checkpoint dtype '{other}'"))),
        };
        let net = Self::new(&meta.model, 0, dtype, device)?;
        net.store
            .load(&dir.join(WEIGHTS_FILE))
            .map_err(|e| e.context(format!("loading weights from {}", dir.display())))?;
        Ok(net)
    }
}

/// Per-sample error-synthesis stream: independent of batch composition
/// and of how many draws other samples made.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    rng
}

pub fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Root-centered joints in mm on the common set, from (J_s) model units.
pub fn common_joints_mm(joints: &[nalgebra::Vector3<f64>]) -> Vec<[f64; 3]> {
    let root = joints[ROOT];
    COMMON
        .iter()
        .map(|&j| {
            let p = (joints[j] - root) * 1000.0;
            [p.x, p.y, p.z]
        })
        .collect()
}
