//! Joint-level feature sampling, joint-specific graph convolutions and the
//! body-parameter heads.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::body_model::NUM_BETAS;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Init, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    pub adjacency: Array2<f64>,
    /// D^{-1/2}(A+I)D^{-1/2}
    pub normalized: Array2<f64>,
    pub neighbors: Vec<Vec<usize>>,
}

impl SkeletonGraph {
    pub fn num_joints(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn normalized_tensor(&self, dtype: DType, device: &Device) -> candle_core::Result<Tensor> {
        let n = self.num_joints();
        Tensor::from_vec(self.normalized.iter().copied().collect::<Vec<_>>(), (n, n), device)?
            .to_dtype(dtype)
    }
}

pub fn build_skeleton_graph(num_joints: usize, edges: &[(usize, usize)]) -> Result<SkeletonGraph> {
    if num_joints == 0 {
        return Err(Error::Config("skeleton graph needs at least one joint".into()));
    }
    let mut a = Array2::<f64>::zeros((num_joints, num_joints));
    for &(i, j) in edges {
        if i >= num_joints || j >= num_joints || i == j {
            return Err(Error::Config(format!("invalid skeleton edge ({i}, {j})")));
        }
        a[[i, j]] = 1.0;
        a[[j, i]] = 1.0;
    }
    let neighbors: Vec<Vec<usize>> = (0..num_joints)
        .map(|i| (0..num_joints).filter(|&j| a[[i, j]] != 0.0).collect())
        .collect();
    let mut seen = vec![false; num_joints];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for &j in &neighbors[i] {
            if !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Config("skeleton graph is disconnected".into()));
    }
    let a_hat = &a + &Array2::<f64>::eye(num_joints);
    let inv_sqrt: Vec<f64> = a_hat.rows().into_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
    let normalized = Array2::from_shape_fn((num_joints, num_joints), |(i, j)| {
        inv_sqrt[i] * a_hat[[i, j]] * inv_sqrt[j]
    });
    Ok(SkeletonGraph {
        adjacency: a,
        normalized,
        neighbors,
    })
}

/// Bilinear sampling of F′ (B,C,h,w) at crop-pixel positions xy (B,J,2),
/// returning (B,J,C). Positions map to feature cells at (x/stride − 0.5)
/// and are clamped to the border. Differentiable in both inputs.
pub fn sample_joint_features(f: &FeatureMap, xy: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = f.data.dims4()?;
    let (bx, j, two) = xy.dims3()?;
    if bx != b || two != 2 {
        return Err(Error::Shape(format!(
            "xy {:?} does not match feature batch {b}",
            xy.dims()
        )));
    }
    let dtype = f.data.dtype();
    let dev = f.data.device();
    let s = f.stride as f64;
    let u = xy.narrow(2, 0, 1)?.squeeze(2)?.affine(1.0 / s, -0.5)?.clamp(0.0, (w - 1) as f64)?;
    let v = xy.narrow(2, 1, 1)?.squeeze(2)?.affine(1.0 / s, -0.5)?.clamp(0.0, (h - 1) as f64)?;

    let base = |t: &Tensor, size: usize| -> Result<(Vec<u32>, Tensor)> {
        let vals: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let lo: Vec<u32> = vals
            .iter()
            .map(|x| (x.floor() as usize).min(size.saturating_sub(2)) as u32)
            .collect();
        let lo_f: Vec<f64> = lo.iter().map(|&x| x as f64).collect();
        Ok((lo, Tensor::from_vec(lo_f, (b, j), dev)?.to_dtype(dtype)?))
    };
    let (u0, u0f) = base(&u, w)?;
    let (v0, v0f) = base(&v, h)?;
    let fu = (u - u0f)?;
    let fv = (v - v0f)?;
    let du = if w > 1 { 1 } else { 0 };
    let dv = if h > 1 { 1 } else { 0 };

    let flat = f.data.reshape((b, c, h * w))?;
    let gather = |dr: u32, dc: u32| -> Result<Tensor> {
        let idx: Vec<u32> = v0
            .iter()
            .zip(&u0)
            .map(|(&r, &col)| (r + dr) * w as u32 + col + dc)
            .collect();
        let idx = Tensor::from_vec(idx, (b, 1, j), dev)?
            .broadcast_as((b, c, j))?
            .contiguous()?;
        Ok(flat.gather(&idx, 2)?)
    };
    let one_minus = |t: &Tensor| t.affine(-1.0, 1.0);
    let weight = |a: Tensor, bb: Tensor| -> Result<Tensor> { Ok((a * bb)?.unsqueeze(1)?) };
    let w00 = weight(one_minus(&fu)?, one_minus(&fv)?)?;
    let w01 = weight(fu.clone(), one_minus(&fv)?)?;
    let w10 = weight(one_minus(&fu)?, fv.clone())?;
    let w11 = weight(fu, fv)?;
    let out = (gather(0, 0)?.broadcast_mul(&w00)?
        + gather(0, du)?.broadcast_mul(&w01)?
        + gather(dv, 0)?.broadcast_mul(&w10)?
        + gather(dv, du)?.broadcast_mul(&w11)?)?;
    Ok(out.transpose(1, 2)?.contiguous()?)
}

/// Concatenates [sampled | normalized xyz | confidence] per joint.
pub fn assemble_fs(
    sampled: &Tensor,
    joints: &Tensor,
    confidence: &Tensor,
    crop_size: f64,
    depth_range: f64,
    normalize_xy: bool,
) -> Result<Tensor> {
    let (b, j, _) = sampled.dims3()?;
    if joints.dims() != [b, j, 3] || confidence.dims() != [b, j] {
        return Err(Error::Shape(format!(
            "joint rows do not match: sampled {:?}, joints {:?}, confidence {:?}",
            sampled.dims(),
            joints.dims(),
            confidence.dims()
        )));
    }
    let xy_scale = if normalize_xy { 1.0 / crop_size } else { 1.0 };
    let xy = (joints.narrow(2, 0, 2)? * xy_scale)?;
    let z = (joints.narrow(2, 2, 1)? / depth_range)?;
    Ok(Tensor::cat(&[sampled, &xy, &z, &confidence.unsqueeze(2)?], 2)?)
}

/// F_out_j = ReLU(Σ_{i∈N̂_j} ã_ji · BN(W_i F_in_i)).
#[derive(Debug, Clone)]
pub struct GraphConv {
    /// (J, C_out, C_in)
    pub weight: Tensor,
    pub bn: BatchNorm,
    adjacency: Tensor,
}

impl GraphConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        graph: &SkeletonGraph,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        let j = graph.num_joints();
        Ok(Self {
            weight: store.param(
                &format!("{name}.weight"),
                &[j, cout, cin],
                Init::Kaiming { fan_in: cin },
            )?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), &[1, j, cout], &[0])?,
            adjacency: graph.normalized_tensor(store.dtype(), store.device())?,
        })
    }

    /// (B, J, C_in) -> (B, J, C_out)
    pub fn forward(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let per_joint = x
            .transpose(0, 1)?
            .contiguous()?
            .matmul(&self.weight.transpose(1, 2)?.contiguous()?)?
            .transpose(0, 1)?
            .contiguous()?;
        let normed = self.bn.forward(&per_joint, train)?;
        self.adjacency.broadcast_matmul(&normed)?.relu()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNetworkConfig {
    pub channels: usize,
    pub residual_blocks: usize,
}

impl Default for GraphNetworkConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            residual_blocks: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraphNetwork {
    pub input: GraphConv,
    pub blocks: Vec<(GraphConv, GraphConv)>,
}

impl GraphNetwork {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        graph: &SkeletonGraph,
        cin: usize,
        config: &GraphNetworkConfig,
    ) -> Result<Self> {
        if config.channels == 0 {
            return Err(Error::Config("graph channels must be positive".into()));
        }
        let c = config.channels;
        let input = GraphConv::new(store, &format!("{name}.input"), graph, cin, c)?;
        let blocks = (0..config.residual_blocks)
            .map(|i| {
                Ok((
                    GraphConv::new(store, &format!("{name}.res{i}.a"), graph, c, c)?,
                    GraphConv::new(store, &format!("{name}.res{i}.b"), graph, c, c)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { input, blocks })
    }

    pub fn forward(&self, fs: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut x = self.input.forward(fs, train)?;
        for (a, b) in &self.blocks {
            let y = b.forward(&a.forward(&x, train)?, train)?;
            x = (x + y)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct PoseParamHead {
    pub theta_g: Linear,
    pub theta: Linear,
    num_pose_joints: usize,
}

pub const HEAD_INIT_STD: f64 = 1e-3;

impl PoseParamHead {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, num_pose_joints: usize) -> Result<Self> {
        Ok(Self {
            theta_g: Linear::new(store, &format!("{name}.theta_g"), in_dim, 3, Init::Normal(HEAD_INIT_STD))?,
            theta: Linear::new(
                store,
                &format!("{name}.theta"),
                in_dim,
                num_pose_joints * 3,
                Init::Normal(HEAD_INIT_STD),
            )?,
            num_pose_joints,
        })
    }

    /// hidden (B,J,C_g) -> (θ^g (B,3), θ (B,K_pose,3))
    pub fn forward(&self, hidden: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let b = hidden.dim(0)?;
        let flat = hidden.flatten_from(1)?;
        let theta = self.theta.forward(&flat)?.reshape((b, self.num_pose_joints, 3))?;
        Ok((self.theta_g.forward(&flat)?, theta))
    }
}

/// ln(1 + e^x) in a form that is stable for large |x|.
pub fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    x.relu()? + x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?
}

/// Global spatial average of F′: (B,C,h,w) -> (B,C).
pub fn global_avg_pool(f: &Tensor) -> candle_core::Result<Tensor> {
    f.mean(3)?.mean(2)
}

#[derive(Debug, Clone)]
pub struct ShapeCamHead {
    pub beta: Linear,
    pub cam: Linear,
}

impl ShapeCamHead {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize) -> Result<Self> {
        Ok(Self {
            beta: Linear::new(store, &format!("{name}.beta"), in_channels, NUM_BETAS, Init::Normal(HEAD_INIT_STD))?,
            cam: Linear::new(store, &format!("{name}.cam"), in_channels, 3, Init::Normal(HEAD_INIT_STD))?,
        })
    }

    /// F′ -> (β (B,10), k (B,3)) with k's scale through softplus.
    pub fn forward(&self, f: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let pooled = global_avg_pool(f)?;
        let beta = self.beta.forward(&pooled)?;
        Ok((beta, camera_from_raw(&self.cam.forward(&pooled)?)?))
    }
}

/// Raw (B,3) camera output -> (softplus(s), t_x, t_y).
pub fn camera_from_raw(raw: &Tensor) -> candle_core::Result<Tensor> {
    Tensor::cat(&[&softplus(&raw.narrow(1, 0, 1)?)?, &raw.narrow(1, 1, 2)?], 1)
}

/// Global-average-pooled F′ through a two-layer MLP to every body
/// parameter at once.
#[derive(Debug, Clone)]
pub struct HmrHead {
    hidden: Linear,
    out: Linear,
    num_pose_joints: usize,
}

impl HmrHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        hidden: usize,
        num_pose_joints: usize,
    ) -> Result<Self> {
        let out_dim = 3 + num_pose_joints * 3 + NUM_BETAS + 3;
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), in_channels, hidden, Init::Kaiming { fan_in: in_channels })?,
            out: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, Init::Normal(HEAD_INIT_STD))?,
            num_pose_joints,
        })
    }

    /// F′ -> (θ^g, θ, β, k)
    pub fn forward(&self, f: &Tensor) -> candle_core::Result<(Tensor, Tensor, Tensor, Tensor)> {
        let b = f.dim(0)?;
        let kp = self.num_pose_joints;
        let h = self.hidden.forward(&global_avg_pool(f)?)?.relu()?;
        let y = self.out.forward(&h)?;
        Ok((
            y.narrow(1, 0, 3)?,
            y.narrow(1, 3, kp * 3)?.reshape((b, kp, 3))?,
            y.narrow(1, 3 + kp * 3, NUM_BETAS)?,
            camera_from_raw(&y.narrow(1, 3 + kp * 3 + NUM_BETAS, 3)?)?,
        ))
    }
}

/// Weak perspective: s·(x,y)·crop/2 + crop/2 + t, for points (B,N,3) and
/// cameras (B,3).
pub fn project_weak_persp(points: &Tensor, k: &Tensor, crop_size: f64) -> candle_core::Result<Tensor> {
    let s = k.narrow(1, 0, 1)?.unsqueeze(2)?;
    let t = k.narrow(1, 1, 2)?.unsqueeze(1)?;
    points
        .narrow(2, 0, 2)?
        .broadcast_mul(&(s * (crop_size / 2.0))?)?
        .affine(1.0, crop_size / 2.0)?
        .broadcast_add(&t)
}
