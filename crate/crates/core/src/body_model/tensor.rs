//! Batched, differentiable body decoding on candle tensors.

use candle_core::{DType, Device, IndexOp, Tensor};

use super::{BodyModel, NUM_BETAS};

/// Constant tensors of a [`BodyModel`] for batched decoding. The layer has
/// no trainable state; gradients flow to the parameter tensors.
#[derive(Debug, Clone)]
pub struct BodyLayer {
    template: Tensor,
    shape_dirs: Tensor,
    skin_weights: Tensor,
    kinematic_regressor: Tensor,
    joint_regressor: Tensor,
    parents: Vec<Option<usize>>,
    num_vertices: usize,
}

fn to_tensor(
    data: impl Iterator<Item = f64>,
    shape: &[usize],
    dtype: DType,
    device: &Device,
) -> candle_core::Result<Tensor> {
    Tensor::from_vec(data.collect::<Vec<f64>>(), shape, device)?.to_dtype(dtype)
}

impl BodyLayer {
    pub fn new(model: &BodyModel, dtype: DType, device: &Device) -> candle_core::Result<Self> {
        let v = model.num_vertices();
        let k = model.num_joints();
        let js = model.joint_regressor.nrows();
        let template = to_tensor(model.template_vertices.iter().copied(), &[v, 3], dtype, device)?;
        // (V,3,B) -> (B, V*3)
        let shape_dirs = to_tensor(
            model.shape_dirs.iter().copied(),
            &[v * 3, NUM_BETAS],
            dtype,
            device,
        )?
        .t()?
        .contiguous()?;
        let skin_weights = to_tensor(model.skin_weights.iter().copied(), &[v, k], dtype, device)?;
        let joint_regressor =
            to_tensor(model.joint_regressor.iter().copied(), &[js, v], dtype, device)?;
        let kinematic_regressor = joint_regressor.narrow(0, 0, k)?.contiguous()?;
        Ok(Self {
            template,
            shape_dirs,
            skin_weights,
            kinematic_regressor,
            joint_regressor,
            parents: model.parents.clone(),
            num_vertices: v,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    /// (B, NUM_BETAS) -> (B, V, 3)
    pub fn shaped_vertices(&self, beta: &Tensor) -> candle_core::Result<Tensor> {
        let b = beta.dim(0)?;
        beta.matmul(&self.shape_dirs)?
            .reshape((b, self.num_vertices, 3))?
            .broadcast_add(&self.template)
    }

    /// Decodes θ^g (B,3), θ (B,K−1,3) and β (B,10) into vertices (B,V,3).
    pub fn decode(
        &self,
        theta_g: &Tensor,
        theta: &Tensor,
        beta: &Tensor,
    ) -> candle_core::Result<Tensor> {
        let b = theta_g.dim(0)?;
        let k = self.num_joints();
        let shaped = self.shaped_vertices(beta)?;
        let joints = self.kinematic_regressor.broadcast_matmul(&shaped)?;

        let angles = Tensor::cat(&[&theta_g.unsqueeze(1)?, theta], 1)?;
        let local = rodrigues(&angles.reshape((b * k, 3))?)?.reshape((b, k, 3, 3))?;

        let mut world_r: Vec<Tensor> = Vec::with_capacity(k);
        let mut world_t: Vec<Tensor> = Vec::with_capacity(k);
        for j in 0..k {
            let rot = local.i((.., j))?.contiguous()?;
            let pos = joints.i((.., j))?;
            match self.parents[j] {
                None => {
                    world_r.push(rot);
                    world_t.push(pos);
                }
                Some(p) => {
                    let rel = (pos - joints.i((.., p))?)?.unsqueeze(2)?;
                    let t = (world_r[p].matmul(&rel)?.squeeze(2)? + &world_t[p])?;
                    world_r.push(world_r[p].matmul(&rot)?);
                    world_t.push(t);
                }
            }
        }
        let rot = Tensor::stack(&world_r, 1)?;
        let posed_joints = Tensor::stack(&world_t, 1)?;
        let trans = (posed_joints - rot.matmul(&joints.unsqueeze(3)?)?.squeeze(3)?)?;

        let blended_r = self
            .skin_weights
            .broadcast_matmul(&rot.reshape((b, k, 9))?)?
            .reshape((b, self.num_vertices, 3, 3))?;
        let blended_t = self.skin_weights.broadcast_matmul(&trans)?;
        blended_r
            .matmul(&shaped.unsqueeze(3)?)?
            .squeeze(3)?
            .add(&blended_t)
    }

    /// (B,V,3) -> (B,J_s,3)
    pub fn regress_joints(&self, vertices: &Tensor) -> candle_core::Result<Tensor> {
        self.joint_regressor.broadcast_matmul(vertices)
    }
}

/// Batched Rodrigues formula, (N,3) -> (N,3,3). A tiny epsilon under the
/// square root keeps the gradient finite at the zero rotation.
pub fn rodrigues(axis_angle: &Tensor) -> candle_core::Result<Tensor> {
    let n = axis_angle.dim(0)?;
    let eps = match axis_angle.dtype() {
        DType::F64 => 1e-16,
        _ => 1e-8,
    };
    let angle = (axis_angle.sqr()?.sum_keepdim(1)? + eps)?.sqrt()?;
    let axis = axis_angle.broadcast_div(&angle)?;
    let kx = axis.narrow(1, 0, 1)?;
    let ky = axis.narrow(1, 1, 1)?;
    let kz = axis.narrow(1, 2, 1)?;
    let zero = kx.zeros_like()?;
    let skew = Tensor::cat(
        &[
            &zero,
            &kz.neg()?,
            &ky,
            &kz,
            &zero,
            &kx.neg()?,
            &ky.neg()?,
            &kx,
            &zero,
        ],
        1,
    )?
    .reshape((n, 3, 3))?;
    let sin = angle.sin()?.reshape((n, 1, 1))?;
    let one_minus_cos = angle.cos()?.affine(-1.0, 1.0)?.reshape((n, 1, 1))?;
    let eye = Tensor::eye(3, axis_angle.dtype(), axis_angle.device())?.unsqueeze(0)?;
    eye.broadcast_add(&skew.broadcast_mul(&sin)?)?
        .add(&skew.matmul(&skew)?.broadcast_mul(&one_minus_cos)?)
}
