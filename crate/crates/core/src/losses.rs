//! Masked L1 training losses for mixed 2D/3D supervision.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joints::ROOT;

/// Per-joint validity of (x,y) and of z, as (B,J) tensors of 0/1 (u8).
#[derive(Debug, Clone)]
pub struct JointMask {
    pub xy: Tensor,
    pub z: Tensor,
}

impl JointMask {
    pub fn new(xy: Tensor, z: Tensor) -> Result<Self> {
        if xy.dims() != z.dims() || xy.rank() != 2 {
            return Err(Error::Shape(format!(
                "joint masks must be matching (B,J), got {:?} and {:?}",
                xy.dims(),
                z.dims()
            )));
        }
        let xy = xy.to_dtype(DType::U8)?;
        let z = z.to_dtype(DType::U8)?;
        let bad = z.gt(&xy)?.to_dtype(DType::U32)?.sum_all()?.to_scalar::<u32>()?;
        if bad > 0 {
            return Err(Error::Config("z-valid joints must also be xy-valid".into()));
        }
        Ok(Self { xy, z })
    }

    /// Per-coordinate (B,J,3) mask.
    fn coords(&self) -> candle_core::Result<Tensor> {
        let xy = self.xy.unsqueeze(2)?;
        Tensor::cat(&[&xy, &xy, &self.z.unsqueeze(2)?], 2)
    }

    fn planar(&self) -> candle_core::Result<Tensor> {
        let xy = self.xy.unsqueeze(2)?;
        Tensor::cat(&[&xy, &xy], 2)
    }
}

/// Per-sample validity of θ^g, θ and β, each a (B,) 0/1 tensor.
#[derive(Debug, Clone)]
pub struct ParamMask {
    pub theta_g: Tensor,
    pub theta: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone)]
pub struct SupervisionMask {
    /// Over the pose-network joints (J_c).
    pub pose: JointMask,
    /// Over the regressed body joints (J_s).
    pub shape: JointMask,
    pub params: ParamMask,
}

#[derive(Debug, Clone)]
pub struct MaskedLoss {
    pub value: Tensor,
    /// True when no entry was valid; the value is then 0.
    pub empty: bool,
}

impl MaskedLoss {
    pub fn scalar(&self) -> Result<f64> {
        Ok(self.value.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

/// Mean |pred − gt| over entries where `mask` is nonzero. Masked entries
/// are selected out, so their values never reach the result.
pub fn masked_l1(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<MaskedLoss> {
    if pred.dims() != gt.dims() || pred.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "loss operands differ: pred {:?}, gt {:?}, mask {:?}",
            pred.dims(),
            gt.dims(),
            mask.dims()
        )));
    }
    let count = mask
        .ne(0u8)?
        .to_dtype(DType::F64)?
        .sum_all()?
        .to_scalar::<f64>()?;
    if count == 0.0 {
        log::warn!("masked L1 loss has no valid entries");
        return Ok(MaskedLoss {
            value: Tensor::zeros((), pred.dtype(), pred.device())?,
            empty: true,
        });
    }
    let diff = (pred - gt)?;
    let selected = mask.ne(0u8)?.where_cond(&diff, &diff.zeros_like()?)?;
    Ok(MaskedLoss {
        value: (selected.abs()?.sum_all()? / count)?,
        empty: false,
    })
}

/// L1 between predicted and GT Pose3D joints (B,J,3); z terms drop where
/// z is invalid.
pub fn loss_pose(pred: &Tensor, gt: &Tensor, mask: &JointMask) -> Result<MaskedLoss> {
    masked_l1(pred, gt, &mask.coords()?)
}

/// Parameters as (θ^g (B,3), θ (B,K_pose,3), β (B,10)).
pub struct ParamSet<'a> {
    pub theta_g: &'a Tensor,
    pub theta: &'a Tensor,
    pub beta: &'a Tensor,
}

impl ParamSet<'_> {
    fn flat(&self) -> candle_core::Result<Tensor> {
        Tensor::cat(&[self.theta_g, &self.theta.flatten_from(1)?, self.beta], 1)
    }
}

/// L1 over valid θ^g, θ and β entries; the camera is not supervised here.
pub fn loss_param(pred: &ParamSet, gt: &ParamSet, mask: &ParamMask) -> Result<MaskedLoss> {
    let b = pred.theta_g.dim(0)?;
    let n_theta = pred.theta.dim(1)? * 3;
    let n_beta = pred.beta.dim(1)?;
    let expand = |m: &Tensor, n: usize| -> candle_core::Result<Tensor> {
        m.to_dtype(DType::U8)?.reshape((b, 1))?.broadcast_as((b, n))?.contiguous()
    };
    let m = Tensor::cat(
        &[
            &expand(&mask.theta_g, 3)?,
            &expand(&mask.theta, n_theta)?,
            &expand(&mask.beta, n_beta)?,
        ],
        1,
    )?;
    masked_l1(&pred.flat()?, &gt.flat()?, &m)
}

fn root_center(joints: &Tensor) -> candle_core::Result<Tensor> {
    joints.broadcast_sub(&joints.narrow(1, ROOT, 1)?)
}

/// 3D term on root-centered joints plus the 2D reprojection term. A
/// sample contributes 3D terms only when its root is z-valid, since the
/// centered GT depends on the root entry.
pub fn loss_coord_shape(
    pred3d: &Tensor,
    pred2d: &Tensor,
    gt3d: &Tensor,
    gt2d: &Tensor,
    mask: &JointMask,
) -> Result<MaskedLoss> {
    let z = mask.z.broadcast_mul(&mask.z.narrow(1, ROOT, 1)?)?;
    let z_only = JointMask { xy: z.clone(), z };
    let l3 = masked_l1(&root_center(pred3d)?, &root_center(gt3d)?, &z_only.coords()?)?;
    let l2 = masked_l1(pred2d, gt2d, &mask.planar()?)?;
    Ok(MaskedLoss {
        value: (l3.value + l2.value)?,
        empty: l3.empty && l2.empty,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pose: f64,
    pub param: f64,
    pub coord: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pose: 1.0,
            param: 1.0,
            coord: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("pose", self.pose), ("param", self.param), ("coord", self.coord)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight '{name}' must be finite and ≥ 0, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LossParts {
    pub pose: Tensor,
    pub param: Tensor,
    pub coord: Tensor,
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<Tensor> {
    weights.validate()?;
    Ok(((&parts.pose * weights.pose)? + (&parts.param * weights.param)? + (&parts.coord * weights.coord)?)?)
}
