//! 2D pose input preparation: superset mapping, training-time error
//! synthesis, masked Gaussian heatmaps, pose-derived boxes and crops.
//!
//! Coordinates are continuous pixel coordinates: pixel `(row i, col j)`
//! covers `[j, j+1) × [i, i+1)` and its center sits at `(j+0.5, i+0.5)`.

use ndarray::{Array3, ArrayView3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joints::{self, JointSetRegistry, NUM_SUPERSET};

pub const DEFAULT_KEEP_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub joints: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
    pub joint_set: String,
}

impl Pose2D {
    pub fn new(joints: Vec<[f64; 2]>, confidence: Vec<f64>, joint_set: &str) -> Result<Self> {
        let pose = Self {
            joints,
            confidence,
            joint_set: joint_set.to_string(),
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.len() != self.confidence.len() {
            return Err(Error::Shape(format!(
                "{} joints but {} confidences",
                self.joints.len(),
                self.confidence.len()
            )));
        }
        for (j, (p, &c)) in self.joints.iter().zip(&self.confidence).enumerate() {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Config(format!("joint {j} confidence {c} outside [0,1]")));
            }
            if c > 0.0 && !(p[0].is_finite() && p[1].is_finite()) {
                return Err(Error::Config(format!("joint {j} has non-finite coordinates")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    /// Indices of joints at or above the keep threshold.
    pub fn kept(&self, keep_threshold: f64) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&j| self.confidence[j] >= keep_threshold)
    }

    pub fn transformed(&self, affine: &Affine2) -> Self {
        Self {
            joints: self.joints.iter().map(|p| affine.apply(*p)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_max > x_min && y_max > y_min) {
            return Err(Error::Shape(format!(
                "invalid box ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        ]
    }

    /// Inclusive on all edges.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    /// Tight box over the given points; `None` for fewer than one point or zero extent.
    pub fn tight(points: impl IntoIterator<Item = [f64; 2]>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (first[0], first[1], first[0], first[1]);
        for p in it {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        BBox::new(x0, y0, x1, y1).ok()
    }
}

/// 2×3 affine map `p ↦ A·p + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2(pub [[f64; 3]; 2]);

impl Affine2 {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.0;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
        ]
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn inverse(&self) -> Option<Self> {
        let d = self.det();
        if d == 0.0 {
            return None;
        }
        let [[a, b, c], [e, f, g]] = self.0;
        let ia = f / d;
        let ib = -b / d;
        let ie = -e / d;
        let i_f = a / d;
        Some(Affine2([
            [ia, ib, -(ia * c + ib * g)],
            [ie, i_f, -(ie * c + i_f * g)],
        ]))
    }
}

/// Copies the joints a source convention defines into superset order;
/// superset joints the source lacks get confidence 0.
pub fn map_to_superset(pose: &Pose2D, registry: &JointSetRegistry) -> Result<Pose2D> {
    let mapping = registry.get(&pose.joint_set)?;
    if mapping.len() != pose.len() {
        return Err(Error::Shape(format!(
            "joint set '{}' has {} joints, pose has {}",
            pose.joint_set,
            mapping.len(),
            pose.len()
        )));
    }
    let mut joints = vec![[0.0; 2]; NUM_SUPERSET];
    let mut confidence = vec![0.0; NUM_SUPERSET];
    for (src, target) in mapping.iter().enumerate() {
        if let Some(t) = target {
            joints[*t] = pose.joints[src];
            confidence[*t] = pose.confidence[src];
        }
    }
    Ok(Pose2D {
        joints,
        confidence,
        joint_set: joints::SUPERSET.to_string(),
    })
}

/// Inverse of [`map_to_superset`]: picks a named set's joints out of a superset pose.
pub fn project_from_superset(
    pose: &Pose2D,
    registry: &JointSetRegistry,
    joint_set: &str,
) -> Result<Pose2D> {
    if pose.len() != NUM_SUPERSET {
        return Err(Error::Shape(format!(
            "expected a {NUM_SUPERSET}-joint superset pose, got {}",
            pose.len()
        )));
    }
    let mapping = registry.get(joint_set)?;
    let (joints, confidence) = mapping
        .iter()
        .map(|m| match m {
            Some(t) => (pose.joints[*t], pose.confidence[*t]),
            None => ([0.0; 2], 0.0),
        })
        .unzip();
    Ok(Pose2D {
        joints,
        confidence,
        joint_set: joint_set.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterSigma {
    Pixels(f64),
    /// Fraction of the diagonal of the pose's tight box.
    BboxFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorSynthesisConfig {
    pub jitter_prob: f64,
    pub jitter_sigma: JitterSigma,
    pub miss_prob: f64,
    pub inversion_prob: f64,
    pub swap_prob: f64,
}

impl Default for ErrorSynthesisConfig {
    fn default() -> Self {
        Self {
            jitter_prob: 0.25,
            jitter_sigma: JitterSigma::BboxFraction(0.05),
            miss_prob: 0.1,
            inversion_prob: 0.05,
            swap_prob: 0.05,
        }
    }
}

impl ErrorSynthesisConfig {
    pub fn none() -> Self {
        Self {
            jitter_prob: 0.0,
            miss_prob: 0.0,
            inversion_prob: 0.0,
            swap_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("jitter", self.jitter_prob),
            ("miss", self.miss_prob),
            ("inversion", self.inversion_prob),
            ("swap", self.swap_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} probability {p} outside [0,1]")));
            }
        }
        let sigma = match self.jitter_sigma {
            JitterSigma::Pixels(s) | JitterSigma::BboxFraction(s) => s,
        };
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("jitter sigma {sigma} must be finite and >= 0")));
        }
        Ok(())
    }
}

/// Mimics a bottom-up 2D detector's output from a superset GT pose. Each
/// joint draws the same random numbers regardless of configuration so a
/// seed yields comparable streams across configs.
pub fn synthesize_pose_errors(
    gt: &Pose2D,
    others: &[Pose2D],
    rng: &mut impl Rng,
    config: &ErrorSynthesisConfig,
) -> Result<Pose2D> {
    config.validate()?;
    if gt.len() != NUM_SUPERSET {
        return Err(Error::Shape(format!(
            "error synthesis expects a superset pose, got {} joints",
            gt.len()
        )));
    }
    let sigma = match config.jitter_sigma {
        JitterSigma::Pixels(s) => s,
        JitterSigma::BboxFraction(f) => {
            let diag = BBox::tight(gt.kept(f64::MIN_POSITIVE).map(|j| gt.joints[j]))
                .map_or(0.0, |b| b.width().hypot(b.height()));
            f * diag
        }
    };
    let mut out = gt.clone();
    for j in 0..gt.len() {
        let u_inv: f64 = rng.random();
        let u_swap: f64 = rng.random();
        let pick: f64 = rng.random();
        let u_jit: f64 = rng.random();
        let dx: f64 = StandardNormal.sample(rng);
        let dy: f64 = StandardNormal.sample(rng);
        let u_miss: f64 = rng.random();

        if gt.confidence[j] <= 0.0 {
            continue;
        }
        let flip = joints::flip_of(j);
        if u_inv < config.inversion_prob && flip != j && gt.confidence[flip] > 0.0 {
            out.joints[j] = gt.joints[flip];
        }
        if u_swap < config.swap_prob && !others.is_empty() {
            let other = &others[((pick * others.len() as f64) as usize).min(others.len() - 1)];
            if other.confidence.get(j).copied().unwrap_or(0.0) > 0.0 {
                out.joints[j] = other.joints[j];
            }
        }
        if u_jit < config.jitter_prob {
            out.joints[j][0] += sigma * dx;
            out.joints[j][1] += sigma * dy;
        }
        if u_miss < config.miss_prob {
            out.confidence[j] = 0.0;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap2D {
    /// J×H×W
    pub maps: Array3<f32>,
    pub sigma: f64,
}

/// Amplitude-1 Gaussian per kept joint; channels below the keep threshold
/// stay identically zero. Joints are given in crop pixels of a crop of
/// `crop_size = (width, height)` and rescaled to the `h × w` grid.
pub fn make_heatmaps(
    pose: &Pose2D,
    crop_size: (usize, usize),
    h: usize,
    w: usize,
    sigma: f64,
    keep_threshold: f64,
) -> Heatmap2D {
    assert!(h > 0 && w > 0 && sigma > 0.0, "heatmap size and sigma must be positive");
    let sx = w as f64 / crop_size.0 as f64;
    let sy = h as f64 / crop_size.1 as f64;
    let mut maps = Array3::<f32>::zeros((pose.len(), h, w));
    let inv = 1.0 / (2.0 * sigma * sigma);
    for j in pose.kept(keep_threshold) {
        let cx = pose.joints[j][0] * sx - 0.5;
        let cy = pose.joints[j][1] * sy - 0.5;
        let gx: Vec<f64> = (0..w).map(|c| (-(c as f64 - cx).powi(2) * inv).exp()).collect();
        for r in 0..h {
            let gy = (-(r as f64 - cy).powi(2) * inv).exp();
            for c in 0..w {
                maps[[j, r, c]] = (gy * gx[c]) as f32;
            }
        }
    }
    Heatmap2D { maps, sigma }
}

/// Square box around the kept joints: tight box, scaled by `margin_factor`
/// about its center, then padded on the short side to 1:1.
pub fn bbox_from_pose(pose: &Pose2D, margin_factor: f64, keep_threshold: f64) -> Result<BBox> {
    let kept: Vec<[f64; 2]> = pose.kept(keep_threshold).map(|j| pose.joints[j]).collect();
    if kept.len() < 2 {
        return Err(Error::DegeneratePose(format!(
            "{} joint(s) at or above confidence {keep_threshold}, need 2",
            kept.len()
        )));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in &kept {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let cx = 0.5 * (x0 + x1);
    let cy = 0.5 * (y0 + y1);
    let side = ((x1 - x0) * margin_factor).max((y1 - y0) * margin_factor);
    if !(side > 0.0) {
        return Err(Error::DegeneratePose("kept joints coincide".into()));
    }
    BBox::new(cx - side / 2.0, cy - side / 2.0, cx + side / 2.0, cy + side / 2.0)
}

/// Bilinear crop of `bbox` from an H×W×3 image into a 3×h×w crop, plus the
/// affine map from image pixels to crop pixels. Samples outside the image
/// read as zero.
pub fn crop_and_resize(
    image: ArrayView3<f32>,
    bbox: &BBox,
    out_size: (usize, usize),
) -> (Array3<f32>, Affine2) {
    let (out_h, out_w) = out_size;
    let (img_h, img_w, channels) = image.dim();
    let sx = out_w as f64 / bbox.width();
    let sy = out_h as f64 / bbox.height();
    let affine = Affine2([[sx, 0.0, -sx * bbox.x_min], [0.0, sy, -sy * bbox.y_min]]);
    let mut crop = Array3::<f32>::zeros((channels, out_h, out_w));
    let fetch = |r: i64, c: i64, ch: usize| -> f64 {
        if r < 0 || c < 0 || r >= img_h as i64 || c >= img_w as i64 {
            0.0
        } else {
            image[[r as usize, c as usize, ch]] as f64
        }
    };
    for i in 0..out_h {
        let y = (i as f64 + 0.5) / sy + bbox.y_min - 0.5;
        let y0 = y.floor();
        let wy = y - y0;
        for j in 0..out_w {
            let x = (j as f64 + 0.5) / sx + bbox.x_min - 0.5;
            let x0 = x.floor();
            let wx = x - x0;
            let (r, c) = (y0 as i64, x0 as i64);
            for ch in 0..channels {
                let mut v = fetch(r, c, ch) * (1.0 - wy) * (1.0 - wx);
                if wx > 0.0 {
                    v += fetch(r, c + 1, ch) * (1.0 - wy) * wx;
                }
                if wy > 0.0 {
                    v += fetch(r + 1, c, ch) * wy * (1.0 - wx);
                    if wx > 0.0 {
                        v += fetch(r + 1, c + 1, ch) * wy * wx;
                    }
                }
                crop[[ch, i, j]] = v as f32;
            }
        }
    }
    (crop, affine)
}
