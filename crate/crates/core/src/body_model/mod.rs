//! Miniature parametric body model.
//!
//! A seeded capsule body with an SMPL-like parameter interface: a global
//! axis-angle rotation, one axis-angle per non-root joint and ten shape
//! coefficients. Parameters decode to a mesh through shape blending,
//! forward kinematics and linear blend skinning; a sparse regressor maps
//! the mesh to the joint superset.
//!
//! Model units are metres. The canonical frame matches the camera frame
//! used by the scene generator: x to the right, y down, z away from the
//! camera, with the body facing the camera at zero rotation.

mod archive;
pub mod tensor;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joints::NUM_SUPERSET;

pub use tensor::BodyLayer;

pub const NUM_BETAS: usize = 10;
pub const DEFAULT_NUM_JOINTS: usize = 16;
pub const DEFAULT_VERTS_PER_BONE: usize = 24;
/// Vertices averaged per regressed joint.
pub const REGRESSOR_NEIGHBORS: usize = 8;
/// RMS vertex displacement (metres) of one unit of any shape coefficient.
pub const SHAPE_UNIT_RMS: f64 = 0.03;

const RINGS_PER_BONE: usize = 3;

/// Blend-direction indices with a fixed meaning.
pub const BETA_GLOBAL_SCALE: usize = 0;
pub const BETA_TORSO_SCALE: usize = 1;
pub const BETA_LIMB_LENGTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyModelConfig {
    pub num_joints: usize,
    pub verts_per_bone: usize,
}

impl Default for BodyModelConfig {
    fn default() -> Self {
        Self {
            num_joints: DEFAULT_NUM_JOINTS,
            verts_per_bone: DEFAULT_VERTS_PER_BONE,
        }
    }
}

impl BodyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_joints < 8 {
            return Err(Error::Config(format!(
                "body model needs at least 8 joints, got {}",
                self.num_joints
            )));
        }
        if self.num_joints != DEFAULT_NUM_JOINTS {
            return Err(Error::Config(format!(
                "only the {DEFAULT_NUM_JOINTS}-joint humanoid layout is available, got {}",
                self.num_joints
            )));
        }
        if self.verts_per_bone == 0 {
            return Err(Error::Config("vertices per bone must be positive".into()));
        }
        if self.verts_per_bone % RINGS_PER_BONE != 0 || self.verts_per_bone / RINGS_PER_BONE < 3 {
            return Err(Error::Config(format!(
                "vertices per bone must be a multiple of {RINGS_PER_BONE} with at least 3 per ring, got {}",
                self.verts_per_bone
            )));
        }
        Ok(())
    }
}

/// Rest skeleton of the humanoid layout: joint name, parent, rest position,
/// capsule end point and capsule radius. A capsule runs from its joint to
/// the listed end, which is the designated child joint or, for leaves, an
/// extension point.
struct BoneSpec {
    parent: Option<usize>,
    position: [f64; 3],
    end: BoneEnd,
    radius: f64,
}

enum BoneEnd {
    Joint(usize),
    Point([f64; 3]),
}

fn humanoid() -> Vec<BoneSpec> {
    use BoneEnd::*;
    let b = |parent, position, end, radius| BoneSpec {
        parent,
        position,
        end,
        radius,
    };
    vec![
        b(None, [0.0, 0.0, 0.0], Joint(7), 0.13),
        b(Some(0), [0.1, 0.05, 0.0], Joint(2), 0.07),
        b(Some(1), [0.1, 0.48, 0.0], Joint(3), 0.05),
        b(Some(2), [0.1, 0.9, 0.0], Point([0.1, 0.94, -0.14]), 0.04),
        b(Some(0), [-0.1, 0.05, 0.0], Joint(5), 0.07),
        b(Some(4), [-0.1, 0.48, 0.0], Joint(6), 0.05),
        b(Some(5), [-0.1, 0.9, 0.0], Point([-0.1, 0.94, -0.14]), 0.04),
        b(Some(0), [0.0, -0.25, 0.0], Joint(8), 0.14),
        b(Some(7), [0.0, -0.5, 0.0], Joint(9), 0.05),
        b(Some(8), [0.0, -0.62, 0.0], Point([0.0, -0.82, 0.0]), 0.1),
        b(Some(8), [0.18, -0.48, 0.0], Joint(11), 0.045),
        b(Some(10), [0.38, -0.28, 0.0], Joint(12), 0.04),
        b(Some(11), [0.56, -0.08, 0.0], Point([0.62, -0.02, 0.0]), 0.035),
        b(Some(8), [-0.18, -0.48, 0.0], Joint(14), 0.045),
        b(Some(13), [-0.38, -0.28, 0.0], Joint(15), 0.04),
        b(Some(14), [-0.56, -0.08, 0.0], Point([-0.62, -0.02, 0.0]), 0.035),
    ]
}

/// Superset rows beyond the kinematic joints, as (leaf joint) whose capsule
/// end they sit on: left toe, right toe, head top.
const EXTRA_LANDMARK_BONES: [usize; 3] = [3, 6, 9];

/// Root-chain joints whose vertices lengthen under the limb-length mode.
const LIMB_ROOTS: [usize; 4] = [1, 4, 10, 13];
const TORSO_BONES: [usize; 3] = [0, 7, 8];

#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    pub seed: u64,
    pub config: BodyModelConfig,
    /// V×3
    pub template_vertices: Array2<f64>,
    /// V×3×NUM_BETAS displacement per unit coefficient.
    pub shape_dirs: Array3<f64>,
    /// V×K
    pub skin_weights: Array2<f64>,
    /// J_s×V; the first K rows regress the kinematic joints.
    pub joint_regressor: Array2<f64>,
    pub parents: Vec<Option<usize>>,
    /// K×3, equal to the first K regressor rows applied to the template.
    pub rest_joints: Array2<f64>,
    pub faces: Vec<[u32; 3]>,
}

/// Rigid map x ↦ R·x + t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub theta_g: [f64; 3],
    /// One axis-angle per non-root joint.
    pub theta: Vec<[f64; 3]>,
    pub beta: [f64; NUM_BETAS],
    /// Weak-perspective camera (scale, t_x, t_y); crop pixels for the translation.
    pub k: [f64; 3],
}

impl BodyParams {
    pub fn zeros(num_pose_joints: usize) -> Self {
        Self {
            theta_g: [0.0; 3],
            theta: vec![[0.0; 3]; num_pose_joints],
            beta: [0.0; NUM_BETAS],
            k: [1.0, 0.0, 0.0],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.theta_g.iter().all(|v| v.is_finite())
            && self.theta.iter().flatten().all(|v| v.is_finite())
            && self.beta.iter().all(|v| v.is_finite())
            && self.k.iter().all(|v| v.is_finite())
    }

    /// θ^g, θ and β flattened in that order (the supervised entries).
    pub fn pose_shape_vector(&self) -> Vec<f64> {
        let mut v = self.theta_g.to_vec();
        v.extend(self.theta.iter().flatten());
        v.extend(self.beta);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
}

impl Mesh {
    /// Wavefront OBJ text (1-based face indices).
    pub fn to_obj(&self) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 32 + self.faces.len() * 16);
        for v in &self.vertices {
            s.push_str(&format!("v {:.6} {:.6} {:.6}\n", v.x, v.y, v.z));
        }
        for f in &self.faces {
            s.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
        }
        s
    }
}

/// Axis-angle to rotation matrix.
pub fn rodrigues(axis_angle: &Vector3<f64>) -> Matrix3<f64> {
    let angle = axis_angle.norm();
    if angle == 0.0 {
        return Matrix3::identity();
    }
    let k = axis_angle / angle;
    let skew = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() + skew * angle.sin() + skew * skew * (1.0 - angle.cos())
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl BodyModel {
    pub fn build(seed: u64, config: BodyModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bones = humanoid();
        let k = bones.len();
        let ring = config.verts_per_bone / RINGS_PER_BONE;
        let nv = k * config.verts_per_bone;

        let radii: Vec<f64> = bones
            .iter()
            .map(|b| b.radius * rng.random_range(0.95..1.05))
            .collect();

        let mut template = Array2::<f64>::zeros((nv, 3));
        let mut skin = Array2::<f64>::zeros((nv, k));
        let mut vertex_bone = vec![0usize; nv];
        let mut faces = Vec::new();
        let mut ends = Vec::with_capacity(k);

        for (j, bone) in bones.iter().enumerate() {
            let start = Vector3::from(bone.position);
            let (end, child) = match bone.end {
                BoneEnd::Joint(c) => (Vector3::from(bones[c].position), Some(c)),
                BoneEnd::Point(p) => (Vector3::from(p), None),
            };
            ends.push(end);
            let axis = (end - start).normalize();
            let reference = if axis.x.abs() < 0.9 {
                Vector3::x()
            } else {
                Vector3::y()
            };
            let u = axis.cross(&reference).normalize();
            let w = axis.cross(&u);
            let r = radii[j];
            let centers = [
                start - axis * (0.5 * r),
                (start + end) * 0.5,
                end + axis * (0.5 * r),
            ];
            let base = j * config.verts_per_bone;
            for (ri, c) in centers.iter().enumerate() {
                for q in 0..ring {
                    let phi = 2.0 * std::f64::consts::PI * q as f64 / ring as f64;
                    let p = c + (u * phi.cos() + w * phi.sin()) * r;
                    let vi = base + ri * ring + q;
                    for a in 0..3 {
                        template[[vi, a]] = round_f32(p[a]);
                    }
                    vertex_bone[vi] = j;
                    let blend = match (ri, bone.parent, child) {
                        (0, Some(p), _) => Some(p),
                        (2, _, Some(c)) => Some(c),
                        _ => None,
                    };
                    match blend {
                        Some(other) => {
                            skin[[vi, j]] = 0.625;
                            skin[[vi, other]] = 0.375;
                        }
                        None => skin[[vi, j]] = 1.0,
                    }
                }
            }
            let idx = |ri: usize, q: usize| (base + ri * ring + q % ring) as u32;
            for ri in 0..RINGS_PER_BONE - 1 {
                for q in 0..ring {
                    faces.push([idx(ri, q), idx(ri + 1, q), idx(ri + 1, q + 1)]);
                    faces.push([idx(ri, q), idx(ri + 1, q + 1), idx(ri, q + 1)]);
                }
            }
            for q in 1..ring - 1 {
                faces.push([idx(0, 0), idx(0, q + 1), idx(0, q)]);
                let last = RINGS_PER_BONE - 1;
                faces.push([idx(last, 0), idx(last, q), idx(last, q + 1)]);
            }
        }

        let mut targets: Vec<Vector3<f64>> =
            bones.iter().map(|b| Vector3::from(b.position)).collect();
        targets.extend(EXTRA_LANDMARK_BONES.iter().map(|&b| ends[b]));
        debug_assert_eq!(targets.len(), NUM_SUPERSET);

        let mut regressor = Array2::<f64>::zeros((NUM_SUPERSET, nv));
        let w = 1.0 / REGRESSOR_NEIGHBORS as f64;
        for (row, t) in targets.iter().enumerate() {
            let mut order: Vec<(f64, usize)> = (0..nv)
                .map(|vi| {
                    let p = Vector3::new(template[[vi, 0]], template[[vi, 1]], template[[vi, 2]]);
                    ((p - t).norm_squared(), vi)
                })
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, vi) in order.iter().take(REGRESSOR_NEIGHBORS) {
                regressor[[row, vi]] = w;
            }
        }

        let mut rest_joints = Array2::<f64>::zeros((k, 3));
        for j in 0..k {
            for a in 0..3 {
                let s: f64 = (0..nv).map(|vi| regressor[[j, vi]] * template[[vi, a]]).sum();
                rest_joints[[j, a]] = round_f32(s);
            }
        }

        let shape_dirs = build_shape_dirs(&template, &vertex_bone, &bones, &rest_joints, &mut rng);

        Ok(Self {
            seed,
            config,
            template_vertices: template,
            shape_dirs,
            skin_weights: skin,
            joint_regressor: regressor,
            parents: bones.iter().map(|b| b.parent).collect(),
            rest_joints,
            faces,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.template_vertices.nrows()
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    /// Non-root joints, i.e. axis-angle triplets in θ.
    pub fn num_pose_joints(&self) -> usize {
        self.num_joints() - 1
    }

    pub fn template(&self) -> Vec<Vector3<f64>> {
        rows3(&self.template_vertices)
    }

    pub fn rest_joint_positions(&self) -> Vec<Vector3<f64>> {
        rows3(&self.rest_joints)
    }

    /// Bone (kinematic joint) each vertex belongs to.
    pub fn vertex_bones(&self) -> Vec<usize> {
        (0..self.num_vertices())
            .map(|v| v / self.config.verts_per_bone)
            .collect()
    }

    /// Template plus shape blend.
    pub fn shaped_vertices(&self, beta: &[f64; NUM_BETAS]) -> Vec<Vector3<f64>> {
        (0..self.num_vertices())
            .map(|v| {
                Vector3::from_fn(|a, _| {
                    self.template_vertices[[v, a]]
                        + (0..NUM_BETAS)
                            .map(|i| beta[i] * self.shape_dirs[[v, a, i]])
                            .sum::<f64>()
                })
            })
            .collect()
    }

    fn kinematic_joints(&self, vertices: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        (0..self.num_joints())
            .map(|j| weighted_sum(self.joint_regressor.row(j).iter().copied(), vertices))
            .collect()
    }

    /// Skinning transforms about the given rest joints.
    pub fn forward_kinematics_at(
        &self,
        joints: &[Vector3<f64>],
        theta_g: &[f64; 3],
        theta: &[[f64; 3]],
    ) -> Vec<RigidTransform> {
        let k = self.num_joints();
        assert_eq!(theta.len(), k - 1, "theta must have one triplet per non-root joint");
        let mut world_r = Vec::with_capacity(k);
        let mut world_t: Vec<Vector3<f64>> = Vec::with_capacity(k);
        for j in 0..k {
            let aa = if j == 0 { theta_g } else { &theta[j - 1] };
            let local = rodrigues(&Vector3::from(*aa));
            match self.parents[j] {
                None => {
                    world_r.push(local);
                    world_t.push(joints[j]);
                }
                Some(p) => {
                    world_r.push(world_r[p] * local);
                    world_t.push(world_r[p] * (joints[j] - joints[p]) + world_t[p]);
                }
            }
        }
        (0..k)
            .map(|j| RigidTransform {
                rotation: world_r[j],
                translation: world_t[j] - world_r[j] * joints[j],
            })
            .collect()
    }

    /// Per-joint skinning transforms at the rest shape. Identity everywhere
    /// for zero angles; joint j's posed position is `transforms[j]` applied
    /// to its rest position.
    pub fn forward_kinematics(&self, theta_g: &[f64; 3], theta: &[[f64; 3]]) -> Vec<RigidTransform> {
        self.forward_kinematics_at(&self.rest_joint_positions(), theta_g, theta)
    }

    pub fn decode(&self, params: &BodyParams) -> Mesh {
        let shaped = self.shaped_vertices(&params.beta);
        let joints = self.kinematic_joints(&shaped);
        let transforms = self.forward_kinematics_at(&joints, &params.theta_g, &params.theta);
        let vertices = shaped
            .iter()
            .enumerate()
            .map(|(v, p)| {
                let mut out = Vector3::zeros();
                for (j, t) in transforms.iter().enumerate() {
                    let w = self.skin_weights[[v, j]];
                    if w != 0.0 {
                        out += t.apply(p) * w;
                    }
                }
                out
            })
            .collect();
        Mesh {
            vertices,
            faces: self.faces.clone(),
        }
    }

    /// Superset joints from a mesh of this model.
    pub fn regress_joints(&self, mesh: &Mesh) -> Vec<Vector3<f64>> {
        assert_eq!(mesh.vertices.len(), self.num_vertices(), "mesh topology mismatch");
        (0..self.joint_regressor.nrows())
            .map(|j| weighted_sum(self.joint_regressor.row(j).iter().copied(), &mesh.vertices))
            .collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        archive::save(self, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        archive::load(path)
    }
}

fn rows3(a: &Array2<f64>) -> Vec<Vector3<f64>> {
    a.rows()
        .into_iter()
        .map(|r| Vector3::new(r[0], r[1], r[2]))
        .collect()
}

fn weighted_sum(weights: impl Iterator<Item = f64>, points: &[Vector3<f64>]) -> Vector3<f64> {
    weights
        .zip(points)
        .filter(|(w, _)| *w != 0.0)
        .fold(Vector3::zeros(), |acc, (w, p)| acc + p * w)
}

fn build_shape_dirs(
    template: &Array2<f64>,
    vertex_bone: &[usize],
    bones: &[BoneSpec],
    rest_joints: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let nv = template.nrows();
    let vertex = |v: usize| Vector3::new(template[[v, 0]], template[[v, 1]], template[[v, 2]]);
    let joint = |j: usize| Vector3::new(rest_joints[[j, 0]], rest_joints[[j, 1]], rest_joints[[j, 2]]);
    let root = joint(0);
    // Chain root of each bone for the limb-length mode.
    let limb_root: Vec<Option<usize>> = (0..bones.len())
        .map(|mut j| loop {
            if LIMB_ROOTS.contains(&j) {
                break Some(j);
            }
            match bones[j].parent {
                Some(p) => j = p,
                None => break None,
            }
        })
        .collect();

    let mut dirs = Array3::<f64>::zeros((nv, 3, NUM_BETAS));
    let mut fields: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(NUM_BETAS);
    fields.push((0..nv).map(|v| vertex(v) - root).collect());
    fields.push(
        (0..nv)
            .map(|v| {
                if TORSO_BONES.contains(&vertex_bone[v]) {
                    let d = vertex(v) - root;
                    Vector3::new(d.x, 0.0, d.z)
                } else {
                    Vector3::zeros()
                }
            })
            .collect(),
    );
    fields.push(
        (0..nv)
            .map(|v| match limb_root[vertex_bone[v]] {
                Some(r) => vertex(v) - joint(r),
                None => Vector3::zeros(),
            })
            .collect(),
    );
    while fields.len() < NUM_BETAS {
        let waves: Vec<(Vector3<f64>, Vector3<f64>, f64)> = (0..3)
            .map(|_| {
                let amp = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                let freq = Vector3::from_fn(|_, _| rng.random_range(-4.0..4.0));
                (amp, freq, rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        fields.push(
            (0..nv)
                .map(|v| {
                    let p = vertex(v);
                    waves
                        .iter()
                        .fold(Vector3::zeros(), |acc, (a, f, ph)| acc + a * (f.dot(&p) + ph).sin())
                })
                .collect(),
        );
    }
    for (i, field) in fields.iter().enumerate() {
        let rms = (field.iter().map(|d| d.norm_squared()).sum::<f64>() / nv as f64).sqrt();
        let scale = SHAPE_UNIT_RMS / rms;
        for (v, d) in field.iter().enumerate() {
            for a in 0..3 {
                dirs[[v, a, i]] = round_f32(d[a] * scale);
            }
        }
    }
    dirs
}
