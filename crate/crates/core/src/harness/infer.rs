//! Single-person inference from an image and a 2D pose file.

use std::path::{Path, PathBuf};

use candle_core::Device;
use ndarray::Array3;

use super::visualize::{draw_points, draw_skeleton, read_png, save_png, to_rgb};
use crate::error::{Error, Result};
use crate::joints::{JointSetRegistry, COMMON, COMMON_EDGES};
use crate::model::{collate, prepare_input, CrowdNet};
use crate::pose2d::{map_to_superset, Pose2D};

#[derive(Debug, Clone, PartialEq)]
pub struct InferFiles {
    pub params: PathBuf,
    pub mesh: PathBuf,
    pub overlay: PathBuf,
}

/// Writes `<stem>_params.json`, `<stem>_mesh.obj` and `<stem>_overlay.png`.
/// `pose` is a superset pose in image pixels.
pub fn infer_arrays(net: &CrowdNet, image: &Array3<f32>, pose: &Pose2D, stem: &Path) -> Result<InferFiles> {
    let prepared = prepare_input(image.view(), pose, net.config())
        .map_err(|e| e.context("preparing the input 2D pose"))?;
    let batch = collate(std::slice::from_ref(&prepared), net.dtype(), &Device::Cpu)?;
    let out = net.forward(&batch, false)?;
    let params = net.params(&out)?.remove(0);
    let mesh = net.body_model().decode(&params);

    let name = stem
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let dir = stem.parent().unwrap_or(Path::new("."));
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let files = InferFiles {
        params: dir.join(format!("{name}_params.json")),
        mesh: dir.join(format!("{name}_mesh.obj")),
        overlay: dir.join(format!("{name}_overlay.png")),
    };
    std::fs::write(&files.params, serde_json::to_string_pretty(&params)?)
        .map_err(|e| Error::io(&files.params, e))?;
    std::fs::write(&files.mesh, mesh.to_obj()).map_err(|e| Error::io(&files.mesh, e))?;

    let inverse = prepared
        .affine
        .inverse()
        .ok_or_else(|| Error::Shape("crop transform is singular".into()))?;
    let crop_joints: Vec<Vec<f64>> = out.joints2d.squeeze(0)?.to_dtype(candle_core::DType::F64)?.to_vec2()?;
    let projected: Vec<[f64; 2]> = crop_joints.iter().map(|p| inverse.apply([p[0], p[1]])).collect();
    let common: Vec<[f64; 2]> = COMMON.iter().map(|&j| projected[j]).collect();
    let mut overlay = to_rgb(image);
    draw_skeleton(&mut overlay, &common, &COMMON_EDGES, [255, 64, 64]);
    draw_points(&mut overlay, &common, [255, 255, 255], 1);
    let kept: Vec<[f64; 2]> = pose
        .kept(net.config().keep_threshold)
        .map(|j| pose.joints[j])
        .collect();
    draw_points(&mut overlay, &kept, [64, 200, 255], 0);
    save_png(&overlay, &files.overlay)?;
    Ok(files)
}

/// Reads a 2D pose JSON (`joints`, `confidence`, `joint_set`) and maps it
/// onto the superset.
pub fn read_pose(path: &Path, registry: &JointSetRegistry) -> Result<Pose2D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let pose: Pose2D = crate::binio::parse_json(path, &text)?;
    pose.validate()
        .and_then(|_| map_to_superset(&pose, registry))
        .map_err(|e| e.context(format!("reading pose {}", path.display())))
}

pub fn infer(
    checkpoint: &Path,
    image_path: &Path,
    pose_path: &Path,
    registry: &JointSetRegistry,
    out_dir: &Path,
) -> Result<InferFiles> {
    let net = CrowdNet::load(checkpoint, &Device::Cpu)?;
    let image = read_png(image_path)?;
    let pose = read_pose(pose_path, registry)?;
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    infer_arrays(&net, &image, &pose, &out_dir.join(stem))
        .map_err(|e| e.context(format!("inference on {}", image_path.display())))
}
