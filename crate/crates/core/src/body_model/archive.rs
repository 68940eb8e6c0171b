//! Single-file model archive: magic, u32 header length, JSON header, then
//! little-endian blocks in the order the header declares.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{BodyModel, BodyModelConfig, NUM_BETAS};
use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::joints::NUM_SUPERSET;

const MAGIC: &[u8; 8] = b"CRWDBODY";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    seed: u64,
    num_joints: usize,
    num_vertices: usize,
    num_faces: usize,
    verts_per_bone: usize,
    endianness: String,
    blocks: Vec<Block>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Block {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

fn block(name: &str, dtype: &str, shape: &[usize]) -> Block {
    Block {
        name: name.into(),
        dtype: dtype.into(),
        shape: shape.to_vec(),
    }
}

fn expected_blocks(k: usize, v: usize, f: usize) -> Vec<Block> {
    vec![
        block("template_vertices", "f32", &[v, 3]),
        block("shape_dirs", "f32", &[v, 3, NUM_BETAS]),
        block("skin_weights", "f32", &[v, k]),
        block("joint_regressor", "f32", &[NUM_SUPERSET, v]),
        block("rest_joints", "f32", &[k, 3]),
        block("parents", "i32", &[k]),
        block("faces", "u32", &[f, 3]),
    ]
}

pub(super) fn save(model: &BodyModel, path: &Path) -> Result<()> {
    let (k, v, f) = (model.num_joints(), model.num_vertices(), model.faces.len());
    let header = Header {
        format_version: VERSION,
        seed: model.seed,
        num_joints: k,
        num_vertices: v,
        num_faces: f,
        verts_per_bone: model.config.verts_per_bone,
        endianness: "little".into(),
        blocks: expected_blocks(k, v, f),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    binio::put_u32(&mut out, [json.len() as u32]);
    out.extend_from_slice(&json);
    binio::put_f32(&mut out, model.template_vertices.iter().map(|&x| x as f32));
    binio::put_f32(&mut out, model.shape_dirs.iter().map(|&x| x as f32));
    binio::put_f32(&mut out, model.skin_weights.iter().map(|&x| x as f32));
    binio::put_f32(&mut out, model.joint_regressor.iter().map(|&x| x as f32));
    binio::put_f32(&mut out, model.rest_joints.iter().map(|&x| x as f32));
    binio::put_i32(
        &mut out,
        model.parents.iter().map(|p| p.map_or(-1, |p| p as i32)),
    );
    binio::put_u32(&mut out, model.faces.iter().flatten().copied());
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub(super) fn load(path: &Path) -> Result<BodyModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(path, &bytes);
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Parse {
            path: path.into(),
            offset: 0,
            msg: "not a body model archive".into(),
        });
    }
    let header_len = r.u32("header length")? as usize;
    let header_start = r.offset();
    let header_bytes = r.take(header_len, "header")?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| Error::Parse {
        path: path.into(),
        offset: header_start as u64 + e.column() as u64,
        msg: e.to_string(),
    })?;
    if header.format_version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            found: header.format_version,
            expected: VERSION,
        });
    }
    if header.endianness != "little" {
        return Err(r.error(format!("unsupported endianness '{}'", header.endianness)));
    }
    let (k, v, f) = (header.num_joints, header.num_vertices, header.num_faces);
    let expected = expected_blocks(k, v, f);
    let matches = header.blocks.len() == expected.len()
        && header
            .blocks
            .iter()
            .zip(&expected)
            .all(|(a, b)| a.name == b.name && a.dtype == b.dtype && a.shape == b.shape);
    if !matches {
        return Err(r.error("block manifest does not match the model dimensions"));
    }
    let f64s = |x: Vec<f32>| x.into_iter().map(f64::from).collect::<Vec<_>>();
    let template = f64s(r.f32s(v * 3, "template_vertices")?);
    let shape_dirs = f64s(r.f32s(v * 3 * NUM_BETAS, "shape_dirs")?);
    let skin = f64s(r.f32s(v * k, "skin_weights")?);
    let regressor = f64s(r.f32s(NUM_SUPERSET * v, "joint_regressor")?);
    let rest = f64s(r.f32s(k * 3, "rest_joints")?);
    let parents_raw = r.i32s(k, "parents")?;
    let faces_raw = r.u32s(f * 3, "faces")?;
    if r.remaining() != 0 {
        return Err(r.error(format!("{} trailing bytes", r.remaining())));
    }
    let parents = parents_raw
        .iter()
        .map(|&p| if p < 0 { None } else { Some(p as usize) })
        .collect();
    let shape_err = |e: ndarray::ShapeError| Error::Shape(e.to_string());
    Ok(BodyModel {
        seed: header.seed,
        config: BodyModelConfig {
            num_joints: k,
            verts_per_bone: header.verts_per_bone,
        },
        template_vertices: Array2::from_shape_vec((v, 3), template).map_err(shape_err)?,
        shape_dirs: Array3::from_shape_vec((v, 3, NUM_BETAS), shape_dirs).map_err(shape_err)?,
        skin_weights: Array2::from_shape_vec((v, k), skin).map_err(shape_err)?,
        joint_regressor: Array2::from_shape_vec((NUM_SUPERSET, v), regressor).map_err(shape_err)?,
        parents,
        rest_joints: Array2::from_shape_vec((k, 3), rest).map_err(shape_err)?,
        faces: faces_raw.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
    })
}
