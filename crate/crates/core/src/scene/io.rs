//! On-disk samples (a directory with `meta.json` plus raw little-endian
//! arrays) and datasets (samples plus `index.json`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_scene, Camera, PersonGT, SceneConfig, SceneSample};
use crate::binio::{self, Reader};
use crate::body_model::{BodyModel, BodyModelConfig, BodyParams};
use crate::error::{Error, Result};
use crate::pose2d::BBox;

pub const SAMPLE_FORMAT_VERSION: u32 = 1;
const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    id: String,
    seed: u64,
    camera: Camera,
    overlap_target: f64,
    achieved_iou: Option<f64>,
    best_effort: bool,
    persons: Vec<PersonMeta>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PersonMeta {
    params: BodyParams,
    root_position: [f64; 3],
    visible: Vec<bool>,
    bbox: BBox,
    color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    file: String,
    dtype: String,
    shape: Vec<usize>,
}

fn entry(name: &str, dtype: &str, shape: &[usize]) -> ArrayEntry {
    ArrayEntry {
        name: name.into(),
        file: format!("{name}.bin"),
        dtype: dtype.into(),
        shape: shape.to_vec(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Checks the `format_version` field before the full schema so that a
/// future layout reports a version error rather than a parse error.
fn check_version(path: &Path, text: &str, expected: u32) -> Result<()> {
    let value: serde_json::Value = binio::parse_json(path, text)?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Parse {
            path: path.into(),
            offset: 0,
            msg: "missing format_version".into(),
        })?;
    if found != expected as u64 {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            found: found as u32,
            expected,
        });
    }
    Ok(())
}

pub fn write_sample(sample: &SceneSample, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w, _) = sample.image.dim();
    let mut arrays = vec![entry("image", "u8", &[h, w, 3])];
    let image: Vec<u8> = sample
        .image
        .iter()
        .map(|&v| (v as f64 * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    write_file(&dir.join("image.bin"), &image)?;
    for (i, p) in sample.persons.iter().enumerate() {
        let sil = entry(&format!("person{i}_silhouette"), "u8", &[h, w]);
        write_file(&dir.join(&sil.file), p.silhouette.as_slice().expect("standard layout"))?;
        let j3 = entry(&format!("person{i}_joints3d_mm"), "f32", &[p.joints3d_mm.len(), 3]);
        let mut buf = Vec::new();
        binio::put_f32(&mut buf, p.joints3d_mm.iter().flatten().map(|&v| v as f32));
        write_file(&dir.join(&j3.file), &buf)?;
        let j2 = entry(&format!("person{i}_joints2d"), "f32", &[p.joints2d.len(), 2]);
        let mut buf = Vec::new();
        binio::put_f32(&mut buf, p.joints2d.iter().flatten().map(|&v| v as f32));
        write_file(&dir.join(&j2.file), &buf)?;
        arrays.extend([sil, j3, j2]);
    }
    let meta = Meta {
        format_version: SAMPLE_FORMAT_VERSION,
        id: sample.id.clone(),
        seed: sample.seed,
        camera: sample.camera,
        overlap_target: sample.overlap_target,
        achieved_iou: sample.achieved_iou,
        best_effort: sample.best_effort,
        persons: sample
            .persons
            .iter()
            .map(|p| PersonMeta {
                params: p.params.clone(),
                root_position: p.root_position,
                visible: p.visible.clone(),
                bbox: p.bbox,
                color: p.color,
            })
            .collect(),
        arrays,
    };
    write_file(&dir.join("meta.json"), serde_json::to_string_pretty(&meta)?.as_bytes())
}

struct ArrayFile {
    path: PathBuf,
    bytes: Vec<u8>,
}

impl ArrayFile {
    fn open(dir: &Path, e: &ArrayEntry, dtype: &str, shape: &[usize]) -> Result<Self> {
        let path = dir.join(&e.file);
        if e.dtype != dtype || e.shape != shape {
            return Err(Error::Parse {
                path: dir.join("meta.json"),
                offset: 0,
                msg: format!(
                    "array '{}' declared as {} {:?}, expected {dtype} {shape:?}",
                    e.name, e.dtype, e.shape
                ),
            });
        }
        let bytes = std::fs::read(&path).map_err(|err| Error::io(&path, err))?;
        let elem = if dtype == "u8" { 1 } else { 4 };
        let expected = shape.iter().product::<usize>() * elem;
        if bytes.len() != expected {
            return Err(Error::Parse {
                path,
                offset: bytes.len().min(expected) as u64,
                msg: format!("expected {expected} bytes, found {}", bytes.len()),
            });
        }
        Ok(Self { path, bytes })
    }

    fn f32s(&self) -> Result<Vec<f64>> {
        let n = self.bytes.len() / 4;
        let mut r = Reader::new(&self.path, &self.bytes);
        Ok(r.f32s(n, "values")?.into_iter().map(f64::from).collect())
    }
}

pub fn read_sample(dir: &Path) -> Result<SceneSample> {
    let meta_path = dir.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    check_version(&meta_path, &text, SAMPLE_FORMAT_VERSION)?;
    let meta: Meta = binio::parse_json(&meta_path, &text)?;
    let find = |name: &str| -> Result<&ArrayEntry> {
        meta.arrays.iter().find(|a| a.name == name).ok_or_else(|| Error::Parse {
            path: meta_path.clone(),
            offset: 0,
            msg: format!("array manifest lacks '{name}'"),
        })
    };
    let (h, w) = (meta.camera.height, meta.camera.width);
    let img = ArrayFile::open(dir, find("image")?, "u8", &[h, w, 3])?;
    let image = Array3::from_shape_vec(
        (h, w, 3),
        img.bytes.iter().map(|&q| (q as f64 / 255.0) as f32).collect(),
    )
    .map_err(|e| Error::Shape(e.to_string()))?;
    let mut persons = Vec::with_capacity(meta.persons.len());
    for (i, pm) in meta.persons.into_iter().enumerate() {
        let n = pm.visible.len();
        let sil = ArrayFile::open(dir, find(&format!("person{i}_silhouette"))?, "u8", &[h, w])?;
        let j3 = ArrayFile::open(dir, find(&format!("person{i}_joints3d_mm"))?, "f32", &[n, 3])?.f32s()?;
        let j2 = ArrayFile::open(dir, find(&format!("person{i}_joints2d"))?, "f32", &[n, 2])?.f32s()?;
        persons.push(PersonGT {
            params: pm.params,
            root_position: pm.root_position,
            joints3d_mm: j3.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            joints2d: j2.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
            visible: pm.visible,
            silhouette: Array2::from_shape_vec((h, w), sil.bytes)
                .map_err(|e| Error::Shape(e.to_string()))?,
            bbox: pm.bbox,
            color: pm.color,
        });
    }
    Ok(SceneSample {
        id: meta.id,
        seed: meta.seed,
        camera: meta.camera,
        image,
        persons,
        overlap_target: meta.overlap_target,
        achieved_iou: meta.achieved_iou,
        best_effort: meta.best_effort,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub scenes: usize,
    pub overlap_target: f64,
    #[serde(default)]
    pub n_persons: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub base_seed: u64,
    pub body_model_seed: u64,
    #[serde(default)]
    pub body_model: BodyModelConfig,
    #[serde(default)]
    pub scene: SceneConfig,
    pub splits: Vec<SplitSpec>,
}

impl DatasetSpec {
    /// 256 overlapping training scenes, a 64-scene overlapping test split
    /// and a 64-scene non-overlapping one.
    pub fn desk(base_seed: u64) -> Self {
        let split = |name: &str, scenes, overlap_target| SplitSpec {
            name: name.into(),
            scenes,
            overlap_target,
            n_persons: None,
        };
        Self {
            base_seed,
            body_model_seed: 0,
            body_model: BodyModelConfig::default(),
            scene: SceneConfig::default(),
            splits: vec![
                split("train", 256, 0.4),
                split("test", 64, 0.4),
                split("test_easy", 64, 0.0),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.body_model.validate()?;
        let mut names = std::collections::BTreeSet::new();
        for s in &self.splits {
            if !names.insert(&s.name) {
                return Err(Error::Config(format!("duplicate split '{}'", s.name)));
            }
            let cfg = self.split_config(s);
            cfg.validate()?;
        }
        if self.splits.is_empty() {
            return Err(Error::Config("dataset needs at least one split".into()));
        }
        Ok(())
    }

    fn split_config(&self, s: &SplitSpec) -> SceneConfig {
        SceneConfig {
            overlap_target: s.overlap_target,
            n_persons: s.n_persons.unwrap_or(self.scene.n_persons),
            ..self.scene.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub spec: DatasetSpec,
    pub splits: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
}

const BODY_MODEL_FILE: &str = "body_model.bin";

/// Generates every split in parallel; sample `i` (counted across splits in
/// order) uses seed `base_seed + i`.
pub fn generate_dataset(root: &Path, spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    std::fs::create_dir_all(root.join("samples")).map_err(|e| Error::io(root, e))?;
    let model = BodyModel::build(spec.body_model_seed, spec.body_model)?;
    model.save(&root.join(BODY_MODEL_FILE))?;
    let mut jobs = Vec::new();
    let mut splits = BTreeMap::new();
    for s in &spec.splits {
        let cfg = spec.split_config(s);
        let mut ids = Vec::with_capacity(s.scenes);
        for _ in 0..s.scenes {
            let index = jobs.len() as u64;
            let id = format!("{index:06}");
            ids.push(id.clone());
            jobs.push((id, spec.base_seed + index, cfg.clone()));
        }
        splits.insert(s.name.clone(), ids);
    }
    jobs.par_iter().try_for_each(|(id, seed, cfg)| -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(*seed);
        let sample = generate_scene(&mut rng, &model, cfg, id, *seed)?;
        write_sample(&sample, &root.join("samples").join(id))
    })?;
    let index = DatasetIndex {
        format_version: DATASET_FORMAT_VERSION,
        spec: spec.clone(),
        splits,
    };
    let path = root.join("index.json");
    write_file(&path, serde_json::to_string_pretty(&index)?.as_bytes())?;
    Ok(Dataset {
        root: root.to_path_buf(),
        index,
    })
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("index.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        check_version(&path, &text, DATASET_FORMAT_VERSION)?;
        Ok(Self {
            root: root.to_path_buf(),
            index: binio::parse_json(&path, &text)?,
        })
    }

    pub fn split_ids(&self, split: &str) -> Result<&[String]> {
        self.index
            .splits
            .get(split)
            .map(Vec::as_slice)
            .ok_or_else(|| {
                let known: Vec<&str> = self.index.splits.keys().map(String::as_str).collect();
                Error::Config(format!("unknown split '{split}' (available: {})", known.join(", ")))
            })
    }

    pub fn sample_dir(&self, id: &str) -> PathBuf {
        self.root.join("samples").join(id)
    }

    pub fn load(&self, id: &str) -> Result<SceneSample> {
        read_sample(&self.sample_dir(id)).map_err(|e| e.context(format!("loading sample '{id}'")))
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<SceneSample>> {
        self.split_ids(split)?.par_iter().map(|id| self.load(id)).collect()
    }

    pub fn body_model(&self) -> Result<BodyModel> {
        BodyModel::load(&self.root.join(BODY_MODEL_FILE))
    }
}
