//! Evaluation: predicted body-model joints against ground truth.

use std::path::Path;

use candle_core::Device;
use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::EvalConfig;
use super::train::{check_body_model, person_index};
use crate::body_model::{BodyModel, Mesh};
use crate::error::Result;
use crate::joints::{COMMON, ROOT};
use crate::metrics::{evaluate_records, MetricsReport, PoseRecord};
use crate::model::{collate, prepare_person, sample_rng, CrowdNet, PreparedPerson};
use crate::pose2d::crop_and_resize;
use crate::scene::{Dataset, SceneSample};

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<PoseRecord>,
    pub ground_truth: Vec<PoseRecord>,
}

/// Common-set joints and all vertices, root-centered, in mm.
pub fn mesh_record(
    body_model: &BodyModel,
    mesh: &Mesh,
    sample_id: &str,
    person: usize,
    sequence: &str,
) -> PoseRecord {
    let joints = body_model.regress_joints(mesh);
    let root = joints[ROOT];
    let mm = |p: &Vector3<f64>| {
        let q = (p - root) * 1000.0;
        [q.x, q.y, q.z]
    };
    PoseRecord {
        sample_id: sample_id.to_string(),
        person,
        sequence: sequence.to_string(),
        joints_mm: COMMON.iter().map(|&j| mm(&joints[j])).collect(),
        vertices_mm: Some(mesh.vertices.iter().map(mm).collect()),
    }
}

pub fn ground_truth_records(
    body_model: &BodyModel,
    samples: &[SceneSample],
    sequence: &str,
) -> Vec<PoseRecord> {
    person_index(samples, None)
        .par_iter()
        .map(|&(s, p)| {
            let sample = &samples[s];
            let mesh = body_model.decode(&sample.persons[p].params);
            let mut rec = mesh_record(body_model, &mesh, &sample.id, p, sequence);
            rec.joints_mm = COMMON.iter().map(|&j| sample.persons[p].joints3d_mm[j]).collect();
            rec
        })
        .collect()
}

/// Prepares every person of `samples` with the evaluation input policy.
pub fn prepare_eval_inputs(
    net: &CrowdNet,
    samples: &[SceneSample],
    config: &EvalConfig,
) -> Result<Vec<((usize, usize), PreparedPerson)>> {
    let persons = person_index(samples, None);
    persons
        .par_iter()
        .enumerate()
        .map(|(i, &(s, p))| {
            let prepared = if config.synthesize_errors {
                let mut rng = sample_rng(config.seed, 0, i as u64);
                prepare_person(
                    &samples[s],
                    p,
                    net.config(),
                    Some((&config.errors, &mut rng)),
                )?
            } else {
                prepare_person(&samples[s], p, net.config(), None)?
            };
            Ok(((s, p), prepared))
        })
        .collect()
}

pub fn predict(
    net: &CrowdNet,
    samples: &[SceneSample],
    config: &EvalConfig,
    sequence: &str,
) -> Result<Vec<PoseRecord>> {
    let inputs = prepare_eval_inputs(net, samples, config)?;
    let mut records = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(config.batch_size) {
        let items: Vec<PreparedPerson> = chunk.iter().map(|(_, p)| p.clone()).collect();
        let batch = collate(&items, net.dtype(), &Device::Cpu)?;
        let out = net.forward(&batch, false)?;
        let meshes = net.meshes(&out)?;
        for (((s, p), _), mesh) in chunk.iter().zip(&meshes) {
            records.push(mesh_record(net.body_model(), mesh, &samples[*s].id, *p, sequence));
        }
    }
    Ok(records)
}

pub fn evaluate_samples(
    net: &CrowdNet,
    samples: &[SceneSample],
    dataset_model: &BodyModel,
    config: &EvalConfig,
    sequence: &str,
) -> Result<Evaluation> {
    check_body_model(net, dataset_model)?;
    let predictions = predict(net, samples, config, sequence)?;
    let ground_truth = ground_truth_records(dataset_model, samples, sequence);
    let report = evaluate_records(&predictions, &ground_truth, config.pck_threshold_mm)?;
    Ok(Evaluation {
        report,
        predictions,
        ground_truth,
    })
}

pub fn evaluate(checkpoint: &Path, dataset: &Path, config: &EvalConfig) -> Result<Evaluation> {
    let net = CrowdNet::load(checkpoint, &Device::Cpu)?;
    let ds = Dataset::open(dataset)?;
    let samples = ds.load_split(&config.split)?;
    evaluate_samples(&net, &samples, &ds.body_model()?, config, &config.split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStat {
    pub sample_id: String,
    pub person: usize,
    /// Mean |F′| over cells touched by the target's silhouette.
    pub target_mean: f64,
    /// Mean |F′| over cells touched by other persons but not the target.
    pub other_mean: f64,
}

/// Silhouette coverage fraction per F′ cell, from an H×W mask through the
/// person's crop.
fn cell_coverage(mask: &Array2<u8>, prepared: &PreparedPerson, crop: usize, cells: usize) -> Array2<f64> {
    let (h, w) = mask.dim();
    let img = Array3::from_shape_fn((h, w, 1), |(r, c, _)| f32::from(mask[[r, c]] != 0));
    let (m, _) = crop_and_resize(img.view(), &prepared.bbox, (crop, crop));
    let per = crop / cells;
    Array2::from_shape_fn((cells, cells), |(r, c)| {
        let mut s = 0.0;
        for y in r * per..(r + 1) * per {
            for x in c * per..(c + 1) * per {
                s += m[[0, y, x]] as f64;
            }
        }
        s / (per * per) as f64
    })
}

/// For every person in multi-person scenes: mean |F′| (over channels) on
/// the target's cells vs. on cells only other persons cover. Persons whose
/// crop shows no exclusive other cell are skipped.
pub fn activation_contrast(
    net: &CrowdNet,
    samples: &[SceneSample],
    config: &EvalConfig,
) -> Result<Vec<ActivationStat>> {
    let inputs = prepare_eval_inputs(net, samples, config)?;
    let crop = net.config().crop_size;
    let mut stats = Vec::new();
    for chunk in inputs.chunks(config.batch_size) {
        let items: Vec<PreparedPerson> = chunk.iter().map(|(_, p)| p.clone()).collect();
        let batch = collate(&items, net.dtype(), &Device::Cpu)?;
        let out = net.forward(&batch, false)?;
        let act = out.features.data.abs()?.mean(1)?.to_dtype(candle_core::DType::F64)?;
        let cells = act.dim(1)?;
        let act: Vec<Vec<Vec<f64>>> = act.to_vec3()?;
        for (b, ((s, p), prepared)) in chunk.iter().enumerate() {
            let sample = &samples[*s];
            if sample.persons.len() < 2 {
                continue;
            }
            let target = cell_coverage(&sample.persons[*p].silhouette, prepared, crop, cells);
            let mut other = Array2::<f64>::zeros((cells, cells));
            for (q, person) in sample.persons.iter().enumerate() {
                if q != *p {
                    other += &cell_coverage(&person.silhouette, prepared, crop, cells);
                }
            }
            let mean_over = |cell: &dyn Fn(usize, usize) -> bool| {
                let mut num = 0.0;
                let mut n = 0usize;
                for r in 0..cells {
                    for c in 0..cells {
                        if cell(r, c) {
                            num += act[b][r][c];
                            n += 1;
                        }
                    }
                }
                (n > 0).then(|| num / n as f64)
            };
            let t = mean_over(&|r, c| target[[r, c]] > 0.0);
            let o = mean_over(&|r, c| other[[r, c]] > 0.0 && target[[r, c]] == 0.0);
            if let (Some(t), Some(o)) = (t, o) {
                stats.push(ActivationStat {
                    sample_id: sample.id.clone(),
                    person: *p,
                    target_mean: t,
                    other_mean: o,
                });
            }
        }
    }
    Ok(stats)
}
