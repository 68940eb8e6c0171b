//! Evaluation metrics (MPJPE, PA-MPJPE, 3DPCK, MPVPE), crowd statistics and
//! the report / interchange formats.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose2d::{BBox, Pose2D};

pub const DEFAULT_PCK_THRESHOLD_MM: f64 = 150.0;

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} predicted vs {b} ground-truth points")));
    }
    if a == 0 {
        return Err(Error::Shape(format!("{what}: no points")));
    }
    Ok(())
}

fn mean_distance(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| (p - g).norm()).sum::<f64>() / pred.len() as f64
}

/// Mean per-joint Euclidean distance; inputs already root-centered.
pub fn mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    check_len(pred.len(), gt.len(), "mpjpe")?;
    Ok(mean_distance(pred, gt))
}

#[derive(Debug, Clone)]
pub struct Alignment {
    pub aligned: Vec<Vector3<f64>>,
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

fn centroid(p: &[Vector3<f64>]) -> Vector3<f64> {
    p.iter().sum::<Vector3<f64>>() / p.len() as f64
}

/// Similarity transform s·R·p + t minimizing squared error to `gt`, with
/// det R = +1.
pub fn procrustes_align(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Alignment> {
    check_len(pred.len(), gt.len(), "procrustes_align")?;
    let n = pred.len();
    if n < 3 {
        return Err(Error::Alignment(format!("need at least 3 points, got {n}")));
    }
    let mp = centroid(pred);
    let mg = centroid(gt);
    let mut cov = Matrix3::zeros();
    let mut gt_scatter = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (p, g) = (p - mp, g - mg);
        cov += g * p.transpose();
        gt_scatter += g * g.transpose();
        var_p += p.norm_squared();
    }
    let gt_sv = gt_scatter.singular_values();
    let mut sorted = [gt_sv[0], gt_sv[1], gt_sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if !(sorted[0] > 0.0) || sorted[1] <= 1e-12 * sorted[0] {
        return Err(Error::Alignment("ground-truth points are collinear or coincident".into()));
    }
    if !(var_p > 0.0) {
        return Err(Error::Alignment("predicted points coincide".into()));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let d = if (u.determinant() * v_t.determinant()) < 0.0 { -1.0 } else { 1.0 };
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * correction * v_t;
    let trace = svd.singular_values[0] + svd.singular_values[1] + d * svd.singular_values[2];
    let scale = trace / var_p;
    let translation = mg - scale * rotation * mp;
    let aligned = pred.iter().map(|p| scale * rotation * p + translation).collect();
    Ok(Alignment {
        aligned,
        scale,
        rotation,
        translation,
    })
}

pub fn pa_mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    let a = procrustes_align(pred, gt)?;
    mpjpe(&a.aligned, gt)
}

/// Percentage of joints within `threshold_mm` (inclusive), root-relative.
pub fn pck3d(pred: &[Vector3<f64>], gt: &[Vector3<f64>], threshold_mm: f64) -> Result<f64> {
    check_len(pred.len(), gt.len(), "pck3d")?;
    let hits = pred.iter().zip(gt).filter(|(p, g)| (*p - *g).norm() <= threshold_mm).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// Mean per-vertex distance between root-centered meshes of one topology.
pub fn mpvpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "mesh topology mismatch: {} vs {} vertices",
            pred.len(),
            gt.len()
        )));
    }
    check_len(pred.len(), gt.len(), "mpvpe")?;
    Ok(mean_distance(pred, gt))
}

fn joints_in(pose: &Pose2D, bbox: &BBox) -> usize {
    pose.joints
        .iter()
        .zip(&pose.confidence)
        .filter(|(j, &c)| c > 0.0 && bbox.contains(**j))
        .count()
}

/// Other people's joints over the target's joints inside `bbox`. Only
/// joints with positive confidence count.
pub fn crowd_index(target: &Pose2D, others: &[Pose2D], bbox: &BBox) -> Result<f64> {
    let own = joints_in(target, bbox);
    if own == 0 {
        return Err(Error::UndefinedRatio("no target joints inside the bounding box".into()));
    }
    let other: usize = others.iter().map(|p| joints_in(p, bbox)).sum();
    Ok(other as f64 / own as f64)
}

pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

/// One evaluated person: joints and optional mesh, in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub sample_id: String,
    pub person: usize,
    pub sequence: String,
    pub joints_mm: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vertices_mm: Option<Vec<[f64; 3]>>,
}

impl PoseRecord {
    fn key(&self) -> (String, usize) {
        (self.sample_id.clone(), self.person)
    }
}

pub fn write_records(path: &Path, records: &[PoseRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<PoseRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    crate::binio::parse_json(path, &text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub person: usize,
    pub sequence: String,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub pck3d_percent: f64,
    pub mpvpe_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub sequence: String,
    pub n_samples: usize,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub pck3d_percent: f64,
    pub mpvpe_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub pck3d_percent: f64,
    pub mpvpe_mm: f64,
    pub n_samples: usize,
    pub per_sequence: Vec<SequenceMetrics>,
    pub per_sample: Vec<SampleMetrics>,
}

fn to_vec3(a: &[[f64; 3]]) -> Vec<Vector3<f64>> {
    a.iter().map(|p| Vector3::from(*p)).collect()
}

fn root_centered(a: &[[f64; 3]]) -> Vec<Vector3<f64>> {
    let v = to_vec3(a);
    let root = v[crate::joints::ROOT];
    v.iter().map(|p| p - root).collect()
}

/// Scores one person. Joints and vertices are root-centered on each
/// side's pelvis joint before comparison.
pub fn score(pred: &PoseRecord, gt: &PoseRecord, pck_threshold_mm: f64) -> Result<SampleMetrics> {
    check_len(pred.joints_mm.len(), gt.joints_mm.len(), "joint set")?;
    let p = root_centered(&pred.joints_mm);
    let g = root_centered(&gt.joints_mm);
    let mpvpe_mm = match (&pred.vertices_mm, &gt.vertices_mm) {
        (Some(pv), Some(gv)) => {
            let (pr, gr) = (p_root(&pred.joints_mm), p_root(&gt.joints_mm));
            let pv: Vec<_> = to_vec3(pv).iter().map(|v| v - pr).collect();
            let gv: Vec<_> = to_vec3(gv).iter().map(|v| v - gr).collect();
            Some(mpvpe(&pv, &gv)?)
        }
        _ => None,
    };
    Ok(SampleMetrics {
        sample_id: gt.sample_id.clone(),
        person: gt.person,
        sequence: gt.sequence.clone(),
        mpjpe_mm: mpjpe(&p, &g)?,
        pa_mpjpe_mm: pa_mpjpe(&p, &g)?,
        pck3d_percent: pck3d(&p, &g, pck_threshold_mm)?,
        mpvpe_mm,
    })
}

fn p_root(joints: &[[f64; 3]]) -> Vector3<f64> {
    Vector3::from(joints[crate::joints::ROOT])
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl MetricsReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>) -> Self {
        let summarize = |rows: &[&SampleMetrics]| {
            (
                mean(rows.iter().map(|r| r.mpjpe_mm)),
                mean(rows.iter().map(|r| r.pa_mpjpe_mm)),
                mean(rows.iter().map(|r| r.pck3d_percent)),
                mean(rows.iter().filter_map(|r| r.mpvpe_mm)),
            )
        };
        let mut groups: BTreeMap<&str, Vec<&SampleMetrics>> = BTreeMap::new();
        for r in &per_sample {
            groups.entry(&r.sequence).or_default().push(r);
        }
        let per_sequence = groups
            .iter()
            .map(|(name, rows)| {
                let (a, b, c, d) = summarize(rows);
                SequenceMetrics {
                    sequence: name.to_string(),
                    n_samples: rows.len(),
                    mpjpe_mm: a,
                    pa_mpjpe_mm: b,
                    pck3d_percent: c,
                    mpvpe_mm: d,
                }
            })
            .collect();
        let all: Vec<&SampleMetrics> = per_sample.iter().collect();
        let (a, b, c, d) = summarize(&all);
        Self {
            mpjpe_mm: a,
            pa_mpjpe_mm: b,
            pck3d_percent: c,
            mpvpe_mm: d,
            n_samples: per_sample.len(),
            per_sequence,
            per_sample,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:>10} {:>12} {:>10} {:>10}",
            "sequence", "n", "MPJPE", "PA-MPJPE", "3DPCK", "MPVPE"
        );
        let mut row = |name: &str, n: usize, a: f64, b: f64, c: f64, d: f64| {
            let _ = writeln!(s, "{name:<16} {n:>6} {a:>10.2} {b:>12.2} {c:>10.2} {d:>10.2}");
        };
        for q in &self.per_sequence {
            row(&q.sequence, q.n_samples, q.mpjpe_mm, q.pa_mpjpe_mm, q.pck3d_percent, q.mpvpe_mm);
        }
        row(
            "all",
            self.n_samples,
            self.mpjpe_mm,
            self.pa_mpjpe_mm,
            self.pck3d_percent,
            self.mpvpe_mm,
        );
        s
    }
}

/// Matches predictions to ground truth by (sample_id, person) and scores
/// every pair in parallel.
pub fn evaluate_records(
    preds: &[PoseRecord],
    gts: &[PoseRecord],
    pck_threshold_mm: f64,
) -> Result<MetricsReport> {
    let index: BTreeMap<(String, usize), &PoseRecord> = preds.iter().map(|p| (p.key(), p)).collect();
    let rows = gts
        .par_iter()
        .map(|g| {
            let p = index.get(&g.key()).ok_or_else(|| {
                Error::Shape(format!("no prediction for sample '{}' person {}", g.sample_id, g.person))
            })?;
            score(p, g, pck_threshold_mm)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_samples(rows))
}
