//! Variant comparison: identical training per variant and seed, then one
//! metric row each on the evaluation split.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::evaluate_samples;
use super::train::train_on;
use crate::error::Result;
use crate::model::Variant;
use crate::scene::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub pck3d_percent: f64,
    pub mpvpe_mm: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub split: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn rows_for(&self, variant: Variant) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(move |r| r.variant == variant)
    }

    /// MPJPE of `variant` for `seed`.
    pub fn mpjpe(&self, variant: Variant, seed: u64) -> Option<f64> {
        self.rows_for(variant).find(|r| r.seed == seed).map(|r| r.mpjpe_mm)
    }

    /// Number of shared seeds where `a` has strictly lower MPJPE than `b`.
    pub fn wins(&self, a: Variant, b: Variant) -> (usize, usize) {
        let mut wins = 0;
        let mut total = 0;
        for r in self.rows_for(a) {
            if let Some(other) = self.mpjpe(b, r.seed) {
                total += 1;
                wins += usize::from(r.mpjpe_mm < other);
            }
        }
        (wins, total)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>10} {:>12} {:>10} {:>10} {:>10}",
            "variant", "seed", "MPJPE", "PA-MPJPE", "3DPCK", "MPVPE", "loss"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>10.2} {:>12.2} {:>10.2} {:>10.2} {:>10.4}",
                r.variant.name(),
                r.seed,
                r.mpjpe_mm,
                r.pa_mpjpe_mm,
                r.pck3d_percent,
                r.mpvpe_mm,
                r.final_loss
            );
        }
        s
    }
}

/// Trains every (variant, seed) pair from `base` with only the variant and
/// seed changed, writing each run under `output_dir/<variant>/seed_<n>`.
pub fn ablation_run(base: &TrainConfig, variants: &[Variant], seeds: &[u64]) -> Result<AblationReport> {
    base.validate()?;
    let ds = Dataset::open(&base.dataset)?;
    let train = ds.load_split(&base.split)?;
    let test = ds.load_split(&base.eval.split)?;
    let body_model = ds.body_model()?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for &variant in variants {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.model.variant = variant;
            cfg.output_dir = base.output_dir.join(variant.name()).join(format!("seed_{seed}"));
            let outcome = train_on(&cfg, &train, &body_model)?;
            let eval = evaluate_samples(&outcome.net, &test, &body_model, &cfg.eval, &cfg.eval.split)?;
            let final_loss = outcome.log.epochs.last().map_or(f64::NAN, |e| e.mean_loss.total);
            log::info!(
                "{} seed {seed}: MPJPE {:.2} mm",
                variant.name(),
                eval.report.mpjpe_mm
            );
            rows.push(AblationRow {
                variant,
                seed,
                mpjpe_mm: eval.report.mpjpe_mm,
                pa_mpjpe_mm: eval.report.pa_mpjpe_mm,
                pck3d_percent: eval.report.pck3d_percent,
                mpvpe_mm: eval.report.mpvpe_mm,
                final_loss,
            });
        }
    }
    Ok(AblationReport {
        split: base.eval.split.clone(),
        rows,
    })
}
