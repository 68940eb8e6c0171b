#![allow(dead_code)]

use std::path::Path;

use crowdnet::harness::TrainConfig;
use crowdnet::scene::{generate_dataset, Dataset, DatasetSpec, SplitSpec};

pub fn split(name: &str, scenes: usize, overlap: f64, n: Option<usize>) -> SplitSpec {
    SplitSpec {
        name: name.into(),
        scenes,
        overlap_target: overlap,
        n_persons: n,
    }
}

pub fn small_dataset(root: &Path, splits: Vec<SplitSpec>) -> Dataset {
    let spec = DatasetSpec {
        splits,
        ..DatasetSpec::desk(100)
    };
    generate_dataset(root, &spec).unwrap()
}

/// Narrow network for fast harness tests.
pub fn tiny_config(dataset: &Path, out: &Path, extra: &[&str]) -> TrainConfig {
    let mut overrides: Vec<String> = [
        "model.backbone.early_channels=8",
        "model.backbone.late_channels=[16, 32]",
        "model.backbone.blocks_per_stage=1",
        "model.graph.channels=16",
        "model.graph.residual_blocks=1",
        "model.hmr_hidden=32",
        "batch_size=4",
        "epochs=2",
        "lr_decay_epochs=[1]",
        "eval.split=\"test\"",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    overrides.push(format!("dataset=\"{}\"", dataset.display()));
    overrides.push(format!("output_dir=\"{}\"", out.display()));
    overrides.extend(extra.iter().map(|s| s.to_string()));
    TrainConfig::from_sources(None, &overrides).unwrap()
}
