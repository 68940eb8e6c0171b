//! End-to-end training loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::Adam;
use crate::body_model::BodyModel;
use crate::error::{Error, Result};
use crate::model::{collate, prepare_person, sample_rng, shuffled, CrowdNet, LossValues, PreparedPerson};
use crate::scene::{Dataset, SceneSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_loss: LossValues,
    pub seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub num_persons: usize,
    pub num_parameters: usize,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub fn totals(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss.total).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        crate::binio::parse_json(path, &text)
    }
}

pub struct TrainOutcome {
    pub log: TrainLog,
    pub net: CrowdNet,
    pub initial_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
}

pub const LOG_FILE: &str = "train_log.json";

/// (scene, person) pairs in dataset order, truncated to `max`.
pub fn person_index(samples: &[SceneSample], max: Option<usize>) -> Vec<(usize, usize)> {
    let all = samples
        .iter()
        .enumerate()
        .flat_map(|(s, sample)| (0..sample.persons.len()).map(move |p| (s, p)));
    match max {
        Some(n) => all.take(n).collect(),
        None => all.collect(),
    }
}

/// Opens the configured dataset and trains on its split. The whole split
/// is read and validated before the first step.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let ds = Dataset::open(&config.dataset)
        .map_err(|e| e.context(format!("opening dataset {}", config.dataset.display())))?;
    let samples = ds
        .load_split(&config.split)
        .map_err(|e| e.context(format!("loading split '{}'", config.split)))?;
    let body_model = ds.body_model()?;
    train_on(config, &samples, &body_model)
}

pub fn check_body_model(net: &CrowdNet, dataset_model: &BodyModel) -> Result<()> {
    let ours = net.body_model();
    if ours.num_joints() != dataset_model.num_joints()
        || ours.num_vertices() != dataset_model.num_vertices()
        || ours.joint_regressor.nrows() != dataset_model.joint_regressor.nrows()
    {
        return Err(Error::Config(format!(
            "joint-set mismatch: model has {} joints / {} vertices, dataset has {} / {}",
            ours.num_joints(),
            ours.num_vertices(),
            dataset_model.num_joints(),
            dataset_model.num_vertices()
        )));
    }
    if ours != dataset_model {
        return Err(Error::Config(
            "body model differs from the dataset's (check model.body_model_seed)".into(),
        ));
    }
    Ok(())
}

fn prepare_batch(
    config: &TrainConfig,
    samples: &[SceneSample],
    persons: &[(usize, usize)],
    indices: &[usize],
    epoch: usize,
) -> Result<Vec<PreparedPerson>> {
    indices
        .par_iter()
        .map(|&i| {
            let (s, p) = persons[i];
            let mut rng = sample_rng(config.seed, epoch as u64, i as u64);
            if rng.random::<f64>() < config.error_prob {
                prepare_person(&samples[s], p, &config.model, Some((&config.errors, &mut rng)))
            } else {
                prepare_person(&samples[s], p, &config.model, None)
            }
        })
        .collect()
}

pub fn train_on(
    config: &TrainConfig,
    samples: &[SceneSample],
    dataset_model: &BodyModel,
) -> Result<TrainOutcome> {
    config.validate()?;
    let device = Device::Cpu;
    let net = CrowdNet::new(&config.model, config.seed, DType::F32, &device)?;
    check_body_model(&net, dataset_model)?;
    let persons = person_index(samples, config.max_samples);
    if persons.is_empty() {
        return Err(Error::Config(format!("split '{}' contains no persons", config.split)));
    }

    let out = &config.output_dir;
    let ckpt_root = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_root).map_err(|e| Error::io(&ckpt_root, e))?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, config.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    let initial_checkpoint = ckpt_root.join("init");
    net.save(&initial_checkpoint)?;

    let mut adam = Adam::new(net.store().trainable(), config.adam)?;
    let mut log = TrainLog {
        config: config.clone(),
        num_persons: persons.len(),
        num_parameters: net.store().num_parameters(),
        epochs: Vec::new(),
        steps: Vec::new(),
    };
    let log_path = out.join(LOG_FILE);
    log::info!(
        "training {} persons, {} parameters, {} epochs",
        persons.len(),
        log.num_parameters,
        config.epochs
    );

    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = config.learning_rate_at(epoch);
        let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
        order_rng.set_stream(epoch as u64 + 1);
        let order = shuffled(persons.len(), &mut order_rng);
        let mut sums = [0.0f64; 4];
        let mut n_steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 && persons.len() >= 2 {
                continue;
            }
            let items = prepare_batch(config, samples, &persons, chunk, epoch)?;
            let batch = collate(&items, net.dtype(), &device)?;
            let output = net.forward(&batch, true)?;
            let (loss, values) = net.loss_weighted(&output, &batch, &config.loss)?;
            if ![values.pose, values.param, values.coord, values.total]
                .iter()
                .all(|v| v.is_finite())
            {
                log.write(&log_path)?;
                let msg = format!(
                    "non-finite loss at epoch {epoch}: pose {} param {} coord {} total {}",
                    values.pose, values.param, values.coord, values.total
                );
                log::error!("{msg}");
                return Err(Error::Diverged { step, msg });
            }
            let grads = loss.backward()?;
            adam.step(&grads, lr)?;
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss: values,
            });
            for (s, v) in sums.iter_mut().zip([values.pose, values.param, values.coord, values.total]) {
                *s += v;
            }
            n_steps += 1;
            step += 1;
        }
        let n = n_steps.max(1) as f64;
        let is_last = epoch + 1 == config.epochs;
        let checkpoint = if config.checkpoint_every_epoch || is_last {
            let dir = ckpt_root.join(format!("epoch_{:03}", epoch + 1));
            net.save(&dir)?;
            Some(dir)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            lr,
            steps: n_steps,
            mean_loss: LossValues {
                pose: sums[0] / n,
                param: sums[1] / n,
                coord: sums[2] / n,
                total: sums[3] / n,
            },
            seconds: started.elapsed().as_secs_f64(),
            checkpoint,
        };
        log::info!(
            "epoch {}/{} lr {:e} loss {:.5} ({:.1}s)",
            epoch + 1,
            config.epochs,
            lr,
            record.mean_loss.total,
            record.seconds
        );
        log.epochs.push(record);
        log.write(&log_path)?;
    }
    let final_checkpoint = ckpt_root.join("final");
    net.save(&final_checkpoint)?;
    Ok(TrainOutcome {
        log,
        net,
        initial_checkpoint,
        final_checkpoint,
    })
}
