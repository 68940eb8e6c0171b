use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crowdnet::harness::{self, TrainConfig};
use crowdnet::joints::JointSetRegistry;
use crowdnet::metrics::write_records;
use crowdnet::model::Variant;
use crowdnet::scene::{generate_dataset, DatasetSpec};

#[derive(Parser)]
#[command(name = "crowdnet", version, about = "Pose-guided 3D human pose and shape estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set model.depth_bins=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        Ok(TrainConfig::load(self.config.as_deref(), &self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic crowd dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Dataset spec (TOML); defaults to the desk preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Report JSON path; the text table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write prediction and ground-truth records next to the report.
        #[arg(long)]
        records: bool,
    },
    /// Run a checkpoint on one image and 2D pose.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// JSON with `joints`, `confidence` and `joint_set`.
        #[arg(long)]
        pose: PathBuf,
        /// Extra joint-set definitions (JSON name -> superset indices).
        #[arg(long)]
        joint_sets: Option<PathBuf>,
        #[arg(long, default_value = "infer_out")]
        out: PathBuf,
    },
    /// Train and evaluate several variants under identical settings.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "guided,unguided,hmr_style")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write overlay images (and predictions with a checkpoint).
    Visualize {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Sample ids; all of the split when omitted.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "vis_out")]
        out: PathBuf,
    },
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { out, spec, seed } => {
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str::<DatasetSpec>(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => DatasetSpec::desk(seed),
            };
            let ds = generate_dataset(&out, &spec)?;
            for (name, ids) in &ds.index.splits {
                println!("{name}: {} scenes", ids.len());
            }
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            let outcome = harness::train(&cfg)?;
            let last = outcome.log.epochs.last().map_or(f64::NAN, |e| e.mean_loss.total);
            println!("final checkpoint: {}", outcome.final_checkpoint.display());
            println!("last epoch mean loss: {last:.6}");
        }
        Command::Eval {
            checkpoint,
            cfg,
            out,
            records,
        } => {
            let cfg = cfg.load()?;
            let eval = harness::evaluate(&checkpoint, &cfg.dataset, &cfg.eval)?;
            print!("{}", eval.report.to_table());
            if let Some(out) = out {
                write_text(&out, &eval.report.to_json()?)?;
                if records {
                    write_records(&out.with_extension("pred.json"), &eval.predictions)?;
                    write_records(&out.with_extension("gt.json"), &eval.ground_truth)?;
                }
            } else if records {
                bail!("--records needs --out");
            }
        }
        Command::Infer {
            checkpoint,
            image,
            pose,
            joint_sets,
            out,
        } => {
            let registry = match joint_sets {
                Some(p) => JointSetRegistry::load(&p)?,
                None => JointSetRegistry::default(),
            };
            let files = harness::infer(&checkpoint, &image, &pose, &registry, &out)?;
            for f in [files.params, files.mesh, files.overlay] {
                println!("{}", f.display());
            }
        }
        Command::Ablate {
            cfg,
            variants,
            seeds,
            out,
        } => {
            let cfg = cfg.load()?;
            let variants = variants
                .iter()
                .map(|v| Variant::parse(v))
                .collect::<crowdnet::Result<Vec<_>>>()?;
            let report = harness::ablation_run(&cfg, &variants, &seeds)?;
            print!("{}", report.to_table());
            if let Some(out) = out {
                write_text(&out, &serde_json::to_string_pretty(&report)?)?;
            }
        }
        Command::Visualize {
            dataset,
            split,
            ids,
            checkpoint,
            out,
        } => {
            let files = harness::visualize(&dataset, &split, &ids, checkpoint.as_deref(), &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            ExitCode::FAILURE
        }
    }
}
