//! `dtnet`: synthesize data, train, evaluate, ablate and export predictions.
//!
//! Usage errors exit with status 2, runtime failures with status 1.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dtnet_core::checkpoint;
use dtnet_core::config::RunConfig;
use dtnet_core::data::{load_manifest, synth_classification, synth_segmentation, write_xyz, Dataset, Split, SynthConfig};
use dtnet_core::geom::PointCloud;
use dtnet_core::model::Task;
use dtnet_core::train::{ablate, ablation_table, evaluate, predict, Trainer};
use dtnet_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dtnet", version, about = "Dual point cloud transformer networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Cls,
    Seg,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Cls => Task::Classification,
            TaskArg::Seg => Task::Segmentation,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Points per cloud [default: 256 for cls, 512 for seg].
        #[arg(long)]
        points: Option<usize>,
        /// Training instances (per class for cls) [default: 100 for cls, 200 for seg].
        #[arg(long)]
        train: Option<usize>,
        /// Test instances (per class for cls) [default: 20 for cls, 40 for seg].
        #[arg(long)]
        test: Option<usize>,
    },
    /// Train a network; writes metrics.jsonl, config.txt and model.ckpt under --out.
    Train {
        #[arg(long, value_enum)]
        task: TaskArg,
        /// key = value config file; omitted keys take documented defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        /// Override the epoch budget (useful with --resume).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on a dataset split and print one JSON record.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also append the record to this file.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the baseline, +PWSA, +CWSA and full variants and compare them.
    Ablate {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Directory for ablation.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write each cloud with its predicted labels in xyz format.
    ExportPredictions {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

fn read_config(path: Option<&Path>, task: Task, data: &Dataset) -> Result<RunConfig> {
    if data.task != task {
        return Err(Error::Input(format!("--task {task} but the manifest is a {} dataset", data.task)));
    }
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?,
        None => String::new(),
    };
    let cfg = RunConfig::parse(&text, Some(task), Some(data.labels.len()))?;
    if cfg.network.classes != data.labels.len() {
        return Err(Error::Input(format!("config has {} classes, dataset has {}", cfg.network.classes, data.labels.len())));
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let io = |e| Error::Io { path: path.to_path_buf(), source: e };
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    writeln!(f, "{line}").map_err(io)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { task, seed, out, points, train, test } => {
            let task = Task::from(task);
            let cls = task == Task::Classification;
            let cfg = SynthConfig {
                points: points.unwrap_or(if cls { 256 } else { 512 }),
                train: train.unwrap_or(if cls { 100 } else { 200 }),
                test: test.unwrap_or(if cls { 20 } else { 40 }),
                seed,
            };
            let ds = if cls {
                synth_classification(&cfg)?
            } else {
                let (ds, report) = synth_segmentation(&cfg)?;
                eprintln!(
                    "handle points {} (expected {:.1}), chi-square {:.3}",
                    report.handle_points, report.expected_handle_points, report.chi_square
                );
                ds
            };
            let manifest = ds.write(&out)?;
            println!("{}", manifest.display());
        }
        Command::Train { task, config, data, out, resume, epochs } => {
            let task = Task::from(task);
            let ds = load_manifest(&data)?;
            let mut trainer: Trainer<f32> = match &resume {
                Some(ckpt) => {
                    let t = checkpoint::load::<f32>(ckpt)?.into_trainer()?;
                    if t.task() != task || ds.task != task {
                        return Err(Error::Input(format!("checkpoint task {} differs from --task {task}", t.task())));
                    }
                    t
                }
                None => {
                    let cfg = read_config(config.as_deref(), task, &ds)?;
                    Trainer::new(cfg.network, cfg.train)?
                }
            };
            if let Some(e) = epochs {
                trainer.config.epochs = e;
            }
            create_dir(&out)?;
            let log = out.join("metrics.jsonl");
            if resume.is_none() {
                write_file(&log, "")?;
            }
            write_file(&out.join("config.txt"), &RunConfig { network: trainer.model.spec().clone(), train: trainer.config.clone() }.render())?;
            trainer.fit(&ds.train, &mut |r| {
                let line = r.to_json();
                eprintln!("{line}");
                append_line(&log, &line)
            })?;
            checkpoint::save(&out.join("model.ckpt"), &trainer)?;
            let mut record = serde_json::json!({ "epochs": trainer.epoch, "train": evaluate(&trainer.model, &ds.train)?.metrics });
            if !ds.test.is_empty() {
                record["test"] = serde_json::to_value(evaluate(&trainer.model, &ds.test)?.metrics).expect("metrics serialize");
            }
            println!("{record}");
        }
        Command::Eval { checkpoint: ckpt, data, split, log } => {
            let trainer = checkpoint::load::<f32>(&ckpt)?.into_trainer()?;
            let ds = load_manifest(&data)?;
            let split = Split::from(split);
            let m = evaluate(&trainer.model, ds.split(split))?.metrics;
            let record = serde_json::json!({ "split": split.as_str(), "metrics": m }).to_string();
            println!("{record}");
            if let Some(path) = log {
                append_line(&path, &record)?;
            }
        }
        Command::Ablate { task, config, data, out } => {
            let task = Task::from(task);
            let ds = load_manifest(&data)?;
            let cfg = read_config(config.as_deref(), task, &ds)?;
            let rows = ablate::<f32>(&cfg.network, &cfg.train, &ds.train, &ds.test)?;
            print!("{}", ablation_table(&rows));
            if let Some(dir) = out {
                create_dir(&dir)?;
                write_file(&dir.join("ablation.json"), &serde_json::to_string_pretty(&rows).expect("rows serialize"))?;
            }
        }
        Command::ExportPredictions { checkpoint: ckpt, data, out, split } => {
            let trainer = checkpoint::load::<f32>(&ckpt)?.into_trainer()?;
            let ds = load_manifest(&data)?;
            let examples = ds.split(Split::from(split));
            let preds = predict(&trainer.model, examples)?;
            for (ex, p) in examples.iter().zip(&preds) {
                let labels = if p.len() == 1 { vec![p[0]; ex.cloud.len()] } else { p.clone() };
                let cloud = PointCloud::new(ex.cloud.coords.clone(), None, Some(labels))?;
                write_xyz(&out.join(&ex.file), &cloud)?;
            }
            println!("wrote {} files under {}", preds.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
