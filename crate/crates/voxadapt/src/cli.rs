//! Command line entry points over the library: dataset generation,
//! training, evaluation, retrieval, the phi2 sweep, and artifact export.
//! Every command takes options as flags, optionally seeded from a
//! key=value config file that the flags override.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{ConfigError, KeyValues};
use crate::data::files::{dataset_config_from_kv, load_dataset, read_pgm, write_dataset};
use crate::data::{DataError, Dataset, Domain, ImageSample};
use crate::eval::{
    eval_dirs, export_outputs, phi2_sweep, retrieve_nearest, EvalError, ExportItem,
};
use crate::nn::NetPreset;
use crate::train::{resume_schedule, run_schedule, TrainConfig, TrainError, TrainState};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("train: {0}")]
    Train(#[from] TrainError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
}

#[derive(Debug, Parser)]
#[command(
    name = "voxadapt",
    version,
    about = "Sketch-to-voxel reconstruction: data, training, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic furniture dataset on disk
    GenData(GenDataArgs),
    /// Train the pipeline on a generated dataset
    Train(TrainArgs),
    /// Compare predicted and truth voxel directories by IoU
    Eval(EvalArgs),
    /// Rank pool images by latent distance to a query image
    Retrieve(RetrieveArgs),
    /// Train the 2D stage per phi2 value and report the trade-off
    SweepPhi2(SweepArgs),
    /// Export reconstructions and voxel grids from a checkpoint
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Directory to write the dataset into
    #[arg(long)]
    pub out: PathBuf,
    /// Config file with dataset keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of shapes
    #[arg(long)]
    pub shapes: Option<usize>,
    /// Rendered views per shape
    #[arg(long)]
    pub views: Option<usize>,
    /// Fraction of shapes in the training split
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Image side length in pixels
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Voxel grid side length
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Dataset seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for logs and checkpoints
    #[arg(long)]
    pub out: PathBuf,
    /// Config file with training keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to continue from
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Network preset: desk or full
    #[arg(long)]
    pub preset: Option<String>,
    /// Batch size
    #[arg(long)]
    pub batch: Option<usize>,
    /// Steps in the 2D stage
    #[arg(long)]
    pub steps1: Option<usize>,
    /// Steps in the voxel stage
    #[arg(long)]
    pub steps2: Option<usize>,
    /// Steps in the joint stage
    #[arg(long)]
    pub steps3: Option<usize>,
    /// 2D adversarial weight in [0, 1]
    #[arg(long)]
    pub phi2: Option<f64>,
    /// 3D adversarial weight in [0, 1]
    #[arg(long)]
    pub phi3: Option<f64>,
    /// Generator learning rate
    #[arg(long)]
    pub lr_g: Option<f64>,
    /// Generator learning rate decay per thousand steps
    #[arg(long)]
    pub decay_g: Option<f64>,
    /// Discriminator learning rate
    #[arg(long)]
    pub lr_d: Option<f64>,
    /// Discriminator learning rate decay per thousand steps
    #[arg(long)]
    pub decay_d: Option<f64>,
    /// Training seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint cadence in steps, 0 for final only
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Feed the equilibrium update the generator score instead of the
    /// real score
    #[arg(long)]
    pub literal_s_update: bool,
    /// Substitute synth batches for real ones (ablation baseline)
    #[arg(long)]
    pub synth_only: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted voxel files
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of truth voxel files with matching names
    #[arg(long)]
    pub truth: PathBuf,
    /// Occupancy threshold in (0, 1)
    #[arg(long, default_value_t = 0.3)]
    pub t: f64,
    /// Search small shifts and scales for the best match
    #[arg(long)]
    pub aligned: bool,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// Dataset directory whose synth training images form the pool
    #[arg(long)]
    pub data: PathBuf,
    /// Trained checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Query image (PGM)
    #[arg(long)]
    pub query: PathBuf,
    /// Neighbors to report
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Network preset the checkpoint was trained with
    #[arg(long, default_value = "desk")]
    pub preset: String,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for panels and the report
    #[arg(long)]
    pub out: PathBuf,
    /// Config file with training keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// phi2 values to sweep
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7,0.9")]
    pub values: Vec<f64>,
    /// 2D-stage steps per value
    #[arg(long)]
    pub steps: Option<usize>,
    /// Batch size
    #[arg(long)]
    pub batch: Option<usize>,
    /// Training seed shared by every value
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Trained checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory to write artifacts into
    #[arg(long)]
    pub out: PathBuf,
    /// Real-style items to export, clamped to the pool size
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Network preset the checkpoint was trained with
    #[arg(long, default_value = "desk")]
    pub preset: String,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(args) => run_gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Retrieve(args) => run_retrieve(args),
        Command::SweepPhi2(args) => run_sweep(args),
        Command::Export(args) => run_export(args),
    }
}

fn merged_kv(
    config: Option<&Path>,
    flags: &[(&str, Option<String>)],
) -> Result<KeyValues, CliError> {
    let mut kv = match config {
        Some(path) => KeyValues::from_file(path)?,
        None => KeyValues::default(),
    };
    for (key, value) in flags {
        if let Some(v) = value {
            kv.set(key, v);
        }
    }
    Ok(kv)
}

fn parse_preset(text: &str) -> Result<NetPreset, CliError> {
    NetPreset::parse(text).ok_or_else(|| {
        CliError::Invalid(format!("unknown preset {text:?}, expected desk or full"))
    })
}

fn run_gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let kv = merged_kv(
        args.config.as_deref(),
        &[
            ("shapes", args.shapes.map(|v| v.to_string())),
            ("views", args.views.map(|v| v.to_string())),
            ("train_fraction", args.train_fraction.map(|v| v.to_string())),
            ("image_size", args.image_size.map(|v| v.to_string())),
            ("resolution", args.resolution.map(|v| v.to_string())),
            ("seed", args.seed.map(|v| v.to_string())),
        ],
    )?;
    let config = dataset_config_from_kv(&kv)?;
    let data = Dataset::generate(&config)?;
    write_dataset(&args.out, &data)?;
    println!(
        "wrote {} shapes, {} synth and {} real images to {}",
        data.shapes.len(),
        data.synth.len(),
        data.real.len(),
        args.out.display()
    );
    Ok(())
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let kv = merged_kv(
        args.config.as_deref(),
        &[
            ("preset", args.preset.clone()),
            ("batch", args.batch.map(|v| v.to_string())),
            ("steps1", args.steps1.map(|v| v.to_string())),
            ("steps2", args.steps2.map(|v| v.to_string())),
            ("steps3", args.steps3.map(|v| v.to_string())),
            ("phi2", args.phi2.map(|v| v.to_string())),
            ("phi3", args.phi3.map(|v| v.to_string())),
            ("lr_g", args.lr_g.map(|v| v.to_string())),
            ("decay_g", args.decay_g.map(|v| v.to_string())),
            ("lr_d", args.lr_d.map(|v| v.to_string())),
            ("decay_d", args.decay_d.map(|v| v.to_string())),
            ("seed", args.seed.map(|v| v.to_string())),
            (
                "checkpoint_every",
                args.checkpoint_every.map(|v| v.to_string()),
            ),
            (
                "literal_s_update",
                args.literal_s_update.then(|| "true".to_string()),
            ),
            ("synth_only", args.synth_only.then(|| "true".to_string())),
        ],
    )?;
    Ok(TrainConfig::from_kv(&kv)?)
}

fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    let config = train_config(args)?;
    let data = load_dataset(&args.data)?;
    let state = match &args.resume {
        Some(ckpt) => {
            let state = TrainState::load_checkpoint(&config, ckpt)?;
            resume_schedule(state, &data, Some(&args.out))?
        }
        None => run_schedule(&config, &data, Some(&args.out))?,
    };
    println!(
        "trained to step {} (phase {}); logs and checkpoints in {}",
        state.step,
        state.phase,
        args.out.display()
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    let result = eval_dirs(&args.pred, &args.truth, args.t, args.aligned)?;
    print!("{}", result.to_csv());
    Ok(())
}

fn run_retrieve(args: &RetrieveArgs) -> Result<(), CliError> {
    let config = TrainConfig {
        preset: parse_preset(&args.preset)?,
        ..TrainConfig::default()
    };
    let data = load_dataset(&args.data)?;
    let mut state = TrainState::load_checkpoint(&config, &args.checkpoint)?;
    let pixels = read_pgm(&args.query)?;
    let expect = data.config.image_size;
    if pixels.shape() != [expect, expect].as_slice() {
        return Err(CliError::Invalid(format!(
            "query image has shape {:?}, dataset uses {expect}x{expect}",
            pixels.shape()
        )));
    }
    let query = ImageSample {
        pixels,
        domain: Domain::Real,
        azimuth: 0.0,
        shape_id: None,
    };
    let pool: Vec<ImageSample> = data
        .synth_train_indices()
        .into_iter()
        .map(|i| data.synth[i].clone())
        .collect();
    let result = retrieve_nearest(
        0,
        &query,
        &pool,
        &state.g2.plan,
        &mut state.g2.params,
        args.k,
    )?;
    println!("rank,pool_index,shape_id,distance");
    for (rank, (id, dist)) in result.neighbors.iter().enumerate() {
        let shape = pool[*id]
            .shape_id
            .map(|s| s.to_string())
            .unwrap_or_default();
        println!("{},{},{},{}", rank + 1, id, shape, dist);
    }
    Ok(())
}

fn run_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let kv = merged_kv(
        args.config.as_deref(),
        &[
            ("steps1", args.steps.map(|v| v.to_string())),
            ("batch", args.batch.map(|v| v.to_string())),
            ("seed", args.seed.map(|v| v.to_string())),
        ],
    )?;
    let base = TrainConfig::from_kv(&kv)?;
    let data = load_dataset(&args.data)?;
    let report = phi2_sweep(&args.values, &base, &data, Some(&args.out))?;
    print!("{}", report.to_csv());
    Ok(())
}

fn run_export(args: &ExportArgs) -> Result<(), CliError> {
    let config = TrainConfig {
        preset: parse_preset(&args.preset)?,
        ..TrainConfig::default()
    };
    let data = load_dataset(&args.data)?;
    let mut state = TrainState::load_checkpoint(&config, &args.checkpoint)?;
    let count = args.count.min(data.real.len());
    let items: Vec<ExportItem> = (0..count)
        .map(|i| ExportItem {
            id: i,
            image: &data.real[i],
            truth: Some(data.grid_of(data.real_sources[i])),
        })
        .collect();
    let rows = export_outputs(&mut state, &items, &args.out)?;
    println!(
        "exported {} files for {} items to {}",
        rows.len(),
        count,
        args.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::files::{read_manifest, write_voxel};
    use crate::data::VoxelGrid;

    fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
        Cli::try_parse_from(args)
    }

    #[test]
    fn rejects_unknown_commands_and_missing_flags() {
        assert!(parse(&["voxadapt", "bogus"]).is_err());
        assert!(parse(&["voxadapt", "eval", "--pred", "a"]).is_err());
        assert!(parse(&["voxadapt", "gen-data", "--out", "x", "--nope", "1"]).is_err());
        let usage = parse(&["voxadapt"]).unwrap_err().to_string();
        assert!(usage.contains("Usage"));
    }

    #[test]
    fn sweep_values_parse_as_a_comma_list() {
        let cli = parse(&[
            "voxadapt",
            "sweep-phi2",
            "--data",
            "d",
            "--out",
            "o",
            "--values",
            "0.1,0.9",
        ])
        .unwrap();
        match cli.command {
            Command::SweepPhi2(args) => assert_eq!(args.values, vec![0.1, 0.9]),
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn gen_data_is_deterministic_and_flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("data.cfg");
        std::fs::write(&cfg, "shapes = 4\nviews = 2\nseed = 5\n").unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        for out in [&out_a, &out_b] {
            run(parse(&[
                "voxadapt",
                "gen-data",
                "--out",
                out.to_str().unwrap(),
                "--config",
                cfg.to_str().unwrap(),
                "--seed",
                "7",
            ])
            .unwrap())
            .unwrap();
        }
        let echo = std::fs::read_to_string(out_a.join("dataset.cfg")).unwrap();
        assert!(echo.contains("seed = 7"), "flag wins over file:\n{echo}");
        assert!(echo.contains("shapes = 4"), "file keys survive:\n{echo}");
        assert_eq!(
            std::fs::read(out_a.join("manifest.csv")).unwrap(),
            std::fs::read(out_b.join("manifest.csv")).unwrap()
        );
        assert_eq!(
            std::fs::read(out_a.join("images/real00000.pgm")).unwrap(),
            std::fs::read(out_b.join("images/real00000.pgm")).unwrap()
        );
    }

    #[test]
    fn train_resume_retrieve_and_export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let data_str = data_dir.to_str().unwrap().to_string();
        run(parse(&[
            "voxadapt", "gen-data", "--out", &data_str, "--shapes", "4", "--views", "2",
            "--seed", "1",
        ])
        .unwrap())
        .unwrap();

        let run_dir = dir.path().join("run");
        let run_str = run_dir.to_str().unwrap().to_string();
        let base = [
            "voxadapt", "train", "--data", &data_str, "--out", &run_str, "--batch", "2",
            "--steps2", "0", "--steps3", "0", "--seed", "2",
        ];
        let mut first = base.to_vec();
        first.extend(["--steps1", "1"]);
        run(parse(&first).unwrap()).unwrap();
        let ckpt = run_dir.join("final.ckpt");
        assert!(ckpt.exists());
        let log = std::fs::read_to_string(run_dir.join("log.csv")).unwrap();
        assert_eq!(log.lines().count(), 2, "header plus one step:\n{log}");

        let ckpt_str = ckpt.to_str().unwrap().to_string();
        let mut more = base.to_vec();
        more.extend(["--steps1", "2", "--resume", &ckpt_str]);
        run(parse(&more).unwrap()).unwrap();
        let log = std::fs::read_to_string(run_dir.join("log.csv")).unwrap();
        assert_eq!(log.lines().count(), 3, "resume appends:\n{log}");

        let query = data_dir.join("images/synth00000.pgm");
        run(parse(&[
            "voxadapt",
            "retrieve",
            "--data",
            &data_str,
            "--checkpoint",
            &ckpt_str,
            "--query",
            query.to_str().unwrap(),
            "--k",
            "3",
        ])
        .unwrap())
        .unwrap();

        let exp_dir = dir.path().join("exp");
        run(parse(&[
            "voxadapt",
            "export",
            "--data",
            &data_str,
            "--checkpoint",
            &ckpt_str,
            "--out",
            exp_dir.to_str().unwrap(),
            "--count",
            "2",
        ])
        .unwrap())
        .unwrap();
        assert!(exp_dir.join("item0_pred.txt").exists());
        assert!(exp_dir.join("item1_truth.txt").exists());
        let rows = read_manifest(&exp_dir.join("manifest.csv")).unwrap();
        assert_eq!(rows.len(), 8);
    }

    #[test]
    fn eval_command_compares_directories() {
        let dir = tempfile::tempdir().unwrap();
        let pred = dir.path().join("pred");
        let truth = dir.path().join("truth");
        std::fs::create_dir_all(&pred).unwrap();
        std::fs::create_dir_all(&truth).unwrap();
        let mut grid = VoxelGrid::new(8);
        grid.set(1, 1, 1, 1.0);
        write_voxel(&pred.join("v.txt"), &grid).unwrap();
        write_voxel(&truth.join("v.txt"), &grid).unwrap();
        run(parse(&[
            "voxadapt",
            "eval",
            "--pred",
            pred.to_str().unwrap(),
            "--truth",
            truth.to_str().unwrap(),
            "--t",
            "0.3",
        ])
        .unwrap())
        .unwrap();
    }

    #[test]
    fn failures_surface_as_distinct_errors() {
        let missing = run(parse(&[
            "voxadapt", "train", "--data", "/nonexistent", "--out", "/tmp/never",
        ])
        .unwrap());
        assert!(matches!(missing, Err(CliError::Data(_))));
        assert!(missing.unwrap_err().to_string().starts_with("data:"));

        let preset = run(parse(&[
            "voxadapt",
            "retrieve",
            "--data",
            "/nonexistent",
            "--checkpoint",
            "/nonexistent",
            "--query",
            "/nonexistent",
            "--preset",
            "huge",
        ])
        .unwrap());
        match preset {
            Err(CliError::Invalid(msg)) => assert!(msg.contains("preset")),
            other => panic!("expected a preset error, got {other:?}"),
        }

        let dirs = run(parse(&[
            "voxadapt", "eval", "--pred", "/nonexistent", "--truth", "/nonexistent",
        ])
        .unwrap());
        assert!(matches!(dirs, Err(CliError::Eval(_))));
    }
}
