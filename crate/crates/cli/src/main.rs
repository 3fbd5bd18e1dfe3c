mod infer;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use meshlift::checkpoint;
use meshlift::config::{apply, to_text, Configurable, ModelConfig};
use meshlift::datagen::dataset::{load_split, Manifest, MANIFEST_FILE};
use meshlift::datagen::{generate_dataset, DataConfig, SPLITS};
use meshlift::eval::{evaluate_split, EvalReport};
use meshlift::gradsuite::{format_table, run_suite};
use meshlift::parallel::Exec;
use meshlift::train::{metrics_csv, train};

#[derive(Parser, Debug)]
#[command(name = "meshlift", version, about = "Single-view reconstruction of deforming surfaces")]
struct Cli {
    /// Key-value config file (model and generator settings).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run every per-sample loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        /// Validate the config and print the planned split sizes only.
        #[arg(long)]
        dry_run: bool,
    },
    /// Train a model on the `train` split of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on test splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split names; defaults to every test split of the dataset.
        #[arg(long = "split")]
        splits: Vec<String>,
    },
    /// Reconstruct the mesh seen in one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Camera file with `fu`, `fv`, `uc`, `vc` keys, for the image as given.
        #[arg(long, conflicts_with_all = ["focal", "cu", "cv"])]
        camera: Option<PathBuf>,
        /// Focal length in pixels of the image as given.
        #[arg(long)]
        focal: Option<f64>,
        #[arg(long, requires = "cv")]
        cu: Option<f64>,
        #[arg(long, requires = "cu")]
        cv: Option<f64>,
        /// Also write the mesh wireframe drawn over the image.
        #[arg(long)]
        overlay: bool,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        /// Debug hook: scale the VJP of this op (negative control).
        #[arg(long)]
        corrupt: Option<String>,
    },
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn read_config(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(String::new()),
    }
}

/// Both configs from one file; `base` seeds the model side before the file
/// is applied.
fn load_configs(cli: &Cli, base: ModelConfig) -> Result<(ModelConfig, DataConfig)> {
    let text = read_config(cli.config.as_deref())?;
    let (mut model, mut data) = (base, DataConfig::default());
    apply(&text, &mut [&mut model, &mut data])?;
    if let Some(seed) = cli.seed {
        model.seed = seed;
        data.seed = seed;
    }
    model.validate()?;
    data.validate()?;
    Ok((model, data))
}

fn exec(cli: &Cli) -> Exec {
    if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Auto
    }
}

fn cmd_gen(cli: &Cli, dry_run: bool) -> Result<()> {
    let (_, data) = load_configs(cli, ModelConfig::default())?;
    if dry_run {
        println!("config valid: N={} {}x{} seed {}", data.n, data.image_width, data.image_height, data.seed);
        for s in &SPLITS {
            let count = if s.occluded.is_none() { data.train_count * (1 + data.augment_variants) } else { data.test_count };
            println!("{:<16} {count}", s.name);
        }
        return Ok(());
    }
    let dir = out_dir(cli)?;
    let manifest = generate_dataset(&data, &dir, exec(cli))?;
    for s in &manifest.splits {
        println!("{:<16} {:>7} samples  {:>5} occluded", s.name, s.count, s.occluded_count);
    }
    println!("wrote {}", dir.join(MANIFEST_FILE).display());
    Ok(())
}

fn cmd_train(cli: &Cli, data: &Path) -> Result<()> {
    let manifest = Manifest::load(data)?;
    let base = ModelConfig {
        n: manifest.n,
        image_width: manifest.image_width,
        image_height: manifest.image_height,
        ..ModelConfig::default()
    };
    let (config, _) = load_configs(cli, base)?;
    if (config.n, config.image_width, config.image_height) != (manifest.n, manifest.image_width, manifest.image_height) {
        bail!(
            "config expects N={} {}x{} but the dataset has N={} {}x{}",
            config.n,
            config.image_width,
            config.image_height,
            manifest.n,
            manifest.image_width,
            manifest.image_height
        );
    }
    let samples = load_split(data, "train")?;
    info!("training on {} samples for up to {} epochs", samples.len(), config.total_epochs());
    let dir = out_dir(cli)?;
    let outcome = match train(&config, &samples, exec(cli), |m| {
        info!("epoch {:>3} stage {} loss {:.4e} err2d {:.3} px err3d {:.4}", m.epoch, m.stage as u8, m.loss, m.err2d_px, m.err3d_aligned);
    }) {
        Ok(o) => o,
        Err(meshlift::Error::Diverged { epoch, detail, last_good }) => {
            let path = dir.join("last_good.ckpt");
            checkpoint::save(&last_good, &path)?;
            bail!("training diverged in epoch {epoch}: {detail}; last good state saved to {}", path.display());
        }
        Err(e) => return Err(e.into()),
    };
    checkpoint::save(&outcome.checkpoint, &dir.join("model.ckpt"))?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
    fs::write(dir.join("config.txt"), to_text(&config))?;
    println!("wrote {} and {}", dir.join("model.ckpt").display(), dir.join("metrics.csv").display());
    Ok(())
}

fn cmd_eval(cli: &Cli, ckpt: &Path, data: &Path, splits: &[String]) -> Result<()> {
    let model = checkpoint::load(ckpt)?.model()?;
    let manifest = Manifest::load(data)?;
    if manifest.n != model.config.n {
        bail!("checkpoint has N={} but the dataset has N={}", model.config.n, manifest.n);
    }
    let names: Vec<String> = if splits.is_empty() {
        manifest.splits.iter().filter(|s| s.name != "train").map(|s| s.name.clone()).collect()
    } else {
        splits.to_vec()
    };
    let mut rows = Vec::new();
    for name in &names {
        let samples = load_split(data, name)?;
        rows.extend(evaluate_split(&model, &samples, name, exec(cli))?);
    }
    let report = EvalReport::from_rows(rows);
    let dir = out_dir(cli)?;
    fs::write(dir.join("eval_samples.csv"), report.samples_csv())?;
    fs::write(dir.join("eval_summary.csv"), report.summary_csv())?;
    print!("{}", report.summary_text());
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, corrupt: Option<&str>) -> Result<()> {
    let results = run_suite(corrupt);
    let table = format_table(&results);
    print!("{table}");
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("gradcheck.txt"), &table)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(anyhow!("gradient check failed for {}", failed.join(", ")))
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen { dry_run } => cmd_gen(cli, *dry_run),
        Command::Train { data } => cmd_train(cli, data),
        Command::Eval { checkpoint, data, splits } => cmd_eval(cli, checkpoint, data, splits),
        Command::Infer { checkpoint, image, camera, focal, cu, cv, overlay } => {
            let camera = infer::CameraArgs { file: camera.clone(), focal: *focal, principal: cu.zip(*cv) };
            infer::cmd_infer(checkpoint, image, &camera, *overlay, &out_dir(cli)?)
        }
        Command::Gradcheck { corrupt } => cmd_gradcheck(cli, corrupt.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
