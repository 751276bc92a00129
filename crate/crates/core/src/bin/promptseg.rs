use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use promptseg::checkpoint;
use promptseg::config::RunConfig;
use promptseg::data::generate_dataset;
use promptseg::eval::{evaluate, EvalReport, EvalSource};
use promptseg::plot::{plot_convergence, plot_embeddings, Projection};
use promptseg::sweep::{preset, run_sweep, AblationMatrix};
use promptseg::train::{train, RunFiles};
use promptseg::Error;

#[derive(Parser, Debug)]
#[command(name = "promptseg", version, about = "Prompt-learning segmentation on synthetic shapes")]
struct Cli {
    /// TOML config file; for `ablate` it may carry an `[ablate]` table.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set gamma=0.5` or `--set train.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Run directory (default `runs/<run.name>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Training seed; shorthand for `--set train.seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its run directory.
    Train,
    /// Evaluate a checkpoint on a split.
    Eval {
        /// Checkpoint file (default `<out>/checkpoint.bin`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        /// `decoder` or `raw-alignment`.
        #[arg(long, default_value = "decoder")]
        source: String,
    },
    /// Run an ablation sweep and write summary tables.
    Ablate {
        /// Named variant list: factor-table, prompt-modes, gamma, sampling, positives.
        #[arg(long)]
        preset: Option<String>,
        /// Comma-separated seeds, replacing the matrix's seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Worker threads (0 = all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Render a plot from a finished run.
    Plot {
        /// `convergence` or `embeddings`.
        #[arg(long, default_value = "convergence")]
        kind: String,
        /// Run directory (default `--out`).
        #[arg(long)]
        run: Option<PathBuf>,
        /// `pca` or `tsne`, for embeddings.
        #[arg(long, default_value = "pca")]
        projection: String,
        #[arg(long, default_value_t = 16)]
        max_images: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => {
            if !p.is_file() {
                return Err(Error::config("config", format!("no such file {}", p.display())));
            }
            RunConfig::from_file(p)?
        }
        None => RunConfig::default(),
    };
    for s in &cli.set {
        cfg.set(s)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(&cfg.run.name))
}

fn print_report(r: &EvalReport) {
    println!("split {} source {} images {}", r.split, r.source, r.images);
    for (k, iou) in r.per_class_iou.iter().enumerate() {
        match iou {
            Some(v) => println!("  class {k:>2}  IoU {v:.4}"),
            None => println!("  class {k:>2}  absent"),
        }
    }
    println!("mIoU {:.4}  pixel accuracy {:.4}", r.miou, r.pixel_accuracy);
}

fn run(cli: &Cli) -> Result<ExitCode, Error> {
    match &cli.command {
        Command::Train => {
            let cfg = load_config(cli)?;
            let dir = out_dir(cli, &cfg);
            let data = generate_dataset(&cfg.dataset_spec())?;
            let out = train(&cfg, &data, Some(&dir))?;
            if let Some(r) = &out.final_val {
                print_report(r);
            }
            println!("run directory {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint: ck,
            split,
            source,
        } => {
            let source: EvalSource = source.parse()?;
            let path = match (ck, &cli.out) {
                (Some(p), _) => p.clone(),
                (None, Some(d)) => d.join(RunFiles::CHECKPOINT),
                (None, None) => {
                    return Err(Error::config("checkpoint", "pass --checkpoint or --out"))
                }
            };
            let ck = checkpoint::load(&path)?;
            let model = ck.model()?;
            let data = generate_dataset(&ck.config.dataset_spec())?;
            let samples = data.split(split)?;
            let report = evaluate(
                &model,
                &ck.store,
                samples,
                split,
                source,
                ck.config.train.eval_batch_size,
            )?;
            print_report(&report);
            let dir = cli
                .out
                .clone()
                .or_else(|| path.parent().map(Path::to_path_buf))
                .unwrap_or_default();
            std::fs::create_dir_all(&dir)?;
            let file = dir.join(format!("eval_{split}_{}.json", source.as_str()));
            std::fs::write(&file, serde_json::to_string_pretty(&report)?)?;
            println!("wrote {}", file.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate {
            preset: name,
            seeds,
            jobs,
        } => {
            let mut m = match &cli.config {
                Some(p) => {
                    if !p.is_file() {
                        return Err(Error::config("config", format!("no such file {}", p.display())));
                    }
                    AblationMatrix::from_file(p)?
                }
                None => AblationMatrix::from_toml_str("")?,
            };
            for s in &cli.set {
                m.base.set(s)?;
            }
            if let Some(seed) = cli.seed {
                m.base.train.seed = seed;
                m.seeds = vec![seed];
            }
            if !seeds.is_empty() {
                m.seeds = seeds.clone();
            }
            if let Some(name) = name {
                m.variants = preset(name)?;
            }
            if let Some(j) = jobs {
                m.jobs = *j;
            }
            m.validate()?;
            let dir = out_dir(cli, &m.base);
            let report = run_sweep(&m, &dir)?;
            print!("{}", std::fs::read_to_string(dir.join("summary.md"))?);
            let failed: Vec<_> = report.children.iter().filter(|c| c.error.is_some()).collect();
            if failed.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for c in &failed {
                    eprintln!(
                        "child {} seed {} failed: {}",
                        c.variant,
                        c.seed,
                        c.error.as_deref().unwrap_or("")
                    );
                }
                let code = if failed.iter().any(|c| c.numeric) { 3 } else { 1 };
                Ok(ExitCode::from(code))
            }
        }
        Command::Plot {
            kind,
            run,
            projection,
            max_images,
        } => {
            let dir = run
                .clone()
                .or_else(|| cli.out.clone())
                .ok_or_else(|| Error::config("run", "pass --run or --out"))?;
            let file = match kind.as_str() {
                "convergence" => plot_convergence(&dir)?,
                "embeddings" => {
                    let p: Projection = projection.parse()?;
                    plot_embeddings(&dir, p, *max_images, cli.seed.unwrap_or(0))?.svg
                }
                other => {
                    return Err(Error::UnknownVariant {
                        kind: "plot kind",
                        value: other.to_string(),
                    })
                }
            };
            println!("wrote {}", file.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                ref e if e.is_numeric() => 3,
                Error::Io(_) | Error::Json(_) => 1,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
