//! `atlnet` — command line front end of the classification, active learning
//! and transfer pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atlnet::data::{load_cube, load_labels, save_cube, save_labels, synth_benchmark};
use atlnet::network::ModelFile;
use atlnet::numcore::{substream, Stream};
use atlnet::pipeline::{
    classify, emap_reference, eval, load_scenes, read_training_csv, run_pretrain, run_transfer,
    write_metrics_csv, write_pretrain, write_transfer, DataSource, FeatureMode, RunConfig, HISTORY_FILE,
    MODEL_FILE, SOURCE_TRAINING_FILE, TRANSFERRED_MODEL_FILE, TRANSFER_REPORT_FILE,
};
use atlnet::{Error, ErrorKind, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "atlnet",
    version,
    about = "Spectral-spatial SSAE classification with active transfer learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by the configuration-driven subcommands.
#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides `seed` from the configuration.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Overrides `out_dir` from the configuration.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes the synthetic source and target scenes as cube and label files.
    Synth {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Pretrains on the source scene and runs active learning; writes the
    /// model, the learning curve and the labeled source pixels.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Transfers a pretrained model to the target scene.
    Transfer {
        #[command(flatten)]
        run: RunArgs,
        /// Source model written by `pretrain`.
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Labeled source pixels; defaults to the file next to the model.
        #[arg(long, value_name = "PATH")]
        source_training: Option<PathBuf>,
    },
    /// Predicts a label map for a cube. EMAP features are built on the
    /// principal directions of the configured source scene.
    Classify {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "PATH")]
        cube: PathBuf,
    },
    /// Scores a predicted label map against a reference map.
    Eval {
        #[arg(long, value_name = "PATH")]
        predicted: PathBuf,
        #[arg(long, value_name = "PATH")]
        truth: PathBuf,
        /// Also write `metrics.csv` into this directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { run } => synth(&run.load()?),
        Command::Pretrain { run } => {
            let cfg = run.load()?;
            let outcome = run_pretrain(&cfg)?;
            write_pretrain(&outcome, &cfg.out_dir)?;
            if let Some(last) = outcome.history.last() {
                println!(
                    "pretrain: {} AL iterations, {} labeled, OA {:.4} AA {:.4} Kappa {:.4}",
                    last.iteration, last.labeled_count, last.oa, last.aa, last.kappa
                );
            }
            println!(
                "wrote {}, {}, {}",
                cfg.out_dir.join(MODEL_FILE).display(),
                cfg.out_dir.join(HISTORY_FILE).display(),
                cfg.out_dir.join(SOURCE_TRAINING_FILE).display()
            );
            Ok(())
        }
        Command::Transfer {
            run,
            model,
            source_training,
        } => {
            let cfg = run.load()?;
            let source_training = source_training.unwrap_or_else(|| sibling(&model, SOURCE_TRAINING_FILE));
            let rows = read_training_csv(&source_training)?;
            let outcome = run_transfer(&cfg, ModelFile::load(&model)?, &rows)?;
            write_transfer(&outcome, &cfg.out_dir)?;
            for w in &outcome.report.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(last) = outcome.report.rows.last() {
                println!(
                    "transfer: {} rounds, loss {:.3e}, target OA {:.4} AA {:.4} Kappa {:.4}",
                    last.iteration, last.loss, last.oa, last.aa, last.kappa
                );
            }
            println!(
                "wrote {}, {}",
                cfg.out_dir.join(TRANSFERRED_MODEL_FILE).display(),
                cfg.out_dir.join(TRANSFER_REPORT_FILE).display()
            );
            Ok(())
        }
        Command::Classify { run, model, cube } => {
            let cfg = run.load()?;
            let model = ModelFile::load(&model)?;
            let cube = load_cube(&cube)?;
            let reference = match cfg.features.mode {
                FeatureMode::Spectral => None,
                _ => emap_reference(&load_scenes(&cfg.data, cfg.seed)?.source.cube, &cfg.features)?,
            };
            let map = classify(&model, &cube, &cfg.features, reference.as_ref())?;
            create_dir(&cfg.out_dir)?;
            let path = cfg.out_dir.join("classified.hlbl");
            save_labels(&map, &path)?;
            println!("wrote {} ({}x{})", path.display(), map.height(), map.width());
            Ok(())
        }
        Command::Eval {
            predicted,
            truth,
            out,
        } => {
            let m = eval(&load_labels(&predicted)?, &load_labels(&truth)?)?;
            println!("OA {:.6} AA {:.6} Kappa {:.6}", m.oa, m.aa, m.kappa);
            if let Some(dir) = out {
                create_dir(&dir)?;
                write_metrics_csv(&dir.join("metrics.csv"), &m)?;
            }
            Ok(())
        }
    }
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let DataSource::Synthetic(synth) = &cfg.data else {
        return Err(Error::Config("synth needs [data] kind = \"synthetic\"".into()));
    };
    let (source, target) = synth_benchmark(synth, &mut substream(cfg.seed, Stream::Synthetic))?;
    create_dir(&cfg.out_dir)?;
    for (name, scene) in [("source", &source), ("target", &target)] {
        save_cube(&scene.cube, &cfg.out_dir.join(format!("{name}.hcub")))?;
        save_labels(&scene.labels, &cfg.out_dir.join(format!("{name}.hlbl")))?;
    }
    println!("wrote source and target scenes to {}", cfg.out_dir.display());
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
