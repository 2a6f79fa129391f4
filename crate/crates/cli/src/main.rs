mod config;
mod error;
mod lock;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use popbias::grid::default_dims;
use popbias::seed::derive_seed;
use popbias::synth::generate_uniform_split;
use popbias::{
    classifier, compute_failures, generate_corpus, load_manifest, make_grid, render, run_loop,
    run_random_baseline, save_manifest, Dataset, ExternalScorer, PcaBasis, RefModel, Scorer,
    WeightMode,
};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::lock::RunLock;

#[derive(Debug, Parser)]
#[command(
    name = "popbias",
    version,
    about = "Visualise and remediate population bias in image classifiers"
)]
struct Cli {
    /// Flat TOML run configuration; relative paths inside resolve against its directory
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed, overriding `seed` in the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, overriding the config (`data_dir` for synth, `out_dir` otherwise)
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train/val/pool (and optional test) manifests
    Synth,

    /// Fit the two-component PCA basis of a manifest
    FitPca {
        /// Images to fit on [default: the val manifest]
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Basis file [default: <out-dir>/basis.json]
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Train the reference logistic model
    Train {
        /// Training images [default: the train manifest]
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Model file [default: <out-dir>/model.json]
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },

    /// Render the saliency grid of one model over a manifest
    Visualize {
        /// Images to place on the grid [default: the val manifest]
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// PCA basis from fit-pca
        #[arg(long)]
        basis: PathBuf,
        /// Reference model from train
        #[arg(
            long,
            required_unless_present = "scorer_cmd",
            conflicts_with = "scorer_cmd"
        )]
        model: Option<PathBuf>,
        /// External scorer; run with a manifest path appended, prints `{"id","score"}` lines
        #[arg(long)]
        scorer_cmd: Option<String>,
        /// PPM image [default: <out-dir>/saliency.ppm]; a .json sidecar is written next to it
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
    },

    /// Run the remediation loop end to end
    Loop {
        /// Replace targeted sampling with uniformly random pool images
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Sampling weights, overriding the config
        #[arg(long, value_enum)]
        weight_mode: Option<Mode>,
        #[arg(long)]
        max_iterations: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Baseline {
    Random,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Failure,
    Eq7,
}

impl From<Mode> for WeightMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Failure => WeightMode::Failure,
            Mode::Eq7 => WeightMode::Eq7,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            let first = message
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!(
                "{}",
                serde_json::json!({ "error": "usage", "message": first })
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Synth => {
            if let Some(dir) = cli.out_dir {
                cfg.data_dir = dir;
            }
            synth(&cfg)
        }
        cmd => {
            if let Some(dir) = cli.out_dir {
                cfg.out_dir = dir;
            }
            match cmd {
                Command::Synth => unreachable!(),
                Command::FitPca { manifest, out } => fit_pca(&cfg, manifest, out),
                Command::Train {
                    manifest,
                    out,
                    learning_rate,
                    max_epochs,
                    batch_size,
                } => {
                    cfg.learning_rate = learning_rate.unwrap_or(cfg.learning_rate);
                    cfg.max_epochs = max_epochs.unwrap_or(cfg.max_epochs);
                    cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
                    train(&cfg, manifest, out)
                }
                Command::Visualize {
                    manifest,
                    basis,
                    model,
                    scorer_cmd,
                    out,
                    rows,
                    cols,
                } => visualize(
                    &cfg,
                    manifest,
                    &basis,
                    model,
                    scorer_cmd,
                    out,
                    rows.zip(cols),
                ),
                Command::Loop {
                    baseline,
                    weight_mode,
                    max_iterations,
                } => {
                    if let Some(m) = weight_mode {
                        cfg.weight_mode = m.into();
                    }
                    if let Some(n) = max_iterations {
                        cfg.max_iterations = n;
                    }
                    run_remediation(&cfg, baseline.is_some())
                }
            }
        }
    }
}

fn output_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let _lock = RunLock::acquire(&cfg.data_dir)?;
    let spec = cfg.corpus_spec(derive_seed(cfg.seed, "synth"));
    let corpus = generate_corpus(&spec)?;
    for (name, ds) in [
        ("train", &corpus.train),
        ("val", &corpus.val),
        ("pool", &corpus.pool),
    ] {
        let path = save_manifest(ds, &cfg.data_dir, name)?;
        log::info!("wrote {} ({} images)", path.display(), ds.len());
    }
    if cfg.n_test > 0 {
        let test = generate_uniform_split(&spec, "test", cfg.n_test)?;
        save_manifest(&test, &cfg.data_dir, "test")?;
    }
    Ok(())
}

fn fit_pca(
    cfg: &RunConfig,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let out = out.unwrap_or_else(|| cfg.out_dir.join("basis.json"));
    let dir = output_dir(&out);
    let _lock = RunLock::acquire(&dir)?;
    let ds = load_manifest(manifest.unwrap_or_else(|| cfg.manifest("val")))?;
    PcaBasis::fit(&ds)?.save(&out)?;
    Ok(())
}

fn train(cfg: &RunConfig, manifest: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = out.unwrap_or_else(|| cfg.out_dir.join("model.json"));
    let dir = output_dir(&out);
    let _lock = RunLock::acquire(&dir)?;
    let ds = load_manifest(manifest.unwrap_or_else(|| cfg.manifest("train")))?;
    let model = classifier::train(&ds, &cfg.hyper(derive_seed(cfg.seed, "train")))?;
    model.save(&out)?;
    Ok(())
}

fn visualize(
    cfg: &RunConfig,
    manifest: Option<PathBuf>,
    basis: &Path,
    model: Option<PathBuf>,
    scorer_cmd: Option<String>,
    out: Option<PathBuf>,
    dims: Option<(usize, usize)>,
) -> Result<(), CliError> {
    let out = out.unwrap_or_else(|| cfg.out_dir.join("saliency.ppm"));
    let dir = output_dir(&out);
    let _lock = RunLock::acquire(&dir)?;
    let ds: Dataset = load_manifest(manifest.unwrap_or_else(|| cfg.manifest("val")))?;
    let basis = PcaBasis::load(basis)?;
    let coords = basis.project(&ds)?;
    let (rows, cols) = dims
        .or(cfg.grid_rows.zip(cfg.grid_cols))
        .unwrap_or_else(|| default_dims(ds.len()));
    let grid = make_grid(&coords, rows, cols)?;

    let scorer: Box<dyn Scorer> = match (model, scorer_cmd) {
        (Some(path), _) => Box::new(RefModel::load(path)?),
        (None, Some(cmd)) => Box::new(ExternalScorer::new(&cmd, ds.height(), ds.width())?),
        (None, None) => {
            return Err(CliError::Config(
                "one of --model or --scorer-cmd is required".into(),
            ))
        }
    };
    let failures = compute_failures(scorer.as_ref(), &ds)?;
    let image = render(&grid, &ds, &failures, cfg.cell_px, cfg.alpha)?;
    image.write_ppm(&out)?;
    let sidecar = out.with_extension("json");
    fs::write(&sidecar, image.sidecar_json()?).map_err(|e| CliError::Io {
        path: sidecar.clone(),
        source: e,
    })?;
    Ok(())
}

fn run_remediation(cfg: &RunConfig, random: bool) -> Result<(), CliError> {
    let _lock = RunLock::acquire(&cfg.out_dir)?;
    let lc = cfg.loop_config(derive_seed(cfg.seed, "loop"))?;
    let train = load_manifest(cfg.manifest("train"))?;
    let val = load_manifest(cfg.manifest("val"))?;
    let pool = load_manifest(cfg.manifest("pool"))?;
    let test = match &cfg.test_manifest {
        Some(p) => Some(load_manifest(p)?),
        None => None,
    };
    let runner = if random {
        run_random_baseline
    } else {
        run_loop
    };
    let states = runner(&train, &val, &pool, test.as_ref(), &lc, Some(&cfg.out_dir))?;
    if let Some(last) = states.last() {
        println!(
            "{}",
            serde_json::json!({
                "iterations": last.iteration,
                "val_accuracy": last.val_accuracy,
                "group_accuracy": last.group_accuracy,
                "summary": cfg.out_dir.join("summary.jsonl"),
            })
        );
    }
    Ok(())
}
