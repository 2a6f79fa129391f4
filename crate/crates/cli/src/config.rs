//! Flat TOML run configuration.
//!
//! Every key is optional. Relative paths are resolved against the directory
//! holding the config file, or the working directory when no file is given.

use std::fs;
use std::path::{Path, PathBuf};

use popbias::remediation::geometric_schedule;
use popbias::{CorpusSpec, LoopConfig, TrainHyper, WeightMode};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // corpus
    pub n_train: usize,
    pub n_val: usize,
    pub n_pool: usize,
    pub n_test: usize,
    pub train_complexion_mix: f64,
    pub noise_sigma: f64,
    pub height: usize,
    pub width: usize,

    // paths
    pub data_dir: PathBuf,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub pool_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,

    // training
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    pub val_fraction: f64,
    pub full_batch: bool,

    // loop
    pub max_iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_schedule: Option<Vec<f64>>,
    pub k: Option<usize>,
    pub m: usize,
    pub convergence_min_delta: f64,
    pub convergence_patience: usize,
    pub weight_mode: WeightMode,
    pub grid_rows: Option<usize>,
    pub grid_cols: Option<usize>,
    pub cell_px: usize,
    pub alpha: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusSpec::default();
        let hyper = TrainHyper::default();
        let lc = LoopConfig::default();
        RunConfig {
            seed: 0,
            n_train: corpus.n_train,
            n_val: corpus.n_val,
            n_pool: corpus.n_pool,
            n_test: 0,
            train_complexion_mix: corpus.train_complexion_mix,
            noise_sigma: corpus.noise_sigma,
            height: corpus.height,
            width: corpus.width,
            data_dir: "data".into(),
            train_manifest: None,
            val_manifest: None,
            pool_manifest: None,
            test_manifest: None,
            out_dir: "runs/default".into(),
            learning_rate: hyper.learning_rate,
            max_epochs: hyper.max_epochs,
            batch_size: hyper.batch_size,
            l2: hyper.l2,
            early_stop_patience: hyper.early_stop_patience,
            early_stop_min_delta: hyper.early_stop_min_delta,
            val_fraction: hyper.val_fraction,
            full_batch: hyper.full_batch,
            max_iterations: lc.max_iterations,
            lr_start: 1e-4,
            lr_end: 1e-6,
            lr_schedule: None,
            k: lc.k,
            m: lc.m,
            convergence_min_delta: lc.convergence_min_delta,
            convergence_patience: lc.convergence_patience,
            weight_mode: lc.weight_mode,
            grid_rows: None,
            grid_cols: None,
            cell_px: lc.cell_px,
            alpha: lc.alpha,
        }
    }
}

impl RunConfig {
    /// Parses `path`, or returns defaults rooted at the working directory.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
            let key = line.and_then(|l| key_on_line(text, l));
            CliError::ConfigAt {
                message: e.message().to_string(),
                line,
                key,
            }
        })
    }

    fn rebase(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.data_dir);
        join(&mut self.out_dir);
        for p in [
            &mut self.train_manifest,
            &mut self.val_manifest,
            &mut self.pool_manifest,
            &mut self.test_manifest,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
    }

    pub fn manifest(&self, split: &str) -> PathBuf {
        let explicit = match split {
            "train" => &self.train_manifest,
            "val" => &self.val_manifest,
            "pool" => &self.pool_manifest,
            _ => &self.test_manifest,
        };
        explicit
            .clone()
            .unwrap_or_else(|| self.data_dir.join(format!("{split}.jsonl")))
    }

    pub fn corpus_spec(&self, master_seed: u64) -> CorpusSpec {
        CorpusSpec {
            n_train: self.n_train,
            n_val: self.n_val,
            n_pool: self.n_pool,
            train_complexion_mix: self.train_complexion_mix,
            noise_sigma: self.noise_sigma,
            master_seed,
            height: self.height,
            width: self.width,
        }
    }

    pub fn hyper(&self, seed: u64) -> TrainHyper {
        TrainHyper {
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            l2: self.l2,
            early_stop_patience: self.early_stop_patience,
            early_stop_min_delta: self.early_stop_min_delta,
            seed,
            val_fraction: self.val_fraction,
            full_batch: self.full_batch,
        }
    }

    pub fn loop_config(&self, seed: u64) -> Result<LoopConfig, CliError> {
        let grid = match (self.grid_rows, self.grid_cols) {
            (Some(r), Some(c)) => Some((r, c)),
            (None, None) => None,
            _ => {
                return Err(CliError::Config(
                    "grid_rows and grid_cols must be given together".into(),
                ))
            }
        };
        let lr_schedule = self
            .lr_schedule
            .clone()
            .unwrap_or_else(|| geometric_schedule(self.lr_start, self.lr_end, self.max_iterations));
        let cfg = LoopConfig {
            max_iterations: self.max_iterations,
            lr_schedule,
            k: self.k,
            m: self.m,
            convergence_min_delta: self.convergence_min_delta,
            convergence_patience: self.convergence_patience,
            seed,
            weight_mode: self.weight_mode,
            base_hyper: self.hyper(seed),
            tune_hyper: self.hyper(seed),
            grid,
            cell_px: self.cell_px,
            alpha: self.alpha,
            audit_poison_groups: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The key assigned on 1-based line `line`, if that line is an assignment.
fn key_on_line(text: &str, line: usize) -> Option<String> {
    let l = text.lines().nth(line - 1)?;
    let (key, _) = l.split_once('=')?;
    let key = key.trim();
    (!key.is_empty() && !key.starts_with('#')).then(|| key.to_string())
}
