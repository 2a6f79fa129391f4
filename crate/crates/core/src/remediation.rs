//! The iterative remediation loop: train, score the validation set, render the
//! similarity grid, sample hard examples, pull their nearest pool images into
//! the training set and fine-tune. A random-selection control arm shares
//! everything except how pool images are chosen.
//!
//! With an output directory the loop writes
//!
//! ```text
//! <run>/iter-<t>/model.json      checkpoint after iteration t
//! <run>/iter-<t>/saliency.ppm    grid render of that model's failures
//! <run>/iter-<t>/saliency.json   per-cell ids and scores
//! <run>/iter-<t>/matchset.json   selection that produced the model (t >= 1)
//! <run>/iter-<t>/metrics.json    the iteration's LoopState
//! <run>/summary.jsonl            one LoopState per line
//! ```

use std::borrow::Cow;
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::classifier::{accuracy, LogisticTrainer, Scorer, TrainHyper, Trainer};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::grid::{default_dims, make_grid, GridLayout};
use crate::pca::{Coords2D, PcaBasis};
use crate::saliency::{compute_failures, render, FailureScores, DEFAULT_ALPHA, DEFAULT_CELL_PX};
use crate::sampler::{make_weights, match_pool, sample, MatchSet, WeightMode};
use crate::seed::{derive_seed, rng_for};

/// Group tag written over every record when auditing group independence.
pub const POISON_GROUP: &str = "\u{0}poisoned";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    /// Failure-weighted sampling plus nearest-neighbour matching.
    #[default]
    Targeted,
    /// Uniformly random pool images, same per-iteration budget.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub max_iterations: usize,
    /// Learning rate of the fine-tune in iteration `t` is `lr_schedule[t - 1]`.
    pub lr_schedule: Vec<f64>,
    /// Validation samples per iteration; `None` means `ceil(0.1 * N_val)`.
    pub k: Option<usize>,
    /// Pool neighbours per sample.
    pub m: usize,
    pub convergence_min_delta: f64,
    pub convergence_patience: usize,
    pub seed: u64,
    pub weight_mode: WeightMode,
    /// Hyperparameters of the iteration-0 model.
    pub base_hyper: TrainHyper,
    /// Fine-tune hyperparameters; learning rate and seed are set per iteration.
    pub tune_hyper: TrainHyper,
    /// `None` means `floor(sqrt(N_val))` square.
    pub grid: Option<(usize, usize)>,
    pub cell_px: usize,
    pub alpha: f64,
    /// Overwrites all group tags before any decision is made.
    pub audit_poison_groups: bool,
}

/// `n` learning rates spaced geometrically from `start` to `end`.
pub fn geometric_schedule(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n)
            .map(|i| start * (end / start).powf(i as f64 / (n - 1) as f64))
            .collect(),
    }
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            max_iterations: 7,
            lr_schedule: geometric_schedule(1e-4, 1e-6, 7),
            k: None,
            m: 5,
            convergence_min_delta: 0.002,
            convergence_patience: 2,
            seed: 0,
            weight_mode: WeightMode::Failure,
            base_hyper: TrainHyper::default(),
            tune_hyper: TrainHyper::default(),
            grid: None,
            cell_px: DEFAULT_CELL_PX,
            alpha: DEFAULT_ALPHA,
            audit_poison_groups: false,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_schedule.len() < self.max_iterations {
            return Err(Error::InvalidParameter(format!(
                "lr_schedule has {} entries for {} iterations",
                self.lr_schedule.len(),
                self.max_iterations
            )));
        }
        if self
            .lr_schedule
            .iter()
            .any(|&lr| !(lr > 0.0 && lr.is_finite()))
        {
            return Err(Error::InvalidParameter("learning rates must be > 0".into()));
        }
        if self.m == 0 || self.k == Some(0) {
            return Err(Error::InvalidParameter("k and m must be >= 1".into()));
        }
        if self.convergence_min_delta.is_nan()
            || self.convergence_min_delta < 0.0
            || self.convergence_patience == 0
        {
            return Err(Error::InvalidParameter(
                "convergence_min_delta must be >= 0 and convergence_patience >= 1".into(),
            ));
        }
        self.base_hyper.validate()?;
        self.tune_hyper.validate()
    }

    pub fn samples_per_iteration(&self, n_val: usize) -> usize {
        self.k
            .unwrap_or_else(|| (n_val as f64 * 0.1).ceil() as usize)
            .max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub iteration: usize,
    pub arm: Arm,
    pub weight_mode: WeightMode,
    /// Fine-tune learning rate; `None` for the base model or a skipped step.
    pub learning_rate: Option<f64>,
    pub val_accuracy: f64,
    /// Evaluation only.
    pub group_accuracy: BTreeMap<String, f64>,
    pub test_accuracy: Option<f64>,
    pub test_group_accuracy: Option<BTreeMap<String, f64>>,
    pub selected_val_ids: Vec<String>,
    pub matched_pool_ids: Vec<String>,
    /// Pool records appended to the training set this iteration.
    pub added: usize,
    pub train_size: usize,
    pub model_path: Option<String>,
    pub saliency_path: Option<String>,
}

/// Per-group accuracy over records that carry a group tag.
pub fn group_accuracy(scores: &[f64], dataset: &Dataset) -> BTreeMap<String, f64> {
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (s, r) in scores.iter().zip(dataset) {
        if let Some(g) = &r.group {
            let e = tally.entry(g.clone()).or_default();
            e.1 += 1;
            if crate::dataset::Label::from_score(*s) == r.label {
                e.0 += 1;
            }
        }
    }
    tally
        .into_iter()
        .map(|(g, (hit, n))| (g, hit as f64 / n as f64))
        .collect()
}

/// Targeted remediation with the logistic reference model.
pub fn run_loop(
    train: &Dataset,
    val: &Dataset,
    pool: &Dataset,
    test: Option<&Dataset>,
    cfg: &LoopConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<LoopState>> {
    run_loop_with(
        &LogisticTrainer,
        Arm::Targeted,
        train,
        val,
        pool,
        test,
        cfg,
        out_dir,
    )
}

/// Random-selection control arm with the logistic reference model.
pub fn run_random_baseline(
    train: &Dataset,
    val: &Dataset,
    pool: &Dataset,
    test: Option<&Dataset>,
    cfg: &LoopConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<LoopState>> {
    run_loop_with(
        &LogisticTrainer,
        Arm::Random,
        train,
        val,
        pool,
        test,
        cfg,
        out_dir,
    )
}

struct Evaluation {
    failures: FailureScores,
    val_accuracy: f64,
    group_accuracy: BTreeMap<String, f64>,
    test_accuracy: Option<f64>,
    test_group_accuracy: Option<BTreeMap<String, f64>>,
}

fn evaluate<S: Scorer>(model: &S, val: &Dataset, test: Option<&Dataset>) -> Result<Evaluation> {
    let failures = compute_failures(model, val)?;
    let preds: Vec<f64> = failures.entries.iter().map(|e| e.prediction).collect();
    let (test_accuracy, test_group_accuracy) = match test {
        Some(t) => {
            let p = model.predict_dataset(t)?;
            (Some(accuracy(&p, t)), Some(group_accuracy(&p, t)))
        }
        None => (None, None),
    };
    Ok(Evaluation {
        val_accuracy: accuracy(&preds, val),
        group_accuracy: group_accuracy(&preds, val),
        failures,
        test_accuracy,
        test_group_accuracy,
    })
}

fn check_dims(reference: &Dataset, other: &Dataset) -> Result<()> {
    if reference.pixel_count() != other.pixel_count() {
        return Err(Error::DimensionMismatch {
            expected: reference.pixel_count(),
            got: other.pixel_count(),
        });
    }
    Ok(())
}

fn poisoned(ds: &Dataset, on: bool) -> Cow<'_, Dataset> {
    if on {
        Cow::Owned(ds.with_groups_replaced(Some(POISON_GROUP)))
    } else {
        Cow::Borrowed(ds)
    }
}

struct Artifacts<'a> {
    root: Option<&'a Path>,
}

impl Artifacts<'_> {
    fn write(&self, rel: &str, bytes: &[u8]) -> Result<Option<String>> {
        let Some(root) = self.root else {
            return Ok(None);
        };
        let path = root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(Some(rel.to_owned()))
    }
}

#[derive(Serialize)]
struct MatchAudit<'a> {
    arm: Arm,
    mode: WeightMode,
    seed: u64,
    #[serde(flatten)]
    matches: &'a MatchSet,
}

/// Generic loop over any trainer. `arm` picks targeted or random selection.
#[allow(clippy::too_many_arguments)]
pub fn run_loop_with<T: Trainer>(
    trainer: &T,
    arm: Arm,
    train: &Dataset,
    val: &Dataset,
    pool: &Dataset,
    test: Option<&Dataset>,
    cfg: &LoopConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<LoopState>> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Empty("augmentation pool"));
    }
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    check_dims(val, train)?;
    check_dims(val, pool)?;
    if let Some(t) = test {
        check_dims(val, t)?;
    }

    // Everything that drives a decision reads these copies only.
    let d_train = poisoned(train, cfg.audit_poison_groups);
    let d_val = poisoned(val, cfg.audit_poison_groups);
    let d_pool = poisoned(pool, cfg.audit_poison_groups);

    let held_out: HashSet<&str> = val
        .ids()
        .chain(test.into_iter().flat_map(|t| t.ids()))
        .collect();
    if let Some(id) = train.ids().find(|id| held_out.contains(id)) {
        return Err(Error::InvalidParameter(format!(
            "training record `{id}` also appears in a held-out set"
        )));
    }

    let basis = PcaBasis::fit(&d_val)?;
    let val_coords = basis.project(&d_val)?;
    let pool_coords = basis.project(&d_pool)?;
    let (rows, cols) = cfg.grid.unwrap_or_else(|| default_dims(val.len()));
    let grid = make_grid(&val_coords, rows, cols)?;

    let k = cfg.samples_per_iteration(val.len());
    let artifacts = Artifacts { root: out_dir };

    let base_hyper = TrainHyper {
        seed: derive_seed(cfg.seed, "base"),
        ..cfg.base_hyper.clone()
    };
    let mut model = trainer.train(&d_train, &base_hyper)?;
    let mut working = d_train.into_owned();
    let mut in_working: HashSet<String> = working.ids().map(str::to_owned).collect();

    let mut states = Vec::new();
    let mut eval = evaluate(&model, val, test)?;
    let (model_path, saliency_path) = emit_iteration(
        trainer, &artifacts, 0, &model, &grid, &d_val, &eval, cfg, None,
    )?;
    let base_state = LoopState {
        iteration: 0,
        arm,
        weight_mode: cfg.weight_mode,
        learning_rate: None,
        val_accuracy: eval.val_accuracy,
        group_accuracy: eval.group_accuracy.clone(),
        test_accuracy: eval.test_accuracy,
        test_group_accuracy: eval.test_group_accuracy.clone(),
        selected_val_ids: Vec::new(),
        matched_pool_ids: Vec::new(),
        added: 0,
        train_size: working.len(),
        model_path,
        saliency_path,
    };
    artifacts.write("iter-0/metrics.json", &serde_json::to_vec(&base_state)?)?;
    states.push(base_state);

    let mut stale = 0;
    for t in 1..=cfg.max_iterations {
        let matches = select(
            arm,
            cfg,
            t,
            k,
            &eval.failures,
            &val_coords,
            &pool_coords,
            &d_pool,
        )?;

        let mut additions = Vec::new();
        for id in &matches.matched_pool_ids {
            if held_out.contains(id.as_str()) {
                return Err(Error::InvalidParameter(format!(
                    "pool record `{id}` collides with a held-out id"
                )));
            }
            let i = d_pool
                .position(id)
                .ok_or_else(|| Error::UnknownId(id.clone()))?;
            let mut record = d_pool.records()[i].clone();
            // a pool image picked again in a later iteration joins as a copy
            if !in_working.insert(record.id.clone()) {
                record.id = format!("{id}@{t}");
                in_working.insert(record.id.clone());
            }
            additions.push(record);
        }
        let added = additions.len();
        let learning_rate = if added > 0 {
            working.extend(additions)?;
            let hyper = TrainHyper {
                learning_rate: cfg.lr_schedule[t - 1],
                seed: derive_seed(cfg.seed, &format!("tune/{t}")),
                ..cfg.tune_hyper.clone()
            };
            model = trainer.fine_tune(&model, &working, &hyper)?;
            Some(hyper.learning_rate)
        } else {
            log::info!("iteration {t}: no new pool images, skipping fine-tune");
            None
        };

        let prev_acc = eval.val_accuracy;
        eval = evaluate(&model, val, test)?;
        let (model_path, saliency_path) = emit_iteration(
            trainer,
            &artifacts,
            t,
            &model,
            &grid,
            &d_val,
            &eval,
            cfg,
            Some(&MatchAudit {
                arm,
                mode: cfg.weight_mode,
                seed: cfg.seed,
                matches: &matches,
            }),
        )?;
        let state = LoopState {
            iteration: t,
            arm,
            weight_mode: cfg.weight_mode,
            learning_rate,
            val_accuracy: eval.val_accuracy,
            group_accuracy: eval.group_accuracy.clone(),
            test_accuracy: eval.test_accuracy,
            test_group_accuracy: eval.test_group_accuracy.clone(),
            selected_val_ids: matches.sampled_val_ids,
            matched_pool_ids: matches.matched_pool_ids,
            added,
            train_size: working.len(),
            model_path,
            saliency_path,
        };
        artifacts.write(
            &format!("iter-{t}/metrics.json"),
            &serde_json::to_vec(&state)?,
        )?;
        log::info!(
            "iteration {t}: val accuracy {:.4}, train size {}",
            state.val_accuracy,
            state.train_size
        );
        states.push(state);

        if eval.val_accuracy - prev_acc < cfg.convergence_min_delta {
            stale += 1;
            if stale >= cfg.convergence_patience {
                break;
            }
        } else {
            stale = 0;
        }
    }

    let mut summary = Vec::new();
    for s in &states {
        serde_json::to_writer(&mut summary, s)?;
        summary.push(b'\n');
    }
    artifacts.write("summary.jsonl", &summary)?;
    Ok(states)
}

#[allow(clippy::too_many_arguments)]
fn select(
    arm: Arm,
    cfg: &LoopConfig,
    t: usize,
    k: usize,
    failures: &FailureScores,
    val_coords: &Coords2D,
    pool_coords: &Coords2D,
    pool: &Dataset,
) -> Result<MatchSet> {
    match arm {
        Arm::Targeted => {
            let weights = make_weights(failures, cfg.weight_mode)?;
            let sampled = sample(&weights, k, derive_seed(cfg.seed, &format!("sample/{t}")))?;
            match_pool(&sampled, val_coords, pool_coords, cfg.m)
        }
        Arm::Random => {
            let budget = (k * cfg.m).min(pool.len());
            let mut rng = rng_for(cfg.seed, &format!("random/{t}"));
            let picks = index::sample(&mut rng, pool.len(), budget).into_vec();
            Ok(MatchSet {
                sampled_val_ids: Vec::new(),
                matched_pool_ids: picks.iter().map(|&i| pool_coords.ids[i].clone()).collect(),
                distances: Vec::new(),
            })
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn emit_iteration<T: Trainer>(
    trainer: &T,
    artifacts: &Artifacts<'_>,
    t: usize,
    model: &T::Model,
    grid: &GridLayout,
    val: &Dataset,
    eval: &Evaluation,
    cfg: &LoopConfig,
    matches: Option<&MatchAudit<'_>>,
) -> Result<(Option<String>, Option<String>)> {
    let Some(root) = artifacts.root else {
        return Ok((None, None));
    };
    let dir = format!("iter-{t}");
    fs::create_dir_all(root.join(&dir)).map_err(|e| Error::io(root.join(&dir), e))?;
    let model_rel = format!("{dir}/model.json");
    trainer.save(model, &root.join(&model_rel))?;
    let img = render(grid, val, &eval.failures, cfg.cell_px, cfg.alpha)?;
    let saliency = artifacts.write(&format!("{dir}/saliency.ppm"), &img.encode_ppm())?;
    artifacts.write(
        &format!("{dir}/saliency.json"),
        img.sidecar_json()?.as_bytes(),
    )?;
    if let Some(m) = matches {
        artifacts.write(&format!("{dir}/matchset.json"), &serde_json::to_vec(m)?)?;
    }
    Ok((Some(model_rel), saliency))
}
