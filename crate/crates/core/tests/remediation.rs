use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use popbias::synth::generate_uniform_split;
use popbias::{
    generate_corpus, run_loop, run_random_baseline, Arm, Corpus, CorpusSpec, Dataset, ImageRecord,
    LoopConfig, LoopState, TrainHyper,
};

fn small_corpus(seed: u64) -> (Corpus, Dataset) {
    let spec = CorpusSpec {
        n_train: 160,
        n_val: 64,
        n_pool: 300,
        height: 16,
        width: 16,
        master_seed: seed,
        ..CorpusSpec::default()
    };
    let test = generate_uniform_split(&spec, "test", 40).unwrap();
    (generate_corpus(&spec).unwrap(), test)
}

fn fast_config(seed: u64) -> LoopConfig {
    let hyper = TrainHyper {
        learning_rate: 0.05,
        max_epochs: 10,
        ..TrainHyper::default()
    };
    LoopConfig {
        max_iterations: 3,
        lr_schedule: vec![0.02, 0.01, 0.005],
        convergence_patience: 10,
        seed,
        base_hyper: hyper.clone(),
        tune_hyper: hyper,
        cell_px: 8,
        ..LoopConfig::default()
    }
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn zero_iterations_returns_base_state_only() {
    let (c, _) = small_corpus(1);
    let cfg = LoopConfig {
        max_iterations: 0,
        ..fast_config(1)
    };
    let states = run_loop(&c.train, &c.val, &c.pool, None, &cfg, None).unwrap();
    assert_eq!(states.len(), 1);
    assert_eq!(states[0].iteration, 0);
    assert_eq!(states[0].learning_rate, None);
    assert_eq!(states[0].train_size, c.train.len());
}

#[test]
fn states_are_well_formed() {
    let (c, test) = small_corpus(2);
    let cfg = fast_config(2);
    let states = run_loop(&c.train, &c.val, &c.pool, Some(&test), &cfg, None).unwrap();
    assert_eq!(states.len(), 4);
    let pool_ids: HashSet<&str> = c.pool.ids().collect();
    for (t, s) in states.iter().enumerate() {
        assert_eq!(s.iteration, t);
        assert_eq!(s.arm, Arm::Targeted);
        assert!((0.0..=1.0).contains(&s.val_accuracy));
        assert!(s.test_accuracy.is_some());
        assert!(s.group_accuracy.values().all(|a| (0.0..=1.0).contains(a)));
        if t > 0 {
            assert_eq!(s.learning_rate, Some(cfg.lr_schedule[t - 1]));
            assert_eq!(
                s.selected_val_ids.len(),
                cfg.samples_per_iteration(c.val.len())
            );
            assert!(s
                .matched_pool_ids
                .iter()
                .all(|id| pool_ids.contains(id.as_str())));
            let unique: HashSet<&String> = s.matched_pool_ids.iter().collect();
            assert_eq!(unique.len(), s.matched_pool_ids.len());
            assert_eq!(s.added, s.matched_pool_ids.len());
            assert_eq!(s.train_size, states[t - 1].train_size + s.added);
        }
    }
}

#[test]
fn runs_are_deterministic_down_to_artifact_bytes() {
    let (c, _) = small_corpus(3);
    let cfg = fast_config(3);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = run_loop(&c.train, &c.val, &c.pool, None, &cfg, Some(a.path())).unwrap();
    let sb = run_loop(&c.train, &c.val, &c.pool, None, &cfg, Some(b.path())).unwrap();
    assert_eq!(sa, sb);
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert!(ta.contains_key("summary.jsonl"));
    assert!(ta.contains_key("iter-0/saliency.ppm"));
    assert!(ta.contains_key("iter-1/matchset.json"));
    assert_eq!(ta, tb);

    let lines: Vec<LoopState> = String::from_utf8(ta["summary.jsonl"].clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, sa);
}

#[test]
fn group_tags_do_not_steer_selection() {
    let (c, _) = small_corpus(4);
    let cfg = fast_config(4);
    let plain = run_loop(&c.train, &c.val, &c.pool, None, &cfg, None).unwrap();
    let audited = run_loop(
        &c.train,
        &c.val,
        &c.pool,
        None,
        &LoopConfig {
            audit_poison_groups: true,
            ..cfg
        },
        None,
    )
    .unwrap();
    assert_eq!(plain.len(), audited.len());
    for (p, a) in plain.iter().zip(&audited) {
        assert_eq!(p.selected_val_ids, a.selected_val_ids);
        assert_eq!(p.matched_pool_ids, a.matched_pool_ids);
        assert_eq!(p.val_accuracy, a.val_accuracy);
    }
}

#[test]
fn random_arm_spends_the_full_budget() {
    let (c, _) = small_corpus(5);
    let cfg = fast_config(5);
    let states = run_random_baseline(&c.train, &c.val, &c.pool, None, &cfg, None).unwrap();
    let budget = cfg.samples_per_iteration(c.val.len()) * cfg.m;
    for s in &states[1..] {
        assert_eq!(s.arm, Arm::Random);
        assert!(s.selected_val_ids.is_empty());
        assert_eq!(s.matched_pool_ids.len(), budget);
    }
    let again = run_random_baseline(&c.train, &c.val, &c.pool, None, &cfg, None).unwrap();
    assert_eq!(states, again);
}

#[test]
fn reselected_pool_images_are_appended_again() {
    let (c, _) = small_corpus(6);
    let tiny_pool = c.pool.select(&(0..12).collect::<Vec<_>>()).unwrap();
    let cfg = LoopConfig {
        m: 12,
        ..fast_config(6)
    };
    let states = run_loop(&c.train, &c.val, &tiny_pool, None, &cfg, None).unwrap();
    for s in &states[1..] {
        assert_eq!(s.added, 12);
    }
    assert_eq!(
        states.last().unwrap().train_size,
        c.train.len() + 12 * (states.len() - 1)
    );
}

#[test]
fn held_out_ids_never_enter_training() {
    let (c, test) = small_corpus(7);
    let cfg = fast_config(7);

    let mut leaky = c.train.clone();
    leaky.extend([c.val.records()[0].clone()]).unwrap();
    assert!(run_loop(&leaky, &c.val, &c.pool, None, &cfg, None).is_err());

    let mut tainted_pool = c.pool.clone();
    let mut clash: ImageRecord = test.records()[0].clone();
    clash.pixels = c.pool.records()[0].pixels.clone();
    tainted_pool.extend([clash]).unwrap();
    let tainted = Dataset::new(
        c.pool.height(),
        c.pool.width(),
        tainted_pool.records().to_vec(),
    )
    .unwrap();
    let result = run_loop(
        &c.train,
        &c.val,
        &tainted,
        Some(&test),
        &LoopConfig { m: 400, ..cfg },
        None,
    );
    assert!(result.is_err());
}

#[test]
fn convergence_stops_a_flat_run() {
    let (c, _) = small_corpus(8);
    let cfg = LoopConfig {
        max_iterations: 7,
        lr_schedule: vec![1e-12; 7],
        convergence_patience: 2,
        ..fast_config(8)
    };
    let states = run_loop(&c.train, &c.val, &c.pool, None, &cfg, None).unwrap();
    assert_eq!(states.len(), 3);
}
