use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_popbias"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let last = text.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|_| panic!("not a JSON error line: {text}"))
}

/// A small corpus written by `synth` into a fresh directory.
fn fixture(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "seed = 11\nn_train = 120\nn_val = 49\nn_pool = 150\nheight = 20\nwidth = 20\n\
             learning_rate = 0.01\nmax_epochs = 8\nmax_iterations = 2\ncell_px = 8\n{extra}"
        ),
    )
    .unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "synth"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    (dir, cfg)
}

fn c(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_subcommand_and_flag() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for word in [
        "synth",
        "fit-pca",
        "train",
        "visualize",
        "loop",
        "--config",
        "--seed",
        "--out-dir",
    ] {
        assert!(text.contains(word), "missing {word}");
    }
    let out = run(&["loop", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("--baseline") && text.contains("--weight-mode"));
    let out = run(&["visualize", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("--model") && text.contains("--scorer-cmd") && text.contains("--basis"));
}

#[test]
fn synth_writes_manifests_next_to_config() {
    let (dir, _) = fixture("n_test = 10\n");
    for split in ["train", "val", "pool", "test"] {
        assert!(
            dir.path()
                .join("data")
                .join(format!("{split}.jsonl"))
                .exists(),
            "{split}"
        );
    }
    assert!(!dir.path().join("data/.popbias.lock").exists());
}

#[test]
fn full_pipeline_is_reproducible() {
    let (dir, cfg) = fixture("");
    let out_dir = dir.path().join("out");
    let base = ["--config", c(&cfg), "--out-dir", c(&out_dir)];

    let ok = |extra: &[&str]| {
        let args: Vec<&str> = base.iter().copied().chain(extra.iter().copied()).collect();
        let out = run(&args);
        assert!(
            out.status.success(),
            "{extra:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    };
    ok(&["fit-pca"]);
    ok(&["train"]);
    let basis = out_dir.join("basis.json");
    let model = out_dir.join("model.json");
    ok(&["visualize", "--basis", c(&basis), "--model", c(&model)]);
    let first = fs::read(out_dir.join("saliency.ppm")).unwrap();
    assert!(first.starts_with(b"P6\n56 56\n255\n"));
    assert!(out_dir.join("saliency.json").exists());

    ok(&["train"]);
    ok(&["visualize", "--basis", c(&basis), "--model", c(&model)]);
    assert_eq!(fs::read(out_dir.join("saliency.ppm")).unwrap(), first);
}

#[test]
fn seed_flag_overrides_config() {
    let (dir, cfg) = fixture("");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (d, seed) in [(&a, "1"), (&b, "2")] {
        let out = run(&[
            "--config",
            c(&cfg),
            "--seed",
            seed,
            "--out-dir",
            c(d),
            "train",
        ]);
        assert!(out.status.success());
    }
    assert_ne!(
        fs::read(a.join("model.json")).unwrap(),
        fs::read(b.join("model.json")).unwrap()
    );
}

#[test]
fn loop_arms_and_modes() {
    let (dir, cfg) = fixture("");
    for (name, extra) in [
        ("targeted", vec![]),
        ("random", vec!["--baseline", "random"]),
        ("eq7", vec!["--weight-mode", "eq7"]),
    ] {
        let out_dir = dir.path().join(name);
        let mut args = vec!["--config", c(&cfg), "--out-dir", c(&out_dir), "loop"];
        args.extend(extra);
        let out = run(&args);
        assert!(
            out.status.success(),
            "{name}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let summary = fs::read_to_string(out_dir.join("summary.jsonl")).unwrap();
        let first: serde_json::Value =
            serde_json::from_str(summary.lines().next().unwrap()).unwrap();
        let last: serde_json::Value =
            serde_json::from_str(summary.lines().last().unwrap()).unwrap();
        assert_eq!(first["iteration"], 0);
        match name {
            "random" => assert_eq!(last["arm"], "random"),
            "eq7" => assert_eq!(last["weight_mode"], "eq7"),
            _ => assert_eq!(last["arm"], "targeted"),
        }
        assert!(out_dir.join("iter-1/matchset.json").exists());
    }
}

#[test]
fn mismatched_basis_is_a_data_error_naming_both_sizes() {
    let (dir, cfg) = fixture("");
    let other = dir.path().join("other.toml");
    fs::write(&other, "seed = 3\nn_train = 40\nn_val = 20\nn_pool = 20\nheight = 16\nwidth = 16\ndata_dir = \"small\"\n").unwrap();
    assert!(run(&["--config", c(&other), "synth"]).status.success());
    let out_dir = dir.path().join("out");
    let small_basis = out_dir.join("small.json");
    assert!(run(&[
        "--config",
        c(&other),
        "--out-dir",
        c(&out_dir),
        "fit-pca",
        "--out",
        c(&small_basis)
    ])
    .status
    .success());
    assert!(
        run(&["--config", c(&cfg), "--out-dir", c(&out_dir), "train"])
            .status
            .success()
    );

    let out = run(&[
        "--config",
        c(&cfg),
        "--out-dir",
        c(&out_dir),
        "visualize",
        "--basis",
        c(&small_basis),
        "--model",
        c(&out_dir.join("model.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = error_line(&out);
    assert_eq!(err["error"], "dimension_mismatch");
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("256") && msg.contains("400"), "{msg}");
}

#[test]
fn config_errors_exit_2_with_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\n\nlearnig_rate = 0.1\n").unwrap();
    let out = run(&["--config", c(&cfg), "synth"]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_line(&out);
    assert_eq!(err["error"], "config");
    assert_eq!(err["line"], 3);
    assert_eq!(err["key"], "learnig_rate");

    fs::write(&cfg, "max_iterations = 4\nlr_schedule = [1e-4]\n").unwrap();
    let out = run(&["--config", c(&cfg), "loop"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["visualize"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "usage");
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "--out-dir",
        c(&dir.path().join("o")),
        "train",
        "--manifest",
        c(&dir.path().join("nope.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"], "io");
}

#[test]
fn single_class_training_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut pgm = b"P5\n2 2\n255\n".to_vec();
    pgm.extend([0, 50, 100, 150]);
    fs::write(dir.path().join("a.pgm"), &pgm).unwrap();
    fs::write(
        dir.path().join("m.jsonl"),
        "{\"id\":\"a\",\"path\":\"a.pgm\",\"label\":0}\n{\"id\":\"b\",\"path\":\"a.pgm\",\"label\":0}\n",
    )
    .unwrap();
    let out = run(&[
        "--out-dir",
        c(&dir.path().join("o")),
        "train",
        "--manifest",
        c(&dir.path().join("m.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_line(&out)["error"], "single_class");
}

#[test]
fn locked_run_directory_is_refused() {
    let (dir, cfg) = fixture("");
    let out_dir = dir.path().join("busy");
    fs::create_dir_all(&out_dir).unwrap();
    fs::write(out_dir.join(".popbias.lock"), "pid 1\n").unwrap();
    let out = run(&["--config", c(&cfg), "--out-dir", c(&out_dir), "loop"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"], "locked");
}

#[cfg(unix)]
#[test]
fn visualize_with_external_scorer() {
    use std::os::unix::fs::PermissionsExt;
    let (dir, cfg) = fixture("");
    let out_dir = dir.path().join("ext");
    assert!(
        run(&["--config", c(&cfg), "--out-dir", c(&out_dir), "fit-pca"])
            .status
            .success()
    );
    let script = dir.path().join("scorer.sh");
    fs::write(
        &script,
        "#!/bin/sh\ngrep -o '\"id\":\"[^\"]*\"' \"$1\" | sed 's/.*:\"\\(.*\\)\"/{\"id\":\"\\1\",\"score\":0.5}/'\n",
    )
    .unwrap();
    fs::set_permissions(&script, fs::Permissions::from_mode(0o755)).unwrap();
    let out = run(&[
        "--config",
        c(&cfg),
        "--out-dir",
        c(&out_dir),
        "visualize",
        "--basis",
        c(&out_dir.join("basis.json")),
        "--scorer-cmd",
        c(&script),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("saliency.json")).unwrap()).unwrap();
    assert!(sidecar["cells"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["failure"] == 0.5));
}
