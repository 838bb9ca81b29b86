use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn risp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_risp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = risp(args);
    assert!(
        o.status.success(),
        "risp {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["gen-data", "--env", "rod", "--n", "20", "--seed", "3", "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn small_config(dir: &Path, epochs: usize) -> PathBuf {
    let p = dir.join(format!("cfg{epochs}.json"));
    let text = format!(
        r#"{{"train": {{"epochs": {epochs}, "batch": 4, "warmup_epochs": 2, "reg_eval_samples": 4}}, "fit": {{"iterations": 3}}}}"#
    );
    fs::write(&p, text).unwrap();
    p
}

fn data_rows(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

#[test]
fn help_shows_every_flag_with_its_default() {
    let expect: &[(&str, &[&str])] = &[
        (
            "gen-data",
            &[
                "--env",
                "[default: quad2d]",
                "--n",
                "[default: 2000]",
                "--k-configs",
                "[default: fresh]",
                "--seed",
                "--domain",
                "[default: source]",
                "--jobs",
                "--out",
            ],
        ),
        (
            "train",
            &[
                "--data",
                "--reg",
                "[default: fast]",
                "--config",
                "--seed",
                "--eval-data",
                "--resume",
                "--stop-after",
                "--out",
            ],
        ),
        (
            "eval",
            &[
                "--data",
                "--method",
                "[default: ours]",
                "--checkpoint",
                "--train-data",
                "--seed",
                "--out",
            ],
        ),
        (
            "sysid",
            &[
                "--env",
                "--methods",
                "--seeds",
                "[default: 0,1,2]",
                "--checkpoint",
                "--checkpoint-no-grad",
                "--sampling",
                "[default: stride1]",
                "--config",
                "--jobs",
                "--out",
            ],
        ),
        ("imitate", &["--methods", "--sampling"]),
        ("control", &["--methods", "--sampling"]),
        (
            "ablate-configs",
            &[
                "--n",
                "[default: 1000]",
                "--test-n",
                "[default: 400]",
                "--reg",
                "--seed",
                "--jobs",
                "--out",
            ],
        ),
        (
            "ablate-sampling",
            &[
                "--env",
                "[default: rod]",
                "--method",
                "--checkpoint",
                "--grid",
                "[default: 61]",
                "--samplings",
                "--out",
            ],
        ),
    ];
    for (cmd, flags) in expect {
        let help = String::from_utf8(ok(&[cmd, "--help"]).stdout).unwrap();
        for f in *flags {
            assert!(help.contains(f), "`risp {cmd} --help` lacks {f}:\n{help}");
        }
    }
    let top = String::from_utf8(ok(&["--help"]).stdout).unwrap();
    for cmd in [
        "gen-data",
        "train",
        "eval",
        "sysid",
        "imitate",
        "control",
        "ablate-configs",
        "ablate-sampling",
        "manifest",
    ] {
        assert!(top.contains(cmd));
    }
}

#[test]
fn exit_codes_separate_usage_io_and_internal_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(risp(&["train"]).status.code(), Some(2));
    assert_eq!(
        risp(&["gen-data", "--env", "pendulum", "--out", s(&out)]).status.code(),
        Some(2)
    );
    assert_eq!(
        risp(&["gen-data", "--k-configs", "0", "--out", s(&out)]).status.code(),
        Some(2)
    );
    let missing = dir.path().join("missing.risp");
    assert_eq!(
        risp(&["train", "--data", s(&missing), "--out", s(&out)]).status.code(),
        Some(3)
    );
    let junk = dir.path().join("junk.risp");
    fs::write(&junk, b"not a dataset").unwrap();
    assert_eq!(risp(&["manifest", "dump", "--data", s(&junk)]).status.code(), Some(3));

    let data = gen(dir.path(), "d", &[]);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"epoch": 3}}"#).unwrap();
    let ds = data.join("dataset.risp");
    assert_eq!(
        risp(&["train", "--data", s(&ds), "--config", s(&bad), "--out", s(&out)])
            .status
            .code(),
        Some(2)
    );
    // Bounce has no imitation scenario; sysid needs a checkpoint for `ours`.
    assert_eq!(
        risp(&["imitate", "--env", "bounce", "--methods", "oracle", "--out", s(&out)])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        risp(&["sysid", "--env", "rod", "--methods", "ours", "--out", s(&out)])
            .status
            .code(),
        Some(2)
    );
    // A diverging training run is an internal failure.
    let hot = dir.path().join("hot.json");
    fs::write(&hot, r#"{"train": {"epochs": 3, "batch": 4, "lr": 1e300}}"#).unwrap();
    let o = risp(&["train", "--data", s(&ds), "--config", s(&hot), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("checkpoint.risp").exists());
}

#[test]
fn gen_data_is_byte_identical_across_runs_and_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a", &[]);
    let b = gen(dir.path(), "b", &["--jobs", "3"]);
    for f in ["dataset.risp", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = gen(dir.path(), "c", &["--k-configs", "2"]);
    assert_ne!(
        fs::read(a.join("dataset.risp")).unwrap(),
        fs::read(c.join("dataset.risp")).unwrap()
    );
}

#[test]
fn manifest_dump_reports_generation_settings() {
    let dir = tempfile::tempdir().unwrap();
    let d = gen(dir.path(), "d", &["--k-configs", "fresh", "--domain", "target"]);
    let o = ok(&["manifest", "dump", "--data", s(&d.join("dataset.risp"))]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["k_configs"], "fresh");
    assert_eq!(v["n"], 20);
    assert_eq!(v["env"], "rod");
    assert_eq!(v["domain"], "target");
    let written: serde_json::Value = serde_json::from_slice(&fs::read(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(v, written);
}

#[test]
fn training_without_regularizer_logs_zero_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let d = gen(dir.path(), "d", &[]);
    let cfg = small_config(dir.path(), 3);
    let out = dir.path().join("t");
    ok(&[
        "train",
        "--data",
        s(&d.join("dataset.risp")),
        "--reg",
        "none",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
    ]);
    let trace = fs::read_to_string(out.join("loss_trace.csv")).unwrap();
    let header = trace.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "epoch,lr,gamma,l_error,l_reg,l_train,eval_error");
    let rows = data_rows(&trace);
    assert_eq!(rows.len(), 3);
    for r in rows {
        let cols: Vec<&str> = r.split(',').collect();
        assert_eq!(cols[2].parse::<f64>().unwrap(), 0.0);
        // The regularizer is still measured so runs can be compared.
        assert!(cols[4].parse::<f64>().unwrap() > 0.0);
    }
    for f in ["checkpoint.risp", "train_state.bin", "config.json", "loss_trace.png"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = gen(dir.path(), "d", &[]);
    let ds = d.join("dataset.risp");
    let cfg = small_config(dir.path(), 4);
    let full = dir.path().join("full");
    ok(&[
        "train",
        "--data",
        s(&ds),
        "--config",
        s(&cfg),
        "--seed",
        "1",
        "--out",
        s(&full),
    ]);
    let part = dir.path().join("part");
    ok(&[
        "train",
        "--data",
        s(&ds),
        "--config",
        s(&cfg),
        "--seed",
        "1",
        "--stop-after",
        "2",
        "--out",
        s(&part),
    ]);
    assert_eq!(
        data_rows(&fs::read_to_string(part.join("loss_trace.csv")).unwrap()).len(),
        2
    );
    let rest = dir.path().join("rest");
    let state = part.join("train_state.bin");
    ok(&[
        "train",
        "--data",
        s(&ds),
        "--seed",
        "1",
        "--resume",
        s(&state),
        "--out",
        s(&rest),
    ]);
    for f in ["checkpoint.risp", "train_state.bin", "loss_trace.csv"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(rest.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_writes_one_summary_row() {
    let dir = tempfile::tempdir().unwrap();
    let d = gen(dir.path(), "d", &[]);
    let ds = d.join("dataset.risp");
    let out = dir.path().join("e");
    ok(&[
        "eval",
        "--data",
        s(&ds),
        "--method",
        "average",
        "--train-data",
        s(&ds),
        "--out",
        s(&out),
    ]);
    let text = fs::read_to_string(out.join("results.csv")).unwrap();
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 1);
    let cols: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(&cols[..3], ["rod", "average", "0"]);
    assert_eq!(cols[5], "20");
    assert_eq!(
        risp(&["eval", "--data", s(&ds), "--method", "ours", "--out", s(&out)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn inverse_problem_outputs_do_not_depend_on_job_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1);
    let run = |name: &str, jobs: &str| {
        let out = dir.path().join(name);
        ok(&[
            "sysid",
            "--env",
            "rod",
            "--methods",
            "oracle,average,random,pixelwise",
            "--seeds",
            "0,1",
            "--config",
            s(&cfg),
            "--jobs",
            jobs,
            "--out",
            s(&out),
        ]);
        out
    };
    let a = run("a", "1");
    let b = run("b", "3");
    for f in ["results.csv", "traces.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let results = fs::read_to_string(a.join("results.csv")).unwrap();
    let header = results.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(
        header,
        "env,task,method,seed,metric_mean,metric_std,iterations,status,phi_hat"
    );
    let rows = data_rows(&results);
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.starts_with("rod,sysid,")));
    // Oracle fits run the configured iterations; baselines do not optimize.
    let oracle: Vec<&str> = rows[0].split(',').collect();
    assert_eq!((oracle[2], oracle[6]), ("oracle", "3"));
    let avg: Vec<&str> = rows[1].split(',').collect();
    assert_eq!((avg[2], avg[6]), ("average", "0"));
    assert!(a.join("timing.txt").exists() && a.join("traces.png").exists());
}

#[test]
fn ablate_sampling_writes_landscape_and_argmins() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    ok(&[
        "ablate-sampling",
        "--method",
        "oracle",
        "--grid",
        "5",
        "--samplings",
        "stride1,endpoints",
        "--out",
        s(&out),
    ]);
    let land = fs::read_to_string(out.join("landscape.csv")).unwrap();
    assert_eq!(
        land.lines().find(|l| !l.starts_with('#')).unwrap(),
        "sampling,param,loss"
    );
    assert_eq!(data_rows(&land).len(), 10);
    let arg = fs::read_to_string(out.join("argmins.csv")).unwrap();
    assert_eq!(
        arg.lines().find(|l| !l.starts_with('#')).unwrap(),
        "sampling,grid_index,param"
    );
    assert_eq!(data_rows(&arg).len(), 2);
    assert!(out.join("landscape.png").exists());
    assert_eq!(
        risp(&[
            "ablate-sampling",
            "--env",
            "finger",
            "--method",
            "oracle",
            "--out",
            s(&out)
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn ablate_configs_writes_six_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let out = dir.path().join("c");
    ok(&[
        "ablate-configs",
        "--env",
        "rod",
        "--n",
        "20",
        "--test-n",
        "6",
        "--config",
        s(&cfg),
        "--jobs",
        "2",
        "--out",
        s(&out),
    ]);
    let text = fs::read_to_string(out.join("ablate_configs.csv")).unwrap();
    assert_eq!(
        text.lines().find(|l| !l.starts_with('#')).unwrap(),
        "curve,k_configs,reg,epoch,eval_error,l_error,l_reg,gamma"
    );
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 12);
    let mut curves: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    curves.dedup();
    assert_eq!(
        curves,
        [
            "k1-fast",
            "k1-none",
            "k10-fast",
            "k10-none",
            "kfresh-fast",
            "kfresh-none"
        ]
    );
}
