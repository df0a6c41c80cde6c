use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mergelab::sweep::{SweepManifest, CSV_HEADER};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mergelab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn mergelab")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn presets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const FAMILY: &str = r#"{"family": "least-squares", "N": 3, "p": 4, "n": [200], "het_knob": 0.5, "noise_scale": 0.5, "seed": 1}"#;
const CONFIG: &str =
    r#"{"K": 40, "b": 8, "schedule": {"kind": "constant", "params": {"lr": 0.02}}, "seed": 0}"#;

fn sweep_manifest(lrs: &str) -> String {
    format!(
        r#"{{
            "family": {{"family": "least-squares", "N": 5, "p": 4, "n": [200], "het_knob": 0.5, "noise_scale": 0.5, "seed": 3}},
            "base_config": {{"K": 60, "b": 8, "schedule": {{"kind": "constant", "params": {{"lr": 0.02}}}}, "seed": 0}},
            "swept_axis": "lr",
            "axis_values": {lrs},
            "merge_specs": [{{"method": "uniform"}}, {{"method": "ties", "params": {{"density": 0.5}}}}],
            "replicate_groups": 3,
            "group_size": 3,
            "test_m": 200,
            "seed": 5
        }}"#
    )
}

#[test]
fn bound_on_zero_noise_zero_heterogeneity_is_zero() {
    let o = run(&["bound", presets().join("bound-zero.json").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["total"], 0.0);
    assert_eq!(v["stability_term"], 0.0);
    assert_eq!(v["gamma_star"], "undefined");
}

#[test]
fn usage_and_validation_errors_exit_one() {
    assert_eq!(code(&run(&["bogus"])), 1);
    assert_eq!(code(&run(&["bound", "--no-such-flag", "x"])), 1);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&run(&["bound", missing.to_str().unwrap()])), 1);
    let bad = write(dir.path(), "bad.json", r#"{"profile": {}, "extra": 1}"#);
    assert_eq!(code(&run(&["bound", &bad])), 1);
    let unsorted = write(dir.path(), "m.json", &sweep_manifest("[0.02, 0.01]"));
    let out = dir.path().join("r.json");
    assert_eq!(
        code(&run(&["sweep", &unsorted, "-o", out.to_str().unwrap()])),
        1
    );
    assert_eq!(code(&run(&["--jobs", "0", "bound", &bad])), 1);
}

#[test]
fn divergent_finetune_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let fam = write(dir.path(), "fam.json", FAMILY);
    let tasks = dir.path().join("tasks");
    assert_eq!(
        code(&run(&["gen-tasks", &fam, "-o", tasks.to_str().unwrap()])),
        0
    );
    let hot = write(dir.path(), "hot.json", &CONFIG.replace("0.02", "90.0"));
    let out = dir.path().join("x.bin");
    let o = run(&[
        "finetune",
        tasks.join("task_0.json").to_str().unwrap(),
        &hot,
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

/// gen-tasks, finetune every task, merge; returns every produced file's bytes.
fn pipeline(dir: &Path, method: &str, seed: Option<&str>) -> Vec<(String, Vec<u8>)> {
    let fam = write(dir, "fam.json", FAMILY);
    let cfg = write(dir, "cfg.json", CONFIG);
    let spec = write(dir, "spec.json", method);
    let tasks = dir.join("tasks");
    let mut extra: Vec<&str> = vec![];
    if let Some(s) = seed {
        extra = vec!["--seed", s];
    }
    let go = |args: &[&str]| {
        let mut all: Vec<&str> = extra.clone();
        all.extend_from_slice(args);
        let o = run(&all);
        assert_eq!(
            code(&o),
            0,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    };
    go(&["gen-tasks", &fam, "-o", tasks.to_str().unwrap()]);
    let mut experts = vec![];
    let mut task_files = vec![];
    for i in 0..3 {
        let t = tasks
            .join(format!("task_{i}.json"))
            .to_str()
            .unwrap()
            .to_string();
        let e = dir.join(format!("e{i}.bin")).to_str().unwrap().to_string();
        go(&["finetune", &t, &cfg, "-o", &e]);
        experts.push(e);
        task_files.push(t);
    }
    let merged = dir.join("merged.bin").to_str().unwrap().to_string();
    let base = tasks.join("base.bin").to_str().unwrap().to_string();
    let mut args = vec!["merge", &spec, &base];
    args.extend(experts.iter().map(|s| s.as_str()));
    args.extend(["-o", merged.as_str(), "--tasks"]);
    args.extend(task_files.iter().map(|s| s.as_str()));
    go(&args);
    let mut files = vec![];
    for name in [
        "tasks/manifest.json",
        "tasks/base.bin",
        "tasks/task_1.json",
        "tasks/tasks.csv",
        "e0.bin",
        "e0.bin.json",
        "merged.bin",
        "merged.bin.json",
    ] {
        files.push((name.to_string(), fs::read(dir.join(name)).unwrap()));
    }
    files
}

#[test]
fn pipeline_outputs_are_byte_identical_across_runs() {
    for method in [
        r#"{"method": "normalized"}"#,
        r#"{"method": "dare", "params": {"drop_p": 0.5}, "seed": 3}"#,
        r#"{"method": "adaptive", "params": {"steps": 10}}"#,
    ] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        assert_eq!(
            pipeline(a.path(), method, None),
            pipeline(b.path(), method, None),
            "{method}"
        );
    }
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let x = pipeline(a.path(), r#"{"method": "uniform"}"#, None);
    let y = pipeline(b.path(), r#"{"method": "uniform"}"#, Some("99"));
    let merged =
        |f: &[(String, Vec<u8>)]| f.iter().find(|(n, _)| n == "merged.bin").unwrap().1.clone();
    assert_ne!(merged(&x), merged(&y));
    let side: Value =
        serde_json::from_slice(&x.iter().find(|(n, _)| n == "merged.bin.json").unwrap().1).unwrap();
    assert_eq!(side["lambdas"].as_array().unwrap().len(), 3);
}

#[test]
fn merge_rejects_a_tampered_sidecar_and_missing_task_files() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), r#"{"method": "uniform"}"#, None);
    let d = dir.path();
    let base = d.join("tasks/base.bin");
    let experts: Vec<String> = (0..3)
        .map(|i| d.join(format!("e{i}.bin")).to_str().unwrap().to_string())
        .collect();
    let adaptive = write(d, "ad.json", r#"{"method": "adaptive"}"#);
    let out = d.join("m.bin");
    let mut args = vec!["merge", adaptive.as_str(), base.to_str().unwrap()];
    args.extend(experts.iter().map(|s| s.as_str()));
    args.extend(["-o", out.to_str().unwrap()]);
    assert_eq!(code(&run(&args)), 1);

    fs::copy(d.join("e1.bin.json"), d.join("e0.bin.json")).unwrap();
    let normalized = write(d, "n.json", r#"{"method": "normalized"}"#);
    args[1] = normalized.as_str();
    assert_eq!(code(&run(&args)), 1);
}

#[test]
fn sweep_is_deterministic_and_report_reproduces_its_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let m = write(d, "m.json", &sweep_manifest("[0.01, 0.02, 0.04]"));
    let (r1, r2) = (d.join("r1.json"), d.join("r2.json"));
    for r in [&r1, &r2] {
        let o = run(&["--jobs", "2", "sweep", &m, "-o", r.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());
    let csv = fs::read_to_string(d.join("r1.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(d.join("r2.csv")).unwrap());
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    assert_eq!(csv.lines().count(), 1 + 3 * 2);

    let again = d.join("again.csv");
    let o = run(&[
        "report",
        r1.to_str().unwrap(),
        "--csv",
        again.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(&again).unwrap(), csv);
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["trend"].as_array().unwrap().len(), 2);
    assert_eq!(summary["collapsed_cells"], 0);

    let r3 = d.join("r3.json");
    assert_eq!(
        code(&run(&[
            "--seed",
            "8",
            "sweep",
            &m,
            "-o",
            r3.to_str().unwrap()
        ])),
        0
    );
    assert_ne!(fs::read(&r1).unwrap(), fs::read(&r3).unwrap());
}

#[test]
fn collapse_dominated_sweep_exits_two_but_still_writes_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.json", &sweep_manifest("[20.0, 50.0]"));
    let r = dir.path().join("r.json");
    let o = run(&["sweep", &m, "-o", r.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let v: Value = serde_json::from_slice(&fs::read(&r).unwrap()).unwrap();
    assert!(2 * v["collapsed_cells"].as_u64().unwrap() > v["total_cells"].as_u64().unwrap());
    assert!(dir.path().join("r.csv").exists());
}

#[test]
fn stability_suite_reports_estimate_and_bound() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    let suite = presets().join("stability-ls.json");
    let o = run(&[
        "stability",
        suite.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let est = v["estimate"].as_f64().unwrap();
    assert!(est > 0.0 && est <= v["bound_value"].as_f64().unwrap());
    assert_eq!(v["pass"], true);
    assert_eq!(v["config_digest"].as_str().unwrap().len(), 64);
    assert_eq!(v["replicates"], 50);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(
        text.lines().next(),
        Some("scope,estimate,ci,median,replicates,bound_value,pass")
    );
    let o2 = run(&["stability", suite.to_str().unwrap()]);
    assert_eq!(o.stdout, o2.stdout);
}

#[test]
fn every_sweep_preset_validates() {
    let mut count = 0;
    for entry in fs::read_dir(presets()).unwrap() {
        let p = entry.unwrap().path();
        let name = p.file_name().unwrap().to_str().unwrap().to_string();
        if !(name.starts_with("full-") || name.starts_with("desk-") || name.starts_with("vit-")) {
            continue;
        }
        let m: SweepManifest = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        m.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        count += 1;
    }
    assert!(count >= 10);
}
