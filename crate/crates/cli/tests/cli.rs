use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chronomerge::toybench::evaluate;
use chronomerge::{
    load_checkpoint, merge_fold, save_checkpoint, Checkpoint, MergeConfig, MergeContext, Technique,
};
use chronomerge_cli::ExperimentConfig;

const SMALL: &str = r#"
seeds = [0]

[bench]
tasks = 2
holdout = 2
samples_per_task = 64
pretrain_samples = 256

[model]
hidden = [16]
pretrain_steps = 50

[train]
steps = 30
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_chronomerge"));
    c.env_remove("CHRONOMERGE_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("small.toml");
    fs::write(&p, format!("{SMALL}\n{extra}")).unwrap();
    p
}

fn ckpt(values: &[f32]) -> Checkpoint {
    Checkpoint::new()
        .with("layer.1.weight", vec![values.len()], values.to_vec())
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn single_input_weight_average_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.cmrg");
    save_checkpoint(&ckpt(&[1.5, -2.25, 3.0e-7]), &a).unwrap();
    let out = dir.path().join("out.cmrg");
    let report = ok(&["merge", "--out", s(&out), s(&a)]);
    assert!(report.contains("layer.1.weight"));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&out).unwrap());
}

#[test]
fn missing_base_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.cmrg");
    save_checkpoint(&ckpt(&[1.0]), &a).unwrap();
    let out = run(&[
        "merge",
        "--set",
        "merge.technique=ta",
        "--out",
        s(&dir.path().join("o.cmrg")),
        s(&a),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("base"));
}

#[test]
fn file_merge_equals_in_process_merge() {
    let dir = tempfile::tempdir().unwrap();
    let (base, x, y) = (
        ckpt(&[0.0, 1.0, -1.0]),
        ckpt(&[0.5, 2.0, -3.0]),
        ckpt(&[-0.25, 1.5, 1.0]),
    );
    let paths: Vec<PathBuf> = ["base", "x", "y"]
        .iter()
        .map(|n| dir.path().join(format!("{n}.cmrg")))
        .collect();
    for (c, p) in [&base, &x, &y].iter().zip(&paths) {
        save_checkpoint(c, p).unwrap();
    }
    for technique in Technique::ALL {
        let out = dir.path().join(format!("{technique}.cmrg"));
        ok(&[
            "merge",
            "--set",
            &format!("merge.technique={technique}"),
            "--set",
            "merge.lambda_scale=0.7",
            "--base",
            s(&paths[0]),
            "--out",
            s(&out),
            s(&paths[1]),
            s(&paths[2]),
        ]);
        let mut cfg = MergeConfig::new(technique);
        cfg.lambda_scale = 0.7;
        let want = merge_fold(&cfg, &base, &[&x, &y], &MergeContext::for_task(2)).unwrap();
        assert!(load_checkpoint(&out).unwrap().bit_eq(&want), "{technique}");
    }
}

#[test]
fn corrupted_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.cmrg");
    save_checkpoint(&ckpt(&[1.0, 2.0]), &a).unwrap();
    let mut bytes = fs::read(&a).unwrap();
    let n = bytes.len();
    bytes[n - 6] ^= 0x40;
    fs::write(&a, bytes).unwrap();
    assert_eq!(run(&["inspect", s(&a)]).status.code(), Some(1));
    assert_eq!(
        run(&["merge", "--out", s(&dir.path().join("o.cmrg")), s(&a)])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    for extra in [
        ["--set", "merge.lamda_scale=0.5"],
        ["--set", "pipeline.init=ZS"],
    ] {
        let mut args = vec!["run", "-c", s(&cfg), "--out", s(dir.path())];
        args.extend(extra);
        if extra[1] == "pipeline.init=ZS" {
            args.extend(["--set", "pipeline.deploy=FT"]);
        }
        assert_eq!(run(&args).status.code(), Some(2), "{args:?}");
    }
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[bench]\ntasks = \"many\"\n").unwrap();
    assert_eq!(run(&["run", "-c", s(&bad)]).status.code(), Some(2));
}

#[test]
fn run_writes_reproducible_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["run", "-c", s(&cfg), "--out", s(&a)]);
    ok(&["run", "-c", s(&cfg), "--out", s(&b)]);
    let csv = fs::read_to_string(a.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(
        csv.lines().next().unwrap(),
        "t,A_KA,A_ZS,geo_mean,wall_time"
    );
    assert_eq!(csv, fs::read_to_string(b.join("trajectory.csv")).unwrap());

    // The summary embeds the resolved config; running from it reproduces the run.
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert!(summary["multitask"]["a_ka"].as_f64().is_some());
    assert!(summary["zero_shot"]["a_zs"].as_f64().is_some());
    let c = dir.path().join("c");
    ok(&["run", "-c", s(&a.join("summary.json")), "--out", s(&c)]);
    assert_eq!(csv, fs::read_to_string(c.join("trajectory.csv")).unwrap());
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[output]\nmultitask_reference = false\n");
    let out = bin()
        .args(["run", "-c", s(&cfg)])
        .env("CHRONOMERGE_OUT", dir.path().join("root"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("root/small/trajectory.csv").exists());
}

#[test]
fn offline_merge_run_matches_recomputation_from_its_buffer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(
        dir.path(),
        "[pipeline]\ninit = \"ZS\"\ndeploy = \"ALL\"\n[output]\nkeep_buffer = true\nmultitask_reference = false\n",
    );
    let out = dir.path().join("run");
    ok(&["run", "-c", s(&cfg_path), "--out", s(&out)]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let reported = summary["final"]["a_ka"].as_f64().unwrap();

    let cfg = ExperimentConfig::load(Some(&cfg_path), &[]).unwrap();
    let experts: Vec<Checkpoint> = (1..=2)
        .map(|t| load_checkpoint(out.join(format!("seed_0/buffer/task_{t}.cmrg"))).unwrap())
        .collect();
    let merged = experts[0]
        .zip_with(&experts[1], |a, b| {
            (0.5 * f64::from(a) + 0.5 * f64::from(b)) as f32
        })
        .unwrap();
    let bench = chronomerge::generate_stream(&cfg.bench_params(0)).unwrap();
    let ka = bench
        .adaptation_tasks
        .iter()
        .map(|t| evaluate(&merged, t).unwrap())
        .sum::<f64>()
        / 2.0;
    assert_eq!(reported, ka);
}

fn sweep_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

#[test]
fn one_cell_sweep_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[output]\nmultitask_reference = false\n");
    let grid = dir.path().join("grid.toml");
    fs::write(&grid, "[wa]\nema_weight = [0.5]\n").unwrap();
    ok(&["run", "-c", s(&cfg), "--out", s(&dir.path().join("run"))]);
    ok(&[
        "sweep",
        "-c",
        s(&cfg),
        "-g",
        s(&grid),
        "--out",
        s(&dir.path().join("sweep")),
    ]);
    let rows = sweep_rows(&dir.path().join("sweep/sweep.csv"));
    assert_eq!(rows.len(), 1);
    let run_csv = fs::read_to_string(dir.path().join("run/trajectory.csv")).unwrap();
    let last: Vec<&str> = run_csv.lines().last().unwrap().split(',').collect();
    // cell, technique, merge.ema_weight, seeds, A_KA, A_ZS, geo_mean
    assert_eq!(&rows[0][4], last[1]);
    assert_eq!(&rows[0][5], last[2]);
    assert_eq!(&rows[0][6], last[3]);
    assert_eq!(
        fs::read_to_string(dir.path().join("sweep/cells/0000/trajectory.csv")).unwrap(),
        run_csv
    );
}

#[test]
fn sweep_is_ordered_and_best_is_the_maximum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let grid = dir.path().join("grid.toml");
    fs::write(
        &grid,
        "[common]\n\"pipeline.init\" = [\"ZS\", \"EMA\"]\n[wa]\nema_weight = [0.3, 0.7]\n[ties]\nprune_fraction = [0.5, 1.0]\n",
    )
    .unwrap();
    let (one, two) = (dir.path().join("j1"), dir.path().join("j2"));
    ok(&[
        "sweep",
        "-c",
        s(&cfg),
        "-g",
        s(&grid),
        "-j",
        "1",
        "--out",
        s(&one),
    ]);
    ok(&[
        "sweep",
        "-c",
        s(&cfg),
        "-g",
        s(&grid),
        "-j",
        "3",
        "--out",
        s(&two),
    ]);
    let text = fs::read_to_string(one.join("sweep.csv")).unwrap();
    assert_eq!(text, fs::read_to_string(two.join("sweep.csv")).unwrap());

    let rows = sweep_rows(&one.join("sweep.csv"));
    assert_eq!(rows.len(), 8);
    // Cells with prune_fraction = 1.0 fail validation but stay in the table.
    let failed: Vec<_> = rows.iter().filter(|r| !r[r.len() - 1].is_empty()).collect();
    assert_eq!(failed.len(), 2);
    let header = csv::Reader::from_path(one.join("sweep.csv"))
        .unwrap()
        .headers()
        .unwrap()
        .clone();
    let geo = header.iter().position(|h| h == "geo_mean").unwrap();
    let max = rows
        .iter()
        .filter_map(|r| r[geo].parse::<f64>().ok())
        .fold(f64::NEG_INFINITY, f64::max);
    let best: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(one.join("best.json")).unwrap()).unwrap();
    assert_eq!(
        format!("{:.6}", best["geo_mean"].as_f64().unwrap()),
        format!("{max:.6}")
    );
    assert!(best["config"]["merge"]["technique"].is_string());
}

#[test]
fn eval_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "");
    let cfg = ExperimentConfig::load(Some(&cfg_path), &[]).unwrap();
    let model = cfg.model_spec().init(3).unwrap();
    let p = dir.path().join("m.cmrg");
    save_checkpoint(&model, &p).unwrap();
    let json = dir.path().join("eval.json");
    let text = ok(&["eval", "-c", s(&cfg_path), s(&p), "--json", s(&json)]);
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    let bench = chronomerge::generate_stream(&cfg.bench_params(0)).unwrap();
    let ka = bench
        .adaptation_tasks
        .iter()
        .map(|t| evaluate(&model, t).unwrap())
        .sum::<f64>()
        / 2.0;
    assert_eq!(report["A_KA"].as_f64().unwrap(), ka);
    assert!(json.exists());

    let header = ok(&["inspect", s(&p)]);
    assert!(
        header.contains("layer.1.weight") && header.contains("[16, 16]") && header.contains("f32")
    );
}
