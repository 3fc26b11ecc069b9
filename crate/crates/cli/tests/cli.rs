//! End-to-end command tests against the built binary, at toy scale.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_lindiff")
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("lindiff-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Small 2-D GMM + fade config; oracle-denoised sampling works without training.
fn toy_config(out_dir: &Path) -> Value {
    json!({
        "dataset": {
            "kind": "gmm",
            "gmm": {
                "weights": [0.6, 0.4],
                "means": [[-1.0, 0.0], [1.0, 0.5]],
                "covs": [[[0.2, 0.0], [0.0, 0.15]], [[0.25, 0.05], [0.05, 0.2]]]
            },
            "train_size": 512,
            "holdout_size": 256
        },
        "corruption": {
            "family": "fade",
            "theta_min": 0.0,
            "theta_max": 0.95,
            "sigma_min": 0.001,
            "sigma_max": 0.1,
            "denoise_end": 0.2
        },
        "schedule": {
            "source": "auto",
            "num_candidates": 8,
            "cloud_size": 96,
            "target_path_len": 4,
            "num_projections": 16
        },
        "model": {"hidden_width": 16, "hidden_layers": 1, "time_frequencies": 4},
        "train": {"steps": 40, "batch_size": 16, "lr": 0.001, "warmup_steps": 10},
        "sampler": {"num_steps": 8, "mode": "normalized", "kind": "momentum", "num_samples": 64},
        "seed": 3,
        "output_dir": out_dir.display().to_string()
    })
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn schedule_produces_monotone_min_cost_path() {
    let dir = tmp_dir("schedule");
    let config = write_config(&dir, &toy_config(&dir.join("out")));
    run_ok(&["schedule", "--config", config.to_str().unwrap()]);

    let schedule: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("out/schedule.json")).unwrap())
            .unwrap();
    let entries = schedule["entries"].as_array().unwrap();
    let stds: Vec<f64> = entries.iter().map(|e| e["blur_std"].as_f64().unwrap()).collect();
    assert!(stds.windows(2).all(|w| w[1] >= w[0]), "{stds:?}");
    assert_eq!(entries.first().unwrap()["t"].as_f64().unwrap(), 0.0);
    assert_eq!(entries.last().unwrap()["t"].as_f64().unwrap(), 1.0);

    // Brute-force check: the selected nodes must attain the minimum path cost
    // over the dumped distance matrix under the recorded epsilon.
    let meta: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("out/schedule.meta.json")).unwrap())
            .unwrap();
    let epsilon = meta["epsilon"].as_f64().unwrap();
    let matrix: Vec<Vec<f64>> = std::fs::read_to_string(dir.join("out/distances.csv"))
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    let t = matrix.len();
    assert_eq!(t, 8);
    let weights: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            (0..t)
                .map(|j| {
                    if i == j {
                        0.0
                    } else if matrix[i][j] <= epsilon {
                        matrix[i][j]
                    } else {
                        f64::INFINITY
                    }
                })
                .collect()
        })
        .collect();
    let (best_cost, _, _) = lindiff::verify::exhaustive_shortest_path(&weights, 0, t - 1).unwrap();

    // Recover the chosen node sequence from the corruption-stage entries.
    let thetas: Vec<f64> = (0..t).map(|i| 0.95 * i as f64 / (t - 1) as f64).collect();
    let chosen: Vec<usize> = entries
        .iter()
        .skip(1) // the t = 0 clean entry
        .map(|e| {
            let std = e["blur_std"].as_f64().unwrap();
            thetas
                .iter()
                .position(|&th| (th - std).abs() < 1e-12)
                .unwrap()
        })
        .collect();
    let chosen_cost: f64 = chosen.windows(2).map(|w| matrix[w[0]][w[1]]).sum();
    assert!(
        (chosen_cost - best_cost).abs() <= 1e-9 * best_cost.max(1.0),
        "selected cost {chosen_cost} vs enumerated best {best_cost}"
    );
}

#[test]
fn invalid_config_fields_are_named() {
    let dir = tmp_dir("badcfg");
    let mut cfg = toy_config(&dir.join("out"));
    cfg["corruption"]["sigma_min"] = json!(0.5);
    cfg["corruption"]["sigma_max"] = json!(0.1);
    let path = write_config(&dir, &cfg);
    let out = run(&["schedule", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("sigma_min"), "stderr: {stderr}");

    // Unknown fields are also named.
    let mut cfg2 = toy_config(&dir.join("out"));
    cfg2["sampler"]["bogus_knob"] = json!(1);
    let path2 = write_config(&dir, &cfg2);
    let out2 = run(&["sample", "--config", path2.to_str().unwrap()]);
    assert!(!out2.status.success());
    let stderr2 = String::from_utf8_lossy(&out2.stderr);
    assert!(stderr2.contains("bogus_knob"), "stderr: {stderr2}");
}

#[test]
fn missing_checkpoint_is_an_explicit_error() {
    let dir = tmp_dir("nockpt");
    let config = write_config(&dir, &toy_config(&dir.join("out")));
    let missing = dir.join("nope.ckpt");
    let out = run(&[
        "sample",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        missing.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("does not exist"), "stderr: {stderr}");
}

#[test]
fn train_sample_eval_roundtrip_with_hash_enforcement() {
    let dir = tmp_dir("roundtrip");
    let config = write_config(&dir, &toy_config(&dir.join("out")));
    let cfg_arg = config.to_str().unwrap();

    run_ok(&["train", "--config", cfg_arg]);
    let ckpt = dir.join("out/model.ckpt");
    assert!(ckpt.exists());
    let trace = std::fs::read_to_string(dir.join("out/trace.csv")).unwrap();
    assert!(trace.starts_with("step,loss,t_mean\n"));
    assert_eq!(trace.lines().count(), 41);

    run_ok(&[
        "sample",
        "--config",
        cfg_arg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(dir.join("out/samples.sdt").exists());

    let eval = run_ok(&[
        "eval",
        "--config",
        cfg_arg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("out/eval.json")).unwrap()).unwrap();
    assert!(report["sliced_w2"].as_f64().unwrap().is_finite());
    assert_eq!(report["nfe_per_sample"].as_u64().unwrap(), 8);
    assert!(report["per_t_score_mse"].is_array());
    // Wall clock goes to stdout, never into the artifact.
    assert!(report.get("wall_clock_seconds").is_none());
    assert!(String::from_utf8_lossy(&eval.stdout).contains("sliced_w2"));

    // A different seed changes the config hash; eval must refuse the stale samples.
    let out = run(&["eval", "--config", cfg_arg, "--seed", "4"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("config"), "stderr: {stderr}");
}

#[test]
fn sweep_nfe_metric_is_non_increasing_within_noise() {
    let dir = tmp_dir("sweep");
    let mut cfg = toy_config(&dir.join("out"));
    cfg["sampler"]["num_samples"] = json!(512);
    let config = write_config(&dir, &cfg);
    run_ok(&[
        "sweep-nfe",
        "--config",
        config.to_str().unwrap(),
        "--steps",
        "8,16,32,64,128",
    ]);
    let csv = std::fs::read_to_string(dir.join("out/sweep.csv")).unwrap();
    let rows: Vec<(usize, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',');
            (
                it.next().unwrap().parse().unwrap(),
                it.next().unwrap().parse().unwrap(),
            )
        })
        .collect();
    assert_eq!(rows.len(), 5);
    assert_eq!(
        rows.iter().map(|r| r.0).collect::<Vec<_>>(),
        vec![8, 16, 32, 64, 128]
    );
    // Oracle-denoiser sweep: finer grids cannot do worse from 8 to 64 beyond
    // estimator noise.
    let tol = 0.05;
    assert!(rows[3].1 <= rows[0].1 + tol, "{rows:?}");
    for w in rows[..4].windows(2) {
        assert!(w[1].1 <= w[0].1 + tol, "{rows:?}");
    }
}
