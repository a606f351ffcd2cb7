//! End-to-end checks of the command-line surface: subcommands exist, configs
//! are validated, exit codes match the documented contract, and a small
//! artifact pipeline (dataset -> train -> eval -> probes) runs through files.

use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ctxworld"))
}

fn write(path: &Path, content: &str) {
    fs::write(path, content).unwrap();
}

#[test]
fn help_lists_all_subcommands() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in [
        "gen-envs",
        "build-dataset",
        "fit-models",
        "verify-bounds",
        "crossover",
        "train",
        "eval-icl",
        "probe-pc",
        "probe-silhouette",
        "report",
    ] {
        assert!(text.contains(sub), "missing subcommand {sub}");
    }
}

#[test]
fn missing_config_is_exit_code_2() {
    let out = bin().args(["gen-envs", "--out-dir", "/tmp/ctxworld-nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args(["gen-envs", "--config", "/definitely/not/here.json", "--out-dir", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_is_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    write(&cfg, r#"{ "count": 0, "dims": [2,2,2], "concentration": 1.0,
                     "determinism_fraction": 0.0, "kind": "mdp", "seed": 1 }"#);
    let out = bin()
        .args(["gen-envs", "--config"])
        .arg(&cfg)
        .args(["--out-dir"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_envs_writes_family_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("envs.json");
    write(&cfg, r#"{ "count": 2, "dims": [3,2,3], "concentration": 1.0,
                     "determinism_fraction": 0.5, "kind": "mdp", "seed": 5 }"#);
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["gen-envs", "--config"])
        .arg(&cfg)
        .args(["--out-dir"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("envs.json")).unwrap()).unwrap();
    assert_eq!(doc["envs"].as_array().unwrap().len(), 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["kind"], "gen_envs");
    assert_eq!(manifest["status"], "ok");
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("envs.json");
    write(&cfg, r#"{ "count": 1, "dims": [3,2,3], "concentration": 1.0,
                     "determinism_fraction": 0.0, "kind": "mdp", "seed": 5 }"#);
    let run = |seed: Option<&str>, out_name: &str| {
        let out_dir = dir.path().join(out_name);
        let mut cmd = bin();
        cmd.args(["gen-envs", "--config"]).arg(&cfg).args(["--out-dir"]).arg(&out_dir);
        if let Some(s) = seed {
            cmd.args(["--seed", s]);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read_to_string(out_dir.join("envs.json")).unwrap()
    };
    let base = run(None, "a");
    let same = run(Some("5"), "b");
    let diff = run(Some("6"), "c");
    assert_eq!(base, same);
    assert_ne!(base, diff);
}

#[test]
fn verify_bounds_and_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bounds.json");
    // `kind` may be omitted on the dedicated subcommand.
    write(
        &cfg,
        r#"{ "seed": 5, "family": { "count": 2, "dims": [3,2,3], "concentration": 1.0 },
             "target": { "seen": { "index": 0 } }, "delta": 0.2,
             "t_grid": [32, 128], "trials": 6, "fit_samples": 2000 }"#,
    );
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["verify-bounds", "--config"])
        .arg(&cfg)
        .args(["--out-dir"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let rows = fs::read_to_string(out_dir.join("rows.csv")).unwrap();
    assert!(rows.starts_with("predictor,T,trial,empirical_tv,bound,valid,violated\n"));
    assert!(out_dir.join("summary.json").exists());
}

#[test]
fn dataset_train_eval_probe_pipeline() {
    let dir = tempfile::tempdir().unwrap();

    // 1. Build a small multi-environment dataset.
    let ds_cfg = dir.path().join("dataset.json");
    write(
        &ds_cfg,
        r#"{ "spec": { "scope": "scope1_plus2", "num_envs": 4, "traj_per_env": 6, "length": 60 },
             "seed": 21 }"#,
    );
    let ds_dir = dir.path().join("ds");
    assert!(bin()
        .args(["build-dataset", "--config"])
        .arg(&ds_cfg)
        .args(["--out-dir"])
        .arg(&ds_dir)
        .output()
        .unwrap()
        .status
        .success());
    let dataset_path = ds_dir.join("dataset.bin");
    assert!(dataset_path.exists());

    // 2. Train a tiny model on it.
    let train_cfg = dir.path().join("train.json");
    write(
        &train_cfg,
        &format!(
            r#"{{ "dataset": "{}",
                 "model": {{ "hidden": 8, "layers": 1, "heads": 2, "mem_len": 3,
                             "chunk": 16, "obs_dim": 4, "num_actions": 2 }},
                 "train": {{ "epochs": 1, "batch_size": 8, "lr_init": 0.001,
                             "lr_final": 0.0001, "seed": 3 }} }}"#,
            dataset_path.display()
        ),
    );
    let train_dir = dir.path().join("train");
    let out = bin()
        .args(["train", "--config"])
        .arg(&train_cfg)
        .args(["--out-dir"])
        .arg(&train_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let ckpt = train_dir.join("checkpoint.bin");
    assert!(ckpt.exists());
    assert!(train_dir.join("loss.csv").exists());

    // 3. Evaluate in context.
    let eval_cfg = dir.path().join("eval.json");
    write(
        &eval_cfg,
        &format!(
            r#"{{ "checkpoint": "{}", "dataset": "{}", "t_grid": [1, 10], "k_list": [1, 4] }}"#,
            ckpt.display(),
            dataset_path.display()
        ),
    );
    let eval_dir = dir.path().join("eval");
    let out = bin()
        .args(["eval-icl", "--config"])
        .arg(&eval_cfg)
        .args(["--out-dir"])
        .arg(&eval_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let rows_path = eval_dir.join("rows.csv");
    let rows = fs::read_to_string(&rows_path).unwrap();
    assert!(rows.starts_with("experiment_id,model_id,T,k,metric,value,trial,seen\n"));
    assert!(rows.lines().count() > 4);

    // 4. Probes on the trained checkpoint.
    let pc_cfg = dir.path().join("pc.json");
    write(
        &pc_cfg,
        &format!(
            r#"{{ "seed": 4, "checkpoint": "{}", "dataset": "{}",
                 "positions": [5, 20], "ks": [1, 4], "bootstrap": 50, "max_sequences": 6 }}"#,
            ckpt.display(),
            dataset_path.display()
        ),
    );
    let pc_dir = dir.path().join("pc");
    let out = bin()
        .args(["probe-pc", "--config"])
        .arg(&pc_cfg)
        .args(["--out-dir"])
        .arg(&pc_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(pc_dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary["rho"].is_number());

    let sil_cfg = dir.path().join("sil.json");
    write(
        &sil_cfg,
        &format!(
            r#"{{ "seed": 4, "checkpoint": "{}", "dataset": "{}", "stride": 10,
                 "envs": 4, "traj_per_env": 2 }}"#,
            ckpt.display(),
            dataset_path.display()
        ),
    );
    let sil_dir = dir.path().join("sil");
    let out = bin()
        .args(["probe-silhouette", "--config"])
        .arg(&sil_cfg)
        .args(["--out-dir"])
        .arg(&sil_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(sil_dir.join("memory_states.csv").exists());

    // 5. Regenerate a summary from the eval rows.
    let rep_cfg = dir.path().join("rep.json");
    write(&rep_cfg, &format!(r#"{{ "rows": "{}" }}"#, rows_path.display()));
    let rep_dir = dir.path().join("rep");
    let out = bin()
        .args(["report", "--config"])
        .arg(&rep_cfg)
        .args(["--out-dir"])
        .arg(&rep_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(rep_dir.join("summary.json").exists());
}

#[test]
fn mismatched_kind_is_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("spec.json");
    write(
        &cfg,
        r#"{ "kind": "crossover", "seed": 1, "n_envs_list": [1], "dims_list": [[2,2,2]],
             "t_grid": [16], "trials": 2, "concentration": 1.0 }"#,
    );
    let out = bin()
        .args(["verify-bounds", "--config"])
        .arg(&cfg)
        .args(["--out-dir"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
