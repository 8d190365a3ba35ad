use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "env": {"num_agents": 4, "num_steps": 8, "impressions_per_step": 30, "budgets": [40.0, 1e9]},
  "expert": {"train_seeds": 2, "random_policies": 1, "noisy_expert_policies": 1},
  "train": {"steps": 4, "batch_size": 4, "checkpoint_every": 2,
            "schedule": {"steps": 8},
            "model": {"egcd": {"model_dim": 16, "heads": 2, "ffn_mult": 2},
                      "vae": {"latent_dim": 4}, "inverse": {"history": 2, "hidden": 16}}},
  "eval": {"seeds": [0, 1], "grid_points": 5, "timing": false,
           "behavior_clone": {"steps": 10, "hidden": 8}}
}"#;

fn egdp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egdp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(o.status.code(), Some(0), "stdout: {}\nstderr: {}", stdout(&o), stderr(&o));
    o
}

fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    std::fs::write(&cfg, SMALL).unwrap();
    (dir, cfg)
}

fn files_under(root: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    out.remove("manifest.json");
    out
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

/// Every written file is listed and every listed file exists.
fn assert_complete(out: &Path, command: &str) {
    let m = manifest(out);
    assert_eq!(m["command"], command);
    let listed: BTreeSet<String> = m["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap().to_string()).collect();
    assert_eq!(listed, files_under(out), "{command}");
}

#[test]
fn score_of_the_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    // 4 conversions at total cost 16 against a target of 2: penalty 0.25.
    std::fs::write(
        dir.path().join("ep.jsonl"),
        "{\"t\":0,\"state\":[0,0,0,0,0,0,0,0],\"action\":0,\"reward\":2,\"cost\":10,\"wins\":1}\n\
         {\"t\":1,\"state\":[0,0,0,0,0,0,0,0],\"action\":0,\"reward\":2,\"cost\":6,\"wins\":1}\n",
    )
    .unwrap();
    let o = ok(egdp(dir.path(), &["score", "--episode", "ep.jsonl", "--cpa", "2", "--lambda", "2"]));
    assert_eq!(stdout(&o).trim(), "1");
    assert!(!dir.path().join("out").exists(), "score writes nothing");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = egdp(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(egdp(dir.path(), &["launch"]).status.code(), Some(2));
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    for (doc, field) in [
        (r#"{"train": {"xi": -1}}"#, "train.xi"),
        (r#"{"sampler": {"gamma": 0}}"#, "sampler.gamma"),
        (r#"{"train": {"bogus": 1}}"#, "bogus"),
    ] {
        std::fs::write(dir.path().join("c.json"), doc).unwrap();
        let o = egdp(dir.path(), &["gen-data", "--config", "c.json"]);
        assert_eq!(o.status.code(), Some(2), "{doc}");
        assert!(stderr(&o).contains(field), "{doc}: {}", stderr(&o));
    }
    let o = egdp(dir.path(), &["gen-data", "--config", "missing.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.json"));
    let o = egdp(dir.path(), &["train", "--ablation", "w/o-xyz"]);
    assert_eq!(o.status.code(), Some(2));
    let o = egdp(dir.path(), &["rollout", "--policy", "egdp"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--checkpoint"));
}

#[test]
fn runtime_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.egdp"), b"EGDPnot a checkpoint").unwrap();
    let o = egdp(dir.path(), &["rollout", "--checkpoint", "bad.egdp"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = egdp(dir.path(), &["score", "--episode", "nope.jsonl", "--cpa", "2"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(egdp(dir.path(), &["grad-check", "--out", "gc"]));
    assert_eq!(stdout(&o).lines().count(), 4);
    assert!(!stdout(&o).contains("FAIL"));
    let out = dir.path().join("gc");
    assert_complete(&out, "grad-check");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("gradcheck.json")).unwrap()).unwrap();
    assert!(report.as_array().unwrap().iter().all(|e| e["pass"] == true));
}

#[test]
fn simulate_output_rescores_to_the_same_value() {
    let (dir, cfg) = workspace();
    let cfg = cfg.to_str().unwrap();
    ok(egdp(dir.path(), &["simulate", "--config", cfg, "--seed", "3", "--coefficient", "0.4", "--out", "sim"]));
    assert_complete(&dir.path().join("sim"), "simulate");
    let score: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("sim/score.json")).unwrap()).unwrap();
    let o = ok(egdp(dir.path(), &["score", "--episode", "sim/episode.jsonl", "--cpa", "10"]));
    assert_eq!(stdout(&o).trim().parse::<f64>().unwrap(), score["score"].as_f64().unwrap());
    assert_eq!(manifest(&dir.path().join("sim"))["config"]["env"]["seed"], 3);

    ok(egdp(dir.path(), &["expert", "--config", cfg, "--seed", "3", "--out", "ex"]));
    assert_complete(&dir.path().join("ex"), "expert");
}

#[test]
fn pipeline_writes_complete_manifests() {
    let (dir, cfg) = workspace();
    let cfg = cfg.to_str().unwrap();
    let d = dir.path();

    ok(egdp(d, &["gen-data", "--config", cfg, "--out", "data"]));
    assert_complete(&d.join("data"), "gen-data");

    let o = ok(egdp(d, &["train", "--config", cfg, "--data", "data", "--bc", "--out", "run"]));
    assert!(stdout(&o).starts_with("step 4 "), "{}", stdout(&o));
    assert_complete(&d.join("run"), "train");
    let files = files_under(&d.join("run"));
    for f in ["ckpt_000002.egdp", "final.egdp", "loss.csv", "bc.egdp", "bc_loss.csv"] {
        assert!(files.contains(f), "{f} missing from {files:?}");
    }

    ok(egdp(d, &["train", "--config", cfg, "--ablation", "w/o-ca", "--steps", "2", "--out", "woca"]));
    assert_eq!(manifest(&d.join("woca"))["config"]["train"]["steps"], 2);

    ok(egdp(d, &["rollout", "--config", cfg, "--checkpoint", "run/final.egdp", "--gamma", "2", "--out", "roll"]));
    assert_complete(&d.join("roll"), "rollout");
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("roll/score.json")).unwrap()).unwrap();
    assert_eq!(s["denoiser_evals"], 8 * 2 * 4);

    ok(egdp(d, &["rollout", "--config", cfg, "--policy", "bc", "--checkpoint", "run/bc.egdp", "--out", "rollbc"]));

    std::fs::write(
        d.join("policies.json"),
        r#"[{"kind": "behavior_clone", "checkpoint": "run/bc.egdp"}, {"kind": "fixed_bid", "coefficient": 0.3}]"#,
    )
    .unwrap();
    let o = ok(egdp(
        d,
        &["evaluate", "--config", cfg, "--checkpoint", "run/final.egdp", "--checkpoint", "woca/final.egdp", "--policies", "policies.json", "--baselines", "--out", "eval"],
    ));
    assert_complete(&d.join("eval"), "evaluate");
    let scores = std::fs::read_to_string(d.join("eval/scores.csv")).unwrap();
    // 7 policies on 2 seeds.
    assert_eq!(scores.lines().count(), 1 + 7 * 2);
    for label in ["egdp,", "egdp_wo_ca,", "behavior_clone", "fixed_bid(0.3)", "pid", "expert_oracle"] {
        assert!(stdout(&o).contains(label), "{label} missing:\n{}", stdout(&o));
    }

    let o = ok(egdp(d, &["sweep", "--config", cfg, "--param", "gamma", "--values", "1,2,4", "--checkpoint", "run/final.egdp", "--out", "sg"]));
    assert_complete(&d.join("sg"), "sweep");
    assert_eq!(stdout(&o).lines().count(), 4);

    ok(egdp(d, &["sweep", "--config", cfg, "--param", "xi", "--values", "0.5,2", "--checkpoint", "run/final.egdp", "--out", "sx"]));
    assert_complete(&d.join("sx"), "sweep");
    let files = files_under(&d.join("sx"));
    assert!(files.contains("sweep_xi_0.5/final.egdp") && files.contains("sweep_xi_2/final.egdp"), "{files:?}");

    let o = egdp(d, &["sweep", "--config", cfg, "--param", "omega", "--values", "1", "--checkpoint", "run/final.egdp"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn manifest_config_reproduces_the_run() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    ok(egdp(d, &["train", "--config", cfg.to_str().unwrap(), "--seed", "7", "--xi", "0.5", "--out", "a"]));
    let resolved = manifest(&d.join("a"))["config"].clone();
    std::fs::write(d.join("resolved.json"), serde_json::to_string(&resolved).unwrap()).unwrap();
    ok(egdp(d, &["train", "--config", "resolved.json", "--out", "b"]));
    assert_eq!(manifest(&d.join("b"))["config"], resolved);
    for f in ["final.egdp", "loss.csv"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
}
