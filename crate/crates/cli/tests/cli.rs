use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_trajworld"));
    c.env_remove("TRAJWORLD_SEED").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let o = run(args, cwd);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn error_json(o: &Output) -> Value {
    let line = String::from_utf8_lossy(&o.stderr);
    let last = line.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|_| panic!("stderr is not an error object: {line}"))
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn same_tree(a: &Path, b: &Path) -> bool {
    let fa = files(a);
    fa == files(b) && fa.iter().all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap())
}

const TINY: &str = r#"{
  "model": {"layers": 1, "heads": 2, "d_model": 8, "ffn_hidden": [16, 8], "bins": 16, "max_variates": 8, "max_steps": 12},
  "train": {"total_steps": 12, "batch_size": 4, "context": 8, "warmup_steps": 2, "eval_every": 6, "val_batches": 1}
}"#;

/// Dataset plus a tiny trained checkpoint under `root`.
fn fixture(root: &Path) {
    ok(&["datagen", "--episodes", "4", "--steps", "40", "--out", "dg"], root);
    std::fs::write(root.join("tiny.json"), TINY).unwrap();
    ok(&["pretrain", "--config", "tiny.json", "--data", "dg/data", "--out", "pt"], root);
}

#[test]
fn datagen_single_env_writes_one_manifest() {
    let t = tempfile::tempdir().unwrap();
    let o = ok(&["datagen", "--env", "pendulum", "--gravity", "10", "--episodes", "5", "--out", "dg"], t.path());
    let manifests: Vec<_> = files(&t.path().join("dg/data")).into_iter().filter(|f| f.extension().unwrap() == "json").collect();
    assert_eq!(manifests.len(), 1);
    let m = trajworld::dataset::load_manifest(t.path().join("dg/data").join(&manifests[0])).unwrap();
    assert_eq!(m.episode_count(), 5);
    assert_eq!(m.envs[0].params["gravity"], 10.0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("episodes") && stdout.contains("5 episodes"), "{stdout}");
    let s = read_json(t.path().join("dg/summary.json"));
    assert_eq!(s["manifests"][0]["state_dim"], 3);
    assert_eq!(s["manifests"][0]["action_dim"], 1);
}

#[test]
fn datagen_grid_writes_sixty_train_and_five_holdout_manifests() {
    let t = tempfile::tempdir().unwrap();
    ok(&["datagen", "--grid", "b21", "--episodes", "1", "--steps", "5", "--out", "g"], t.path());
    let count = |d: &str| files(&t.path().join("g").join(d)).iter().filter(|f| f.extension().unwrap() == "json").count();
    assert_eq!(count("train"), 60);
    assert_eq!(count("holdout"), 5);
}

#[test]
fn datagen_cartpole() {
    let t = tempfile::tempdir().unwrap();
    ok(&["datagen", "--env", "cartpole_swing", "--episodes", "3", "--steps", "20", "--out", "c"], t.path());
    let s = read_json(t.path().join("c/summary.json"));
    assert_eq!(s["manifests"][0]["state_dim"], 5);
}

#[test]
fn datagen_is_reproducible_and_seeded() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    ok(&["datagen", "--episodes", "3", "--steps", "20", "--seed", "4", "--out", "a"], p);
    ok(&["datagen", "--episodes", "3", "--steps", "20", "--seed", "4", "--out", "b"], p);
    assert!(same_tree(&p.join("a"), &p.join("b")));
    let o = bin()
        .args(["datagen", "--episodes", "3", "--steps", "20", "--out", "env"])
        .env("TRAJWORLD_SEED", "4")
        .current_dir(p)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(same_tree(&p.join("a"), &p.join("env")));
    ok(&["datagen", "--episodes", "3", "--steps", "20", "--seed", "5", "--out", "c"], p);
    assert!(!same_tree(&p.join("a"), &p.join("c")));
}

#[test]
fn flag_beats_env_seed_and_config_beats_env() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    std::fs::write(p.join("c.json"), r#"{"seed": 9, "datagen": {"episodes": 2, "steps": 10}}"#).unwrap();
    let go = |args: &[&str]| {
        let o = bin().args(args).env("TRAJWORLD_SEED", "3").current_dir(p).output().unwrap();
        assert!(o.status.success());
    };
    go(&["datagen", "--config", "c.json", "--out", "x"]);
    assert_eq!(read_json(p.join("x/config.json"))["seed"], 9);
    go(&["datagen", "--config", "c.json", "--seed", "1", "--episodes", "3", "--out", "y"]);
    let snap = read_json(p.join("y/config.json"));
    assert_eq!(snap["seed"], 1);
    assert_eq!(snap["datagen"]["episodes"], 3);
    assert_eq!(snap["datagen"]["steps"], 10);
    go(&["datagen", "--episodes", "2", "--steps", "10", "--out", "z"]);
    assert_eq!(read_json(p.join("z/config.json"))["seed"], 3);
}

#[test]
fn schema_errors_report_the_field_and_write_nothing() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    ok(&["datagen", "--episodes", "2", "--steps", "10", "--out", "dg"], p);
    std::fs::write(p.join("bad.json"), r#"{"train": {"peak_lr": "fast"}}"#).unwrap();
    let o = run(&["pretrain", "--config", "bad.json", "--data", "dg/data", "--out", "out"], p);
    assert_eq!(o.status.code(), Some(2));
    let e = error_json(&o);
    assert_eq!(e["error"]["kind"], "schema");
    assert_eq!(e["error"]["path"], "train.peak_lr");
    assert!(!p.join("out").exists());

    std::fs::write(p.join("typo.json"), r#"{"model": {"dmodel": 8}}"#).unwrap();
    let o = run(&["pretrain", "--config", "typo.json", "--data", "dg/data", "--out", "out"], p);
    assert_eq!(error_json(&o)["error"]["path"], "model.dmodel");

    std::fs::write(p.join("wrong.json"), r#"{"mpc": {"candidates": 4}}"#).unwrap();
    let o = run(&["pretrain", "--config", "wrong.json", "--data", "dg/data", "--out", "out"], p);
    assert_eq!(error_json(&o)["error"]["path"], "mpc");

    let o = run(&["pretrain", "--data", "dg/data", "--lr=-1", "--out", "out"], p);
    assert_eq!(error_json(&o)["error"]["path"], "train");

    std::fs::write(p.join("garbage.json"), "{not json").unwrap();
    let o = run(&["datagen", "--config", "garbage.json", "--out", "out"], p);
    assert_eq!(error_json(&o)["error"]["kind"], "config_parse");
    assert!(!p.join("out").exists());
}

#[test]
fn missing_inputs_are_reported() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    ok(&["datagen", "--episodes", "2", "--steps", "10", "--out", "dg"], p);
    let o = run(&["evalpred", "--data", "dg/data", "--checkpoint", "none.twck", "--out", "e"], p);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_json(&o)["error"]["kind"], "missing_input");
    let o = run(&["evalpred", "--data", "dg/data", "--out", "e"], p);
    assert_eq!(error_json(&o)["error"]["path"], "checkpoint");
    let o = run(&["pretrain", "--data", "nowhere", "--out", "e"], p);
    assert_eq!(error_json(&o)["error"]["kind"], "missing_input");
    let o = run(&["pretrain", "--data", "dg/data"], p);
    assert_eq!(error_json(&o)["error"]["path"], "out");
    let o = run(&["teleport"], p);
    assert_eq!(error_json(&o)["error"]["kind"], "usage");
    assert!(!p.join("e").exists());
}

#[test]
fn documented_defaults_and_full_scale_flags() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    fixture(p);
    // the tiny model's window is 12 rows, so the default of 19 is rejected
    let snap_err = run(&["evalpred", "--data", "dg/data", "--checkpoint", "pt/model.twck", "--out", "e2"], p);
    assert_eq!(error_json(&snap_err)["error"]["path"], "evalpred.context");

    std::fs::write(p.join("ope.json"), r#"{"ope": {"policies": [{"kind": "zero"}, {"kind": "expert"}], "starts_per_episode": 1}}"#).unwrap();
    ok(
        &["ope", "--config", "ope.json", "--data", "dg/data", "--checkpoint", "pt/model.twck", "--gamma", "0.995", "--horizon", "2000", "--out", "o"],
        p,
    );
    let snap = read_json(p.join("o/config.json"));
    assert_eq!(snap["ope"]["gamma"], 0.995);
    assert_eq!(snap["ope"]["horizon"], 2000);
    let csv = std::fs::read_to_string(p.join("o/ope.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    ok(&["mpc", "--data", "dg/data", "--checkpoint", "pt/model.twck", "--episodes", "1", "--max-steps", "3", "--horizon", "2", "--out", "m"], p);
    let snap = read_json(p.join("m/config.json"));
    assert_eq!(snap["mpc"]["candidates"], 128);
    assert_eq!(snap["mpc"]["noise_sigma"], 0.05);
}

#[test]
fn evalpred_context_defaults_to_nineteen() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    ok(&["datagen", "--episodes", "3", "--steps", "30", "--out", "dg"], p);
    std::fs::write(
        p.join("m.json"),
        r#"{"model": {"layers": 1, "d_model": 8, "ffn_hidden": [8], "bins": 8, "max_variates": 8}, "train": {"total_steps": 2, "warmup_steps": 1, "batch_size": 2}}"#,
    )
    .unwrap();
    ok(&["pretrain", "--config", "m.json", "--data", "dg/data", "--out", "pt"], p);
    ok(&["evalpred", "--data", "dg/data", "--checkpoint", "pt/model.twck", "--out", "e"], p);
    assert_eq!(read_json(p.join("e/config.json"))["evalpred"]["context"], 19);
    let csv = std::fs::read_to_string(p.join("e/evalpred.csv")).unwrap();
    // 3 episodes × (30 − 19) targets
    assert!(csv.lines().nth(1).unwrap().contains(",trajworld,33,"), "{csv}");
}

#[test]
fn attention_dump_layout() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    fixture(p);
    ok(
        &["evalpred", "--data", "dg/data", "--checkpoint", "pt/model.twck", "--context", "6", "--attention-dump", "att.bin", "--out", "e"],
        p,
    );
    let b = std::fs::read(p.join("att.bin")).unwrap();
    assert_eq!(&b[..4], b"TWAT");
    let u = |i: usize| u32::from_le_bytes(b[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (layers, steps, m) = (u(0), u(1), u(2));
    assert_eq!((layers, steps, m), (1, 6, 5));
    assert_eq!(b.len(), 16 + 8 * layers * steps * m * m);
    let vals: Vec<f64> = b[16..].chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    for row in vals.chunks(m) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn finetune_from_checkpoint_and_from_scratch() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    fixture(p);
    ok(&["finetune", "--data", "dg/data", "--checkpoint", "pt/model.twck", "--steps", "4", "--warmup", "1", "--context", "8", "--out", "f"], p);
    let snap = read_json(p.join("f/config.json"));
    assert_eq!(snap["model"]["d_model"], 8);
    assert_eq!(snap["train"]["mode"], "finetune");
    let o = run(&["finetune", "--data", "dg/data", "dg/data", "--checkpoint", "pt/model.twck", "--out", "g"], p);
    assert_eq!(error_json(&o)["error"]["path"], "data");
    ok(&["finetune", "--config", "tiny.json", "--data", "dg/data", "--steps", "4", "--warmup", "1", "--out", "s"], p);
    let metrics = std::fs::read_to_string(p.join("s/metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,loss,val_loss,lr,grad_norm"));
}
