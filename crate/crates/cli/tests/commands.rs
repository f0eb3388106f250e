use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
field_hidden = [8]
critic_hidden = [8]
embed_dim = 2
pretrain_steps = 20
pretrain_batch_size = 32
batch_size = 16
ode_steps = 4
finetune_steps = 5
warmup_k = 2
eval_samples = 8
";

fn acflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acflow"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let pre = root.join("pre");
    ok(acflow(&["--config", s(&config), "--out-dir", s(&pre), "pretrain"]));
    Fixture {
        _dir: dir,
        ckpt: pre.join("field.ckpt"),
        root,
        config,
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rows(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn finetune(fx: &Fixture, out: &str, extra: &[&str]) -> PathBuf {
    let out = fx.root.join(out);
    let mut args = vec!["--config", s(&fx.config), "--out-dir", s(&out)];
    args.extend_from_slice(extra);
    args.extend(["finetune", "--checkpoint", s(&fx.ckpt)]);
    ok(acflow(&args));
    out
}

#[test]
fn finetune_smoke_run_has_one_row_per_round() {
    let fx = fixture();
    let out = finetune(&fx, "ft", &[]);
    let log = rows(&out.join("telemetry.jsonl"));
    assert_eq!(log.len(), 5);
    let sources: Vec<&str> = log.iter().map(|r| r["adv_source"].as_str().unwrap()).collect();
    assert_eq!(sources, ["GRAE", "GRAE", "CriticAdvantage", "CriticAdvantage", "CriticAdvantage"]);
    for key in [
        "step",
        "reward_raw_mean",
        "reward_shaped_mean",
        "critic_loss",
        "actor_loss",
        "w_min",
        "w_mean",
        "w_max",
        "adv_source",
        "w2_penalty",
        "overflow_flag",
    ] {
        assert!(log[0].get(key).is_some(), "{key}");
    }
    assert!(out.join("report.json").exists());
}

#[test]
fn outcome_mode_is_plumbed_through() {
    let fx = fixture();
    let out = finetune(&fx, "ft", &["--set", "weighting_mode=outcome_reward"]);
    assert!(rows(&out.join("telemetry.jsonl"))
        .iter()
        .all(|r| r["adv_source"] == "OutcomeReward"));
}

#[test]
fn unstabilized_run_exits_zero() {
    let fx = fixture();
    let out = finetune(
        &fx,
        "ft",
        &[
            "--set", "reward_shaping=false", "--set", "advantage_clipping=false", "--set", "warmup=false",
            "--set", "reward_scale=1000", "--set", "reward=region_indicator",
        ],
    );
    assert!(!rows(&out.join("telemetry.jsonl")).is_empty());
}

#[test]
fn reruns_are_byte_identical() {
    let fx = fixture();
    let a = finetune(&fx, "a", &["--seed", "11"]);
    let b = finetune(&fx, "b", &["--seed", "11"]);
    let c = finetune(&fx, "c", &["--seed", "12"]);
    let t = |d: &Path| fs::read(d.join("telemetry.jsonl")).unwrap();
    assert_eq!(t(&a), t(&b));
    assert_ne!(t(&a), t(&c));

    let pre2 = fx.root.join("pre2");
    ok(acflow(&["--config", s(&fx.config), "--out-dir", s(&pre2), "pretrain"]));
    assert_eq!(fs::read(pre2.join("telemetry.jsonl")).unwrap(), fs::read(fx.root.join("pre/telemetry.jsonl")).unwrap());
    assert_eq!(fs::read(pre2.join("field.ckpt")).unwrap(), fs::read(&fx.ckpt).unwrap());
}

#[test]
fn manifest_replay_reproduces_telemetry() {
    let fx = fixture();
    let a = finetune(&fx, "a", &["--set", "tau=0.7"]);
    let replay = fx.root.join("replay");
    ok(acflow(&["--out-dir", s(&replay), "rerun", "--manifest", s(&a.join("manifest.json"))]));
    assert_eq!(fs::read(a.join("telemetry.jsonl")).unwrap(), fs::read(replay.join("telemetry.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("config.toml")).unwrap(), fs::read(replay.join("config.toml")).unwrap());
    let m: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"].as_str().unwrap().as_bytes(), fs::read(a.join("config.toml")).unwrap());
    assert!(m["config"].as_str().unwrap().contains("tau = 0.7"));
}

#[test]
fn evaluate_dump_is_deterministic() {
    let fx = fixture();
    let run = |name: &str| {
        let out = fx.root.join(name);
        ok(acflow(&["--config", s(&fx.config), "--out-dir", s(&out), "evaluate", "--checkpoint", s(&fx.ckpt)]));
        fs::read_to_string(out.join("samples.csv")).unwrap()
    };
    let a = run("e1");
    assert_eq!(a, run("e2"));
    assert!(a.starts_with("condition,x0,x1,reward\n"));
    assert_eq!(a.lines().count(), 1 + 4 * 8);
}

#[test]
fn exit_codes() {
    let fx = fixture();
    let out = fx.root.join("bad");
    let code = |o: Output| o.status.code().unwrap();
    assert_eq!(code(acflow(&["--set", "delta=-1", "--out-dir", s(&out), "pretrain"])), 1);
    assert_eq!(code(acflow(&["--set", "no_such_key=1", "--out-dir", s(&out), "pretrain"])), 1);
    let missing = fx.root.join("missing.ckpt");
    assert_eq!(code(acflow(&["--out-dir", s(&out), "evaluate", "--checkpoint", s(&missing)])), 3);
    assert!(!out.join("report.json").exists());
    let other = fx.root.join("other.toml");
    fs::write(&other, TINY.replace("field_hidden = [8]", "field_hidden = [4]")).unwrap();
    let o = acflow(&["--config", s(&other), "--out-dir", s(&out), "finetune", "--checkpoint", s(&fx.ckpt)]);
    assert_eq!(code(o.clone()), 1);
    let msg = String::from_utf8_lossy(&o.stderr);
    assert!(msg.contains("[7, 8, 2]") && msg.contains("[7, 4, 2]"), "{msg}");
}

#[test]
fn ablate_writes_four_arms_and_a_summary() {
    let fx = fixture();
    let out = fx.root.join("abl");
    ok(acflow(&["--config", s(&fx.config), "--out-dir", s(&out), "ablate", "--checkpoint", s(&fx.ckpt)]));
    for arm in ["vanilla", "rs", "rs_clip", "full"] {
        assert_eq!(rows(&out.join(arm).join("telemetry.jsonl")).len(), 5);
    }
    let summary: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.len(), 4);
    let hashes: Vec<&str> = summary.iter().map(|r| r["checkpoint_sha256"].as_str().unwrap()).collect();
    assert!(hashes.iter().all(|h| *h == hashes[0]));
}
