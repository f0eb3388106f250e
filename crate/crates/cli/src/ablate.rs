//! Four-arm stabilization ablation from one shared pretrained checkpoint.

use std::path::{Path, PathBuf};

use ::acflow::{RunConfig, VectorField, WeightingMode};
use gradcore::Checkpoint;
use log::info;
use serde::{Deserialize, Serialize};

use crate::commands::{cmd_pretrain, eval_options, finetune_to, load_field, RunDir, CONFIG_FILE, FIELD_FILE, REPORT_FILE};
use crate::config::config_to_string;
use crate::error::{CliError, Result};
use crate::io::{ensure_dir, sha256_hex, write_atomic, write_json};

pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";

/// `vanilla`, `+RS`, `+RS+Clip` and the full pipeline, in that order. All arms
/// weight by critic advantage; without warm-up the critic is used from round 1.
pub fn ablation_arms(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let arm = |shaping, clipping, warmup| RunConfig {
        weighting_mode: WeightingMode::CriticAdvantage,
        reward_shaping: shaping,
        advantage_clipping: clipping,
        warmup,
        ..base.clone()
    };
    vec![
        ("vanilla", arm(false, false, false)),
        ("rs", arm(true, false, false)),
        ("rs_clip", arm(true, true, false)),
        ("full", arm(true, true, true)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub rounds: usize,
    pub final_mean_reward: Option<f64>,
    pub final_diversity: Option<f64>,
    pub overflow: bool,
    pub first_overflow_round: Option<usize>,
    /// Largest finite `|actor loss|`.
    pub max_abs_actor_loss: Option<f64>,
    pub max_weight: Option<f64>,
    pub diverged: bool,
    pub checkpoint_sha256: String,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| x.to_string())
}

fn summary_csv(rows: &[ArmSummary]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Io(format!("ablation summary: {e}"));
    w.write_record([
        "arm",
        "rounds",
        "final_mean_reward",
        "final_diversity",
        "overflow",
        "first_overflow_round",
        "max_abs_actor_loss",
        "max_weight",
        "diverged",
        "checkpoint_sha256",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.arm.clone(),
            r.rounds.to_string(),
            opt(r.final_mean_reward),
            opt(r.final_diversity),
            r.overflow.to_string(),
            r.first_overflow_round.map_or_else(String::new, |s| s.to_string()),
            opt(r.max_abs_actor_loss),
            opt(r.max_weight),
            r.diverged.to_string(),
            r.checkpoint_sha256.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Io(format!("ablation summary: {e}")))
}

/// Runs every arm from `checkpoint`, or from a fresh pretraining run written
/// to `out/pretrain` when no checkpoint is given.
pub fn cmd_ablate(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<(PathBuf, Vec<ArmSummary>)> {
    cfg.validate()?;
    let task = cfg.build_task()?;
    let reward = cfg.build_reward(&task);
    let start = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = out.join("pretrain");
            cmd_pretrain(cfg, &dir)?;
            dir.join(FIELD_FILE)
        }
    };
    let (_, bytes) = load_field(&start, cfg, &task)?;
    let hash = sha256_hex(&bytes);
    let mut run = RunDir::open("ablate", out, cfg, &task, &reward)?;
    run.input("checkpoint", &start, &bytes);
    let mut summaries = Vec::new();
    for (name, arm_cfg) in ablation_arms(cfg) {
        info!("ablation arm {name}");
        let dir = out.join(name);
        ensure_dir(&dir)?;
        write_atomic(&dir.join(CONFIG_FILE), config_to_string(&arm_cfg)?.as_bytes())?;
        let field = VectorField::from_checkpoint(&Checkpoint::decode(&bytes)?)?;
        let (outcome, telemetry, _) = finetune_to(field, &task, &reward, &arm_cfg, &dir)?;
        run.output(&format!("{name}/telemetry"), &telemetry)?;
        let mut rng = ::acflow::stream_rng(arm_cfg.seed, ::acflow::RngStream::Evaluate);
        let report = match ::acflow::evaluate(&outcome.field, &task, &reward, eval_options(&arm_cfg), &mut rng) {
            Ok((report, _)) => {
                let p = dir.join(REPORT_FILE);
                write_json(&p, &report)?;
                run.output(&format!("{name}/report"), &p)?;
                Some(report)
            }
            Err(e) if e.is_numeric() => None,
            Err(e) => return Err(e.into()),
        };
        let log = &outcome.telemetry;
        summaries.push(ArmSummary {
            arm: name.to_string(),
            rounds: log.len(),
            final_mean_reward: report.as_ref().map(|r| r.mean_reward),
            final_diversity: report.as_ref().map(|r| r.diversity),
            overflow: log.iter().any(|r| r.overflow_flag),
            first_overflow_round: log.iter().find(|r| r.overflow_flag).map(|r| r.step),
            max_abs_actor_loss: log.iter().filter_map(|r| r.actor_loss).map(f64::abs).reduce(f64::max),
            max_weight: log.iter().filter_map(|r| r.w_max).reduce(f64::max),
            diverged: outcome.diverged,
            checkpoint_sha256: hash.clone(),
        });
    }
    let json = out.join(SUMMARY_JSON);
    write_json(&json, &summaries)?;
    let csv = out.join(SUMMARY_CSV);
    write_atomic(&csv, &summary_csv(&summaries)?)?;
    run.output("summary", &json)?;
    run.output("summary_table", &csv)?;
    Ok((run.finish()?, summaries))
}
