use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use ::acflow::acflow::{finetune, FinetuneOutcome, RoundTelemetry};
use ::acflow::metrics::{EvalOptions, EvalSamples};
use ::acflow::net::TIME_FEATURES;
use ::acflow::{
    evaluate, pretrain, stream_rng, MetricReport, RewardFn, RngStream, RunConfig, ToyTaskSpec, VectorField,
};
use gradcore::Checkpoint;
use log::{info, warn};

use crate::config::config_to_string;
use crate::error::{CliError, Result};
use crate::io::{ensure_dir, read, sha256_hex, write_atomic, write_json, TelemetryLog};
use crate::manifest::{now_unix_ms, Artifact, ExperimentManifest};

pub const CONFIG_FILE: &str = "config.toml";
pub const TELEMETRY_FILE: &str = "telemetry.jsonl";
pub const FIELD_FILE: &str = "field.ckpt";
pub const CRITIC_FILE: &str = "critic.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const SAMPLES_FILE: &str = "samples.csv";

/// A run's directory with its config snapshot and manifest under construction.
pub(crate) struct RunDir {
    pub dir: PathBuf,
    pub manifest: ExperimentManifest,
}

impl RunDir {
    pub fn open(command: &str, dir: &Path, cfg: &RunConfig, task: &ToyTaskSpec, reward: &RewardFn) -> Result<Self> {
        let started = now_unix_ms();
        ensure_dir(dir)?;
        let manifest = ExperimentManifest::new(command, cfg, task, reward, started)?;
        write_atomic(&dir.join(CONFIG_FILE), manifest.config.as_bytes())?;
        Ok(RunDir {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn input(&mut self, name: &str, path: &Path, bytes: &[u8]) {
        self.manifest.inputs.push(Artifact {
            name: name.to_string(),
            path: path.to_path_buf(),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn output(&mut self, name: &str, path: &Path) -> Result<()> {
        self.manifest.outputs.push(Artifact::of_file(name, path)?);
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        let config = self.path(CONFIG_FILE);
        self.output("config", &config)?;
        self.manifest.write(&self.dir)
    }
}

fn setup(cfg: &RunConfig) -> Result<(ToyTaskSpec, RewardFn)> {
    cfg.validate()?;
    let task = cfg.build_task()?;
    let reward = cfg.build_reward(&task);
    Ok((task, reward))
}

fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let bytes = ckpt.encode();
    write_atomic(path, &bytes)?;
    Ok(bytes)
}

/// Loads a vector-field checkpoint and checks it against the configured shape.
pub fn load_field(path: &Path, cfg: &RunConfig, task: &ToyTaskSpec) -> Result<(VectorField, Vec<u8>)> {
    let bytes = read(path)?;
    let ckpt = Checkpoint::decode(&bytes).map_err(|e| CliError::io(path, e))?;
    let field = VectorField::from_checkpoint(&ckpt).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut want = vec![task.dim() + TIME_FEATURES + cfg.embed_dim];
    want.extend_from_slice(&cfg.field_hidden);
    want.push(task.dim());
    let net = field.net();
    if net.layer_spec().widths != want || net.vocab() != task.vocab() {
        return Err(CliError::Config(format!(
            "checkpoint {} is incompatible with the configuration: checkpoint layer spec {:?} with {} conditions, \
             configured layer spec {:?} with {} conditions",
            path.display(),
            net.layer_spec().widths,
            net.vocab(),
            want,
            task.vocab()
        )));
    }
    Ok((field, bytes))
}

pub(crate) fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        n_samples: cfg.eval_samples,
        ode_steps: cfg.ode_steps,
        energy_distance: true,
    }
}

fn run_evaluation(field: &VectorField, task: &ToyTaskSpec, reward: &RewardFn, cfg: &RunConfig) -> Result<(MetricReport, EvalSamples)> {
    let mut rng = stream_rng(cfg.seed, RngStream::Evaluate);
    Ok(evaluate(field, task, reward, eval_options(cfg), &mut rng)?)
}

fn samples_csv(samples: &EvalSamples) -> Result<Vec<u8>> {
    let (n, d) = samples.xs.dims2("samples")?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["condition".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    header.push("reward".into());
    let csv_err = |e: csv::Error| CliError::Io(format!("sample dump: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..n {
        let mut rec = vec![samples.conds[i].0.to_string()];
        rec.extend(samples.xs.row(i).iter().map(|v| v.to_string()));
        rec.push(samples.rewards[i].to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Io(format!("sample dump: {e}")))
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let (task, reward) = setup(cfg)?;
    let mut run = RunDir::open("pretrain", out, cfg, &task, &reward)?;
    let mut field = VectorField::for_task(&task, cfg, &mut stream_rng(cfg.seed, RngStream::FieldInit))?;
    info!("pretraining {} steps on {}", cfg.pretrain_steps, task.name);
    let rows = pretrain(&mut field, &task, cfg, &mut stream_rng(cfg.seed, RngStream::Pretrain))?;
    let telemetry = run.path(TELEMETRY_FILE);
    let mut log = TelemetryLog::create(&telemetry)?;
    for row in &rows {
        log.append(row)?;
    }
    log.commit()?;
    if let Some(last) = rows.last() {
        info!("final CFM loss {:.5}", last.loss);
    }
    let ckpt = run.path(FIELD_FILE);
    write_checkpoint(&ckpt, &field.to_checkpoint())?;
    run.output("telemetry", &telemetry)?;
    run.output("field", &ckpt)?;
    run.finish()
}

/// Fine-tunes `field`, streaming telemetry to `telemetry` and periodic
/// checkpoints into `dir`.
pub(crate) fn finetune_to(
    field: VectorField,
    task: &ToyTaskSpec,
    reward: &RewardFn,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<(FinetuneOutcome, PathBuf, Vec<PathBuf>)> {
    let mut log = TelemetryLog::create(&dir.join(TELEMETRY_FILE))?;
    let mut periodic = Vec::new();
    let mut failure: Option<CliError> = None;
    let outcome = finetune(field, task, reward, cfg, |row: &RoundTelemetry, state| {
        let mut save = || -> Result<()> {
            log.append(row)?;
            if cfg.checkpoint_every > 0 && row.step.is_multiple_of(cfg.checkpoint_every) {
                let p = dir.join(format!("field_round_{:06}.ckpt", row.step));
                write_checkpoint(&p, &state.field.to_checkpoint())?;
                periodic.push(p);
            }
            Ok(())
        };
        match save() {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                failure = Some(e);
                ControlFlow::Break(())
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(row) = outcome.telemetry.iter().find(|r| r.diverged()) {
        warn!("round {} diverged: {}", row.step, row.diagnostic.as_deref().unwrap_or(""));
    }
    Ok((outcome, log.commit()?, periodic))
}

pub fn cmd_finetune(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<PathBuf> {
    let (task, reward) = setup(cfg)?;
    let (field, bytes) = load_field(checkpoint, cfg, &task)?;
    let mut run = RunDir::open("finetune", out, cfg, &task, &reward)?;
    run.input("checkpoint", checkpoint, &bytes);
    info!("fine-tuning {} rounds ({:?})", cfg.finetune_steps, cfg.weighting_mode);
    let (outcome, telemetry, periodic) = finetune_to(field, &task, &reward, cfg, out)?;
    run.output("telemetry", &telemetry)?;
    for p in &periodic {
        run.output("periodic_checkpoint", p)?;
    }
    let field_path = run.path(FIELD_FILE);
    write_checkpoint(&field_path, &outcome.field.to_checkpoint())?;
    run.output("field", &field_path)?;
    let critic_path = run.path(CRITIC_FILE);
    write_checkpoint(&critic_path, &outcome.critic.to_checkpoint())?;
    run.output("critic", &critic_path)?;
    match run_evaluation(&outcome.field, &task, &reward, cfg) {
        Ok((report, _)) => {
            info!("mean reward {:.4}, diversity {:.4}", report.mean_reward, report.diversity);
            let p = run.path(REPORT_FILE);
            write_json(&p, &report)?;
            run.output("report", &p)?;
        }
        Err(CliError::Numeric(m)) if outcome.diverged => warn!("no report for a diverged run: {m}"),
        Err(e) => return Err(e),
    }
    run.finish()
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<PathBuf> {
    let (task, reward) = setup(cfg)?;
    let (field, bytes) = load_field(checkpoint, cfg, &task)?;
    let (report, samples) = run_evaluation(&field, &task, &reward, cfg)?;
    let mut run = RunDir::open("evaluate", out, cfg, &task, &reward)?;
    run.input("checkpoint", checkpoint, &bytes);
    let report_path = run.path(REPORT_FILE);
    write_json(&report_path, &report)?;
    let samples_path = run.path(SAMPLES_FILE);
    write_atomic(&samples_path, &samples_csv(&samples)?)?;
    info!("mean reward {:.4}, diversity {:.4}", report.mean_reward, report.diversity);
    run.output("report", &report_path)?;
    run.output("samples", &samples_path)?;
    run.finish()
}

/// Config snapshot check used by `rerun`: the stored document must be exactly
/// what this build would write for the parsed configuration.
pub(crate) fn check_snapshot(text: &str, cfg: &RunConfig) -> Result<()> {
    if config_to_string(cfg)? != text {
        return Err(CliError::Config(
            "manifest config snapshot does not round-trip with this build".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn tiny() -> RunConfig {
        RunConfig {
            field_hidden: vec![8],
            critic_hidden: vec![8],
            embed_dim: 2,
            pretrain_steps: 10,
            pretrain_batch_size: 16,
            batch_size: 16,
            ode_steps: 4,
            finetune_steps: 5,
            warmup_k: 2,
            eval_samples: 8,
            ..RunConfig::default()
        }
    }

    #[test]
    fn pretrain_writes_round_tripping_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("a").join("b");
        cmd_pretrain(&tiny(), &out).unwrap();
        let bytes = fs::read(out.join(FIELD_FILE)).unwrap();
        assert_eq!(Checkpoint::decode(&bytes).unwrap().encode(), bytes);
        let m = ExperimentManifest::read(&out.join("manifest.json")).unwrap();
        assert_eq!(m.command, "pretrain");
        assert_eq!(fs::read_to_string(out.join(CONFIG_FILE)).unwrap(), m.config);
        assert_eq!(fs::read_to_string(out.join(TELEMETRY_FILE)).unwrap().lines().count(), 10);
    }

    #[test]
    fn incompatible_checkpoint_names_both_specs() {
        let dir = tempfile::tempdir().unwrap();
        cmd_pretrain(&tiny(), dir.path()).unwrap();
        let cfg = RunConfig {
            field_hidden: vec![8, 8],
            ..tiny()
        };
        let err = cmd_finetune(&cfg, &dir.path().join(FIELD_FILE), &dir.path().join("ft")).unwrap_err();
        let msg = err.to_string();
        assert_eq!(err.exit_code(), 1);
        assert!(msg.contains("[7, 8, 2]") && msg.contains("[7, 8, 8, 2]"), "{msg}");
    }

    #[test]
    fn evaluate_minimum_samples_and_missing_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        cmd_pretrain(&tiny(), dir.path()).unwrap();
        let cfg = RunConfig {
            eval_samples: 2,
            ..tiny()
        };
        let out = dir.path().join("eval");
        cmd_evaluate(&cfg, &dir.path().join(FIELD_FILE), &out).unwrap();
        let report: MetricReport = serde_json::from_slice(&fs::read(out.join(REPORT_FILE)).unwrap()).unwrap();
        assert!(report.diversity.is_finite());

        let out = dir.path().join("eval_missing");
        let err = cmd_evaluate(&cfg, &dir.path().join("nope.ckpt"), &out).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(!out.join(REPORT_FILE).exists());
    }

    #[test]
    fn periodic_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        cmd_pretrain(&tiny(), dir.path()).unwrap();
        let cfg = RunConfig {
            checkpoint_every: 2,
            ..tiny()
        };
        let out = dir.path().join("ft");
        cmd_finetune(&cfg, &dir.path().join(FIELD_FILE), &out).unwrap();
        assert!(out.join("field_round_000002.ckpt").exists());
        assert!(out.join("field_round_000004.ckpt").exists());
        assert!(!out.join("field_round_000005.ckpt").exists());
        assert!(!out.join("telemetry.jsonl.partial").exists());
    }
}
