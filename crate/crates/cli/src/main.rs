//! `octgan`: train, predict, evaluate, phantom, gradcheck.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 data error
//! (missing or malformed dataset, empty split, unreadable checkpoint),
//! 3 training divergence or a failed gradient check.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use octgan_core::dataset::{
    bscan_file, eye_dir, generate_phantom, load_bscan, make_samples, save_bscan, ImageBank,
};
use octgan_core::gradcheck::{run_suite, CheckResult};
use octgan_core::metrics::ssim;
use octgan_core::train::{evaluate_generator, load_splits, predict, train_with, Checkpoint, StepKind};
use octgan_core::{Error, RunConfig};

const CONFIG_SNAPSHOT: &str = "resolved_config.txt";

#[derive(Parser, Debug)]
#[command(name = "octgan", version, about = "Next-visit OCT B-scan prediction with a conditional GAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the training eyes of a dataset; writes checkpoint.octg and train_report.csv.
    Train(TrainArgs),
    /// Predict the next scan from prior visits (oldest first).
    Predict(PredictArgs),
    /// Score a checkpoint on the held-out test eyes; writes eval_report.csv.
    Evaluate(EvaluateArgs),
    /// Write a synthetic longitudinal dataset.
    Phantom(PhantomArgs),
    /// Finite-difference check of every differentiable primitive and both networks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, base: RunConfig) -> anyhow::Result<RunConfig> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        for pair in &self.sets {
            cfg.set_pair(pair)?;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Generate the configured phantom under OUT/phantom first and train on it.
    #[arg(long)]
    phantom: bool,
    /// Print a progress line to stderr every N steps (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prior-visit scans, oldest first.
    #[arg(long, num_args = 1.., required = true)]
    frames: Vec<PathBuf>,
    /// Output directory; the prediction is written as prediction.pgm.
    #[arg(long)]
    out: PathBuf,
    /// Dropout seed; defaults to the checkpoint's eval_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Ground-truth scan; prints its SSIM against the prediction.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Dropout seed; defaults to the checkpoint's eval_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write `<eye>_<visit>_<scan>_truth.pgm` / `_pred.pgm` pairs here.
    #[arg(long)]
    pairs_dir: Option<PathBuf>,
    /// Override an evaluation key (eval_batch_size, ssim.*); repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset root to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// f32, f64 or both.
    #[arg(long, default_value = "both")]
    precision: String,
    /// Optional directory for gradcheck.txt and the config snapshot.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scale the analytic gradient of one op to prove the checker bites.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let err = e.into();
        let code = match err.downcast_ref::<Error>() {
            Some(Error::DivergenceDetected { .. } | Error::NumericalFailure(_)) => 3,
            Some(
                Error::EmptyDataset(_)
                | Error::InconsistentVolume(_)
                | Error::TooFewEyes(_)
                | Error::DecodeError { .. }
                | Error::InvalidCheckpoint(_)
                | Error::Io(_),
            ) => 2,
            _ => 1,
        };
        Failure { code, err }
    }
}

fn fail(code: u8, err: anyhow::Error) -> Failure {
    Failure { code, err }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Phantom(a) => cmd_phantom(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error={}", one_line(&format!("{:#}", f.err)));
            ExitCode::from(f.code)
        }
    }
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(|e| fail(1, e))
}

fn write_snapshot(dir: &Path, header: &[String], cfg: &RunConfig) -> Result<(), Failure> {
    let mut text: String = header.iter().map(|l| format!("# {l}\n")).collect();
    text.push_str(&cfg.to_text());
    fs::write(dir.join(CONFIG_SNAPSHOT), text).context("cannot write config snapshot")?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = a.cfg.resolve(RunConfig::default())?;
    cfg.validate()?;
    prepare_out(&a.out)?;
    if a.phantom {
        let root = a.out.join("phantom");
        generate_phantom(&cfg.phantom, &root)?;
        cfg.dataset_root = Some(root);
    }
    let Some(root) = cfg.dataset_root.clone() else {
        return Err(fail(1, anyhow!("no dataset: set dataset_root or pass --phantom")));
    };
    if !root.is_dir() {
        return Err(fail(2, anyhow!("dataset root {} does not exist", root.display())));
    }
    write_snapshot(&a.out, &["octgan train".into()], &cfg)?;
    let splits = load_splits(&cfg)?;
    let log_every = a.log_every;
    let (ckpt, report) = train_with(&splits.train, &cfg, |r| {
        if log_every > 0 && (r.step + 1) % log_every == 0 {
            let kind = if r.kind == StepKind::Generator { "g" } else { "d" };
            eprintln!(
                "step={} kind={kind} loss_g_total={:.5} loss_g_l1={:.5} loss_d={:.5}",
                r.step, r.loss_g_total, r.loss_g_l1, r.loss_d
            );
        }
    })?;
    let ckpt_path = a.out.join("checkpoint.octg");
    ckpt.save(&ckpt_path)?;
    report.save_csv(&a.out.join("train_report.csv"))?;
    println!("checkpoint={}", ckpt_path.display());
    println!("g_updates={}", report.g_updates());
    println!("d_updates={}", report.d_updates());
    if let Some(last) = report.records.last() {
        println!("final_loss_g_l1={}", last.loss_g_l1);
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let expected = ckpt.config.train.n_visits_in;
    if a.frames.len() != expected {
        return Err(fail(
            1,
            anyhow!("checkpoint expects {expected} frames, {} given", a.frames.len()),
        ));
    }
    prepare_out(&a.out)?;
    let seed = a.seed.unwrap_or(ckpt.config.train.eval_seed);
    let mut header = vec![format!("octgan predict --checkpoint {} --seed {seed}", a.checkpoint.display())];
    header.extend(a.frames.iter().map(|f| format!("frame={}", f.display())));
    write_snapshot(&a.out, &header, &ckpt.config)?;
    let frames = a.frames.iter().map(|p| load_bscan(p)).collect::<Result<Vec<_>, _>>()?;
    let pred = predict(&ckpt, &frames, seed).map_err(|e| match e {
        Error::ShapeMismatch(_) => fail(1, e.into()),
        other => Failure::from(other),
    })?;
    let path = a.out.join("prediction.pgm");
    save_bscan(&pred, &path)?;
    println!("prediction={}", path.display());
    if let Some(t) = &a.truth {
        let truth = load_bscan(t)?;
        println!("ssim={}", ssim(&pred, &truth, &ckpt.config.ssim)?);
    }
    Ok(())
}

const EVAL_KEYS: &[&str] = &["eval_batch_size", "eval_seed"];

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut cfg = ckpt.config.clone();
    for pair in &a.sets {
        let key = pair.split_once('=').map_or(pair.as_str(), |(k, _)| k.trim());
        if !(EVAL_KEYS.contains(&key) || key.starts_with("ssim.")) {
            return Err(fail(1, anyhow!("key {key:?} cannot be changed at evaluation time")));
        }
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = a.seed {
        cfg.train.eval_seed = seed;
    }
    if let Some(d) = &a.dataset {
        cfg.dataset_root = Some(d.clone());
    }
    cfg.validate()?;
    let root = cfg
        .dataset_root
        .clone()
        .ok_or_else(|| fail(1, anyhow!("no dataset: pass --dataset")))?;
    if !root.is_dir() {
        return Err(fail(2, anyhow!("dataset root {} does not exist", root.display())));
    }
    prepare_out(&a.out)?;
    write_snapshot(
        &a.out,
        &[format!("octgan evaluate --checkpoint {}", a.checkpoint.display())],
        &cfg,
    )?;
    let splits = load_splits(&cfg)?;
    let samples = make_samples(&splits.test, cfg.train.n_visits_in)?;
    if samples.is_empty() {
        return Err(fail(2, anyhow!("test split yields no pairs")));
    }
    let bank = ImageBank::load(&splits.test)?;
    if let Some(dir) = &a.pairs_dir {
        prepare_out(dir)?;
    }
    let mut gen = ckpt.generator.clone();
    let report = evaluate_generator(&mut gen, &cfg, &samples, &bank, |s, pred, truth| {
        if let Some(dir) = &a.pairs_dir {
            let stem = format!("{}_{}_{}", s.eye, s.target, s.bscan);
            save_bscan(truth, &dir.join(format!("{stem}_truth.pgm")))?;
            save_bscan(pred, &dir.join(format!("{stem}_pred.pgm")))?;
        }
        Ok(())
    })?;
    let csv = a.out.join("eval_report.csv");
    report.save_csv(&csv)?;
    println!("report={}", csv.display());
    println!("n_pairs={}", report.rows.len());
    println!("mean_ssim={}", report.mean_ssim());
    println!("std_ssim={}", report.std_ssim());
    Ok(())
}

fn cmd_phantom(a: PhantomArgs) -> Result<(), Failure> {
    let cfg = a.cfg.resolve(RunConfig::default())?;
    cfg.phantom.validate()?;
    prepare_out(&a.out)?;
    let eyes = generate_phantom(&cfg.phantom, &a.out)?;
    write_snapshot(&a.out, &["octgan phantom".into()], &cfg)?;
    println!("root={}", a.out.display());
    println!("n_eyes={}", eyes.len());
    println!(
        "n_bscans_written={}",
        eyes.iter().map(|e| e.n_visits).sum::<usize>() * cfg.phantom.n_bscans
    );
    if let Some(e) = eyes.first() {
        println!("example={}", a.out.join(eye_dir(e.id)).join("visit_00").join(bscan_file(0)).display());
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let fault = a.inject_fault.as_deref();
    let mut results: Vec<CheckResult> = Vec::new();
    match a.precision.as_str() {
        "f64" => results.extend(run_suite::<f64>(fault)?),
        "f32" => results.extend(run_suite::<f32>(fault)?),
        "both" => {
            results.extend(run_suite::<f64>(fault)?);
            results.extend(run_suite::<f32>(fault)?);
        }
        other => bail_config(format!("precision must be f32, f64 or both, got {other:?}"))?,
    }
    let lines: Vec<String> = results
        .iter()
        .map(|r| {
            format!(
                "op={} precision={} max_rel_error={:e} threshold={:e} status={}",
                r.name,
                r.precision,
                r.max_rel_error,
                r.threshold,
                if r.passed() { "ok" } else { "fail" }
            )
        })
        .collect();
    for l in &lines {
        println!("{l}");
    }
    if let Some(dir) = &a.out {
        prepare_out(dir)?;
        fs::write(dir.join("gradcheck.txt"), lines.join("\n") + "\n").context("cannot write gradcheck.txt")?;
        write_snapshot(dir, &[format!("octgan gradcheck --precision {}", a.precision)], &RunConfig::default())?;
    }
    let mut failed: Vec<String> = Vec::new();
    for r in results.iter().filter(|r| !r.passed()) {
        if !failed.contains(&r.name) {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        println!("status=ok");
        Ok(())
    } else {
        println!("failed={}", failed.join(","));
        Err(fail(3, anyhow!("gradient check failed for {}", failed.join(","))))
    }
}

fn bail_config(msg: String) -> Result<(), Failure> {
    Err(fail(1, anyhow::Error::new(Error::InvalidConfig(msg))))
}
