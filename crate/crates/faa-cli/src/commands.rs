//! Subcommand implementations and the exit-code contract.
//!
//! Exit codes: 0 success, 2 usage or configuration problems, 3 numerical
//! failures (non-finite losses, unusable checkpoints), 4 gradient-check
//! failures.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use faa_core::analysis::{
    ablation_study, config_hash, frequency_report, AblationStudy, Variant,
};
use faa_core::checkpoint::{load_model, save_model, CheckpointError};
use faa_core::data::make_synthetic_task;
use faa_core::training::{evaluate_accuracy, gradcheck_model, train, TrainError, TrainReport};
use faa_core::transformer::{AdapterKind, Model};
use faa_core::RegWeights;

use crate::config::{Resolved, RunConfig};

// ── Errors ───────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration; exit code 2.
    Usage(String),
    /// Numerical failure in an otherwise valid run; exit code 3.
    Numerical(String),
    /// The gradient check did not pass; exit code 4.
    Gradcheck(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Gradcheck(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) | CliError::Gradcheck(m) => m,
        }
    }
}

fn map_train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Config(m) => CliError::Usage(m),
        TrainError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
    }
}

fn map_checkpoint_err(e: CheckpointError) -> CliError {
    match e {
        CheckpointError::Io(_) => CliError::Usage(e.to_string()),
        _ => CliError::Numerical(e.to_string()),
    }
}

// ── Output handling ──────────────────────────────────────────────────────

fn prepare_out_dir(dir: &Path, files: &[&str], force: bool) -> Result<(), CliError> {
    if !force {
        for f in files {
            let p = dir.join(f);
            if p.exists() {
                return Err(CliError::Usage(format!(
                    "{} already exists; pass --force to overwrite",
                    p.display()
                )));
            }
        }
    }
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn resolve(cfg: &RunConfig) -> Result<Resolved, CliError> {
    cfg.resolve().map_err(CliError::Usage)
}

fn run_hash(r: &Resolved) -> String {
    config_hash(&(&r.faa, &r.encoder, &r.task, &r.train, r.seed))
}

// ── check ────────────────────────────────────────────────────────────────

pub fn cmd_check(cfg: &RunConfig) -> Result<(), CliError> {
    let resolved = resolve(cfg)?;
    let model = Model::init(resolved.faa.clone(), resolved.encoder.clone(), AdapterKind::Faa)
        .map_err(CliError::Usage)?;
    let trainable = model.trainable_param_count();
    let total = model.param_count();
    let steps = resolved.train.epochs
        * resolved.task.train_samples.div_ceil(resolved.train.batch_size);
    println!("config hash      {}", run_hash(&resolved));
    println!("seed             {}", resolved.seed);
    println!(
        "model            d_model {}, {} blocks, {} heads, d_ff {}",
        resolved.faa.d_model,
        resolved.encoder.n_blocks,
        resolved.encoder.n_heads,
        resolved.encoder.d_ff
    );
    println!(
        "adapter          r {}, d_rff {}, {} channels, layers {:?}",
        resolved.faa.r,
        resolved.faa.d_rff,
        resolved.faa.num_grids,
        resolved.faa.insertion_layers
    );
    println!(
        "task             t {}, {} classes, {} train / {} eval samples",
        resolved.task.t,
        resolved.task.n_classes,
        resolved.task.train_samples,
        resolved.task.eval_samples
    );
    println!(
        "parameters       {trainable} trainable of {total} ({:.2}%)",
        100.0 * trainable as f64 / total as f64
    );
    println!("planned steps    {steps}");
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
struct TrainRunReport {
    config_hash: String,
    seed: u64,
    trainable_params: usize,
    total_params: usize,
    trainable_fraction: f64,
    training: TrainReport,
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    let resolved = resolve(cfg)?;
    prepare_out_dir(out, &["train_report.json", "model.json", "frequency_report.csv"], force)?;
    let data = make_synthetic_task(&resolved.task, resolved.seed).map_err(CliError::Usage)?;
    let mut model = Model::init(resolved.faa.clone(), resolved.encoder.clone(), AdapterKind::Faa)
        .map_err(CliError::Usage)?;
    let report = train(&mut model, &data, &resolved.train, resolved.seed).map_err(map_train_err)?;

    for e in &report.epochs {
        let gate = e.mean_gate.map(|g| format!("  gate {g:.4}")).unwrap_or_default();
        println!(
            "epoch {:>3}  loss {:.6}  train_acc {:.4}  eval_acc {:.4}{gate}",
            e.epoch, e.mean_loss, e.train_accuracy, e.eval_accuracy
        );
    }

    let run_report = TrainRunReport {
        config_hash: run_hash(&resolved),
        seed: resolved.seed,
        trainable_params: model.trainable_param_count(),
        total_params: model.param_count(),
        trainable_fraction: model.trainable_param_count() as f64 / model.param_count() as f64,
        training: report,
    };
    let json = serde_json::to_string_pretty(&run_report)
        .map_err(|e| CliError::Numerical(format!("cannot serialize report: {e}")))?;
    write_text(&out.join("train_report.json"), &json)?;
    save_model(&out.join("model.json"), &model).map_err(map_checkpoint_err)?;

    let freq = frequency_report(&model, &data.eval, resolved.task.t);
    if !freq.rows.is_empty() {
        write_text(&out.join("frequency_report.csv"), &freq.to_csv())?;
    }
    println!(
        "trained {} of {} parameters ({:.2}%); reports in {}",
        run_report.trainable_params,
        run_report.total_params,
        100.0 * run_report.trainable_fraction,
        out.display()
    );
    Ok(())
}

// ── gradcheck ────────────────────────────────────────────────────────────

pub struct GradcheckArgs {
    pub samples: usize,
    pub tol: f64,
    pub step: f64,
    pub warm_steps: usize,
    pub corrupt: Option<String>,
}

pub fn cmd_gradcheck(cfg: &RunConfig, args: &GradcheckArgs) -> Result<(), CliError> {
    let resolved = resolve(cfg)?;
    if args.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    let positive = |v: f64| v.is_finite() && v > 0.0;
    if !positive(args.tol) || !positive(args.step) {
        return Err(CliError::Usage("--tol and --step must be positive".into()));
    }
    let data = make_synthetic_task(&resolved.task, resolved.seed).map_err(CliError::Usage)?;
    let mut model = Model::init(resolved.faa.clone(), resolved.encoder.clone(), AdapterKind::Faa)
        .map_err(CliError::Usage)?;
    if args.warm_steps > 0 {
        // A few real steps move the fusion scales off their zero init, so
        // every adapter group sees a nonzero task gradient during the check.
        let bs = resolved.train.batch_size.min(data.train.len()).max(1);
        let take = (bs * args.warm_steps).min(data.train.len());
        let warm_data = faa_core::Dataset {
            train: data.train[..take].to_vec(),
            ..data.clone()
        };
        let warm_cfg = faa_core::TrainConfig {
            epochs: 1,
            batch_size: bs,
            ..resolved.train.clone()
        };
        train(&mut model, &warm_data, &warm_cfg, resolved.seed).map_err(map_train_err)?;
    }
    if let Some(name) = &args.corrupt {
        if !model.trainable_values().contains_key(name) {
            return Err(CliError::Usage(format!(
                "--corrupt target {name} is not a trainable parameter"
            )));
        }
    }
    let n = args.samples.min(data.train.len());
    let reg = RegWeights::new(resolved.faa.lambda1, resolved.faa.lambda2);
    let checks = gradcheck_model(
        &model,
        &data.train[..n],
        resolved.task.t,
        reg,
        args.step,
        args.corrupt.as_deref(),
    )
    .map_err(|e| CliError::Gradcheck(format!("finite-difference oracle failed: {e}")))?;

    let mut failed = 0usize;
    let mut worst: f64 = 0.0;
    for c in &checks {
        let ok = c.passes(args.tol);
        if !ok {
            failed += 1;
        }
        worst = worst.max(c.max_rel_err);
        println!(
            "{:<34} len {:>5}  max_rel_err {:.3e}  {}",
            c.group,
            c.len,
            c.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!(
        "gradcheck: {} groups, worst max_rel_err {worst:.3e}, tolerance {:.1e}",
        checks.len(),
        args.tol
    );
    if failed > 0 {
        return Err(CliError::Gradcheck(format!(
            "{failed} of {} parameter groups exceed tolerance {:.1e} (worst {worst:.3e})",
            checks.len(),
            args.tol
        )));
    }
    Ok(())
}

// ── ablate ───────────────────────────────────────────────────────────────

pub fn parse_seed_list(text: &str) -> Result<Vec<u64>, CliError> {
    let seeds: Result<Vec<u64>, _> =
        text.split(',').map(|s| s.trim().parse::<u64>()).collect();
    let seeds =
        seeds.map_err(|_| CliError::Usage(format!("bad --seeds list {text:?}")))?;
    if seeds.is_empty() {
        return Err(CliError::Usage("--seeds must name at least one seed".into()));
    }
    Ok(seeds)
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    out: &Path,
    force: bool,
    variant_names: &[String],
    seeds: &str,
) -> Result<(), CliError> {
    let resolved = resolve(cfg)?;
    let seeds = parse_seed_list(seeds)?;
    let variants: Vec<Variant> = if variant_names.is_empty() {
        Variant::default_study()
    } else {
        variant_names
            .iter()
            .map(|n| Variant::parse(n).map_err(CliError::Usage))
            .collect::<Result<_, _>>()?
    };
    prepare_out_dir(out, &["ablation.csv"], force)?;
    let data = make_synthetic_task(&resolved.task, resolved.seed).map_err(CliError::Usage)?;
    let study = ablation_study(
        &variants,
        &seeds,
        &resolved.faa,
        &resolved.encoder,
        &data,
        &resolved.train,
    )
    .map_err(map_train_err)?;

    print!("{}", render_study(&study, &variants));
    write_text(&out.join("ablation.csv"), &study.to_csv())?;
    println!("study written to {}", out.join("ablation.csv").display());
    Ok(())
}

fn render_study(study: &AblationStudy, variants: &[Variant]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<26} {:>6} {:>10} {:>12} {:>10}",
        "variant", "seed", "trainable", "final_loss", "eval_acc"
    );
    for r in &study.rows {
        let _ = writeln!(
            out,
            "{:<26} {:>6} {:>10} {:>12.6} {:>10.4}",
            r.variant, r.seed, r.trainable_params, r.final_train_loss, r.eval_accuracy
        );
    }
    for v in variants {
        if let Some(m) = study.median_accuracy(&v.name()) {
            let _ = writeln!(out, "median eval_acc {:<26} {m:.4}", v.name());
        }
    }
    out
}

// ── analyze ──────────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
struct AnalysisReport {
    checkpoint: String,
    config_hash: String,
    eval_accuracy: f64,
    trainable_params: usize,
    total_params: usize,
    gated_layers: usize,
}

pub fn cmd_analyze(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    force: bool,
) -> Result<(), CliError> {
    let resolved = resolve(cfg)?;
    let model = load_model(checkpoint).map_err(map_checkpoint_err)?;
    if model.faa.d_model != resolved.task.d_model {
        return Err(CliError::Usage(format!(
            "checkpoint width {} does not match configured width {}",
            model.faa.d_model, resolved.task.d_model
        )));
    }
    if model.encoder.n_classes != resolved.task.n_classes {
        return Err(CliError::Usage(format!(
            "checkpoint head has {} classes but the task has {}",
            model.encoder.n_classes, resolved.task.n_classes
        )));
    }
    prepare_out_dir(out, &["analysis.json", "frequency_report.csv"], force)?;
    let data = make_synthetic_task(&resolved.task, resolved.seed).map_err(CliError::Usage)?;
    let accuracy = evaluate_accuracy(&model, &data.eval, resolved.task.t);
    let freq = frequency_report(&model, &data.eval, resolved.task.t);
    let report = AnalysisReport {
        checkpoint: checkpoint.display().to_string(),
        config_hash: run_hash(&resolved),
        eval_accuracy: accuracy,
        trainable_params: model.trainable_param_count(),
        total_params: model.param_count(),
        gated_layers: freq.rows.len(),
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Numerical(format!("cannot serialize report: {e}")))?;
    write_text(&out.join("analysis.json"), &json)?;
    if freq.rows.is_empty() {
        println!("model has no gated adapter layers; skipping frequency report");
    } else {
        print!("{}", freq.to_csv());
        write_text(&out.join("frequency_report.csv"), &freq.to_csv())?;
    }
    println!("eval accuracy {accuracy:.4}; analysis in {}", out.display());
    Ok(())
}
