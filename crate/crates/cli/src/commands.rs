use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use asf_core::analysis::{collect_alpha, emit_report, render_report};
use asf_core::model::{Checkpoint, ComplexityReport, Model, ModelConfig};
use asf_core::train::{evaluate, load_cifar10, synthetic_records, train, Dataset, Outputs, TrainConfig, SIDE};
use asf_core::verify::{run_suite, Precision, SuiteOptions};

use crate::{Command, DataArgs, ModelArgs, OverrideArgs, TrainArgs, UsageError, Variant, DATA_ENV};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Describe { model, json } => describe(&model, json),
        Command::Gradcheck { f64, seed, coords_per_tensor, inject_fault } => {
            let precision = if f64 { Precision::F64 } else { Precision::F32 };
            gradcheck(SuiteOptions { precision, seed, model_coords_per_tensor: coords_per_tensor as usize, inject_fault })
        }
        Command::Train(args) => train_cmd(&args),
        Command::Eval { data, checkpoint, variant, overrides, ema, batch_size } => {
            let expected = match variant {
                Some(v) => Some(model_config(v, &overrides)?),
                None if !overrides.is_empty() => return Err(usage("--branch/--fusion/--shortcut need --variant")),
                None => None,
            };
            let data = load_data(&data)?;
            let mut model = load_model(&checkpoint, expected.as_ref(), ema)?;
            let acc = evaluate(&mut model, &data, batch_size as usize)?;
            println!("model {}", model.config().tag());
            println!("samples {}", data.len());
            println!("top1 {:.4}", acc.top1);
            println!("top5 {:.4}", acc.top5);
            Ok(ExitCode::SUCCESS)
        }
        Command::AnalyzeAlpha { data, checkpoint, depth, report, ema, batch_size } => {
            let data = load_data(&data)?;
            let mut model = load_model(&checkpoint, None, ema)?;
            let sites = model.config().num_fusion_sites();
            if depth == 0 || depth > sites {
                return Err(usage(format!("--depth {depth} outside 1..={sites} for {}", model.config().tag())));
            }
            let stats = collect_alpha(&mut model, &data, batch_size as usize)?;
            match report {
                Some(path) => {
                    emit_report(&stats, depth, &path)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{}", render_report(&stats, depth)?),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn model_config(variant: Variant, overrides: &OverrideArgs) -> Result<ModelConfig> {
    overrides.resolve().apply(variant.config()).map_err(|e| usage(e.to_string()))
}

fn describe(args: &ModelArgs, json: bool) -> Result<ExitCode> {
    let cfg = model_config(args.variant, &args.overrides)?;
    let model = Model::<f32>::describe_only(&cfg)?;
    let report = ComplexityReport::of(&model.arch, &model.params);
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.render());
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(opts: SuiteOptions) -> Result<ExitCode> {
    let p = opts.precision;
    println!("gradient check in {} (tolerance {:.0e}, step {:.0e})", p.name(), p.tolerance().rel_tol, p.tolerance().step);
    let results = run_suite(&opts, |r| {
        println!(
            "{} {:<40} checked {:>4}  over {:>4}  max_rel {:.2e}  max_abs {:.2e}  worst {}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.checked,
            r.failing,
            r.max_rel_error,
            r.max_abs_error,
            r.worst
        );
    })?;
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {} failed", results.len(), failed);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn load_data(args: &DataArgs) -> Result<Dataset> {
    let data = match (&args.data, args.synthetic) {
        (Some(path), _) => load_cifar10(path).with_context(|| format!("reading {}", path.display()))?,
        (None, Some(n)) => Dataset::from_records(&synthetic_records(n as usize, 10, args.data_seed), 10),
        (None, None) => match std::env::var_os(DATA_ENV) {
            Some(dir) => {
                let path = PathBuf::from(dir);
                load_cifar10(&path).with_context(|| format!("reading {} (from {DATA_ENV})", path.display()))?
            }
            None => return Err(usage(format!("no data: pass --data PATH, --synthetic N, or set {DATA_ENV}"))),
        },
    };
    Ok(match args.limit {
        Some(n) => data.take(n as usize),
        None => data,
    })
}

fn load_model(path: &Path, expected: Option<&ModelConfig>, ema: bool) -> Result<Model<f32>> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ck.model(expected, ema)?)
}

fn train_cmd(args: &TrainArgs) -> Result<ExitCode> {
    let cfg = model_config(args.variant, &args.overrides)?;
    if cfg.image_size != SIDE {
        return Err(usage(format!("variant {} expects {}x{} inputs; training runs on 32x32 CIFAR images (use --variant tiny)", cfg.variant, cfg.image_size, cfg.image_size)));
    }
    let tc = TrainConfig {
        lr: args.lr,
        weight_decay: args.weight_decay,
        epochs: args.epochs,
        batch_size: args.batch_size as usize,
        ema_decay: args.ema_decay,
        warmup_epochs: args.warmup_epochs,
        seed: args.seed,
        augment: !args.no_augment,
    };
    tc.validate().map_err(|e| usage(e.to_string()))?;
    let data = load_data(&args.data)?;
    let mut model = Model::<f32>::init(&cfg, args.seed)?;
    println!("training {} on {} images for {} epochs", cfg.tag(), data.len(), tc.epochs);
    let outputs = Outputs { checkpoint: Some(args.checkpoint.clone()), metrics_log: args.log.clone() };
    train(&mut model, &data, &tc, &outputs, |m| println!("{m}"))?;
    println!("wrote {}", args.checkpoint.display());
    Ok(ExitCode::SUCCESS)
}
