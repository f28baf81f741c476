use std::fs;
use std::path::Path;
use std::time::Instant;

use tempodet_core::error::Error;
use tempodet_core::evalmap::{evaluate, ground_truth_from_records, EvalConfig, EvalReport};
use tempodet_core::gradcheck::{format_table, run_gradcheck, Fault, GradcheckConfig};
use tempodet_core::net3d::io::{load_model, save_model};
use tempodet_core::net3d::model::{ArchConfig, NetParams};
use tempodet_core::pipeline::{detect_videos, Inference};
use tempodet_core::postproc::{read_detections, write_detections, Detection, DurationPrior};
use tempodet_core::synthvid::{write_dataset, Dataset};
use tempodet_core::trainer::{log_to_csv, train as run_training, TrainInputs, TrainOutcome};

use crate::config::RunConfig;
use crate::{CliError, DetectArgs, EvalArgs, GenArgs, GradcheckArgs, TrainArgs};

pub fn gen(args: &GenArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let mut spec = cfg.dataset.unwrap_or_default();
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.num_videos {
        spec.num_videos = n;
    }
    spec.validate()?;
    let data = Dataset::generate(&spec)?;
    write_dataset(&args.out, &spec, &data.records, &data.frames)?;
    eprintln!("wrote {} videos to {}", data.len(), args.out.display());
    Ok(())
}

/// Trains on `data` with every section of `cfg`.
pub fn train_model(data: &Dataset, cfg: &RunConfig) -> Result<(ArchConfig, TrainOutcome), CliError> {
    let arch = cfg.arch.resolve(data.spec.num_classes)?;
    let inputs = TrainInputs {
        dataset: data,
        windows: &cfg.windows,
        augment: &cfg.augment,
        arch: &arch,
        postproc: &cfg.postproc,
    };
    let outcome = run_training(&inputs, &cfg.train)?;
    Ok((arch, outcome))
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let data = Dataset::load(&args.data)?;
    let start = Instant::now();
    let (arch, outcome) = train_model(&data, &cfg)?;
    save_model(&outcome.params, &arch, &args.out_model)?;
    fs::write(&args.log, log_to_csv(&outcome.log)).map_err(|e| io_error(&args.log, e))?;
    let last = outcome.log.last().map_or(String::from("n/a"), |r| r.fused.to_string());
    eprintln!(
        "trained {} iterations in {:.1}s; last logged fused loss {last}",
        outcome.iterations,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Duration prior from the annotations of a training dataset.
pub fn prior_from(train: &Dataset, cfg: &RunConfig) -> DurationPrior {
    DurationPrior::from_instances(
        train.records.iter().flat_map(|r| &r.instances),
        train.spec.num_classes,
        &cfg.windows.lengths,
        cfg.postproc.prior_smoothing,
    )
}

pub fn detect_dataset(
    params: &NetParams,
    arch: &ArchConfig,
    data: &Dataset,
    cfg: &RunConfig,
    prior: Option<&DurationPrior>,
) -> Result<Vec<Detection>, CliError> {
    if arch.num_action_classes != data.spec.num_classes {
        return Err(CliError::Core(Error::ModelFormat(format!(
            "model predicts {} classes, dataset has {}",
            arch.num_action_classes, data.spec.num_classes
        ))));
    }
    let inf = Inference {
        params,
        arch,
        windows: &cfg.windows,
        augment: &cfg.augment,
        postproc: &cfg.postproc,
        prior,
    };
    Ok(detect_videos(&inf, &data.records, &data.frames)?)
}

pub fn detect(args: &DetectArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let (arch, params) = load_model(&args.model)?;
    let data = Dataset::load(&args.data)?;
    let prior = match (&args.train_data, cfg.postproc.duration_prior_enabled) {
        (Some(dir), true) => Some(prior_from(&Dataset::load(dir)?, &cfg)),
        (None, true) => {
            return Err(CliError::Config(
                "postproc.duration_prior_enabled needs --train-data".into(),
            ))
        }
        (_, false) => None,
    };
    let dets = detect_dataset(&params, &arch, &data, &cfg, prior.as_ref())?;
    write_detections(&args.out, &dets)?;
    eprintln!("wrote {} detections for {} videos", dets.len(), data.len());
    Ok(())
}

pub fn evaluate_dataset(
    dets: &[Detection],
    data: &Dataset,
    eval: &EvalConfig,
) -> Result<EvalReport, CliError> {
    Ok(evaluate(
        dets,
        &ground_truth_from_records(&data.records),
        data.spec.num_classes,
        eval,
    )?)
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    if let Some(t) = &args.tiou {
        cfg.eval.tiou_thresholds = t.clone();
        cfg.eval.validate()?;
    }
    let data = Dataset::load(&args.data)?;
    let dets = read_detections(&args.det)?;
    let report = evaluate_dataset(&dets, &data, &cfg.eval)?;
    report.write(&args.out)?;
    print!("{}", report.to_csv());
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let cfg = GradcheckConfig {
        seed: args.seed,
        net_coordinates: args.coordinates,
        fault: args.inject_fault.then_some(Fault::ConvBackward),
        ..GradcheckConfig::default()
    };
    let start = Instant::now();
    let rows = run_gradcheck(&cfg)?;
    print!("{}", format_table(&rows, cfg.tolerance));
    println!("elapsed {:.2}s", start.elapsed().as_secs_f64());
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.op).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}
