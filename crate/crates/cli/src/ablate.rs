//! Train/evaluate variants of the base configuration over several seeds.

use std::fmt::Write as _;
use std::fs;
use std::str::FromStr;
use std::time::Instant;

use tempodet_core::evalmap::EvalConfig;
use tempodet_core::net3d::io::save_model;
use tempodet_core::postproc::write_detections;
use tempodet_core::synthvid::Dataset;
use tempodet_core::trainer::{log_to_csv, BalanceMode};

use crate::commands::{detect_dataset, evaluate_dataset, prior_from, train_model};
use crate::config::RunConfig;
use crate::{AblateArgs, CliError};

/// tIoU thresholds reported for every run.
pub const REPORT_TIOU: [f64; 2] = [0.2, 0.5];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    Full,
    NoProposal,
    NoRegression,
    Fc8Only,
    Shear(f64),
    Balance(BalanceMode),
}

impl FromStr for Variant {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Config(format!("unknown variant `{s}`"));
        Ok(match s {
            "full" => Variant::Full,
            "no-proposal" => Variant::NoProposal,
            "no-regression" => Variant::NoRegression,
            "fc8-only" => Variant::Fc8Only,
            "balance:categorization" => Variant::Balance(BalanceMode::Categorization),
            "balance:proposal" => Variant::Balance(BalanceMode::Proposal),
            _ => match s.strip_prefix("shear:") {
                Some(deg) => {
                    let deg: f64 = deg.parse().map_err(|_| bad())?;
                    if !(deg >= 0.0 && deg < 90.0) {
                        return Err(bad());
                    }
                    Variant::Shear(deg)
                }
                None => return Err(bad()),
            },
        })
    }
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::NoProposal => "no-proposal".into(),
            Variant::NoRegression => "no-regression".into(),
            Variant::Fc8Only => "fc8-only".into(),
            Variant::Shear(d) => format!("shear:{d}"),
            Variant::Balance(BalanceMode::Categorization) => "balance:categorization".into(),
            Variant::Balance(BalanceMode::Proposal) => "balance:proposal".into(),
        }
    }

    /// Rewrites the configuration for this variant.
    pub fn apply(&self, cfg: &mut RunConfig) {
        match *self {
            Variant::Full => {}
            Variant::NoProposal => {
                cfg.train.loss_weights[0] = 0.0;
                cfg.postproc.alpha = 0.0;
            }
            Variant::NoRegression => {
                cfg.train.loss_weights[4] = 0.0;
                cfg.postproc.use_actionness = false;
            }
            Variant::Fc8Only => {
                cfg.train.loss_weights = [0.0, 1.0, 0.0, 0.0, 0.0];
                cfg.postproc.alpha = 0.0;
                cfg.postproc.use_actionness = false;
            }
            Variant::Shear(deg) => cfg.augment.shear_max_deg = deg,
            Variant::Balance(mode) => cfg.train.balance_mode = mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub map: [f64; 2],
    /// Wall-clock time of training plus detection.
    pub seconds: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => (values[n / 2 - 1] + values[n / 2]) / 2.0,
    }
}

/// Per-seed rows followed by one `median` row per variant.
pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,seed,mAP@0.2,mAP@0.5,seconds\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.1}",
            r.variant, r.seed, r.map[0], r.map[1], r.seconds
        );
    }
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    for name in names {
        let of = |f: &dyn Fn(&AblationRow) -> f64| {
            let mut v: Vec<f64> = rows.iter().filter(|r| r.variant == name).map(f).collect();
            median(&mut v)
        };
        let _ = writeln!(
            out,
            "{name},median,{},{},{:.1}",
            of(&|r| r.map[0]),
            of(&|r| r.map[1]),
            of(&|r| r.seconds)
        );
    }
    out
}

pub fn run(args: &AblateArgs) -> Result<(), CliError> {
    let variants = args
        .variants
        .iter()
        .map(|v| v.parse())
        .collect::<Result<Vec<Variant>, _>>()?;
    if args.seeds.is_empty() {
        return Err(CliError::Config("--seeds is empty".into()));
    }
    let base = RunConfig::load_or_default(args.config.as_deref())?;
    let train_data = Dataset::load(&args.data)?;
    let test_data = Dataset::load(&args.test_data)?;
    if let Some(dir) = &args.work_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    }
    let eval = EvalConfig {
        tiou_thresholds: REPORT_TIOU.to_vec(),
    };
    let mut rows = Vec::new();
    for variant in &variants {
        for &seed in &args.seeds {
            let mut cfg = base.clone();
            variant.apply(&mut cfg);
            cfg.train.seed = seed;
            let start = Instant::now();
            let (arch, outcome) = train_model(&train_data, &cfg)?;
            let prior = cfg
                .postproc
                .duration_prior_enabled
                .then(|| prior_from(&train_data, &cfg));
            let dets = detect_dataset(&outcome.params, &arch, &test_data, &cfg, prior.as_ref())?;
            let report = evaluate_dataset(&dets, &test_data, &eval)?;
            let row = AblationRow {
                variant: variant.name(),
                seed,
                map: [report.map[0], report.map[1]],
                seconds: start.elapsed().as_secs_f64(),
            };
            eprintln!(
                "{} seed {seed}: mAP@0.2 {:.4} mAP@0.5 {:.4} ({:.0}s)",
                row.variant, row.map[0], row.map[1], row.seconds
            );
            if let Some(dir) = &args.work_dir {
                let stem = format!("{}_s{seed}", row.variant.replace(':', "_"));
                save_model(&outcome.params, &arch, &dir.join(format!("{stem}.tdmdl")))?;
                let log = dir.join(format!("{stem}.log.csv"));
                fs::write(&log, log_to_csv(&outcome.log))
                    .map_err(|e| CliError::Config(format!("{}: {e}", log.display())))?;
                write_detections(&dir.join(format!("{stem}.dets.json")), &dets)?;
            }
            rows.push(row);
        }
    }
    let csv = to_csv(&rows);
    fs::write(&args.out, &csv).map_err(|e| CliError::Config(format!("{}: {e}", args.out.display())))?;
    print!("{csv}");
    Ok(())
}
