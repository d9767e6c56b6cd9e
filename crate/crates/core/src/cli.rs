//! The command-line interface: train, eval, analyze, gradcheck, selftest.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime
//! failure, 3 verification failure. Commands write only into their `--out`
//! directory, and identical inputs produce byte-identical outputs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::evaluation::{coco_ap, correlation_report, APReport, ImageEval};
use crate::geometry::generate_anchors;
use crate::model::CascadeModel;
use crate::numerics::checkpoint;
use crate::pipeline::config::TrainConfig;
use crate::pipeline::infer::{detect, InferConfig};
use crate::pipeline::train::{init_model, train_with_progress, val_set};
use crate::verify;

const EXIT_OK: i32 = 0;
const EXIT_USAGE: i32 = 1;
const EXIT_RUNTIME: i32 = 2;
const EXIT_VERIFY: i32 = 3;

const DEFAULT_GRADCHECK_SEED: u64 = 2024;

#[derive(Parser)]
#[command(name = "cascadet", about = "Cascaded single-stage detector on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector; writes checkpoint.txt and metrics.csv to --out.
    Train {
        /// Config file (`key = value` lines).
        #[arg(long)]
        config: PathBuf,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the held-out scenes; prints an AP table
    /// and writes ap.csv to --out.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Confidence-vs-IoU correlation per stage; writes one CSV per stage
    /// to --out.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference checks of every differentiable operation.
    Gradcheck {
        /// Base seed for the random instances.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Oracle comparisons: NMS, assignment, AP, box algebra, alignment.
    Selftest,
}

/// Parse arguments, dispatch, and translate errors into exit codes.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too; they are not failures.
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, &out, seed),
        Command::Eval { config, checkpoint, out, seed } => {
            cmd_eval(&config, &checkpoint, &out, seed)
        }
        Command::Analyze { config, checkpoint, out, seed } => {
            cmd_analyze(&config, &checkpoint, &out, seed)
        }
        Command::Gradcheck { seed } => cmd_gradcheck(seed.unwrap_or(DEFAULT_GRADCHECK_SEED)),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Verification(_) => EXIT_VERIFY,
        _ => EXIT_RUNTIME,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let outcome = train_with_progress(&cfg, |epoch, rows| {
        let r = rows.last().expect("every epoch has stage rows");
        println!(
            "epoch {epoch:>3}: train total {:.4}, val ap {:.4}",
            r.total, r.val_ap
        );
    })?;
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.csv"), outcome.metrics_csv())?;
    checkpoint::save(&outcome.model.params, &out.join("checkpoint.txt"))?;
    println!(
        "done: final val ap {:.4}; wrote {}",
        outcome.final_val_ap,
        out.display()
    );
    Ok(())
}

/// Rebuild the architecture for `cfg` and restore a checkpoint over it.
fn load_model(cfg: &TrainConfig, ckpt: &Path) -> Result<CascadeModel> {
    let mut model = init_model(cfg)?;
    let loaded = checkpoint::load(ckpt)?;
    checkpoint::apply(&mut model.params, &loaded)?;
    Ok(model)
}

/// The five per-threshold columns reported alongside the overall mean.
const AP_TABLE_THRESHOLDS: [(f64, &str); 5] = [
    (0.5, "ap50"),
    (0.6, "ap60"),
    (0.7, "ap70"),
    (0.8, "ap80"),
    (0.9, "ap90"),
];

fn ap_table(report: &APReport) -> String {
    let mut header = format!("{:>8}", "ap");
    let mut values = format!("{:>8.4}", report.ap);
    for (thr, name) in AP_TABLE_THRESHOLDS {
        header.push_str(&format!("{name:>8}"));
        values.push_str(&format!("{:>8.4}", report.ap_at(thr).unwrap_or(0.0)));
    }
    format!("{header}\n{values}\n")
}

fn ap_csv(report: &APReport) -> String {
    let mut header = String::from("ap");
    let mut values = report.ap.to_string();
    for (thr, name) in AP_TABLE_THRESHOLDS {
        header.push(',');
        header.push_str(name);
        values.push(',');
        values.push_str(&report.ap_at(thr).unwrap_or(0.0).to_string());
    }
    format!("{header}\n{values}\n")
}

fn evaluate_checkpoint(cfg: &TrainConfig, ckpt: &Path) -> Result<APReport> {
    let model = load_model(cfg, ckpt)?;
    let anchors = generate_anchors((cfg.image_size, cfg.image_size), &cfg.anchor_spec)?;
    let infer_cfg = InferConfig::from(cfg);
    let mut per_image: Vec<ImageEval> = Vec::with_capacity(cfg.val_scenes);
    for scene in val_set(cfg) {
        let dets = detect(&model, &scene.image, &anchors, &infer_cfg)?;
        per_image.push((dets, scene.gts));
    }
    Ok(coco_ap(&per_image))
}

fn cmd_eval(config: &Path, ckpt: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let report = evaluate_checkpoint(&cfg, ckpt)?;
    print!("{}", ap_table(&report));
    fs::create_dir_all(out)?;
    fs::write(out.join("ap.csv"), ap_csv(&report))?;
    Ok(())
}

fn cmd_analyze(config: &Path, ckpt: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let model = load_model(&cfg, ckpt)?;
    let anchors = generate_anchors((cfg.image_size, cfg.image_size), &cfg.anchor_spec)?;
    let scenes = val_set(&cfg);
    let report = correlation_report(&model, &scenes, &anchors, cfg.score_threshold)?;
    fs::create_dir_all(out)?;
    for (i, stage) in report.stages.iter().enumerate() {
        let stage_num = i + 1;
        let mut csv = String::from("stage,confidence,iou\n");
        for (conf, overlap) in &stage.pairs {
            csv.push_str(&format!("{stage_num},{conf},{overlap}\n"));
        }
        fs::write(out.join(format!("correlation_stage{stage_num}.csv")), csv)?;
        let mut flags = String::new();
        if stage.degenerate {
            flags.push_str(" [degenerate]");
        }
        if stage.low_sample {
            flags.push_str(" [low sample]");
        }
        println!(
            "stage {stage_num}: pearson r {:.4} over {} pairs{flags}",
            stage.pearson_r,
            stage.pairs.len()
        );
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let reports = verify::gradcheck_suite(
        seed,
        verify::GRADCHECK_INSTANCES,
        verify::GRADCHECK_TOLERANCE,
    )?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "{failed} of {} operations failed the gradient check",
            reports.len()
        )))
    }
}

fn cmd_selftest() -> Result<()> {
    verify::selftest(|line| println!("{line}"))?;
    println!("selftest: all checks passed");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_kinds_map_to_documented_exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::Verification("x".into())), 3);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), 2);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 2);
    }

    #[test]
    fn ap_table_lists_overall_then_per_threshold_columns() {
        let report = APReport {
            ap: 0.5,
            per_threshold: crate::evaluation::AP_THRESHOLDS
                .iter()
                .map(|&t| (t, t))
                .collect(),
        };
        let table = ap_table(&report);
        let mut lines = table.lines();
        let header = lines.next().unwrap();
        let values = lines.next().unwrap();
        assert_eq!(
            header.split_whitespace().collect::<Vec<_>>(),
            ["ap", "ap50", "ap60", "ap70", "ap80", "ap90"]
        );
        assert_eq!(
            values.split_whitespace().collect::<Vec<_>>(),
            ["0.5000", "0.5000", "0.6000", "0.7000", "0.8000", "0.9000"]
        );
        let csv = ap_csv(&report);
        assert_eq!(csv.lines().next().unwrap(), "ap,ap50,ap60,ap70,ap80,ap90");
        assert_eq!(csv.lines().nth(1).unwrap(), "0.5,0.5,0.6,0.7,0.8,0.9");
    }
}
