//! Command-line entry point: fixture generation, phased training, schedule
//! simulation, cost reporting, and gradient verification.
//!
//! Every command is deterministic given (config, seed, checkpoints) at any
//! `--jobs` value, and every output directory receives an echo of the
//! effective configuration.  Exit codes: 0 success, 1 verification failure,
//! 2 usage or configuration error.

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use saccade_core::config::{ConfigError, RunConfig};
use saccade_core::cost::{self, CostError};
use saccade_core::gradcheck::run_registry;
use saccade_core::hallucinator::{
    load_checkpoint, save_checkpoint, CheckpointError, HallucinatorParams,
};
use saccade_core::pipeline::{
    attention_stream, build_cost_table, cost_breakdown_for, evaluate, gen_dataset, load_backbone,
    load_classifier, load_policy, mix, precompute_frames, save_backbone, save_classifier,
    save_policy, train_classifier, train_eval_datasets, train_features, train_hallucinator_phase,
    train_joint, write_fixture, BackboneParams, EvalReport, FixtureError, Modules, PipelineError,
    RunMode, IMAGE_CHANNELS,
};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use thiserror::Error;

const BACKBONE_FILE: &str = "backbone.feat";
const HALLUCINATOR_FILE: &str = "hallucinator.halc";
const CLASSIFIER_FILE: &str = "classifier.clsf";
const POLICY_FILE: &str = "policy.tsmp";
const CONFIG_ECHO: &str = "config.txt";

#[derive(Debug, Error)]
enum CliError {
    /// Bad flags, bad config, missing or mismatched inputs: exit code 2.
    #[error("{0}")]
    Usage(String),
    /// A check the command exists to perform did not hold: exit code 1.
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Verification(_) => 1,
        }
    }
}

macro_rules! usage_from {
    ($($ty:ty),+) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Usage(e.to_string())
            }
        }
    )+};
}
usage_from!(ConfigError, PipelineError, FixtureError, CheckpointError, CostError, std::io::Error);

#[derive(Parser)]
#[command(
    name = "saccade",
    about = "Adaptive spatiotemporal sampling for video recognition at desk scale",
    version
)]
struct Cli {
    /// Key=value config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing); receives the config echo.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for sequence-parallel work; 0 picks the core count.
    /// Results are byte-identical at any value.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic dataset's attention fixtures plus a manifest.
    GenFixtures,
    /// Run one training phase; later phases need earlier checkpoints in the
    /// output directory.
    Train {
        #[arg(long, value_enum)]
        phase: Phase,
    },
    /// Evaluate the trained system frame by frame and write report, trace,
    /// and summary CSVs.
    Simulate {
        #[arg(long, value_enum, default_value_t = Mode::Adaptive)]
        mode: Mode,
        /// Directory holding the checkpoints; defaults to --out.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Emit the per-frame FLOPS decomposition, identity check, scaling
    /// curve, and optional trade-off/speed-up arithmetic.
    CostReport {
        /// Average GFLOPS for the trade-off row (pair with --top1).
        #[arg(long)]
        gflops: Option<f64>,
        /// Top-1 percentage for the trade-off row (pair with --gflops).
        #[arg(long)]
        top1: Option<f64>,
        /// Reference cost for the speed-up row (pair with --model-avg).
        #[arg(long = "ref-avg")]
        ref_avg: Option<f64>,
        /// Model cost for the speed-up row (pair with --ref-avg).
        #[arg(long = "model-avg")]
        model_avg: Option<f64>,
    },
    /// Verify every registered gradient against finite differences.
    Gradcheck {
        /// Bias one op's analytic gradient as a negative control; the run
        /// must then fail.
        #[arg(long)]
        corrupt: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Phase {
    /// Backbone features via frame-level supervision.
    Features,
    /// Attention forecaster on frozen-backbone attention streams.
    Hallucinator,
    /// Three-head classifier over low-res plus region-crop features.
    Spatial,
    /// Joint skip policy and classifier fine-tuning.
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    #[value(name = "always_full")]
    AlwaysFull,
    #[value(name = "adaptive")]
    Adaptive,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = std::env::var("SACCADE_LOG").unwrap_or_else(|_| "warn".to_string());
    if !["error", "warn", "info", "debug"].contains(&level.as_str()) {
        eprintln!("error: SACCADE_LOG must be one of error, warn, info, debug; got {level:?}");
        return ExitCode::from(2);
    }
    env_logger::Builder::new().parse_filters(&level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cli.out)?;
    std::fs::write(cli.out.join(CONFIG_ECHO), cfg.to_text())?;
    match cli.cmd {
        Cmd::GenFixtures => cmd_gen_fixtures(&cfg, &cli.out),
        Cmd::Train { phase } => cmd_train(&cfg, phase, &cli.out),
        Cmd::Simulate { mode, checkpoints } => {
            let ckpt = checkpoints.unwrap_or_else(|| cli.out.clone());
            cmd_simulate(&cfg, mode, &ckpt, &cli.out)
        }
        Cmd::CostReport {
            gflops,
            top1,
            ref_avg,
            model_avg,
        } => cmd_cost_report(&cfg, gflops, top1, ref_avg, model_avg, &cli.out),
        Cmd::Gradcheck { corrupt } => cmd_gradcheck(corrupt.as_deref(), &cli.out),
    }
}

// ---------------------------------------------------------------------------
// gen-fixtures
// ---------------------------------------------------------------------------

fn cmd_gen_fixtures(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    use rayon::prelude::*;
    let fixture_dir = out.join("fixtures");
    std::fs::create_dir_all(&fixture_dir)?;
    let dims = (cfg.image_h, cfg.image_w);
    let dataset = gen_dataset(cfg.n_train, cfg.classes, dims, cfg.t, mix(cfg.seed, 10))?;
    // The same deterministic init the feature phase starts from, so fixtures
    // match what that phase would tap before any training.
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1));
    let backbone = BackboneParams::new(cfg, &mut rng);
    let rel_paths: Vec<String> = (0..dataset.len())
        .map(|i| format!("fixtures/seq_{i:04}.attn"))
        .collect();
    dataset
        .par_iter()
        .zip(&rel_paths)
        .try_for_each(|(seq, rel)| -> Result<(), CliError> {
            let stream = attention_stream(seq, &backbone, cfg.d)?;
            let maps: Vec<_> = stream.into_iter().map(|a| a.data).collect();
            write_fixture(&out.join(rel), &maps)
                .map_err(|e| CliError::Usage(format!("{}: {e}", rel)))?;
            Ok(())
        })?;
    let mut manifest = String::from("seq_id,seed,label,frames,path\n");
    for (i, seq) in dataset.iter().enumerate() {
        writeln!(
            manifest,
            "{i},{},{},{},{}",
            seq.seed,
            seq.label,
            seq.frames.len(),
            rel_paths[i]
        )
        .expect("string write");
    }
    std::fs::write(out.join("manifest.csv"), manifest)?;
    println!("wrote {} fixtures and manifest.csv to {}", dataset.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn require_checkpoint(dir: &Path, file: &str, needed_by: Phase, train_first: Phase) -> Result<PathBuf, CliError> {
    let path = dir.join(file);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "phase order: `{needed_by:?}` needs {file}, which `{train_first:?}` produces; \
             run `train --phase {}` first",
            format!("{train_first:?}").to_lowercase(),
        )));
    }
    Ok(path)
}

fn write_loss_csv(path: &Path, terms: &[(&str, &[f64])]) -> Result<(), CliError> {
    let epochs = terms.first().map(|(_, c)| c.len()).unwrap_or(0);
    debug_assert!(terms.iter().all(|(_, c)| c.len() == epochs));
    let mut body = String::from("epoch,term,value\n");
    for e in 0..epochs {
        for (name, curve) in terms {
            writeln!(body, "{},{name},{}", e + 1, curve[e]).expect("string write");
        }
    }
    std::fs::write(path, body)?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig, phase: Phase, out: &Path) -> Result<(), CliError> {
    let (train_ds, _) = train_eval_datasets(cfg)?;
    let loss_path = out.join("loss.csv");
    match phase {
        Phase::Features => {
            let (backbone, curve) = train_features(&train_ds, cfg)?;
            save_backbone(&out.join(BACKBONE_FILE), &backbone)?;
            write_loss_csv(&loss_path, &[("features", &curve)])?;
        }
        Phase::Hallucinator => {
            let bb = require_checkpoint(out, BACKBONE_FILE, phase, Phase::Features)?;
            let backbone = load_backbone(&bb, cfg)?;
            let (hall, curve) = train_hallucinator_phase(&train_ds, &backbone, cfg)?;
            save_checkpoint(&out.join(HALLUCINATOR_FILE), &hall)?;
            write_loss_csv(&loss_path, &[("belief", &curve)])?;
        }
        Phase::Spatial => {
            let bb = require_checkpoint(out, BACKBONE_FILE, phase, Phase::Features)?;
            let backbone = load_backbone(&bb, cfg)?;
            let frames = precompute_frames(&train_ds, &backbone, cfg)?;
            let (classifier, curve) = train_classifier(&train_ds, &frames, cfg)?;
            save_classifier(&out.join(CLASSIFIER_FILE), &classifier)?;
            write_loss_csv(&loss_path, &[("class", &curve)])?;
        }
        Phase::Temporal => {
            let bb = require_checkpoint(out, BACKBONE_FILE, phase, Phase::Features)?;
            let hc = require_checkpoint(out, HALLUCINATOR_FILE, phase, Phase::Hallucinator)?;
            let cl = require_checkpoint(out, CLASSIFIER_FILE, phase, Phase::Spatial)?;
            let backbone = load_backbone(&bb, cfg)?;
            let hallucinator = load_hallucinator(&hc, cfg)?;
            let mut classifier = load_classifier(&cl, cfg)?;
            let frames = precompute_frames(&train_ds, &backbone, cfg)?;
            let (policy, curves) =
                train_joint(&train_ds, &frames, &hallucinator, &mut classifier, cfg)?;
            save_policy(&out.join(POLICY_FILE), &policy)?;
            // The joint phase keeps training the classifier; persist it.
            save_classifier(&out.join(CLASSIFIER_FILE), &classifier)?;
            write_loss_csv(
                &loss_path,
                &[("class", &curves.class), ("efficiency", &curves.efficiency)],
            )?;
        }
    }
    println!("phase {phase:?} done: checkpoints and loss.csv in {}", out.display());
    Ok(())
}

/// Load the forecaster and verify its dims against the config.
fn load_hallucinator(path: &Path, cfg: &RunConfig) -> Result<HallucinatorParams, CliError> {
    let hall = load_checkpoint(path)?;
    if hall.c_in() != cfg.c_stem || hall.c_h() != cfg.c_hall {
        return Err(CliError::Usage(format!(
            "checkpoint {} holds a {}->{} forecaster but the config asks for {}->{}",
            path.display(),
            hall.c_in(),
            hall.c_h(),
            cfg.c_stem,
            cfg.c_hall,
        )));
    }
    Ok(hall)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(cfg: &RunConfig, mode: Mode, ckpt: &Path, out: &Path) -> Result<(), CliError> {
    let backbone = load_backbone(&existing(ckpt, BACKBONE_FILE)?, cfg)?;
    let classifier = load_classifier(&existing(ckpt, CLASSIFIER_FILE)?, cfg)?;
    let (hallucinator, policy) = match mode {
        Mode::Adaptive => (
            load_hallucinator(&existing(ckpt, HALLUCINATOR_FILE)?, cfg)?,
            Some(load_policy(&existing(ckpt, POLICY_FILE)?, cfg)?),
        ),
        Mode::AlwaysFull => {
            // The forecaster never runs in this mode; use the checkpoint if
            // present so reports stay comparable, zeros otherwise.
            let path = ckpt.join(HALLUCINATOR_FILE);
            let hall = if path.exists() {
                load_hallucinator(&path, cfg)?
            } else {
                HallucinatorParams::zeros(cfg.c_stem, cfg.c_hall)
            };
            (hall, None)
        }
    };
    let modules = Modules {
        backbone,
        hallucinator,
        classifier,
        policy,
    };
    let run_mode = match mode {
        Mode::AlwaysFull => RunMode::AlwaysFull,
        Mode::Adaptive => RunMode::Adaptive,
    };
    let (_, eval_ds) = train_eval_datasets(cfg)?;
    let report = evaluate(&eval_ds, &modules, cfg, &run_mode)?;
    write_report_files(&report, cfg, out)?;
    println!(
        "simulated {} sequences ({:?}): top-1 {}%, top-5 {}%, avg FLOPS/frame {}",
        report.rows.len(),
        mode,
        report.top1,
        report.top5,
        report.stats.avg_flops,
    );
    Ok(())
}

fn existing(dir: &Path, file: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(file);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "missing checkpoint {}; train the corresponding phase first",
            path.display()
        )));
    }
    Ok(path)
}

fn write_report_files(report: &EvalReport, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut rows = String::from("seq_id,frames,n_full,n_pre,n_skip,flops_total,pred,label,correct\n");
    for r in &report.rows {
        writeln!(
            rows,
            "{},{},{},{},{},{},{},{},{}",
            r.seq_id,
            r.frames,
            r.n_full,
            r.n_pre,
            r.n_skip,
            r.flops_total,
            r.pred,
            r.label,
            u8::from(r.correct)
        )
        .expect("string write");
    }
    std::fs::write(out.join("report.csv"), rows)?;

    let mut trace = String::from("seq,t,status,ssim,m_star\n");
    for (seq, rows) in report.traces.iter().enumerate() {
        for row in rows {
            let ssim = row.ssim.map(|s| s.to_string()).unwrap_or_default();
            let m = row.m_star.map(|m| m.to_string()).unwrap_or_default();
            writeln!(trace, "{seq},{},{},{ssim},{m}", row.t, row.status).expect("string write");
        }
    }
    std::fs::write(out.join("trace.csv"), trace)?;

    let cb = cost_breakdown_for(cfg)?;
    let s = &report.stats;
    let mut summary = String::from("metric,value\n");
    for (name, value) in [
        ("sequences", report.rows.len() as f64),
        ("top1_percent", report.top1),
        ("top5_percent", report.top5),
        ("frames", s.frames as f64),
        ("n_full", s.n_full as f64),
        ("n_pre", s.n_pre as f64),
        ("n_skip", s.n_skip as f64),
        ("pct_full", s.pct_full),
        ("pct_pre", s.pct_pre),
        ("pct_skip", s.pct_skip),
        ("total_flops", s.total_flops),
        ("avg_flops_per_frame", s.avg_flops),
        ("o_full", cb.o_full),
        ("o_pre", cb.o_pre),
        ("o_rest", cb.o_rest),
    ] {
        writeln!(summary, "{name},{value}").expect("string write");
    }
    std::fs::write(out.join("summary.csv"), summary)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// cost-report
// ---------------------------------------------------------------------------

fn cmd_cost_report(
    cfg: &RunConfig,
    gflops: Option<f64>,
    top1: Option<f64>,
    ref_avg: Option<f64>,
    model_avg: Option<f64>,
    out: &Path,
) -> Result<(), CliError> {
    let cb = cost_breakdown_for(cfg)?;
    let mut csv = String::from("section,name,value\n");
    for (name, value) in [
        ("first_half", cb.first_half),
        ("hallucinator", cb.hallucinator),
        ("skip_policy", cb.skip_policy),
        ("second_half", cb.second_half),
        ("crops", cb.crops),
        ("classifier", cb.classifier),
        ("o_pre", cb.o_pre),
        ("o_rest", cb.o_rest),
        ("o_full", cb.o_full),
    ] {
        writeln!(csv, "breakdown,{name},{value}").expect("string write");
    }
    writeln!(
        csv,
        "identity,o_full_minus_o_pre_minus_o_rest,{}",
        cb.o_full - cb.o_pre - cb.o_rest
    )
    .expect("string write");
    let table = build_cost_table(cfg)?;
    for (side, flops) in cost::scaling_curve(&table, IMAGE_CHANNELS + 2, &[64, 112, 224])? {
        writeln!(csv, "scaling,side_{side},{flops}").expect("string write");
    }
    match (gflops, top1) {
        (Some(g), Some(t)) => {
            writeln!(csv, "tradeoff,gflops,{g}").expect("string write");
            writeln!(csv, "tradeoff,top1,{t}").expect("string write");
            writeln!(csv, "tradeoff,value,{}", cost::tradeoff(g, t)?).expect("string write");
        }
        (None, None) => {}
        _ => return Err(CliError::Usage("--gflops and --top1 come as a pair".to_string())),
    }
    match (ref_avg, model_avg) {
        (Some(r), Some(m)) => {
            writeln!(csv, "speedup,ref_avg,{r}").expect("string write");
            writeln!(csv, "speedup,model_avg,{m}").expect("string write");
            writeln!(csv, "speedup,value,{}", cost::speedup(r, m)?).expect("string write");
        }
        (None, None) => {}
        _ => {
            return Err(CliError::Usage(
                "--ref-avg and --model-avg come as a pair".to_string(),
            ))
        }
    }
    std::fs::write(out.join("cost_report.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

fn cmd_gradcheck(corrupt: Option<&str>, out: &Path) -> Result<(), CliError> {
    let reports = run_registry(corrupt);
    if let Some(op) = corrupt {
        if !reports.iter().any(|r| r.op == op) {
            return Err(CliError::Usage(format!(
                "--corrupt names no registered op: {op:?} (have: {})",
                reports.iter().map(|r| r.op.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }
    }
    let mut csv = String::from("op,max_rel_err,threshold,verdict\n");
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.pass { "PASS" } else { "FAIL" };
        writeln!(csv, "{},{:.3e},{:.1e},{verdict}", r.op, r.max_rel_err, r.threshold)
            .expect("string write");
        if !r.pass {
            failed.push(r.op.clone());
        }
    }
    std::fs::write(out.join("gradcheck.csv"), &csv)?;
    print!("{csv}");
    if !failed.is_empty() {
        return Err(CliError::Verification(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}
