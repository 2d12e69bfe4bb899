//! `dbres`: command line driver for the nodule segmentation pipeline.
//!
//! Every subcommand resolves one pipeline configuration (optional file plus
//! `--set` overrides on top of the built-in defaults) and prints it before
//! doing any work, so a run can be reproduced from its log alone. Exit codes:
//! 0 success, 2 configuration or usage error, 3 i/o error, 4 numerical error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dbres_core::config::{ConfigError, PipelineConfig};
use dbres_core::evaluator::{evaluate_set, histogram_csv, EvalCase};
use dbres_core::net::load_checkpoint;
use dbres_core::pipeline::{
    self, DatasetManifest, FailureKind, LoadedCase, PipelineError, TrainOptions,
};
use dbres_core::sampler::SampleLabel;
use dbres_core::segmenter::SeedBox;
use dbres_core::volume::{load_mask, load_volume, save_mask, BinaryMask3D};

#[derive(Parser)]
#[command(
    name = "dbres",
    version,
    about = "Lung nodule segmentation with a dual-branch residual network"
)]
struct Cli {
    /// Pipeline configuration file (JSON). Built-in defaults when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config field by dotted path, e.g. trainer.max_epochs=5.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic phantom dataset commands.
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Ground truth commands.
    #[command(subcommand)]
    Gt(GtCmd),
    /// Patch sampling commands.
    #[command(subcommand)]
    Sample(SampleCmd),
    /// Train the network on a phantom dataset.
    Train(TrainArgs),
    /// Segment one volume from a seed box using a saved checkpoint.
    Segment(SegmentArgs),
    /// Score predicted masks against reference masks.
    Evaluate(EvaluateArgs),
    /// Build the full evaluation report for a dataset and its predictions.
    Report(ReportArgs),
    /// Train and score every configured component combination.
    Ablate(AblateArgs),
}

#[derive(Subcommand)]
enum PhantomCmd {
    /// Generate the configured dataset into a directory.
    Generate {
        /// Dataset output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum GtCmd {
    /// Write each case's rater consensus mask next to its stored truth.
    Consensus {
        /// Dataset manifest (manifest.json).
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
    },
}

#[derive(Subcommand)]
enum SampleCmd {
    /// Plan the training samples for a dataset and save the manifest.
    Plan {
        /// Dataset manifest (manifest.json).
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Output sample manifest (TSV).
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (manifest.json).
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Directory for the checkpoint and training summary.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    /// CT volume header (volume.json).
    #[arg(long, value_name = "FILE")]
    volume: PathBuf,
    /// Trained checkpoint (model.ckpt.json).
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Seed box as slice,row_min,col_min,row_max,col_max.
    #[arg(long, value_name = "BOX")]
    seed: String,
    /// Directory for the mask and propagation trace.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Reference mask header. Repeat once per case, paired with --pred.
    #[arg(long, value_name = "FILE", required = true)]
    truth: Vec<PathBuf>,
    /// Predicted mask header. Repeat once per case, paired with --truth.
    #[arg(long, value_name = "FILE", required = true)]
    pred: Vec<PathBuf>,
    /// Optional output file for the metric report as JSON.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Dataset manifest (manifest.json).
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Directory with one subdirectory per case id, each holding the
    /// mask.json written by `segment`.
    #[arg(long, value_name = "DIR")]
    pred: PathBuf,
    /// Directory for report.txt, report.json and dsc-histogram.csv.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset manifest (manifest.json).
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Directory for per-row artifacts and the final table.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                FailureKind::Config => 2,
                FailureKind::Io => 3,
                FailureKind::Numerical => 4,
            })
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = PipelineConfig::load(cli.config.as_deref(), &cli.set)?;
    println!("resolved config:");
    println!("{}", cfg.resolved_json());
    println!();
    match cli.command {
        Cmd::Phantom(PhantomCmd::Generate { out }) => phantom_generate(&cfg, &out),
        Cmd::Gt(GtCmd::Consensus { data }) => gt_consensus(&data),
        Cmd::Sample(SampleCmd::Plan { data, out }) => sample_plan(&cfg, &data, &out),
        Cmd::Train(args) => train(&cfg, &args),
        Cmd::Segment(args) => segment(&cfg, &args),
        Cmd::Evaluate(args) => evaluate(&args),
        Cmd::Report(args) => report(&cfg, &args),
        Cmd::Ablate(args) => ablate(&cfg, &args),
    }
}

fn phantom_generate(cfg: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    let manifest = pipeline::generate_dataset(&cfg.phantom, out)?;
    println!(
        "wrote {} case(s) to {}",
        manifest.cases.len(),
        out.join("manifest.json").display()
    );
    for c in &manifest.cases {
        println!("  {}  {}  {:.2} mm", c.id, c.nodule_type, c.diameter_mm);
    }
    Ok(())
}

fn gt_consensus(data: &Path) -> Result<(), PipelineError> {
    let manifest = DatasetManifest::load(data)?;
    let outcomes = pipeline::write_consensus_masks(data, &manifest)?;
    let id_w = outcomes
        .iter()
        .map(|o| o.id.len())
        .chain(["case".len()])
        .max()
        .unwrap();
    println!("{:<id_w$}  {:>8}  consensus mask", "case", "dsc");
    for o in &outcomes {
        let dsc = match o.dsc_vs_truth {
            Some(d) => format!("{d:.4}"),
            None => "-".into(),
        };
        println!("{:<id_w$}  {:>8}  {}", o.id, dsc, o.path.display());
    }
    Ok(())
}

fn sample_plan(cfg: &PipelineConfig, data: &Path, out: &Path) -> Result<(), PipelineError> {
    let manifest = DatasetManifest::load(data)?;
    let cases = pipeline::load_all_cases(data, &manifest)?;
    let refs: Vec<&LoadedCase> = cases.iter().collect();
    let plan = pipeline::plan_samples(&cfg.sampler, &refs)?;
    plan.manifest.save(out)?;
    let total = plan.manifest.entries.len();
    let nodule = plan
        .manifest
        .entries
        .iter()
        .filter(|e| e.label == SampleLabel::Nodule)
        .count();
    println!(
        "planned {total} sample(s) ({nodule} nodule, {} background) over {} case(s)",
        total - nodule,
        cases.len()
    );
    for (id, n) in &plan.short_background {
        println!("  note: {id} supplied only {n} background candidate(s) in the band");
    }
    println!("sample manifest {}", out.display());
    Ok(())
}

fn train(cfg: &PipelineConfig, args: &TrainArgs) -> Result<(), PipelineError> {
    let manifest = DatasetManifest::load(&args.data)?;
    let cases = pipeline::load_all_cases(&args.data, &manifest)?;
    create_dir(&args.out)?;
    let opts = TrainOptions::default();
    let (_, art) = pipeline::train_model::<f32>(cfg, &cases, &opts, &args.out, &mut |s| {
        println!("{}", s.log_line());
    })?;
    let o = &art.outcome;
    println!(
        "best epoch {} val_loss {:.6}{}",
        o.best_epoch,
        o.best_val_loss,
        if o.stopped_early { " (early stop)" } else { "" }
    );
    println!(
        "train {} case(s) / {} sample(s), val {} case(s) / {} sample(s)",
        art.train_ids.len(),
        art.train_samples,
        art.val_ids.len(),
        art.val_samples
    );
    let summary = serde_json::json!({
        "checkpoint": art.checkpoint,
        "best_epoch": o.best_epoch,
        "best_val_loss": o.best_val_loss,
        "stopped_early": o.stopped_early,
        "epochs_run": o.history.len(),
        "train_ids": art.train_ids,
        "val_ids": art.val_ids,
        "train_samples": art.train_samples,
        "val_samples": art.val_samples,
    });
    let path = args.out.join("train-summary.json");
    write_text(&path, &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    println!("checkpoint {}", art.checkpoint.display());
    println!("summary {}", path.display());
    Ok(())
}

fn segment(cfg: &PipelineConfig, args: &SegmentArgs) -> Result<(), PipelineError> {
    let volume = load_volume(&args.volume)?;
    let seed: SeedBox = args.seed.parse().map_err(PipelineError::Segment)?;
    seed.validate(volume.shape()).map_err(PipelineError::Segment)?;
    let (mut net, meta) = load_checkpoint::<f32>(&args.checkpoint)?;
    // The checkpoint fixes the architecture; the config keeps supplying the
    // window, patch and propagation settings.
    let mut cfg = cfg.clone();
    cfg.network = meta.config;
    let result =
        pipeline::segment_case::<f32>(&mut net, &cfg, &volume, &seed, &TrainOptions::default())?;
    create_dir(&args.out)?;
    let mask_path = args.out.join("mask.json");
    save_mask(&result.mask, &mask_path)?;
    let trace_path = args.out.join("trace.json");
    write_text(
        &trace_path,
        &serde_json::to_string_pretty(&result.trace).expect("trace serializes"),
    )?;
    println!("checkpoint epoch {} ({} parameters)", meta.epoch, meta.param_count);
    println!(
        "segmented {} voxel(s) across {} slice(s)",
        result.mask.count(),
        result.accepted_slices().len()
    );
    println!("mask {}", mask_path.display());
    println!("trace {}", trace_path.display());
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<(), PipelineError> {
    if args.truth.len() != args.pred.len() {
        return Err(ConfigError::Invalid(format!(
            "{} --truth file(s) vs {} --pred file(s)",
            args.truth.len(),
            args.pred.len()
        ))
        .into());
    }
    let mut gt = Vec::with_capacity(args.truth.len());
    let mut seg = Vec::with_capacity(args.pred.len());
    for (t, p) in args.truth.iter().zip(&args.pred) {
        gt.push(load_mask(t)?);
        seg.push(load_mask(p)?);
    }
    let cases: Vec<EvalCase> = args
        .pred
        .iter()
        .zip(gt.iter().zip(&seg))
        .map(|(p, (gt, seg))| EvalCase {
            id: p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string()),
            gt,
            seg,
        })
        .collect();
    let report = evaluate_set(&cases)?;
    print!("{}", report.to_text());
    if let Some(out) = &args.out {
        write_text(out, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
        println!("metrics {}", out.display());
    }
    Ok(())
}

fn report(cfg: &PipelineConfig, args: &ReportArgs) -> Result<(), PipelineError> {
    let manifest = DatasetManifest::load(&args.data)?;
    let cases = pipeline::load_all_cases(&args.data, &manifest)?;
    let mut masks = Vec::with_capacity(cases.len());
    for case in &cases {
        masks.push(load_mask(&args.pred.join(&case.id).join("mask.json"))?);
    }
    let refs: Vec<&LoadedCase> = cases.iter().collect();
    let mask_refs: Vec<&BinaryMask3D> = masks.iter().collect();
    let bundle = pipeline::build_report(cfg, &refs, &mask_refs)?;
    create_dir(&args.out)?;
    let text_path = args.out.join("report.txt");
    write_text(&text_path, &bundle.to_text())?;
    let json_path = args.out.join("report.json");
    write_text(&json_path, &serde_json::to_string_pretty(&bundle).expect("report serializes"))?;
    let csv_path = args.out.join("dsc-histogram.csv");
    write_text(&csv_path, &histogram_csv(&bundle.histogram))?;
    print!("{}", bundle.to_text());
    println!(
        "report files: {}, {}, {}",
        text_path.display(),
        json_path.display(),
        csv_path.display()
    );
    Ok(())
}

fn ablate(cfg: &PipelineConfig, args: &AblateArgs) -> Result<(), PipelineError> {
    let manifest = DatasetManifest::load(&args.data)?;
    let cases = pipeline::load_all_cases(&args.data, &manifest)?;
    create_dir(&args.out)?;
    let table = pipeline::run_ablation::<f32>(cfg, &cases, &args.out, &mut |s| {
        println!("{}", s.log_line());
    })?;
    let text_path = args.out.join("ablation.txt");
    write_text(&text_path, &table.to_text())?;
    let json_path = args.out.join("ablation.json");
    write_text(&json_path, &serde_json::to_string_pretty(&table).expect("table serializes"))?;
    print!("{}", table.to_text());
    println!("table files: {}, {}", text_path.display(), json_path.display());
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text).map_err(io_err(path))
}
