//! `wearmil`: pipeline driver for the stress-estimation library.
//!
//! Stages: simulate -> transform (ecg|watch) -> embed -> bag ->
//! train/evaluate/ablate -> report. One `--seed` governs every stage;
//! each stage writes a `run.json` provenance file beside its outputs.
//! Exit codes: 0 success, 1 data error, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wearmil::bags::{
    audit_no_leakage, read_bags_dir, read_caches_dir, write_bag, write_embedding_cache, CapPolicy,
    Horizon, HorizonSetting,
};
use wearmil::cohortsim::{generate_cohort, CohortConfig};
use wearmil::config::RunConfig;
use wearmil::encoder::FusionEncoder;
use wearmil::error::Error;
use wearmil::eval::{
    ablate_to_dir, ablation_sets, compute_metrics, evaluate_to_dir, modality_label,
    parse_modalities, patient_split, render_metrics_table, report,
};
use wearmil::io;
use wearmil::mil::{save_checkpoint, train, write_history_csv, TrainConfig};
use wearmil::pipeline;
use wearmil::seed::derive_seed;
use wearmil::weekly::MissingUnit;

#[derive(Parser)]
#[command(
    name = "wearmil",
    version,
    about = "Wearable-to-PSS stress estimation pipeline"
)]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every stage (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker cap for parallel stages; outputs do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with a planted stress signal.
    Simulate(SimulateArgs),
    /// Render visual instances from raw records.
    #[command(subcommand)]
    Transform(TransformCmd),
    /// Embed rasters into per-patient caches.
    Embed(EmbedArgs),
    /// Assemble patient-horizon bags from embeddings and assessments.
    Bag(BagArgs),
    /// Train one model on a patient-level 80/20 split of the bags.
    Train(TrainArgs),
    /// Leave-one-subject-out evaluation of one modality set.
    Evaluate(EvaluateArgs),
    /// LOSO over the modality-ablation grid (all, ps, pe, se).
    Ablate(AblateArgs),
    /// Re-render tables and the scatter from a completed evaluation.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    weeks: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Gaussian noise on the PSS link, score units.
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Force one adherence value for every patient.
    #[arg(long)]
    adherence: Option<f64>,
    #[arg(long)]
    ecg_minutes: Option<f64>,
}

#[derive(Subcommand)]
enum TransformCmd {
    /// 5-minute windows -> recurrence/spectrogram/scalogram/Poincare.
    Ecg(TransformEcgArgs),
    /// Weekly heatmaps and nightly hypnograms.
    Watch(TransformWatchArgs),
}

#[derive(Args)]
struct TransformEcgArgs {
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    quality_threshold: Option<f64>,
}

#[derive(Args)]
struct TransformWatchArgs {
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// cell | day
    #[arg(long)]
    missing_unit: Option<String>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Directory of rasters (png + meta.json pairs).
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BagArgs {
    /// Directory of per-patient embedding caches.
    #[arg(long)]
    embeddings: PathBuf,
    /// assessments.csv with patient_id,horizon,date,pss.
    #[arg(long)]
    assessments: PathBuf,
    /// m3 (M3->M3) or m6 (ALL->M6).
    #[arg(long)]
    horizon: String,
    #[arg(long)]
    cap: Option<usize>,
    /// uniform | latest
    #[arg(long)]
    cap_policy: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    bags: PathBuf,
    #[arg(long)]
    horizon: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    bags: PathBuf,
    #[arg(long)]
    horizon: String,
    /// all | ps | pe | se (or any subset of the letters p, s, e).
    #[arg(long, default_value = "all")]
    modalities: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    bags: PathBuf,
    #[arg(long)]
    horizon: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Completed evaluate output directories (predictions.csv inside).
    /// Pass twice to lay an M3 and an M6 run side by side.
    #[arg(long = "in", value_name = "DIR", required = true)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidArgument(_) | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> wearmil::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = Some(jobs);
    }
    if let Some(jobs) = cfg.jobs {
        pipeline::set_worker_threads(jobs)?;
    }
    cfg.train.seed = cfg.seed;

    match cli.command {
        Command::Simulate(args) => simulate(args, cfg),
        Command::Transform(TransformCmd::Ecg(args)) => transform_ecg(args, cfg),
        Command::Transform(TransformCmd::Watch(args)) => transform_watch(args, cfg),
        Command::Embed(args) => embed(args, cfg),
        Command::Bag(args) => bag(args, cfg),
        Command::Train(args) => train_cmd(args, cfg),
        Command::Evaluate(args) => evaluate(args, cfg),
        Command::Ablate(args) => ablate(args, cfg),
        Command::Report(args) => report_cmd(args, cfg),
    }
}

fn simulate(args: SimulateArgs, mut cfg: RunConfig) -> wearmil::Result<()> {
    if let Some(p) = args.patients {
        cfg.simulate.patients = p;
    }
    if let Some(w) = args.weeks {
        cfg.simulate.weeks = w;
    }
    if let Some(sd) = args.noise_sd {
        cfg.simulate.pss_noise_sd = sd;
    }
    if args.adherence.is_some() {
        cfg.simulate.adherence = args.adherence;
    }
    if let Some(m) = args.ecg_minutes {
        cfg.simulate.ecg_minutes = m;
    }
    let cohort_cfg = CohortConfig {
        n_patients: cfg.simulate.patients,
        weeks: cfg.simulate.weeks,
        seed: cfg.seed,
        pss_noise_sd: cfg.simulate.pss_noise_sd,
        adherence_override: cfg.simulate.adherence,
        ecg_minutes: cfg.simulate.ecg_minutes,
    };
    let cohort = generate_cohort(&cohort_cfg)?;
    io::write_cohort(&args.out, &cohort)?;
    cfg.write_provenance(&args.out, "simulate")?;
    log::info!(
        "simulated {} patients, {} activity days, {} nights, {} ecg sessions -> {}",
        cohort.profiles.len(),
        cohort.daily_activity.len(),
        cohort.sleep_nights.len(),
        cohort.ecg_sessions.len(),
        args.out.display()
    );
    Ok(())
}

fn transform_ecg(args: TransformEcgArgs, mut cfg: RunConfig) -> wearmil::Result<()> {
    if let Some(q) = args.quality_threshold {
        cfg.ecg.quality_threshold = q;
    }
    let recordings = io::read_ecg_dir(&args.input)?;
    let (images, counts) = pipeline::ecg_instances(&recordings, &cfg.ecg)?;
    std::fs::create_dir_all(&args.out)?;
    for img in &images {
        io::write_raster(&args.out, img)?;
    }
    cfg.write_provenance(&args.out, "transform-ecg")?;
    log::info!(
        "{} windows -> {} rasters ({} low quality, {} sparse-beat)",
        counts.ecg_windows,
        images.len(),
        counts.low_quality_windows,
        counts.sparse_beat_windows
    );
    Ok(())
}

fn transform_watch(args: TransformWatchArgs, mut cfg: RunConfig) -> wearmil::Result<()> {
    if let Some(unit) = &args.missing_unit {
        cfg.watch.missing_unit = match unit.as_str() {
            "cell" => MissingUnit::Cell,
            "day" => MissingUnit::Day,
            other => {
                return Err(Error::invalid(format!(
                    "missing-unit must be cell or day, got '{other}'"
                )))
            }
        };
    }
    let (activity, _features) = io::read_activity_csv(&args.input.join("daily_activity.csv"))?;
    let nights = io::read_sleep_csv(&args.input.join("sleep_nights.csv"))?;
    let epochs = io::read_epochs_jsonl(&args.input.join("sleep_epochs.jsonl"))?;
    let (images, counts) = pipeline::watch_instances(&activity, &nights, &epochs, &cfg.watch)?;
    std::fs::create_dir_all(&args.out)?;
    for img in &images {
        io::write_raster(&args.out, img)?;
    }
    cfg.write_provenance(&args.out, "transform-watch")?;
    log::info!(
        "{} rasters ({} weeks rejected, {} hypnograms rejected)",
        images.len(),
        counts.rejected_weeks,
        counts.rejected_hypnograms
    );
    Ok(())
}

fn embed(args: EmbedArgs, cfg: RunConfig) -> wearmil::Result<()> {
    let images = io::read_raster_dir(&args.input)?;
    if images.is_empty() {
        return Err(Error::data(format!(
            "no rasters under {}",
            args.input.display()
        )));
    }
    let encoder = FusionEncoder::reference(derive_seed(cfg.seed, &["encoder"]));
    let embeddings = pipeline::encode_all(&images, &encoder)?;
    std::fs::create_dir_all(&args.out)?;
    let mut by_patient: std::collections::BTreeMap<String, Vec<wearmil::encoder::Embedding>> =
        std::collections::BTreeMap::new();
    for e in embeddings {
        by_patient.entry(e.patient_id.clone()).or_default().push(e);
    }
    for (patient, embs) in &by_patient {
        write_embedding_cache(&args.out.join(format!("{patient}.wmb")), patient, embs)?;
    }
    cfg.write_provenance(&args.out, "embed")?;
    log::info!(
        "embedded {} instances for {} patients",
        by_patient.values().map(|v| v.len()).sum::<usize>(),
        by_patient.len()
    );
    Ok(())
}

fn bag(args: BagArgs, mut cfg: RunConfig) -> wearmil::Result<()> {
    if let Some(cap) = args.cap {
        cfg.bags.cap = cap;
    }
    if let Some(policy) = &args.cap_policy {
        cfg.bags.cap_policy = match policy.as_str() {
            "uniform" => CapPolicy::Uniform,
            "latest" => CapPolicy::Latest,
            other => {
                return Err(Error::invalid(format!(
                    "cap-policy must be uniform or latest, got '{other}'"
                )))
            }
        };
    }
    let setting = match Horizon::parse(&args.horizon)? {
        Horizon::M3 => HorizonSetting::M3ToM3,
        Horizon::M6 => HorizonSetting::AllToM6,
    };
    let embeddings = read_caches_dir(&args.embeddings)?;
    let assessments = io::read_assessments_csv(&args.assessments)?;
    let build = pipeline::build_capped_bags(
        &embeddings,
        &assessments,
        setting,
        cfg.bags.cap,
        cfg.bags.cap_policy,
        cfg.seed,
    )?;
    audit_no_leakage(&build.bags, &assessments)?;
    std::fs::create_dir_all(&args.out)?;
    for b in &build.bags {
        write_bag(
            b,
            &args
                .out
                .join(format!("{}_{}.wmb", b.patient_id, b.horizon.label())),
        )?;
    }
    for (patient, reason) in &build.skipped {
        log::info!("skipped {patient}: {reason}");
    }
    cfg.write_provenance(&args.out, "bag")?;
    log::info!(
        "wrote {} bags ({} patients skipped)",
        build.bags.len(),
        build.skipped.len()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs, cfg: RunConfig) -> wearmil::Result<()> {
    let horizon = Horizon::parse(&args.horizon)?;
    let bags = read_bags_dir(&args.bags, Some(horizon))?;
    if bags.len() < 2 {
        return Err(Error::data("need at least 2 bags to train"));
    }
    // patient-level 80/20 split, seeded
    let patients: Vec<String> = bags.iter().map(|b| b.patient_id.clone()).collect();
    let (train_ids, val_ids) =
        patient_split(&patients, 0.2, derive_seed(cfg.seed, &["train-split"]));
    let train_bags: Vec<_> = bags
        .iter()
        .filter(|b| train_ids.contains(&b.patient_id))
        .cloned()
        .collect();
    let val_bags: Vec<_> = bags
        .iter()
        .filter(|b| val_ids.contains(&b.patient_id))
        .cloned()
        .collect();
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train
    };
    let outcome = train(&train_bags, &val_bags, &train_cfg)?;
    std::fs::create_dir_all(&args.out)?;
    save_checkpoint(
        &args.out.join("model.wmc"),
        &outcome.params,
        cfg.seed,
        outcome.best_epoch,
        outcome.best_val_rmse,
    )?;
    write_history_csv(&args.out.join("history.csv"), &outcome.history)?;
    cfg.write_provenance(&args.out, "train")?;
    log::info!(
        "best val RMSE {:.4} at epoch {} ({} epochs run)",
        outcome.best_val_rmse,
        outcome.best_epoch,
        outcome.history.len()
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs, cfg: RunConfig) -> wearmil::Result<()> {
    let horizon = Horizon::parse(&args.horizon)?;
    let bags = read_bags_dir(&args.bags, Some(horizon))?;
    let modalities = parse_modalities(&args.modalities)?;
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train
    };
    let run = evaluate_to_dir(&bags, &modalities, &train_cfg, &args.out)?;
    cfg.write_provenance(&args.out, "evaluate")?;
    for skipped in &run.skipped_folds {
        log::info!("fold skipped (modality filter emptied bags): {skipped}");
    }
    println!(
        "{}",
        render_metrics_table(&[(modality_label(&modalities), run.metrics.clone())])
    );
    Ok(())
}

fn ablate(args: AblateArgs, cfg: RunConfig) -> wearmil::Result<()> {
    let horizon = Horizon::parse(&args.horizon)?;
    let bags = read_bags_dir(&args.bags, Some(horizon))?;
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train
    };
    let runs = ablate_to_dir(&bags, &train_cfg, &ablation_sets(), &args.out)?;
    cfg.write_provenance(&args.out, "ablate")?;
    let entries: Vec<(String, wearmil::eval::GlobalMetrics)> = runs
        .iter()
        .map(|(label, run)| (label.clone(), run.metrics.clone()))
        .collect();
    println!("{}", render_metrics_table(&entries));
    Ok(())
}

fn report_cmd(args: ReportArgs, cfg: RunConfig) -> wearmil::Result<()> {
    // one entry per input run, labeled by its folds' horizon, so passing an
    // M3 and an M6 run yields the metric-by-horizon table
    let mut entries = Vec::new();
    let mut pooled: Vec<(f64, f64)> = Vec::new();
    std::fs::create_dir_all(&args.out)?;
    for (i, dir) in args.input.iter().enumerate() {
        let folds = report::read_predictions_csv(&dir.join("predictions.csv"))?;
        if folds.is_empty() {
            return Err(Error::data(format!(
                "{} holds no prediction rows",
                dir.display()
            )));
        }
        let label = folds[0].horizon.label().to_string();
        let metrics = compute_metrics(&folds)?;
        report::write_folds_csv(
            &args.out.join(format!("folds_{label}_{i}.csv")),
            &label,
            &folds,
        )?;
        pooled.extend(
            folds
                .iter()
                .flat_map(|f| f.predictions.iter().map(|(_, p, y)| (*p, *y))),
        );
        entries.push((label, metrics));
    }
    report::write_global_csv(&args.out.join("global.csv"), &entries)?;
    report::write_scatter(&args.out.join("scatter.png"), &pooled)?;
    std::fs::write(args.out.join("report.txt"), render_metrics_table(&entries))?;
    cfg.write_provenance(&args.out, "report")?;
    Ok(())
}
