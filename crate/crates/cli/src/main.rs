//! `ovseg3d` command-line front end.
//!
//! Exit codes: 0 success, 2 validation or configuration failure, 3 runtime failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use ovseg3d::bundle::{read_json, to_json_bytes, GroundTruth, SceneBundle};
use ovseg3d::classify::Protocol;
use ovseg3d::eval::{evaluate, flat_table, group_report, EvalOptions, EvalPrediction};
use ovseg3d::export::{labels_from_masks, write_ply};
use ovseg3d::pipeline::{PredictionsFile, ProposalsFile, PREDICTIONS_FILE, PROPOSALS_FILE};
use ovseg3d::synth::{generate, SynthSceneSpec};
use ovseg3d::{
    run_pipeline, validate_bundle, write_outputs, Error, MatchMode, PipelineConfig, Preset,
    ProposalMode,
};

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const BUNDLE_ROOT_ENV: &str = "OVSEG3D_BUNDLE_ROOT";

#[derive(Parser, Debug)]
#[command(name = "ovseg3d", version, about = "Open-vocabulary 3D instance segmentation")]
struct Cli {
    /// Worker threads (0 = all cores). Outputs do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the pipeline on a bundle and write proposals, predictions and statistics.
    Run(RunArgs),
    /// Check a bundle's schema, hashes and invariants.
    Validate {
        /// Bundle directory; relative paths resolve against $OVSEG3D_BUNDLE_ROOT when set.
        bundle: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a run against the bundle's ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic bundle.
    Synth(SynthArgs),
    /// Write a colored PLY of proposals, predictions or ground truth.
    ExportView(ExportArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    bundle: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting configuration: scannet, s3dis or replica.
    #[arg(long)]
    preset: Option<String>,
    /// Also write a PLY colored by final proposal.
    #[arg(long)]
    ply: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args, Debug, Default)]
struct ConfigOverrides {
    #[arg(long)]
    tau_img: Option<f64>,
    #[arg(long)]
    tau_inst: Option<f64>,
    #[arg(long)]
    tau_tracking: Option<f64>,
    #[arg(long)]
    tau_merge: Option<f64>,
    #[arg(long)]
    tau_ref: Option<f64>,
    #[arg(long)]
    tau_incl: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    tau_sms: Option<f64>,
    #[arg(long)]
    sms: Option<bool>,
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long)]
    frame_stride: Option<usize>,
    #[arg(long)]
    top_views: Option<usize>,
    #[arg(long)]
    scale_levels: Option<u32>,
    #[arg(long)]
    scale_expansion: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    /// 2d-only, 3d-only or 2d+3d.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    overlap_removal: Option<bool>,
    #[arg(long)]
    refinement: Option<bool>,
    #[arg(long)]
    merge: Option<bool>,
    #[arg(long, value_enum)]
    match_mode: Option<MatchModeArg>,
    #[arg(long)]
    principal_axis_correction: Option<bool>,
    #[arg(long)]
    depth_tolerance: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Top1,
    TopK,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MatchModeArg {
    FrameWise,
    TrackletWise,
}

impl ConfigOverrides {
    fn apply(&self, cfg: &mut PipelineConfig) -> anyhow::Result<()> {
        macro_rules! set {
            ($($field:ident => $target:ident),* $(,)?) => {
                $(if let Some(v) = self.$field { cfg.$target = v; })*
            };
        }
        set!(
            tau_img => tau_img,
            tau_inst => tau_inst,
            tau_tracking => tau_tracking,
            tau_merge => tau_merge,
            tau_ref => tau_ref,
            tau_incl => tau_incl,
            tau_sms => tau_sms,
            sms => sms_enabled,
            nms_iou => nms_iou,
            frame_stride => frame_stride,
            top_views => top_views,
            scale_levels => scale_levels,
            scale_expansion => scale_expansion,
            overlap_removal => overlap_removal_enabled,
            refinement => refinement_enabled,
            merge => merge_enabled,
            principal_axis_correction => principal_axis_correction,
            depth_tolerance => depth_tolerance,
        );
        if let Some(k) = self.top_k {
            cfg.top_k = Some(k);
        }
        if let Some(p) = self.protocol {
            cfg.protocol = match p {
                ProtocolArg::Top1 => Protocol::Top1,
                ProtocolArg::TopK => Protocol::TopK,
            };
        }
        if let Some(m) = &self.mode {
            cfg.mode = Some(m.parse::<ProposalMode>()?);
        }
        if let Some(m) = self.match_mode {
            cfg.match_mode = match m {
                MatchModeArg::FrameWise => MatchMode::FrameWise,
                MatchModeArg::TrackletWise => MatchMode::TrackletWise,
            };
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    bundle: PathBuf,
    /// Run output directory.
    #[arg(long)]
    run: PathBuf,
    /// Ignore labels and score every proposal as one class.
    #[arg(long)]
    class_agnostic: bool,
    /// Class ids removed from ground truth and predictions.
    #[arg(long, value_delimiter = ',')]
    exclude: Vec<u32>,
    /// JSON object mapping group names to class id lists.
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Print the full report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML scene specification; flags override its values.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Start from the small preset (three objects, singleton superpoints).
    #[arg(long)]
    small: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    points_per_object: Option<usize>,
    #[arg(long)]
    superpoints_per_object: Option<usize>,
    #[arg(long)]
    cameras: Option<usize>,
    #[arg(long)]
    boundary_px: Option<u32>,
    #[arg(long)]
    wrong_detection_rate: Option<f64>,
    #[arg(long)]
    embedding_sigma: Option<f64>,
    #[arg(long)]
    label_flip_rate: Option<f64>,
    #[arg(long)]
    pointcloud_proposals: Option<bool>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ViewSource {
    Proposals,
    Predictions,
    GroundTruth,
}

#[derive(Args, Debug)]
struct ExportArgs {
    bundle: PathBuf,
    /// Run output directory (not needed for ground truth).
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ViewSource::Proposals)]
    by: ViewSource,
}

fn resolve_bundle(path: &Path) -> PathBuf {
    match std::env::var_os(BUNDLE_ROOT_ENV) {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

fn load_bundle(path: &Path) -> anyhow::Result<SceneBundle> {
    let dir = resolve_bundle(path);
    SceneBundle::load(&dir).with_context(|| format!("loading bundle {}", dir.display()))
}

fn cmd_run(args: &RunArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.preset {
        Some(p) => PipelineConfig::preset(p.parse::<Preset>()?),
        None => PipelineConfig::default(),
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg = PipelineConfig::from_toml_str(&text)?;
    }
    args.overrides.apply(&mut cfg)?;
    cfg.validate()?;

    let bundle = load_bundle(&args.bundle)?;
    let out = run_pipeline(&bundle, &cfg)?;
    write_outputs(&args.out, &bundle, &out)?;
    info!(
        "{} proposals, {} predictions written to {}",
        out.proposals.len(),
        out.classification.as_ref().map_or(0, |c| c.predictions.len()),
        args.out.display()
    );
    if let Some(ply) = &args.ply {
        let masks: Vec<_> = out.proposals.iter().map(|p| p.proposal.mask.clone()).collect();
        write_ply(ply, &bundle.cloud, &labels_from_masks(bundle.num_points(), &masks))?;
    }
    Ok(())
}

fn cmd_validate(bundle: &Path, json: bool) -> anyhow::Result<bool> {
    let dir = resolve_bundle(bundle);
    let report = validate_bundle(&dir);
    if json {
        println!("{}", String::from_utf8(to_json_bytes(&report))?.trim_end());
    } else if report.is_clean() {
        println!("{}: ok", dir.display());
    } else {
        print!("{report}");
    }
    Ok(report.is_clean())
}

fn read_run(run: &Path) -> anyhow::Result<(ProposalsFile, Option<PredictionsFile>)> {
    let proposals: ProposalsFile = read_json(&run.join(PROPOSALS_FILE))?;
    let pred_path = run.join(PREDICTIONS_FILE);
    let predictions = if pred_path.exists() {
        Some(read_json(&pred_path)?)
    } else {
        None
    };
    Ok((proposals, predictions))
}

fn ground_truth(bundle: &SceneBundle) -> anyhow::Result<&GroundTruth> {
    match &bundle.ground_truth {
        Some(gt) => Ok(gt),
        None => bail!("bundle has no ground truth"),
    }
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let gt = ground_truth(&bundle)?;
    let (proposals, predictions) = read_run(&args.run)?;
    let masks = proposals.masks()?;
    let preds: Vec<EvalPrediction> = if args.class_agnostic {
        masks
            .iter()
            .enumerate()
            .map(|(i, m)| EvalPrediction {
                id: i as u32,
                mask: m.clone(),
                class_id: 0,
                confidence: 1.0,
            })
            .collect()
    } else {
        let Some(predictions) = predictions else {
            bail!("run has no predictions; use --class-agnostic")
        };
        predictions
            .predictions
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mask = masks
                    .get(p.proposal)
                    .with_context(|| format!("prediction {i} names unknown proposal {}", p.proposal))?;
                Ok(EvalPrediction {
                    id: i as u32,
                    mask: mask.clone(),
                    class_id: p.class_id as u32,
                    confidence: p.confidence,
                })
            })
            .collect::<anyhow::Result<_>>()?
    };
    let options = EvalOptions {
        class_agnostic: args.class_agnostic,
        excluded_classes: args.exclude.clone(),
        ..EvalOptions::default()
    };
    let report = evaluate(&preds, &gt.instances, &options)?;
    let groups = match &args.groups {
        Some(path) => {
            let groups: BTreeMap<String, Vec<u32>> = read_json(path)?;
            Some(group_report(&report, &groups)?)
        }
        None => None,
    };
    if args.json {
        let value = serde_json::json!({ "report": report, "groups": groups });
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        print!("{}", flat_table(&report));
        for (name, s) in groups.iter().flatten() {
            match s {
                Some(s) => println!("group {name}: AP {:.6} AP50 {:.6} AP25 {:.6}", s.ap, s.ap50, s.ap25),
                None => println!("group {name}: absent"),
            }
        }
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let mut spec = if args.small {
        SynthSceneSpec::small(0)
    } else {
        SynthSceneSpec::default()
    };
    if let Some(path) = &args.spec {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        spec = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    }
    macro_rules! set {
        ($($field:ident => $($target:ident).+),* $(,)?) => {
            $(if let Some(v) = args.$field { spec.$($target).+ = v; })*
        };
    }
    set!(
        seed => seed,
        objects => num_objects,
        points_per_object => points_per_object,
        superpoints_per_object => superpoints_per_object,
        cameras => cameras.count,
        boundary_px => noise.boundary_px,
        wrong_detection_rate => noise.wrong_detection_rate,
        embedding_sigma => noise.embedding_sigma,
        label_flip_rate => noise.label_flip_rate,
        pointcloud_proposals => pointcloud_proposals,
    );
    let (bundle, _) = generate(&spec)?;
    bundle.write(&args.out)?;
    info!("wrote {} points, {} frames to {}", bundle.num_points(), bundle.frames.len(), args.out.display());
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> anyhow::Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let n = bundle.num_points();
    let labels = match args.by {
        ViewSource::GroundTruth => {
            let gt = ground_truth(&bundle)?;
            let masks: Vec<_> = gt.instances.iter().map(|g| g.mask.clone()).collect();
            labels_from_masks(n, &masks)
        }
        by => {
            let Some(run) = &args.run else { bail!("--run is required for {by:?}") };
            let (proposals, predictions) = read_run(run)?;
            let masks = proposals.masks()?;
            if matches!(by, ViewSource::Proposals) {
                labels_from_masks(n, &masks)
            } else {
                let Some(predictions) = predictions else { bail!("run has no predictions") };
                let mut labels = vec![None; n];
                for p in &predictions.predictions {
                    for i in masks[p.proposal].iter() {
                        labels[i] = Some(p.class_id);
                    }
                }
                labels
            }
        }
    };
    write_ply(&args.out, &bundle.cloud, &labels)?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Validation(_) | Error::Config(_)) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }

    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Validate { bundle, json } => match cmd_validate(bundle, *json) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(EXIT_VALIDATION),
            Err(e) => Err(e),
        },
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::ExportView(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(Error::Validation(report)) = e.downcast_ref::<Error>() {
                println!("{}", String::from_utf8_lossy(&to_json_bytes(report)).trim_end());
            }
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
