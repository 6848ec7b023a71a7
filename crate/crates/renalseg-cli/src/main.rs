//! Command-line front end for the segmentation pipeline.
//!
//! Subcommands cover each pipeline stage individually (normalize, bbox,
//! crop, predict, ensemble, decode, postprocess, evaluate) plus phantom
//! generation, fold splitting, and the full per-case pipeline (`run`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use renalseg::ensemble::{ensemble_mean, EnsembleManifest};
use renalseg::folds::{split_folds, CasePaths};
use renalseg::infer::{sliding_window_predict, BlendMode, SlidingWindowSpec};
use renalseg::labelspace::{decode, ClassMap};
use renalseg::metrics::evaluate_case;
use renalseg::nifti;
use renalseg::phantom::{generate_phantom, PhantomSpec};
use renalseg::pipeline::{
    build_predictor, case_id_from_path, resolve_cases, run_pipeline, CaseSpec, PipelineConfig,
    PredictorSpec,
};
use renalseg::postproc::postprocess;
use renalseg::volume::{Geometry, MultiChannelProb};
use renalseg::xform::{
    crop, crop_labels, foreground_bbox, normalize_ct, BoundingBox, IntensityWindow,
};
use renalseg::Error;

#[derive(Parser)]
#[command(name = "renalseg", version, about = "3D kidney/tumor/cyst CT segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic CT phantom and its label map.
    Phantom(PhantomArgs),
    /// Assign cases to folds and write a dataset manifest.
    SplitFolds(SplitFoldsArgs),
    /// Map CT intensities into (0, 1).
    Normalize(NormalizeArgs),
    /// Compute the foreground bounding box of a label map.
    Bbox(BboxArgs),
    /// Crop a volume or label map to a bounding box file.
    Crop(CropArgs),
    /// Sliding-window prediction over a volume.
    Predict(PredictArgs),
    /// Fuse member probability maps onto a reference grid.
    Ensemble(EnsembleArgs),
    /// Collapse probability channels into a label map.
    Decode(DecodeArgs),
    /// Small-component removal and cyst-rim correction.
    Postprocess(PostprocessArgs),
    /// Dice / Surface Dice scores of a prediction against ground truth.
    Evaluate(EvaluateArgs),
    /// Run the full pipeline over a manifest or a single case.
    Run(RunArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Phantom spec JSON; defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args)]
struct SplitFoldsArgs {
    /// Image paths, one per case.
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    /// Label paths matching --images pairwise.
    #[arg(long, num_args = 0..)]
    labels: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NormalizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Intensity window as lo hi.
    #[arg(long, num_args = 2, default_values_t = [-54.0, 242.0])]
    window: Vec<f32>,
}

#[derive(Args)]
struct BboxArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 5)]
    margin: usize,
    /// Write the box JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CropArgs {
    #[arg(long)]
    input: PathBuf,
    /// Box JSON produced by `bbox`.
    #[arg(long = "box")]
    box_file: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Treat the input as a label map (uint8) instead of a scalar volume.
    #[arg(long)]
    label_input: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// Normalized input volume.
    #[arg(long)]
    input: PathBuf,
    /// Predictor spec: inline JSON/YAML or a path to a spec file.
    #[arg(long)]
    predictor: String,
    /// Ground-truth labels for the oracle predictor.
    #[arg(long)]
    oracle_labels: Option<PathBuf>,
    /// Class map YAML/JSON; defaults to the kidney hierarchy.
    #[arg(long)]
    classes: Option<PathBuf>,
    #[arg(long, num_args = 3, default_values_t = [64, 64, 64])]
    window: Vec<usize>,
    #[arg(long, default_value_t = 0.25)]
    overlap: f64,
    #[arg(long, value_enum, default_value_t = BlendArg::Gaussian)]
    blend: BlendArg,
    #[arg(long, default_value_t = 0.125)]
    sigma_fraction: f64,
    /// Channel files are written as <prefix>_c<i>.nii.gz.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BlendArg {
    Constant,
    Gaussian,
}

impl From<BlendArg> for BlendMode {
    fn from(b: BlendArg) -> Self {
        match b {
            BlendArg::Constant => BlendMode::Constant,
            BlendArg::Gaussian => BlendMode::Gaussian,
        }
    }
}

#[derive(Args)]
struct EnsembleArgs {
    /// JSON manifest listing member channel files and weights.
    #[arg(long)]
    manifest: PathBuf,
    /// Volume whose grid the fused map is produced on.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    /// Per-class probability channels, in class order.
    #[arg(long, num_args = 1.., required = true)]
    channels: Vec<PathBuf>,
    #[arg(long)]
    classes: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct PostprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 100)]
    min_size: usize,
    #[arg(long, default_value_t = 2)]
    rim: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    tolerance: f64,
    #[arg(long)]
    classes: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline config YAML/JSON.
    #[arg(long)]
    config: PathBuf,
    /// Run a single case instead of the config's datalist.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Override the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

/// On-disk bounding box: indices plus the parent grid they refer to.
#[derive(serde::Serialize, serde::Deserialize)]
struct BoxFile {
    lo: [usize; 3],
    hi: [usize; 3],
    shape: [usize; 3],
    spacing: [f32; 3],
    origin: [f32; 3],
}

impl BoxFile {
    fn from_bbox(b: &BoundingBox) -> Self {
        Self {
            lo: b.lo,
            hi: b.hi,
            shape: b.parent.shape,
            spacing: b.parent.spacing,
            origin: b.parent.origin,
        }
    }

    fn into_bbox(self) -> anyhow::Result<BoundingBox> {
        let parent = Geometry::new(self.shape, self.spacing, self.origin)?;
        Ok(BoundingBox::new(self.lo, self.hi, parent)?)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            // Configuration problems get a distinct exit code.
            let config_error = e
                .downcast_ref::<Error>()
                .is_some_and(|err| matches!(err, Error::Config(_) | Error::Yaml(_)));
            if config_error {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Phantom(args) => cmd_phantom(args),
        Command::SplitFolds(args) => cmd_split_folds(args),
        Command::Normalize(args) => cmd_normalize(args),
        Command::Bbox(args) => cmd_bbox(args),
        Command::Crop(args) => cmd_crop(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Ensemble(args) => cmd_ensemble(args),
        Command::Decode(args) => cmd_decode(args),
        Command::Postprocess(args) => cmd_postprocess(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Run(args) => cmd_run(args),
    }
}

fn cmd_phantom(args: PhantomArgs) -> anyhow::Result<ExitCode> {
    let mut spec: PhantomSpec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text)?
        }
        None => PhantomSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let (ct, labels) = generate_phantom(&spec)?;
    nifti::write_volume(&ct, &args.image)?;
    nifti::write_label_map(&labels, &args.labels)?;
    eprintln!(
        "phantom seed {}: wrote {} and {}",
        spec.seed,
        args.image.display(),
        args.labels.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_split_folds(args: SplitFoldsArgs) -> anyhow::Result<ExitCode> {
    if !args.labels.is_empty() && args.labels.len() != args.images.len() {
        bail!(
            "{} labels for {} images",
            args.labels.len(),
            args.images.len()
        );
    }
    let cases: Vec<CasePaths> = args
        .images
        .iter()
        .enumerate()
        .map(|(i, image)| CasePaths {
            image: image.clone(),
            label: args.labels.get(i).cloned(),
        })
        .collect();
    let manifest = split_folds(&cases, args.folds, args.seed)?;
    manifest.save(&args.out)?;
    eprintln!(
        "wrote {} ({} cases, fold sizes {:?})",
        args.out.display(),
        manifest.entries.len(),
        manifest.fold_sizes()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_normalize(args: NormalizeArgs) -> anyhow::Result<ExitCode> {
    let window = IntensityWindow::new(args.window[0], args.window[1])?;
    let vol = nifti::read_volume(&args.input)?;
    nifti::write_volume(&normalize_ct(&vol, window), &args.output)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_bbox(args: BboxArgs) -> anyhow::Result<ExitCode> {
    let labels = nifti::read_label_map(&args.labels)?;
    let bbox = foreground_bbox(&labels, args.margin)?;
    let text = serde_json::to_string_pretty(&BoxFile::from_bbox(&bbox))?;
    if let Some(out) = &args.out {
        std::fs::write(out, &text)?;
    }
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_crop(args: CropArgs) -> anyhow::Result<ExitCode> {
    let text = std::fs::read_to_string(&args.box_file)?;
    let bbox = serde_json::from_str::<BoxFile>(&text)?.into_bbox()?;
    if args.label_input {
        let labels = nifti::read_label_map(&args.input)?;
        nifti::write_label_map(&crop_labels(&labels, &bbox)?, &args.output)?;
    } else {
        let vol = nifti::read_volume(&args.input)?;
        nifti::write_volume(&crop(&vol, &bbox)?, &args.output)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn load_class_map(path: &Option<PathBuf>) -> anyhow::Result<ClassMap> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Ok(ClassMap::from_config_str(&text)?)
        }
        None => Ok(ClassMap::kidney_default()),
    }
}

/// Parse a predictor spec given inline or as a file path.
fn parse_predictor_spec(text: &str) -> anyhow::Result<PredictorSpec> {
    let candidate = Path::new(text);
    let body = if candidate.is_file() {
        std::fs::read_to_string(candidate)?
    } else {
        text.to_string()
    };
    Ok(serde_yaml::from_str(&body).map_err(Error::Yaml)?)
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<ExitCode> {
    let cmap = load_class_map(&args.classes)?;
    let spec = SlidingWindowSpec {
        window_shape: [args.window[0], args.window[1], args.window[2]],
        overlap_fraction: args.overlap,
        blend: args.blend.into(),
        gaussian_sigma_fraction: args.sigma_fraction,
    };
    let input = nifti::read_volume(&args.input)?;
    let gt = args
        .oracle_labels
        .as_ref()
        .map(nifti::read_label_map)
        .transpose()?;

    let predictor_spec = parse_predictor_spec(&args.predictor)?;
    // Reuse the pipeline's construction rules via a minimal config.
    let config = PipelineConfig {
        window: spec.window_shape,
        overlap: spec.overlap_fraction,
        blend: spec.blend,
        gaussian_sigma_fraction: spec.gaussian_sigma_fraction,
        predictor: Some(predictor_spec.clone()),
        ..PipelineConfig::default()
    };
    let predictor = build_predictor(&predictor_spec, &cmap, &config, input.geometry(), gt.as_ref())?;
    let probs = sliding_window_predict(&input, predictor.as_ref(), &spec)?;
    write_channels(&probs, &args.out_prefix)?;
    Ok(ExitCode::SUCCESS)
}

fn write_channels(probs: &MultiChannelProb, prefix: &Path) -> anyhow::Result<()> {
    for c in 0..probs.num_channels() {
        let path = channel_path(prefix, c);
        nifti::write_volume(probs.channel(c), &path)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn channel_path(prefix: &Path, c: usize) -> PathBuf {
    let name = prefix
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    prefix.with_file_name(format!("{name}_c{c}.nii.gz"))
}

fn cmd_ensemble(args: EnsembleArgs) -> anyhow::Result<ExitCode> {
    let manifest = EnsembleManifest::load(&args.manifest)?;
    let base = args
        .manifest
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    let members = manifest.read_members(&base)?;
    let reference = nifti::read_volume(&args.reference)?;
    let fused = ensemble_mean(&members, reference.geometry())?;
    write_channels(&fused, &args.out_prefix)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_decode(args: DecodeArgs) -> anyhow::Result<ExitCode> {
    let cmap = load_class_map(&args.classes)?;
    let channels = args
        .channels
        .iter()
        .map(nifti::read_volume)
        .collect::<Result<Vec<_>, _>>()?;
    let probs = MultiChannelProb::new(channels)?;
    let labels = decode(&probs, &cmap, args.threshold)?;
    nifti::write_label_map(&labels, &args.output)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_postprocess(args: PostprocessArgs) -> anyhow::Result<ExitCode> {
    let labels = nifti::read_label_map(&args.input)?;
    let cleaned = postprocess(&labels, args.min_size, args.rim)?;
    nifti::write_label_map(&cleaned, &args.output)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<ExitCode> {
    let cmap = load_class_map(&args.classes)?;
    let pred = nifti::read_label_map(&args.pred)?;
    let gt = nifti::read_label_map(&args.gt)?;
    let scores = evaluate_case(&pred, &gt, &cmap, args.tolerance)?;
    let report = serde_json::json!({
        "case_id": case_id_from_path(&args.pred),
        "per_class": scores.per_class,
        "average_dice": scores.average_dice,
        "average_surface_dice": scores.average_surface_dice,
    });
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &args.out {
        std::fs::write(out, &text)?;
    }
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let mut config = PipelineConfig::from_file(&args.config)?;
    if let Some(dir) = args.output_dir {
        config.output_dir = dir;
    }
    let cases: Vec<CaseSpec> = match (&args.image, &args.labels) {
        (Some(image), labels) => vec![CaseSpec::from_paths(image.clone(), labels.clone())],
        (None, Some(_)) => bail!("--labels requires --image"),
        (None, None) => resolve_cases(&config)?,
    };
    if cases.is_empty() {
        bail!(Error::Config("no cases to run".into()));
    }

    let report = run_pipeline(&config, &cases)?;
    for case in &report.cases {
        println!("{}", serde_json::to_string(case)?);
    }
    let scored: Vec<&renalseg::pipeline::CaseReport> = report
        .cases
        .iter()
        .filter(|c| c.scores.is_some())
        .collect();
    if !scored.is_empty() {
        let mean_dice: f64 = scored
            .iter()
            .map(|c| c.scores.as_ref().unwrap().average_dice)
            .sum::<f64>()
            / scored.len() as f64;
        let mean_sd: f64 = scored
            .iter()
            .map(|c| c.scores.as_ref().unwrap().average_surface_dice)
            .sum::<f64>()
            / scored.len() as f64;
        eprintln!(
            "{} cases ok, {} failed; mean dice {mean_dice:.4}, mean surface dice {mean_sd:.4}",
            report.succeeded, report.failed
        );
    } else {
        eprintln!("{} cases ok, {} failed", report.succeeded, report.failed);
    }
    Ok(if report.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
