//! The full segmentation pipeline: read, normalize, coarse localization and
//! crop, sliding-window prediction per ensemble member, cross-resolution
//! fusion, decode, binary cleanup, uncrop, write, and optional scoring.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::{ensemble_mean, EnsembleInput};
use crate::error::{Error, Result};
use crate::folds::DatasetManifest;
use crate::infer::{
    sliding_window_predict, BlendMode, ConstantPredictor, OraclePredictor, Predictor,
    SlidingWindowSpec, SubprocessPredictor,
};
use crate::labelspace::{decode, ClassEntry, ClassMap};
use crate::metrics::{evaluate_case, CaseScores};
use crate::nifti;
use crate::phantom::{threshold_predictor_from_tissues, TissueMeans};
use crate::postproc::{fix_cyst_rim, remove_small_components};
use crate::volume::{LabelMap, Volume};
use crate::xform::{
    crop, crop_labels, foreground_bbox, normalize_ct, resample, resample_labels_to_geometry,
    uncrop_labels, BoundingBox, IntensityWindow, Interp,
};

/// How a window predictor is constructed for a member or the coarse pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PredictorSpec {
    /// Uniform probability everywhere; only useful for plumbing tests.
    Constant { value: f32 },
    /// Encode the case's ground-truth labels; requires a label file.
    Oracle,
    /// HU-interval classifier around tissue means.
    Threshold {
        #[serde(default)]
        hu: TissueMeans,
        #[serde(default = "default_noise")]
        noise_hu: f64,
    },
    /// External program following the window-file protocol.
    Subprocess {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
}

fn default_noise() -> f64 {
    4.0
}

/// One ensemble member: a predictor, an optional working resolution, and a
/// weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemberConfig {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default = "default_weight")]
    pub weight: f64,
    /// Working voxel spacing for this member; omitted means the native grid.
    #[serde(default)]
    pub spacing: Option<[f32; 3]>,
    pub predictor: PredictorSpec,
}

fn default_weight() -> f64 {
    1.0
}

/// Coarse-pass localization settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    pub enabled: bool,
    pub margin_voxels: usize,
    /// Resolution of the coarse localization pass.
    pub spacing: [f32; 3],
    /// Override predictor for the coarse pass; defaults to the first
    /// member's predictor.
    pub predictor: Option<PredictorSpec>,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            margin_voxels: 5,
            spacing: [0.78, 0.78, 0.78],
            predictor: None,
        }
    }
}

/// Pipeline configuration, loadable from YAML or JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub modality: String,
    /// Path prefix for relative manifest entries.
    pub dataroot: Option<PathBuf>,
    /// Dataset manifest path.
    pub datalist: Option<PathBuf>,
    /// Class hierarchy; defaults to kidney_and_mass / mass / tumor.
    pub class_names: Option<Vec<ClassEntry>>,
    pub sigmoid: bool,
    /// CT intensity range mapped to [-1, 1] before the sigmoid.
    pub intensity_window: [f32; 2],
    /// Sliding window shape, voxels.
    pub window: [usize; 3],
    pub overlap: f64,
    pub blend: BlendMode,
    pub gaussian_sigma_fraction: f64,
    /// Decode threshold applied to every channel.
    pub threshold: f32,
    /// Ensemble members; when empty, `predictor` defines a single member.
    pub members: Vec<MemberConfig>,
    /// Single-model shortcut used when `members` is empty, and the default
    /// coarse-pass predictor.
    pub predictor: Option<PredictorSpec>,
    pub crop: CropConfig,
    pub tolerance_mm: f64,
    pub min_component_size: usize,
    pub rim_voxels: usize,
    /// Concurrent cases.
    pub workers: usize,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            modality: "CT".into(),
            dataroot: None,
            datalist: None,
            class_names: None,
            sigmoid: true,
            intensity_window: [-54.0, 242.0],
            window: [64, 64, 64],
            overlap: 0.25,
            blend: BlendMode::Gaussian,
            gaussian_sigma_fraction: 0.125,
            threshold: 0.5,
            members: Vec::new(),
            predictor: None,
            crop: CropConfig::default(),
            tolerance_mm: 1.0,
            min_component_size: 100,
            rim_voxels: 2,
            workers: 1,
            output_dir: PathBuf::from("."),
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = serde_yaml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() && self.predictor.is_none() {
            return Err(Error::Config(
                "no predictor: set `predictor` or a non-empty `members` list".into(),
            ));
        }
        if !(self.intensity_window[0] < self.intensity_window[1]) {
            return Err(Error::Config(format!(
                "intensity window {:?} must be increasing",
                self.intensity_window
            )));
        }
        self.sliding_window_spec().validate().map_err(|e| {
            Error::Config(format!("sliding window settings: {e}"))
        })?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn class_map(&self) -> Result<ClassMap> {
        match &self.class_names {
            Some(entries) => ClassMap::new(entries.clone(), self.sigmoid),
            None => Ok(ClassMap::kidney_default()),
        }
    }

    pub fn intensity(&self) -> Result<IntensityWindow> {
        IntensityWindow::new(self.intensity_window[0], self.intensity_window[1])
    }

    pub fn sliding_window_spec(&self) -> SlidingWindowSpec {
        SlidingWindowSpec {
            window_shape: self.window,
            overlap_fraction: self.overlap,
            blend: self.blend,
            gaussian_sigma_fraction: self.gaussian_sigma_fraction,
        }
    }

    /// Effective member list: the configured members, or the single-model
    /// shortcut.
    pub fn effective_members(&self) -> Result<Vec<MemberConfig>> {
        if !self.members.is_empty() {
            return Ok(self.members.clone());
        }
        let predictor = self
            .predictor
            .clone()
            .ok_or_else(|| Error::Config("no predictor configured".into()))?;
        Ok(vec![MemberConfig {
            id: Some("model".into()),
            weight: 1.0,
            spacing: None,
            predictor,
        }])
    }

    fn coarse_predictor_spec(&self) -> Result<PredictorSpec> {
        if let Some(spec) = &self.crop.predictor {
            return Ok(spec.clone());
        }
        Ok(self.effective_members()?[0].predictor.clone())
    }
}

/// One input case.
#[derive(Debug, Clone)]
pub struct CaseSpec {
    pub id: String,
    pub image: PathBuf,
    pub label: Option<PathBuf>,
}

impl CaseSpec {
    /// Derive a case id from the image filename.
    pub fn from_paths(image: PathBuf, label: Option<PathBuf>) -> Self {
        let id = case_id_from_path(&image);
        Self { id, image, label }
    }
}

pub fn case_id_from_path(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into());
    name.trim_end_matches(".gz")
        .trim_end_matches(".nii")
        .to_string()
}

/// Load the case list from the config's manifest.
pub fn resolve_cases(config: &PipelineConfig) -> Result<Vec<CaseSpec>> {
    let datalist = config
        .datalist
        .as_ref()
        .ok_or_else(|| Error::Config("config has no `datalist`".into()))?;
    let manifest = DatasetManifest::load(datalist)?;
    let root = config.dataroot.clone().unwrap_or_default();
    Ok(manifest
        .entries
        .iter()
        .map(|e| {
            let join = |p: &PathBuf| if p.is_absolute() { p.clone() } else { root.join(p) };
            CaseSpec::from_paths(join(&e.image), e.label.as_ref().map(join))
        })
        .collect())
}

/// Machine-readable result for one case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    pub status: CaseStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prediction: Option<PathBuf>,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub scores: Option<CaseScores>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseStatus {
    Ok,
    Error,
}

/// Aggregate over a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub cases: Vec<CaseReport>,
    pub succeeded: usize,
    pub failed: usize,
}

/// Run every case, `workers` at a time; a failing case is reported and the
/// rest continue. Reports come back in input order.
pub fn run_pipeline(config: &PipelineConfig, cases: &[CaseSpec]) -> Result<RunReport> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;

    let mut reports: Vec<Option<CaseReport>> = vec![None; cases.len()];
    let workers = config.workers.min(cases.len().max(1));
    if workers <= 1 {
        for (slot, case) in reports.iter_mut().zip(cases) {
            *slot = Some(run_case_reported(config, case));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results: std::sync::Mutex<Vec<(usize, CaseReport)>> =
            std::sync::Mutex::new(Vec::with_capacity(cases.len()));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if idx >= cases.len() {
                        break;
                    }
                    let report = run_case_reported(config, &cases[idx]);
                    results.lock().expect("result lock").push((idx, report));
                });
            }
        });
        for (idx, report) in results.into_inner().expect("result lock") {
            reports[idx] = Some(report);
        }
    }

    let cases: Vec<CaseReport> = reports.into_iter().map(|r| r.expect("all cases ran")).collect();
    let succeeded = cases.iter().filter(|c| c.status == CaseStatus::Ok).count();
    let failed = cases.len() - succeeded;
    Ok(RunReport {
        cases,
        succeeded,
        failed,
    })
}

fn run_case_reported(config: &PipelineConfig, case: &CaseSpec) -> CaseReport {
    match run_case(config, case) {
        Ok(report) => report,
        Err(e) => CaseReport {
            case_id: case.id.clone(),
            status: CaseStatus::Error,
            error: Some(e.to_string()),
            prediction: None,
            scores: None,
            warnings: Vec::new(),
        },
    }
}

/// Execute the pipeline for a single case and write its prediction.
pub fn run_case(config: &PipelineConfig, case: &CaseSpec) -> Result<CaseReport> {
    let cmap = config.class_map()?;
    let intensity = config.intensity()?;
    let sw_spec = config.sliding_window_spec();
    let mut warnings = Vec::new();

    let image = nifti::read_volume(&case.image)?;
    let native_geom = *image.geometry();
    let gt = match &case.label {
        Some(path) => {
            let labels = nifti::read_label_map(path)?;
            if !labels.geometry().same_grid(&native_geom) {
                return Err(Error::GeometryMismatch(format!(
                    "labels {:?} not on the image grid",
                    path
                )));
            }
            Some(labels)
        }
        None => None,
    };

    let normalized = normalize_ct(&image, intensity);

    // Coarse localization. An empty coarse foreground falls back to the full
    // volume rather than failing the case.
    let bbox: Option<BoundingBox> = if config.crop.enabled {
        match coarse_bbox(config, &cmap, &sw_spec, &normalized, gt.as_ref())? {
            Some(bbox) => Some(bbox),
            None => {
                warnings
                    .push("coarse pass found no foreground; processing full volume".to_string());
                None
            }
        }
    } else {
        None
    };

    let (work_ct, work_gt) = match &bbox {
        Some(bbox) => (
            crop(&normalized, bbox)?,
            gt.as_ref().map(|l| crop_labels(l, bbox)).transpose()?,
        ),
        None => (normalized.clone(), gt.clone()),
    };

    // Per-member sliding-window prediction, then fuse on the working grid.
    let mut inputs = Vec::new();
    for (m, member) in config.effective_members()?.iter().enumerate() {
        let member_id = member.id.clone().unwrap_or_else(|| format!("member_{m}"));
        let member_ct = match member.spacing {
            Some(spacing) if spacing != work_ct.geometry().spacing => {
                resample(&work_ct, spacing, Interp::Trilinear)?
            }
            _ => work_ct.clone(),
        };
        let predictor = build_predictor(
            &member.predictor,
            &cmap,
            config,
            member_ct.geometry(),
            work_gt.as_ref(),
        )?;
        let probs = sliding_window_predict(&member_ct, predictor.as_ref(), &sw_spec)?;
        inputs.push(EnsembleInput::new(member_id, probs, member.weight)?);
    }
    let fused = ensemble_mean(&inputs, work_ct.geometry())?;

    let decoded = decode(&fused, &cmap, config.threshold)?;
    let cleaned = fix_cyst_rim(
        &remove_small_components(&decoded, config.min_component_size),
        config.rim_voxels,
    );

    let full = match &bbox {
        Some(bbox) => uncrop_labels(&cleaned, bbox, 0)?,
        None => cleaned,
    };
    debug_assert!(full.geometry().same_grid(&native_geom));

    std::fs::create_dir_all(&config.output_dir)?;
    let prediction_path = config
        .output_dir
        .join(format!("{}_pred.nii.gz", case.id));
    nifti::write_label_map(&full, &prediction_path)?;

    let scores = gt
        .as_ref()
        .map(|gt| evaluate_case(&full, gt, &cmap, config.tolerance_mm))
        .transpose()?;

    Ok(CaseReport {
        case_id: case.id.clone(),
        status: CaseStatus::Ok,
        error: None,
        prediction: Some(prediction_path),
        scores,
        warnings,
    })
}

/// Run the coarse pass at its working resolution and return the native-grid
/// bounding box of the predicted foreground, or `None` when the prediction
/// is empty.
fn coarse_bbox(
    config: &PipelineConfig,
    cmap: &ClassMap,
    sw_spec: &SlidingWindowSpec,
    normalized: &Volume,
    gt: Option<&LabelMap>,
) -> Result<Option<BoundingBox>> {
    let coarse_ct = if config.crop.spacing != normalized.geometry().spacing {
        resample(normalized, config.crop.spacing, Interp::Trilinear)?
    } else {
        normalized.clone()
    };
    let predictor = build_predictor(
        &config.coarse_predictor_spec()?,
        cmap,
        config,
        coarse_ct.geometry(),
        gt,
    )?;
    let probs = sliding_window_predict(&coarse_ct, predictor.as_ref(), sw_spec)?;
    let coarse_labels = decode(&probs, cmap, config.threshold)?;

    let coarse_box = match foreground_bbox(&coarse_labels, config.crop.margin_voxels) {
        Ok(b) => b,
        Err(Error::EmptyForeground) => return Ok(None),
        Err(e) => return Err(e),
    };

    // Map the coarse-grid box to native voxel indices through world
    // coordinates, then clamp.
    let native = normalized.geometry();
    let coarse = coarse_ct.geometry();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let world_lo = coarse.origin[a] as f64 + coarse_box.lo[a] as f64 * coarse.spacing[a] as f64;
        let world_hi =
            coarse.origin[a] as f64 + (coarse_box.hi[a] + 1) as f64 * coarse.spacing[a] as f64;
        let lo_idx = ((world_lo - native.origin[a] as f64) / native.spacing[a] as f64).floor();
        let hi_idx =
            ((world_hi - native.origin[a] as f64) / native.spacing[a] as f64).ceil() - 1.0;
        lo[a] = lo_idx.max(0.0) as usize;
        hi[a] = (hi_idx.max(0.0) as usize).min(native.shape[a] - 1);
        if lo[a] > hi[a] {
            lo[a] = hi[a];
        }
    }
    Ok(Some(BoundingBox::new(lo, hi, *native)?))
}

/// Instantiate a predictor for a given working grid.
///
/// The config supplies the window shape and intensity window; `gt` backs the
/// oracle predictor and must live on `working_geom`'s grid (it is resampled
/// there otherwise).
pub fn build_predictor(
    spec: &PredictorSpec,
    cmap: &ClassMap,
    config: &PipelineConfig,
    working_geom: &crate::volume::Geometry,
    gt: Option<&LabelMap>,
) -> Result<Box<dyn Predictor>> {
    let window_shape = config.window;
    match spec {
        PredictorSpec::Constant { value } => Ok(Box::new(ConstantPredictor {
            window_shape,
            num_channels: cmap.num_classes(),
            value: *value,
        })),
        PredictorSpec::Oracle => {
            let gt = gt.ok_or_else(|| {
                Error::Config("oracle predictor requires a label file for the case".into())
            })?;
            let labels = if gt.geometry().same_grid(working_geom) {
                gt.clone()
            } else {
                resample_labels_to_geometry(gt, working_geom)?
            };
            Ok(Box::new(OraclePredictor::new(
                labels,
                cmap.clone(),
                window_shape,
            )))
        }
        PredictorSpec::Threshold { hu, noise_hu } => {
            if cmap.num_classes() != 3 {
                return Err(Error::Config(
                    "threshold predictor assumes the 3-class kidney hierarchy".into(),
                ));
            }
            Ok(Box::new(threshold_predictor_from_tissues(
                hu,
                *noise_hu,
                window_shape,
                config.intensity()?,
            )?))
        }
        PredictorSpec::Subprocess { program, args } => Ok(Box::new(SubprocessPredictor {
            program: program.clone(),
            args: args.clone(),
            window_shape,
            num_channels: cmap.num_classes(),
        })),
    }
}
