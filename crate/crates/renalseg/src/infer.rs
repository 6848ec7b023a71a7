//! Sliding-window inference: tile a volume into overlapping fixed-size
//! windows, run a window predictor on each, and blend the overlaps into a
//! full-volume probability map.
//!
//! Predictors are pluggable so the engine works the same whether the window
//! scores come from a built-in oracle, a simple threshold rule, or an
//! external program wrapping a trained network.

use std::path::PathBuf;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::{encode, ClassMap};
use crate::nifti;
use crate::volume::{Geometry, LabelMap, MultiChannelProb, Volume};
use crate::xform::{crop, BoundingBox, IntensityWindow};

/// Gaussian blend weights are floored here so the final division never blows
/// up at window corners.
pub const WEIGHT_FLOOR: f64 = 1e-6;

/// How overlapping window predictions are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    Constant,
    Gaussian,
}

/// Tiling and blending parameters for sliding-window inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlidingWindowSpec {
    pub window_shape: [usize; 3],
    /// Fraction of the window shared between neighboring tiles, in `[0, 1)`.
    pub overlap_fraction: f64,
    pub blend: BlendMode,
    /// Gaussian sigma per axis as a fraction of the window size.
    pub gaussian_sigma_fraction: f64,
}

impl SlidingWindowSpec {
    /// Defaults: 25% overlap, gaussian blending with sigma = window / 8.
    pub fn new(window_shape: [usize; 3]) -> Self {
        Self {
            window_shape,
            overlap_fraction: 0.25,
            blend: BlendMode::Gaussian,
            gaussian_sigma_fraction: 0.125,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_shape.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!(
                "window shape {:?} has a zero axis",
                self.window_shape
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::InvalidArgument(format!(
                "overlap fraction {} outside [0, 1)",
                self.overlap_fraction
            )));
        }
        if !(self.gaussian_sigma_fraction > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gaussian sigma fraction {} must be positive",
                self.gaussian_sigma_fraction
            )));
        }
        Ok(())
    }
}

/// A window-level scorer: maps a window-shaped volume to per-class
/// probabilities on the same grid.
pub trait Predictor {
    fn window_shape(&self) -> [usize; 3];
    fn num_channels(&self) -> usize;
    fn predict(&self, window: &Volume) -> Result<MultiChannelProb>;
}

/// Window start indices covering `volume_shape`.
///
/// Per axis the stride is `max(1, floor(window * (1 - overlap)))`; starts run
/// 0, stride, 2*stride, ... and the final start is clamped so the last window
/// ends flush with the volume. Results are deduplicated and lexicographically
/// sorted. Axes smaller than the window yield the single start 0 (the caller
/// pads).
pub fn tile_windows(volume_shape: [usize; 3], spec: &SlidingWindowSpec) -> Vec<[usize; 3]> {
    let starts_per_axis: Vec<Vec<usize>> = (0..3)
        .map(|a| axis_starts(volume_shape[a], spec.window_shape[a], spec.overlap_fraction))
        .collect();
    let mut out = Vec::new();
    for &sz in &starts_per_axis[2] {
        for &sy in &starts_per_axis[1] {
            for &sx in &starts_per_axis[0] {
                out.push([sx, sy, sz]);
            }
        }
    }
    out.sort_unstable();
    out
}

fn axis_starts(extent: usize, window: usize, overlap: f64) -> Vec<usize> {
    if extent <= window {
        return vec![0];
    }
    let stride = ((window as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let last = extent - window;
    let mut starts = Vec::new();
    let mut s = 0usize;
    loop {
        starts.push(s.min(last));
        if s >= last {
            break;
        }
        s += stride;
    }
    starts.dedup();
    starts
}

/// Run `predictor` over every tile of `vol` and blend the results.
///
/// Volumes smaller than the window are symmetrically edge-padded up to the
/// window size and un-padded afterwards. Each output voxel is the weighted
/// average of every covering window's prediction; the weight map depends on
/// the blend mode. The output geometry equals the input geometry.
pub fn sliding_window_predict(
    vol: &Volume,
    predictor: &dyn Predictor,
    spec: &SlidingWindowSpec,
) -> Result<MultiChannelProb> {
    spec.validate()?;
    if predictor.window_shape() != spec.window_shape {
        return Err(Error::Predictor(format!(
            "predictor window {:?} does not match spec window {:?}",
            predictor.window_shape(),
            spec.window_shape
        )));
    }
    if predictor.num_channels() == 0 {
        return Err(Error::Predictor("predictor declares zero channels".into()));
    }

    let (work, pad_lo) = pad_to_window(vol, spec.window_shape)?;
    let tiles = tile_windows(work.geometry().shape, spec);

    let mut preds = Vec::with_capacity(tiles.len());
    for &start in &tiles {
        let bbox = window_box(work.geometry(), start, spec.window_shape)?;
        let window = crop(&work, &bbox)?;
        let pred = predictor.predict(&window)?;
        check_prediction(&pred, window.geometry(), predictor.num_channels())?;
        preds.push((start, pred));
    }

    let blended = accumulate_window_predictions(work.geometry(), preds, spec)?;

    if pad_lo == [0, 0, 0] && work.geometry().shape == vol.geometry().shape {
        return Ok(blended);
    }
    // Un-pad back to the caller's grid.
    let hi = [
        pad_lo[0] + vol.geometry().shape[0] - 1,
        pad_lo[1] + vol.geometry().shape[1] - 1,
        pad_lo[2] + vol.geometry().shape[2] - 1,
    ];
    let inner = BoundingBox::new(pad_lo, hi, *work.geometry())?;
    let channels = blended
        .into_channels()
        .into_iter()
        .map(|ch| {
            let cropped = crop(&ch, &inner)?;
            Volume::new(*vol.geometry(), cropped.into_parts().1)
        })
        .collect::<Result<Vec<_>>>()?;
    MultiChannelProb::new(channels)
}

/// Blend window predictions into one probability map.
///
/// Accumulation always happens in lexicographic window-start order no matter
/// how `preds` is ordered, so the result is bit-identical for any enumeration
/// order, as well as across repeated runs.
pub fn accumulate_window_predictions(
    geometry: &Geometry,
    mut preds: Vec<([usize; 3], MultiChannelProb)>,
    spec: &SlidingWindowSpec,
) -> Result<MultiChannelProb> {
    spec.validate()?;
    if preds.is_empty() {
        return Err(Error::Predictor("no window predictions to blend".into()));
    }
    preds.sort_by_key(|(start, _)| *start);
    let num_channels = preds[0].1.num_channels();

    let weights = window_weights(spec);
    let n = geometry.num_voxels();
    let mut acc = vec![vec![0.0f64; n]; num_channels];
    let mut wsum = vec![0.0f64; n];

    let win = spec.window_shape;
    for (start, pred) in &preds {
        if pred.num_channels() != num_channels {
            return Err(Error::Predictor(format!(
                "window at {start:?} has {} channels, expected {num_channels}",
                pred.num_channels()
            )));
        }
        for wk in 0..win[2] {
            for wj in 0..win[1] {
                let row_out = geometry.index(start[0], start[1] + wj, start[2] + wk);
                let row_win = wk * win[0] * win[1] + wj * win[0];
                for wi in 0..win[0] {
                    let w = weights[row_win + wi];
                    wsum[row_out + wi] += w;
                    for (c, acc_c) in acc.iter_mut().enumerate() {
                        acc_c[row_out + wi] += w * pred.channel(c).data()[row_win + wi] as f64;
                    }
                }
            }
        }
    }

    if let Some(v) = wsum.iter().position(|&w| w == 0.0) {
        return Err(Error::Predictor(format!(
            "voxel {v} not covered by any window"
        )));
    }

    let channels = acc
        .into_iter()
        .map(|acc_c| {
            let data: Vec<f32> = acc_c
                .iter()
                .zip(&wsum)
                .map(|(&a, &w)| ((a / w) as f32).clamp(0.0, 1.0))
                .collect();
            Volume::new(*geometry, data)
        })
        .collect::<Result<Vec<_>>>()?;
    MultiChannelProb::new(channels)
}

/// Per-voxel blend weights for one window.
fn window_weights(spec: &SlidingWindowSpec) -> Vec<f64> {
    let win = spec.window_shape;
    let n = win[0] * win[1] * win[2];
    match spec.blend {
        BlendMode::Constant => vec![1.0; n],
        BlendMode::Gaussian => {
            let axis_profile = |len: usize| -> Vec<f64> {
                let center = (len as f64 - 1.0) / 2.0;
                let sigma = spec.gaussian_sigma_fraction * len as f64;
                (0..len)
                    .map(|i| {
                        let z = (i as f64 - center) / sigma;
                        (-0.5 * z * z).exp()
                    })
                    .collect()
            };
            let px = axis_profile(win[0]);
            let py = axis_profile(win[1]);
            let pz = axis_profile(win[2]);
            let mut out = Vec::with_capacity(n);
            for &wz in &pz {
                for &wy in &py {
                    for &wx in &px {
                        out.push((wx * wy * wz).max(WEIGHT_FLOOR));
                    }
                }
            }
            out
        }
    }
}

fn window_box(geom: &Geometry, start: [usize; 3], window: [usize; 3]) -> Result<BoundingBox> {
    let hi = [
        start[0] + window[0] - 1,
        start[1] + window[1] - 1,
        start[2] + window[2] - 1,
    ];
    BoundingBox::new(start, hi, *geom)
}

fn check_prediction(pred: &MultiChannelProb, window: &Geometry, channels: usize) -> Result<()> {
    if pred.num_channels() != channels {
        return Err(Error::Predictor(format!(
            "predictor returned {} channels, declared {channels}",
            pred.num_channels()
        )));
    }
    if pred.geometry().shape != window.shape {
        return Err(Error::Predictor(format!(
            "predictor returned shape {:?} for window {:?}",
            pred.geometry().shape,
            window.shape
        )));
    }
    Ok(())
}

/// Symmetric edge-replication padding up to the window size.
///
/// Returns the padded volume and the low-side pad amounts. The padded origin
/// shifts by `-pad_lo * spacing` so voxel world positions are unchanged.
fn pad_to_window(vol: &Volume, window: [usize; 3]) -> Result<(Volume, [usize; 3])> {
    let shape = vol.geometry().shape;
    let mut pad_lo = [0usize; 3];
    let mut padded_shape = shape;
    let mut needs = false;
    for a in 0..3 {
        if shape[a] < window[a] {
            let total = window[a] - shape[a];
            pad_lo[a] = total / 2;
            padded_shape[a] = window[a];
            needs = true;
        }
    }
    if !needs {
        return Ok((vol.clone(), [0, 0, 0]));
    }
    let src_geom = vol.geometry();
    let mut origin = src_geom.origin;
    for a in 0..3 {
        origin[a] -= pad_lo[a] as f32 * src_geom.spacing[a];
    }
    let geom = Geometry::new(padded_shape, src_geom.spacing, origin)?;
    let mut data = Vec::with_capacity(geom.num_voxels());
    for k in 0..padded_shape[2] {
        let sk = clamp_pad(k, pad_lo[2], shape[2]);
        for j in 0..padded_shape[1] {
            let sj = clamp_pad(j, pad_lo[1], shape[1]);
            for i in 0..padded_shape[0] {
                let si = clamp_pad(i, pad_lo[0], shape[0]);
                data.push(vol.data()[src_geom.index(si, sj, sk)]);
            }
        }
    }
    Ok((Volume::new(geom, data)?, pad_lo))
}

#[inline]
fn clamp_pad(padded: usize, lo: usize, extent: usize) -> usize {
    padded.saturating_sub(lo).min(extent - 1)
}

/// Predictor that returns the same probability everywhere.
pub struct ConstantPredictor {
    pub window_shape: [usize; 3],
    pub num_channels: usize,
    pub value: f32,
}

impl Predictor for ConstantPredictor {
    fn window_shape(&self) -> [usize; 3] {
        self.window_shape
    }

    fn num_channels(&self) -> usize {
        self.num_channels
    }

    fn predict(&self, window: &Volume) -> Result<MultiChannelProb> {
        let geom = *window.geometry();
        MultiChannelProb::new(
            (0..self.num_channels)
                .map(|_| Volume::constant(geom, self.value))
                .collect::<Result<Vec<_>>>()?,
        )
    }
}

/// Predictor that looks up ground-truth labels and encodes them through the
/// class hierarchy; the ideal network for pipeline tests.
pub struct OraclePredictor {
    labels: LabelMap,
    cmap: ClassMap,
    window_shape: [usize; 3],
}

impl OraclePredictor {
    pub fn new(labels: LabelMap, cmap: ClassMap, window_shape: [usize; 3]) -> Self {
        Self {
            labels,
            cmap,
            window_shape,
        }
    }

    /// Locate the window inside the label grid via the world origins.
    fn window_offset(&self, window: &Geometry) -> Result<[i64; 3]> {
        let lg = self.labels.geometry();
        let mut offset = [0i64; 3];
        for a in 0..3 {
            let ratio = window.spacing[a] as f64 / lg.spacing[a] as f64;
            if (ratio - 1.0).abs() > 1e-4 {
                return Err(Error::Predictor(format!(
                    "oracle labels at spacing {:?} cannot serve windows at {:?}",
                    lg.spacing, window.spacing
                )));
            }
            let shift =
                (window.origin[a] as f64 - lg.origin[a] as f64) / lg.spacing[a] as f64;
            offset[a] = shift.round() as i64;
        }
        Ok(offset)
    }
}

impl Predictor for OraclePredictor {
    fn window_shape(&self) -> [usize; 3] {
        self.window_shape
    }

    fn num_channels(&self) -> usize {
        self.cmap.num_classes()
    }

    fn predict(&self, window: &Volume) -> Result<MultiChannelProb> {
        let geom = *window.geometry();
        let offset = self.window_offset(&geom)?;
        let lg = self.labels.geometry();
        let mut data = Vec::with_capacity(geom.num_voxels());
        // Edge-clamped sampling mirrors the engine's replication padding.
        for k in 0..geom.shape[2] {
            let sk = clamp_i64(offset[2] + k as i64, lg.shape[2]);
            for j in 0..geom.shape[1] {
                let sj = clamp_i64(offset[1] + j as i64, lg.shape[1]);
                for i in 0..geom.shape[0] {
                    let si = clamp_i64(offset[0] + i as i64, lg.shape[0]);
                    data.push(self.labels.data()[lg.index(si, sj, sk)]);
                }
            }
        }
        let window_labels = LabelMap::new(geom, data)?;
        encode(&window_labels, &self.cmap)
    }
}

#[inline]
fn clamp_i64(v: i64, extent: usize) -> usize {
    v.clamp(0, extent as i64 - 1) as usize
}

/// Predictor that classifies each voxel by HU intervals around tissue means.
///
/// Operates on normalized volumes: the HU interval bounds are pushed through
/// the same rescale-plus-sigmoid map the pipeline applies to the CT, which is
/// monotone, so interval membership is preserved. Channel `c` fires 1.0 when
/// the voxel lies inside any of that class's intervals.
pub struct ThresholdPredictor {
    window_shape: [usize; 3],
    /// Per channel, normalized-space (lo, hi) interval bounds.
    intervals: Vec<Vec<(f32, f32)>>,
}

impl ThresholdPredictor {
    pub fn new(
        window_shape: [usize; 3],
        hu_intervals: Vec<Vec<(f32, f32)>>,
        window: IntensityWindow,
    ) -> Result<Self> {
        if hu_intervals.is_empty() {
            return Err(Error::InvalidArgument(
                "threshold predictor needs >= 1 channel".into(),
            ));
        }
        let norm = |x: f32| -> f32 {
            let t = 2.0 * (x as f64 - window.lo as f64) / (window.hi as f64 - window.lo as f64)
                - 1.0;
            (1.0 / (1.0 + (-t).exp())) as f32
        };
        let intervals = hu_intervals
            .into_iter()
            .map(|ch| ch.into_iter().map(|(lo, hi)| (norm(lo), norm(hi))).collect())
            .collect();
        Ok(Self {
            window_shape,
            intervals,
        })
    }
}

impl Predictor for ThresholdPredictor {
    fn window_shape(&self) -> [usize; 3] {
        self.window_shape
    }

    fn num_channels(&self) -> usize {
        self.intervals.len()
    }

    fn predict(&self, window: &Volume) -> Result<MultiChannelProb> {
        let geom = *window.geometry();
        let channels = self
            .intervals
            .iter()
            .map(|ranges| {
                let data = window
                    .data()
                    .iter()
                    .map(|&v| {
                        f32::from(ranges.iter().any(|&(lo, hi)| v >= lo && v <= hi))
                    })
                    .collect();
                Volume::new(geom, data)
            })
            .collect::<Result<Vec<_>>>()?;
        MultiChannelProb::new(channels)
    }
}

/// Predictor that shells out to an external program, so trained networks can
/// be hooked in without linking any framework.
///
/// Protocol: the window is written to a temporary NIfTI file and the program
/// is invoked as `program [args...] <window.nii> <output_prefix>`; it must
/// write one NIfTI per channel at `<output_prefix>_c0.nii`,
/// `<output_prefix>_c1.nii`, ... matching the window grid with values in
/// `[0, 1]`.
pub struct SubprocessPredictor {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub window_shape: [usize; 3],
    pub num_channels: usize,
}

impl Predictor for SubprocessPredictor {
    fn window_shape(&self) -> [usize; 3] {
        self.window_shape
    }

    fn num_channels(&self) -> usize {
        self.num_channels
    }

    fn predict(&self, window: &Volume) -> Result<MultiChannelProb> {
        let dir = tempfile::tempdir()?;
        let input = dir.path().join("window.nii");
        nifti::write_volume(window, &input)?;
        let prefix = dir.path().join("pred");

        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&input)
            .arg(&prefix)
            .status()
            .map_err(|e| {
                Error::Predictor(format!("failed to launch {}: {e}", self.program.display()))
            })?;
        if !status.success() {
            return Err(Error::Predictor(format!(
                "{} exited with {status}",
                self.program.display()
            )));
        }

        let channels = (0..self.num_channels)
            .map(|c| {
                let path = prefix.with_file_name(format!("pred_c{c}.nii"));
                let vol = nifti::read_volume(&path)?;
                if vol.geometry().shape != window.geometry().shape {
                    return Err(Error::Predictor(format!(
                        "channel {c} shape {:?} does not match window {:?}",
                        vol.geometry().shape,
                        window.geometry().shape
                    )));
                }
                // Re-home onto the exact window grid; the temp file's header
                // went through f32 I/O already, so this is lossless.
                Volume::new(*window.geometry(), vol.into_parts().1)
            })
            .collect::<Result<Vec<_>>>()?;
        MultiChannelProb::new(channels).map_err(|e| {
            Error::Predictor(format!("subprocess output rejected: {e}"))
        })
    }
}
