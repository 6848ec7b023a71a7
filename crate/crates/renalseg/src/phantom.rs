//! Deterministic synthetic CT phantoms for end-to-end pipeline tests.
//!
//! A phantom is a soft-tissue body ellipsoid in air, containing ellipsoidal
//! kidneys that in turn contain spherical tumors and cysts. Geometry is
//! sampled from a seeded ChaCha8 stream, so a given seed always reproduces
//! the same `(ct, labels)` pair bit for bit. Sizes and radii are in voxel
//! units; HU values are `tissue mean + uniform noise`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::ThresholdPredictor;
use crate::volume::{Geometry, LabelMap, Volume, LABEL_CYST, LABEL_KIDNEY, LABEL_TUMOR};
use crate::xform::IntensityWindow;

/// Placement attempts per object before giving up.
const MAX_TRIES: usize = 200;
/// Minimum surface-to-surface gap between lesions, in voxels. Keeps genuine
/// cysts outside the rim-correction dilation of any tumor.
const LESION_GAP: f64 = 4.0;

/// Mean HU per tissue. The defaults keep every inter-tissue gap at least
/// 10 HU so a threshold rule can classify noisy voxels exactly.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TissueMeans {
    pub air: f64,
    pub soft_tissue: f64,
    pub kidney: f64,
    pub tumor: f64,
    pub cyst: f64,
}

impl Default for TissueMeans {
    fn default() -> Self {
        Self {
            air: -1000.0,
            soft_tissue: 40.0,
            kidney: 30.0,
            tumor: 70.0,
            cyst: 10.0,
        }
    }
}

/// Phantom parameters. Count and size ranges are inclusive `[min, max]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub seed: u64,
    pub shape: [usize; 3],
    pub spacing: [f32; 3],
    pub kidney_count: [usize; 2],
    /// Kidney ellipsoid semi-axes, voxels.
    pub kidney_semi_axes: [f64; 2],
    pub tumor_count: [usize; 2],
    /// Tumor sphere radius, voxels.
    pub tumor_radius: [f64; 2],
    pub cyst_count: [usize; 2],
    /// Cyst sphere radius, voxels.
    pub cyst_radius: [f64; 2],
    pub hu: TissueMeans,
    /// Uniform noise amplitude: values land in `mean ± noise_hu`.
    pub noise_hu: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            shape: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            kidney_count: [2, 2],
            kidney_semi_axes: [9.0, 11.0],
            tumor_count: [1, 1],
            tumor_radius: [3.5, 5.0],
            cyst_count: [1, 1],
            cyst_radius: [3.2, 4.5],
            hu: TissueMeans::default(),
            noise_hu: 4.0,
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n < 8) {
            return Err(Error::InvalidArgument(format!(
                "phantom shape {:?} is too small",
                self.shape
            )));
        }
        for (name, range) in [
            ("kidney_semi_axes", self.kidney_semi_axes),
            ("tumor_radius", self.tumor_radius),
            ("cyst_radius", self.cyst_radius),
        ] {
            if !(range[0] > 0.0) || range[0] > range[1] {
                return Err(Error::InvalidArgument(format!(
                    "{name} range {range:?} must be positive and ordered"
                )));
            }
        }
        for (name, range) in [
            ("kidney_count", self.kidney_count),
            ("tumor_count", self.tumor_count),
            ("cyst_count", self.cyst_count),
        ] {
            if range[0] > range[1] {
                return Err(Error::InvalidArgument(format!(
                    "{name} range {range:?} is reversed"
                )));
            }
        }
        if self.kidney_count[0] == 0 && (self.tumor_count[0] > 0 || self.cyst_count[0] > 0) {
            return Err(Error::InvalidArgument(
                "lesions require at least one kidney".into(),
            ));
        }
        if !(self.noise_hu >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise amplitude {} must be >= 0",
                self.noise_hu
            )));
        }
        Ok(())
    }

    /// Half the smallest gap between distinct tissue means.
    pub fn min_tissue_half_gap(&self) -> f64 {
        let means = [
            self.hu.air,
            self.hu.soft_tissue,
            self.hu.kidney,
            self.hu.tumor,
            self.hu.cyst,
        ];
        let mut min_gap = f64::INFINITY;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                min_gap = min_gap.min((means[i] - means[j]).abs());
            }
        }
        min_gap / 2.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut q = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.axes[a];
            q += d * d;
        }
        q <= 1.0
    }

    /// Sufficient containment certificate: in `outer`-normalized space this
    /// ellipsoid lies within a ball of radius `max(axes ratio)` around its
    /// normalized center, so `|center_norm| + max_ratio <= 1` guarantees
    /// `self ⊆ outer`.
    fn inside(&self, outer: &Ellipsoid) -> bool {
        let mut norm_sq = 0.0;
        let mut max_ratio = 0.0f64;
        for a in 0..3 {
            let d = (self.center[a] - outer.center[a]) / outer.axes[a];
            norm_sq += d * d;
            max_ratio = max_ratio.max(self.axes[a] / outer.axes[a]);
        }
        norm_sq.sqrt() + max_ratio <= 1.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Sphere {
    center: [f64; 3],
    radius: f64,
    label: u8,
}

/// Generate the CT volume and its exact label map.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let geom = Geometry::new(spec.shape, spec.spacing, [0.0; 3])?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let body = Ellipsoid {
        center: [
            spec.shape[0] as f64 / 2.0,
            spec.shape[1] as f64 / 2.0,
            spec.shape[2] as f64 / 2.0,
        ],
        axes: [
            spec.shape[0] as f64 * 0.45,
            spec.shape[1] as f64 * 0.45,
            spec.shape[2] as f64 * 0.45,
        ],
    };

    let kidneys = place_kidneys(spec, &body, &mut rng)?;
    let lesions = place_lesions(spec, &kidneys, &mut rng)?;

    // Paint tissue classes in scan order, then add noise in a second pass so
    // the noise stream is independent of placement retries.
    let n = geom.num_voxels();
    let mut labels = vec![0u8; n];
    let mut means = vec![spec.hu.air; n];
    for k in 0..spec.shape[2] {
        for j in 0..spec.shape[1] {
            for i in 0..spec.shape[0] {
                let lin = geom.index(i, j, k);
                let p = [i as f64, j as f64, k as f64];
                if !body.contains(p) {
                    continue;
                }
                means[lin] = spec.hu.soft_tissue;
                if kidneys.iter().any(|e| e.contains(p)) {
                    labels[lin] = LABEL_KIDNEY;
                    means[lin] = spec.hu.kidney;
                    for lesion in &lesions {
                        let mut d2 = 0.0;
                        for a in 0..3 {
                            let d = p[a] - lesion.center[a];
                            d2 += d * d;
                        }
                        if d2 <= lesion.radius * lesion.radius {
                            labels[lin] = lesion.label;
                            means[lin] = if lesion.label == LABEL_TUMOR {
                                spec.hu.tumor
                            } else {
                                spec.hu.cyst
                            };
                            break;
                        }
                    }
                }
            }
        }
    }

    let ct_data: Vec<f32> = means
        .iter()
        .map(|&m| {
            let noise = (2.0 * rng.gen::<f64>() - 1.0) * spec.noise_hu;
            (m + noise) as f32
        })
        .collect();

    Ok((Volume::new(geom, ct_data)?, LabelMap::new(geom, labels)?))
}

fn place_kidneys(
    spec: &PhantomSpec,
    body: &Ellipsoid,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Ellipsoid>> {
    let count = rng.gen_range(spec.kidney_count[0]..=spec.kidney_count[1]);
    let mut kidneys: Vec<Ellipsoid> = Vec::with_capacity(count);
    for k in 0..count {
        let mut placed = false;
        'tries: for _ in 0..MAX_TRIES {
            let axes = [
                rng.gen_range(spec.kidney_semi_axes[0]..=spec.kidney_semi_axes[1]),
                rng.gen_range(spec.kidney_semi_axes[0]..=spec.kidney_semi_axes[1]),
                rng.gen_range(spec.kidney_semi_axes[0]..=spec.kidney_semi_axes[1]),
            ];
            let mut center = [0.0; 3];
            for a in 0..3 {
                let lo = body.center[a] - body.axes[a] + axes[a];
                let hi = body.center[a] + body.axes[a] - axes[a];
                if lo >= hi {
                    continue 'tries;
                }
                center[a] = rng.gen_range(lo..=hi);
            }
            let candidate = Ellipsoid { center, axes };
            if !candidate.inside(body) {
                continue;
            }
            // Axis-aligned separation of expanded bounding boxes keeps
            // kidneys disjoint.
            let overlaps = kidneys.iter().any(|other| {
                (0..3).all(|a| {
                    (candidate.center[a] - other.center[a]).abs()
                        < candidate.axes[a] + other.axes[a] + 2.0
                })
            });
            if overlaps {
                continue;
            }
            kidneys.push(candidate);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::PlacementInfeasible(format!(
                "kidney {k} of {count} after {MAX_TRIES} attempts"
            )));
        }
    }
    Ok(kidneys)
}

fn place_lesions(
    spec: &PhantomSpec,
    kidneys: &[Ellipsoid],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sphere>> {
    let tumor_count = rng.gen_range(spec.tumor_count[0]..=spec.tumor_count[1]);
    let cyst_count = rng.gen_range(spec.cyst_count[0]..=spec.cyst_count[1]);
    let mut lesions: Vec<Sphere> = Vec::new();
    let plan: Vec<(u8, [f64; 2])> = std::iter::repeat((LABEL_TUMOR, spec.tumor_radius))
        .take(tumor_count)
        .chain(std::iter::repeat((LABEL_CYST, spec.cyst_radius)).take(cyst_count))
        .collect();

    for (idx, &(label, radius_range)) in plan.iter().enumerate() {
        let mut placed = false;
        for _ in 0..MAX_TRIES {
            let radius = rng.gen_range(radius_range[0]..=radius_range[1]);
            let kidney = &kidneys[rng.gen_range(0..kidneys.len())];
            let min_axis = kidney.axes.iter().cloned().fold(f64::INFINITY, f64::min);
            if radius >= min_axis {
                continue;
            }
            let mut center = [0.0; 3];
            for a in 0..3 {
                center[a] = rng.gen_range(
                    kidney.center[a] - kidney.axes[a]..=kidney.center[a] + kidney.axes[a],
                );
            }
            // Sphere-in-ellipsoid certificate: in kidney-normalized space the
            // sphere lies within radius/min_axis of its center, so
            // |center_norm| + radius/min_axis <= 1 guarantees containment.
            let mut norm_sq = 0.0;
            for a in 0..3 {
                let d = (center[a] - kidney.center[a]) / kidney.axes[a];
                norm_sq += d * d;
            }
            if norm_sq.sqrt() + radius / min_axis > 1.0 {
                continue;
            }
            let too_close = lesions.iter().any(|other| {
                let mut d2 = 0.0;
                for a in 0..3 {
                    let d = center[a] - other.center[a];
                    d2 += d * d;
                }
                d2.sqrt() < radius + other.radius + LESION_GAP
            });
            if too_close {
                continue;
            }
            lesions.push(Sphere {
                center,
                radius,
                label,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::PlacementInfeasible(format!(
                "lesion {idx} of {} after {MAX_TRIES} attempts",
                plan.len()
            )));
        }
    }
    Ok(lesions)
}

/// Build a threshold predictor tuned to this phantom's tissue means.
pub fn threshold_predictor(
    spec: &PhantomSpec,
    window_shape: [usize; 3],
    intensity_window: IntensityWindow,
) -> Result<ThresholdPredictor> {
    threshold_predictor_from_tissues(&spec.hu, spec.noise_hu, window_shape, intensity_window)
}

/// Build the 3-class (kidney_and_mass / mass / tumor) threshold predictor
/// for the given tissue means.
///
/// Each class channel fires inside `mean ± hw` per member tissue, where `hw`
/// is 90% of the minimum half-gap between tissue means. The noise amplitude
/// must stay below `hw`, otherwise noisy voxels become ambiguous.
pub fn threshold_predictor_from_tissues(
    hu: &TissueMeans,
    noise_hu: f64,
    window_shape: [usize; 3],
    intensity_window: IntensityWindow,
) -> Result<ThresholdPredictor> {
    let spec_for_gap = PhantomSpec {
        hu: *hu,
        ..PhantomSpec::default()
    };
    let hw = spec_for_gap.min_tissue_half_gap() * 0.9;
    if noise_hu >= hw {
        return Err(Error::InvalidArgument(format!(
            "noise amplitude {noise_hu} reaches the classification half-width {hw:.2}"
        )));
    }
    let iv = |mean: f64| ((mean - hw) as f32, (mean + hw) as f32);
    let kidney = iv(hu.kidney);
    let tumor = iv(hu.tumor);
    let cyst = iv(hu.cyst);
    ThresholdPredictor::new(
        window_shape,
        vec![
            vec![kidney, tumor, cyst], // kidney_and_mass
            vec![tumor, cyst],         // mass
            vec![tumor],               // tumor
        ],
        intensity_window,
    )
}
