//! Evaluation metrics: per-class Dice, Surface Dice (normalized surface
//! distance), and the multi-class averages used for model selection.
//!
//! Masks are represented as [`LabelMap`]s whose nonzero voxels form the
//! foreground. Surfaces are extracted at voxel granularity: a border voxel is
//! a foreground voxel with at least one background 6-neighbor, where the
//! volume boundary counts as background. Distances run between border-voxel
//! centers, Euclidean in mm using the grid spacing.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::labelspace::{encode, ClassMap};
use crate::volume::{Geometry, LabelMap};

/// Overlap score `2|A∩B| / (|A| + |B|)`.
///
/// Two empty masks score 1.0 (an absent structure correctly predicted
/// absent); empty versus nonempty scores 0.0.
pub fn dice(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    if !a.geometry().same_grid(b.geometry()) {
        return Err(Error::GeometryMismatch("dice inputs on different grids".into()));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&va, &vb) in a.data().iter().zip(b.data()) {
        let fa = va != 0;
        let fb = vb != 0;
        inter += usize::from(fa && fb);
        total += usize::from(fa) + usize::from(fb);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Surface Dice at a distance tolerance.
///
/// Score = (|{s ∈ ∂A : d(s, ∂B) ≤ tol}| + |{s ∈ ∂B : d(s, ∂A) ≤ tol}|)
///         / (|∂A| + |∂B|).
/// Both surfaces empty scores 1.0. Distances to an empty surface are
/// infinite, so empty-versus-nonempty scores 0.0.
pub fn surface_dice(a: &LabelMap, b: &LabelMap, tolerance_mm: f64) -> Result<f64> {
    if !a.geometry().same_grid(b.geometry()) {
        return Err(Error::GeometryMismatch(
            "surface dice inputs on different grids".into(),
        ));
    }
    if !(tolerance_mm >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be >= 0, got {tolerance_mm}"
        )));
    }
    let geom = a.geometry();
    let border_a = border_voxels(a);
    let border_b = border_voxels(b);
    let na: usize = border_a.iter().filter(|&&s| s).count();
    let nb: usize = border_b.iter().filter(|&&s| s).count();
    if na + nb == 0 {
        return Ok(1.0);
    }
    let tol_sq = tolerance_mm * tolerance_mm;
    let matched = count_within(&border_a, &squared_edt(&border_b, geom), tol_sq)
        + count_within(&border_b, &squared_edt(&border_a, geom), tol_sq);
    Ok(matched as f64 / (na + nb) as f64)
}

fn count_within(border: &[bool], dist_sq: &[f64], tol_sq: f64) -> usize {
    border
        .iter()
        .zip(dist_sq)
        .filter(|&(&s, &d2)| s && d2 <= tol_sq)
        .count()
}

/// Border mask: foreground voxels with a background 6-neighbor (or touching
/// the volume boundary).
pub fn border_voxels(mask: &LabelMap) -> Vec<bool> {
    let geom = mask.geometry();
    let [nx, ny, nz] = geom.shape;
    let data = mask.data();
    let mut border = vec![false; data.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let lin = geom.index(i, j, k);
                if data[lin] == 0 {
                    continue;
                }
                let at_edge = i == 0
                    || i == nx - 1
                    || j == 0
                    || j == ny - 1
                    || k == 0
                    || k == nz - 1;
                border[lin] = at_edge
                    || data[geom.index(i - 1, j, k)] == 0
                    || data[geom.index(i + 1, j, k)] == 0
                    || data[geom.index(i, j - 1, k)] == 0
                    || data[geom.index(i, j + 1, k)] == 0
                    || data[geom.index(i, j, k - 1)] == 0
                    || data[geom.index(i, j, k + 1)] == 0;
            }
        }
    }
    border
}

/// Exact squared Euclidean distance transform to the `true` voxels of
/// `sites`, spacing-aware, via the separable lower-envelope-of-parabolas
/// method (one 1D pass per axis). Voxels with no site anywhere stay at
/// `f64::INFINITY`.
pub fn squared_edt(sites: &[bool], geom: &Geometry) -> Vec<f64> {
    let [nx, ny, nz] = geom.shape;
    let mut dist: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();

    let mut line = Vec::new();
    // Pass along x.
    let wx = (geom.spacing[0] as f64) * (geom.spacing[0] as f64);
    for k in 0..nz {
        for j in 0..ny {
            let row = geom.index(0, j, k);
            line.clear();
            line.extend_from_slice(&dist[row..row + nx]);
            edt_1d(&line, wx, &mut dist[row..row + nx]);
        }
    }
    // Pass along y.
    let wy = (geom.spacing[1] as f64) * (geom.spacing[1] as f64);
    let mut out = vec![0.0f64; ny];
    for k in 0..nz {
        for i in 0..nx {
            line.clear();
            line.extend((0..ny).map(|j| dist[geom.index(i, j, k)]));
            edt_1d(&line, wy, &mut out);
            for (j, &v) in out.iter().enumerate() {
                dist[geom.index(i, j, k)] = v;
            }
        }
    }
    // Pass along z.
    let wz = (geom.spacing[2] as f64) * (geom.spacing[2] as f64);
    let mut out = vec![0.0f64; nz];
    for j in 0..ny {
        for i in 0..nx {
            line.clear();
            line.extend((0..nz).map(|k| dist[geom.index(i, j, k)]));
            edt_1d(&line, wz, &mut out);
            for (k, &v) in out.iter().enumerate() {
                dist[geom.index(i, j, k)] = v;
            }
        }
    }
    dist
}

/// 1D squared distance transform under the metric `w * (q - v)^2 + f(v)`.
fn edt_1d(f: &[f64], w: f64, out: &mut [f64]) {
    let n = f.len();
    debug_assert_eq!(out.len(), n);
    // Parabola apex positions and the envelope's crossing points.
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            k = 0;
            started = true;
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + w * (q * q) as f64) - (f[p] + w * (p * p) as f64))
                / (2.0 * w * (q as f64 - p as f64));
            if s <= z[k] {
                // The new parabola hides the current one; pop it.
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] {
            // New parabola dominates everything so far.
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            k = 0;
        } else {
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
    }
    if !started {
        out.copy_from_slice(f);
        return;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        out[q] = w * d * d + f[p];
    }
}

/// Scores for one case: per-class Dice / Surface Dice plus the unweighted
/// class averages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseScores {
    pub per_class: BTreeMap<String, ClassScore>,
    pub average_dice: f64,
    pub average_surface_dice: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClassScore {
    pub dice: f64,
    pub surface_dice: f64,
}

/// Encode prediction and ground truth through the class hierarchy and score
/// every class channel.
pub fn evaluate_case(
    pred: &LabelMap,
    gt: &LabelMap,
    cmap: &ClassMap,
    tolerance_mm: f64,
) -> Result<CaseScores> {
    if !pred.geometry().same_grid(gt.geometry()) {
        return Err(Error::GeometryMismatch(
            "prediction and ground truth on different grids".into(),
        ));
    }
    let geom = *pred.geometry();
    let pred_ch = encode(pred, cmap)?;
    let gt_ch = encode(gt, cmap)?;
    let mut per_class = BTreeMap::new();
    let mut dice_sum = 0.0;
    let mut sd_sum = 0.0;
    for (c, name) in cmap.class_names().enumerate() {
        let pm = channel_mask(&geom, pred_ch.channel(c).data());
        let gm = channel_mask(&geom, gt_ch.channel(c).data());
        let d = dice(&pm, &gm)?;
        let sd = surface_dice(&pm, &gm, tolerance_mm)?;
        dice_sum += d;
        sd_sum += sd;
        per_class.insert(
            name.to_string(),
            ClassScore {
                dice: d,
                surface_dice: sd,
            },
        );
    }
    let n = cmap.num_classes() as f64;
    Ok(CaseScores {
        per_class,
        average_dice: dice_sum / n,
        average_surface_dice: sd_sum / n,
    })
}

fn channel_mask(geom: &Geometry, indicator: &[f32]) -> LabelMap {
    let data = indicator.iter().map(|&v| u8::from(v >= 0.5)).collect();
    LabelMap::new(*geom, data).expect("indicator channel is binary")
}
