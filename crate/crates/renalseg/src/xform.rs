//! Intensity normalization, grid resampling, and bounding-box crop / uncrop.

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelMap, Volume};

/// CT intensity range (HU) that maps onto `[-1, 1]` before the sigmoid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityWindow {
    pub lo: f32,
    pub hi: f32,
}

impl IntensityWindow {
    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "intensity window requires lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    /// Default CT window used by the segmentation pipeline.
    pub fn ct_default() -> Self {
        Self { lo: -54.0, hi: 242.0 }
    }
}

/// Interpolation mode for resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Inclusive per-axis voxel index ranges, tied to the geometry they index.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub parent: Geometry,
}

impl BoundingBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3], parent: Geometry) -> Result<Self> {
        for a in 0..3 {
            if lo[a] > hi[a] || hi[a] >= parent.shape[a] {
                return Err(Error::InvalidArgument(format!(
                    "bounding box [{:?}, {:?}] invalid for shape {:?}",
                    lo, hi, parent.shape
                )));
            }
        }
        Ok(Self { lo, hi, parent })
    }

    /// Voxels covered along each axis.
    pub fn extent(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0] + 1,
            self.hi[1] - self.lo[1] + 1,
            self.hi[2] - self.lo[2] + 1,
        ]
    }

    /// Geometry of the cropped grid: extent-shaped, same spacing, origin
    /// shifted by `lo * spacing` so retained voxels keep their world position.
    pub fn cropped_geometry(&self) -> Geometry {
        let mut origin = self.parent.origin;
        for a in 0..3 {
            origin[a] += self.lo[a] as f32 * self.parent.spacing[a];
        }
        Geometry {
            shape: self.extent(),
            spacing: self.parent.spacing,
            origin,
        }
    }
}

/// Map CT intensities into `(0, 1)`.
///
/// Per voxel `y = sigmoid(2 * (x - lo) / (hi - lo) - 1)`. No clamping before
/// the sigmoid; its saturation bounds the tails. Strictly monotonic in `x`.
pub fn normalize_ct(vol: &Volume, window: IntensityWindow) -> Volume {
    let lo = window.lo as f64;
    let span = window.hi as f64 - lo;
    let data = vol
        .data()
        .iter()
        .map(|&x| {
            let t = 2.0 * (x as f64 - lo) / span - 1.0;
            sigmoid(t) as f32
        })
        .collect();
    // Output stays finite and inside (0, 1) for finite input.
    Volume::new(*vol.geometry(), data).expect("sigmoid output is finite")
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Resample a volume onto a grid with the requested spacing.
///
/// The output shape per axis is `round(shape * spacing / target_spacing)`
/// (half up, minimum 1); the origin is preserved, so the field of view stays
/// fixed and samples are taken at voxel-center-aligned world coordinates.
/// Out-of-range sample positions clamp to the nearest edge voxel.
pub fn resample(vol: &Volume, target_spacing: [f32; 3], mode: Interp) -> Result<Volume> {
    let target = spacing_target_geometry(vol.geometry(), target_spacing)?;
    resample_to_geometry(vol, &target, mode)
}

/// Resample a label map onto a grid with the requested spacing.
///
/// Label maps only support nearest-neighbor sampling, which never invents
/// label values.
pub fn resample_labels(labels: &LabelMap, target_spacing: [f32; 3]) -> Result<LabelMap> {
    let target = spacing_target_geometry(labels.geometry(), target_spacing)?;
    resample_labels_to_geometry(labels, &target)
}

fn spacing_target_geometry(src: &Geometry, target_spacing: [f32; 3]) -> Result<Geometry> {
    if target_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    let mut shape = [1usize; 3];
    for a in 0..3 {
        let exact = src.shape[a] as f64 * src.spacing[a] as f64 / target_spacing[a] as f64;
        shape[a] = (exact.round() as usize).max(1);
    }
    Geometry::new(shape, target_spacing, src.origin)
}

/// Resample a volume onto an explicit target grid (shape, spacing, origin).
///
/// Used to return probability maps produced at a working resolution to the
/// native CT grid.
pub fn resample_to_geometry(vol: &Volume, target: &Geometry, mode: Interp) -> Result<Volume> {
    let src = vol.geometry();
    let data = match mode {
        Interp::Trilinear => sample_grid(src, target, |u| trilinear(vol.data(), src, u)),
        Interp::Nearest => sample_grid(src, target, |u| nearest(vol.data(), src, u)),
    };
    Volume::new(*target, data)
}

/// Nearest-neighbor resample of a label map onto an explicit target grid.
pub fn resample_labels_to_geometry(labels: &LabelMap, target: &Geometry) -> Result<LabelMap> {
    let src = labels.geometry();
    let data = sample_grid(src, target, |u| nearest(labels.data(), src, u));
    LabelMap::new(*target, data)
}

/// Evaluate `sample` at the continuous source index of every target voxel
/// center, clamped into the source grid.
fn sample_grid<T, F>(src: &Geometry, target: &Geometry, sample: F) -> Vec<T>
where
    F: Fn([f64; 3]) -> T,
{
    // Per axis: u = (target_origin - src_origin + (i + 0.5) * target_spacing)
    //               / src_spacing - 0.5
    let shift: Vec<f64> = (0..3)
        .map(|a| target.origin[a] as f64 - src.origin[a] as f64)
        .collect();
    let mut out = Vec::with_capacity(target.num_voxels());
    let max_idx = [
        (src.shape[0] - 1) as f64,
        (src.shape[1] - 1) as f64,
        (src.shape[2] - 1) as f64,
    ];
    for k in 0..target.shape[2] {
        let uz = ((shift[2] + (k as f64 + 0.5) * target.spacing[2] as f64)
            / src.spacing[2] as f64
            - 0.5)
            .clamp(0.0, max_idx[2]);
        for j in 0..target.shape[1] {
            let uy = ((shift[1] + (j as f64 + 0.5) * target.spacing[1] as f64)
                / src.spacing[1] as f64
                - 0.5)
                .clamp(0.0, max_idx[1]);
            for i in 0..target.shape[0] {
                let ux = ((shift[0] + (i as f64 + 0.5) * target.spacing[0] as f64)
                    / src.spacing[0] as f64
                    - 0.5)
                    .clamp(0.0, max_idx[0]);
                out.push(sample([ux, uy, uz]));
            }
        }
    }
    out
}

fn trilinear(data: &[f32], geom: &Geometry, u: [f64; 3]) -> f32 {
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let base = u[a].floor();
        let lo = base as usize;
        i0[a] = lo;
        i1[a] = (lo + 1).min(geom.shape[a] - 1);
        frac[a] = u[a] - base;
    }
    let mut acc = 0.0f64;
    for corner in 0..8usize {
        let (ix, wx) = pick(corner & 1 != 0, i0[0], i1[0], frac[0]);
        let (iy, wy) = pick(corner & 2 != 0, i0[1], i1[1], frac[1]);
        let (iz, wz) = pick(corner & 4 != 0, i0[2], i1[2], frac[2]);
        let w = wx * wy * wz;
        if w != 0.0 {
            acc += w * data[geom.index(ix, iy, iz)] as f64;
        }
    }
    acc as f32
}

#[inline]
fn pick(high: bool, lo: usize, hi: usize, frac: f64) -> (usize, f64) {
    if high {
        (hi, frac)
    } else {
        (lo, 1.0 - frac)
    }
}

fn nearest<T: Copy>(data: &[T], geom: &Geometry, u: [f64; 3]) -> T {
    let i = (u[0].round() as usize).min(geom.shape[0] - 1);
    let j = (u[1].round() as usize).min(geom.shape[1] - 1);
    let k = (u[2].round() as usize).min(geom.shape[2] - 1);
    data[geom.index(i, j, k)]
}

/// Tight axis-aligned box over all nonzero voxels, expanded by
/// `margin_voxels` per side and clamped to the volume.
///
/// Errors when the label map has no foreground; the caller decides the
/// fallback.
pub fn foreground_bbox(labels: &LabelMap, margin_voxels: usize) -> Result<BoundingBox> {
    let g = labels.geometry();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (linear, &v) in labels.data().iter().enumerate() {
        if v != 0 {
            any = true;
            let c = g.coords(linear);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    if !any {
        return Err(Error::EmptyForeground);
    }
    for a in 0..3 {
        lo[a] = lo[a].saturating_sub(margin_voxels);
        hi[a] = (hi[a] + margin_voxels).min(g.shape[a] - 1);
    }
    BoundingBox::new(lo, hi, *g)
}

/// Copy the sub-volume covered by `bbox` out of `vol`.
pub fn crop(vol: &Volume, bbox: &BoundingBox) -> Result<Volume> {
    check_parent(vol.geometry(), bbox)?;
    let data = copy_box(vol.data(), bbox);
    Volume::new(bbox.cropped_geometry(), data)
}

/// Copy the sub-volume covered by `bbox` out of `labels`.
pub fn crop_labels(labels: &LabelMap, bbox: &BoundingBox) -> Result<LabelMap> {
    check_parent(labels.geometry(), bbox)?;
    let data = copy_box(labels.data(), bbox);
    LabelMap::new(bbox.cropped_geometry(), data)
}

/// Paste a cropped volume back into a parent-shaped grid, filling the rest.
pub fn uncrop(vol: &Volume, bbox: &BoundingBox, fill: f32) -> Result<Volume> {
    check_extent(vol.geometry().shape, bbox)?;
    if !fill.is_finite() {
        return Err(Error::NonFinite(format!("uncrop fill value {fill}")));
    }
    let data = paste_box(vol.data(), bbox, fill);
    Volume::new(bbox.parent, data)
}

/// Paste a cropped label map back into a parent-shaped grid.
pub fn uncrop_labels(labels: &LabelMap, bbox: &BoundingBox, fill: u8) -> Result<LabelMap> {
    check_extent(labels.geometry().shape, bbox)?;
    let data = paste_box(labels.data(), bbox, fill);
    LabelMap::new(bbox.parent, data)
}

fn check_parent(geom: &Geometry, bbox: &BoundingBox) -> Result<()> {
    if !geom.same_grid(&bbox.parent) {
        return Err(Error::GeometryMismatch(
            "bounding box belongs to a different grid".into(),
        ));
    }
    Ok(())
}

fn check_extent(shape: [usize; 3], bbox: &BoundingBox) -> Result<()> {
    if shape != bbox.extent() {
        return Err(Error::ShapeMismatch(format!(
            "volume shape {:?} does not match box extent {:?}",
            shape,
            bbox.extent()
        )));
    }
    Ok(())
}

fn copy_box<T: Copy>(data: &[T], bbox: &BoundingBox) -> Vec<T> {
    let parent = &bbox.parent;
    let ext = bbox.extent();
    let mut out = Vec::with_capacity(ext[0] * ext[1] * ext[2]);
    for k in bbox.lo[2]..=bbox.hi[2] {
        for j in bbox.lo[1]..=bbox.hi[1] {
            let row = parent.index(bbox.lo[0], j, k);
            out.extend_from_slice(&data[row..row + ext[0]]);
        }
    }
    out
}

fn paste_box<T: Copy>(data: &[T], bbox: &BoundingBox, fill: T) -> Vec<T> {
    let parent = &bbox.parent;
    let ext = bbox.extent();
    let mut out = vec![fill; parent.num_voxels()];
    let mut src = 0usize;
    for k in bbox.lo[2]..=bbox.hi[2] {
        for j in bbox.lo[1]..=bbox.hi[1] {
            let row = parent.index(bbox.lo[0], j, k);
            out[row..row + ext[0]].copy_from_slice(&data[src..src + ext[0]]);
            src += ext[0];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume_from(shape: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Volume {
        Volume::new(Geometry::new(shape, spacing, [0.0; 3]).unwrap(), data).unwrap()
    }

    #[test]
    fn normalize_matches_closed_form() {
        let vol = volume_from([3, 1, 1], [1.0; 3], vec![-54.0, 94.0, 242.0]);
        let out = normalize_ct(&vol, IntensityWindow::ct_default());
        // sigmoid(-1), sigmoid(0), sigmoid(1)
        assert!((out.data()[0] - 0.268_941_42).abs() < 1e-6);
        assert!((out.data()[1] - 0.5).abs() < 1e-7);
        assert!((out.data()[2] - 0.731_058_58).abs() < 1e-6);
    }

    #[test]
    fn normalize_is_strictly_monotonic() {
        let xs: Vec<f32> = (0..200).map(|i| -1200.0 + i as f32 * 17.3).collect();
        let vol = volume_from([200, 1, 1], [1.0; 3], xs);
        let out = normalize_ct(&vol, IntensityWindow::ct_default());
        for w in out.data().windows(2) {
            assert!(w[0] < w[1], "{} !< {}", w[0], w[1]);
        }
        assert!(out.data().iter().all(|&y| y > 0.0 && y < 1.0));
    }

    #[test]
    fn resample_identity_spacing_is_bit_identical() {
        let data: Vec<f32> = (0..60).map(|i| (i as f32).sin()).collect();
        let vol = volume_from([5, 4, 3], [1.0, 2.0, 0.5], data);
        let out = resample(&vol, [1.0, 2.0, 0.5], Interp::Trilinear).unwrap();
        assert_eq!(out, vol);
    }

    #[test]
    fn resample_constant_stays_constant() {
        let g = Geometry::new([6, 5, 4], [1.0; 3], [2.0, -3.0, 0.5]).unwrap();
        let vol = Volume::constant(g, 0.37).unwrap();
        for mode in [Interp::Trilinear, Interp::Nearest] {
            let out = resample(&vol, [0.7, 1.3, 2.9], mode).unwrap();
            assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
            assert_eq!(out.geometry().origin, g.origin);
        }
    }

    #[test]
    fn ramp_upsampled_reproduces_center_aligned_samples() {
        // 1D ramp [0,1,2,3] at spacing 1 -> spacing 0.5.
        // Output sample coordinates u_i = 0.5*i - 0.25, clamped to [0, 3]:
        // values 0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.
        let vol = volume_from([4, 1, 1], [1.0; 3], vec![0.0, 1.0, 2.0, 3.0]);
        let out = resample(&vol, [0.5, 1.0, 1.0], Interp::Trilinear).unwrap();
        assert_eq!(out.geometry().shape, [8, 1, 1]);
        let expect = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
        for (got, want) in out.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-6, "{got} != {want}");
        }
    }

    #[test]
    fn output_shape_rounds_half_up() {
        let g = Geometry::new([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let vol = Volume::constant(g, 0.0).unwrap();
        // 10 * 1.0 / 4.0 = 2.5 -> 3
        let out = resample(&vol, [4.0, 4.0, 4.0], Interp::Nearest).unwrap();
        assert_eq!(out.geometry().shape, [3, 3, 3]);
    }

    #[test]
    fn resample_to_geometry_roundtrip_of_constant() {
        let g = Geometry::new([8, 8, 8], [1.0; 3], [1.0, 2.0, 3.0]).unwrap();
        let vol = Volume::constant(g, 0.6).unwrap();
        let down = resample(&vol, [1.9, 1.9, 1.9], Interp::Trilinear).unwrap();
        let back = resample_to_geometry(&down, &g, Interp::Trilinear).unwrap();
        assert_eq!(back.geometry(), &g);
        assert!(back.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn sphere_mask_volume_survives_grid_change() {
        // Sphere of radius 9 mm painted at 0.78 mm, nearest-resampled to
        // 1.0 mm; the voxel count should track the spacing ratio.
        let fine = Geometry::new([32, 32, 32], [0.78; 3], [0.0; 3]).unwrap();
        let center = 16.0 * 0.78;
        let n = fine.num_voxels();
        let mut data = vec![0u8; n];
        for (linear, v) in data.iter_mut().enumerate() {
            let c = fine.coords(linear);
            let p = fine.voxel_center(c);
            let d2 = (p[0] - center).powi(2) + (p[1] - center).powi(2) + (p[2] - center).powi(2);
            if d2 <= 81.0 {
                *v = 1;
            }
        }
        let mask = LabelMap::new(fine, data).unwrap();
        let coarse = resample_labels(&mask, [1.0, 1.0, 1.0]).unwrap();
        let fine_count = mask.foreground_count() as f64;
        let coarse_count = coarse.foreground_count() as f64;
        let expected = fine_count * (0.78f64).powi(3);
        assert!(
            (coarse_count - expected).abs() / expected < 0.10,
            "coarse {coarse_count}, expected about {expected}"
        );
    }

    #[test]
    fn nearest_label_resample_never_invents_labels() {
        let g = Geometry::new([7, 6, 5], [1.0; 3], [0.0; 3]).unwrap();
        let data: Vec<u8> = (0..g.num_voxels()).map(|i| ((i * 7) % 3) as u8).collect();
        let labels = LabelMap::new(g, data).unwrap();
        let out = resample_labels(&labels, [0.6, 1.4, 0.9]).unwrap();
        assert!(out.data().iter().all(|&v| v <= 2));
    }

    #[test]
    fn bbox_of_single_voxel_and_margin_clamping() {
        let g = Geometry::with_shape([12, 12, 12]).unwrap();
        let mut data = vec![0u8; g.num_voxels()];
        data[g.index(3, 4, 5)] = 1;
        let labels = LabelMap::new(g, data).unwrap();
        let tight = foreground_bbox(&labels, 0).unwrap();
        assert_eq!(tight.lo, [3, 4, 5]);
        assert_eq!(tight.hi, [3, 4, 5]);

        let mut data = vec![0u8; g.num_voxels()];
        data[g.index(1, 1, 1)] = 2;
        data[g.index(10, 2, 3)] = 1;
        let labels = LabelMap::new(g, data).unwrap();
        let boxed = foreground_bbox(&labels, 2).unwrap();
        assert_eq!(boxed.lo, [0, 0, 0]);
        assert_eq!(boxed.hi, [11, 4, 5]);
    }

    #[test]
    fn empty_foreground_is_an_error() {
        let labels = LabelMap::zeros(Geometry::with_shape([4, 4, 4]).unwrap());
        assert!(matches!(
            foreground_bbox(&labels, 1),
            Err(Error::EmptyForeground)
        ));
    }

    #[test]
    fn crop_full_volume_is_identity_and_origin_shifts() {
        let data: Vec<f32> = (0..27).map(|i| i as f32).collect();
        let vol = volume_from([3, 3, 3], [1.0; 3], data);
        let full = BoundingBox::new([0, 0, 0], [2, 2, 2], *vol.geometry()).unwrap();
        assert_eq!(crop(&vol, &full).unwrap(), vol);

        let part = BoundingBox::new([2, 0, 0], [2, 2, 2], *vol.geometry()).unwrap();
        let cropped = crop(&vol, &part).unwrap();
        assert_eq!(cropped.geometry().origin, [2.0, 0.0, 0.0]);
        assert_eq!(cropped.geometry().shape, [1, 3, 3]);
    }

    #[test]
    fn crop_uncrop_restores_interior() {
        let data: Vec<f32> = (0..64).map(|i| i as f32 * 0.5).collect();
        let vol = volume_from([4, 4, 4], [1.0; 3], data);
        let bbox = BoundingBox::new([1, 0, 2], [2, 3, 3], *vol.geometry()).unwrap();
        let cropped = crop(&vol, &bbox).unwrap();
        let restored = uncrop(&cropped, &bbox, 0.0).unwrap();
        let g = vol.geometry();
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    let inside = (1..=2).contains(&i) && (2..=3).contains(&k);
                    let got = restored.data()[g.index(i, j, k)];
                    if inside {
                        assert_eq!(got, vol.data()[g.index(i, j, k)]);
                    } else {
                        assert_eq!(got, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn crop_rejects_foreign_box() {
        let vol = volume_from([3, 3, 3], [1.0; 3], vec![0.0; 27]);
        let other = Geometry::new([3, 3, 3], [2.0; 3], [0.0; 3]).unwrap();
        let bbox = BoundingBox::new([0, 0, 0], [2, 2, 2], other).unwrap();
        assert!(crop(&vol, &bbox).is_err());
    }

    #[test]
    fn uncrop_rejects_extent_mismatch() {
        let vol = volume_from([2, 2, 2], [1.0; 3], vec![0.0; 8]);
        let parent = Geometry::with_shape([5, 5, 5]).unwrap();
        let bbox = BoundingBox::new([0, 0, 0], [2, 2, 2], parent).unwrap();
        assert!(matches!(
            uncrop(&vol, &bbox, 0.0),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
