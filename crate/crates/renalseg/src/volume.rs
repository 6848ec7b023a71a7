//! Core volume data model: grid geometry, scalar volumes, label maps, and
//! multi-channel probability stacks.
//!
//! All grids use a fixed axis order with x fastest-varying, i.e. the linear
//! index of voxel `(i, j, k)` is `i + nx * (j + ny * k)`. Geometry stores the
//! voxel spacing in mm and the world position of the grid corner in mm; the
//! center of voxel `i` along an axis sits at `origin + (i + 0.5) * spacing`,
//! so a grid spans exactly `[origin, origin + shape * spacing]` and resampling
//! preserves the field of view. Spacing and origin are kept as `f32` to match
//! the on-disk header precision, so file round trips are bit-exact.

use crate::error::{Error, Result};

/// Labels used by the kidney/tumor/cyst segmentation task.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_KIDNEY: u8 = 1;
pub const LABEL_TUMOR: u8 = 2;
pub const LABEL_CYST: u8 = 3;

/// Largest valid label value.
pub const MAX_LABEL: u8 = 3;

/// Shape, spacing, and origin of a dense 3D voxel grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    /// Voxels per axis; every component is at least 1.
    pub shape: [usize; 3],
    /// mm per voxel; every component is positive.
    pub spacing: [f32; 3],
    /// World position (mm) of the grid corner; voxel `(0, 0, 0)` is centered
    /// half a spacing inward.
    pub origin: [f32; 3],
}

impl Geometry {
    pub fn new(shape: [usize; 3], spacing: [f32; 3], origin: [f32; 3]) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::InvalidGeometry(format!(
                "shape components must be >= 1, got {shape:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "spacing components must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "origin components must be finite, got {origin:?}"
            )));
        }
        Ok(Self {
            shape,
            spacing,
            origin,
        })
    }

    /// Isotropic unit-spacing grid with origin at zero.
    pub fn with_shape(shape: [usize; 3]) -> Result<Self> {
        Self::new(shape, [1.0; 3], [0.0; 3])
    }

    /// Total voxel count.
    pub fn num_voxels(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    /// Linear index of voxel `(i, j, k)`; x fastest-varying.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.shape[0] && j < self.shape[1] && k < self.shape[2]);
        i + self.shape[0] * (j + self.shape[1] * k)
    }

    /// Inverse of [`Geometry::index`].
    #[inline]
    pub fn coords(&self, linear: usize) -> [usize; 3] {
        debug_assert!(linear < self.num_voxels());
        let i = linear % self.shape[0];
        let rest = linear / self.shape[0];
        [i, rest % self.shape[1], rest / self.shape[1]]
    }

    /// World coordinate (mm) of the center of voxel `(i, j, k)`:
    /// `origin + (idx + 0.5) * spacing` per axis.
    pub fn voxel_center(&self, idx: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] as f64 + (idx[0] as f64 + 0.5) * self.spacing[0] as f64,
            self.origin[1] as f64 + (idx[1] as f64 + 0.5) * self.spacing[1] as f64,
            self.origin[2] as f64 + (idx[2] as f64 + 0.5) * self.spacing[2] as f64,
        ]
    }

    /// True when shape, spacing, and origin are all bit-identical.
    pub fn same_grid(&self, other: &Geometry) -> bool {
        self == other
    }
}

/// Dense 3D scalar grid carrying CT intensities or probabilities.
///
/// Values are guaranteed finite; constructors reject NaN and infinities.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.num_voxels() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {:?} ({} voxels)",
                data.len(),
                geometry.shape,
                geometry.num_voxels()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "volume value at linear index {pos} is {}",
                data[pos]
            )));
        }
        Ok(Self { geometry, data })
    }

    /// Volume filled with a single value.
    pub fn constant(geometry: Geometry, value: f32) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("constant fill value {value}")));
        }
        let n = geometry.num_voxels();
        Ok(Self {
            geometry,
            data: vec![value; n],
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.geometry.index(i, j, k)]
    }

    pub fn into_parts(self) -> (Geometry, Vec<f32>) {
        (self.geometry, self.data)
    }
}

/// Dense 3D integer grid with values in `{0, 1, 2, 3}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    geometry: Geometry,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(geometry: Geometry, data: Vec<u8>) -> Result<Self> {
        if data.len() != geometry.num_voxels() {
            return Err(Error::ShapeMismatch(format!(
                "label data length {} does not match shape {:?}",
                data.len(),
                geometry.shape
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| v > MAX_LABEL) {
            return Err(Error::LabelOutOfRange { value: bad as i64 });
        }
        Ok(Self { geometry, data })
    }

    /// All-background map.
    pub fn zeros(geometry: Geometry) -> Self {
        let n = geometry.num_voxels();
        Self {
            geometry,
            data: vec![0u8; n],
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[self.geometry.index(i, j, k)]
    }

    pub fn into_parts(self) -> (Geometry, Vec<u8>) {
        (self.geometry, self.data)
    }

    /// Number of nonzero voxels.
    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Stack of per-class probability volumes sharing one geometry.
///
/// Channels are ordered; every value lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelProb {
    channels: Vec<Volume>,
}

impl MultiChannelProb {
    pub fn new(channels: Vec<Volume>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::InvalidArgument("probability stack needs >= 1 channel".into()))?
            .geometry()
            .clone();
        for (c, ch) in channels.iter().enumerate() {
            if !ch.geometry().same_grid(&first) {
                return Err(Error::GeometryMismatch(format!(
                    "channel {c} geometry differs from channel 0"
                )));
            }
            if ch.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidArgument(format!(
                    "channel {c} contains values outside [0, 1]"
                )));
            }
        }
        Ok(Self { channels })
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn geometry(&self) -> &Geometry {
        self.channels[0].geometry()
    }

    pub fn channel(&self, c: usize) -> &Volume {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Volume] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Volume> {
        self.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_rejects_zero_shape_and_nonpositive_spacing() {
        assert!(Geometry::new([0, 4, 4], [1.0; 3], [0.0; 3]).is_err());
        assert!(Geometry::new([4, 4, 4], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Geometry::new([4, 4, 4], [1.0, -0.5, 1.0], [0.0; 3]).is_err());
        assert!(Geometry::new([4, 4, 4], [1.0; 3], [f32::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn linear_index_roundtrip_is_bijective() {
        let g = Geometry::new([3, 4, 5], [1.0; 3], [0.0; 3]).unwrap();
        let mut seen = vec![false; g.num_voxels()];
        for k in 0..5 {
            for j in 0..4 {
                for i in 0..3 {
                    let lin = g.index(i, j, k);
                    assert!(!seen[lin]);
                    seen[lin] = true;
                    assert_eq!(g.coords(lin), [i, j, k]);
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn x_axis_is_fastest_varying() {
        let g = Geometry::new([3, 4, 5], [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 3);
        assert_eq!(g.index(0, 0, 1), 12);
    }

    #[test]
    fn volume_rejects_nan_and_length_mismatch() {
        let g = Geometry::with_shape([2, 2, 2]).unwrap();
        assert!(Volume::new(g, vec![0.0; 7]).is_err());
        let mut data = vec![0.0f32; 8];
        data[3] = f32::NAN;
        assert!(matches!(Volume::new(g, data), Err(Error::NonFinite(_))));
    }

    #[test]
    fn label_map_rejects_out_of_range_values() {
        let g = Geometry::with_shape([2, 2, 2]).unwrap();
        let mut data = vec![0u8; 8];
        data[0] = 4;
        assert!(matches!(
            LabelMap::new(g, data),
            Err(Error::LabelOutOfRange { value: 4 })
        ));
    }

    #[test]
    fn prob_stack_requires_shared_geometry_and_unit_range() {
        let g = Geometry::with_shape([2, 2, 2]).unwrap();
        let g2 = Geometry::with_shape([2, 2, 3]).unwrap();
        let a = Volume::constant(g, 0.5).unwrap();
        let b = Volume::constant(g2, 0.5).unwrap();
        assert!(MultiChannelProb::new(vec![a.clone(), b]).is_err());
        let c = Volume::constant(g, 1.5).unwrap();
        assert!(MultiChannelProb::new(vec![a, c]).is_err());
        assert!(MultiChannelProb::new(vec![]).is_err());
    }
}
