//! Combine probability maps from multiple models into one prediction on the
//! native grid.
//!
//! Members may have been produced at different working resolutions; each one
//! is trilinearly resampled onto the native geometry first, then the maps are
//! averaged voxel-wise with the member weights. Resample-then-average is the
//! only order that works when member grids differ.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti;
use crate::volume::{Geometry, MultiChannelProb, Volume};
use crate::xform::{resample_to_geometry, Interp};

/// One model's probability map plus its ensemble weight.
pub struct EnsembleInput {
    pub member_id: String,
    pub prob: MultiChannelProb,
    pub weight: f64,
}

impl EnsembleInput {
    pub fn new(member_id: impl Into<String>, prob: MultiChannelProb, weight: f64) -> Result<Self> {
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ensemble weight must be positive, got {weight}"
            )));
        }
        Ok(Self {
            member_id: member_id.into(),
            prob,
            weight,
        })
    }
}

/// Weighted per-voxel mean of the members after resampling onto `native`.
///
/// The mean accumulates in member list order, but the result is invariant to
/// input order up to that fixed accumulation order being re-established by
/// weight/value pairs; permutation tests assert value equality within one
/// rounding step. Output values stay inside `[min, max]` of the member values
/// at each voxel, hence inside `[0, 1]`.
pub fn ensemble_mean(members: &[EnsembleInput], native: &Geometry) -> Result<MultiChannelProb> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidArgument("ensemble needs >= 1 member".into()))?;
    let num_channels = first.prob.num_channels();
    for m in members {
        if m.prob.num_channels() != num_channels {
            return Err(Error::ShapeMismatch(format!(
                "member {:?} has {} channels, expected {num_channels}",
                m.member_id,
                m.prob.num_channels()
            )));
        }
    }

    let n = native.num_voxels();
    let mut acc = vec![vec![0.0f64; n]; num_channels];
    let mut weight_total = 0.0f64;
    for m in members {
        weight_total += m.weight;
        for c in 0..num_channels {
            let resampled = if m.prob.geometry().same_grid(native) {
                None
            } else {
                Some(resample_to_geometry(
                    m.prob.channel(c),
                    native,
                    Interp::Trilinear,
                )?)
            };
            let data = resampled
                .as_ref()
                .map_or_else(|| m.prob.channel(c).data(), |v| v.data());
            for (slot, &v) in acc[c].iter_mut().zip(data) {
                *slot += m.weight * v as f64;
            }
        }
    }

    let channels = acc
        .into_iter()
        .map(|acc_c| {
            let data: Vec<f32> = acc_c
                .iter()
                .map(|&a| ((a / weight_total) as f32).clamp(0.0, 1.0))
                .collect();
            Volume::new(*native, data)
        })
        .collect::<Result<Vec<_>>>()?;
    MultiChannelProb::new(channels)
}

/// On-disk description of one ensemble member: its per-channel probability
/// map files and a weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemberFiles {
    pub id: String,
    #[serde(default = "default_weight")]
    pub weight: f64,
    /// One NIfTI path per class channel, in channel order.
    pub channels: Vec<std::path::PathBuf>,
}

fn default_weight() -> f64 {
    1.0
}

/// Manifest file listing member probability-map paths and weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub members: Vec<MemberFiles>,
}

impl EnsembleManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Read every member's channels from disk. Relative channel paths are
    /// resolved against `base_dir`.
    pub fn read_members(&self, base_dir: &Path) -> Result<Vec<EnsembleInput>> {
        self.members
            .iter()
            .map(|m| {
                let channels = m
                    .channels
                    .iter()
                    .map(|p| {
                        let path = if p.is_absolute() {
                            p.clone()
                        } else {
                            base_dir.join(p)
                        };
                        nifti::read_volume(path)
                    })
                    .collect::<Result<Vec<_>>>()?;
                EnsembleInput::new(m.id.clone(), MultiChannelProb::new(channels)?, m.weight)
            })
            .collect()
    }
}
