//! Multi-channel soft dice loss, its deep-supervision sum, and the analytic
//! gradient used for verification.
//!
//! All arithmetic here is f64 so gradients can be checked against central
//! finite differences at small step sizes.

use crate::error::{Error, Result};
use crate::volume::MultiChannelProb;

/// Number of decoder resolutions contributing to the deep-supervision loss.
pub const NUM_SUPERVISION_LEVELS: usize = 5;

/// A multi-channel scalar field on a voxel grid, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelField {
    shape: [usize; 3],
    channels: Vec<Vec<f64>>,
}

impl VoxelField {
    pub fn new(shape: [usize; 3], channels: Vec<Vec<f64>>) -> Result<Self> {
        let n = shape[0] * shape[1] * shape[2];
        if shape.iter().any(|&d| d == 0) || n == 0 {
            return Err(Error::InvalidArgument(format!(
                "field shape {shape:?} has a zero axis"
            )));
        }
        if channels.is_empty() {
            return Err(Error::InvalidArgument("field needs >= 1 channel".into()));
        }
        for (c, ch) in channels.iter().enumerate() {
            if ch.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "channel {c} holds {} values for shape {shape:?}",
                    ch.len()
                )));
            }
        }
        Ok(Self { shape, channels })
    }

    pub fn from_prob(prob: &MultiChannelProb) -> Self {
        Self {
            shape: prob.geometry().shape,
            channels: prob
                .channels()
                .iter()
                .map(|ch| ch.data().iter().map(|&v| v as f64).collect())
                .collect(),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.channels[c]
    }

    fn is_binary(&self) -> bool {
        self.channels
            .iter()
            .all(|ch| ch.iter().all(|&v| v == 0.0 || v == 1.0))
    }
}

fn check_pair(pred: &VoxelField, target: &VoxelField) -> Result<()> {
    if pred.shape != target.shape || pred.num_channels() != target.num_channels() {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?}x{} vs target {:?}x{}",
            pred.shape,
            pred.num_channels(),
            target.shape,
            target.num_channels()
        )));
    }
    if !target.is_binary() {
        return Err(Error::InvalidArgument(
            "dice target must be binary (0 or 1)".into(),
        ));
    }
    Ok(())
}

/// Soft dice loss, averaged over channels.
///
/// Per channel `L_c = 1 - (2 * sum(p*t) + eps) / (sum(p) + sum(t) + eps)`;
/// the epsilon sits in both numerator and denominator so empty-target
/// channels stay stable.
pub fn soft_dice_loss(pred: &VoxelField, target: &VoxelField, epsilon: f64) -> Result<f64> {
    check_pair(pred, target)?;
    let mut total = 0.0;
    for c in 0..pred.num_channels() {
        let (p, t) = (pred.channel(c), target.channel(c));
        let mut dot = 0.0;
        let mut sum_p = 0.0;
        let mut sum_t = 0.0;
        for v in 0..p.len() {
            dot += p[v] * t[v];
            sum_p += p[v];
            sum_t += t[v];
        }
        total += 1.0 - (2.0 * dot + epsilon) / (sum_p + sum_t + epsilon);
    }
    Ok(total / pred.num_channels() as f64)
}

/// Analytic gradient of [`soft_dice_loss`] with respect to every prediction
/// value.
///
/// Per channel, with `D = sum(p) + sum(t) + eps` and `N = 2 * sum(p*t) + eps`:
/// `dL/dp_v = -(2 * t_v * D - N) / D^2`, divided by the channel count for the
/// mean reduction.
pub fn soft_dice_grad(pred: &VoxelField, target: &VoxelField, epsilon: f64) -> Result<VoxelField> {
    check_pair(pred, target)?;
    let channels_f = pred.num_channels() as f64;
    let mut grad_channels = Vec::with_capacity(pred.num_channels());
    for c in 0..pred.num_channels() {
        let (p, t) = (pred.channel(c), target.channel(c));
        let mut dot = 0.0;
        let mut sum_p = 0.0;
        let mut sum_t = 0.0;
        for v in 0..p.len() {
            dot += p[v] * t[v];
            sum_p += p[v];
            sum_t += t[v];
        }
        let denom = sum_p + sum_t + epsilon;
        let numer = 2.0 * dot + epsilon;
        let inv_d2 = 1.0 / (denom * denom);
        let grad: Vec<f64> = t
            .iter()
            .map(|&tv| -(2.0 * tv * denom - numer) * inv_d2 / channels_f)
            .collect();
        grad_channels.push(grad);
    }
    VoxelField::new(pred.shape, grad_channels)
}

/// Nearest-neighbor downsampling by a factor of `2^level` per axis.
///
/// Output voxel `i` copies input voxel `2^level * i`; every axis keeps at
/// least one voxel. Binary inputs stay binary.
pub fn downsample_nn(field: &VoxelField, level: u32) -> VoxelField {
    if level == 0 {
        return field.clone();
    }
    let step = 1usize << level;
    let in_shape = field.shape;
    let out_shape = [
        (in_shape[0] / step).max(1),
        (in_shape[1] / step).max(1),
        (in_shape[2] / step).max(1),
    ];
    let index =
        |i: usize, j: usize, k: usize| i + in_shape[0] * (j + in_shape[1] * k);
    let channels = field
        .channels
        .iter()
        .map(|ch| {
            let mut out = Vec::with_capacity(out_shape[0] * out_shape[1] * out_shape[2]);
            for k in 0..out_shape[2] {
                for j in 0..out_shape[1] {
                    for i in 0..out_shape[0] {
                        out.push(ch[index(i * step, j * step, k * step)]);
                    }
                }
            }
            out
        })
        .collect();
    VoxelField::new(out_shape, channels).expect("downsampled shape is valid")
}

/// Predictions at the five decoder resolutions, level `i` spatially halved
/// `i` times relative to level 0.
#[derive(Debug, Clone)]
pub struct DeepSupervisionStack {
    levels: Vec<VoxelField>,
}

impl DeepSupervisionStack {
    pub fn new(levels: Vec<VoxelField>) -> Result<Self> {
        if levels.len() != NUM_SUPERVISION_LEVELS {
            return Err(Error::InvalidArgument(format!(
                "deep supervision stack needs {NUM_SUPERVISION_LEVELS} levels, got {}",
                levels.len()
            )));
        }
        let base = levels[0].shape();
        let channels = levels[0].num_channels();
        for (i, level) in levels.iter().enumerate() {
            if level.num_channels() != channels {
                return Err(Error::ShapeMismatch(format!(
                    "level {i} has {} channels, level 0 has {channels}",
                    level.num_channels()
                )));
            }
            let want = [
                (base[0] >> i).max(1),
                (base[1] >> i).max(1),
                (base[2] >> i).max(1),
            ];
            if level.shape() != want {
                return Err(Error::ShapeMismatch(format!(
                    "level {i} shape {:?}, expected {want:?}",
                    level.shape()
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[VoxelField] {
        &self.levels
    }
}

/// Deep-supervision dice loss: `sum_i (1/2^i) * dice(level_i, target_i)`
/// where `target_i` is the target nearest-neighbor downsampled `i` times.
pub fn deep_supervision_loss(
    stack: &DeepSupervisionStack,
    target: &VoxelField,
    epsilon: f64,
) -> Result<f64> {
    if target.shape() != stack.levels[0].shape() {
        return Err(Error::ShapeMismatch(format!(
            "target shape {:?} does not match level 0 {:?}",
            target.shape(),
            stack.levels[0].shape()
        )));
    }
    let mut total = 0.0;
    for (i, level) in stack.levels.iter().enumerate() {
        let target_i = downsample_nn(target, i as u32);
        let weight = 1.0 / f64::from(1u32 << i);
        total += weight * soft_dice_loss(level, &target_i, epsilon)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(shape: [usize; 3], channels: Vec<Vec<f64>>) -> VoxelField {
        VoxelField::new(shape, channels).unwrap()
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let n = 125;
        let t: Vec<f64> = (0..n).map(|i| f64::from(i % 2 == 0)).collect();
        let target = field([5, 5, 5], vec![t.clone()]);
        let pred = field([5, 5, 5], vec![t]);
        let loss = soft_dice_loss(&pred, &target, 1e-5).unwrap();
        assert!(loss >= 0.0 && loss < 1e-4, "loss {loss}");
    }

    #[test]
    fn empty_prediction_against_ten_voxel_target() {
        let mut t = vec![0.0; 64];
        t.iter_mut().take(10).for_each(|v| *v = 1.0);
        let target = field([4, 4, 4], vec![t]);
        let pred = field([4, 4, 4], vec![vec![0.0; 64]]);
        let loss = soft_dice_loss(&pred, &target, 1e-5).unwrap();
        let expect = 1.0 - 1e-5 / (10.0 + 1e-5);
        assert!((loss - expect).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn two_voxel_hand_example() {
        let pred = field([2, 1, 1], vec![vec![0.5, 0.5]]);
        let target = field([2, 1, 1], vec![vec![1.0, 0.0]]);
        let loss = soft_dice_loss(&pred, &target, 0.0).unwrap();
        assert!((loss - 0.5).abs() < 1e-15);

        // dL/dp = -(2*t*D - N)/D^2 with D = 2, N = 1:
        // voxel 0 (t=1): -(4 - 1)/4 = -0.75; voxel 1 (t=0): -(0 - 1)/4 = 0.25.
        // Verified against the central-difference oracle below.
        let grad = soft_dice_grad(&pred, &target, 0.0).unwrap();
        assert!((grad.channel(0)[0] + 0.75).abs() < 1e-15);
        assert!((grad.channel(0)[1] - 0.25).abs() < 1e-15);
    }

    /// Central-difference oracle for the dice gradient, independent of the
    /// analytic path.
    fn fd_grad(pred: &VoxelField, target: &VoxelField, epsilon: f64, h: f64) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for c in 0..pred.num_channels() {
            let mut g = Vec::new();
            for v in 0..pred.channel(c).len() {
                let mut plus = pred.clone();
                plus.channel_mut(c)[v] += h;
                let mut minus = pred.clone();
                minus.channel_mut(c)[v] -= h;
                let lp = soft_dice_loss(&plus, target, epsilon).unwrap();
                let lm = soft_dice_loss(&minus, target, epsilon).unwrap();
                g.push((lp - lm) / (2.0 * h));
            }
            out.push(g);
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = 0x2_4601u64;
        let mut next = move || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 11) as f64 / (1u64 << 53) as f64
        };
        for case in 0..20 {
            let channels = 1 + case % 3;
            let pred_ch: Vec<Vec<f64>> = (0..channels)
                .map(|_| (0..64).map(|_| next()).collect())
                .collect();
            let target_ch: Vec<Vec<f64>> = (0..channels)
                .map(|_| (0..64).map(|_| f64::from(next() > 0.5)).collect())
                .collect();
            let pred = field([4, 4, 4], pred_ch);
            let target = field([4, 4, 4], target_ch);
            let grad = soft_dice_grad(&pred, &target, 1e-5).unwrap();
            let fd = fd_grad(&pred, &target, 1e-5, 1e-4);
            for c in 0..channels {
                for v in 0..64 {
                    let (a, b) = (grad.channel(c)[v], fd[c][v]);
                    let scale = a.abs().max(b.abs());
                    if scale > 1e-12 {
                        assert!(
                            (a - b).abs() / scale < 1e-4,
                            "case {case} c{c} v{v}: {a} vs {b}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_near_zero_at_perfect_prediction() {
        // At pred == target the foreground gradient is -1/(2*|T| + eps),
        // which vanishes as the mask grows.
        let n = 32 * 32 * 32;
        let t: Vec<f64> = (0..n).map(|i| f64::from(i % 3 == 0)).collect();
        let target = field([32, 32, 32], vec![t.clone()]);
        let pred = field([32, 32, 32], vec![t.clone()]);
        let grad = soft_dice_grad(&pred, &target, 1e-5).unwrap();
        for (v, &tv) in t.iter().enumerate() {
            if tv == 1.0 {
                assert!(grad.channel(0)[v].abs() < 1e-4);
            }
        }
    }

    #[test]
    fn downsample_picks_strided_voxels() {
        let f = field([4, 1, 1], vec![vec![1.0, 0.0, 1.0, 0.0]]);
        assert_eq!(downsample_nn(&f, 0), f);
        let d1 = downsample_nn(&f, 1);
        assert_eq!(d1.shape(), [2, 1, 1]);
        assert_eq!(d1.channel(0), &[1.0, 1.0]);
        let d2 = downsample_nn(&f, 2);
        assert_eq!(d2.shape(), [1, 1, 1]);
        assert_eq!(d2.channel(0), &[1.0]);
    }

    #[test]
    fn downsample_keeps_constants_constant() {
        let f = field([8, 6, 4], vec![vec![1.0; 8 * 6 * 4]]);
        for level in 0..5 {
            let d = downsample_nn(&f, level);
            assert!(d.channel(0).iter().all(|&v| v == 1.0));
        }
    }

    fn perfect_stack(target: &VoxelField) -> DeepSupervisionStack {
        let levels = (0..NUM_SUPERVISION_LEVELS)
            .map(|i| downsample_nn(target, i as u32))
            .collect();
        DeepSupervisionStack::new(levels).unwrap()
    }

    #[test]
    fn deep_supervision_weights_sum_to_1_9375() {
        // Pred identically 0 against an all-ones target makes every level's
        // loss exactly 1 at eps = 0.
        let shape = [16, 16, 16];
        let target = field(shape, vec![vec![1.0; 16 * 16 * 16]]);
        let zero_stack = DeepSupervisionStack::new(
            (0..NUM_SUPERVISION_LEVELS)
                .map(|i| {
                    let d = downsample_nn(&target, i as u32);
                    let n = d.channel(0).len();
                    field(d.shape(), vec![vec![0.0; n]])
                })
                .collect(),
        )
        .unwrap();
        let total = deep_supervision_loss(&zero_stack, &target, 0.0).unwrap();
        assert!((total - 1.9375).abs() < 1e-9, "total {total}");
    }

    #[test]
    fn perfect_stack_scores_near_zero() {
        let t: Vec<f64> = (0..4096).map(|i| f64::from(i % 5 == 0)).collect();
        let target = field([16, 16, 16], vec![t]);
        let stack = perfect_stack(&target);
        let total = deep_supervision_loss(&stack, &target, 1e-5).unwrap();
        assert!(total < 1e-4, "total {total}");
    }

    #[test]
    fn only_level_zero_wrong_weighs_one() {
        let shape = [16, 16, 16];
        let n = 16 * 16 * 16;
        let target = field(shape, vec![vec![1.0; n]]);
        let mut levels: Vec<VoxelField> = (0..NUM_SUPERVISION_LEVELS)
            .map(|i| downsample_nn(&target, i as u32))
            .collect();
        levels[0] = field(shape, vec![vec![0.0; n]]);
        let stack = DeepSupervisionStack::new(levels).unwrap();
        let total = deep_supervision_loss(&stack, &target, 0.0).unwrap();
        assert!((total - 1.0).abs() < 1e-12, "total {total}");
    }

    #[test]
    fn malformed_stack_is_rejected() {
        let target = field([8, 8, 8], vec![vec![1.0; 512]]);
        let levels: Vec<VoxelField> = (0..4).map(|i| downsample_nn(&target, i)).collect();
        assert!(DeepSupervisionStack::new(levels).is_err());

        let mut levels: Vec<VoxelField> =
            (0..5).map(|i| downsample_nn(&target, i)).collect();
        levels[2] = field([8, 8, 8], vec![vec![0.0; 512]]);
        assert!(DeepSupervisionStack::new(levels).is_err());
    }

    #[test]
    fn loss_rejects_shape_mismatch_and_nonbinary_target() {
        let a = field([2, 2, 2], vec![vec![0.5; 8]]);
        let b = field([2, 2, 1], vec![vec![1.0; 4]]);
        assert!(soft_dice_loss(&a, &b, 0.0).is_err());
        let t = field([2, 2, 2], vec![vec![0.25; 8]]);
        assert!(soft_dice_loss(&a, &t, 0.0).is_err());
    }
}
