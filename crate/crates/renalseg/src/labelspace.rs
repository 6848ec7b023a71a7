//! Hierarchical multi-label encoding between integer label maps and
//! per-class probability channels.
//!
//! The segmentation target is a nested hierarchy: every deeper class is a
//! subset of the one above it (kidney+mass ⊇ mass ⊇ tumor), so a voxel can
//! belong to several channels at once and each channel gets its own sigmoid.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::volume::{LabelMap, MultiChannelProb, Volume};

/// One class: a display name plus the set of source labels it covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    #[serde(rename = "index")]
    pub indices: BTreeSet<u8>,
}

/// Ordered list of classes plus the activation mode flag.
///
/// For the hierarchical decode to be defined the entries must be nested:
/// `indices[k+1] ⊆ indices[k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    entries: Vec<ClassEntry>,
    sigmoid_mode: bool,
    /// Canonical output label per tier, derived from the nesting.
    tier_labels: Vec<u8>,
}

impl ClassMap {
    pub fn new(entries: Vec<ClassEntry>, sigmoid_mode: bool) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidClassMap("no classes defined".into()));
        }
        for e in &entries {
            if e.indices.is_empty() {
                return Err(Error::InvalidClassMap(format!(
                    "class {:?} has an empty index set",
                    e.name
                )));
            }
            if e.indices.contains(&0) {
                return Err(Error::InvalidClassMap(format!(
                    "class {:?} claims label 0, which is reserved for background",
                    e.name
                )));
            }
        }
        for pair in entries.windows(2) {
            if !pair[1].indices.is_subset(&pair[0].indices) {
                return Err(Error::InvalidClassMap(format!(
                    "class {:?} is not nested inside {:?}",
                    pair[1].name, pair[0].name
                )));
            }
        }
        // Tier k emits the smallest label that is present at tier k but not
        // at tier k+1; the deepest tier emits its smallest label. With the
        // standard kidney/mass/tumor map every difference set is a singleton
        // and decode inverts encode exactly.
        let mut tier_labels = Vec::with_capacity(entries.len());
        for k in 0..entries.len() {
            let label = if k + 1 < entries.len() {
                entries[k]
                    .indices
                    .difference(&entries[k + 1].indices)
                    .next()
                    .copied()
            } else {
                entries[k].indices.iter().next().copied()
            };
            let label = label.ok_or_else(|| {
                Error::InvalidClassMap(format!(
                    "class {:?} adds no labels over the next tier",
                    entries[k].name
                ))
            })?;
            tier_labels.push(label);
        }
        Ok(Self {
            entries,
            sigmoid_mode,
            tier_labels,
        })
    }

    /// The kidney/tumor/cyst hierarchy:
    /// `kidney_and_mass {1,2,3}`, `mass {2,3}`, `tumor {2}`, sigmoid mode.
    pub fn kidney_default() -> Self {
        let entries = vec![
            ClassEntry {
                name: "kidney_and_mass".into(),
                indices: BTreeSet::from([1, 2, 3]),
            },
            ClassEntry {
                name: "mass".into(),
                indices: BTreeSet::from([2, 3]),
            },
            ClassEntry {
                name: "tumor".into(),
                indices: BTreeSet::from([2]),
            },
        ];
        Self::new(entries, true).expect("default class map is valid")
    }

    /// Parse the `class_names:` / `sigmoid:` config shape from YAML or JSON.
    pub fn from_config_str(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            class_names: Vec<ClassEntry>,
            #[serde(default = "default_true")]
            sigmoid: bool,
        }
        fn default_true() -> bool {
            true
        }
        let raw: Raw = serde_yaml::from_str(text)?;
        Self::new(raw.class_names, raw.sigmoid)
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn sigmoid_mode(&self) -> bool {
        self.sigmoid_mode
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Label emitted when tier `k` is the deepest confident channel.
    pub fn tier_label(&self, k: usize) -> u8 {
        self.tier_labels[k]
    }

    fn union(&self) -> BTreeSet<u8> {
        self.entries[0].indices.clone()
    }
}

/// Expand a label map into per-class binary indicator channels.
///
/// Channel `c` is 1 exactly where the voxel's label belongs to class `c`;
/// channels overlap by design. Labels outside the map (other than 0) are an
/// error.
pub fn encode(labels: &LabelMap, cmap: &ClassMap) -> Result<MultiChannelProb> {
    let covered = cmap.union();
    let n = labels.geometry().num_voxels();
    let mut channels: Vec<Vec<f32>> = vec![vec![0.0; n]; cmap.num_classes()];
    for (v, &label) in labels.data().iter().enumerate() {
        if label == 0 {
            continue;
        }
        if !covered.contains(&label) {
            return Err(Error::LabelNotInClassMap { value: label });
        }
        for (c, entry) in cmap.entries.iter().enumerate() {
            if entry.indices.contains(&label) {
                channels[c][v] = 1.0;
            }
        }
    }
    let geometry = *labels.geometry();
    MultiChannelProb::new(
        channels
            .into_iter()
            .map(|data| Volume::new(geometry, data))
            .collect::<Result<Vec<_>>>()?,
    )
}

/// Collapse per-class probabilities back into a label map with a uniform
/// threshold (0.5 by default in callers).
pub fn decode(prob: &MultiChannelProb, cmap: &ClassMap, threshold: f32) -> Result<LabelMap> {
    decode_with_thresholds(prob, cmap, &vec![threshold; cmap.num_classes()])
}

/// Collapse per-class probabilities back into a label map, one threshold per
/// class.
///
/// Per voxel the deepest channel at or above its threshold wins and emits
/// that tier's canonical label, regardless of shallower channels; if no
/// channel clears its threshold the voxel is background. This rule inverts
/// [`encode`] exactly on binary channels.
pub fn decode_with_thresholds(
    prob: &MultiChannelProb,
    cmap: &ClassMap,
    thresholds: &[f32],
) -> Result<LabelMap> {
    if prob.num_channels() != cmap.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "{} probability channels for {} classes",
            prob.num_channels(),
            cmap.num_classes()
        )));
    }
    if thresholds.len() != cmap.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "{} thresholds for {} classes",
            thresholds.len(),
            cmap.num_classes()
        )));
    }
    let geometry = *prob.geometry();
    let n = geometry.num_voxels();
    let mut out = vec![0u8; n];
    for c in (0..prob.num_channels()).rev() {
        let tier = cmap.tier_label(c);
        let th = thresholds[c];
        let channel = prob.channel(c).data();
        for (v, slot) in out.iter_mut().enumerate() {
            if *slot == 0 && channel[v] >= th {
                *slot = tier;
            }
        }
    }
    // Deepest-first fill: a voxel claimed by tier c is never overwritten by a
    // shallower tier. Background label 0 never collides because tier labels
    // are nonzero by construction.
    LabelMap::new(geometry, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn single_voxel_prob(values: &[f32]) -> MultiChannelProb {
        let g = Geometry::with_shape([1, 1, 1]).unwrap();
        MultiChannelProb::new(
            values
                .iter()
                .map(|&v| Volume::new(g, vec![v]).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn encode_maps_labels_to_nested_channels() {
        let cmap = ClassMap::kidney_default();
        let g = Geometry::with_shape([4, 1, 1]).unwrap();
        let labels = LabelMap::new(g, vec![0, 1, 2, 3]).unwrap();
        let prob = encode(&labels, &cmap).unwrap();
        let ch = |c: usize| prob.channel(c).data().to_vec();
        assert_eq!(ch(0), vec![0.0, 1.0, 1.0, 1.0]);
        assert_eq!(ch(1), vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(ch(2), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn decode_picks_deepest_confident_tier() {
        let cmap = ClassMap::kidney_default();
        let cases: &[(&[f32], u8)] = &[
            (&[0.9, 0.8, 0.7], 2),
            (&[0.9, 0.6, 0.2], 3),
            (&[0.9, 0.2, 0.2], 1),
            // Deeper channels dominate even when a shallower one is below
            // threshold.
            (&[0.4, 0.9, 0.9], 2),
            (&[0.1, 0.1, 0.1], 0),
        ];
        for &(probs, expected) in cases {
            let prob = single_voxel_prob(probs);
            let labels = decode(&prob, &cmap, 0.5).unwrap();
            assert_eq!(labels.data()[0], expected, "probs {probs:?}");
        }
    }

    #[test]
    fn decode_encode_roundtrip_on_all_labels() {
        let cmap = ClassMap::kidney_default();
        let g = Geometry::with_shape([4, 1, 1]).unwrap();
        let labels = LabelMap::new(g, vec![0, 1, 2, 3]).unwrap();
        let back = decode(&encode(&labels, &cmap).unwrap(), &cmap, 0.5).unwrap();
        assert_eq!(back, labels);
    }

    #[test]
    fn channels_are_monotone_under_nesting() {
        let cmap = ClassMap::kidney_default();
        let g = Geometry::with_shape([8, 8, 8]).unwrap();
        let data: Vec<u8> = (0..512).map(|i| ((i * 31 + 7) % 4) as u8).collect();
        let labels = LabelMap::new(g, data).unwrap();
        let prob = encode(&labels, &cmap).unwrap();
        for c in 0..prob.num_channels() - 1 {
            let shallow = prob.channel(c).data();
            let deep = prob.channel(c + 1).data();
            for v in 0..shallow.len() {
                assert!(deep[v] <= shallow[v]);
            }
        }
    }

    #[test]
    fn non_nested_class_map_is_rejected() {
        let entries = vec![
            ClassEntry {
                name: "a".into(),
                indices: BTreeSet::from([1, 2]),
            },
            ClassEntry {
                name: "b".into(),
                indices: BTreeSet::from([2, 3]),
            },
        ];
        assert!(matches!(
            ClassMap::new(entries, true),
            Err(Error::InvalidClassMap(_))
        ));
    }

    #[test]
    fn encode_rejects_unmapped_label() {
        let entries = vec![ClassEntry {
            name: "only_two".into(),
            indices: BTreeSet::from([2]),
        }];
        let cmap = ClassMap::new(entries, true).unwrap();
        let g = Geometry::with_shape([1, 1, 1]).unwrap();
        let labels = LabelMap::new(g, vec![3]).unwrap();
        assert!(matches!(
            encode(&labels, &cmap),
            Err(Error::LabelNotInClassMap { value: 3 })
        ));
    }

    #[test]
    fn parses_yaml_and_json_config_shapes() {
        let yaml = r#"
class_names:
- { "name": "kidney_and_mass", "index": [1,2,3] }
- { "name": "mass", "index": [2,3] }
- { "name": "tumor", "index": [2] }
sigmoid : true
"#;
        let cmap = ClassMap::from_config_str(yaml).unwrap();
        assert_eq!(cmap, ClassMap::kidney_default());
        assert_eq!(cmap.tier_label(0), 1);
        assert_eq!(cmap.tier_label(1), 3);
        assert_eq!(cmap.tier_label(2), 2);

        let json = r#"{"class_names":[{"name":"fg","index":[1,2,3]}],"sigmoid":true}"#;
        let cmap = ClassMap::from_config_str(json).unwrap();
        assert_eq!(cmap.num_classes(), 1);
        assert!(cmap.sigmoid_mode());
    }
}
