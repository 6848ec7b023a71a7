//! Binary post-processing of decoded label maps: connected-component
//! analysis, small-component removal, and cyst-rim correction.

use crate::error::Result;
use crate::volume::{Geometry, LabelMap, LABEL_CYST, LABEL_TUMOR};

/// Voxel adjacency: face neighbors only, or faces + edges + corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    /// Neighbor offsets with a negative linear index delta, i.e. the
    /// neighbors already visited in a forward scan.
    fn backward_offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if (dx, dy, dz) == (0, 0, 0) {
                        continue;
                    }
                    if matches!(self, Connectivity::Six) && dx.abs() + dy.abs() + dz.abs() != 1 {
                        continue;
                    }
                    // Backward in scan order: z, then y, then x.
                    if dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0))) {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Result of labeling a binary mask: per-voxel component ids (0 means
/// background) and per-component voxel counts. Ids are contiguous from 1,
/// assigned by first-encountered voxel in scan order (x fastest).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentLabeling {
    pub component_id: Vec<u32>,
    pub sizes: Vec<usize>,
}

impl ComponentLabeling {
    pub fn num_components(&self) -> usize {
        self.sizes.len()
    }

    pub fn size_of(&self, id: u32) -> usize {
        self.sizes[(id - 1) as usize]
    }
}

/// Label maximal connected regions of the nonzero voxels of `mask`.
///
/// Two-pass union-find over a forward scan: each voxel unions with its
/// already-visited neighbors, then ids are compacted in scan order of the
/// component's first voxel.
pub fn connected_components(mask: &LabelMap, connectivity: Connectivity) -> ComponentLabeling {
    connected_components_raw(mask.data(), mask.geometry(), connectivity)
}

fn connected_components_raw(
    data: &[u8],
    geom: &Geometry,
    connectivity: Connectivity,
) -> ComponentLabeling {
    let n = geom.num_voxels();
    let [nx, ny, nz] = geom.shape;
    let offsets = connectivity.backward_offsets();

    let mut parent: Vec<u32> = (0..n as u32).collect();

    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }

    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let lin = geom.index(i, j, k);
                if data[lin] == 0 {
                    continue;
                }
                for off in &offsets {
                    let ni = i as i64 + off[0];
                    let nj = j as i64 + off[1];
                    let nk = k as i64 + off[2];
                    if ni < 0 || nj < 0 || nk < 0 {
                        continue;
                    }
                    let (ni, nj, nk) = (ni as usize, nj as usize, nk as usize);
                    if ni >= nx || nj >= ny || nk >= nz {
                        continue;
                    }
                    let nlin = geom.index(ni, nj, nk);
                    if data[nlin] == 0 {
                        continue;
                    }
                    let ra = find(&mut parent, lin as u32);
                    let rb = find(&mut parent, nlin as u32);
                    if ra != rb {
                        // Union toward the smaller root keeps the component
                        // representative at its first scan-order voxel.
                        if ra < rb {
                            parent[rb as usize] = ra;
                        } else {
                            parent[ra as usize] = rb;
                        }
                    }
                }
            }
        }
    }

    let mut component_id = vec![0u32; n];
    let mut sizes: Vec<usize> = Vec::new();
    let mut root_to_id: std::collections::HashMap<u32, u32> = std::collections::HashMap::new();
    for lin in 0..n {
        if data[lin] == 0 {
            continue;
        }
        let root = find(&mut parent, lin as u32);
        let id = *root_to_id.entry(root).or_insert_with(|| {
            sizes.push(0);
            sizes.len() as u32
        });
        component_id[lin] = id;
        sizes[(id - 1) as usize] += 1;
    }
    ComponentLabeling { component_id, sizes }
}

/// Remove connected components of the merged foreground (any nonzero label)
/// that are smaller than `min_size` voxels.
///
/// The merged-foreground size governs: a small tumor inside a large kidney
/// component survives because the component is measured across all classes.
/// Components of exactly `min_size` voxels are kept.
pub fn remove_small_components(labels: &LabelMap, min_size: usize) -> LabelMap {
    let comps = connected_components(labels, Connectivity::TwentySix);
    let mut data = labels.data().to_vec();
    for (v, slot) in data.iter_mut().enumerate() {
        let id = comps.component_id[v];
        if id != 0 && comps.size_of(id) < min_size {
            *slot = 0;
        }
    }
    LabelMap::new(*labels.geometry(), data).expect("removal only clears voxels")
}

/// Relabel cyst components that are thin shells around tumors.
///
/// A tumor cannot have a cystic outline, so any cyst connected component
/// entirely contained in the `rim_voxels`-step dilation of the tumor mask is
/// flipped to tumor. Cyst components extending beyond the dilation are left
/// alone, as are all background and kidney voxels. With no tumor present the
/// input is returned unchanged.
pub fn fix_cyst_rim(labels: &LabelMap, rim_voxels: usize) -> LabelMap {
    let geom = labels.geometry();
    let n = geom.num_voxels();

    let tumor: Vec<u8> = labels
        .data()
        .iter()
        .map(|&v| u8::from(v == LABEL_TUMOR))
        .collect();
    if !tumor.iter().any(|&v| v != 0) {
        return labels.clone();
    }

    let dilated = dilate(&tumor, geom, rim_voxels);

    let cyst: Vec<u8> = labels
        .data()
        .iter()
        .map(|&v| u8::from(v == LABEL_CYST))
        .collect();
    let comps = connected_components_raw(&cyst, geom, Connectivity::TwentySix);
    if comps.num_components() == 0 {
        return labels.clone();
    }

    let mut contained = vec![true; comps.num_components()];
    for v in 0..n {
        let id = comps.component_id[v];
        if id != 0 && dilated[v] == 0 {
            contained[(id - 1) as usize] = false;
        }
    }

    let mut data = labels.data().to_vec();
    for v in 0..n {
        let id = comps.component_id[v];
        if id != 0 && contained[(id - 1) as usize] {
            data[v] = LABEL_TUMOR;
        }
    }
    LabelMap::new(*geom, data).expect("relabeling stays in range")
}

/// `iterations`-step morphological dilation with the 26-neighborhood.
fn dilate(mask: &[u8], geom: &Geometry, iterations: usize) -> Vec<u8> {
    let [nx, ny, nz] = geom.shape;
    let mut current = mask.to_vec();
    let mut next = vec![0u8; current.len()];
    for _ in 0..iterations {
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let lin = geom.index(i, j, k);
                    if current[lin] != 0 {
                        next[lin] = 1;
                        continue;
                    }
                    let mut hit = 0u8;
                    'scan: for dz in -1i64..=1 {
                        let kk = k as i64 + dz;
                        if kk < 0 || kk >= nz as i64 {
                            continue;
                        }
                        for dy in -1i64..=1 {
                            let jj = j as i64 + dy;
                            if jj < 0 || jj >= ny as i64 {
                                continue;
                            }
                            for dx in -1i64..=1 {
                                let ii = i as i64 + dx;
                                if ii < 0 || ii >= nx as i64 {
                                    continue;
                                }
                                if current[geom.index(ii as usize, jj as usize, kk as usize)] != 0 {
                                    hit = 1;
                                    break 'scan;
                                }
                            }
                        }
                    }
                    next[lin] = hit;
                }
            }
        }
        std::mem::swap(&mut current, &mut next);
    }
    current
}

/// Convenience wrapper running both cleanup steps in pipeline order.
pub fn postprocess(labels: &LabelMap, min_size: usize, rim_voxels: usize) -> Result<LabelMap> {
    Ok(fix_cyst_rim(&remove_small_components(labels, min_size), rim_voxels))
}
