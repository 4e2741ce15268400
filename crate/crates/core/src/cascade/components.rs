use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volcore::{Dims, LabelMask, VoxelBox};

/// One 6-connected foreground region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    /// 1-based rank after sorting; matches the value in [`ComponentMap::labels`].
    pub id: u32,
    pub voxel_count: usize,
    pub bbox: VoxelBox,
}

/// Component list plus a per-voxel id map (0 = background).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentMap {
    pub dims: Dims,
    pub labels: Vec<u32>,
    pub components: Vec<Component>,
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        let p = parent[i as usize];
        parent[i as usize] = parent[p as usize];
        i = p;
    }
    i
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Face-adjacent labelling of `fg` on `dims`, components sorted by voxel count
/// (descending), then by bounding-box origin `(z, y, x)`, then by first voxel.
pub fn connected_components(fg: &[bool], dims: Dims) -> Result<ComponentMap> {
    let [nz, ny, nx] = dims;
    if fg.len() != nz * ny * nx {
        return Err(Error::Shape(format!("{} mask voxels for grid {dims:?}", fg.len())));
    }
    // two-pass union-find over provisional run labels
    let mut prov = vec![0u32; fg.len()];
    let mut parent: Vec<u32> = vec![0];
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if fg[i] {
                    let neighbours = [
                        (x > 0).then(|| prov[i - 1]),
                        (y > 0).then(|| prov[i - nx]),
                        (z > 0).then(|| prov[i - nx * ny]),
                    ];
                    let mut label = 0;
                    for n in neighbours.into_iter().flatten().filter(|&n| n != 0) {
                        if label == 0 {
                            label = n;
                        } else {
                            union(&mut parent, label, n);
                        }
                    }
                    if label == 0 {
                        label = parent.len() as u32;
                        parent.push(label);
                    }
                    prov[i] = label;
                }
                i += 1;
            }
        }
    }

    struct Acc {
        count: usize,
        lo: [i64; 3],
        hi: [i64; 3],
        first: usize,
    }
    let mut root_slot = vec![u32::MAX; parent.len()];
    let mut accs: Vec<Acc> = Vec::new();
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if prov[i] != 0 {
                    let r = find(&mut parent, prov[i]) as usize;
                    if root_slot[r] == u32::MAX {
                        root_slot[r] = accs.len() as u32;
                        accs.push(Acc {
                            count: 0,
                            lo: [i64::MAX; 3],
                            hi: [i64::MIN; 3],
                            first: i,
                        });
                    }
                    let a = &mut accs[root_slot[r] as usize];
                    a.count += 1;
                    let p = [z as i64, y as i64, x as i64];
                    for ax in 0..3 {
                        a.lo[ax] = a.lo[ax].min(p[ax]);
                        a.hi[ax] = a.hi[ax].max(p[ax]);
                    }
                    prov[i] = root_slot[r];
                }
                i += 1;
            }
        }
    }

    let mut order: Vec<usize> = (0..accs.len()).collect();
    order.sort_by(|&a, &b| {
        let (a, b) = (&accs[a], &accs[b]);
        b.count.cmp(&a.count).then(a.lo.cmp(&b.lo)).then(a.first.cmp(&b.first))
    });
    let mut rank = vec![0u32; accs.len()];
    for (r, &slot) in order.iter().enumerate() {
        rank[slot] = r as u32 + 1;
    }
    let labels = fg
        .iter()
        .zip(&prov)
        .map(|(&f, &slot)| if f { rank[slot as usize] } else { 0 })
        .collect();
    let components = order
        .iter()
        .enumerate()
        .map(|(r, &slot)| Component {
            id: r as u32 + 1,
            voxel_count: accs[slot].count,
            bbox: VoxelBox {
                lo: accs[slot].lo,
                hi: accs[slot].hi,
            },
        })
        .collect();
    Ok(ComponentMap {
        dims,
        labels,
        components,
    })
}

/// Components of a label mask's foreground (any label >= 1).
pub fn mask_components(mask: &LabelMask) -> ComponentMap {
    connected_components(&mask.foreground(), mask.dims()).expect("mask dims are consistent")
}

/// Keeps the `keep_k` largest foreground components with their original labels.
pub fn postprocess_stage(mask: &LabelMask, keep_k: usize) -> Result<LabelMask> {
    if keep_k == 0 {
        return Err(Error::Misuse("keep_k must be at least 1".into()));
    }
    let map = mask_components(mask);
    let labels = mask
        .labels()
        .iter()
        .zip(&map.labels)
        .map(|(&l, &c)| if c != 0 && c as usize <= keep_k { l } else { 0 })
        .collect();
    LabelMask::new(mask.dims(), mask.spacing(), labels)
}

/// Per-axis dilation in voxels for a margin in millimetres.
pub fn margin_voxels(margin_mm: [f32; 3], spacing: [f32; 3]) -> [i64; 3] {
    std::array::from_fn(|a| (f64::from(margin_mm[a]) / f64::from(spacing[a])).round() as i64)
}

/// Bounding boxes of the `k` largest components, dilated by `margin_mm`.
pub fn roi_boxes(mask: &LabelMask, k: usize, margin_mm: [f32; 3]) -> Vec<VoxelBox> {
    let by = margin_voxels(margin_mm, mask.spacing());
    mask_components(mask)
        .components
        .iter()
        .take(k)
        .map(|c| c.bbox.dilate(by))
        .collect()
}
