//! Binary morphology and connected components on single-channel volumes.
//!
//! Foreground is any nonzero voxel; outputs use `1.0` / `0.0`.

use crate::volume::{Triple, Volume};

const FACE_OFFSETS: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

fn neighbor(p: Triple, o: [isize; 3], dims: Triple) -> Option<Triple> {
    let mut q = [0; 3];
    for a in 0..3 {
        let v = p[a] as isize + o[a];
        if v < 0 || v >= dims[a] as isize {
            return None;
        }
        q[a] = v as usize;
    }
    Some(q)
}

#[inline]
fn linear(p: Triple, dims: Triple) -> usize {
    (p[0] * dims[1] + p[1]) * dims[2] + p[2]
}

fn spatial_map(mask: &Volume, f: impl Fn(Triple) -> bool) -> Volume {
    let dims = mask.dims();
    let mut out = Volume::zeros(mask.shape().with_channels(1)).with_spacing(mask.spacing());
    let data = out.data_mut();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                if f([z, y, x]) {
                    data[linear([z, y, x], dims)] = 1.0;
                }
            }
        }
    }
    out
}

/// Erosion by the 6-connected cross. Out-of-volume voxels count as
/// foreground iff `border_foreground`.
pub fn erode(mask: &Volume, border_foreground: bool) -> Volume {
    let dims = mask.dims();
    let m = &mask.data()[..mask.shape().voxels()];
    spatial_map(mask, |p| {
        m[linear(p, dims)] != 0.0
            && FACE_OFFSETS.iter().all(|&o| match neighbor(p, o, dims) {
                Some(q) => m[linear(q, dims)] != 0.0,
                None => border_foreground,
            })
    })
}

/// Dilation by the 6-connected cross.
pub fn dilate(mask: &Volume) -> Volume {
    let dims = mask.dims();
    let m = &mask.data()[..mask.shape().voxels()];
    spatial_map(mask, |p| {
        m[linear(p, dims)] != 0.0
            || FACE_OFFSETS
                .iter()
                .any(|&o| neighbor(p, o, dims).is_some_and(|q| m[linear(q, dims)] != 0.0))
    })
}

/// Closing as if the volume continued with background; never removes voxels.
pub fn close(mask: &Volume) -> Volume {
    let padded = mask.pad([1, 1, 1], [1, 1, 1]);
    erode(&dilate(&padded), false)
        .crop([1, 1, 1], mask.dims())
        .expect("padding keeps the original box in range")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    /// 1-based label in `Labeling::labels`.
    pub label: u32,
    pub voxels: usize,
    pub start: Triple,
    pub size: Triple,
}

#[derive(Clone, Debug)]
pub struct Labeling {
    /// Per-voxel label, 0 for background. Labels follow raster order of each
    /// component's first voxel.
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

/// 26-connected component labeling by union-find over a raster scan.
pub fn label_components(mask: &Volume) -> Labeling {
    let dims = mask.dims();
    let n = mask.shape().voxels();
    let m = &mask.data()[..n];
    let mut parent: Vec<u32> = (0..n as u32).collect();
    // Neighbors preceding the current voxel in raster order.
    let mut back = Vec::with_capacity(13);
    for dz in -1isize..=0 {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                if (dz, dy, dx) < (0, 0, 0) {
                    back.push([dz, dy, dx]);
                }
            }
        }
    }
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = linear([z, y, x], dims);
                if m[i] == 0.0 {
                    continue;
                }
                for &o in &back {
                    if let Some(q) = neighbor([z, y, x], o, dims) {
                        let j = linear(q, dims);
                        if m[j] != 0.0 {
                            let (a, b) = (find(&mut parent, i as u32), find(&mut parent, j as u32));
                            if a != b {
                                let (lo, hi) = (a.min(b), a.max(b));
                                parent[hi as usize] = lo;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut labels = vec![0u32; n];
    let mut root_label = vec![0u32; n];
    let mut components: Vec<Component> = Vec::new();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = linear([z, y, x], dims);
                if m[i] == 0.0 {
                    continue;
                }
                let r = find(&mut parent, i as u32) as usize;
                if root_label[r] == 0 {
                    components.push(Component {
                        label: components.len() as u32 + 1,
                        voxels: 0,
                        start: [z, y, x],
                        size: [1, 1, 1],
                    });
                    root_label[r] = components.len() as u32;
                }
                let l = root_label[r];
                labels[i] = l;
                let c = &mut components[l as usize - 1];
                c.voxels += 1;
                let p = [z, y, x];
                for a in 0..3 {
                    let end = (c.start[a] + c.size[a]).max(p[a] + 1);
                    c.start[a] = c.start[a].min(p[a]);
                    c.size[a] = end - c.start[a];
                }
            }
        }
    }
    Labeling { labels, components }
}

/// Keep only the largest 26-connected component (earliest label on ties).
pub fn largest_component(mask: &Volume) -> Volume {
    let lab = label_components(mask);
    let best = lab.components.iter().max_by(|a, b| a.voxels.cmp(&b.voxels).then(b.label.cmp(&a.label)));
    let keep = best.map_or(0, |c| c.label);
    let mut out = Volume::zeros(mask.shape().with_channels(1)).with_spacing(mask.spacing());
    for (o, &l) in out.data_mut().iter_mut().zip(&lab.labels) {
        if keep != 0 && l == keep {
            *o = 1.0;
        }
    }
    out
}
