//! Overlap and surface-distance metrics on binary volumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Spacing, Triple, Volume};

/// ASD assigned to a case whose prediction misses the lesion entirely.
pub const FAILURE_ASD_MM: f64 = 50.0;
pub const BINARIZE_AT: f32 = 0.5;

fn counts(p: &Volume, g: &Volume) -> Result<(usize, usize, usize)> {
    p.check_same_shape(g)?;
    let mut inter = 0;
    let mut np = 0;
    let mut ng = 0;
    for (&a, &b) in p.data().iter().zip(g.data()) {
        let (a, b) = (a != 0.0, b != 0.0);
        inter += (a && b) as usize;
        np += a as usize;
        ng += b as usize;
    }
    Ok((inter, np, ng))
}

/// `2|P∩G| / (|P| + |G|)`, 1 when both are empty.
pub fn dsc(p: &Volume, g: &Volume) -> Result<f64> {
    let (i, np, ng) = counts(p, g)?;
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (np + ng) as f64)
}

pub fn recall(p: &Volume, g: &Volume) -> Result<f64> {
    let (i, _, ng) = counts(p, g)?;
    if ng == 0 {
        return Err(Error::Empty("ground truth"));
    }
    Ok(i as f64 / ng as f64)
}

const FACES: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

/// Foreground voxels with a background face neighbor (outside is background).
pub fn surface_voxels(v: &Volume) -> Vec<Triple> {
    let [d, h, w] = v.dims();
    let m = v.channel(0, 0);
    let fg = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && m[((z as usize) * h + y as usize) * w + x as usize] != 0.0
    };
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                if fg(zi, yi, xi) && FACES.iter().any(|o| !fg(zi + o[0], yi + o[1], xi + o[2])) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Surface voxel positions in millimeters.
pub fn extract_surface(v: &Volume, spacing: Spacing) -> Vec<[f64; 3]> {
    surface_voxels(v)
        .into_iter()
        .map(|p| [0, 1, 2].map(|a| p[a] as f64 * spacing[a]))
        .collect()
}

/// Squared distance along one axis to the nearest seed, by the lower
/// envelope of parabolas rooted at sample positions `i·step`.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |i: usize| i as f64 * step;
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let r = v[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[r] + pos(r) * pos(r))) / (2.0 * (pos(q) - pos(r)));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere.
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(p) {
            k += 1;
        }
        let d = pos(p) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// voxel in `seeds`, via separable lower envelopes.
pub fn squared_distance_map(dims: Triple, seeds: &[Triple], spacing: Spacing) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut g = vec![f64::INFINITY; d * h * w];
    for s in seeds {
        g[(s[0] * h + s[1]) * w + s[2]] = 0.0;
    }
    let n = d.max(h).max(w);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let strides = [h * w, w, 1];
    for axis in [2usize, 1, 0] {
        let len = dims[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for t in 0..len {
                    f[t] = g[base + t * strides[axis]];
                }
                edt_1d(&f[..len], spacing[axis], &mut out[..len], &mut v[..len], &mut z[..len + 1]);
                for t in 0..len {
                    g[base + t * strides[axis]] = out[t];
                }
            }
        }
    }
    g
}

/// Average symmetric surface distance in millimeters, or the failure
/// penalty when `p` misses `g` entirely.
pub fn asd(p: &Volume, g: &Volume, spacing: Spacing) -> Result<f64> {
    if recall(p, g)? == 0.0 {
        return Ok(FAILURE_ASD_MM);
    }
    let dims = g.dims();
    let sp = surface_voxels(p);
    let sg = surface_voxels(g);
    let to_g = squared_distance_map(dims, &sg, spacing);
    let to_p = squared_distance_map(dims, &sp, spacing);
    let idx = |q: &Triple| (q[0] * dims[1] + q[1]) * dims[2] + q[2];
    let total: f64 = sp.iter().map(|q| to_g[idx(q)].sqrt()).sum::<f64>() + sg.iter().map(|q| to_p[idx(q)].sqrt()).sum::<f64>();
    Ok(total / (sp.len() + sg.len()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub dsc: f64,
    pub recall: f64,
    pub asd: f64,
    pub failed: bool,
}

/// Score a probability map against a binary annotation.
pub fn score_case(prob: &Volume, gt: &Volume, spacing: Spacing) -> Result<CaseScores> {
    let p = prob.binarize(BINARIZE_AT);
    let r = recall(&p, gt)?;
    Ok(CaseScores {
        dsc: dsc(&p, gt)?,
        recall: r,
        asd: asd(&p, gt, spacing)?,
        failed: r == 0.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Stat> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Stat { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cases: usize,
    pub dsc: Stat,
    pub recall: Stat,
    pub asd: Stat,
    pub failures: usize,
}

pub fn aggregate(cases: &[CaseScores]) -> Result<Summary> {
    let stat = |f: fn(&CaseScores) -> f64| Stat::of(cases.iter().map(f)).ok_or(Error::Empty("case list"));
    Ok(Summary {
        cases: cases.len(),
        dsc: stat(|c| c.dsc)?,
        recall: stat(|c| c.recall)?,
        asd: stat(|c| c.asd)?,
        failures: cases.iter().filter(|c| c.failed).count(),
    })
}
