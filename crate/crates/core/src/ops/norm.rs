//! Instance normalization with learnable per-channel affine.

use crate::error::{check_dim, Result};
use crate::volume::Volume;

pub const DEFAULT_EPS: f32 = 1e-5;

/// Per-(instance, channel) statistics kept for the adjoint.
#[derive(Clone, Debug)]
pub(crate) struct NormStats {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

pub fn instance_norm(input: &Volume, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Volume> {
    Ok(instance_norm_with_stats(input, gamma, beta, eps)?.0)
}

pub(crate) fn instance_norm_with_stats(
    input: &Volume,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<(Volume, NormStats)> {
    let s = input.shape();
    check_dim("gamma length", s.c, gamma.len())?;
    check_dim("beta length", s.c, beta.len())?;
    let mut out = input.clone();
    let mut stats = NormStats {
        mean: Vec::with_capacity(s.n * s.c),
        inv_std: Vec::with_capacity(s.n * s.c),
    };
    let m = s.voxels() as f64;
    for n in 0..s.n {
        for c in 0..s.c {
            let x = input.channel(n, c);
            let mean = x.iter().map(|&v| v as f64).sum::<f64>() / m;
            let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m;
            let inv_std = 1.0 / (var + eps as f64).sqrt();
            let (g, b) = (gamma[c] as f64, beta[c] as f64);
            for (y, &v) in out.channel_mut(n, c).iter_mut().zip(x) {
                *y = (g * (v as f64 - mean) * inv_std + b) as f32;
            }
            stats.mean.push(mean as f32);
            stats.inv_std.push(inv_std as f32);
        }
    }
    Ok((out, stats))
}

pub(crate) struct NormGrads {
    pub input: Option<Vec<f32>>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

pub(crate) fn instance_norm_backward(
    input: &Volume,
    gamma: &[f32],
    stats: &NormStats,
    dy: &Volume,
    need_input: bool,
) -> NormGrads {
    let s = input.shape();
    let m = s.voxels() as f64;
    let mut dgamma = vec![0.0f64; s.c];
    let mut dbeta = vec![0.0f64; s.c];
    let mut dx = need_input.then(|| vec![0.0f32; input.len()]);
    for n in 0..s.n {
        for c in 0..s.c {
            let k = n * s.c + c;
            let (mean, inv_std) = (stats.mean[k] as f64, stats.inv_std[k] as f64);
            let x = input.channel(n, c);
            let g = dy.channel(n, c);
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for (&xv, &gv) in x.iter().zip(g) {
                let xhat = (xv as f64 - mean) * inv_std;
                sum_g += gv as f64;
                sum_gx += gv as f64 * xhat;
            }
            dgamma[c] += sum_gx;
            dbeta[c] += sum_g;
            if let Some(dx) = dx.as_mut() {
                let scale = gamma[c] as f64 * inv_std / m;
                let base = k * s.voxels();
                for (i, (&xv, &gv)) in x.iter().zip(g).enumerate() {
                    let xhat = (xv as f64 - mean) * inv_std;
                    dx[base + i] = (scale * (m * gv as f64 - sum_g - xhat * sum_gx)) as f32;
                }
            }
        }
    }
    NormGrads {
        input: dx,
        gamma: dgamma.into_iter().map(|v| v as f32).collect(),
        beta: dbeta.into_iter().map(|v| v as f32).collect(),
    }
}
