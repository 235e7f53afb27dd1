//! Transposed convolution with kernel equal to stride (non-overlapping).

use super::gemm::{sgemm, Layout};
use crate::error::{check_dim, Error, Result};
use crate::volume::{Shape, Triple, Volume};

/// `weights` are shaped `(in_channels, out_channels, kd, kh, kw)` and the
/// kernel must equal `stride`, so every output voxel receives exactly one
/// tap per input channel.
pub fn upconv3d(input: &Volume, weights: &Volume, stride: Triple) -> Result<Volume> {
    let ws = weights.shape();
    let kernel = [ws.d, ws.h, ws.w];
    if kernel != stride {
        return Err(Error::Unsupported(format!(
            "transposed convolution needs kernel == stride, got kernel {kernel:?} stride {stride:?}"
        )));
    }
    let s = input.shape();
    check_dim("weight in_channels", s.c, ws.n)?;
    let oc = ws.c;
    let taps: usize = kernel.iter().product();
    let nin = s.voxels();
    let out_dims = [0, 1, 2].map(|a| s.dims()[a] * stride[a]);
    let out_shape = Shape::new(s.n, oc, out_dims[0], out_dims[1], out_dims[2]);
    let mut out = vec![0.0f32; out_shape.len()];
    let mut scratch = vec![0.0f32; oc * taps * nin];
    for n in 0..s.n {
        let x = &input.data()[n * s.c * nin..(n + 1) * s.c * nin];
        // scratch[(oc, tap), voxel] = sum_ic w[ic, (oc, tap)] * x[ic, voxel]
        sgemm(oc * taps, s.c, nin, 1.0, weights.data(), Layout::transposed(oc * taps), x, Layout::row_major(nin), 0.0, &mut scratch, Layout::row_major(nin));
        let y = &mut out[n * oc * out_shape.voxels()..(n + 1) * oc * out_shape.voxels()];
        scatter(&scratch, s.dims(), stride, oc, y, |dst, src| *dst = src);
    }
    let sp = input.spacing();
    let spacing = [0, 1, 2].map(|a| sp[a] / stride[a] as f64);
    Ok(Volume::from_vec(out_shape, out)?.with_spacing(spacing))
}

/// Walk the (oc, tap, voxel) scratch layout against the upsampled output.
fn scatter(
    scratch: &[f32],
    in_dims: Triple,
    stride: Triple,
    oc: usize,
    out: &mut [f32],
    f: impl Fn(&mut f32, f32),
) {
    let [d, h, w] = in_dims;
    let [sd, sh, sw] = stride;
    let (od, oh, ow) = (d * sd, h * sh, w * sw);
    let nin = d * h * w;
    let mut i = 0;
    for c in 0..oc {
        for a in 0..sd {
            for b in 0..sh {
                for e in 0..sw {
                    for z in 0..d {
                        for y in 0..h {
                            let row = ((c * od + z * sd + a) * oh + y * sh + b) * ow + e;
                            for x in 0..w {
                                f(&mut out[row + x * sw], scratch[i]);
                                i += 1;
                            }
                        }
                    }
                    debug_assert_eq!(i % nin, 0);
                }
            }
        }
    }
}

/// Gather the output gradient into the (oc, tap, voxel) layout.
fn gather(dy: &[f32], in_dims: Triple, stride: Triple, oc: usize) -> Vec<f32> {
    let taps: usize = stride.iter().product();
    let nin: usize = in_dims.iter().product();
    let mut g = vec![0.0f32; oc * taps * nin];
    let [d, h, w] = in_dims;
    let [sd, sh, sw] = stride;
    let (od, oh, ow) = (d * sd, h * sh, w * sw);
    let mut i = 0;
    for c in 0..oc {
        for a in 0..sd {
            for b in 0..sh {
                for e in 0..sw {
                    for z in 0..d {
                        for y in 0..h {
                            let row = ((c * od + z * sd + a) * oh + y * sh + b) * ow + e;
                            for x in 0..w {
                                g[i] = dy[row + x * sw];
                                i += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    g
}

pub(crate) fn upconv3d_backward(
    input: &Volume,
    weights: &Volume,
    stride: Triple,
    dy: &Volume,
    need_input: bool,
    need_weights: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let s = input.shape();
    let oc = weights.shape().c;
    let taps: usize = stride.iter().product();
    let nin = s.voxels();
    let nout = dy.shape().voxels();
    let cols = oc * taps;
    let mut dx = need_input.then(|| vec![0.0f32; input.len()]);
    let mut dw = need_weights.then(|| vec![0.0f32; weights.len()]);
    for n in 0..s.n {
        let g = gather(&dy.data()[n * oc * nout..(n + 1) * oc * nout], s.dims(), stride, oc);
        if let Some(dx) = dx.as_mut() {
            let dx = &mut dx[n * s.c * nin..(n + 1) * s.c * nin];
            sgemm(s.c, cols, nin, 1.0, weights.data(), Layout::row_major(cols), &g, Layout::row_major(nin), 0.0, dx, Layout::row_major(nin));
        }
        if let Some(dw) = dw.as_mut() {
            let x = &input.data()[n * s.c * nin..(n + 1) * s.c * nin];
            sgemm(s.c, nin, cols, 1.0, x, Layout::row_major(nin), &g, Layout::transposed(nin), 1.0, dw, Layout::row_major(cols));
        }
    }
    (dx, dw)
}
