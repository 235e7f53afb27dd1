//! Max pooling with argmax bookkeeping for the adjoint.

use crate::error::{Error, Result};
use crate::volume::{Shape, Triple, Volume};

/// Max-pool each channel. Returns the pooled volume and, per output element,
/// the flat input index of the winning element. Ties go to the lowest linear
/// index. Every axis length must be a multiple of its stride.
pub fn maxpool3d(input: &Volume, kernel: Triple, stride: Triple) -> Result<(Volume, Vec<u32>)> {
    let s = input.shape();
    let dims = s.dims();
    let mut out_dims = [0; 3];
    for (a, name) in ["d", "h", "w"].into_iter().enumerate() {
        if kernel[a] == 0 || stride[a] == 0 {
            return Err(Error::Unsupported(format!("pooling kernel {kernel:?} / stride {stride:?}")));
        }
        if dims[a] % stride[a] != 0 {
            return Err(Error::NotDivisible {
                axis: name,
                len: dims[a],
                stride: stride[a],
            });
        }
        if dims[a] < kernel[a] {
            return Err(Error::InvalidShape(format!(
                "axis `{name}` of length {} shorter than pooling kernel {}",
                dims[a], kernel[a]
            )));
        }
        out_dims[a] = (dims[a] - kernel[a]) / stride[a] + 1;
    }
    let out_shape = s.with_dims(out_dims);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    let data = input.data();
    for n in 0..s.n {
        for c in 0..s.c {
            for oz in 0..out_dims[0] {
                for oy in 0..out_dims[1] {
                    for ox in 0..out_dims[2] {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_i = input.index(n, c, oz * stride[0], oy * stride[1], ox * stride[2]);
                        for kz in 0..kernel[0] {
                            for ky in 0..kernel[1] {
                                let row = input.index(n, c, oz * stride[0] + kz, oy * stride[1] + ky, ox * stride[2]);
                                for (kx, &v) in data[row..row + kernel[2]].iter().enumerate() {
                                    if v > best {
                                        best = v;
                                        best_i = row + kx;
                                    }
                                }
                            }
                        }
                        out.push(data[best_i]);
                        argmax.push(best_i as u32);
                    }
                }
            }
        }
    }
    let sp = input.spacing();
    let spacing = [0, 1, 2].map(|a| sp[a] * stride[a] as f64);
    Ok((Volume::from_vec(out_shape, out)?.with_spacing(spacing), argmax))
}

pub(crate) fn maxpool3d_backward(input_shape: Shape, argmax: &[u32], dy: &[f32]) -> Vec<f32> {
    let mut dx = vec![0.0f32; input_shape.len()];
    for (&i, &g) in argmax.iter().zip(dy) {
        dx[i as usize] += g;
    }
    dx
}
