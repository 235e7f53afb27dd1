//! 3D cross-correlation with stride, dilation and zero padding, lowered to
//! GEMM through chunked im2col.

use serde::{Deserialize, Serialize};

use super::gemm::{sgemm, Layout};
use crate::error::{check_dim, Error, Result};
use crate::volume::{Shape, Triple, Volume};

/// Upper bound on the im2col scratch buffer, in floats.
const COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub kernel: Triple,
    pub stride: Triple,
    pub dilation: Triple,
    pub padding: Triple,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvParams {
    /// Stride 1, "same" padding `dilation * (k - 1) / 2`.
    pub fn same(in_channels: usize, out_channels: usize, kernel: Triple, dilation: Triple) -> Self {
        let padding = [0, 1, 2].map(|a| dilation[a] * (kernel[a] - 1) / 2);
        ConvParams {
            kernel,
            stride: [1, 1, 1],
            dilation,
            padding,
            in_channels,
            out_channels,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::same(in_channels, out_channels, [1, 1, 1], [1, 1, 1])
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .kernel
            .iter()
            .chain(&self.stride)
            .chain(&self.dilation)
            .chain([&self.in_channels, &self.out_channels]);
        if all.into_iter().any(|&v| v == 0) {
            return Err(Error::Unsupported(format!(
                "conv parameters must be >= 1 (padding excepted): {self:?}"
            )));
        }
        Ok(())
    }

    /// `floor((in + 2 pad - dilation (k - 1) - 1) / stride) + 1` per axis.
    pub fn output_dims(&self, input: Triple) -> Result<Triple> {
        let mut out = [0; 3];
        for (a, name) in ["d", "h", "w"].into_iter().enumerate() {
            let span = self.dilation[a] * (self.kernel[a] - 1) + 1;
            let padded = input[a] + 2 * self.padding[a];
            if padded < span {
                return Err(Error::InvalidShape(format!(
                    "axis `{name}`: padded extent {padded} smaller than dilated kernel span {span}"
                )));
            }
            out[a] = (padded - span) / self.stride[a] + 1;
        }
        Ok(out)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }
}

/// Geometry of one instance's convolution.
struct Geom {
    c: usize,
    input: Triple,
    output: Triple,
    p: ConvParams,
}

impl Geom {
    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn rows(&self) -> usize {
        self.c * self.p.kernel_volume()
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    /// Output depth planes processed per im2col chunk.
    fn planes_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.rows() * self.plane()).max(1)).clamp(1, self.output[0])
    }

    /// Input coordinate sampled by output coordinate `o` at kernel tap `k` on axis `a`.
    #[inline]
    fn source(&self, a: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.p.stride[a] + k * self.p.dilation[a]) as isize - self.p.padding[a] as isize;
        (pos >= 0 && (pos as usize) < self.input[a]).then_some(pos as usize)
    }

    /// For stride 1 on x: the contiguous range of output x whose source is valid.
    #[inline]
    fn x_range(&self, kx: usize) -> (usize, usize) {
        let off = (kx * self.p.dilation[2]) as isize - self.p.padding[2] as isize;
        let lo = (-off).max(0) as usize;
        let hi = ((self.input[2] as isize - off).max(0) as usize).min(self.output[2]);
        (lo.min(hi), hi)
    }

    /// Visit every (row, output plane z, output row y) of the chunk with the
    /// source row offset in the input (None when out of bounds).
    fn for_each_line(
        &self,
        z0: usize,
        z1: usize,
        mut f: impl FnMut(usize, usize, Option<usize>),
    ) {
        let [kd, kh, kw] = self.p.kernel;
        let [_, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        let chunk = (z1 - z0) * oh * ow;
        for c in 0..self.c {
            for tz in 0..kd {
                for ty in 0..kh {
                    for tx in 0..kw {
                        let row = ((c * kd + tz) * kh + ty) * kw + tx;
                        for oz in z0..z1 {
                            let iz = self.source(0, oz, tz);
                            for oy in 0..oh {
                                let iy = self.source(1, oy, ty);
                                let col_off = row * chunk + ((oz - z0) * oh + oy) * ow;
                                let src = match (iz, iy) {
                                    (Some(iz), Some(iy)) => Some(((c * self.input[0] + iz) * ih + iy) * iw),
                                    _ => None,
                                };
                                f(tx, col_off, src);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f32], z0: usize, z1: usize, col: &mut [f32]) {
        let ow = self.output[2];
        let sw = self.p.stride[2];
        self.for_each_line(z0, z1, |tx, col_off, src| {
            let line = &mut col[col_off..col_off + ow];
            match src {
                None => line.fill(0.0),
                Some(base) if sw == 1 => {
                    let (lo, hi) = self.x_range(tx);
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if hi > lo {
                        let off = (lo + tx * self.p.dilation[2]) - self.p.padding[2];
                        line[lo..hi].copy_from_slice(&x[base + off..base + off + (hi - lo)]);
                    }
                }
                Some(base) => {
                    for (ox, v) in line.iter_mut().enumerate() {
                        *v = self.source(2, ox, tx).map_or(0.0, |ix| x[base + ix]);
                    }
                }
            }
        });
    }

    fn col2im(&self, col: &[f32], z0: usize, z1: usize, dx: &mut [f32]) {
        let ow = self.output[2];
        let sw = self.p.stride[2];
        self.for_each_line(z0, z1, |tx, col_off, src| {
            let Some(base) = src else { return };
            let line = &col[col_off..col_off + ow];
            if sw == 1 {
                let (lo, hi) = self.x_range(tx);
                if hi > lo {
                    let off = (lo + tx * self.p.dilation[2]) - self.p.padding[2];
                    for (d, &g) in dx[base + off..base + off + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                        *d += g;
                    }
                }
            } else {
                for (ox, &g) in line.iter().enumerate() {
                    if let Some(ix) = self.source(2, ox, tx) {
                        dx[base + ix] += g;
                    }
                }
            }
        });
    }
}

fn check_conv_inputs(input: &Volume, weights: &Volume, bias: &[f32], p: &ConvParams) -> Result<Triple> {
    p.validate()?;
    check_dim("input channels", p.in_channels, input.shape().c)?;
    let ws = weights.shape();
    let expected = p.weight_shape();
    check_dim("weight out_channels", expected.n, ws.n)?;
    check_dim("weight in_channels", expected.c, ws.c)?;
    check_dim("weight kd", expected.d, ws.d)?;
    check_dim("weight kh", expected.h, ws.h)?;
    check_dim("weight kw", expected.w, ws.w)?;
    if !bias.is_empty() {
        check_dim("bias length", p.out_channels, bias.len())?;
    }
    p.output_dims(input.dims())
}

/// Cross-correlate `input` with `weights` (no kernel flip). An empty `bias`
/// means no bias.
pub fn conv3d(input: &Volume, weights: &Volume, bias: &[f32], p: &ConvParams) -> Result<Volume> {
    let out_dims = check_conv_inputs(input, weights, bias, p)?;
    let s = input.shape();
    let geom = Geom {
        c: s.c,
        input: s.dims(),
        output: out_dims,
        p: *p,
    };
    let out_shape = Shape::new(s.n, p.out_channels, out_dims[0], out_dims[1], out_dims[2]);
    let mut out = vec![0.0f32; out_shape.len()];
    let nout = geom.out_voxels();
    let nin = geom.in_voxels();
    let rows = geom.rows();
    let w = weights.data();
    for n in 0..s.n {
        let x = &input.data()[n * s.c * nin..(n + 1) * s.c * nin];
        let y = &mut out[n * p.out_channels * nout..(n + 1) * p.out_channels * nout];
        if p.is_pointwise() {
            sgemm(p.out_channels, rows, nout, 1.0, w, Layout::row_major(rows), x, Layout::row_major(nout), 0.0, y, Layout::row_major(nout));
        } else {
            let step = geom.planes_per_chunk();
            let mut col = vec![0.0f32; rows * step * geom.plane()];
            let mut z0 = 0;
            while z0 < out_dims[0] {
                let z1 = (z0 + step).min(out_dims[0]);
                let len = (z1 - z0) * geom.plane();
                let col = &mut col[..rows * len];
                geom.im2col(x, z0, z1, col);
                let off = z0 * geom.plane();
                sgemm(p.out_channels, rows, len, 1.0, w, Layout::row_major(rows), col, Layout::row_major(len), 0.0, &mut y[off..], Layout::row_major(nout));
                z0 = z1;
            }
        }
        if !bias.is_empty() {
            for (oc, &b) in bias.iter().enumerate() {
                y[oc * nout..(oc + 1) * nout].iter_mut().for_each(|v| *v += b);
            }
        }
    }
    Ok(Volume::from_vec(out_shape, out)?.with_spacing(input.spacing()))
}

/// Gradients of a convolution; each is `None` when not requested.
pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weights: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub(crate) fn conv3d_backward(
    input: &Volume,
    weights: &Volume,
    p: &ConvParams,
    dy: &Volume,
    need_input: bool,
    need_params: bool,
) -> ConvGrads {
    let s = input.shape();
    let geom = Geom {
        c: s.c,
        input: s.dims(),
        output: dy.dims(),
        p: *p,
    };
    let nout = geom.out_voxels();
    let nin = geom.in_voxels();
    let rows = geom.rows();
    let oc = p.out_channels;
    let w = weights.data();
    let mut dx = need_input.then(|| vec![0.0f32; input.len()]);
    let mut dw = need_params.then(|| vec![0.0f32; weights.len()]);
    let db = need_params.then(|| {
        (0..oc)
            .map(|c| {
                (0..s.n)
                    .map(|n| dy.channel(n, c).iter().map(|&v| v as f64).sum::<f64>())
                    .sum::<f64>() as f32
            })
            .collect()
    });

    for n in 0..s.n {
        let x = &input.data()[n * s.c * nin..(n + 1) * s.c * nin];
        let g = &dy.data()[n * oc * nout..(n + 1) * oc * nout];
        if p.is_pointwise() {
            if let Some(dw) = dw.as_mut() {
                sgemm(oc, nout, rows, 1.0, g, Layout::row_major(nout), x, Layout::transposed(nout), 1.0, dw, Layout::row_major(rows));
            }
            if let Some(dx) = dx.as_mut() {
                let dx = &mut dx[n * s.c * nin..(n + 1) * s.c * nin];
                sgemm(rows, oc, nout, 1.0, w, Layout::transposed(rows), g, Layout::row_major(nout), 0.0, dx, Layout::row_major(nout));
            }
            continue;
        }
        let step = geom.planes_per_chunk();
        let mut col = vec![0.0f32; rows * step * geom.plane()];
        let mut z0 = 0;
        while z0 < geom.output[0] {
            let z1 = (z0 + step).min(geom.output[0]);
            let len = (z1 - z0) * geom.plane();
            let off = z0 * geom.plane();
            let col = &mut col[..rows * len];
            if let Some(dw) = dw.as_mut() {
                geom.im2col(x, z0, z1, col);
                sgemm(oc, len, rows, 1.0, &g[off..], Layout::row_major(nout), col, Layout::transposed(len), 1.0, dw, Layout::row_major(rows));
            }
            if let Some(dx) = dx.as_mut() {
                sgemm(rows, oc, len, 1.0, w, Layout::transposed(rows), &g[off..], Layout::row_major(nout), 0.0, col, Layout::row_major(len));
                geom.col2im(col, z0, z1, &mut dx[n * s.c * nin..(n + 1) * s.c * nin]);
            }
            z0 = z1;
        }
    }
    ConvGrads {
        input: dx,
        weights: dw,
        bias: db,
    }
}
