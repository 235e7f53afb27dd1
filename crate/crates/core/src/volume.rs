//! Dense rank-5 volumes `(n, c, d, h, w)` with physical voxel spacing.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Per-axis integer triple in `(z, y, x)` order.
pub type Triple = [usize; 3];

/// Physical voxel spacing `(sz, sy, sx)` in millimeters.
pub type Spacing = [f64; 3];

pub const UNIT_SPACING: Spacing = [1.0, 1.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Shape { n, c, d, h, w }
    }

    /// Single-instance, single-channel shape with the given spatial extent.
    pub const fn spatial(dims: Triple) -> Self {
        Shape::new(1, 1, dims[0], dims[1], dims[2])
    }

    pub const fn dims(&self) -> Triple {
        [self.d, self.h, self.w]
    }

    pub const fn voxels(&self) -> usize {
        self.d * self.h * self.w
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.voxels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn with_dims(self, dims: Triple) -> Self {
        Shape {
            d: dims[0],
            h: dims[1],
            w: dims[2],
            ..self
        }
    }

    pub fn as_array(&self) -> [usize; 5] {
        [self.n, self.c, self.d, self.h, self.w]
    }

    fn validate(&self) -> Result<()> {
        if self.as_array().contains(&0) {
            return Err(Error::InvalidShape(format!(
                "zero-sized dimension in {:?}; use Volume::empty for an empty volume",
                self.as_array()
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}x{}", self.n, self.c, self.d, self.h, self.w)
    }
}

/// Row-major `f32` volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: Shape,
    data: Vec<f32>,
    spacing: Spacing,
}

impl Volume {
    /// # Panics
    /// On a zero-sized dimension.
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        if let Err(e) = shape.validate() {
            panic!("{e}");
        }
        Volume {
            shape,
            data: vec![value; shape.len()],
            spacing: UNIT_SPACING,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        check_dim("data length", shape.len(), data.len())?;
        Ok(Volume {
            shape,
            data,
            spacing: UNIT_SPACING,
        })
    }

    /// A 1x1x1x1x1 volume holding `value`.
    pub fn scalar(value: f32) -> Self {
        Volume::full(Shape::new(1, 1, 1, 1, 1), value)
    }

    /// The only way to obtain a volume with zero elements.
    pub fn empty() -> Self {
        Volume {
            shape: Shape::new(0, 0, 0, 0, 0),
            data: Vec::new(),
            spacing: UNIT_SPACING,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn set_spacing(&mut self, spacing: Spacing) {
        self.spacing = spacing;
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> Triple {
        self.shape.dims()
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// Value of a one-element volume.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar(self.data.len()));
        }
        Ok(self.data[0])
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        (((n * s.c + c) * s.d + z) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, z: usize, y: usize, x: usize, v: f32) {
        let i = self.index(n, c, z, y, x);
        self.data[i] = v;
    }

    /// Spatial voxel value of a single-instance, single-channel volume.
    #[inline]
    pub fn at(&self, [z, y, x]: Triple) -> f32 {
        self.get(0, 0, z, y, x)
    }

    /// Contiguous `d*h*w` slice of one (instance, channel) plane stack.
    pub fn channel(&self, n: usize, c: usize) -> &[f32] {
        let v = self.shape.voxels();
        let start = (n * self.shape.c + c) * v;
        &self.data[start..start + v]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let v = self.shape.voxels();
        let start = (n * self.shape.c + c) * v;
        &mut self.data[start..start + v]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            spacing: self.spacing,
        }
    }

    pub fn zip_map(&self, other: &Volume, f: impl Fn(f32, f32) -> f32) -> Result<Volume> {
        self.check_same_shape(other)?;
        Ok(Volume {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            spacing: self.spacing,
        })
    }

    pub fn check_same_shape(&self, other: &Volume) -> Result<()> {
        let a = self.shape.as_array();
        let b = other.shape.as_array();
        for (i, name) in ["n", "c", "d", "h", "w"].into_iter().enumerate() {
            check_dim(name, a[i], b[i])?;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs_diff(&self, other: &Volume) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Binarize at `threshold` (value `>= threshold` becomes 1).
    pub fn binarize(&self, threshold: f32) -> Volume {
        self.map(|v| if v >= threshold { 1.0 } else { 0.0 })
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Copy the spatial sub-box `start..start+size` of every (instance, channel).
    pub fn crop(&self, start: Triple, size: Triple) -> Result<Volume> {
        let dims = self.dims();
        for (axis, name) in ["d", "h", "w"].into_iter().enumerate() {
            if size[axis] == 0 || start[axis] + size[axis] > dims[axis] {
                return Err(Error::BBox(format!(
                    "crop {start:?}+{size:?} exceeds extent {dims:?} on axis `{name}`"
                )));
            }
        }
        let out_shape = self.shape.with_dims(size);
        let mut out = Vec::with_capacity(out_shape.len());
        for n in 0..self.shape.n {
            for c in 0..self.shape.c {
                for z in 0..size[0] {
                    for y in 0..size[1] {
                        let i = self.index(n, c, start[0] + z, start[1] + y, start[2]);
                        out.extend_from_slice(&self.data[i..i + size[2]]);
                    }
                }
            }
        }
        Ok(Volume {
            shape: out_shape,
            data: out,
            spacing: self.spacing,
        })
    }

    /// Zero-pad spatially: `before` voxels ahead and `after` voxels behind each axis.
    pub fn pad(&self, before: Triple, after: Triple) -> Volume {
        let dims = self.dims();
        let new_dims = [
            dims[0] + before[0] + after[0],
            dims[1] + before[1] + after[1],
            dims[2] + before[2] + after[2],
        ];
        let mut out = Volume::zeros(self.shape.with_dims(new_dims)).with_spacing(self.spacing);
        out.write_box(self, before);
        out
    }

    /// Overwrite the box at `start` with the contents of `src` (same n and c).
    pub(crate) fn write_box(&mut self, src: &Volume, start: Triple) {
        let s = src.shape;
        for n in 0..s.n {
            for c in 0..s.c {
                for z in 0..s.d {
                    for y in 0..s.h {
                        let si = src.index(n, c, z, y, 0);
                        let di = self.index(n, c, start[0] + z, start[1] + y, start[2]);
                        self.data[di..di + s.w].copy_from_slice(&src.data[si..si + s.w]);
                    }
                }
            }
        }
    }

    /// Iterate spatial coordinates of nonzero voxels in a single-channel volume.
    pub fn nonzero_coords(&self) -> impl Iterator<Item = Triple> + '_ {
        let [_, h, w] = self.dims();
        self.data[..self.shape.voxels()]
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(move |(i, _)| [i / (h * w), (i / w) % h, i % w])
    }
}
