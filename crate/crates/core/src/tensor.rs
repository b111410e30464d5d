//! In-memory data types shared by every pipeline stage.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// W×H×K activation grid of one conv layer.
///
/// Storage is row-major over `(y, x, k)` with 1-based grid coordinates, so
/// the channel vector of a location is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidDimensions(format!(
                "tensor {width}x{height}x{channels} has a zero extent"
            )));
        }
        let expected = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::InvalidDimensions("tensor size overflows".into()))?;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a tensor from `f(x, y, k)` with 1-based coordinates.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 1..=height {
            for x in 1..=width {
                for k in 1..=channels {
                    data.push(f(x, y, k));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Number of grid locations, W·H.
    pub fn locations(&self) -> usize {
        self.width * self.height
    }

    /// Channel vector at 1-based `(x, y)`.
    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        let start = self.offset(x, y);
        &self.data[start..start + self.channels]
    }

    /// Single activation at 1-based `(x, y, k)`.
    pub fn get(&self, x: usize, y: usize, k: usize) -> f32 {
        self.data[self.offset(x, y) + (k - 1)]
    }

    fn offset(&self, x: usize, y: usize) -> usize {
        debug_assert!((1..=self.width).contains(&x) && (1..=self.height).contains(&y));
        ((y - 1) * self.width + (x - 1)) * self.channels
    }
}

/// Keypoint locations of one image in 1-based pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointList {
    image_width: u32,
    image_height: u32,
    points: Vec<(f32, f32)>,
}

impl KeypointList {
    pub fn new(image_width: u32, image_height: u32, points: Vec<(f32, f32)>) -> Result<Self> {
        if image_width == 0 || image_height == 0 {
            return Err(Error::InvalidDimensions(format!(
                "image {image_width}x{image_height} has a zero extent"
            )));
        }
        for (i, &(x, y)) in points.iter().enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::NonFinite(i));
            }
            if !(1.0..=image_width as f32).contains(&x) || !(1.0..=image_height as f32).contains(&y)
            {
                return Err(Error::InvalidDimensions(format!(
                    "keypoint {i} at ({x}, {y}) lies outside the {image_width}x{image_height} image"
                )));
            }
        }
        Ok(Self {
            image_width,
            image_height,
            points,
        })
    }

    pub fn image_width(&self) -> u32 {
        self.image_width
    }

    pub fn image_height(&self) -> u32 {
        self.image_height
    }

    pub fn points(&self) -> &[(f32, f32)] {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `n` descriptors of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    dim: usize,
    data: Vec<f64>,
}

impl DescriptorSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Self {
            dim,
            data: Vec::with_capacity(dim * rows),
        }
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 && !data.is_empty() {
            return Err(Error::InvalidDimensions("descriptor dimension 0".into()));
        }
        if dim > 0 && data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim * (data.len() / dim + 1),
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut set = Self::with_capacity(dim, rows.len());
        for row in rows {
            set.push(row.as_ref())?;
        }
        Ok(set)
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: row.len(),
            });
        }
        if let Some(pos) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(self.data.len() + pos));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Copies into an `n × d` matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.dim, &self.data)
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter().copied());
        }
        Self::from_flat(m.ncols(), data)
    }
}
