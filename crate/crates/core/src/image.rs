//! Planar float rasters and boolean validity masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value range a raster is expected to live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueDomain {
    /// Pixels in `[-1, 1]`.
    Signed,
    /// Edges and masks in `[0, 1]`.
    Unit,
    /// Disparities in pixels. `NaN` marks undefined entries.
    Free,
}

impl ValueDomain {
    fn admits(self, v: f32) -> bool {
        match self {
            ValueDomain::Signed => v.is_finite() && (-1.0..=1.0).contains(&v),
            ValueDomain::Unit => v.is_finite() && (0.0..=1.0).contains(&v),
            ValueDomain::Free => !v.is_infinite(),
        }
    }
}

/// Planar `channels x rows x cols` float raster.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Vec<f32>,
    channels: usize,
    rows: usize,
    cols: usize,
    domain: ValueDomain,
}

impl ImageTensor {
    pub fn new(
        data: Vec<f32>,
        channels: usize,
        rows: usize,
        cols: usize,
        domain: ValueDomain,
    ) -> Result<Self> {
        if data.len() != channels * rows * cols {
            return Err(Error::dim(format!(
                "buffer of {} values cannot hold {channels}x{rows}x{cols}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|&v| !domain.admits(v)) {
            return Err(Error::Contract(format!(
                "value {} at index {bad} outside {domain:?} domain",
                data[bad]
            )));
        }
        Ok(Self {
            data,
            channels,
            rows,
            cols,
            domain,
        })
    }

    /// Builds a raster without range checks. Values are clamped into the
    /// domain for `Signed` and `Unit`.
    pub fn from_vec_clamped(
        mut data: Vec<f32>,
        channels: usize,
        rows: usize,
        cols: usize,
        domain: ValueDomain,
    ) -> Result<Self> {
        match domain {
            ValueDomain::Signed => data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0)),
            ValueDomain::Unit => data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0)),
            ValueDomain::Free => {}
        }
        Self::new(data, channels, rows, cols, domain)
    }

    pub fn filled(value: f32, channels: usize, rows: usize, cols: usize, domain: ValueDomain) -> Result<Self> {
        Self::new(vec![value; channels * rows * cols], channels, rows, cols, domain)
    }

    pub fn from_fn(
        channels: usize,
        rows: usize,
        cols: usize,
        domain: ValueDomain,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * rows * cols);
        for c in 0..channels {
            for v in 0..rows {
                for u in 0..cols {
                    data.push(f(c, v, u));
                }
            }
        }
        Self::new(data, channels, rows, cols, domain)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn domain(&self) -> ValueDomain {
        self.domain
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, v: usize, u: usize) -> f32 {
        self.data[(c * self.rows + v) * self.cols + u]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.rows * self.cols;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_dims(&self, other: &ImageTensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Copies a single-channel raster into `channels` identical planes.
    pub fn replicate_channels(&self, channels: usize) -> Result<ImageTensor> {
        if self.channels != 1 {
            return Err(Error::dim(format!(
                "can only replicate a 1-channel raster, got {}",
                self.channels
            )));
        }
        let mut data = Vec::with_capacity(channels * self.data.len());
        for _ in 0..channels {
            data.extend_from_slice(&self.data);
        }
        Ok(ImageTensor {
            data,
            channels,
            rows: self.rows,
            cols: self.cols,
            domain: self.domain,
        })
    }

    /// Sub-window `[top, top+rows) x [left, left+cols)` of every channel.
    pub fn crop(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<ImageTensor> {
        if top + rows > self.rows || left + cols > self.cols || rows == 0 || cols == 0 {
            return Err(Error::dim(format!(
                "crop {rows}x{cols} at ({top},{left}) does not fit {}x{}",
                self.rows, self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.channels * rows * cols);
        for c in 0..self.channels {
            for v in top..top + rows {
                let start = (c * self.rows + v) * self.cols + left;
                data.extend_from_slice(&self.data[start..start + cols]);
            }
        }
        Ok(ImageTensor {
            data,
            channels: self.channels,
            rows,
            cols,
            domain: self.domain,
        })
    }

    pub fn map(&self, domain: ValueDomain, f: impl Fn(f32) -> f32) -> Result<ImageTensor> {
        Self::new(
            self.data.iter().map(|&v| f(v)).collect(),
            self.channels,
            self.rows,
            self.cols,
            domain,
        )
    }
}

/// Per-pixel validity flags shared across channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl ValidityMask {
    pub fn new(data: Vec<bool>, rows: usize, cols: usize) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "mask of {} flags cannot cover {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, v: usize, u: usize) -> bool {
        self.data[v * self.cols + u]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn and(&self, other: &ValidityMask) -> Result<ValidityMask> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dim("mask dims differ"));
        }
        Ok(ValidityMask {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        })
    }

    pub fn crop(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<ValidityMask> {
        if top + rows > self.rows || left + cols > self.cols {
            return Err(Error::dim("mask crop out of range"));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for v in top..top + rows {
            data.extend_from_slice(&self.data[v * self.cols + left..v * self.cols + left + cols]);
        }
        Ok(ValidityMask { rows, cols, data })
    }
}

/// Direction in which disparity displaces the sampling position along a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DisparitySign {
    #[default]
    #[serde(rename = "+1")]
    Positive,
    #[serde(rename = "-1")]
    Negative,
}

impl DisparitySign {
    pub fn factor(self) -> f32 {
        match self {
            DisparitySign::Positive => 1.0,
            DisparitySign::Negative => -1.0,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "+1" | "1" | "+" | "positive" => Some(DisparitySign::Positive),
            "-1" | "-" | "negative" => Some(DisparitySign::Negative),
            _ => None,
        }
    }
}
