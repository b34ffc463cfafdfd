//! Latent tensors and the flow-matching interpolation primitive.
//!
//! A latent is a `batch x channels x (frames x) height x width` grid of
//! f64 values, stored row-major. The frames axis is optional (absent for
//! images) and is treated as extra batch by every spatial operation.
//! Values are kept finite at all times; producing a NaN or infinity is a
//! bug, not a representable state.

use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Magic prefix of the raw tensor file format.
pub const TENSOR_MAGIC: [u8; 16] = *b"BNSL-TENSOR\0\0\0\0\0";

/// Dimensions of a latent tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub batch: u32,
    pub channels: u32,
    /// Absent for images; `Some(f)` for video latents.
    pub frames: Option<u32>,
    pub height: u32,
    pub width: u32,
}

impl TensorShape {
    /// Image shape (no frames axis).
    pub fn image(batch: u32, channels: u32, height: u32, width: u32) -> Self {
        Self { batch, channels, frames: None, height, width }
    }

    /// Video shape with an explicit frames axis.
    pub fn video(batch: u32, channels: u32, frames: u32, height: u32, width: u32) -> Self {
        Self { batch, channels, frames: Some(frames), height, width }
    }

    pub fn frames_or_one(&self) -> u32 {
        self.frames.unwrap_or(1)
    }

    /// Number of independent `height x width` planes (batch x channels x frames).
    pub fn num_planes(&self) -> usize {
        self.batch as usize * self.channels as usize * self.frames_or_one() as usize
    }

    pub fn plane_len(&self) -> usize {
        self.height as usize * self.width as usize
    }

    pub fn num_elements(&self) -> usize {
        self.num_planes() * self.plane_len()
    }

    /// Same shape with a different spatial resolution.
    pub fn with_resolution(&self, height: u32, width: u32) -> Self {
        Self { height, width, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch", self.batch),
            ("channels", self.channels),
            ("frames", self.frames_or_one()),
            ("height", self.height),
            ("width", self.width),
        ] {
            if v == 0 {
                return Err(Error::InvalidShape(format!("{name} must be >= 1, got 0")));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.frames {
            Some(fr) => write!(
                f,
                "{}x{}x{}x{}x{}",
                self.batch, self.channels, fr, self.height, self.width
            ),
            None => write!(f, "{}x{}x{}x{}", self.batch, self.channels, self.height, self.width),
        }
    }
}

/// An immutable latent tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    shape: TensorShape,
    data: Vec<f64>,
}

impl LatentTensor {
    /// Wrap row-major data in a shape, checking length and finiteness.
    pub fn from_vec(shape: TensorShape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.num_elements() {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.num_elements()
            )));
        }
        let t = Self { shape, data };
        t.check_finite()?;
        Ok(t)
    }

    pub fn zeros(shape: TensorShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self { shape, data: vec![0.0; shape.num_elements()] })
    }

    /// Constant-valued tensor.
    pub fn filled(shape: TensorShape, value: f64) -> Result<Self> {
        shape.validate()?;
        if !value.is_finite() {
            return Err(Error::InvalidParameter("fill value must be finite".into()));
        }
        Ok(Self { shape, data: vec![value; shape.num_elements()] })
    }

    pub fn shape(&self) -> TensorShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// One `height x width` plane, row-major.
    pub fn plane(&self, index: usize) -> &[f64] {
        let len = self.shape.plane_len();
        &self.data[index * len..(index + 1) * len]
    }

    /// Apply an elementwise map, checking the result stays finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_vec(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        check_same_shape(self, other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_vec(self.shape, data)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(
                "tensor contains non-finite values".into(),
            ))
        }
    }

    /// Write in the raw tensor file format: 16-byte magic, five u32 LE dims
    /// `(b, c, f, h, w)` with `f = 1` for images, then f32 LE values
    /// row-major. Values are downcast to 32-bit; reading back reproduces the
    /// 32-bit values exactly.
    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::with_capacity(36 + self.data.len() * 4);
        out.extend_from_slice(&TENSOR_MAGIC);
        for d in [
            self.shape.batch,
            self.shape.channels,
            self.shape.frames_or_one(),
            self.shape.height,
            self.shape.width,
        ] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    /// Read a tensor written by [`LatentTensor::write_file`]. A frames
    /// dimension of 1 is read back as an image shape (no frames axis).
    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 36 || bytes[..16] != TENSOR_MAGIC {
            return Err(Error::TensorFile("missing BNSL-TENSOR magic".into()));
        }
        let mut dims = [0u32; 5];
        for (i, d) in dims.iter_mut().enumerate() {
            let off = 16 + 4 * i;
            *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        }
        let [b, c, f, h, w] = dims;
        let shape = TensorShape {
            batch: b,
            channels: c,
            frames: if f == 1 { None } else { Some(f) },
            height: h,
            width: w,
        };
        shape.validate().map_err(|e| Error::TensorFile(e.to_string()))?;
        let n = shape.num_elements();
        if bytes.len() != 36 + 4 * n {
            return Err(Error::TensorFile(format!(
                "expected {} value bytes for shape {shape}, found {}",
                4 * n,
                bytes.len() - 36
            )));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let off = 36 + 4 * i;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::TensorFile("file contains non-finite values".into()));
            }
            data.push(v as f64);
        }
        Ok(Self { shape, data })
    }
}

pub(crate) fn check_same_shape(a: &LatentTensor, b: &LatentTensor) -> Result<()> {
    if a.shape != b.shape {
        Err(Error::ShapeMismatch(format!("{} vs {}", a.shape, b.shape)))
    } else {
        Ok(())
    }
}

/// Draw an i.i.d. standard-normal latent. Deterministic in `(seed, stream_id)`.
pub fn sample_noise(shape: TensorShape, rng: &RngStream) -> Result<LatentTensor> {
    shape.validate()?;
    let data = rng.standard_normal(shape.num_elements());
    Ok(LatentTensor { shape, data })
}

/// Linear interpolation `(1 - t) * a + t * b`, the trajectory both endpoints
/// of the flow live on. Exact at `t = 0` and `t = 1`.
pub fn lerp(a: &LatentTensor, b: &LatentTensor, t: f64) -> Result<LatentTensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidParameter(format!(
            "interpolation weight t={t} outside [0, 1]"
        )));
    }
    a.zip_with(b, |x, y| (1.0 - t) * x + t * y)
}
