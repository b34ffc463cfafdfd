//! Spatial up/downsampling of latents at stage transitions.
//!
//! Filtering is separable (rows, then columns) under the half-pixel
//! center convention `x_src = (j + 0.5) * src/dst - 0.5` with clamp-to-edge.
//! When downsampling, the kernel support is stretched by the scale factor so
//! the filter also band-limits (anti-aliasing). Weights for every output
//! pixel are normalized to sum to one, so constant fields are preserved.
//! Nearest-neighbor is a pure index pick: no anti-aliasing, output values
//! are always a subset of the input values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Nearest,
    Bilinear,
    Bicubic,
    Lanczos,
}

/// A resampling kernel choice with its shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleKernel {
    pub kind: KernelKind,
    /// Lanczos window (the kernel vanishes outside `|x| < a`).
    pub lanczos_window: u32,
    /// The `a` coefficient of the Keys cubic.
    pub bicubic_coefficient: f64,
}

impl ResampleKernel {
    pub fn new(kind: KernelKind) -> Self {
        Self { kind, lanczos_window: 3, bicubic_coefficient: -0.5 }
    }

    pub fn nearest() -> Self {
        Self::new(KernelKind::Nearest)
    }

    pub fn bilinear() -> Self {
        Self::new(KernelKind::Bilinear)
    }

    pub fn bicubic() -> Self {
        Self::new(KernelKind::Bicubic)
    }

    pub fn lanczos() -> Self {
        Self::new(KernelKind::Lanczos)
    }

    /// Parse a config string: "nearest" | "bilinear" | "bicubic" | "lanczos".
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "nearest" => Ok(Self::nearest()),
            "bilinear" => Ok(Self::bilinear()),
            "bicubic" => Ok(Self::bicubic()),
            "lanczos" => Ok(Self::lanczos()),
            other => Err(Error::InvalidParameter(format!(
                "unknown resample kernel '{other}'"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            KernelKind::Nearest => "nearest",
            KernelKind::Bilinear => "bilinear",
            KernelKind::Bicubic => "bicubic",
            KernelKind::Lanczos => "lanczos",
        }
    }

    /// Half-width of the kernel's support in source pixels (at scale 1).
    pub fn support(&self) -> f64 {
        match self.kind {
            KernelKind::Nearest => 0.5,
            KernelKind::Bilinear => 1.0,
            KernelKind::Bicubic => 2.0,
            KernelKind::Lanczos => self.lanczos_window as f64,
        }
    }

    /// Kernel weight at a (signed) source-pixel offset. Symmetric in `x`,
    /// and `weight(0) == 1` for every kernel.
    pub fn weight(&self, x: f64) -> f64 {
        let ax = x.abs();
        match self.kind {
            KernelKind::Nearest => {
                if ax <= 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
            KernelKind::Bilinear => (1.0 - ax).max(0.0),
            KernelKind::Bicubic => {
                let a = self.bicubic_coefficient;
                if ax <= 1.0 {
                    (a + 2.0) * ax.powi(3) - (a + 3.0) * ax * ax + 1.0
                } else if ax < 2.0 {
                    a * (ax.powi(3) - 5.0 * ax * ax + 8.0 * ax - 4.0)
                } else {
                    0.0
                }
            }
            KernelKind::Lanczos => {
                let a = self.lanczos_window as f64;
                if ax < a {
                    sinc(x) * sinc(x / a)
                } else {
                    0.0
                }
            }
        }
    }
}

fn sinc(t: f64) -> f64 {
    if t == 0.0 {
        1.0
    } else {
        let p = std::f64::consts::PI * t;
        p.sin() / p
    }
}

/// Precomputed taps for one output index along one axis.
struct Taps {
    indices: Vec<usize>,
    weights: Vec<f64>,
}

fn build_axis_taps(src: usize, dst: usize, kernel: &ResampleKernel) -> Vec<Taps> {
    let scale = src as f64 / dst as f64;
    let mut taps = Vec::with_capacity(dst);
    for j in 0..dst {
        let center = (j as f64 + 0.5) * scale - 0.5;
        if kernel.kind == KernelKind::Nearest {
            let idx = ((center + 0.5).floor() as i64).clamp(0, src as i64 - 1) as usize;
            taps.push(Taps { indices: vec![idx], weights: vec![1.0] });
            continue;
        }
        // Downsampling stretches the kernel by the scale factor.
        let fscale = scale.max(1.0);
        let radius = kernel.support() * fscale;
        let lo = (center - radius).ceil() as i64;
        let hi = (center + radius).floor() as i64;
        let mut indices = Vec::with_capacity((hi - lo + 1).max(1) as usize);
        let mut weights = Vec::with_capacity(indices.capacity());
        let mut total = 0.0;
        for i in lo..=hi {
            let w = kernel.weight((i as f64 - center) / fscale);
            if w != 0.0 {
                indices.push(i.clamp(0, src as i64 - 1) as usize);
                weights.push(w);
                total += w;
            }
        }
        if indices.is_empty() {
            // Can only happen for degenerate kernels; fall back to nearest.
            let idx = ((center + 0.5).floor() as i64).clamp(0, src as i64 - 1) as usize;
            indices.push(idx);
            weights.push(1.0);
            total = 1.0;
        }
        for w in &mut weights {
            *w /= total;
        }
        taps.push(Taps { indices, weights });
    }
    taps
}

fn filter_axis(data: &[f64], rows: usize, cols: usize, taps: &[Taps], along_cols: bool) -> Vec<f64> {
    if along_cols {
        // Resize the column axis: output is rows x taps.len().
        let out_cols = taps.len();
        let mut out = vec![0.0; rows * out_cols];
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let out_row = &mut out[r * out_cols..(r + 1) * out_cols];
            for (j, t) in taps.iter().enumerate() {
                let mut acc = 0.0;
                for (&i, &w) in t.indices.iter().zip(&t.weights) {
                    acc += w * row[i];
                }
                out_row[j] = acc;
            }
        }
        out
    } else {
        // Resize the row axis: output is taps.len() x cols.
        let out_rows = taps.len();
        let mut out = vec![0.0; out_rows * cols];
        for (r, t) in taps.iter().enumerate() {
            let out_row = &mut out[r * cols..(r + 1) * cols];
            for (&i, &w) in t.indices.iter().zip(&t.weights) {
                let row = &data[i * cols..(i + 1) * cols];
                for c in 0..cols {
                    out_row[c] += w * row[c];
                }
            }
        }
        out
    }
}

/// Resize the spatial axes of a latent to `(h_target, w_target)`.
///
/// The frames axis (if any) rides along as extra batch. A same-size call
/// returns the input bit-exactly; a same-size axis is a no-op pass.
pub fn resize(
    x: &LatentTensor,
    h_target: u32,
    w_target: u32,
    kernel: &ResampleKernel,
) -> Result<LatentTensor> {
    if h_target == 0 || w_target == 0 {
        return Err(Error::InvalidShape(
            "target resolution must be >= 1 in both axes".into(),
        ));
    }
    let shape = x.shape();
    let (h, w) = (shape.height as usize, shape.width as usize);
    if (h_target, w_target) == (shape.height, shape.width) {
        return Ok(x.clone());
    }
    let col_taps = (w_target as usize != w).then(|| build_axis_taps(w, w_target as usize, kernel));
    let row_taps = (h_target as usize != h).then(|| build_axis_taps(h, h_target as usize, kernel));

    let out_shape = shape.with_resolution(h_target, w_target);
    let mut out = Vec::with_capacity(out_shape.num_elements());
    for p in 0..shape.num_planes() {
        let mut plane: Vec<f64> = x.plane(p).to_vec();
        let mut cols = w;
        if let Some(taps) = &col_taps {
            plane = filter_axis(&plane, h, cols, taps, true);
            cols = w_target as usize;
        }
        if let Some(taps) = &row_taps {
            plane = filter_axis(&plane, h, cols, taps, false);
        }
        out.extend_from_slice(&plane);
    }
    LatentTensor::from_vec(out_shape, out)
}
