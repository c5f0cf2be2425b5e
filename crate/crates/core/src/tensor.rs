//! Dense row-major tensor container and the statistics primitives used by
//! every calibration routine.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};

/// Maximum supported rank (enough for `B x H x T x T` attention maps).
pub const MAX_RANK: usize = 4;

/// Dense tensor of finite `f32` values stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, validating shape and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(shape_err(format!(
                "rank must be in 1..={MAX_RANK}, got {}",
                shape.len()
            )));
        }
        if shape.contains(&0) {
            return Err(shape_err(format!(
                "dimension sizes must be positive: {shape:?}"
            )));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| shape_err("element count overflows"))?;
        if numel != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite value at index {pos}")));
        }
        Ok(Self { shape, data })
    }

    /// One-dimensional tensor over `data`.
    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Elementwise map; the result must stay finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Flattens and concatenates several tensors into one 1-D tensor.
    pub fn concat_flat<'a>(parts: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let data: Vec<f32> = parts
            .into_iter()
            .flat_map(|t| t.data.iter().copied())
            .collect();
        if data.is_empty() {
            return Err(Error::EmptyInput);
        }
        Self::from_vec(data)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Self> {
        let [rows, cols] = self.shape[..] else {
            return Err(shape_err("transpose2 needs a rank-2 tensor"));
        };
        let mut out = vec![0.0; self.data.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = self.data[r * cols + c];
            }
        }
        Self::new(vec![cols, rows], out)
    }

    /// Slices along `axis`, each flattened in row-major order.
    pub fn channel_slices(&self, axis: usize) -> Result<Vec<Vec<f32>>> {
        let layout = AxisLayout::new(&self.shape, axis)?;
        let mut out = vec![Vec::with_capacity(self.len() / layout.dim); layout.dim];
        for (i, &v) in self.data.iter().enumerate() {
            out[layout.channel_of(i)].push(v);
        }
        Ok(out)
    }
}

/// Maps flat indices to their slice index along one axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisLayout {
    pub dim: usize,
    stride: usize,
}

impl AxisLayout {
    pub fn new(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(invalid(format!(
                "axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        Ok(Self {
            dim: shape[axis],
            stride: shape[axis + 1..].iter().product(),
        })
    }

    #[inline]
    pub fn channel_of(&self, flat: usize) -> usize {
        (flat / self.stride) % self.dim
    }
}

/// Population statistics of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    /// Population (divide-by-N) standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub absmax: f64,
}

/// Exact population mean/std, extrema and absolute maximum.
pub fn summary_stats(t: &Tensor) -> Result<SummaryStats> {
    stats_of(t.data())
}

pub(crate) fn stats_of(values: &[f32]) -> Result<SummaryStats> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = values.len() as f64;
    let mut sum = 0.0f64;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        let v = v as f64;
        sum += v;
        min = min.min(v);
        max = max.max(v);
    }
    let mean = (sum / n).clamp(min, max);
    let var = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(SummaryStats {
        mean,
        std: var.sqrt(),
        min,
        max,
        absmax: min.abs().max(max.abs()),
    })
}

/// Linear-interpolated `p`-th percentile (closest-ranks interpolation).
pub fn percentile(t: &Tensor, p: f64) -> Result<f64> {
    let mut sorted = t.data().to_vec();
    sorted.sort_by(f32::total_cmp);
    percentile_sorted(&sorted, p)
}

pub(crate) fn percentile_sorted(sorted: &[f32], p: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&p) {
        return Err(invalid(format!("percentile {p} outside [0, 100]")));
    }
    if sorted.is_empty() {
        return Err(Error::EmptyInput);
    }
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    let (a, b) = (sorted[lo] as f64, sorted[hi] as f64);
    if lo == hi || frac == 0.0 {
        return Ok(a);
    }
    Ok(a + (b - a) * frac)
}

/// Per-slice `(min, max)` along `axis`.
pub fn channel_minmax(t: &Tensor, axis: usize) -> Result<Vec<(f32, f32)>> {
    let layout = AxisLayout::new(t.shape(), axis)?;
    let mut out = vec![(f32::INFINITY, f32::NEG_INFINITY); layout.dim];
    for (i, &v) in t.data().iter().enumerate() {
        let slot = &mut out[layout.channel_of(i)];
        slot.0 = slot.0.min(v);
        slot.1 = slot.1.max(v);
    }
    Ok(out)
}
