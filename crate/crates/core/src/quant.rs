//! Uniform quantization: parameter construction, integer codes,
//! fake quantization, error metrics and batch-norm folding.
//!
//! Codes follow `clamp(round(x / s) + z, q_min, q_max)` with round-half-to-even,
//! and reconstruct as `(code - z) * s`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{AxisLayout, Tensor};

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

/// Integer code range `(q_min, q_max)` for a bit-width and signedness.
pub fn qrange(bits: u8, signed: bool) -> (i32, i32) {
    if signed {
        (-(1i32 << (bits - 1)), (1i32 << (bits - 1)) - 1)
    } else {
        (0, (1i32 << bits) - 1)
    }
}

pub(crate) fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(invalid(format!(
            "bit-width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )));
    }
    Ok(())
}

/// Scale/zero-point set for one uniform quantizer.
///
/// Per-tensor parameters hold exactly one scale and zero-point; per-channel
/// parameters hold one per slice along the channel axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuantParamsRepr", into = "QuantParamsRepr")]
pub struct QuantParams {
    scales: Vec<f64>,
    zero_points: Vec<i32>,
    bits: u8,
    signed: bool,
    granularity: Granularity,
}

impl QuantParams {
    pub fn per_tensor(scale: f64, zero_point: i32, bits: u8, signed: bool) -> Result<Self> {
        Self::build(
            vec![scale],
            vec![zero_point],
            bits,
            signed,
            Granularity::PerTensor,
        )
    }

    pub fn per_channel(
        scales: Vec<f64>,
        zero_points: Vec<i32>,
        bits: u8,
        signed: bool,
        axis: usize,
    ) -> Result<Self> {
        Self::build(
            scales,
            zero_points,
            bits,
            signed,
            Granularity::PerChannel { axis },
        )
    }

    fn build(
        scales: Vec<f64>,
        zero_points: Vec<i32>,
        bits: u8,
        signed: bool,
        granularity: Granularity,
    ) -> Result<Self> {
        check_bits(bits)?;
        if scales.is_empty() || scales.len() != zero_points.len() {
            return Err(invalid(
                "scales and zero-points must be non-empty and equal length",
            ));
        }
        if granularity == Granularity::PerTensor && scales.len() != 1 {
            return Err(invalid("per-tensor params carry exactly one scale"));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(invalid(format!(
                "scale must be positive and finite, got {s}"
            )));
        }
        let (lo, hi) = qrange(bits, signed);
        if let Some(z) = zero_points.iter().find(|z| !(lo..=hi).contains(*z)) {
            return Err(invalid(format!("zero-point {z} outside [{lo}, {hi}]")));
        }
        Ok(Self {
            scales,
            zero_points,
            bits,
            signed,
            granularity,
        })
    }

    /// First (per-tensor) scale.
    pub fn scale(&self) -> f64 {
        self.scales[0]
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_points[0]
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i32] {
        &self.zero_points
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn signed(&self) -> bool {
        self.signed
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn q_min(&self) -> i32 {
        qrange(self.bits, self.signed).0
    }

    pub fn q_max(&self) -> i32 {
        qrange(self.bits, self.signed).1
    }

    /// Quantizes one value with channel `ch`'s parameters.
    #[inline]
    pub fn quantize_value(&self, x: f32, ch: usize) -> i32 {
        quantize_scalar(
            x,
            self.scales[ch],
            self.zero_points[ch],
            self.q_min(),
            self.q_max(),
        )
    }

    #[inline]
    pub fn dequantize_value(&self, code: i32, ch: usize) -> f32 {
        dequantize_scalar(code, self.scales[ch], self.zero_points[ch])
    }

    #[inline]
    pub fn fake_value(&self, x: f32, ch: usize) -> f32 {
        self.dequantize_value(self.quantize_value(x, ch), ch)
    }

    fn layout_for(&self, shape: &[usize]) -> Result<Option<AxisLayout>> {
        match self.granularity {
            Granularity::PerTensor => Ok(None),
            Granularity::PerChannel { axis } => {
                let layout = AxisLayout::new(shape, axis).map_err(|e| shape_err(e.to_string()))?;
                if layout.dim != self.scales.len() {
                    return Err(shape_err(format!(
                        "axis {axis} has {} channels but params carry {}",
                        layout.dim,
                        self.scales.len()
                    )));
                }
                Ok(Some(layout))
            }
        }
    }
}

#[inline]
pub(crate) fn quantize_scalar(x: f32, scale: f64, zero_point: i32, q_min: i32, q_max: i32) -> i32 {
    let v = (x as f64 / scale).round_ties_even() + zero_point as f64;
    v.clamp(q_min as f64, q_max as f64) as i32
}

#[inline]
pub(crate) fn dequantize_scalar(code: i32, scale: f64, zero_point: i32) -> f32 {
    ((code as i64 - zero_point as i64) as f64 * scale) as f32
}

#[derive(Serialize, Deserialize)]
struct QuantParamsRepr {
    bits: u8,
    signed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    axis: Option<usize>,
    #[serde(with = "crate::io::exact")]
    scales: Vec<f64>,
    zero_points: Vec<i32>,
}

impl TryFrom<QuantParamsRepr> for QuantParams {
    type Error = Error;

    fn try_from(r: QuantParamsRepr) -> Result<Self> {
        let granularity = match r.axis {
            None => Granularity::PerTensor,
            Some(axis) => Granularity::PerChannel { axis },
        };
        Self::build(r.scales, r.zero_points, r.bits, r.signed, granularity)
    }
}

impl From<QuantParams> for QuantParamsRepr {
    fn from(p: QuantParams) -> Self {
        Self {
            bits: p.bits,
            signed: p.signed,
            axis: match p.granularity {
                Granularity::PerTensor => None,
                Granularity::PerChannel { axis } => Some(axis),
            },
            scales: p.scales,
            zero_points: p.zero_points,
        }
    }
}

/// Scale and zero-point for the range `[min, max]`.
///
/// An all-zero range yields `s = 1, z = 0`. A non-zero constant range is
/// widened to include zero so the scale stays positive.
pub fn scale_and_zero(
    min: f64,
    max: f64,
    bits: u8,
    scheme: Scheme,
    signed: bool,
) -> Result<(f64, i32)> {
    check_bits(bits)?;
    if !(min.is_finite() && max.is_finite()) {
        return Err(invalid("range bounds must be finite"));
    }
    if min > max {
        return Err(invalid(format!("min {min} > max {max}")));
    }
    let (q_min, q_max) = qrange(bits, signed);
    match scheme {
        Scheme::Symmetric => {
            let absmax = min.abs().max(max.abs());
            if absmax == 0.0 {
                return Ok((1.0, 0));
            }
            Ok((absmax / q_max as f64, 0))
        }
        Scheme::Asymmetric => {
            let (lo, hi) = if min == max {
                (min.min(0.0), max.max(0.0))
            } else {
                (min, max)
            };
            if lo == hi {
                return Ok((1.0, zero_point_clamped(0.0, q_min, q_max)));
            }
            let s = (hi - lo) / (q_max - q_min) as f64;
            Ok((s, zero_point_clamped(q_min as f64 - lo / s, q_min, q_max)))
        }
    }
}

fn zero_point_clamped(z: f64, q_min: i32, q_max: i32) -> i32 {
    z.round_ties_even().clamp(q_min as f64, q_max as f64) as i32
}

/// Per-tensor parameters covering `[min, max]`.
pub fn make_params(
    min: f64,
    max: f64,
    bits: u8,
    scheme: Scheme,
    signed: bool,
) -> Result<QuantParams> {
    let (s, z) = scale_and_zero(min, max, bits, scheme, signed)?;
    QuantParams::per_tensor(s, z, bits, signed)
}

/// Per-channel parameters, one range per slice along `axis`.
pub fn make_channel_params(
    ranges: &[(f32, f32)],
    axis: usize,
    bits: u8,
    scheme: Scheme,
    signed: bool,
) -> Result<QuantParams> {
    let (scales, zps): (Vec<f64>, Vec<i32>) = ranges
        .iter()
        .map(|&(lo, hi)| scale_and_zero(lo as f64, hi as f64, bits, scheme, signed))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    QuantParams::per_channel(scales, zps, bits, signed, axis)
}

/// Integer codes plus the parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    codes: Vec<i32>,
    params: QuantParams,
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, codes: Vec<i32>, params: QuantParams) -> Result<Self> {
        if shape.iter().product::<usize>() != codes.len() {
            return Err(shape_err("code count does not match shape"));
        }
        params.layout_for(&shape)?;
        let (lo, hi) = (params.q_min(), params.q_max());
        if let Some(c) = codes.iter().find(|c| !(lo..=hi).contains(*c)) {
            return Err(invalid(format!("code {c} outside [{lo}, {hi}]")));
        }
        Ok(Self {
            shape,
            codes,
            params,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }
}

pub fn quantize(x: &Tensor, p: &QuantParams) -> Result<QuantizedTensor> {
    let layout = p.layout_for(x.shape())?;
    let codes = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| p.quantize_value(v, layout.map_or(0, |l| l.channel_of(i))))
        .collect();
    Ok(QuantizedTensor {
        shape: x.shape().to_vec(),
        codes,
        params: p.clone(),
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let p = &q.params;
    let layout = p.layout_for(&q.shape).expect("validated at construction");
    let data = q
        .codes
        .iter()
        .enumerate()
        .map(|(i, &c)| p.dequantize_value(c, layout.map_or(0, |l| l.channel_of(i))))
        .collect();
    Tensor::new(q.shape.clone(), data).expect("dequantized values are finite")
}

/// Quantize-then-dequantize, keeping the input shape.
pub fn fake_quant(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    Ok(dequantize(&quantize(x, p)?))
}

/// Reconstruction error between a reference signal and its approximation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub mse: f64,
    /// `+inf` when the reconstruction is exact.
    #[serde(with = "crate::io::lossy")]
    pub sqnr_db: f64,
    pub cosine: f64,
}

/// Accumulates error sums over any number of chunks.
#[derive(Debug, Clone, Copy, Default)]
pub struct ErrorAccumulator {
    n: usize,
    err: f64,
    signal: f64,
    approx: f64,
    dot: f64,
}

impl ErrorAccumulator {
    pub fn add(&mut self, reference: &[f32], approx: &[f32]) {
        debug_assert_eq!(reference.len(), approx.len());
        for (&x, &y) in reference.iter().zip(approx) {
            let (x, y) = (x as f64, y as f64);
            let d = x - y;
            self.err += d * d;
            self.signal += x * x;
            self.approx += y * y;
            self.dot += x * y;
        }
        self.n += reference.len();
    }

    pub fn finish(&self) -> Result<ErrorMetrics> {
        if self.n == 0 {
            return Err(Error::EmptyInput);
        }
        let sqnr_db = if self.err == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (self.signal / self.err).log10()
        };
        let cosine = match (self.signal == 0.0, self.approx == 0.0) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            _ => self.dot / (self.signal.sqrt() * self.approx.sqrt()),
        };
        Ok(ErrorMetrics {
            mse: self.err / self.n as f64,
            sqnr_db,
            cosine,
        })
    }
}

/// MSE, SQNR (dB) and cosine similarity of `approx` against `reference`.
pub fn error_metrics(reference: &[f32], approx: &[f32]) -> Result<ErrorMetrics> {
    if reference.len() != approx.len() {
        return Err(shape_err(format!(
            "length mismatch: {} vs {}",
            reference.len(),
            approx.len()
        )));
    }
    let mut acc = ErrorAccumulator::default();
    acc.add(reference, approx);
    acc.finish()
}

pub fn quant_error(x: &Tensor, p: &QuantParams) -> Result<ErrorMetrics> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    error_metrics(x.data(), fake_quant(x, p)?.data())
}

/// Mean squared error, accumulated sequentially in `f64`.
pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc / a.len() as f64
}

/// Batch-norm statistics and affine parameters, one entry per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BNParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

impl BNParams {
    pub fn new(
        gamma: Vec<f32>,
        beta: Vec<f32>,
        running_mean: Vec<f32>,
        running_var: Vec<f32>,
        eps: f32,
    ) -> Result<Self> {
        let c = gamma.len();
        if c == 0 || beta.len() != c || running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch-norm parameter lengths disagree"));
        }
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(invalid("eps must be finite and non-negative"));
        }
        if running_var
            .iter()
            .any(|&v| !(v.is_finite() && v >= 0.0 && v + eps > 0.0))
        {
            return Err(invalid(
                "running variance must be non-negative with var + eps > 0",
            ));
        }
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Multiplier `gamma / sqrt(var + eps)` for channel `c`.
    pub fn factor(&self, c: usize) -> f64 {
        self.gamma[c] as f64 / (self.running_var[c] as f64 + self.eps as f64).sqrt()
    }

    #[inline]
    pub fn apply(&self, x: f64, c: usize) -> f64 {
        (x - self.running_mean[c] as f64) * self.factor(c) + self.beta[c] as f64
    }
}

/// Absorbs batch norm into the preceding layer. Output channels of `w` lie
/// along axis 0; `bias` has one entry per output channel.
pub fn fold_batchnorm(w: &Tensor, bias: &Tensor, bn: &BNParams) -> Result<(Tensor, Tensor)> {
    let c = bn.channels();
    if w.shape()[0] != c || bias.len() != c {
        return Err(shape_err(format!(
            "batch norm has {c} channels, weight has {} and bias {}",
            w.shape()[0],
            bias.len()
        )));
    }
    let per = w.len() / c;
    let mut wd = w.data().to_vec();
    for (ch, chunk) in wd.chunks_mut(per).enumerate() {
        let f = bn.factor(ch);
        for v in chunk {
            *v = (*v as f64 * f) as f32;
        }
    }
    let bd = bias
        .data()
        .iter()
        .enumerate()
        .map(|(ch, &b)| bn.apply(b as f64, ch) as f32)
        .collect();
    Ok((
        Tensor::new(w.shape().to_vec(), wd)?,
        Tensor::new(bias.shape().to_vec(), bd)?,
    ))
}
