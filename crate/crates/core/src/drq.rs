//! Dual-region quantization for post-softmax and post-GeLU activations.
//!
//! A `b`-bit code is one region bit followed by `b - 1` value bits. The two
//! region scales are tied by `scale_r1 = scale_r2 * 2^-m`, so realigning R1
//! onto R2 is a shift by `m` bits.
//!
//! * softmax: both regions start at 0. R1 is the fine region for the dense
//!   cluster near zero, R2 the coarse region spanning `[0, 1]`.
//! * gelu: R1 holds negative values (as magnitudes), R2 non-negative values.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quant::check_bits;
use crate::quant::Scheme;
use crate::search::{search_values, Metric, SearchSpace};
use crate::tensor::{stats_of, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrqKind {
    Softmax,
    Gelu,
}

/// Which fixed coarse scale the softmax mode uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxRange {
    /// `1 / (2^(b-1) - 1)`: the `b - 1` value bits reach exactly 1.0.
    #[default]
    UnitInterval,
    /// `1 / (2^b - 1)`: R2 then tops out near 0.5.
    FullCodeSpan,
}

impl SoftmaxRange {
    pub fn scale_r2(self, bits: u8) -> f64 {
        match self {
            SoftmaxRange::UnitInterval => 1.0 / value_max(bits) as f64,
            SoftmaxRange::FullCodeSpan => 1.0 / ((1u64 << bits) - 1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    R1 = 0,
    R2 = 1,
}

/// Largest payload on `b - 1` value bits.
#[inline]
pub fn value_max(bits: u8) -> u32 {
    (1u32 << (bits - 1)) - 1
}

/// Two-region quantizer parameters. `scale_r1` is always derived from
/// `scale_r2` and the shift, so the power-of-two relation holds exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DrqRepr", into = "DrqRepr")]
pub struct DRQParams {
    kind: DrqKind,
    bits: u8,
    scale_r2: f64,
    shift_m: u32,
}

const MAX_SHIFT: u32 = 62;

/// One region bit plus at least two value bits.
fn check_drq_bits(bits: u8) -> Result<()> {
    check_bits(bits)?;
    if bits < 3 {
        return Err(invalid(format!(
            "dual-region codes need at least 3 bits, got {bits}"
        )));
    }
    Ok(())
}

impl DRQParams {
    pub fn new(kind: DrqKind, bits: u8, scale_r2: f64, shift_m: u32) -> Result<Self> {
        check_drq_bits(bits)?;
        if !(scale_r2.is_finite() && scale_r2 > 0.0) {
            return Err(invalid(format!(
                "scale_r2 must be positive, got {scale_r2}"
            )));
        }
        if shift_m > MAX_SHIFT {
            return Err(invalid(format!("shift {shift_m} exceeds {MAX_SHIFT}")));
        }
        // At shift 0 the softmax regions share one step and every R2 word
        // duplicates an R1 word.
        if kind == DrqKind::Softmax && shift_m == 0 {
            return Err(invalid("softmax shift must be at least 1"));
        }
        if scale_r2 / (1u64 << shift_m) as f64 == 0.0 {
            return Err(invalid("scale_r1 underflows"));
        }
        Ok(Self {
            kind,
            bits,
            scale_r2,
            shift_m,
        })
    }

    pub fn kind(&self) -> DrqKind {
        self.kind
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scale_r2(&self) -> f64 {
        self.scale_r2
    }

    pub fn shift_m(&self) -> u32 {
        self.shift_m
    }

    pub fn scale_r1(&self) -> f64 {
        self.scale_r2 / (1u64 << self.shift_m) as f64
    }

    pub fn scale(&self, region: Region) -> f64 {
        match region {
            Region::R1 => self.scale_r1(),
            Region::R2 => self.scale_r2,
        }
    }

    /// `2^(b-1) * scale_r1`: upper edge of the softmax R1 interval, or the
    /// magnitude covered by the gelu negative region.
    pub fn boundary(&self) -> f64 {
        (1u64 << (self.bits - 1)) as f64 * self.scale_r1()
    }
}

#[derive(Serialize, Deserialize)]
struct DrqRepr {
    kind: DrqKind,
    bits: u8,
    #[serde(with = "crate::io::exact::one")]
    scale_r2: f64,
    shift_m: u32,
}

impl TryFrom<DrqRepr> for DRQParams {
    type Error = Error;
    fn try_from(r: DrqRepr) -> Result<Self> {
        Self::new(r.kind, r.bits, r.scale_r2, r.shift_m)
    }
}

impl From<DRQParams> for DrqRepr {
    fn from(p: DRQParams) -> Self {
        Self {
            kind: p.kind,
            bits: p.bits,
            scale_r2: p.scale_r2,
            shift_m: p.shift_m,
        }
    }
}

/// Region bit plus `b - 1` bit payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DRQCode {
    pub region: Region,
    pub value: u32,
}

impl DRQCode {
    /// `region * 2^(b-1) + value`.
    pub fn pack(&self, bits: u8) -> u32 {
        ((self.region as u32) << (bits - 1)) | self.value
    }

    pub fn unpack(word: u32, bits: u8) -> Result<Self> {
        check_drq_bits(bits)?;
        if word >> bits != 0 {
            return Err(invalid(format!("word {word:#x} wider than {bits} bits")));
        }
        let region = if word >> (bits - 1) == 1 {
            Region::R2
        } else {
            Region::R1
        };
        Ok(Self {
            region,
            value: word & value_max(bits),
        })
    }
}

#[inline]
fn payload(magnitude: f64, scale: f64, vmax: u32) -> u32 {
    (magnitude / scale)
        .round_ties_even()
        .clamp(0.0, vmax as f64) as u32
}

/// Region for `x`.
///
/// Softmax: R1 whenever `x` rounds onto an unclipped R1 code, i.e.
/// `round(x / scale_r1) <= 2^(b-1) - 1`; larger values go to R2.
/// GeLU: negatives go to R1, zero and positives to R2.
pub fn assign_region(x: f32, p: &DRQParams) -> Region {
    match p.kind {
        DrqKind::Softmax => {
            let r = (x.max(0.0) as f64 / p.scale_r1()).round_ties_even();
            if r <= value_max(p.bits) as f64 {
                Region::R1
            } else {
                Region::R2
            }
        }
        DrqKind::Gelu => {
            if x < 0.0 {
                Region::R1
            } else {
                Region::R2
            }
        }
    }
}

pub fn drq_quantize(x: f32, p: &DRQParams) -> DRQCode {
    let region = assign_region(x, p);
    let magnitude = match (p.kind, region) {
        (DrqKind::Softmax, _) => x.max(0.0) as f64,
        (DrqKind::Gelu, Region::R1) => -(x as f64),
        (DrqKind::Gelu, Region::R2) => x as f64,
    };
    let value = payload(magnitude, p.scale(region), value_max(p.bits));
    // A zero payload takes the region of 0 itself, so re-quantizing a decoded
    // zero reproduces the code.
    let region = if value == 0 {
        assign_region(0.0, p)
    } else {
        region
    };
    DRQCode { region, value }
}

pub fn drq_dequantize(c: DRQCode, p: &DRQParams) -> f32 {
    let v = c.value as f64 * p.scale(c.region);
    match (p.kind, c.region) {
        (DrqKind::Gelu, Region::R1) => -v as f32,
        _ => v as f32,
    }
}

#[inline]
pub fn drq_fake(x: f32, p: &DRQParams) -> f32 {
    drq_dequantize(drq_quantize(x, p), p)
}

pub fn fake_drq(t: &Tensor, p: &DRQParams) -> Tensor {
    t.map(|x| drq_fake(x, p)).expect("reconstruction is finite")
}

/// Packed `b`-bit words for every element.
pub fn drq_encode(t: &Tensor, p: &DRQParams) -> Vec<u32> {
    t.data()
        .iter()
        .map(|&x| drq_quantize(x, p).pack(p.bits))
        .collect()
}

/// Options for [`calibrate_drq`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DrqConfig {
    pub softmax_range: SoftmaxRange,
    /// Candidate grid for the GeLU positive-region scale.
    pub space: SearchSpace,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrqCalibration {
    pub params: DRQParams,
    pub metric: f64,
    /// GeLU samples had no negative values; a single region was used.
    pub single_region_fallback: bool,
}

/// Searches region scales over the calibration samples.
///
/// Softmax: `scale_r2` is fixed by the configured range and the shift
/// `m in 1..=b` is searched. GeLU: `scale_r1` starts at the scale that just
/// covers the most negative sample; each `scale_r2` candidate is snapped to a
/// power-of-two multiple of it (rounding the shift down so R1 keeps covering
/// the negative range) before it is scored.
///
/// Ties go to the smallest shift / smallest scale.
pub fn calibrate_drq(
    samples: &[Tensor],
    kind: DrqKind,
    bits: u8,
    metric: &Metric,
    cfg: &DrqConfig,
) -> Result<DrqCalibration> {
    check_drq_bits(bits)?;
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let all: Vec<f32> = samples
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let stats = stats_of(&all)?;
    let score = |p: &DRQParams| -> Result<f64> {
        let recon: Vec<Vec<f32>> = samples
            .iter()
            .map(|t| t.data().iter().map(|&x| drq_fake(x, p)).collect())
            .collect();
        metric.total(samples, &recon)
    };

    match kind {
        DrqKind::Softmax => {
            if stats.min < 0.0 || stats.max > 1.0 + 1e-6 {
                return Err(invalid(format!(
                    "softmax samples must lie in [0, 1], got [{}, {}]",
                    stats.min, stats.max
                )));
            }
            let scale_r2 = cfg.softmax_range.scale_r2(bits);
            let mut best: Option<(f64, DRQParams)> = None;
            for m in 1..=bits as u32 {
                let p = DRQParams::new(kind, bits, scale_r2, m)?;
                let s = score(&p)?;
                if best.is_none_or(|(b, _)| s < b) {
                    best = Some((s, p));
                }
            }
            let (metric, params) = best.expect("at least one shift");
            Ok(DrqCalibration {
                params,
                metric,
                single_region_fallback: false,
            })
        }
        DrqKind::Gelu => {
            let vmax = value_max(bits) as f64;
            if stats.min >= 0.0 {
                let q = search_values(&all, bits - 1, Scheme::Symmetric, false, &cfg.space)?;
                let params = DRQParams::new(kind, bits, q.scale(), 0)?;
                return Ok(DrqCalibration {
                    params,
                    metric: score(&params)?,
                    single_region_fallback: true,
                });
            }
            let r1_floor = -stats.min / vmax;
            let candidates = if stats.max > 0.0 {
                cfg.space.candidates(stats.max, vmax)
            } else {
                vec![r1_floor]
            };
            let mut best: Option<(f64, DRQParams)> = None;
            for c in candidates {
                let p = snap_gelu(bits, c, r1_floor)?;
                let s = score(&p)?;
                let better = match best {
                    None => true,
                    Some((b, bp)) => s < b || (s == b && p.scale_r2 < bp.scale_r2),
                };
                if better {
                    best = Some((s, p));
                }
            }
            let (metric, params) = best.expect("non-empty grid");
            Ok(DrqCalibration {
                params,
                metric,
                single_region_fallback: false,
            })
        }
    }
}

/// Largest `m` with `r1_floor * 2^m <= candidate`; a candidate below the
/// floor is raised to it with `m = 0`.
fn snap_gelu(bits: u8, candidate: f64, r1_floor: f64) -> Result<DRQParams> {
    if candidate <= r1_floor {
        return DRQParams::new(DrqKind::Gelu, bits, r1_floor, 0);
    }
    let mut m = (candidate / r1_floor).log2().floor().max(0.0) as u32;
    m = m.min(MAX_SHIFT);
    // correct for log2 rounding at exact powers of two
    while m > 0 && candidate / ((1u64 << m) as f64) < r1_floor {
        m -= 1;
    }
    while m < MAX_SHIFT && candidate / (1u64 << (m + 1)) as f64 >= r1_floor {
        m += 1;
    }
    DRQParams::new(DrqKind::Gelu, bits, candidate, m)
}
