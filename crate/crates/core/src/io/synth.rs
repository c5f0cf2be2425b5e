//! Seeded synthetic activations with the shapes of real layer outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Row-wise softmax over the last axis of sharp Gaussian logits.
    Softmax,
    /// GeLU of Gaussian pre-activations: a long positive tail and a small
    /// negative lobe bounded below by about -0.17.
    Gelu,
    /// Gaussian body with a handful of large-magnitude outliers.
    Outlier,
}

impl SynthKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "softmax" => Ok(Self::Softmax),
            "gelu" => Ok(Self::Gelu),
            "outlier" => Ok(Self::Outlier),
            other => Err(invalid(format!("unknown synthetic kind '{other}'"))),
        }
    }
}

pub const DEFAULT_SHAPE: [usize; 2] = [64, 64];
const SOFTMAX_TEMPERATURE: f64 = 0.25;
const GELU_STD: f64 = 1.5;
const OUTLIER_FRACTION: f64 = 0.005;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Exact GeLU `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Numerically stable softmax of one row.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn generate(kind: SynthKind, shape: &[usize], seed: u64) -> Result<Tensor> {
    if shape.is_empty() {
        return Err(invalid("shape must have at least one dimension"));
    }
    let n: usize = shape.iter().product();
    let mut r = rng(seed);
    let data: Vec<f32> = match kind {
        SynthKind::Softmax => {
            let width = *shape.last().expect("non-empty shape");
            if width == 0 {
                return Err(invalid("zero-width softmax rows"));
            }
            let logits = gaussian(&mut r, n);
            logits
                .chunks(width)
                .flat_map(|row| {
                    let scaled: Vec<f64> = row.iter().map(|v| v / SOFTMAX_TEMPERATURE).collect();
                    softmax_row(&scaled)
                })
                .map(|v| v as f32)
                .collect()
        }
        SynthKind::Gelu => {
            let normal = Normal::new(0.0, GELU_STD).expect("valid normal");
            (0..n).map(|_| gelu(normal.sample(&mut r)) as f32).collect()
        }
        SynthKind::Outlier => {
            let mut v = gaussian(&mut r, n);
            let count = ((OUTLIER_FRACTION * n as f64).round() as usize).clamp(1, n.max(1));
            let mag = Uniform::new(20.0, 50.0).expect("valid range");
            for _ in 0..count {
                let i = r.random_range(0..n);
                let sign = if v[i] < 0.0 { -1.0 } else { 1.0 };
                v[i] = sign * mag.sample(&mut r);
            }
            v.into_iter().map(|x| x as f32).collect()
        }
    };
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::summary_stats;

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = generate(SynthKind::Softmax, &[8, 16], 3).unwrap();
        for row in t.data().chunks(16) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn gelu_lower_bound() {
        let t = generate(SynthKind::Gelu, &DEFAULT_SHAPE, 1).unwrap();
        let st = summary_stats(&t).unwrap();
        assert!(st.min >= -0.1701 && st.min < 0.0);
        assert!(st.max > 2.0);
    }

    #[test]
    fn outliers_present_and_seeded() {
        let a = generate(SynthKind::Outlier, &DEFAULT_SHAPE, 9).unwrap();
        let b = generate(SynthKind::Outlier, &DEFAULT_SHAPE, 9).unwrap();
        assert_eq!(a, b);
        assert!(summary_stats(&a).unwrap().absmax >= 20.0);
        assert_ne!(a, generate(SynthKind::Outlier, &DEFAULT_SHAPE, 10).unwrap());
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        let min = (0..=100_000)
            .map(|i| gelu(-1.0 + i as f64 / 100_000.0))
            .fold(f64::INFINITY, f64::min);
        assert!((min - -0.169_971_1).abs() < 1e-5);
    }
}
