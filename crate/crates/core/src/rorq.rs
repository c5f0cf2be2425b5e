//! Reorder-based outlier-retained quantization.
//!
//! Calibration repeatedly splits the current value set at a threshold on
//! `|x|`, fits a uniform quantizer to the inliers and carries on with the
//! outliers. At inference every value is routed to the first group whose
//! threshold covers `|x|`, so group membership is recovered by comparison
//! rather than stored per element.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};
use crate::quant::{QuantParams, Scheme};
use crate::search::{search_values, SearchSpace};
use crate::tensor::{percentile_sorted, stats_of, Tensor};

/// Default iteration cap: at most four groups, two bits of group metadata.
pub const DEFAULT_MAX_ITERS: usize = 3;

/// Rule for splitting inliers from outliers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdStrategy {
    /// `mean + 3 * std` of `|x|`.
    #[default]
    #[serde(rename = "mean_3sd")]
    Mean3Sd,
    /// Split at the mean of `|x|`.
    MeanDivision,
    /// `median + k * MAD` of `|x|`.
    MedianMad { k: f64 },
    /// Upper end of the two-sided Gaussian interval at `level`.
    Confidence { level: f64 },
    /// No split: the whole tensor is one group.
    None,
}

impl ThresholdStrategy {
    pub fn median_mad() -> Self {
        Self::MedianMad { k: 3.0 }
    }

    pub fn confidence() -> Self {
        Self::Confidence { level: 0.99 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Mean3Sd => "mean_3sd",
            Self::MeanDivision => "mean_division",
            Self::MedianMad { .. } => "median_mad",
            Self::Confidence { .. } => "confidence",
            Self::None => "none",
        }
    }

    /// Parses a strategy name with default parameters.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "mean_3sd" => Self::Mean3Sd,
            "mean_division" => Self::MeanDivision,
            "median_mad" => Self::median_mad(),
            "confidence" => Self::confidence(),
            "none" => Self::None,
            other => return Err(invalid(format!("unknown threshold strategy '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub tau: f64,
    /// MAD was zero, so the median+MAD threshold collapsed onto the median.
    pub degenerate: bool,
}

/// Threshold over the absolute values of `values`.
pub fn compute_threshold(values: &Tensor, strategy: ThresholdStrategy) -> Result<Threshold> {
    threshold_of(values.data(), strategy)
}

fn threshold_of(values: &[f32], strategy: ThresholdStrategy) -> Result<Threshold> {
    let abs: Vec<f32> = values.iter().map(|v| v.abs()).collect();
    let st = stats_of(&abs)?;
    let plain = |tau: f64| {
        Ok(Threshold {
            tau,
            degenerate: false,
        })
    };
    match strategy {
        ThresholdStrategy::Mean3Sd => plain(st.mean + 3.0 * st.std),
        ThresholdStrategy::MeanDivision => plain(st.mean),
        ThresholdStrategy::None => plain(st.max),
        ThresholdStrategy::Confidence { level } => {
            if !(level > 0.0 && level < 1.0) {
                return Err(invalid(format!("confidence level {level} outside (0, 1)")));
            }
            let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
            plain(st.mean + z * st.std)
        }
        ThresholdStrategy::MedianMad { k } => {
            if !(k.is_finite() && k >= 0.0) {
                return Err(invalid(format!("MAD multiplier {k} must be non-negative")));
            }
            let mut sorted = abs;
            sorted.sort_by(f32::total_cmp);
            let median = percentile_sorted(&sorted, 50.0)?;
            let mut dev: Vec<f32> = sorted
                .iter()
                .map(|&v| (v as f64 - median).abs() as f32)
                .collect();
            dev.sort_by(f32::total_cmp);
            let mad = percentile_sorted(&dev, 50.0)?;
            Ok(Threshold {
                tau: median + k * mad,
                degenerate: mad == 0.0,
            })
        }
    }
}

/// Splits into `|x| <= tau` and `|x| > tau`, preserving order.
pub fn partition(values: &[f32], tau: f64) -> Result<(Vec<f32>, Vec<f32>)> {
    if tau.is_nan() || tau < 0.0 {
        return Err(invalid(format!("threshold {tau} must be non-negative")));
    }
    Ok(values.iter().partition(|v| (v.abs() as f64) <= tau))
}

/// One value group: values with `|x| <= upper` not claimed by an earlier group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RorqGroup {
    /// `+inf` for the final catch-all group.
    #[serde(with = "crate::io::exact::one")]
    pub upper: f64,
    pub params: QuantParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RorqRepr", into = "RorqRepr")]
pub struct RORQParams {
    bits: u8,
    groups: Vec<RorqGroup>,
    max_iters: usize,
}

impl RORQParams {
    pub fn new(bits: u8, groups: Vec<RorqGroup>, max_iters: usize) -> Result<Self> {
        if max_iters == 0 {
            return Err(invalid("max_iters must be at least 1"));
        }
        if groups.is_empty() || groups.len() > max_iters + 1 {
            return Err(invalid(format!(
                "group count {} outside [1, {}]",
                groups.len(),
                max_iters + 1
            )));
        }
        let (last, head) = groups.split_last().expect("non-empty");
        if last.upper != f64::INFINITY {
            return Err(invalid("last group must be unbounded"));
        }
        if head.iter().any(|g| !g.upper.is_finite()) {
            return Err(invalid("only the last group may be unbounded"));
        }
        if groups.windows(2).any(|w| w[0].upper >= w[1].upper) {
            return Err(invalid("group thresholds must strictly increase"));
        }
        if groups.iter().any(|g| g.params.bits() != bits) {
            return Err(invalid("all groups must share the bit-width"));
        }
        Ok(Self {
            bits,
            groups,
            max_iters,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn groups(&self) -> &[RorqGroup] {
        &self.groups
    }

    pub fn max_iters(&self) -> usize {
        self.max_iters
    }

    /// Finite thresholds, in increasing order.
    pub fn thresholds(&self) -> Vec<f64> {
        self.groups[..self.groups.len() - 1]
            .iter()
            .map(|g| g.upper)
            .collect()
    }

    /// Bits needed to tag each element with its group if the index were stored.
    pub fn group_index_bits(&self) -> u32 {
        usize::BITS - (self.groups.len() - 1).leading_zeros()
    }

    /// Per-tensor metadata: thresholds (f32), scales (f32), zero-points (i32).
    pub fn metadata_bytes(&self) -> usize {
        4 * (self.groups.len() - 1) + 8 * self.groups.len()
    }

    /// Code for `x` in group `g`, moved to the nearest lattice point whose
    /// reconstruction stays inside the group's band
    /// `upper[g-1] < |v| <= upper[g]`, so re-quantizing is code-stable.
    fn band_code(&self, g: usize, x: f32) -> i32 {
        let p = &self.groups[g].params;
        let c = p.quantize_value(x, 0);
        let hi = self.groups[g].upper;
        let lo = if g == 0 {
            f64::NEG_INFINITY
        } else {
            self.groups[g - 1].upper
        };
        let fits = |c: i32| {
            let v = p.dequantize_value(c, 0).abs() as f64;
            v <= hi && v > lo
        };
        if fits(c) {
            return c;
        }
        let (q_min, q_max) = (p.q_min(), p.q_max());
        for d in 1..=(q_max - q_min) {
            for cand in [c - d, c + d] {
                if (q_min..=q_max).contains(&cand) && fits(cand) {
                    return cand;
                }
            }
        }
        c
    }

    pub fn group_of(&self, x: f32) -> usize {
        let a = x.abs() as f64;
        self.groups
            .iter()
            .position(|g| a <= g.upper)
            .unwrap_or(self.groups.len() - 1)
    }
}

#[derive(Serialize, Deserialize)]
struct RorqRepr {
    bits: u8,
    max_iters: usize,
    groups: Vec<RorqGroup>,
}

impl TryFrom<RorqRepr> for RORQParams {
    type Error = Error;
    fn try_from(r: RorqRepr) -> Result<Self> {
        Self::new(r.bits, r.groups, r.max_iters)
    }
}

impl From<RORQParams> for RorqRepr {
    fn from(p: RORQParams) -> Self {
        Self {
            bits: p.bits,
            max_iters: p.max_iters,
            groups: p.groups,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RorqCalibration {
    pub params: RORQParams,
    /// Split iterations actually run.
    pub iterations: usize,
    /// Iterations where a zero MAD forced the mean+3SD threshold.
    pub mad_fallbacks: usize,
}

/// Iterative inlier/outlier grouping with an MSE grid-searched asymmetric
/// quantizer per group.
pub fn calibrate_rorq(
    samples: &Tensor,
    bits: u8,
    strategy: ThresholdStrategy,
    max_iters: usize,
    space: &SearchSpace,
) -> Result<RorqCalibration> {
    if max_iters == 0 {
        return Err(invalid("max_iters must be at least 1"));
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let fit = |vals: &[f32]| search_values(vals, bits, Scheme::Asymmetric, false, space);

    let mut groups = Vec::new();
    let mut current: Vec<f32> = samples.data().to_vec();
    let mut mad_fallbacks = 0;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut th = threshold_of(&current, strategy)?;
        if th.degenerate {
            th = threshold_of(&current, ThresholdStrategy::Mean3Sd)?;
            mad_fallbacks += 1;
        }
        let (inliers, outliers) = partition(&current, th.tau)?;
        if outliers.is_empty() {
            groups.push(RorqGroup {
                upper: f64::INFINITY,
                params: fit(&inliers)?,
            });
            current.clear();
            break;
        }
        groups.push(RorqGroup {
            upper: th.tau,
            params: fit(&inliers)?,
        });
        current = outliers;
    }
    if !current.is_empty() {
        groups.push(RorqGroup {
            upper: f64::INFINITY,
            params: fit(&current)?,
        });
    }
    Ok(RorqCalibration {
        params: RORQParams::new(bits, groups, max_iters)?,
        iterations,
        mad_fallbacks,
    })
}

/// `(group index, code)` for one value.
pub fn rorq_quantize(x: f32, p: &RORQParams) -> (usize, i32) {
    let g = p.group_of(x);
    (g, p.band_code(g, x))
}

pub fn rorq_dequantize(group: usize, code: i32, p: &RORQParams) -> Result<f32> {
    let g = p.groups.get(group).ok_or_else(|| {
        invalid(format!(
            "group {group} out of range ({} groups)",
            p.groups.len()
        ))
    })?;
    Ok(g.params.dequantize_value(code, 0))
}

#[inline]
pub fn rorq_fake(x: f32, p: &RORQParams) -> f32 {
    let (g, c) = rorq_quantize(x, p);
    p.groups[g].params.dequantize_value(c, 0)
}

pub fn fake_rorq(t: &Tensor, p: &RORQParams) -> Tensor {
    t.map(|x| rorq_fake(x, p))
        .expect("reconstruction is finite")
}

/// Packs `(group, code)` as `group * 2^bits + code`.
pub fn rorq_encode(t: &Tensor, p: &RORQParams) -> Vec<u32> {
    t.data()
        .iter()
        .map(|&x| {
            let (g, c) = rorq_quantize(x, p);
            ((g as u32) << p.bits) | c as u32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{make_params, quant_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal as RNormal};

    fn t1(v: &[f32]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    fn normal_sample(seed: u64, n: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = RNormal::new(0.0f32, 1.0).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn threshold_examples() {
        let t = t1(&[1.0, -2.0, 3.0, -4.0, 5.0]);
        let th = compute_threshold(&t, ThresholdStrategy::Mean3Sd).unwrap();
        assert!((th.tau - (3.0 + 3.0 * 2f64.sqrt())).abs() < 1e-12);
        assert!((th.tau - 7.2426).abs() < 1e-4);

        let c = compute_threshold(&t1(&[2.5; 4]), ThresholdStrategy::Mean3Sd).unwrap();
        assert_eq!(c.tau, 2.5);

        let m = compute_threshold(
            &t1(&[1.0, 1.0, 1.0, 1.0, 1.0, 9.0]),
            ThresholdStrategy::median_mad(),
        )
        .unwrap();
        assert_eq!(m.tau, 1.0);
        assert!(m.degenerate);

        let d = compute_threshold(&t, ThresholdStrategy::MeanDivision).unwrap();
        assert_eq!(d.tau, 3.0);
        let conf = compute_threshold(&t, ThresholdStrategy::confidence()).unwrap();
        assert!((conf.tau - (3.0 + 2.5758293035489 * 2f64.sqrt())).abs() < 1e-9);
        assert!(matches!(
            threshold_of(&[], ThresholdStrategy::Mean3Sd),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [
            "mean_3sd",
            "mean_division",
            "median_mad",
            "confidence",
            "none",
        ] {
            assert_eq!(ThresholdStrategy::from_name(s).unwrap().name(), s);
        }
        assert!(ThresholdStrategy::from_name("bogus").is_err());
    }

    #[test]
    fn partition_examples() {
        let (i, o) = partition(&[1.0, 2.0, 3.0], 10.0).unwrap();
        assert_eq!((i.len(), o.len()), (3, 0));
        let (i, o) = partition(&[-5.0, 0.1, 5.0], 1.0).unwrap();
        assert_eq!(i, vec![0.1]);
        assert_eq!(o, vec![-5.0, 5.0]);
        assert!(partition(&[1.0], -1.0).is_err());
    }

    #[test]
    fn partition_preserves_multiset() {
        let v = normal_sample(9, 500);
        let (mut i, o) = partition(&v, 1.0).unwrap();
        assert_eq!(i.len() + o.len(), v.len());
        i.extend(o);
        let mut a = v.clone();
        a.sort_by(f32::total_cmp);
        i.sort_by(f32::total_cmp);
        assert_eq!(a, i);
    }

    #[test]
    fn injected_outliers_land_in_later_groups() {
        let mut v = normal_sample(0, 1000);
        v.extend([40.0, 50.0]);
        let t = t1(&v);
        let cal = calibrate_rorq(
            &t,
            8,
            ThresholdStrategy::Mean3Sd,
            3,
            &SearchSpace::default(),
        )
        .unwrap();
        let p = &cal.params;
        let oracle = threshold_of(&v, ThresholdStrategy::Mean3Sd).unwrap().tau;
        assert_eq!(p.groups()[0].upper, oracle);
        assert!(p.group_of(40.0) >= 1);
        assert!(p.group_of(50.0) >= 1);
        assert!(p.thresholds().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn tight_data_single_group() {
        let t = t1(&[1.0, 1.1, 0.9, -1.0, 1.05]);
        let cal = calibrate_rorq(
            &t,
            8,
            ThresholdStrategy::Mean3Sd,
            3,
            &SearchSpace::default(),
        )
        .unwrap();
        assert_eq!(cal.params.groups().len(), 1);
        assert_eq!(cal.iterations, 1);
    }

    #[test]
    fn iteration_cap_gives_two_groups() {
        let mut v = normal_sample(4, 400);
        v.extend([30.0, -45.0, 60.0, 90.0]);
        let cal = calibrate_rorq(
            &t1(&v),
            8,
            ThresholdStrategy::Mean3Sd,
            1,
            &SearchSpace::default(),
        )
        .unwrap();
        assert_eq!(cal.params.groups().len(), 2);
        assert_eq!(cal.params.groups()[1].upper, f64::INFINITY);
    }

    #[test]
    fn identical_values_single_group() {
        let cal = calibrate_rorq(
            &t1(&[0.7; 10]),
            8,
            ThresholdStrategy::Mean3Sd,
            3,
            &SearchSpace::default(),
        )
        .unwrap();
        assert_eq!(cal.params.groups().len(), 1);
        assert!((rorq_fake(0.7, &cal.params) - 0.7).abs() < 1e-6);
    }

    #[test]
    fn degenerate_mad_falls_back() {
        let mut v = vec![1.0f32; 50];
        v.extend([9.0, 12.0]);
        let cal = calibrate_rorq(
            &t1(&v),
            8,
            ThresholdStrategy::median_mad(),
            3,
            &SearchSpace::default(),
        )
        .unwrap();
        assert!(cal.mad_fallbacks >= 1);
    }

    #[test]
    fn codec_examples() {
        let mut v = normal_sample(2, 1000);
        v.extend([25.0, -30.0, 48.0]);
        let p = calibrate_rorq(
            &t1(&v),
            8,
            ThresholdStrategy::Mean3Sd,
            3,
            &SearchSpace::default(),
        )
        .unwrap()
        .params;
        let (g, c) = rorq_quantize(0.1, &p);
        assert_eq!(g, 0);
        assert!((0..=255).contains(&c));
        let (g, _) = rorq_quantize(1e4, &p);
        assert_eq!(g, p.groups().len() - 1);
        for &x in &v {
            let (g, c) = rorq_quantize(x, &p);
            let back = rorq_dequantize(g, c, &p).unwrap();
            assert_eq!(rorq_quantize(back, &p), (g, c), "x = {x}");
        }
        assert!(matches!(
            rorq_dequantize(99, 0, &p),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn grouping_beats_per_tensor_on_heavy_tails() {
        for seed in 0..10 {
            let mut v = normal_sample(seed, 2000);
            v.extend([35.0, -42.0, 28.0]);
            let t = t1(&v);
            let p = calibrate_rorq(
                &t,
                8,
                ThresholdStrategy::Mean3Sd,
                3,
                &SearchSpace::default(),
            )
            .unwrap()
            .params;
            let recon = fake_rorq(&t, &p);
            let ours = crate::quant::mse(t.data(), recon.data());
            let st = crate::tensor::summary_stats(&t).unwrap();
            let base = make_params(st.min, st.max, 8, Scheme::Asymmetric, false).unwrap();
            assert!(ours < quant_error(&t, &base).unwrap().mse);
        }
    }

    #[test]
    fn params_validation() {
        let q = make_params(-1.0, 1.0, 8, Scheme::Asymmetric, false).unwrap();
        let g = |upper| RorqGroup {
            upper,
            params: q.clone(),
        };
        assert!(RORQParams::new(8, vec![g(1.0), g(f64::INFINITY)], 3).is_ok());
        assert!(RORQParams::new(8, vec![g(1.0)], 3).is_err());
        assert!(RORQParams::new(8, vec![g(2.0), g(1.0), g(f64::INFINITY)], 3).is_err());
        assert!(RORQParams::new(8, vec![g(1.0), g(2.0), g(f64::INFINITY)], 1).is_err());
        assert!(RORQParams::new(4, vec![g(f64::INFINITY)], 1).is_err());
    }

    #[test]
    fn deterministic() {
        let mut v = normal_sample(7, 800);
        v.extend([22.0, 31.0]);
        let t = t1(&v);
        let a = calibrate_rorq(
            &t,
            6,
            ThresholdStrategy::Mean3Sd,
            3,
            &SearchSpace::default(),
        )
        .unwrap();
        let b = calibrate_rorq(
            &t,
            6,
            ThresholdStrategy::Mean3Sd,
            3,
            &SearchSpace::default(),
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
