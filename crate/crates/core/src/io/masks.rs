//! Segmentation mask agreement: overall IoU, mean IoU and precision at IoU
//! thresholds.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const PRECISION_THRESHOLDS: [f64; 3] = [0.5, 0.7, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    /// Cumulative intersection over cumulative union.
    pub oiou: f64,
    /// Mean of per-sample IoU.
    pub miou: f64,
    /// Fraction of samples with IoU at or above each threshold.
    pub prec_at_0_5: f64,
    pub prec_at_0_7: f64,
    pub prec_at_0_9: f64,
    pub samples: usize,
}

/// IoU of one pair of binary masks. Two empty masks agree perfectly.
pub fn iou(pred: &[bool], gt: &[bool]) -> f64 {
    let (i, u) = counts(pred, gt);
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

fn counts(pred: &[bool], gt: &[bool]) -> (u64, u64) {
    pred.iter().zip(gt).fold((0, 0), |(i, u), (&p, &g)| {
        (i + (p && g) as u64, u + (p || g) as u64)
    })
}

/// Metrics over per-sample mask pairs.
pub fn mask_metrics(pairs: &[(Vec<bool>, Vec<bool>)]) -> Result<MaskMetrics> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (mut ci, mut cu) = (0u64, 0u64);
    let mut ious = Vec::with_capacity(pairs.len());
    for (k, (p, g)) in pairs.iter().enumerate() {
        if p.len() != g.len() {
            return Err(shape_err(format!("mask pair {k} differs in size")));
        }
        let (i, u) = counts(p, g);
        ci += i;
        cu += u;
        ious.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
    }
    let n = ious.len() as f64;
    let prec = |t: f64| ious.iter().filter(|&&v| v >= t).count() as f64 / n;
    Ok(MaskMetrics {
        oiou: if cu == 0 { 1.0 } else { ci as f64 / cu as f64 },
        miou: ious.iter().sum::<f64>() / n,
        prec_at_0_5: prec(PRECISION_THRESHOLDS[0]),
        prec_at_0_7: prec(PRECISION_THRESHOLDS[1]),
        prec_at_0_9: prec(PRECISION_THRESHOLDS[2]),
        samples: pairs.len(),
    })
}

/// Binarizes two same-shaped tensors at `threshold` and treats axis 0 as the
/// sample axis (a rank-1 tensor is a single sample).
pub fn tensor_mask_metrics(pred: &Tensor, gt: &Tensor, threshold: f32) -> Result<MaskMetrics> {
    if pred.shape() != gt.shape() {
        return Err(shape_err(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let per = if pred.rank() == 1 {
        pred.len()
    } else {
        pred.len() / pred.shape()[0]
    };
    let bin = |t: &Tensor| -> Vec<Vec<bool>> {
        t.data()
            .chunks(per)
            .map(|c| c.iter().map(|&v| v > threshold).collect())
            .collect()
    };
    let pairs: Vec<_> = bin(pred).into_iter().zip(bin(gt)).collect();
    mask_metrics(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(bits: &str) -> Vec<bool> {
        bits.chars().map(|c| c == '1').collect()
    }

    #[test]
    fn hand_computed() {
        let pairs = vec![
            (m("1100"), m("1000")), // 1/2
            (m("1111"), m("1111")), // 1
            (m("0000"), m("0000")), // empty pair: 1
            (m("1000"), m("0100")), // 0
        ];
        let r = mask_metrics(&pairs).unwrap();
        assert!((r.oiou - 5.0 / 8.0).abs() < 1e-12);
        assert!((r.miou - 2.5 / 4.0).abs() < 1e-12);
        assert_eq!(r.prec_at_0_5, 0.75);
        assert_eq!(r.prec_at_0_7, 0.5);
        assert_eq!(r.prec_at_0_9, 0.5);
        assert_eq!(r.samples, 4);
    }

    #[test]
    fn tensors_split_on_first_axis() {
        let p = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let g = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = tensor_mask_metrics(&p, &g, 0.5).unwrap();
        assert_eq!(r.samples, 2);
        assert!((r.miou - 0.75).abs() < 1e-12);
        assert!(tensor_mask_metrics(&p, &Tensor::from_vec(vec![1.0; 4]).unwrap(), 0.5).is_err());
        assert!(mask_metrics(&[]).is_err());
    }
}
