//! Calibration-time scale search: linear candidate grids, MSE grid search,
//! percentile clipping, the gradient-weighted (Hessian-guided) output metric
//! and the alternating scale search for matmul operand pairs.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::quant::{
    dequantize_scalar, make_channel_params, make_params, qrange, quantize_scalar, scale_and_zero,
    QuantParams, Scheme,
};
use crate::tensor::{percentile_sorted, stats_of, Tensor};

/// Linear grid of scale multipliers `[alpha, beta]` with `n_candidates` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub alpha: f64,
    pub beta: f64,
    pub n_candidates: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 1.2,
            n_candidates: 100,
        }
    }
}

impl SearchSpace {
    pub fn new(alpha: f64, beta: f64, n_candidates: usize) -> Result<Self> {
        let s = Self {
            alpha,
            beta,
            n_candidates,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < self.beta && self.beta.is_finite()) {
            return Err(invalid(format!(
                "search space needs 0 < alpha < beta, got [{}, {}]",
                self.alpha, self.beta
            )));
        }
        if self.n_candidates < 2 {
            return Err(invalid("search space needs at least two candidates"));
        }
        Ok(())
    }

    /// Candidates `c * magnitude / q_span` for `c` linear over `[alpha, beta]`.
    pub fn candidates(&self, magnitude: f64, q_span: f64) -> Vec<f64> {
        let step = (self.beta - self.alpha) / (self.n_candidates - 1) as f64;
        (0..self.n_candidates)
            .map(|i| (self.alpha + step * i as f64) * magnitude / q_span)
            .collect()
    }
}

/// Loss gradient with respect to a layer output, aligned elementwise with it.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDump(Tensor);

impl GradientDump {
    pub fn new(tensor: Tensor) -> Self {
        Self(tensor)
    }

    /// Uniform gradient of `value` shaped like `like`.
    pub fn uniform(like: &Tensor, value: f32) -> Self {
        Self(Tensor::filled(like.shape().to_vec(), value).expect("shape already valid"))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn check_aligned(&self, output: &Tensor) -> Result<()> {
        if self.0.shape() != output.shape() {
            return Err(shape_err(format!(
                "gradient shape {:?} does not match output shape {:?}",
                self.0.shape(),
                output.shape()
            )));
        }
        Ok(())
    }
}

/// How output perturbations are weighted by the loss gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradWeighting {
    /// `mean((g * dO)^2)`
    #[default]
    Squared,
    /// `mean(|g| * dO^2)`
    Absolute,
    /// Ignore the gradient: plain output MSE.
    None,
}

impl GradWeighting {
    #[inline]
    fn term(self, g: f64, d: f64) -> f64 {
        match self {
            GradWeighting::Squared => (g * d) * (g * d),
            GradWeighting::Absolute => g.abs() * d * d,
            GradWeighting::None => d * d,
        }
    }
}

/// Mean of `(grad * (out_q - out_fp))^2` over all elements.
pub fn hessian_metric(out_fp: &Tensor, out_q: &Tensor, grad: &GradientDump) -> Result<f64> {
    if out_fp.shape() != out_q.shape() {
        return Err(shape_err("quantized and reference outputs differ in shape"));
    }
    grad.check_aligned(out_fp)?;
    let mut acc = 0.0;
    for ((&f, &q), &g) in out_fp
        .data()
        .iter()
        .zip(out_q.data())
        .zip(grad.tensor().data())
    {
        acc += GradWeighting::Squared.term(g as f64, q as f64 - f as f64);
    }
    Ok(acc / out_fp.len() as f64)
}

/// Objective used when comparing a reconstruction against its reference.
#[derive(Debug, Clone, Copy)]
pub enum Metric<'a> {
    Mse,
    /// Gradient-weighted error; one gradient per calibration sample.
    Hessian(&'a [GradientDump], GradWeighting),
}

impl Metric<'_> {
    /// Mean metric over all elements of all samples.
    pub fn total(&self, reference: &[Tensor], approx: &[Vec<f32>]) -> Result<f64> {
        let mut acc = 0.0f64;
        let mut n = 0usize;
        for (i, (r, a)) in reference.iter().zip(approx).enumerate() {
            match self {
                Metric::Mse => {
                    for (&x, &y) in r.data().iter().zip(a) {
                        let d = y as f64 - x as f64;
                        acc += d * d;
                    }
                }
                Metric::Hessian(grads, w) => {
                    let g = grads
                        .get(i)
                        .ok_or_else(|| invalid(format!("missing gradient for sample {i}")))?;
                    g.check_aligned(r)?;
                    for ((&x, &y), &gv) in r.data().iter().zip(a).zip(g.tensor().data()) {
                        acc += w.term(gv as f64, y as f64 - x as f64);
                    }
                }
            }
            n += r.len();
        }
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(acc / n as f64)
    }
}

/// Magnitude and code span that define the grid for a scheme.
fn grid_basis(min: f64, max: f64, bits: u8, scheme: Scheme, signed: bool) -> (f64, f64) {
    let (q_min, q_max) = qrange(bits, signed);
    match scheme {
        Scheme::Symmetric => (min.abs().max(max.abs()), q_max as f64),
        Scheme::Asymmetric => (max - min, (q_max - q_min) as f64),
    }
}

/// Grid searches cover a range containing 0, so a zero-point exists for
/// data that sits entirely on one side far from the origin.
fn zero_inclusive(min: f64, max: f64) -> (f64, f64) {
    (min.min(0.0), max.max(0.0))
}

/// Zero-point used for every candidate of an asymmetric grid: the one that
/// maps the observed range onto the full code span.
fn grid_zero_point(min: f64, max: f64, bits: u8, scheme: Scheme, signed: bool) -> Result<i32> {
    match scheme {
        Scheme::Symmetric => Ok(0),
        Scheme::Asymmetric => scale_and_zero(min, max, bits, scheme, signed).map(|(_, z)| z),
    }
}

fn candidate_mse(values: &[f32], scale: f64, zp: i32, q_min: i32, q_max: i32) -> f64 {
    let mut acc = 0.0f64;
    for &x in values {
        let y = dequantize_scalar(quantize_scalar(x, scale, zp, q_min, q_max), scale, zp);
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc / values.len() as f64
}

/// Picks the candidate scale with the lowest MSE; ties go to the smallest scale.
pub fn grid_search_scales(
    samples: &[f32],
    bits: u8,
    scheme: Scheme,
    signed: bool,
    candidates: &[f64],
) -> Result<QuantParams> {
    if candidates.is_empty() {
        return Err(invalid("empty candidate set"));
    }
    let st = stats_of(samples)?;
    let (lo, hi) = zero_inclusive(st.min, st.max);
    let zp = grid_zero_point(lo, hi, bits, scheme, signed)?;
    let (q_min, q_max) = qrange(bits, signed);
    let mut best: Option<(f64, f64)> = None;
    for &s in candidates {
        if !(s.is_finite() && s > 0.0) {
            return Err(invalid(format!("candidate scale {s} is not positive")));
        }
        let m = candidate_mse(samples, s, zp, q_min, q_max);
        let better = match best {
            None => true,
            Some((bm, bs)) => m < bm || (m == bm && s < bs),
        };
        if better {
            best = Some((m, s));
        }
    }
    let (_, s) = best.expect("non-empty candidates");
    QuantParams::per_tensor(s, zp, bits, signed)
}

/// MSE grid search over the linear candidate grid derived from `samples`.
pub fn mse_grid_search(
    samples: &Tensor,
    bits: u8,
    scheme: Scheme,
    signed: bool,
    space: &SearchSpace,
) -> Result<QuantParams> {
    search_values(samples.data(), bits, scheme, signed, space)
}

pub(crate) fn search_values(
    values: &[f32],
    bits: u8,
    scheme: Scheme,
    signed: bool,
    space: &SearchSpace,
) -> Result<QuantParams> {
    space.validate()?;
    let st = stats_of(values)?;
    let (lo, hi) = zero_inclusive(st.min, st.max);
    let (magnitude, span) = grid_basis(lo, hi, bits, scheme, signed);
    if magnitude == 0.0 || st.min == st.max {
        return make_params(st.min, st.max, bits, scheme, signed);
    }
    grid_search_scales(
        values,
        bits,
        scheme,
        signed,
        &space.candidates(magnitude, span),
    )
}

/// Per-channel MSE grid search along `axis`.
pub fn channel_grid_search(
    t: &Tensor,
    axis: usize,
    bits: u8,
    scheme: Scheme,
    signed: bool,
    space: &SearchSpace,
) -> Result<QuantParams> {
    let mut scales = Vec::new();
    let mut zps = Vec::new();
    for slice in t.channel_slices(axis)? {
        let p = search_values(&slice, bits, scheme, signed, space)?;
        scales.push(p.scale());
        zps.push(p.zero_point());
    }
    QuantParams::per_channel(scales, zps, bits, signed, axis)
}

fn percentile_range(values: &[f32], p: f64, scheme: Scheme) -> Result<(f64, f64)> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(invalid(format!("percentile {p} outside (0, 100]")));
    }
    match scheme {
        Scheme::Symmetric => {
            let mut abs: Vec<f32> = values.iter().map(|v| v.abs()).collect();
            abs.sort_by(f32::total_cmp);
            let a = percentile_sorted(&abs, p)?;
            Ok((-a, a))
        }
        Scheme::Asymmetric => {
            let mut sorted = values.to_vec();
            sorted.sort_by(f32::total_cmp);
            Ok((
                percentile_sorted(&sorted, 100.0 - p)?,
                percentile_sorted(&sorted, p)?,
            ))
        }
    }
}

/// Percentile clipping: the range is the `p`-th percentile of `|x|`
/// (symmetric) or `[P(100 - p), P(p)]` (asymmetric).
pub fn percentile_calibrate(
    samples: &Tensor,
    bits: u8,
    p: f64,
    scheme: Scheme,
    signed: bool,
) -> Result<QuantParams> {
    let (lo, hi) = percentile_range(samples.data(), p, scheme)?;
    make_params(lo, hi, bits, scheme, signed)
}

pub fn channel_percentile_calibrate(
    t: &Tensor,
    axis: usize,
    bits: u8,
    p: f64,
    scheme: Scheme,
    signed: bool,
) -> Result<QuantParams> {
    let ranges = t
        .channel_slices(axis)?
        .iter()
        .map(|s| percentile_range(s, p, scheme).map(|(a, b)| (a as f32, b as f32)))
        .collect::<Result<Vec<_>>>()?;
    make_channel_params(&ranges, axis, bits, scheme, signed)
}

/// One `A x B` product with the gradient of the loss w.r.t. its output.
#[derive(Debug, Clone, Copy)]
pub struct MatmulInstance<'a> {
    pub a: &'a Tensor,
    pub b: &'a Tensor,
    pub grad: &'a GradientDump,
}

/// Outcome of the alternating operand-scale search.
#[derive(Debug, Clone, PartialEq)]
pub struct AlternatingResult {
    pub params_a: QuantParams,
    pub params_b: QuantParams,
    /// Metric at the starting point, then after every half-step.
    pub history: Vec<f64>,
    /// Set when an operand is identically zero and identity scales were used.
    pub degenerate: bool,
}

impl AlternatingResult {
    pub fn scale_a(&self) -> f64 {
        self.params_a.scale()
    }

    pub fn scale_b(&self) -> f64 {
        self.params_b.scale()
    }
}

/// Options for [`alternating_matmul_search_batch`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlternatingConfig {
    pub bits: u8,
    pub space: SearchSpace,
    pub rounds: usize,
    pub weighting: GradWeighting,
}

impl AlternatingConfig {
    pub fn new(bits: u8, space: SearchSpace, rounds: usize) -> Self {
        Self {
            bits,
            space,
            rounds,
            weighting: GradWeighting::Squared,
        }
    }
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => Ok((m, k, n)),
        (sa, sb) => Err(shape_err(format!("cannot multiply {sa:?} by {sb:?}"))),
    }
}

pub(crate) fn matmul_f64(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p] as f64;
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in dst.iter_mut().zip(row) {
                *o += av * bv as f64;
            }
        }
    }
    out
}

struct Prepared<'a> {
    inst: MatmulInstance<'a>,
    dims: (usize, usize, usize),
    reference: Vec<f64>,
}

fn prepare<'a>(instances: &[MatmulInstance<'a>]) -> Result<Vec<Prepared<'a>>> {
    if instances.is_empty() {
        return Err(Error::EmptyInput);
    }
    instances
        .iter()
        .map(|inst| {
            let dims = matmul_dims(inst.a, inst.b)?;
            let g = inst.grad.tensor().shape();
            if g != [dims.0, dims.2] {
                return Err(shape_err(format!(
                    "gradient shape {g:?} does not match product shape [{}, {}]",
                    dims.0, dims.2
                )));
            }
            let reference = matmul_f64(inst.a.data(), inst.b.data(), dims.0, dims.1, dims.2);
            Ok(Prepared {
                inst: *inst,
                dims,
                reference,
            })
        })
        .collect()
}

fn fake_values(values: &[f32], p: &QuantParams) -> Vec<f32> {
    values.iter().map(|&v| p.fake_value(v, 0)).collect()
}

fn product_metric(
    prep: &[Prepared],
    a_hat: &[Vec<f32>],
    b_hat: &[Vec<f32>],
    w: GradWeighting,
) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for ((p, ah), bh) in prep.iter().zip(a_hat).zip(b_hat) {
        let (m, k, nn) = p.dims;
        let out = matmul_f64(ah, bh, m, k, nn);
        for ((&o, &r), &g) in out
            .iter()
            .zip(&p.reference)
            .zip(p.inst.grad.tensor().data())
        {
            acc += w.term(g as f64, o - r);
        }
        n += out.len();
    }
    acc / n as f64
}

/// Operand quantizer family: symmetric, unsigned when the operand is non-negative.
struct OperandGrid {
    bits: u8,
    signed: bool,
    candidates: Vec<f64>,
}

impl OperandGrid {
    fn new(operands: &[&Tensor], bits: u8, space: &SearchSpace) -> Result<Option<Self>> {
        let mut min = f64::INFINITY;
        let mut absmax = 0.0f64;
        for t in operands {
            let s = stats_of(t.data())?;
            min = min.min(s.min);
            absmax = absmax.max(s.absmax);
        }
        if absmax == 0.0 {
            return Ok(None);
        }
        let signed = min < 0.0;
        let q_max = qrange(bits, signed).1 as f64;
        Ok(Some(Self {
            bits,
            signed,
            candidates: space.candidates(absmax, q_max),
        }))
    }

    fn params(&self, idx: usize) -> QuantParams {
        QuantParams::per_tensor(self.candidates[idx], 0, self.bits, self.signed)
            .expect("grid candidates are positive")
    }

    /// Grid index nearest to the unclipped (max-range) scale, i.e. multiplier 1.
    fn start_index(&self, space: &SearchSpace) -> usize {
        let step = (space.beta - space.alpha) / (space.n_candidates - 1) as f64;
        let idx = ((1.0 - space.alpha) / step).round();
        idx.clamp(0.0, (self.candidates.len() - 1) as f64) as usize
    }
}

/// Alternating coordinate search over operand scales for a single product.
pub fn alternating_matmul_search(
    a: &Tensor,
    b: &Tensor,
    grad: &GradientDump,
    bits: u8,
    space: &SearchSpace,
    rounds: usize,
) -> Result<AlternatingResult> {
    alternating_matmul_search_batch(
        &[MatmulInstance { a, b, grad }],
        &AlternatingConfig::new(bits, *space, rounds),
    )
}

/// Alternating search over a calibration batch of products sharing one
/// `(S_A, S_B)` pair. Each round fixes `S_B` and picks the best `S_A` from
/// its grid, then fixes `S_A` and picks `S_B`. Both start at the grid point
/// nearest the max-range scale, so the metric never increases.
pub fn alternating_matmul_search_batch(
    instances: &[MatmulInstance],
    cfg: &AlternatingConfig,
) -> Result<AlternatingResult> {
    crate::quant::check_bits(cfg.bits)?;
    cfg.space.validate()?;
    if cfg.rounds == 0 {
        return Err(invalid("rounds must be at least 1"));
    }
    let prep = prepare(instances)?;
    let a_ops: Vec<&Tensor> = instances.iter().map(|i| i.a).collect();
    let b_ops: Vec<&Tensor> = instances.iter().map(|i| i.b).collect();
    let (grid_a, grid_b) = match (
        OperandGrid::new(&a_ops, cfg.bits, &cfg.space)?,
        OperandGrid::new(&b_ops, cfg.bits, &cfg.space)?,
    ) {
        (Some(ga), Some(gb)) => (ga, gb),
        _ => {
            let id = QuantParams::per_tensor(1.0, 0, cfg.bits, true)?;
            return Ok(AlternatingResult {
                params_a: id.clone(),
                params_b: id,
                history: Vec::new(),
                degenerate: true,
            });
        }
    };

    let mut ia = grid_a.start_index(&cfg.space);
    let mut ib = grid_b.start_index(&cfg.space);
    let quant_all = |ops: &[&Tensor], p: &QuantParams| -> Vec<Vec<f32>> {
        ops.iter().map(|t| fake_values(t.data(), p)).collect()
    };
    let mut a_hat = quant_all(&a_ops, &grid_a.params(ia));
    let mut b_hat = quant_all(&b_ops, &grid_b.params(ib));
    let mut history = vec![product_metric(&prep, &a_hat, &b_hat, cfg.weighting)];

    for _ in 0..cfg.rounds {
        let (best, metric) = best_index(&grid_a, |p| {
            product_metric(&prep, &quant_all(&a_ops, p), &b_hat, cfg.weighting)
        });
        ia = best;
        a_hat = quant_all(&a_ops, &grid_a.params(ia));
        history.push(metric);

        let (best, metric) = best_index(&grid_b, |p| {
            product_metric(&prep, &a_hat, &quant_all(&b_ops, p), cfg.weighting)
        });
        ib = best;
        b_hat = quant_all(&b_ops, &grid_b.params(ib));
        history.push(metric);
    }

    Ok(AlternatingResult {
        params_a: grid_a.params(ia),
        params_b: grid_b.params(ib),
        history,
        degenerate: false,
    })
}

fn best_index(grid: &OperandGrid, mut eval: impl FnMut(&QuantParams) -> f64) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for i in 0..grid.candidates.len() {
        let m = eval(&grid.params(i));
        if m < best.1 {
            best = (i, m);
        }
    }
    best
}

/// Searches only the right operand's scale with the left operand already
/// reconstructed (e.g. a product whose left input has its own quantizer).
pub fn search_right_operand(
    a_hat: &[Tensor],
    b: &[Tensor],
    grads: &[GradientDump],
    cfg: &AlternatingConfig,
) -> Result<QuantParams> {
    if a_hat.len() != b.len() || b.len() != grads.len() {
        return Err(invalid("operand and gradient lists differ in length"));
    }
    let instances: Vec<MatmulInstance> = a_hat
        .iter()
        .zip(b)
        .zip(grads)
        .map(|((a, b), grad)| MatmulInstance { a, b, grad })
        .collect();
    let prep = prepare(&instances)?;
    let b_ops: Vec<&Tensor> = b.iter().collect();
    let Some(grid) = OperandGrid::new(&b_ops, cfg.bits, &cfg.space)? else {
        return QuantParams::per_tensor(1.0, 0, cfg.bits, true);
    };
    let a_vals: Vec<Vec<f32>> = a_hat.iter().map(|t| t.data().to_vec()).collect();
    let (best, _) = best_index(&grid, |p| {
        let bh: Vec<Vec<f32>> = b_ops.iter().map(|t| fake_values(t.data(), p)).collect();
        product_metric(&prep, &a_vals, &bh, cfg.weighting)
    });
    Ok(grid.params(best))
}
