//! Desk-scale network with the four module archetypes a referring-segmentation
//! model quantizes differently: a self-attention + GeLU MLP visual block, a
//! text linear with injected outlier channels, a fusion linear and a
//! conv + batch-norm decoder stub.
//!
//! ```text
//! X[8,16] -> Q,K,V = X Wq, X Wk, X Wv
//!         -> S = Q K^T -> P = softmax(S / sqrt 16) -> C = P V
//!         -> G = gelu(C W1) -> Y = X + G W2                (visual)
//! X       -> T = X Wt                                      (text, outliers)
//! F = Y Wfv + T Wft -> D[c][t][j] = F[t][8c + j]           (fusion)
//! E = conv3x3(D) + b -> O = BN(E)                          (decoder)
//! ```
//!
//! All arithmetic is `f64`; tensors cross the API as `f32` [`Tensor`]s.
//! Hooks expose every intermediate the calibration pipeline needs, and the
//! analytic backward pass yields the proxy-loss gradient at each hook.

mod pipeline;

pub use pipeline::{
    calibration_inputs, eval_inputs, evaluate_plan, run_pipeline, run_seeded, PlanConfig,
    QuantPlan, DEFAULT_CALIB_SIZE, DEFAULT_EVAL_SIZE,
};

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::io::synth::{gaussian, gelu, rng};
use crate::quant::{fold_batchnorm, BNParams};
use crate::search::GradientDump;
use crate::tensor::Tensor;

pub const D_MODEL: usize = 16;
pub const SEQ_LEN: usize = 8;
pub const HIDDEN: usize = 32;
pub const DEC_IN: usize = 2;
pub const DEC_OUT: usize = 4;
pub const DEC_W: usize = D_MODEL / DEC_IN;
pub const KSIZE: usize = 3;
pub const OUTLIER_COLUMNS: usize = 2;
const BN_EPS: f32 = 1e-5;

/// Named activation points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Hook {
    #[serde(rename = "attn.q")]
    Q,
    #[serde(rename = "attn.k")]
    K,
    #[serde(rename = "attn.v")]
    V,
    #[serde(rename = "attn.scores")]
    Scores,
    #[serde(rename = "attn.softmax")]
    Softmax,
    #[serde(rename = "attn.context")]
    Context,
    #[serde(rename = "mlp.gelu")]
    Gelu,
    #[serde(rename = "fusion.in")]
    Fusion,
    #[serde(rename = "text.linear")]
    Text,
    #[serde(rename = "decoder.in")]
    DecoderIn,
    #[serde(rename = "decoder.pre_bn")]
    PreBn,
}

impl Hook {
    pub const ALL: [Hook; 11] = [
        Hook::Q,
        Hook::K,
        Hook::V,
        Hook::Scores,
        Hook::Softmax,
        Hook::Context,
        Hook::Gelu,
        Hook::Fusion,
        Hook::Text,
        Hook::DecoderIn,
        Hook::PreBn,
    ];

    /// Hooks whose activations are fake-quantized under a plan. The raw
    /// scores and the pre-BN conv output are traced but stay in float
    /// (the former is a matmul output, the latter disappears when BN folds).
    pub const QUANTIZED: [Hook; 9] = [
        Hook::Q,
        Hook::K,
        Hook::V,
        Hook::Softmax,
        Hook::Context,
        Hook::Gelu,
        Hook::Fusion,
        Hook::Text,
        Hook::DecoderIn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Hook::Q => "attn.q",
            Hook::K => "attn.k",
            Hook::V => "attn.v",
            Hook::Scores => "attn.scores",
            Hook::Softmax => "attn.softmax",
            Hook::Context => "attn.context",
            Hook::Gelu => "mlp.gelu",
            Hook::Fusion => "fusion.in",
            Hook::Text => "text.linear",
            Hook::DecoderIn => "decoder.in",
            Hook::PreBn => "decoder.pre_bn",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Hook::ALL
            .into_iter()
            .find(|h| h.name() == name)
            .ok_or_else(|| invalid(format!("unknown hook '{name}'")))
    }

    pub fn shape(self) -> Vec<usize> {
        match self {
            Hook::Scores | Hook::Softmax => vec![SEQ_LEN, SEQ_LEN],
            Hook::Gelu => vec![SEQ_LEN, HIDDEN],
            Hook::DecoderIn => vec![DEC_IN, SEQ_LEN, DEC_W],
            Hook::PreBn => vec![DEC_OUT, SEQ_LEN, DEC_W],
            _ => vec![SEQ_LEN, D_MODEL],
        }
    }
}

/// Weight tensors that receive a quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WeightId {
    Wq,
    Wk,
    Wv,
    W1,
    W2,
    Wt,
    Wfv,
    Wft,
    /// The decoder conv after batch norm is folded into it.
    Conv,
}

impl WeightId {
    pub const ALL: [WeightId; 9] = [
        WeightId::Wq,
        WeightId::Wk,
        WeightId::Wv,
        WeightId::W1,
        WeightId::W2,
        WeightId::Wt,
        WeightId::Wfv,
        WeightId::Wft,
        WeightId::Conv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightId::Wq => "attn.wq",
            WeightId::Wk => "attn.wk",
            WeightId::Wv => "attn.wv",
            WeightId::W1 => "mlp.w1",
            WeightId::W2 => "mlp.w2",
            WeightId::Wt => "text.wt",
            WeightId::Wfv => "fusion.wv",
            WeightId::Wft => "fusion.wt",
            WeightId::Conv => "decoder.conv",
        }
    }

    /// Output-channel axis: columns for `X W` linears, axis 0 for the conv.
    pub fn channel_axis(self) -> usize {
        match self {
            WeightId::Conv => 0,
            _ => 1,
        }
    }
}

/// Seeded weights. Linear weights are `[in, out]` and applied as `X W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub wt: Tensor,
    /// Output columns of `wt` scaled by a factor in `[20, 50]`.
    pub outlier_columns: Vec<usize>,
    pub wfv: Tensor,
    pub wft: Tensor,
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub bn: BNParams,
}

fn normal_tensor(r: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = gaussian(r, n)
        .into_iter()
        .map(|v| (v * std) as f32)
        .collect();
    Tensor::new(shape, data).expect("finite seeded weights")
}

impl ToyNetWeights {
    pub fn generate(seed: u64) -> Self {
        let mut r = rng(seed);
        let d = D_MODEL;
        // Logit std of about 2 after the 1/sqrt(d) scaling: about half of each
        // attention row sits below 0.05.
        let qk_std = (2.0 / d as f64).sqrt();
        let wq = normal_tensor(&mut r, vec![d, d], qk_std);
        let wk = normal_tensor(&mut r, vec![d, d], qk_std);
        let wv = normal_tensor(&mut r, vec![d, d], 1.0 / (d as f64).sqrt());
        let w1 = normal_tensor(&mut r, vec![d, HIDDEN], 0.5);
        let w2 = normal_tensor(&mut r, vec![HIDDEN, d], 1.0 / (HIDDEN as f64).sqrt());

        let mut wt = normal_tensor(&mut r, vec![d, d], 1.0 / (d as f64).sqrt()).into_data();
        let mut wft = normal_tensor(&mut r, vec![d, d], 0.25).into_data();
        let mut outlier_columns = Vec::with_capacity(OUTLIER_COLUMNS);
        while outlier_columns.len() < OUTLIER_COLUMNS {
            let c = r.random_range(0..d);
            if !outlier_columns.contains(&c) {
                outlier_columns.push(c);
            }
        }
        outlier_columns.sort_unstable();
        let factor = Uniform::new(20.0f64, 50.0).expect("valid range");
        for &c in &outlier_columns {
            let f = factor.sample(&mut r);
            for i in 0..d {
                wt[i * d + c] = (wt[i * d + c] as f64 * f) as f32;
            }
            // The fusion weights read the outlier channel at normal strength.
            for j in 0..d {
                wft[c * d + j] = (wft[c * d + j] as f64 / f) as f32;
            }
        }
        let wt = Tensor::new(vec![d, d], wt).expect("finite");
        let wft = Tensor::new(vec![d, d], wft).expect("finite");
        let wfv = normal_tensor(&mut r, vec![d, d], 0.25);

        let fan_in = (DEC_IN * KSIZE * KSIZE) as f64;
        let conv_w = normal_tensor(
            &mut r,
            vec![DEC_OUT, DEC_IN, KSIZE, KSIZE],
            1.0 / fan_in.sqrt(),
        );
        let conv_b = normal_tensor(&mut r, vec![DEC_OUT], 0.1);
        let gamma_d = Uniform::new(0.5f64, 1.5).expect("valid range");
        let var_d = Uniform::new(0.5f64, 2.0).expect("valid range");
        let small = Normal::new(0.0, 0.2).expect("valid normal");
        let mut draw = |dist: &dyn Fn(&mut rand_chacha::ChaCha8Rng) -> f64| -> Vec<f32> {
            (0..DEC_OUT).map(|_| dist(&mut r) as f32).collect()
        };
        let gamma = draw(&|r| gamma_d.sample(r));
        let beta = draw(&|r| small.sample(r));
        let mean = draw(&|r| small.sample(r));
        let var = draw(&|r| var_d.sample(r));
        let bn = BNParams::new(gamma, beta, mean, var, BN_EPS).expect("valid batch norm");

        Self {
            wq,
            wk,
            wv,
            w1,
            w2,
            wt,
            outlier_columns,
            wfv,
            wft,
            conv_w,
            conv_b,
            bn,
        }
    }

    pub fn weight(&self, id: WeightId) -> &Tensor {
        match id {
            WeightId::Wq => &self.wq,
            WeightId::Wk => &self.wk,
            WeightId::Wv => &self.wv,
            WeightId::W1 => &self.w1,
            WeightId::W2 => &self.w2,
            WeightId::Wt => &self.wt,
            WeightId::Wfv => &self.wfv,
            WeightId::Wft => &self.wft,
            WeightId::Conv => &self.conv_w,
        }
    }

    /// Conv weight and bias with batch norm absorbed.
    pub fn folded_decoder(&self) -> Result<(Tensor, Tensor)> {
        fold_batchnorm(&self.conv_w, &self.conv_b, &self.bn)
    }
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn to_tensor(shape: Vec<usize>, v: &[f64]) -> Result<Tensor> {
    Tensor::new(shape, v.iter().map(|&x| x as f32).collect())
}

/// `a[m,k] * b[k,n]`
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

/// `a[m,k] * b[n,k]^T`
fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[j * k + p]).sum();
        }
    }
    out
}

/// `a[k,m]^T * b[k,n]`
fn matmul_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * pdf
}

/// `F[t][8c + j] -> D[c][t][j]`
fn to_decoder_layout(f: &[f64]) -> Vec<f64> {
    let mut d = vec![0.0; f.len()];
    for c in 0..DEC_IN {
        for t in 0..SEQ_LEN {
            for j in 0..DEC_W {
                d[(c * SEQ_LEN + t) * DEC_W + j] = f[t * D_MODEL + c * DEC_W + j];
            }
        }
    }
    d
}

fn from_decoder_layout(d: &[f64]) -> Vec<f64> {
    let mut f = vec![0.0; d.len()];
    for c in 0..DEC_IN {
        for t in 0..SEQ_LEN {
            for j in 0..DEC_W {
                f[t * D_MODEL + c * DEC_W + j] = d[(c * SEQ_LEN + t) * DEC_W + j];
            }
        }
    }
    f
}

/// Visits every `(out index, in index, weight index)` triple of the padded
/// 3x3 convolution.
fn conv_taps(mut f: impl FnMut(usize, usize, usize)) {
    let (h, w) = (SEQ_LEN as isize, DEC_W as isize);
    for co in 0..DEC_OUT {
        for ci in 0..DEC_IN {
            for ky in 0..KSIZE {
                for kx in 0..KSIZE {
                    let wi = ((co * DEC_IN + ci) * KSIZE + ky) * KSIZE + kx;
                    for y in 0..h {
                        let yy = y + ky as isize - 1;
                        if !(0..h).contains(&yy) {
                            continue;
                        }
                        for x in 0..w {
                            let xx = x + kx as isize - 1;
                            if !(0..w).contains(&xx) {
                                continue;
                            }
                            let oi = (co * SEQ_LEN) * DEC_W + (y * w + x) as usize;
                            let ii = (ci * SEQ_LEN) * DEC_W + (yy * w + xx) as usize;
                            f(oi, ii, wi);
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(d: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let plane = SEQ_LEN * DEC_W;
    let mut e: Vec<f64> = (0..DEC_OUT * plane).map(|i| b[i / plane]).collect();
    conv_taps(|oi, ii, wi| e[oi] += w[wi] * d[ii]);
    e
}

fn conv_backward_input(ge: &[f64], w: &[f64]) -> Vec<f64> {
    let mut gd = vec![0.0; DEC_IN * SEQ_LEN * DEC_W];
    conv_taps(|oi, ii, wi| gd[ii] += w[wi] * ge[oi]);
    gd
}

/// Network with `f64` weights ready to run; either the reference (BN applied
/// after the conv) or a deployed variant (BN folded, weights fake-quantized).
#[derive(Debug, Clone)]
pub(crate) struct Net {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    w1: Vec<f64>,
    w2: Vec<f64>,
    wt: Vec<f64>,
    wfv: Vec<f64>,
    wft: Vec<f64>,
    conv_w: Vec<f64>,
    conv_b: Vec<f64>,
    bn: Option<BNParams>,
}

/// Post-hook intermediates of one forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Cache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    s: Vec<f64>,
    p: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
    g: Vec<f64>,
    y: Vec<f64>,
    t: Vec<f64>,
    d: Vec<f64>,
    e: Vec<f64>,
    out: Vec<f64>,
}

impl Cache {
    fn get(&self, hook: Hook) -> &[f64] {
        match hook {
            Hook::Q => &self.q,
            Hook::K => &self.k,
            Hook::V => &self.v,
            Hook::Scores => &self.s,
            Hook::Softmax => &self.p,
            Hook::Context => &self.c,
            Hook::Gelu => &self.g,
            Hook::Fusion => &self.y,
            Hook::Text => &self.t,
            Hook::DecoderIn => &self.d,
            Hook::PreBn => &self.e,
        }
    }
}

impl Net {
    pub(crate) fn reference(w: &ToyNetWeights) -> Self {
        Self {
            wq: to_f64(&w.wq),
            wk: to_f64(&w.wk),
            wv: to_f64(&w.wv),
            w1: to_f64(&w.w1),
            w2: to_f64(&w.w2),
            wt: to_f64(&w.wt),
            wfv: to_f64(&w.wfv),
            wft: to_f64(&w.wft),
            conv_w: to_f64(&w.conv_w),
            conv_b: to_f64(&w.conv_b),
            bn: Some(w.bn.clone()),
        }
    }

    /// BN folded into the conv; `weight` maps each weight (the conv one
    /// already folded) to the tensor actually used.
    pub(crate) fn deployed(
        w: &ToyNetWeights,
        mut weight: impl FnMut(WeightId, &Tensor) -> Result<Tensor>,
    ) -> Result<Self> {
        let (cw, cb) = w.folded_decoder()?;
        let mut get = |id: WeightId| -> Result<Vec<f64>> {
            let t = if id == WeightId::Conv {
                &cw
            } else {
                w.weight(id)
            };
            Ok(to_f64(&weight(id, t)?))
        };
        Ok(Self {
            wq: get(WeightId::Wq)?,
            wk: get(WeightId::Wk)?,
            wv: get(WeightId::Wv)?,
            w1: get(WeightId::W1)?,
            w2: get(WeightId::W2)?,
            wt: get(WeightId::Wt)?,
            wfv: get(WeightId::Wfv)?,
            wft: get(WeightId::Wft)?,
            conv_w: get(WeightId::Conv)?,
            conv_b: to_f64(&cb),
            bn: None,
        })
    }

    pub(crate) fn run(&self, x: &[f64], hook: &mut dyn FnMut(Hook, &mut [f64])) -> Cache {
        let (t, d) = (SEQ_LEN, D_MODEL);
        let mut q = matmul(x, &self.wq, t, d, d);
        hook(Hook::Q, &mut q);
        let mut k = matmul(x, &self.wk, t, d, d);
        hook(Hook::K, &mut k);
        let mut v = matmul(x, &self.wv, t, d, d);
        hook(Hook::V, &mut v);

        let mut s = matmul_bt(&q, &k, t, d, t);
        hook(Hook::Scores, &mut s);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut p: Vec<f64> = s
            .chunks(t)
            .flat_map(|row| {
                let z: Vec<f64> = row.iter().map(|v| v * inv_sqrt_d).collect();
                crate::io::synth::softmax_row(&z)
            })
            .collect();
        hook(Hook::Softmax, &mut p);
        let mut c = matmul(&p, &v, t, t, d);
        hook(Hook::Context, &mut c);

        let h = matmul(&c, &self.w1, t, d, HIDDEN);
        let mut g: Vec<f64> = h.iter().map(|&v| gelu(v)).collect();
        hook(Hook::Gelu, &mut g);
        let mut y = matmul(&g, &self.w2, t, HIDDEN, d);
        for (yv, xv) in y.iter_mut().zip(x) {
            *yv += xv;
        }
        hook(Hook::Fusion, &mut y);

        let mut tt = matmul(x, &self.wt, t, d, d);
        hook(Hook::Text, &mut tt);

        let mut f = matmul(&y, &self.wfv, t, d, d);
        for (fv, tv) in f.iter_mut().zip(matmul(&tt, &self.wft, t, d, d)) {
            *fv += tv;
        }
        let mut dd = to_decoder_layout(&f);
        hook(Hook::DecoderIn, &mut dd);
        let mut e = conv_forward(&dd, &self.conv_w, &self.conv_b);
        hook(Hook::PreBn, &mut e);
        let plane = SEQ_LEN * DEC_W;
        let out = match &self.bn {
            Some(bn) => e
                .iter()
                .enumerate()
                .map(|(i, &v)| bn.apply(v, i / plane))
                .collect(),
            None => e.clone(),
        };
        Cache {
            q,
            k,
            v,
            s,
            p,
            c,
            h,
            g,
            y,
            t: tt,
            d: dd,
            e,
            out,
        }
    }

    /// Gradients of a loss with output gradient `g_out` at every hook.
    fn backward(&self, cache: &Cache, g_out: &[f64]) -> BTreeMap<Hook, Vec<f64>> {
        let (t, d) = (SEQ_LEN, D_MODEL);
        let plane = SEQ_LEN * DEC_W;
        let ge: Vec<f64> = match &self.bn {
            Some(bn) => g_out
                .iter()
                .enumerate()
                .map(|(i, &g)| g * bn.factor(i / plane))
                .collect(),
            None => g_out.to_vec(),
        };
        let gd = conv_backward_input(&ge, &self.conv_w);
        let gf = from_decoder_layout(&gd);
        let gy = matmul_bt(&gf, &self.wfv, t, d, d);
        let gt = matmul_bt(&gf, &self.wft, t, d, d);
        let gg = matmul_bt(&gy, &self.w2, t, d, HIDDEN);
        let gh: Vec<f64> = gg
            .iter()
            .zip(&cache.h)
            .map(|(g, &h)| g * gelu_grad(h))
            .collect();
        let gc = matmul_bt(&gh, &self.w1, t, HIDDEN, d);
        let gp = matmul_bt(&gc, &cache.v, t, d, t);
        let gv = matmul_at(&cache.p, &gc, t, t, d);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut gs = vec![0.0; t * t];
        for i in 0..t {
            let row = &cache.p[i * t..(i + 1) * t];
            let grow = &gp[i * t..(i + 1) * t];
            let dot: f64 = row.iter().zip(grow).map(|(p, g)| p * g).sum();
            for j in 0..t {
                gs[i * t + j] = row[j] * (grow[j] - dot) * inv_sqrt_d;
            }
        }
        let gq = matmul(&gs, &cache.k, t, t, d);
        let gk = matmul_at(&gs, &cache.q, t, t, d);

        BTreeMap::from([
            (Hook::Q, gq),
            (Hook::K, gk),
            (Hook::V, gv),
            (Hook::Scores, gs),
            (Hook::Softmax, gp),
            (Hook::Context, gc),
            (Hook::Gelu, gg),
            (Hook::Fusion, gy),
            (Hook::Text, gt),
            (Hook::DecoderIn, gd),
            (Hook::PreBn, ge),
        ])
    }
}

pub fn output_shape() -> Vec<usize> {
    vec![DEC_OUT, SEQ_LEN, DEC_W]
}

fn check_input(input: &Tensor) -> Result<Vec<f64>> {
    if input.shape() != [SEQ_LEN, D_MODEL] {
        return Err(shape_err(format!(
            "input must be [{SEQ_LEN}, {D_MODEL}], got {:?}",
            input.shape()
        )));
    }
    Ok(to_f64(input))
}

/// Activations (and optionally loss gradients) at every hook.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActivationTrace {
    pub activations: BTreeMap<Hook, Tensor>,
    pub gradients: BTreeMap<Hook, GradientDump>,
}

fn trace_of(cache: &Cache) -> Result<ActivationTrace> {
    let activations = Hook::ALL
        .into_iter()
        .map(|h| Ok((h, to_tensor(h.shape(), cache.get(h))?)))
        .collect::<Result<_>>()?;
    Ok(ActivationTrace {
        activations,
        gradients: BTreeMap::new(),
    })
}

/// Full-precision forward with a callback that may read or rewrite each
/// hooked activation before it flows downstream.
pub fn forward_hooked(
    input: &Tensor,
    w: &ToyNetWeights,
    hook: &mut dyn FnMut(Hook, &mut [f64]),
) -> Result<Vec<f64>> {
    let x = check_input(input)?;
    Ok(Net::reference(w).run(&x, hook).out)
}

/// Forward pass. Without a plan this is the full-precision reference; with
/// one, BN is folded, weights are fake-quantized and every planned hook is
/// fake-quantized in place.
pub fn forward(
    input: &Tensor,
    w: &ToyNetWeights,
    plan: Option<&QuantPlan>,
) -> Result<(Tensor, ActivationTrace)> {
    let x = check_input(input)?;
    let cache = match plan {
        None => Net::reference(w).run(&x, &mut |_, _| {}),
        Some(plan) => plan.net(w)?.run_planned(&x, plan)?,
    };
    Ok((to_tensor(output_shape(), &cache.out)?, trace_of(&cache)?))
}

impl Net {
    pub(crate) fn run_planned(&self, x: &[f64], plan: &QuantPlan) -> Result<Cache> {
        let mut err = None;
        let cache = self.run(x, &mut |h, buf| {
            if err.is_some() {
                return;
            }
            if let Err(e) = plan.apply(h, buf) {
                err = Some(e);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(cache),
        }
    }
}

/// Proxy calibration loss `L = 1/2 |O - stopgrad(O_fp) + scale * e|^2` with a
/// seeded unit-norm direction `e`. At the full-precision point the output
/// gradient is `scale * e`, so every hook receives a nonzero gradient unless
/// `scale` is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyLoss {
    pub scale: f64,
    pub seed: u64,
}

impl Default for ProxyLoss {
    fn default() -> Self {
        Self {
            scale: 1.0,
            seed: 0,
        }
    }
}

impl ProxyLoss {
    pub fn direction(&self, len: usize) -> Vec<f64> {
        let mut r = rng(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let v = gaussian(&mut r, len);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    pub fn value(&self, output: &[f64], reference: &[f64]) -> f64 {
        let e = self.direction(output.len());
        0.5 * output
            .iter()
            .zip(reference)
            .zip(&e)
            .map(|((o, r), e)| {
                let d = o - r + self.scale * e;
                d * d
            })
            .sum::<f64>()
    }

    fn output_grad(&self, output: &[f64], reference: &[f64]) -> Vec<f64> {
        let e = self.direction(output.len());
        output
            .iter()
            .zip(reference)
            .zip(&e)
            .map(|((o, r), e)| o - r + self.scale * e)
            .collect()
    }
}

/// Analytic proxy-loss gradients at every hook, in `f64`.
pub fn hook_gradients(
    input: &Tensor,
    w: &ToyNetWeights,
    proxy: &ProxyLoss,
) -> Result<BTreeMap<Hook, Vec<f64>>> {
    let x = check_input(input)?;
    let net = Net::reference(w);
    let cache = net.run(&x, &mut |_, _| {});
    let g_out = proxy.output_grad(&cache.out, &cache.out);
    Ok(net.backward(&cache, &g_out))
}

/// Full-precision trace with the proxy-loss gradient at every hook.
pub fn backward_collect(
    input: &Tensor,
    w: &ToyNetWeights,
    proxy: &ProxyLoss,
) -> Result<ActivationTrace> {
    let x = check_input(input)?;
    let net = Net::reference(w);
    let cache = net.run(&x, &mut |_, _| {});
    let g_out = proxy.output_grad(&cache.out, &cache.out);
    let mut trace = trace_of(&cache)?;
    for (h, g) in net.backward(&cache, &g_out) {
        trace
            .gradients
            .insert(h, GradientDump::new(to_tensor(h.shape(), &g)?));
    }
    Ok(trace)
}

/// Decoder stub alone on a `[2, 8, 8]` input: conv then BN, or the folded conv.
pub fn decoder_forward(d: &Tensor, w: &ToyNetWeights, folded: bool) -> Result<Tensor> {
    if d.shape() != [DEC_IN, SEQ_LEN, DEC_W] {
        return Err(shape_err(format!(
            "decoder input must be [{DEC_IN}, {SEQ_LEN}, {DEC_W}], got {:?}",
            d.shape()
        )));
    }
    let x = to_f64(d);
    let plane = SEQ_LEN * DEC_W;
    let out = if folded {
        let (cw, cb) = w.folded_decoder()?;
        conv_forward(&x, &to_f64(&cw), &to_f64(&cb))
    } else {
        conv_forward(&x, &to_f64(&w.conv_w), &to_f64(&w.conv_b))
            .iter()
            .enumerate()
            .map(|(i, &v)| w.bn.apply(v, i / plane))
            .collect()
    };
    to_tensor(output_shape(), &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(seed: u64) -> Tensor {
        normal_tensor(&mut rng(seed), vec![SEQ_LEN, D_MODEL], 1.0)
    }

    #[test]
    fn weights_are_seeded() {
        assert_eq!(ToyNetWeights::generate(3), ToyNetWeights::generate(3));
        assert_ne!(ToyNetWeights::generate(3).wq, ToyNetWeights::generate(4).wq);
        let w = ToyNetWeights::generate(0);
        assert_eq!(w.outlier_columns.len(), OUTLIER_COLUMNS);
    }

    #[test]
    fn softmax_rows_normalized_and_shapes_match() {
        let w = ToyNetWeights::generate(0);
        let (out, trace) = forward(&input(1), &w, None).unwrap();
        assert_eq!(out.shape(), [DEC_OUT, SEQ_LEN, DEC_W]);
        for h in Hook::ALL {
            assert_eq!(trace.activations[&h].shape(), h.shape().as_slice());
        }
        for row in trace.activations[&Hook::Softmax].data().chunks(SEQ_LEN) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(forward(&Tensor::from_vec(vec![0.0; 16]).unwrap(), &w, None).is_err());
    }

    #[test]
    fn text_linear_has_outlier_channels() {
        let w = ToyNetWeights::generate(0);
        let (_, trace) = forward(&input(2), &w, None).unwrap();
        let t = &trace.activations[&Hook::Text];
        let col_max = |c: usize| {
            (0..SEQ_LEN)
                .map(|i| t.data()[i * D_MODEL + c].abs())
                .fold(0.0f32, f32::max)
        };
        let outlier = w
            .outlier_columns
            .iter()
            .map(|&c| col_max(c))
            .fold(0.0, f32::max);
        let body = (0..D_MODEL)
            .filter(|c| !w.outlier_columns.contains(c))
            .map(col_max)
            .fold(0.0, f32::max);
        assert!(outlier > 5.0 * body);
    }

    #[test]
    fn decoder_layout_round_trip() {
        let f: Vec<f64> = (0..SEQ_LEN * D_MODEL).map(|i| i as f64).collect();
        assert_eq!(from_decoder_layout(&to_decoder_layout(&f)), f);
        // D[1][2][3] = F[2][8 + 3]
        assert_eq!(
            to_decoder_layout(&f)[(SEQ_LEN + 2) * DEC_W + 3],
            (2 * D_MODEL + 11) as f64
        );
    }

    #[test]
    fn conv_matches_direct_formula() {
        let w = ToyNetWeights::generate(5);
        let d: Vec<f64> = gaussian(&mut rng(6), DEC_IN * SEQ_LEN * DEC_W);
        let cw = to_f64(&w.conv_w);
        let cb = to_f64(&w.conv_b);
        let e = conv_forward(&d, &cw, &cb);
        let at = |c: usize, y: isize, x: isize| -> f64 {
            if (0..SEQ_LEN as isize).contains(&y) && (0..DEC_W as isize).contains(&x) {
                d[(c * SEQ_LEN + y as usize) * DEC_W + x as usize]
            } else {
                0.0
            }
        };
        for co in 0..DEC_OUT {
            for y in 0..SEQ_LEN as isize {
                for x in 0..DEC_W as isize {
                    let mut acc = cb[co];
                    for ci in 0..DEC_IN {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                acc += cw[((co * DEC_IN + ci) * 3 + ky) * 3 + kx]
                                    * at(ci, y + ky as isize - 1, x + kx as isize - 1);
                            }
                        }
                    }
                    let got = e[(co * SEQ_LEN + y as usize) * DEC_W + x as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_proxy_scale_gives_zero_gradients() {
        let w = ToyNetWeights::generate(0);
        let g = hook_gradients(
            &input(3),
            &w,
            &ProxyLoss {
                scale: 0.0,
                seed: 1,
            },
        )
        .unwrap();
        assert!(g.values().flatten().all(|&v| v == 0.0));
        let tr = backward_collect(&input(3), &w, &ProxyLoss::default()).unwrap();
        for h in Hook::ALL {
            assert_eq!(tr.gradients[&h].tensor().shape(), h.shape().as_slice());
        }
    }

    #[test]
    fn hook_names_round_trip() {
        for h in Hook::ALL {
            assert_eq!(Hook::from_name(h.name()).unwrap(), h);
            assert_eq!(
                serde_json::to_string(&h).unwrap(),
                format!("\"{}\"", h.name())
            );
        }
        assert!(Hook::from_name("nope").is_err());
    }
}
