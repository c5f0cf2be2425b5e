//! End-to-end calibration of the toy network.
//!
//! Step 1 runs the full-precision network on every calibration input and
//! collects activations plus proxy-loss gradients at each hook. Step 2 picks
//! a quantizer per hook by module type:
//!
//! | hook                     | enabled method                          | otherwise       |
//! |--------------------------|-----------------------------------------|-----------------|
//! | softmax / GeLU output    | dual-region, gradient-weighted search   | uniform         |
//! | `Q`, `K` (scores matmul) | alternating gradient-weighted search    | uniform         |
//! | `V` (context matmul)     | right-operand search against DRQ'd `P`  | uniform         |
//! | text linear output       | outlier-retaining groups                | uniform         |
//! | context, fusion, decoder | uniform                                 | uniform         |
//!
//! "Uniform" is an MSE grid search when `use_search` is set and plain
//! min/max otherwise. Weights are channel-wise symmetric signed; BN is folded
//! into the decoder conv before its weights are calibrated.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    backward_collect, to_tensor, ActivationTrace, Hook, Net, ProxyLoss, ToyNetWeights, WeightId,
    D_MODEL, SEQ_LEN,
};
use crate::drq::{calibrate_drq, DrqConfig, DrqKind, SoftmaxRange};
use crate::error::{invalid, Error, Result};
use crate::io::params::{HookQuantizer, ParamFile};
use crate::io::report::CalibrationReport;
use crate::io::synth::{gaussian, rng};
use crate::quant::{
    check_bits, error_metrics, fake_quant, make_channel_params, make_params, ErrorAccumulator,
    ErrorMetrics, QuantParams, Scheme,
};
use crate::rorq::{calibrate_rorq, ThresholdStrategy, DEFAULT_MAX_ITERS};
use crate::search::{
    alternating_matmul_search_batch, channel_grid_search, channel_percentile_calibrate,
    mse_grid_search, search_right_operand, AlternatingConfig, GradWeighting, GradientDump,
    MatmulInstance, Metric, SearchSpace,
};
use crate::tensor::{channel_minmax, stats_of, Tensor};

pub const DEFAULT_CALIB_SIZE: usize = 32;
pub const DEFAULT_EVAL_SIZE: usize = 32;
const DEFAULT_PERCENTILE: f64 = 99.9;
const DEFAULT_ROUNDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub w_bits: u8,
    pub a_bits: u8,
    /// Dual-region quantizers on softmax/GeLU outputs and the
    /// gradient-weighted matmul operand searches.
    pub use_drq: bool,
    /// Outlier-retaining groups on the text linear output.
    pub use_rorq: bool,
    /// MSE / percentile search for everything else (min/max when off).
    pub use_search: bool,
    pub space: SearchSpace,
    pub rounds: usize,
    pub strategy: ThresholdStrategy,
    pub max_iters: usize,
    /// Percentile for the text and fusion weights.
    pub percentile: f64,
    pub softmax_range: SoftmaxRange,
    pub weighting: GradWeighting,
    pub proxy_scale: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            w_bits: 8,
            a_bits: 8,
            use_drq: true,
            use_rorq: true,
            use_search: true,
            space: SearchSpace::default(),
            rounds: DEFAULT_ROUNDS,
            strategy: ThresholdStrategy::Mean3Sd,
            max_iters: DEFAULT_MAX_ITERS,
            percentile: DEFAULT_PERCENTILE,
            softmax_range: SoftmaxRange::default(),
            weighting: GradWeighting::default(),
            proxy_scale: 1.0,
        }
    }
}

impl PlanConfig {
    /// `W{w}A{a}`, e.g. `W4A4`, `W6A6`, `W8A8`, `W4A8`.
    pub fn preset(name: &str) -> Result<Self> {
        let bad = || invalid(format!("preset '{name}' is not of the form W<bits>A<bits>"));
        let upper = name.to_ascii_uppercase();
        let rest = upper.strip_prefix('W').ok_or_else(bad)?;
        let (w, a) = rest.split_once('A').ok_or_else(bad)?;
        let w_bits: u8 = w.parse().map_err(|_| bad())?;
        let a_bits: u8 = a.parse().map_err(|_| bad())?;
        check_bits(w_bits)?;
        check_bits(a_bits)?;
        Ok(Self {
            w_bits,
            a_bits,
            ..Self::default()
        })
    }

    pub fn preset_name(&self) -> String {
        format!("W{}A{}", self.w_bits, self.a_bits)
    }

    /// Same bit-widths with every calibration method off: min/max everywhere.
    pub fn round_to_nearest(self) -> Self {
        Self {
            use_drq: false,
            use_rorq: false,
            use_search: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.w_bits)?;
        check_bits(self.a_bits)?;
        if self.use_drq && self.a_bits < 3 {
            return Err(invalid("dual-region activations need at least 3 bits"));
        }
        self.space.validate()?;
        if self.rounds == 0 || self.max_iters == 0 {
            return Err(invalid("rounds and max_iters must be at least 1"));
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(invalid(format!(
                "percentile {} outside (0, 100]",
                self.percentile
            )));
        }
        if !(self.proxy_scale.is_finite() && self.proxy_scale >= 0.0) {
            return Err(invalid("proxy_scale must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Calibrated quantizers for every quantized hook and weight.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantPlan {
    pub config: PlanConfig,
    pub activations: BTreeMap<Hook, HookQuantizer>,
    /// The conv entry applies to the BN-folded conv weight.
    pub weights: BTreeMap<WeightId, QuantParams>,
}

impl QuantPlan {
    pub(crate) fn apply(&self, hook: Hook, buf: &mut [f64]) -> Result<()> {
        if let Some(q) = self.activations.get(&hook) {
            let y = q.fake(&to_tensor(hook.shape(), buf)?)?;
            for (b, &v) in buf.iter_mut().zip(y.data()) {
                *b = v as f64;
            }
        }
        Ok(())
    }

    pub(crate) fn net(&self, w: &ToyNetWeights) -> Result<Net> {
        Net::deployed(w, |id, t| match self.weights.get(&id) {
            Some(p) => fake_quant(t, p),
            None => Ok(t.clone()),
        })
    }

    /// Activation quantizers under hook names, weights under weight names.
    pub fn to_param_file(&self) -> ParamFile {
        let mut f = ParamFile::default();
        for (h, q) in &self.activations {
            f.hooks.insert(h.name().to_owned(), q.clone());
        }
        for (id, p) in &self.weights {
            f.hooks
                .insert(id.name().to_owned(), HookQuantizer::Uniform(p.clone()));
        }
        f
    }
}

fn input_batch(seed: u64, n: usize) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let v = gaussian(&mut r, SEQ_LEN * D_MODEL);
            to_tensor(vec![SEQ_LEN, D_MODEL], &v).expect("finite inputs")
        })
        .collect()
}

/// Seeded network inputs for calibration.
pub fn calibration_inputs(seed: u64, n: usize) -> Vec<Tensor> {
    input_batch(seed ^ 0xca11_b4a7_e000_0001, n)
}

/// Seeded held-out inputs, disjoint stream from [`calibration_inputs`].
pub fn eval_inputs(seed: u64, n: usize) -> Vec<Tensor> {
    input_batch(seed ^ 0xe7a1_0000_0000_0002, n)
}

/// Min/max or MSE-searched per-tensor symmetric activation quantizer;
/// unsigned codes when the calibration data is non-negative.
fn uniform_activation(samples: &[Tensor], cfg: &PlanConfig) -> Result<QuantParams> {
    let all = Tensor::concat_flat(samples)?;
    let st = stats_of(all.data())?;
    let signed = st.min < 0.0;
    if cfg.use_search {
        mse_grid_search(&all, cfg.a_bits, Scheme::Symmetric, signed, &cfg.space)
    } else {
        make_params(st.min, st.max, cfg.a_bits, Scheme::Symmetric, signed)
    }
}

fn weight_params(id: WeightId, t: &Tensor, cfg: &PlanConfig) -> Result<QuantParams> {
    let axis = id.channel_axis();
    let bits = cfg.w_bits;
    if !cfg.use_search {
        return make_channel_params(
            &channel_minmax(t, axis)?,
            axis,
            bits,
            Scheme::Symmetric,
            true,
        );
    }
    match id {
        WeightId::Wt | WeightId::Wfv | WeightId::Wft => {
            channel_percentile_calibrate(t, axis, bits, cfg.percentile, Scheme::Symmetric, true)
        }
        _ => channel_grid_search(t, axis, bits, Scheme::Symmetric, true, &cfg.space),
    }
}

fn fmt_history(h: &[f64]) -> String {
    h.iter()
        .map(|v| format!("{v:.6e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Calibrates a full plan on `calib` inputs and reports per-hook error.
pub fn run_pipeline(
    calib: &[Tensor],
    w: &ToyNetWeights,
    cfg: &PlanConfig,
) -> Result<(QuantPlan, CalibrationReport)> {
    cfg.validate()?;
    if calib.is_empty() {
        return Err(Error::EmptyInput);
    }

    // Step 1: activations and gradients, one independent pass per input.
    let traces: Vec<ActivationTrace> = calib
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let proxy = ProxyLoss {
                scale: cfg.proxy_scale,
                seed: i as u64,
            };
            backward_collect(x, w, &proxy)
        })
        .collect::<Result<_>>()?;
    let acts =
        |h: Hook| -> Vec<Tensor> { traces.iter().map(|t| t.activations[&h].clone()).collect() };
    let grads =
        |h: Hook| -> Vec<GradientDump> { traces.iter().map(|t| t.gradients[&h].clone()).collect() };

    // Step 2: per-module dispatch.
    let mut notes = Vec::new();
    let mut act_q: BTreeMap<Hook, HookQuantizer> = BTreeMap::new();
    let drq_cfg = DrqConfig {
        softmax_range: cfg.softmax_range,
        space: cfg.space,
    };
    for (hook, kind) in [
        (Hook::Softmax, DrqKind::Softmax),
        (Hook::Gelu, DrqKind::Gelu),
    ] {
        let samples = acts(hook);
        let q = if cfg.use_drq {
            let g = grads(hook);
            let cal = calibrate_drq(
                &samples,
                kind,
                cfg.a_bits,
                &Metric::Hessian(&g, cfg.weighting),
                &drq_cfg,
            )?;
            if cal.single_region_fallback {
                notes.push(format!(
                    "{}: no negative values, single-region fallback",
                    hook.name()
                ));
            }
            notes.push(format!(
                "{}: dual-region shift m = {}",
                hook.name(),
                cal.params.shift_m()
            ));
            HookQuantizer::Drq(cal.params)
        } else {
            HookQuantizer::Uniform(uniform_activation(&samples, cfg)?)
        };
        act_q.insert(hook, q);
    }

    if cfg.use_drq {
        let alt = AlternatingConfig {
            bits: cfg.a_bits,
            space: cfg.space,
            rounds: cfg.rounds,
            weighting: cfg.weighting,
        };
        let q = acts(Hook::Q);
        let kt = acts(Hook::K)
            .iter()
            .map(Tensor::transpose2)
            .collect::<Result<Vec<_>>>()?;
        let gs = grads(Hook::Scores);
        let instances: Vec<MatmulInstance> = q
            .iter()
            .zip(&kt)
            .zip(&gs)
            .map(|((a, b), grad)| MatmulInstance { a, b, grad })
            .collect();
        let r = alternating_matmul_search_batch(&instances, &alt)?;
        if r.degenerate {
            notes.push("attn.scores: zero operand, identity scales".to_owned());
        }
        notes.push(format!(
            "attn.scores: alternating search history [{}]",
            fmt_history(&r.history)
        ));
        act_q.insert(Hook::Q, HookQuantizer::Uniform(r.params_a));
        act_q.insert(Hook::K, HookQuantizer::Uniform(r.params_b));

        let p_hat = acts(Hook::Softmax)
            .iter()
            .map(|p| act_q[&Hook::Softmax].fake(p))
            .collect::<Result<Vec<_>>>()?;
        let pv = search_right_operand(&p_hat, &acts(Hook::V), &grads(Hook::Context), &alt)?;
        act_q.insert(Hook::V, HookQuantizer::Uniform(pv));
    } else {
        for h in [Hook::Q, Hook::K, Hook::V] {
            act_q.insert(
                h,
                HookQuantizer::Uniform(uniform_activation(&acts(h), cfg)?),
            );
        }
    }

    let text = acts(Hook::Text);
    let text_q = if cfg.use_rorq {
        let all = Tensor::concat_flat(&text)?;
        let cal = calibrate_rorq(&all, cfg.a_bits, cfg.strategy, cfg.max_iters, &cfg.space)?;
        notes.push(format!(
            "text.linear: {} groups, thresholds [{}]",
            cal.params.groups().len(),
            fmt_history(&cal.params.thresholds())
        ));
        if cal.mad_fallbacks > 0 {
            notes.push(format!(
                "text.linear: {} zero-MAD fallbacks",
                cal.mad_fallbacks
            ));
        }
        HookQuantizer::Rorq(cal.params)
    } else {
        HookQuantizer::Uniform(uniform_activation(&text, cfg)?)
    };
    act_q.insert(Hook::Text, text_q);

    for h in [Hook::Context, Hook::Fusion, Hook::DecoderIn] {
        act_q.insert(
            h,
            HookQuantizer::Uniform(uniform_activation(&acts(h), cfg)?),
        );
    }

    let (folded_w, _) = w.folded_decoder()?;
    let mut weights = BTreeMap::new();
    for id in WeightId::ALL {
        let t = if id == WeightId::Conv {
            &folded_w
        } else {
            w.weight(id)
        };
        weights.insert(id, weight_params(id, t, cfg)?);
    }

    let plan = QuantPlan {
        config: *cfg,
        activations: act_q,
        weights,
    };

    let mut report = CalibrationReport::new(
        None,
        &serde_json::json!({ "plan": cfg, "calib_size": calib.len() }),
    )?;
    for (h, q) in &plan.activations {
        let mut acc = ErrorAccumulator::default();
        for t in &traces {
            let x = &t.activations[h];
            acc.add(x.data(), q.fake(x)?.data());
        }
        report.add_hook(h.name(), q.name(), q.bits(), acc.finish()?);
    }
    for (id, p) in &plan.weights {
        let t = if *id == WeightId::Conv {
            &folded_w
        } else {
            w.weight(*id)
        };
        report.add_weight(
            id.name(),
            p.bits(),
            error_metrics(t.data(), fake_quant(t, p)?.data())?,
        );
    }
    report.totals.output = Some(evaluate_plan(calib, w, &plan)?);
    report.notes = notes;
    Ok((plan, report))
}

/// Output error of the planned network against full precision.
pub fn evaluate_plan(
    inputs: &[Tensor],
    w: &ToyNetWeights,
    plan: &QuantPlan,
) -> Result<ErrorMetrics> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let reference = Net::reference(w);
    let deployed = plan.net(w)?;
    let outs: Vec<(Vec<f64>, Vec<f64>)> = inputs
        .par_iter()
        .map(|x| {
            let x = super::check_input(x)?;
            let fp = reference.run(&x, &mut |_, _| {}).out;
            let q = deployed.run_planned(&x, plan)?.out;
            Ok((fp, q))
        })
        .collect::<Result<_>>()?;
    let mut acc = ErrorAccumulator::default();
    for (fp, q) in &outs {
        let fp: Vec<f32> = fp.iter().map(|&v| v as f32).collect();
        let q: Vec<f32> = q.iter().map(|&v| v as f32).collect();
        acc.add(&fp, &q);
    }
    acc.finish()
}

/// Seeded end-to-end run: weights, calibration and held-out inputs all
/// derive from `seed`.
pub fn run_seeded(
    seed: u64,
    cfg: &PlanConfig,
    calib_size: usize,
    eval_size: usize,
) -> Result<(QuantPlan, CalibrationReport)> {
    let w = ToyNetWeights::generate(seed);
    let calib = calibration_inputs(seed, calib_size);
    let (plan, mut report) = run_pipeline(&calib, &w, cfg)?;
    report.seed = Some(seed);
    if let serde_json::Value::Object(m) = &mut report.config {
        m.insert("eval_size".to_owned(), eval_size.into());
    }
    if eval_size > 0 {
        report.totals.eval_output = Some(evaluate_plan(&eval_inputs(seed, eval_size), &w, &plan)?);
    }
    Ok((plan, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        let c = PlanConfig::preset("w4a8").unwrap();
        assert_eq!((c.w_bits, c.a_bits), (4, 8));
        assert_eq!(c.preset_name(), "W4A8");
        for bad in ["W4", "A4W4", "W1A8", "W8A17", "Wxa8"] {
            assert!(PlanConfig::preset(bad).is_err(), "{bad}");
        }
        let mut c = PlanConfig::preset("W4A2").unwrap();
        assert!(c.validate().is_err());
        c.use_drq = false;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn plan_covers_every_quantized_hook() {
        let w = ToyNetWeights::generate(0);
        let calib = calibration_inputs(0, 4);
        let (plan, report) = run_pipeline(&calib, &w, &PlanConfig::default()).unwrap();
        for h in Hook::QUANTIZED {
            assert!(plan.activations.contains_key(&h), "{h:?}");
            assert!(report.hooks.contains_key(h.name()));
        }
        assert_eq!(plan.weights.len(), WeightId::ALL.len());
        assert!(matches!(
            plan.activations[&Hook::Softmax],
            HookQuantizer::Drq(_)
        ));
        assert!(matches!(
            plan.activations[&Hook::Text],
            HookQuantizer::Rorq(_)
        ));
        let sum: f64 = report.hooks.values().map(|h| h.metrics.mse).sum();
        assert_eq!(report.totals.hook_mse_sum, sum);
        let f = plan.to_param_file();
        assert_eq!(ParamFile::from_toml(&f.to_toml().unwrap()).unwrap(), f);
        assert!(run_pipeline(&[], &w, &PlanConfig::default()).is_err());
    }
}
