//! Offline calibration from a directory of activation dumps.
//!
//! Files are named `<hook>.<k>.ptq4` (activation sample `k`) and optionally
//! `<hook>.grad.<k>.ptq4` (loss gradient aligned with that activation).
//! Hook names may contain dots. The config is TOML:
//!
//! ```toml
//! preset = "W8A8"
//! calib_size = 32
//! strategy = "mean_3sd"
//!
//! [hooks]
//! "attn.softmax" = "drq_softmax"
//! "mlp.gelu" = "drq_gelu"
//! "text.linear" = "rorq"
//!
//! [[matmul]]
//! a = "attn.q"
//! b = "attn.k"
//! grad = "attn.scores"
//! transpose_b = true
//! ```
//!
//! Hooks without an explicit kind get an MSE grid search. Matmul operands
//! are calibrated jointly by the alternating search, weighted by the
//! gradient dumps of the `grad` hook (plain output MSE when there are none).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drq::{calibrate_drq, DrqConfig, DrqKind, SoftmaxRange};
use crate::error::{invalid, Error, Result};
use crate::io::dump::read_dump;
use crate::io::params::{HookQuantizer, ParamFile};
use crate::io::report::CalibrationReport;
use crate::quant::{make_params, ErrorAccumulator, QuantParams, Scheme};
use crate::rorq::{calibrate_rorq, ThresholdStrategy, DEFAULT_MAX_ITERS};
use crate::search::{
    alternating_matmul_search_batch, mse_grid_search, percentile_calibrate, AlternatingConfig,
    GradWeighting, GradientDump, MatmulInstance, Metric, SearchSpace,
};
use crate::tensor::{stats_of, Tensor};
use crate::toy_net::{PlanConfig, DEFAULT_CALIB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookKind {
    Minmax,
    Mse,
    Percentile,
    DrqSoftmax,
    DrqGelu,
    Rorq,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatmulSpec {
    pub a: String,
    pub b: String,
    pub grad: String,
    /// Use the transpose of each `b` sample (e.g. `K` for `Q K^T`).
    #[serde(default)]
    pub transpose_b: bool,
}

fn default_preset() -> String {
    "W8A8".to_owned()
}
fn default_alpha() -> f64 {
    SearchSpace::default().alpha
}
fn default_beta() -> f64 {
    SearchSpace::default().beta
}
fn default_candidates() -> usize {
    SearchSpace::default().n_candidates
}
fn default_rounds() -> usize {
    3
}
fn default_strategy() -> String {
    "mean_3sd".to_owned()
}
fn default_max_iters() -> usize {
    DEFAULT_MAX_ITERS
}
fn default_calib_size() -> usize {
    DEFAULT_CALIB_SIZE
}
fn default_percentile() -> f64 {
    99.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibConfig {
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_candidates")]
    pub n_candidates: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_strategy")]
    pub strategy: String,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_calib_size")]
    pub calib_size: usize,
    #[serde(default = "default_percentile")]
    pub percentile: f64,
    #[serde(default)]
    pub softmax_range: SoftmaxRange,
    #[serde(default)]
    pub weighting: GradWeighting,
    #[serde(default)]
    pub hooks: BTreeMap<String, HookKind>,
    #[serde(default)]
    pub matmul: Vec<MatmulSpec>,
}

impl Default for CalibConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl CalibConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn space(&self) -> Result<SearchSpace> {
        SearchSpace::new(self.alpha, self.beta, self.n_candidates)
    }

    pub fn strategy(&self) -> Result<ThresholdStrategy> {
        ThresholdStrategy::from_name(&self.strategy)
    }

    /// Activation bit-width from the preset.
    pub fn a_bits(&self) -> Result<u8> {
        Ok(PlanConfig::preset(&self.preset)?.a_bits)
    }
}

/// Samples per hook, ordered by sample index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DumpSet {
    pub activations: BTreeMap<String, Vec<Tensor>>,
    pub gradients: BTreeMap<String, Vec<GradientDump>>,
}

/// Splits `<hook>[.grad].<k>.ptq4` into `(hook, is_grad, k)`.
fn parse_name(file: &str) -> Option<(String, bool, u64)> {
    let stem = file.strip_suffix(".ptq4")?;
    let (head, k) = stem.rsplit_once('.')?;
    let k: u64 = k.parse().ok()?;
    match head.strip_suffix(".grad") {
        Some(h) if !h.is_empty() => Some((h.to_owned(), true, k)),
        _ if !head.is_empty() => Some((head.to_owned(), false, k)),
        _ => None,
    }
}

/// Reads every `*.ptq4` dump in `dir`, keeping the first `limit` samples of
/// each hook (by index). Other files are ignored.
pub fn load_dumps(dir: impl AsRef<Path>, limit: usize) -> Result<DumpSet> {
    let mut found: BTreeMap<(String, bool), BTreeMap<u64, std::path::PathBuf>> = BTreeMap::new();
    for entry in fs::read_dir(dir.as_ref())? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some((hook, grad, k)) = parse_name(name) {
            found.entry((hook, grad)).or_default().insert(k, path);
        }
    }
    let mut set = DumpSet::default();
    for ((hook, grad), files) in found {
        let tensors = files
            .values()
            .take(limit)
            .map(|p| read_dump(p).map_err(|e| Error::Format(format!("{}: {e}", p.display()))))
            .collect::<Result<Vec<_>>>()?;
        if grad {
            set.gradients
                .insert(hook, tensors.into_iter().map(GradientDump::new).collect());
        } else {
            set.activations.insert(hook, tensors);
        }
    }
    if set.activations.is_empty() {
        return Err(invalid(format!(
            "no activation dumps in {}",
            dir.as_ref().display()
        )));
    }
    Ok(set)
}

fn uniform(samples: &[Tensor], kind: HookKind, bits: u8, cfg: &CalibConfig) -> Result<QuantParams> {
    let all = Tensor::concat_flat(samples)?;
    let st = stats_of(all.data())?;
    let signed = st.min < 0.0;
    match kind {
        HookKind::Minmax => make_params(st.min, st.max, bits, Scheme::Symmetric, signed),
        HookKind::Percentile => {
            percentile_calibrate(&all, bits, cfg.percentile, Scheme::Symmetric, signed)
        }
        _ => mse_grid_search(&all, bits, Scheme::Symmetric, signed, &cfg.space()?),
    }
}

fn calibrate_hook(
    hook: &str,
    kind: HookKind,
    set: &DumpSet,
    cfg: &CalibConfig,
    notes: &mut Vec<String>,
) -> Result<HookQuantizer> {
    let bits = cfg.a_bits()?;
    let samples = &set.activations[hook];
    Ok(match kind {
        HookKind::DrqSoftmax | HookKind::DrqGelu => {
            let drq_kind = if kind == HookKind::DrqSoftmax {
                DrqKind::Softmax
            } else {
                DrqKind::Gelu
            };
            let grads = set.gradients.get(hook).filter(|g| g.len() == samples.len());
            let metric = match grads {
                Some(g) => Metric::Hessian(g, cfg.weighting),
                None => {
                    notes.push(format!("{hook}: no gradient dumps, plain MSE metric"));
                    Metric::Mse
                }
            };
            let drq_cfg = DrqConfig {
                softmax_range: cfg.softmax_range,
                space: cfg.space()?,
            };
            let cal = calibrate_drq(samples, drq_kind, bits, &metric, &drq_cfg)?;
            if cal.single_region_fallback {
                notes.push(format!(
                    "{hook}: no negative values, single-region fallback"
                ));
            }
            HookQuantizer::Drq(cal.params)
        }
        HookKind::Rorq => {
            let all = Tensor::concat_flat(samples)?;
            let cal = calibrate_rorq(&all, bits, cfg.strategy()?, cfg.max_iters, &cfg.space()?)?;
            if cal.mad_fallbacks > 0 {
                notes.push(format!("{hook}: {} zero-MAD fallbacks", cal.mad_fallbacks));
            }
            HookQuantizer::Rorq(cal.params)
        }
        _ => HookQuantizer::Uniform(uniform(samples, kind, bits, cfg)?),
    })
}

fn calibrate_matmul(
    spec: &MatmulSpec,
    set: &DumpSet,
    cfg: &CalibConfig,
    notes: &mut Vec<String>,
) -> Result<(QuantParams, QuantParams)> {
    let get = |h: &str| {
        set.activations
            .get(h)
            .ok_or_else(|| invalid(format!("matmul operand '{h}' has no dumps")))
    };
    let a = get(&spec.a)?;
    let b_raw = get(&spec.b)?;
    let b: Vec<Tensor> = if spec.transpose_b {
        b_raw
            .iter()
            .map(Tensor::transpose2)
            .collect::<Result<_>>()?
    } else {
        b_raw.clone()
    };
    let n = a.len().min(b.len());
    let grads: Vec<GradientDump> = match set.gradients.get(&spec.grad) {
        Some(g) if g.len() >= n => g[..n].to_vec(),
        _ => {
            notes.push(format!(
                "{}: no gradient dumps, plain output MSE",
                spec.grad
            ));
            a[..n]
                .iter()
                .zip(&b[..n])
                .map(|(x, y)| Ok(GradientDump::uniform(&product_shape(x, y)?, 1.0)))
                .collect::<Result<_>>()?
        }
    };
    let instances: Vec<MatmulInstance> = (0..n)
        .map(|i| MatmulInstance {
            a: &a[i],
            b: &b[i],
            grad: &grads[i],
        })
        .collect();
    let alt = AlternatingConfig {
        bits: cfg.a_bits()?,
        space: cfg.space()?,
        rounds: cfg.rounds,
        weighting: cfg.weighting,
    };
    let r = alternating_matmul_search_batch(&instances, &alt)?;
    if r.degenerate {
        notes.push(format!(
            "{} x {}: zero operand, identity scales",
            spec.a, spec.b
        ));
    }
    Ok((r.params_a, r.params_b))
}

/// Zero tensor with the shape of `a * b`, used to size unit gradients.
fn product_shape(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.shape(), b.shape()) {
        (&[m, _], &[_, n]) => Tensor::filled(vec![m, n], 0.0),
        _ => Err(invalid("matmul operands must be rank 2")),
    }
}

/// Calibrates every dumped hook and reports per-hook reconstruction error
/// over the samples used.
pub fn calibrate_dumps(set: &DumpSet, cfg: &CalibConfig) -> Result<(ParamFile, CalibrationReport)> {
    if cfg.calib_size == 0 {
        return Err(invalid("calib_size must be at least 1"));
    }
    cfg.space()?;
    cfg.strategy()?;
    for h in cfg.hooks.keys() {
        if !set.activations.contains_key(h) {
            return Err(invalid(format!("configured hook '{h}' has no dumps")));
        }
    }
    let mut notes = Vec::new();
    let mut out = ParamFile::default();
    let mut in_matmul = std::collections::BTreeSet::new();
    for spec in &cfg.matmul {
        let (pa, pb) = calibrate_matmul(spec, set, cfg, &mut notes)?;
        out.hooks.insert(spec.a.clone(), HookQuantizer::Uniform(pa));
        out.hooks.insert(spec.b.clone(), HookQuantizer::Uniform(pb));
        in_matmul.insert(spec.a.as_str());
        in_matmul.insert(spec.b.as_str());
    }
    let rest: Vec<&String> = set
        .activations
        .keys()
        .filter(|h| !in_matmul.contains(h.as_str()))
        .collect();
    let calibrated = rest
        .par_iter()
        .map(|h| {
            let kind = cfg.hooks.get(*h).copied().unwrap_or(HookKind::Mse);
            let mut local = Vec::new();
            calibrate_hook(h, kind, set, cfg, &mut local).map(|q| ((*h).clone(), q, local))
        })
        .collect::<Result<Vec<_>>>()?;
    for (h, q, local) in calibrated {
        notes.extend(local);
        out.hooks.insert(h, q);
    }

    let mut report = CalibrationReport::new(Some(cfg.seed), cfg)?;
    for (h, q) in &out.hooks {
        let mut acc = ErrorAccumulator::default();
        for x in &set.activations[h] {
            acc.add(x.data(), q.fake(x)?.data());
        }
        report.add_hook(h, q.name(), q.bits(), acc.finish()?);
    }
    report.notes = notes;
    Ok((out, report))
}

/// Reads dumps from `dir` (first `calib_size` per hook) and calibrates.
pub fn calibrate_dir(
    dir: impl AsRef<Path>,
    cfg: &CalibConfig,
) -> Result<(ParamFile, CalibrationReport, usize)> {
    let set = load_dumps(dir, cfg.calib_size)?;
    let used = set.activations.values().map(Vec::len).max().unwrap_or(0);
    let (p, r) = calibrate_dumps(&set, cfg)?;
    Ok((p, r, used))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::dump::write_dump;
    use crate::io::synth::{generate, SynthKind};

    #[test]
    fn file_names() {
        assert_eq!(
            parse_name("attn.q.3.ptq4"),
            Some(("attn.q".into(), false, 3))
        );
        assert_eq!(
            parse_name("attn.scores.grad.12.ptq4"),
            Some(("attn.scores".into(), true, 12))
        );
        assert_eq!(parse_name("x.ptq4"), None);
        assert_eq!(parse_name("x.1.bin"), None);
        assert_eq!(parse_name(".grad.1.ptq4"), Some((".grad".into(), false, 1)));
    }

    #[test]
    fn config_defaults_and_rejects_unknown_keys() {
        let c = CalibConfig::default();
        assert_eq!(c.calib_size, 32);
        assert_eq!(c.rounds, 3);
        assert_eq!(c.space().unwrap(), SearchSpace::default());
        assert!(CalibConfig::from_toml("bogus = 1").is_err());
        assert!(CalibConfig::from_toml("[hooks]\nx = \"nope\"").is_err());
    }

    #[test]
    fn calibrates_directory() {
        let dir = tempfile::tempdir().unwrap();
        for k in 0..4u64 {
            let s = generate(SynthKind::Softmax, &[8, 8], k).unwrap();
            write_dump(&s, dir.path().join(format!("attn.softmax.{k}.ptq4"))).unwrap();
            let o = generate(SynthKind::Outlier, &[8, 16], 100 + k).unwrap();
            write_dump(&o, dir.path().join(format!("text.linear.{k}.ptq4"))).unwrap();
            let q = generate(SynthKind::Outlier, &[8, 4], 200 + k).unwrap();
            write_dump(&q, dir.path().join(format!("attn.q.{k}.ptq4"))).unwrap();
            write_dump(&q, dir.path().join(format!("attn.k.{k}.ptq4"))).unwrap();
        }
        fs::write(dir.path().join("README"), "ignored").unwrap();
        let cfg = CalibConfig::from_toml(
            "preset = \"W8A8\"\ncalib_size = 3\n[hooks]\n\"attn.softmax\" = \"drq_softmax\"\n\"text.linear\" = \"rorq\"\n[[matmul]]\na = \"attn.q\"\nb = \"attn.k\"\ngrad = \"attn.scores\"\ntranspose_b = true\n",
        )
        .unwrap();
        let (params, report, used) = calibrate_dir(dir.path(), &cfg).unwrap();
        assert_eq!(used, 3);
        assert!(matches!(
            params.get("attn.softmax").unwrap(),
            HookQuantizer::Drq(_)
        ));
        assert!(matches!(
            params.get("text.linear").unwrap(),
            HookQuantizer::Rorq(_)
        ));
        assert!(matches!(
            params.get("attn.q").unwrap(),
            HookQuantizer::Uniform(_)
        ));
        assert_eq!(report.hooks.len(), 4);
        assert!(report.notes.iter().any(|n| n.contains("attn.scores")));

        let bad = CalibConfig::from_toml("[hooks]\n\"missing\" = \"mse\"").unwrap();
        assert!(calibrate_dir(dir.path(), &bad).is_err());
        let empty = tempfile::tempdir().unwrap();
        assert!(calibrate_dir(empty.path(), &cfg).is_err());
    }
}
