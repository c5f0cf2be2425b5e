//! Calibrated quantizer parameters keyed by hook name, stored as TOML.
//!
//! Scales are written as decimal strings with 17 significant digits, so a
//! write/read cycle reproduces every `f64` bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::drq::{drq_encode, fake_drq, DRQParams};
use crate::error::{Error, Result};
use crate::quant::{dequantize, fake_quant, quantize, QuantParams};
use crate::rorq::{fake_rorq, rorq_encode, RORQParams};
use crate::tensor::Tensor;

pub const PARAM_FILE_VERSION: u32 = 1;

/// Quantizer attached to one hook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "quantizer", rename_all = "snake_case")]
pub enum HookQuantizer {
    Uniform(QuantParams),
    Drq(DRQParams),
    Rorq(RORQParams),
}

impl HookQuantizer {
    pub fn bits(&self) -> u8 {
        match self {
            Self::Uniform(p) => p.bits(),
            Self::Drq(p) => p.bits(),
            Self::Rorq(p) => p.bits(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Uniform(_) => "uniform",
            Self::Drq(_) => "drq",
            Self::Rorq(_) => "rorq",
        }
    }

    /// Quantize-dequantize.
    pub fn fake(&self, t: &Tensor) -> Result<Tensor> {
        match self {
            Self::Uniform(p) => fake_quant(t, p),
            Self::Drq(p) => Ok(fake_drq(t, p)),
            Self::Rorq(p) => Ok(fake_rorq(t, p)),
        }
    }

    /// Integer codes: uniform codes, packed dual-region words, or
    /// `group << bits | code` words.
    pub fn encode(&self, t: &Tensor) -> Result<Vec<i32>> {
        Ok(match self {
            Self::Uniform(p) => quantize(t, p)?.codes().to_vec(),
            Self::Drq(p) => drq_encode(t, p).into_iter().map(|w| w as i32).collect(),
            Self::Rorq(p) => rorq_encode(t, p).into_iter().map(|w| w as i32).collect(),
        })
    }

    /// Dequantized tensor for uniform params (goes through the code path
    /// explicitly; identical to [`HookQuantizer::fake`]).
    pub fn roundtrip(&self, t: &Tensor) -> Result<Tensor> {
        match self {
            Self::Uniform(p) => Ok(dequantize(&quantize(t, p)?)),
            _ => self.fake(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamFile {
    pub version: u32,
    pub hooks: BTreeMap<String, HookQuantizer>,
}

impl Default for ParamFile {
    fn default() -> Self {
        Self {
            version: PARAM_FILE_VERSION,
            hooks: BTreeMap::new(),
        }
    }
}

impl ParamFile {
    pub fn get(&self, hook: &str) -> Result<&HookQuantizer> {
        self.hooks
            .get(hook)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameters for hook '{hook}'")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let f: Self = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        if f.version != PARAM_FILE_VERSION {
            return Err(Error::Parse(format!(
                "unsupported parameter file version {}",
                f.version
            )));
        }
        Ok(f)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}
