//! File formats, synthetic data, mask metrics and reports.

pub mod calibrate;
pub mod dump;
pub mod masks;
pub mod params;
pub mod report;
pub mod synth;

/// Serde helpers writing `f64` as strings with 17 significant digits so
/// values survive a text round trip bit-exactly. Infinities are `"inf"`.
pub mod exact {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn format(v: f64) -> String {
        if v == f64::INFINITY {
            "inf".to_owned()
        } else if v == f64::NEG_INFINITY {
            "-inf".to_owned()
        } else {
            format!("{v:.16e}")
        }
    }

    pub fn parse(s: &str) -> Result<f64, String> {
        let v: f64 = s
            .trim()
            .parse()
            .map_err(|e| format!("bad number '{s}': {e}"))?;
        if v.is_nan() {
            return Err("NaN is not allowed".to_owned());
        }
        Ok(v)
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|&x| format(x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| parse(s).map_err(de::Error::custom))
            .collect()
    }

    pub mod one {
        use super::*;

        pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
            s.serialize_str(&format(*v))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
            parse(&String::deserialize(d)?).map_err(de::Error::custom)
        }
    }
}

/// Serde helper for report numbers: finite values stay numbers, infinities
/// become `"inf"` / `"-inf"` (JSON has no infinity literal).
pub mod lossy {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&super::exact::format(*v))
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum NumOrStr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match NumOrStr::deserialize(d)? {
            NumOrStr::Num(v) => Ok(v),
            NumOrStr::Str(s) => super::exact::parse(&s).map_err(de::Error::custom),
        }
    }
}
