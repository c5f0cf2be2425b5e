//! Binary activation dump.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "PTQ4"
//! 4       2           version (u16 LE)
//! 6       1           dtype tag (0 = f32, 1 = i32 codes)
//! 7       1           rank
//! 8       4 * rank    dims (u32 LE each)
//! ...     4 * numel   payload, row-major, little-endian
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: [u8; 4] = *b"PTQ4";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    /// Integer codes written by `quantize` (uniform codes, packed dual-region
    /// words, or `group << bits | code` words).
    I32 = 1,
}

impl DType {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Self::F32),
            1 => Ok(Self::I32),
            t => Err(fmt_err(format!("unknown dtype tag {t}"))),
        }
    }
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn header(dtype: DType, shape: &[usize], numel: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * shape.len() + 4 * numel);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

struct Parsed<'a> {
    dtype: DType,
    shape: Vec<usize>,
    payload: &'a [u8],
}

fn parse(bytes: &[u8]) -> Result<Parsed<'_>> {
    if bytes.len() < 8 {
        return Err(fmt_err("file shorter than the fixed header"));
    }
    if bytes[..4] != MAGIC {
        return Err(fmt_err(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let dtype = DType::from_tag(bytes[6])?;
    let rank = bytes[7] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(fmt_err(format!("rank {rank} outside [1, {MAX_RANK}]")));
    }
    let dims_end = 8 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(fmt_err("truncated dimension list"));
    }
    let shape: Vec<usize> = bytes[8..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(fmt_err("zero-sized dimension"));
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fmt_err("dimension product overflows"))?
        / 4;
    let payload = &bytes[dims_end..];
    if payload.len() != 4 * numel {
        return Err(fmt_err(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            4 * numel
        )));
    }
    Ok(Parsed {
        dtype,
        shape,
        payload,
    })
}

pub fn encode_dump(t: &Tensor) -> Vec<u8> {
    let mut out = header(DType::F32, t.shape(), t.len());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_dump(bytes: &[u8]) -> Result<Tensor> {
    let p = parse(bytes)?;
    if p.dtype != DType::F32 {
        return Err(fmt_err("expected an f32 dump"));
    }
    let data = p
        .payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Tensor::new(p.shape, data).map_err(|e| fmt_err(e.to_string()))
}

pub fn write_dump(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dump(t))?;
    Ok(())
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_dump(&fs::read(path)?)
}

/// Integer code tensor stored with dtype tag 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeDump {
    pub shape: Vec<usize>,
    pub codes: Vec<i32>,
}

pub fn encode_codes(c: &CodeDump) -> Vec<u8> {
    let mut out = header(DType::I32, &c.shape, c.codes.len());
    for v in &c.codes {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_codes(bytes: &[u8]) -> Result<CodeDump> {
    let p = parse(bytes)?;
    if p.dtype != DType::I32 {
        return Err(fmt_err("expected an i32 code dump"));
    }
    let codes = p
        .payload
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Ok(CodeDump {
        shape: p.shape,
        codes,
    })
}

pub fn write_code_dump(c: &CodeDump, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_codes(c))?;
    Ok(())
}

pub fn read_code_dump(path: impl AsRef<Path>) -> Result<CodeDump> {
    decode_codes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_element_file_is_twenty_bytes() {
        let t = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        let b = encode_dump(&t);
        assert_eq!(b.len(), 20);
        assert_eq!(&b[..8], b"PTQ4\x01\x00\x00\x01");
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(decode_dump(&b).unwrap(), t);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap();
        let good = encode_dump(&t);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dump(&bad), Err(Error::Format(_))));

        assert!(matches!(
            decode_dump(&good[..good.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(decode_dump(&extra), Err(Error::Format(_))));

        let mut v = good.clone();
        v[4] = 9;
        assert!(matches!(decode_dump(&v), Err(Error::Format(_))));

        let mut d = good.clone();
        d[6] = 7;
        assert!(matches!(decode_dump(&d), Err(Error::Format(_))));

        let mut huge = header(
            DType::F32,
            &[u32::MAX as usize, u32::MAX as usize, u32::MAX as usize],
            0,
        );
        huge.extend_from_slice(&[0; 16]);
        assert!(matches!(decode_dump(&huge), Err(Error::Format(_))));

        let mut nan = good.clone();
        nan[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_dump(&nan), Err(Error::Format(_))));

        assert!(matches!(decode_dump(b"PTQ"), Err(Error::Format(_))));
    }

    #[test]
    fn code_dump_round_trip_and_tag_check() {
        let c = CodeDump {
            shape: vec![2, 2],
            codes: vec![-3, 0, 255, 1 << 20],
        };
        let b = encode_codes(&c);
        assert_eq!(decode_codes(&b).unwrap(), c);
        assert!(decode_dump(&b).is_err());
        let t = Tensor::from_vec(vec![1.0]).unwrap();
        assert!(decode_codes(&encode_dump(&t)).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ptq4");
        let t = Tensor::new(vec![1, 2, 2], vec![-0.0, 1e-30, 3.5, -7.25]).unwrap();
        write_dump(&t, &path).unwrap();
        let back = read_dump(&path).unwrap();
        let bits: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, orig);
        assert!(matches!(
            read_dump(dir.path().join("missing")),
            Err(Error::Io(_))
        ));
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(
            dims in prop::collection::vec(1usize..5, 1..=4),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let n: usize = dims.iter().product();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n)
                .map(|_| loop {
                    let v = f32::from_bits(rng.random());
                    if v.is_finite() { break v; }
                })
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode_dump(&encode_dump(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
