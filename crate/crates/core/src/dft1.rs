//! "DFT1" tensor files: one ASCII header line `DFT1 <rank> <d0> .. <dtype>`
//! followed by little-endian raw values.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

pub fn encode(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = format!("DFT1 {}", t.rank()).into_bytes();
    for d in t.shape() {
        write!(out, " {d}").expect("write to vec");
    }
    writeln!(out, " {}", dtype.name()).expect("write to vec");
    match dtype {
        Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let bad = |msg: String| Error::Format(format!("DFT1: {msg}"));
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not ASCII".into()))?;
    let fields: Vec<&str> = header.split_ascii_whitespace().collect();
    if fields.first() != Some(&"DFT1") {
        return Err(bad(format!("bad magic in {header:?}")));
    }
    let rank: usize = fields
        .get(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(format!("bad rank in {header:?}")))?;
    if fields.len() != rank + 3 {
        return Err(bad(format!("expected {rank} extents in {header:?}")));
    }
    let shape = fields[2..2 + rank]
        .iter()
        .map(|s| s.parse::<usize>().map_err(|_| bad(format!("bad extent {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let dtype = match fields[rank + 2] {
        "f64" => Dtype::F64,
        "f32" => Dtype::F32,
        other => return Err(bad(format!("unknown dtype {other:?}"))),
    };
    let body = &bytes[nl + 1..];
    let n: usize = shape.iter().product();
    let width = if dtype == Dtype::F64 { 8 } else { 4 };
    if body.len() != n * width {
        return Err(bad(format!("expected {} payload bytes, found {}", n * width, body.len())));
    }
    let data = match dtype {
        Dtype::F64 => body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        Dtype::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok(Tensor::new(&shape, data)?)
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t, Dtype::F64)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::load(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        let bytes = encode(&t, Dtype::F64);
        assert!(bytes.starts_with(b"DFT1 3 2 1 3 f64\n"));
        assert_eq!(bytes.len(), 17 + 6 * 8);
        assert_eq!(&bytes[17..25], &1.0f64.to_le_bytes());
    }

    #[test]
    fn f32_payload_decodes() {
        let t = Tensor::new(&[2], vec![0.5, -3.0]).unwrap();
        assert_eq!(decode(&encode(&t, Dtype::F32)).unwrap(), t);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::ones(&[4]);
        let bytes = encode(&t, Dtype::F64);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"DFT2 1 1 f64\n\0\0\0\0\0\0\0\0").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).filter(|v| v.is_finite()).collect();
            prop_assume!(data.len() == n);
            let t = Tensor::new(&shape, data).unwrap();
            prop_assert_eq!(decode(&encode(&t, Dtype::F64)).unwrap(), t);
        }
    }
}
