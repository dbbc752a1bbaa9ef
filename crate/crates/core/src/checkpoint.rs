//! Binary checkpoint container shared by every trainable model.
//!
//! Layout: the 8-byte magic `MDDCKPT1`, a little-endian `u64` header length, a UTF-8
//! JSON header, then the raw little-endian tensors. Tensor `offset`s in the header are
//! byte offsets from the start of the tensor section.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::{ParamSet, ParamSpec};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"MDDCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config: Value,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: Value,
}

/// A decoded checkpoint: header plus every tensor widened to `f64`.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    pub specs: Vec<ParamSpec>,
    pub values: Vec<f64>,
}

pub fn encode<T: Scalar>(kind: &str, config: &impl Serialize, meta: Value, params: &ParamSet<T>) -> Result<Vec<u8>> {
    let width = T::byte_width();
    let tensors = params
        .specs
        .iter()
        .map(|s| TensorEntry {
            name: s.name.clone(),
            shape: s.shape.clone(),
            dtype: T::DTYPE.to_string(),
            offset: s.offset * width,
        })
        .collect();
    let header = Header {
        kind: kind.to_string(),
        config: serde_json::to_value(config)?,
        tensors,
        meta,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_bytes.len() + params.len() * width);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    T::to_le_bytes_vec(&params.values, &mut out);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("header extends past end of file"))?;
    let header: Header = serde_json::from_slice(body)?;
    let data = &bytes[16 + hlen..];
    let mut specs = Vec::with_capacity(header.tensors.len());
    let mut values = Vec::new();
    for t in &header.tensors {
        let width = match t.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
        };
        let n: usize = t.shape.iter().product();
        let raw = data
            .get(t.offset..t.offset + n * width)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} is truncated", t.name)))?;
        specs.push(ParamSpec {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset: values.len(),
        });
        values.extend(if width == 4 {
            f32::from_le_bytes_slice(raw)
        } else {
            f64::from_le_bytes_slice(raw)
        });
    }
    Ok(Checkpoint {
        header,
        specs,
        values,
    })
}

pub fn save<T: Scalar>(path: &Path, kind: &str, config: &impl Serialize, meta: Value, params: &ParamSet<T>) -> Result<()> {
    let bytes = encode(kind, config, meta, params)?;
    // Write-then-rename so an interrupted save never clobbers the last good file.
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)
        .map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}

impl Checkpoint {
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.header.kind
            )));
        }
        Ok(())
    }

    pub fn config<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.header.config.clone())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamBuilder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_both_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::<f32, _>::new(&mut rng);
        b.add("a", &[2, 3], Init::TruncNormal(1.0));
        b.add("b", &[4], Init::Values(vec![1.0, 2.0, 3.0, 4.5]));
        let p32 = b.finish();
        let bytes = encode("test", &serde_json::json!({"x": 1}), Value::Null, &p32).unwrap();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.header.kind, "test");
        assert_eq!(ck.header.tensors[1].offset, 24);
        let mut back = p32.clone();
        back.load_values(&ck.specs, &ck.values).unwrap();
        assert_eq!(back, p32);

        let p64: ParamSet<f64> = p32.cast();
        let ck = decode(&encode("test", &(), Value::Null, &p64).unwrap()).unwrap();
        assert_eq!(ck.values, p64.values);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(decode(b"not a checkpoint").is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::<f64, _>::new(&mut rng);
        b.add("a", &[8], Init::TruncNormal(1.0));
        let bytes = encode("t", &(), Value::Null, &b.finish()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
