//! Binary checkpoint container.
//!
//! Layout (all integers u32 little-endian):
//!
//! ```text
//! "IPCS" | version | scalar width in bytes | config JSON (len + bytes)
//!        | fingerprint (len + bytes) | array count
//!        | per array: name (len + bytes) | ndim | dims... | raw LE values
//! ```

use std::path::Path;

use super::{init_params, NetworkParams, Result, SegNetConfig, SegNetError};
use crate::scalar::Scalar;
use crate::tensor::{BnMode, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IPCS";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

fn arrays<T: Scalar>(params: &NetworkParams<T>) -> Vec<(String, Tensor<T>)> {
    let mut out: Vec<(String, Tensor<T>)> = params.learnable().into_iter().map(|(n, t)| (n, t.clone())).collect();
    for (i, b) in params.blocks.iter().enumerate() {
        let c = b.bn.channels();
        out.push((format!("block{i}.running_mu"), Tensor::new(vec![1, c], b.bn.running_mu.clone()).expect("sized")));
        out.push((format!("block{i}.running_sigma2"), Tensor::new(vec![1, c], b.bn.running_sigma2.clone()).expect("sized")));
    }
    out
}

pub fn encode_params<T: Scalar>(params: &NetworkParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, T::BYTES as u32);
    put_bytes(&mut out, &serde_json::to_vec(&params.config).expect("config serialises"));
    put_bytes(&mut out, params.fingerprint.as_bytes());
    let arrays = arrays(params);
    put_u32(&mut out, arrays.len() as u32);
    for (name, t) in arrays {
        put_bytes(&mut out, name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SegNetError::Parse(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        String::from_utf8(self.bytes(what)?.to_vec()).map_err(|_| SegNetError::Parse(format!("{what} is not UTF-8")))
    }
}

/// Decodes a checkpoint and checks it against the expected architecture.
pub fn decode_params<T: Scalar>(buf: &[u8], expected: Option<&SegNetConfig>) -> Result<NetworkParams<T>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(SegNetError::Parse("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(SegNetError::Parse(format!("unsupported version {version}")));
    }
    let width = r.u32("scalar width")? as usize;
    if width != T::BYTES {
        return Err(SegNetError::Parse(format!("checkpoint stores {width}-byte values, loading as {}", T::NAME)));
    }
    let config: SegNetConfig =
        serde_json::from_slice(r.bytes("config")?).map_err(|e| SegNetError::Parse(format!("config record: {e}")))?;
    config.validate()?;
    let fingerprint = r.string("fingerprint")?;
    if fingerprint != config.fingerprint() {
        return Err(SegNetError::IncompatibleCheckpoint { expected: config.fingerprint(), found: fingerprint });
    }
    if let Some(exp) = expected {
        if exp.fingerprint() != fingerprint {
            return Err(SegNetError::IncompatibleCheckpoint { expected: exp.fingerprint(), found: fingerprint });
        }
    }
    let mut params = init_params::<T>(&config)?;
    let count = r.u32("array count")? as usize;
    let mut loaded = std::collections::HashMap::new();
    for _ in 0..count {
        let name = r.string("array name")?;
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * width, &name)?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        loaded.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(SegNetError::Parse(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let mut take = |name: &str, target_shape: &[usize]| -> Result<Tensor<T>> {
        let t = loaded.remove(name).ok_or_else(|| SegNetError::Parse(format!("missing array {name}")))?;
        if t.shape() != target_shape {
            return Err(SegNetError::Parse(format!("array {name} has shape {:?}, expected {target_shape:?}", t.shape())));
        }
        Ok(t)
    };
    for (name, slot) in params.learnable_mut() {
        let shape = slot.shape().to_vec();
        *slot = take(&name, &shape)?;
    }
    for (i, b) in params.blocks.iter_mut().enumerate() {
        let c = b.bn.channels();
        b.bn.running_mu = take(&format!("block{i}.running_mu"), &[1, c])?.into_data();
        b.bn.running_sigma2 = take(&format!("block{i}.running_sigma2"), &[1, c])?.into_data();
        b.bn.validate()?;
    }
    params.set_bn_mode(BnMode::RunningStats);
    Ok(params)
}

pub fn save_params<T: Scalar>(params: &NetworkParams<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_params(params))?;
    Ok(())
}

/// Loads a checkpoint; with `expected` set, the stored architecture must match it.
pub fn load_params<T: Scalar>(path: impl AsRef<Path>, expected: Option<&SegNetConfig>) -> Result<NetworkParams<T>> {
    decode_params(&std::fs::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = init_params::<f32>(&SegNetConfig { seed: 9, ..Default::default() }).unwrap();
        p.blocks[1].bn.running_mu[3] = 0.123_456_79;
        p.blocks[2].bn.running_sigma2[0] = 7.5e-3;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ipcs");
        save_params(&p, &path).unwrap();
        let q = load_params::<f32>(&path, Some(&p.config)).unwrap();
        assert!(p.bits_equal(&q));
    }

    #[test]
    fn different_architecture_rejected() {
        let p = init_params::<f32>(&SegNetConfig::default()).unwrap();
        let other = SegNetConfig { hidden_dims: vec![64, 64, 128], ..Default::default() };
        let err = decode_params::<f32>(&encode_params(&p), Some(&other)).unwrap_err();
        assert!(matches!(err, SegNetError::IncompatibleCheckpoint { .. }));
    }

    #[test]
    fn truncated_and_wrong_width_rejected() {
        let p = init_params::<f32>(&SegNetConfig::default()).unwrap();
        let bytes = encode_params(&p);
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_params::<f32>(&bytes[..cut], None), Err(SegNetError::Parse(_))), "cut {cut}");
        }
        assert!(matches!(decode_params::<f64>(&bytes, None), Err(SegNetError::Parse(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_params::<f32>(&bad, None), Err(SegNetError::Parse(_))));
    }
}
