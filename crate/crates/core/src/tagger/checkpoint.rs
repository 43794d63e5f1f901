//! `SDTM` model checkpoints.
//!
//! ```text
//! "SDTM" u32:version str:config_json str:label_set_json
//! u32:n_tensors { str:name u32:rank u64[rank]:dims f64[Π dims] }
//! ```
//! Integers and floats are little-endian; strings are `u32` length + UTF-8.

use std::collections::HashMap;
use std::path::Path;

use super::crf::Transitions;
use super::model::{TaggerModel, PARAM_NAMES};
use super::TaggerConfig;
use crate::binio::{put_str, Reader};
use crate::corpus::LabelSet;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::layers::LstmCell;
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 4] = b"SDTM";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &TaggerModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &serde_json::to_string(&model.config)?);
    put_str(&mut out, &serde_json::to_string(&model.label_set)?);
    let named = model.named_tensors();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        put_str(&mut out, name);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<TaggerModel> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config: TaggerConfig = serde_json::from_str(&r.string()?)?;
    let label_set: LabelSet = serde_json::from_str(&r.string()?)?;
    let count = r.u32()? as usize;
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64()?;
            shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?);
        }
        let n = shape.iter().try_fold(8usize, |a, &d| a.checked_mul(d));
        let raw = r.take(n.ok_or_else(|| Error::Format(format!("tensor {name} too large")))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    r.finish()?;
    let mut get = |name: &str| tensors.remove(name).ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")));
    let mut ordered = Vec::with_capacity(PARAM_NAMES.len());
    for name in PARAM_NAMES {
        ordered.push(get(name)?);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    let mut it = ordered.into_iter();
    let mut next = || it.next().expect("all names present");
    let model = TaggerModel {
        encoder: EncoderParams {
            projection: next(),
            attn_lstm: LstmCell { w_input: next(), w_hidden: next(), bias: next() },
            score: next(),
        },
        dense_weight: next(),
        dense_bias: next(),
        forward_lstm: LstmCell { w_input: next(), w_hidden: next(), bias: next() },
        backward_lstm: LstmCell { w_input: next(), w_hidden: next(), bias: next() },
        emission_weight: next(),
        emission_bias: next(),
        transitions: Transitions { scores: next(), start: next(), end: next() },
        config,
        label_set,
    };
    model.validate()?;
    Ok(model)
}

pub fn save(model: &TaggerModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TaggerModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaggerModel {
        let config = TaggerConfig { c: 3, w: 4, d: 8, p: 5, h: 4, d2: 6, hidden: 5, seed: 9, ..TaggerConfig::default() };
        TaggerModel::new(config, LabelSet::coda()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.label_set, m.label_set);
        for (a, b) in m.tensors().iter().zip(back.tensors()) {
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_damage() {
        let bytes = to_bytes(&small()).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut b = bytes.clone();
        b[1] = b'X';
        assert!(from_bytes(&b).is_err());
        let mut b = bytes.clone();
        b.extend_from_slice(&[0, 0]);
        assert!(from_bytes(&b).is_err());
        let mut b = bytes;
        let last = b.len() - 1;
        b[last] = 0xff;
        b[last - 1] = 0xff;
        assert!(matches!(from_bytes(&b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sdtm");
        let m = small();
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap(), m);
        assert!(matches!(load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
