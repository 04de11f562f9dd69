//! Named-tensor container compatible with the safetensors layout: an 8-byte
//! little-endian header length, a JSON header mapping each tensor name to
//! `{dtype, shape, data_offsets}` plus a `__metadata__` string map, then the
//! raw little-endian tensor bytes in header order.

use std::collections::BTreeMap;
use std::path::Path;

use monoview_autodiff::{ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

#[derive(Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

pub fn to_bytes<T: Scalar>(params: &ParamStore<T>, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut header = serde_json::Map::new();
    header.insert(METADATA_KEY.into(), serde_json::to_value(metadata).unwrap());
    let mut payload = Vec::new();
    for (name, t) in params.iter() {
        let start = payload.len();
        for &v in t.data() {
            v.push_le_bytes(&mut payload);
        }
        let entry = Entry { dtype: T::DTYPE.into(), shape: t.shape().to_vec(), data_offsets: [start, payload.len()] };
        header.insert(name.clone(), serde_json::to_value(entry).unwrap());
    }
    let mut json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    // keep the payload 8-byte aligned
    while json.len() % 8 != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(ParamStore<T>, BTreeMap<String, String>)> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 8 {
        return Err(bad("container shorter than its length prefix".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + n {
        return Err(bad("truncated header".into()));
    }
    let header: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..8 + n]).map_err(|e| bad(format!("bad header: {e}")))?;
    let payload = &bytes[8 + n..];
    let mut params = ParamStore::new();
    let mut metadata = BTreeMap::new();
    for (name, value) in header {
        if name == METADATA_KEY {
            metadata = serde_json::from_value(value).map_err(|e| bad(format!("bad metadata: {e}")))?;
            continue;
        }
        let entry: Entry = serde_json::from_value(value).map_err(|e| bad(format!("bad entry `{name}`: {e}")))?;
        if entry.dtype != T::DTYPE {
            return Err(bad(format!("tensor `{name}` is {} but {} was requested", entry.dtype, T::DTYPE)));
        }
        let [start, end] = entry.data_offsets;
        let count: usize = entry.shape.iter().product();
        if end < start || end > payload.len() || end - start != count * T::BYTES {
            return Err(bad(format!("tensor `{name}` has inconsistent offsets")));
        }
        let data = payload[start..end].chunks(T::BYTES).map(T::from_le_slice).collect();
        params.insert(name, Tensor::from_parts(entry.shape, data));
    }
    Ok((params, metadata))
}

pub fn save<T: Scalar>(path: &Path, params: &ParamStore<T>, metadata: &BTreeMap<String, String>) -> Result<()> {
    let bytes = to_bytes(params, metadata)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
