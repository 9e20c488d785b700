//! `.vibl` model container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "VIBL" | u32 version | u64 manifest_len | manifest (UTF-8 JSON) | payload
//! ```
//!
//! The payload is every tensor of the manifest directory, in directory
//! order, as IEEE-754 f32. Offsets are relative to the payload start.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dims, GateParams, InputSelection, SequenceClassifier, TrainingMeta};
use crate::cell::{Gate, LstmParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vib::VibGate;

pub const MAGIC: &[u8; 4] = b"VIBL";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl TensorEntry {
    pub fn byte_len(&self) -> u64 {
        4 * self.shape.iter().product::<usize>() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub dims: Dims,
    pub compact: bool,
    pub dropout_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_selection: Option<InputSelection>,
    pub tensors: Vec<TensorEntry>,
    pub training: TrainingMeta,
}

impl ModelManifest {
    pub fn payload_len(&self) -> u64 {
        self.tensors.iter().map(TensorEntry::byte_len).sum()
    }
}

fn named_tensors(m: &SequenceClassifier) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    // Trainable parameters first, in visit order, then fixed gate scales.
    m.visit_params(|name, _, shape, data| out.push((name.to_string(), shape.to_vec(), data.to_vec())));
    if let GateParams::Scales(s) = &m.gates {
        for gate in Gate::ALL {
            out.push((
                format!("gate_{}.scale", gate.letter()),
                vec![m.dims.n],
                s[gate.index()].clone(),
            ));
        }
    }
    out
}

pub fn write_model(m: &SequenceClassifier) -> Result<Vec<u8>> {
    m.validate()?;
    let tensors = named_tensors(m);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, _) in &tensors {
        let e = TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        };
        offset += e.byte_len();
        entries.push(e);
    }
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        dims: m.dims,
        compact: m.is_compact(),
        dropout_p: m.dropout_p,
        input_selection: m.input_select.clone(),
        tensors: entries,
        training: m.meta.clone(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Config(e.to_string()))?;

    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in &tensors {
        for &v in data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_model(m: &SequenceClassifier, path: impl AsRef<Path>) -> Result<()> {
    let bytes = write_model(m)?;
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SequenceClassifier> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    read_model(&bytes)
}

/// Parses the header and manifest, returning the manifest and the payload
/// start offset.
pub fn read_manifest(bytes: &[u8]) -> Result<(ModelManifest, usize)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"VIBL\""));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let end = (HEADER_LEN as u64).checked_add(len).filter(|&e| e <= bytes.len() as u64);
    let end = end.ok_or_else(|| Error::format(8, format!("manifest length {len} exceeds file")))? as usize;
    let manifest: ModelManifest = serde_json::from_slice(&bytes[HEADER_LEN..end])
        .map_err(|e| Error::format(HEADER_LEN as u64, format!("manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(Error::format(HEADER_LEN as u64, "manifest version disagrees with header"));
    }
    let mut expected = 0u64;
    for t in &manifest.tensors {
        if t.offset != expected {
            return Err(Error::format(
                end as u64 + t.offset,
                format!("tensor '{}' at offset {} but expected {expected}", t.name, t.offset),
            ));
        }
        expected += t.byte_len();
    }
    Ok((manifest, end))
}

pub fn read_model(bytes: &[u8]) -> Result<SequenceClassifier> {
    let (manifest, start) = read_manifest(bytes)?;
    let payload = &bytes[start..];
    let want = manifest.payload_len();
    if (payload.len() as u64) < want {
        return Err(Error::format(
            bytes.len() as u64,
            format!("payload truncated: {} of {want} bytes", payload.len()),
        ));
    }
    if payload.len() as u64 > want {
        return Err(Error::format(start as u64 + want, "trailing bytes after payload"));
    }

    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let lo = e.offset as usize;
        let hi = lo + e.byte_len() as usize;
        let data = payload[lo..hi]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|err| Error::format(start as u64 + e.offset, err.to_string()))?;
        tensors.push((e.name.clone(), t));
    }
    assemble(&manifest, tensors, start as u64)
}

fn assemble(manifest: &ModelManifest, tensors: Vec<(String, Tensor)>, at: u64) -> Result<SequenceClassifier> {
    let take = |name: &str| -> Option<&Tensor> { tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t) };
    let need = |name: &str| -> Result<&Tensor> {
        take(name).ok_or_else(|| Error::format(at, format!("missing tensor '{name}'")))
    };
    let vec_of = |name: &str| -> Result<Vec<f64>> { Ok(need(name)?.data().to_vec()) };

    let feature_gate = match (take("feature_gate.mu"), take("feature_gate.rho")) {
        (Some(mu), Some(rho)) => Some(VibGate::new(mu.data().to_vec(), rho.data().to_vec())?),
        (None, None) => None,
        _ => return Err(Error::format(at, "feature gate needs both mu and rho")),
    };
    let w = Gate::ALL.map(|g| need(&super::w_name(g)).cloned());
    let u = Gate::ALL.map(|g| need(&super::u_name(g)).cloned());
    let b = Gate::ALL.map(|g| vec_of(&super::b_name(g)));
    let [w0, w1, w2, w3] = w;
    let [u0, u1, u2, u3] = u;
    let [b0, b1, b2, b3] = b;
    let lstm = LstmParams::new([w0?, w1?, w2?, w3?], [u0?, u1?, u2?, u3?], [b0?, b1?, b2?, b3?])
        .map_err(|e| Error::format(at, e.to_string()))?;

    let gates = if take("gate_i.mu").is_some() {
        let mut gs = Vec::with_capacity(4);
        for gate in Gate::ALL {
            let l = gate.letter();
            gs.push(VibGate::new(vec_of(&format!("gate_{l}.mu"))?, vec_of(&format!("gate_{l}.rho"))?)?);
        }
        let gs: [VibGate; 4] = gs.try_into().expect("four gates");
        GateParams::Masks(Box::new(gs))
    } else {
        let [a, b, c, d] = Gate::ALL.map(|g| vec_of(&format!("gate_{}.scale", g.letter())));
        GateParams::Scales([a?, b?, c?, d?])
    };

    let m = SequenceClassifier {
        dims: manifest.dims,
        feature_gate,
        lstm,
        gates,
        head_w: need("head.W")?.clone(),
        head_b: vec_of("head.b")?,
        dropout_p: manifest.dropout_p,
        input_select: manifest.input_selection.clone(),
        meta: manifest.training.clone(),
    };
    m.validate().map_err(|e| Error::format(at, e.to_string()))?;
    if m.is_compact() != manifest.compact {
        return Err(Error::format(at, "compact flag disagrees with tensors"));
    }
    Ok(m)
}
