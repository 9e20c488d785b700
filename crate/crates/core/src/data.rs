//! Labeled sequence datasets: the planted-feature synthetic generator and
//! the `.seqf` binary format.
//!
//! `.seqf` layout (little-endian): `"SEQF"`, u32 version = 1, u32
//! num_sequences, u32 T, u32 d, u32 a, then per sequence a u32 label
//! followed by T·d f32 values in row-major order.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

pub const SEQF_MAGIC: &[u8; 4] = b"SEQF";
pub const SEQF_VERSION: u32 = 1;
pub const SEQF_HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// T × d
    pub x: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub d: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub a: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    Synthetic { spec: SynthSpec, relevant: Vec<usize> },
    File { path: PathBuf },
    Subset { of: Box<Provenance> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub samples: Vec<Sample>,
    pub dims: DataDims,
    pub provenance: Provenance,
}

impl SequenceDataset {
    pub fn new(samples: Vec<Sample>, dims: DataDims, provenance: Provenance) -> Result<Self> {
        for s in &samples {
            if s.x.shape() != [dims.t, dims.d] {
                return Err(Error::dim("dataset.sample", s.x.shape(), &[dims.t, dims.d]));
            }
            if s.label >= dims.a {
                return Err(Error::Config(format!("label {} not below {}", s.label, dims.a)));
            }
        }
        Ok(SequenceDataset {
            samples,
            dims,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn refs(&self) -> Vec<&Sample> {
        self.samples.iter().collect()
    }

    /// Planted relevant indices, when the dataset is synthetic.
    pub fn relevant_features(&self) -> Option<&[usize]> {
        let mut p = &self.provenance;
        loop {
            match p {
                Provenance::Synthetic { relevant, .. } => return Some(relevant),
                Provenance::Subset { of } => p = of,
                Provenance::File { .. } => return None,
            }
        }
    }

    /// Splits each class so that its first `first_per_class` samples land
    /// in the first dataset and the rest in the second.
    pub fn split_per_class(&self, first_per_class: usize) -> (SequenceDataset, SequenceDataset) {
        let mut seen = vec![0usize; self.dims.a];
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for s in &self.samples {
            if seen[s.label] < first_per_class {
                a.push(s.clone());
            } else {
                b.push(s.clone());
            }
            seen[s.label] += 1;
        }
        let sub = |samples| SequenceDataset {
            samples,
            dims: self.dims,
            provenance: Provenance::Subset {
                of: Box::new(self.provenance.clone()),
            },
        };
        (sub(a), sub(b))
    }
}

/// Parameters of the planted-feature task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub d: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub a: usize,
    pub r: usize,
    pub signal: f64,
    pub noise: f64,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            d: 32,
            t: 8,
            a: 5,
            r: 4,
            signal: 1.0,
            noise: 1.0,
            per_class: 100,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.r < 1 || self.r > self.d || self.a < 2 || self.t < 1 || self.per_class < 1 {
            return Err(Error::Config(format!(
                "invalid synthetic spec: need 1 ≤ r ≤ d, a ≥ 2, T ≥ 1, per_class ≥ 1 (got {self:?})"
            )));
        }
        if !(self.signal.is_finite() && self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config("signal/noise must be finite, noise ≥ 0".into()));
        }
        Ok(())
    }
}

/// Parses `key=value` pairs separated by commas, e.g. `d=32,T=8,a=5,r=4`.
/// Recognized keys: d, T, a, r, s (or signal), noise, per_class, seed.
impl FromStr for SynthSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut spec = SynthSpec::default();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got '{part}'")))?;
            let bad = |_| Error::Config(format!("bad value for {k}: '{v}'"));
            match k {
                "d" => spec.d = v.parse().map_err(bad)?,
                "T" | "t" => spec.t = v.parse().map_err(bad)?,
                "a" => spec.a = v.parse().map_err(bad)?,
                "r" => spec.r = v.parse().map_err(bad)?,
                "s" | "signal" => spec.signal = v.parse().map_err(|_| Error::Config(format!("bad value for {k}")))?,
                "noise" | "sigma_n" => spec.noise = v.parse().map_err(|_| Error::Config(format!("bad value for {k}")))?,
                "per_class" | "n" => spec.per_class = v.parse().map_err(bad)?,
                "seed" => spec.seed = v.parse().map_err(bad)?,
                other => return Err(Error::Config(format!("unknown synth key '{other}'"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Draws a balanced dataset in which only `r` randomly chosen feature
/// columns depend on the class.
///
/// Each class c gets a prototype `P_c ∈ R^{T×r}` drawn once from N(0, 1).
/// A sample of class c has relevant columns `signal·P_c + noise·N(0,1)`
/// and every other column `noise·N(0,1)`. Samples are ordered by class.
pub fn generate_synthetic(spec: &SynthSpec, rng: &mut SeededRng) -> Result<SequenceDataset> {
    spec.validate()?;
    let SynthSpec { d, t, a, r, .. } = *spec;

    let mut order: Vec<usize> = (0..d).collect();
    rng.shuffle(&mut order);
    let mut relevant = order[..r].to_vec();
    relevant.sort_unstable();

    let prototypes: Vec<Vec<f64>> = (0..a).map(|_| rng.normals(t * r)).collect();
    let mut samples = Vec::with_capacity(a * spec.per_class);
    for (label, proto) in prototypes.iter().enumerate() {
        for _ in 0..spec.per_class {
            let mut x = rng.normals(t * d);
            x.iter_mut().for_each(|v| *v *= spec.noise);
            for step in 0..t {
                for (slot, &col) in relevant.iter().enumerate() {
                    x[step * d + col] += spec.signal * proto[step * r + slot];
                }
            }
            samples.push(Sample {
                x: Tensor::matrix(t, d, x)?,
                label,
            });
        }
    }
    SequenceDataset::new(
        samples,
        DataDims { d, t, a },
        Provenance::Synthetic {
            spec: spec.clone(),
            relevant,
        },
    )
}

pub fn seqf_len(num_sequences: usize, t: usize, d: usize) -> usize {
    SEQF_HEADER_LEN + num_sequences * (4 + 4 * t * d)
}

pub fn write_seqf_bytes(ds: &SequenceDataset) -> Result<Vec<u8>> {
    let DataDims { d, t, a } = ds.dims;
    let as_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit in 32 bits")))
    };
    let mut out = Vec::with_capacity(seqf_len(ds.len(), t, d));
    out.extend_from_slice(SEQF_MAGIC);
    for v in [
        SEQF_VERSION,
        as_u32(ds.len(), "num_sequences")?,
        as_u32(t, "T")?,
        as_u32(d, "d")?,
        as_u32(a, "a")?,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in &ds.samples {
        out.extend_from_slice(&(s.label as u32).to_le_bytes());
        for &v in s.x.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_seqf(ds: &SequenceDataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = write_seqf_bytes(ds)?;
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_seqf(path: impl AsRef<Path>) -> Result<SequenceDataset> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    let mut ds = read_seqf_bytes(&bytes)?;
    ds.provenance = Provenance::File {
        path: path.as_ref().to_path_buf(),
    };
    Ok(ds)
}

pub fn read_seqf_bytes(bytes: &[u8]) -> Result<SequenceDataset> {
    if bytes.len() < 4 || &bytes[..4] != SEQF_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"SEQF\""));
    }
    if bytes.len() < SEQF_HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != SEQF_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let (count, t, d, a) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
    if t == 0 || d == 0 || a == 0 {
        return Err(Error::format(12, format!("zero dimension (T={t}, d={d}, a={a})")));
    }
    let record = t
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(4))
        .ok_or_else(|| Error::format(12, "dimension overflow"))?;
    let expected = record
        .checked_mul(count)
        .and_then(|v| v.checked_add(SEQF_HEADER_LEN))
        .ok_or_else(|| Error::format(8, "dimension overflow"))?;
    if bytes.len() < expected {
        let last_full = SEQF_HEADER_LEN + (bytes.len() - SEQF_HEADER_LEN) / record * record;
        return Err(Error::format(
            last_full as u64,
            format!("truncated: {} of {expected} bytes", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(expected as u64, "trailing bytes"));
    }

    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let base = SEQF_HEADER_LEN + i * record;
        let label = u32::from_le_bytes(bytes[base..base + 4].try_into().unwrap()) as usize;
        if label >= a {
            return Err(Error::format(base as u64, format!("label {label} not below {a}")));
        }
        let data = bytes[base + 4..base + record]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        samples.push(Sample {
            x: Tensor::matrix(t, d, data)?,
            label,
        });
    }
    SequenceDataset::new(
        samples,
        DataDims { d, t, a },
        Provenance::File { path: PathBuf::new() },
    )
}

/// Shuffled index batches covering `0..len`; the last batch may be short.
pub fn batches(len: usize, batch_size: usize, rng: &mut SeededRng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut idx);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
