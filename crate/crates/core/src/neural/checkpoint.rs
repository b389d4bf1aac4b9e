use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::model::{Normalization, RecurrentModel, Topology};
use super::params::ArrayInfo;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FLXCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    topology: Topology,
    arrays: Vec<ArrayInfo>,
}

const NORM_NAMES: [&str; 4] = [
    "norm.input_offset",
    "norm.input_scale",
    "norm.output_offset",
    "norm.output_scale",
];

fn norm_vectors(n: &Normalization) -> [&DVector<f64>; 4] {
    [&n.input_offset, &n.input_scale, &n.output_offset, &n.output_scale]
}

/// Column-major `rows × cols` to row-major.
fn to_row_major(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for r in 0..rows {
        for c in 0..cols {
            out.push(data[c * rows + r]);
        }
    }
    out
}

/// Layout: magic, `u32` version, `u64` header length, JSON header, then every
/// array as row-major little-endian `f64` in header order.
pub fn save_checkpoint(model: &RecurrentModel) -> Vec<u8> {
    let layout = model.params.layout();
    let n = model.n_joints();
    let mut arrays: Vec<ArrayInfo> = layout
        .iter()
        .map(|(name, r, c)| ArrayInfo {
            name: name.clone(),
            shape: [*r, *c],
        })
        .collect();
    arrays.extend(NORM_NAMES.iter().map(|name| ArrayInfo {
        name: (*name).into(),
        shape: [n, 1],
    }));
    let header = serde_json::to_vec(&Header {
        topology: model.topology.clone(),
        arrays,
    })
    .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for ((_, r, c), data) in layout.iter().zip(model.params.slices()) {
        for v in to_row_major(data, *r, *c) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in norm_vectors(&model.norm) {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(count * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<RecurrentModel> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(rd.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(rd.take(8, "header length")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let header: Header = serde_json::from_slice(rd.take(header_len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut model = RecurrentModel::zeros(header.topology.clone())
        .map_err(|e| Error::Checkpoint(format!("bad topology: {e}")))?;
    let layout = model.params.layout();
    let n = model.n_joints();
    let expected: Vec<(String, [usize; 2])> = layout
        .iter()
        .map(|(name, r, c)| (name.clone(), [*r, *c]))
        .chain(NORM_NAMES.iter().map(|s| ((*s).to_string(), [n, 1])))
        .collect();
    let found: Vec<(String, [usize; 2])> = header.arrays.iter().map(|a| (a.name.clone(), a.shape)).collect();
    if expected != found {
        return Err(Error::Checkpoint("array table does not match the stated topology".into()));
    }
    for ((name, r, c), dst) in layout.iter().zip(model.params.slices_mut()) {
        let row_major = rd.f64s(r * c, name)?;
        for i in 0..*r {
            for j in 0..*c {
                dst[j * r + i] = row_major[i * c + j];
            }
        }
    }
    let mut vecs = Vec::new();
    for name in NORM_NAMES {
        vecs.push(DVector::from_vec(rd.f64s(n, name)?));
    }
    if rd.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    let mut it = vecs.into_iter();
    let mut next = || it.next().expect("four normalization vectors");
    model.norm = Normalization {
        input_offset: next(),
        input_scale: next(),
        output_offset: next(),
        output_scale: next(),
    };
    model.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(model)
}

/// Load and require a specific topology.
pub fn load_checkpoint_expecting(bytes: &[u8], expected: &Topology) -> Result<RecurrentModel> {
    let model = load_checkpoint(bytes)?;
    if &model.topology != expected {
        return Err(Error::TopologyMismatch {
            expected: format!("{expected:?}"),
            found: format!("{:?}", model.topology),
        });
    }
    Ok(model)
}

pub fn save_checkpoint_file(model: &RecurrentModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, save_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint_file(path: impl AsRef<Path>) -> Result<RecurrentModel> {
    load_checkpoint(&std::fs::read(path)?)
}
