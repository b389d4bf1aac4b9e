use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Campaign, CampaignEntry, CampaignSpec, TrajectoryPair};
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

pub const DATASET_MAGIC: &[u8; 8] = b"FLXDATA\0";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: CampaignSpec,
    plant_fingerprint: String,
    entries: Vec<CampaignEntry>,
    /// `(n_joints, samples, sample_rate)` per pair.
    shapes: Vec<(usize, usize, f64)>,
}

/// Magic, `u32` version, `u64` header length, JSON header, then per pair the
/// `q_d` and `q` blocks as column-major little-endian `f64`.
pub fn write_dataset(campaign: &Campaign) -> Vec<u8> {
    let header = Header {
        spec: campaign.spec.clone(),
        plant_fingerprint: campaign.plant_fingerprint.clone(),
        entries: campaign.entries.clone(),
        shapes: campaign
            .pairs
            .iter()
            .map(|p| (p.q_d.n_joints(), p.q_d.len(), p.q_d.sample_rate()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("dataset header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for pair in &campaign.pairs {
        for traj in [&pair.q_d, &pair.q] {
            for v in traj.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() - *pos < n {
        return Err(Error::Dataset(format!("truncated while reading {what}")));
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

pub fn read_dataset(bytes: &[u8]) -> Result<Campaign> {
    let mut pos = 0;
    if take(bytes, &mut pos, 8, "magic")? != DATASET_MAGIC {
        return Err(Error::Dataset("not a dataset file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4, "version")?.try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(Error::Dataset(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(take(bytes, &mut pos, 8, "header length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Dataset("header too large".into()))?;
    let header: Header = serde_json::from_slice(take(bytes, &mut pos, len, "header")?)
        .map_err(|e| Error::Dataset(format!("bad header: {e}")))?;
    if header.shapes.len() != header.entries.len() {
        return Err(Error::Dataset("entry and shape tables differ in length".into()));
    }
    let mut pairs = Vec::with_capacity(header.shapes.len());
    for (i, &(n, len, rate)) in header.shapes.iter().enumerate() {
        let mut block = || -> Result<Trajectory> {
            let raw = take(bytes, &mut pos, n * len * 8, &format!("pair {i}"))?;
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Trajectory::new(DMatrix::from_vec(n, len, vals), rate).map_err(|e| Error::Dataset(format!("pair {i}: {e}")))
        };
        let q_d = block()?;
        let q = block()?;
        pairs.push(TrajectoryPair::new(q_d, q)?);
    }
    if pos != bytes.len() {
        return Err(Error::Dataset(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(Campaign {
        spec: header.spec,
        plant_fingerprint: header.plant_fingerprint,
        entries: header.entries,
        pairs,
    })
}

pub fn save_dataset(campaign: &Campaign, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_dataset(campaign))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Campaign> {
    read_dataset(&std::fs::read(path)?)
}

/// Long-format CSV: `traj_id,t,joint,q_d,q`.
pub fn export_csv(pairs: &[TrajectoryPair], mut out: impl Write) -> Result<()> {
    writeln!(out, "traj_id,t,joint,q_d,q")?;
    for (id, pair) in pairs.iter().enumerate() {
        for t in 0..pair.len() {
            for j in 0..pair.q_d.n_joints() {
                writeln!(out, "{id},{t},{j},{},{}", pair.q_d.data()[(j, t)], pair.q.data()[(j, t)])?;
            }
        }
    }
    Ok(())
}
