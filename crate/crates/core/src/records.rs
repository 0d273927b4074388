//! Little-endian binary record streams.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic b"DTCR"
//! 4       4     u32 format version (1)
//! 8       4     u32 header length L in bytes
//! 12      L     UTF-8 JSON header {"kind", "fields": [{"name", "shape"}], "n_records", "meta"}
//! 12+L    ...   n_records records, each: u64 tag, then every field's values
//!               as f64 in header order, row-major within a field
//! ```
//!
//! Snapshot archives and dataset splits are both record streams; they differ
//! only in `kind`, the field list, and `meta`. Snapshot archives also get a
//! JSON sidecar holding the per-slot propagation paths.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raytrace::{ArrayOrientation, Cfr, ChannelSnapshot, PropagationPath, RadioConfig};
use crate::scene::AntennaArray;

pub const MAGIC: &[u8; 4] = b"DTCR";
pub const RECORD_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("not a record stream (bad magic)")]
    BadMagic,
    #[error("unsupported record format version {0}")]
    Version(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("record stream truncated")]
    Truncated,
    #[error("expected a {expected} stream, found {found}")]
    Kind { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl FieldSpec {
    pub fn new(name: &str, shape: &[usize]) -> Self {
        FieldSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub kind: String,
    pub fields: Vec<FieldSpec>,
    pub n_records: u64,
    pub meta: serde_json::Value,
}

impl StreamHeader {
    pub fn record_len(&self) -> usize {
        self.fields.iter().map(FieldSpec::len).sum()
    }

    /// Offset and length of a named field inside a record's values.
    pub fn field_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut offset = 0;
        for f in &self.fields {
            if f.name == name {
                return Some(offset..offset + f.len());
            }
            offset += f.len();
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub tag: u64,
    pub values: Vec<f64>,
}

pub fn write_stream(
    path: impl AsRef<Path>,
    kind: &str,
    fields: Vec<FieldSpec>,
    meta: serde_json::Value,
    records: &[Record],
) -> Result<(), RecordError> {
    let header = StreamHeader {
        kind: kind.to_string(),
        fields,
        n_records: records.len() as u64,
        meta,
    };
    let width = header.record_len();
    if let Some(r) = records.iter().find(|r| r.values.len() != width) {
        return Err(RecordError::Header(format!(
            "record {} has {} values, schema needs {width}",
            r.tag,
            r.values.len()
        )));
    }
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&RECORD_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for r in records {
        w.write_all(&r.tag.to_le_bytes())?;
        for v in &r.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_stream(path: impl AsRef<Path>) -> Result<(StreamHeader, Vec<Record>), RecordError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(RecordError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != RECORD_FORMAT_VERSION {
        return Err(RecordError::Version(version));
    }
    let header_len = read_u32(&mut r)? as usize;
    let mut json = vec![0u8; header_len];
    read_exact(&mut r, &mut json)?;
    let header: StreamHeader =
        serde_json::from_slice(&json).map_err(|e| RecordError::Header(e.to_string()))?;
    let width = header.record_len();
    let mut records = Vec::with_capacity(header.n_records as usize);
    let mut buf = vec![0u8; 8 * width];
    for _ in 0..header.n_records {
        let mut tag = [0u8; 8];
        read_exact(&mut r, &mut tag)?;
        read_exact(&mut r, &mut buf)?;
        let values = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        records.push(Record {
            tag: u64::from_le_bytes(tag),
            values,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(RecordError::Header("trailing bytes after last record".into()));
    }
    Ok((header, records))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), RecordError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            RecordError::Truncated
        } else {
            RecordError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, RecordError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub const SNAPSHOT_KIND: &str = "snapshot";

/// Radio and array settings a snapshot archive was simulated with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub radio: RadioConfig,
    pub array: AntennaArray,
    pub orientation: ArrayOrientation,
    pub scene_id: String,
}

#[derive(Serialize, Deserialize)]
struct SnapshotSidecar {
    format_version: u32,
    kind: String,
    n_slots: usize,
    meta: SnapshotMeta,
    slots: Vec<SidecarSlot>,
}

#[derive(Serialize, Deserialize)]
struct SidecarSlot {
    slot_index: usize,
    paths: Vec<PropagationPath>,
}

/// Path of the JSON sidecar that accompanies a snapshot archive.
pub fn sidecar_path(archive: &Path) -> PathBuf {
    archive.with_extension("json")
}

/// Writes `<path>` (records: rx position, interleaved CFR) and its `.json` sidecar.
pub fn save_snapshots(
    path: impl AsRef<Path>,
    meta: &SnapshotMeta,
    snapshots: &[ChannelSnapshot],
) -> Result<(), RecordError> {
    let path = path.as_ref();
    let n_tx = meta.array.n_elements();
    let n_sub = meta.radio.n_subcarriers;
    let fields = vec![
        FieldSpec::new("rx_position", &[3]),
        FieldSpec::new("cfr", &[n_tx, n_sub, 2]),
    ];
    let records: Vec<Record> = snapshots
        .iter()
        .map(|s| {
            let mut values = vec![s.rx_position.x, s.rx_position.y, s.rx_position.z];
            values.extend(s.cfr.to_features());
            Record {
                tag: s.slot_index as u64,
                values,
            }
        })
        .collect();
    write_stream(
        path,
        SNAPSHOT_KIND,
        fields,
        serde_json::to_value(meta)?,
        &records,
    )?;
    let sidecar = SnapshotSidecar {
        format_version: RECORD_FORMAT_VERSION,
        kind: SNAPSHOT_KIND.to_string(),
        n_slots: snapshots.len(),
        meta: meta.clone(),
        slots: snapshots
            .iter()
            .map(|s| SidecarSlot {
                slot_index: s.slot_index,
                paths: s.paths.clone(),
            })
            .collect(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_snapshots(
    path: impl AsRef<Path>,
) -> Result<(SnapshotMeta, Vec<ChannelSnapshot>), RecordError> {
    let path = path.as_ref();
    let (header, records) = read_stream(path)?;
    if header.kind != SNAPSHOT_KIND {
        return Err(RecordError::Kind {
            expected: SNAPSHOT_KIND.into(),
            found: header.kind,
        });
    }
    let meta: SnapshotMeta = serde_json::from_value(header.meta.clone())?;
    let sidecar: SnapshotSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    if sidecar.slots.len() != records.len() {
        return Err(RecordError::Header(
            "sidecar slot count differs from archive".into(),
        ));
    }
    let n_tx = meta.array.n_elements();
    let n_sub = meta.radio.n_subcarriers;
    let snapshots = records
        .into_iter()
        .zip(sidecar.slots)
        .map(|(r, slot)| ChannelSnapshot {
            rx_position: glam::DVec3::new(r.values[0], r.values[1], r.values[2]),
            cfr: Cfr::from_features(n_tx, n_sub, &r.values[3..]),
            slot_index: r.tag as usize,
            paths: slot.paths,
        })
        .collect();
    Ok((meta, snapshots))
}
