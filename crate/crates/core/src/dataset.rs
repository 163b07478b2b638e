//! The `RPAP` flat binary dataset container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "RPAP"
//! 4       1     version (1)
//! 5       1     task tag length L
//! 6       L     task tag (UTF-8)
//! 6+L     4     N   (u32, sample count)
//! 10+L    2     C   (u16, channels)
//! 12+L    2     H   (u16, rows)
//! 14+L    2     W   (u16, columns)
//! 16+L    4NCHW payload, f32 row-major [N, C, H, W]
//! ...     4     M   (u32, metadata length)
//! ...     M     metadata JSON (channel roles, grid spacing, aux table, provenance)
//! ...           aux arrays, f64, in metadata order, each N * len values
//! ```
//!
//! The fixed part before the payload is 16 bytes plus the tag.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, Grid2D};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"RPAP";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    /// Generated by the model.
    Data,
    /// Fed to the model as conditioning, never generated.
    Condition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelRole {
    pub name: String,
    pub kind: ChannelKind,
}

impl ChannelRole {
    pub fn data(name: &str) -> Self {
        Self {
            name: name.into(),
            kind: ChannelKind::Data,
        }
    }

    pub fn condition(name: &str) -> Self {
        Self {
            name: name.into(),
            kind: ChannelKind::Condition,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
}

/// Named per-sample auxiliary vector (loads, displacements, scalars).
#[derive(Clone, Debug, PartialEq)]
pub struct AuxArray {
    pub name: String,
    pub len: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetContainer {
    pub task: String,
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub h: f64,
    pub layout: Vec<ChannelRole>,
    pub payload: Vec<f32>,
    pub aux: Vec<AuxArray>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    h: f64,
    layout: Vec<ChannelRole>,
    aux: Vec<AuxEntry>,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct AuxEntry {
    name: String,
    len: usize,
}

impl DatasetContainer {
    pub fn new(
        task: &str,
        grid: Grid2D,
        layout: Vec<ChannelRole>,
        provenance: Provenance,
    ) -> Self {
        Self {
            task: task.into(),
            n: 0,
            channels: layout.len(),
            height: grid.n_y,
            width: grid.n_x,
            h: grid.h,
            layout,
            payload: Vec::new(),
            aux: Vec::new(),
            provenance,
        }
    }

    pub fn grid(&self) -> Grid2D {
        Grid2D {
            n_x: self.width,
            n_y: self.height,
            h: self.h,
        }
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn push_sample<T: Scalar>(&mut self, sample: &Field<T>) -> Result<()> {
        if sample.channels != self.channels
            || sample.grid.n_x != self.width
            || sample.grid.n_y != self.height
        {
            return Err(Error::Shape(format!(
                "sample is {}x{}x{}, container expects {}x{}x{}",
                sample.channels,
                sample.grid.n_y,
                sample.grid.n_x,
                self.channels,
                self.height,
                self.width
            )));
        }
        self.payload
            .extend(sample.values.iter().map(|v| v.to_f64_lossy() as f32));
        self.n += 1;
        Ok(())
    }

    /// Register an aux array; call before pushing any aux values.
    pub fn declare_aux(&mut self, name: &str, len: usize) {
        self.aux.push(AuxArray {
            name: name.into(),
            len,
            values: Vec::new(),
        });
    }

    pub fn push_aux(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let a = self
            .aux
            .iter_mut()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Argument(format!("aux array {name} not declared")))?;
        if values.len() != a.len {
            return Err(Error::Shape(format!(
                "aux {name} expects {} values, got {}",
                a.len,
                values.len()
            )));
        }
        a.values.extend_from_slice(values);
        Ok(())
    }

    pub fn aux(&self, name: &str, index: usize) -> Option<&[f64]> {
        let a = self.aux.iter().find(|a| a.name == name)?;
        a.values.get(index * a.len..(index + 1) * a.len)
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.layout.iter().position(|r| r.name == name)
    }

    pub fn sample<T: Scalar>(&self, index: usize) -> Field<T> {
        let len = self.sample_len();
        let values = self.payload[index * len..(index + 1) * len]
            .iter()
            .map(|&v| T::from_f32(v).unwrap())
            .collect();
        Field {
            grid: self.grid(),
            channels: self.channels,
            values,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.payload.len() != self.n * self.sample_len() {
            return Err(Error::Shape(format!(
                "payload has {} values, expected N*C*H*W = {}",
                self.payload.len(),
                self.n * self.sample_len()
            )));
        }
        if self.layout.len() != self.channels {
            return Err(Error::Shape(format!(
                "layout names {} channels, container has {}",
                self.layout.len(),
                self.channels
            )));
        }
        for a in &self.aux {
            if a.values.len() != self.n * a.len {
                return Err(Error::Shape(format!("aux array {} is incomplete", a.name)));
            }
        }
        if self.task.len() > u8::MAX as usize {
            return Err(Error::Argument("task tag longer than 255 bytes".into()));
        }
        if self.n > u32::MAX as usize
            || self.channels > u16::MAX as usize
            || self.height > u16::MAX as usize
            || self.width > u16::MAX as usize
        {
            return Err(Error::Argument("container dimensions exceed header limits".into()));
        }
        Ok(())
    }
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &DatasetContainer) -> Result<()> {
    let path = path.as_ref();
    ds.validate()?;
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut head = Vec::with_capacity(16 + ds.task.len());
    head.extend_from_slice(MAGIC);
    head.push(VERSION);
    head.push(ds.task.len() as u8);
    head.extend_from_slice(ds.task.as_bytes());
    head.extend_from_slice(&(ds.n as u32).to_le_bytes());
    head.extend_from_slice(&(ds.channels as u16).to_le_bytes());
    head.extend_from_slice(&(ds.height as u16).to_le_bytes());
    head.extend_from_slice(&(ds.width as u16).to_le_bytes());
    w.write_all(&head).map_err(io)?;
    write_f32s(&mut w, &ds.payload).map_err(io)?;

    let meta = Metadata {
        h: ds.h,
        layout: ds.layout.clone(),
        aux: ds
            .aux
            .iter()
            .map(|a| AuxEntry {
                name: a.name.clone(),
                len: a.len,
            })
            .collect(),
        provenance: ds.provenance.clone(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for a in &ds.aux {
        write_f64s(&mut w, &a.values).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

fn write_f32s(w: &mut impl Write, vals: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(4 * vals.len().min(1 << 20));
    for chunk in vals.chunks(1 << 20) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn write_f64s(w: &mut impl Write, vals: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(8 * vals.len());
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f64s(r: &mut impl Read, count: usize, what: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    read_exact_or_corrupt(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

fn read_exact_or_corrupt(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt(format!("truncated while reading {what}")),
        _ => Error::Corrupt(format!("{what}: {e}")),
    })
}

fn read_f32s(r: &mut impl Read, count: usize, what: &str) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    read_exact_or_corrupt(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<DatasetContainer> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("{} is too short to be an RPAP file", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}",
            path.display(),
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut b2 = [0u8; 2];
    read_exact_or_corrupt(&mut r, &mut b2, "header")?;
    if b2[0] != VERSION {
        return Err(Error::Format(format!("unsupported container version {}", b2[0])));
    }
    let mut tag = vec![0u8; b2[1] as usize];
    read_exact_or_corrupt(&mut r, &mut tag, "task tag")?;
    let task = String::from_utf8(tag).map_err(|_| Error::Format("task tag is not UTF-8".into()))?;
    let mut dims = [0u8; 10];
    read_exact_or_corrupt(&mut r, &mut dims, "dimensions")?;
    let n = u32::from_le_bytes([dims[0], dims[1], dims[2], dims[3]]) as usize;
    let channels = u16::from_le_bytes([dims[4], dims[5]]) as usize;
    let height = u16::from_le_bytes([dims[6], dims[7]]) as usize;
    let width = u16::from_le_bytes([dims[8], dims[9]]) as usize;
    let payload = read_f32s(&mut r, n * channels * height * width, "payload")?;

    let mut b4 = [0u8; 4];
    read_exact_or_corrupt(&mut r, &mut b4, "metadata length")?;
    let mut json = vec![0u8; u32::from_le_bytes(b4) as usize];
    read_exact_or_corrupt(&mut r, &mut json, "metadata")?;
    let meta: Metadata =
        serde_json::from_slice(&json).map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
    let mut aux = Vec::with_capacity(meta.aux.len());
    for entry in meta.aux {
        let values = read_f64s(&mut r, n * entry.len, &format!("aux array {}", entry.name))?;
        aux.push(AuxArray {
            name: entry.name,
            len: entry.len,
            values,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Corrupt("trailing bytes after aux arrays".into()));
    }
    let ds = DatasetContainer {
        task,
        n,
        channels,
        height,
        width,
        h: meta.h,
        layout: meta.layout,
        payload,
        aux,
        provenance: meta.provenance,
    };
    ds.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(n: usize, c: usize, hw: usize) -> DatasetContainer {
        let grid = Grid2D::new(hw, hw, 0.25).unwrap();
        let layout = (0..c).map(|k| ChannelRole::data(&format!("c{k}"))).collect();
        let mut ds = DatasetContainer::new("darcy", grid, layout, Provenance::default());
        for _ in 0..n {
            ds.push_sample(&Field::<f32>::zeros(grid, c)).unwrap();
        }
        ds
    }

    #[test]
    fn file_size_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.rpap");
        let ds = tiny(1, 2, 4);
        write_dataset(&path, &ds).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let payload_start = 16 + ds.task.len();
        assert_eq!(&bytes[..4], b"RPAP");
        let meta_len = u32::from_le_bytes(
            bytes[payload_start + 128..payload_start + 132].try_into().unwrap(),
        ) as usize;
        assert_eq!(bytes.len(), 16 + ds.task.len() + 128 + 4 + meta_len);
        assert!(bytes[payload_start..payload_start + 128].iter().all(|&b| b == 0));
    }

    #[test]
    fn charge_payload_size() {
        let bytes: u64 = 200_000 * 2 * 64 * 64 * 4;
        assert_eq!(bytes, 6_553_600_000);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rpap");
        write_dataset(&path, &tiny(1, 2, 4)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_corruption_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.rpap");
        let mut ds = tiny(3, 2, 4);
        ds.declare_aux("scalar", 1);
        for k in 0..3 {
            ds.push_aux("scalar", &[k as f64]).unwrap();
        }
        write_dataset(&path, &ds).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Cut one byte out of the payload itself.
        let cut = 16 + ds.task.len() + 50;
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Corrupt(_))));
        // And one byte off the end.
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Corrupt(_))));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_dataset("/nonexistent/x.rpap").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.rpap"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip_is_bit_exact(vals in prop::collection::vec(any::<f32>(), 2 * 3 * 9), aux in prop::collection::vec(-1e6f64..1e6, 4), seed in any::<u64>()) {
            let grid = Grid2D::new(3, 3, 0.5).unwrap();
            let mut ds = DatasetContainer::new(
                "charge",
                grid,
                vec![ChannelRole::condition("rho"), ChannelRole::data("U"), ChannelRole::data("x")],
                Provenance { generator: "test".into(), seed, params: Default::default() },
            );
            ds.declare_aux("pair", 2);
            for s in 0..2 {
                let f = Field::from_vec(grid, 3, vals[s * 27..(s + 1) * 27].to_vec()).unwrap();
                ds.push_sample(&f).unwrap();
                ds.push_aux("pair", &aux[s * 2..s * 2 + 2]).unwrap();
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.rpap");
            write_dataset(&path, &ds).unwrap();
            let back = read_dataset(&path).unwrap();
            prop_assert_eq!(back.payload.len(), ds.payload.len());
            for (a, b) in back.payload.iter().zip(&ds.payload) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(&back.layout, &ds.layout);
            prop_assert_eq!(&back.provenance, &ds.provenance);
            prop_assert_eq!(back.aux[0].values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            ds.aux[0].values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
