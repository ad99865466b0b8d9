//! Volumes, annotations, patch sampling and synthetic phantoms.

mod patch;
mod phantom;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use patch::{
    apply_augmentation, augment, crop, extract_train_patch, preprocess, tile_origins,
    tile_test_patches, Augmentation, CropConfig, PatchSample, HU_MAX, HU_MIN,
};
pub use phantom::{generate_phantom, threshold_baseline, PhantomConfig, BACKGROUND_HU, NODULE_HU};

/// Smallest accepted extent along any axis.
pub const MIN_DIM: usize = 8;

const VOL_MAGIC: &[u8; 4] = b"VOL3";
const VOL_VERSION: u16 = 1;

/// A scan of pseudo-HU values with `dims = [X, Y, Z]`, stored at
/// `(z·Y + y)·X + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub scan_id: String,
    dims: [usize; 3],
    data: Vec<f32>,
    mask: Option<Vec<u8>>,
}

impl Volume {
    pub fn new(scan_id: impl Into<String>, dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d < MIN_DIM) {
            return Err(Error::Invalid(format!("volume dims {dims:?} below {MIN_DIM}")));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!("{} values for dims {dims:?}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "volume" });
        }
        Ok(Volume { scan_id: scan_id.into(), dims, data, mask: None })
    }

    /// Attaches a lung mask (non-zero = inside).
    pub fn with_mask(mut self, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != self.data.len() {
            return Err(Error::shape(format!("mask of {} values for dims {:?}", mask.len(), self.dims)));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn mask(&self) -> Option<&[u8]> {
        self.mask.as_deref()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub(crate) fn map_values(&self, mut f: impl FnMut(usize, f32) -> f32) -> Volume {
        Volume {
            scan_id: self.scan_id.clone(),
            dims: self.dims,
            data: self.data.iter().enumerate().map(|(i, &v)| f(i, v)).collect(),
            mask: self.mask.clone(),
        }
    }
}

/// Ground-truth nodule in voxel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleAnnotation {
    pub scan_id: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub diameter: f64,
}

impl NoduleAnnotation {
    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if !(self.diameter > 0.0) {
            return Err(Error::Invalid(format!("{}: diameter {} must be positive", self.scan_id, self.diameter)));
        }
        for (c, d) in self.center().into_iter().zip(dims) {
            if !(c >= 0.0 && c < d as f64) {
                return Err(Error::Invalid(format!("{}: center {:?} outside {dims:?}", self.scan_id, self.center())));
            }
        }
        Ok(())
    }
}

fn write_header(w: &mut impl Write, dims: [usize; 3]) -> std::io::Result<()> {
    w.write_all(VOL_MAGIC)?;
    w.write_all(&VOL_VERSION.to_le_bytes())?;
    for d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    Ok(())
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<[usize; 3]> {
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != VOL_MAGIC {
        return Err(Error::Format { what: path.display().to_string(), detail: "missing VOL3 magic".into() });
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v).map_err(io)?;
    let version = u16::from_le_bytes(v);
    if version != VOL_VERSION {
        return Err(Error::Format { what: path.display().to_string(), detail: format!("unsupported version {version}") });
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(io)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    Ok(dims)
}

fn read_payload(r: &mut impl Read, path: &Path, bytes: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; bytes];
    r.read_exact(&mut buf).map_err(|e| Error::Format {
        what: path.display().to_string(),
        detail: format!("truncated payload: {e}"),
    })?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Format { what: path.display().to_string(), detail: "trailing bytes".into() });
    }
    Ok(buf)
}

/// Writes the value payload (the mask, if any, goes to its own file).
pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let res = (|| {
        write_header(&mut w, volume.dims)?;
        for v in &volume.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Reads a volume; the scan id is the file stem.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let dims = read_header(&mut r, path)?;
    let n: usize = dims.iter().product();
    let raw = read_payload(&mut r, path, n * 4)?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Volume::new(id, dims, data).map_err(|e| match e {
        Error::Io { .. } => e,
        other => Error::Format { what: path.display().to_string(), detail: other.to_string() },
    })
}

pub fn write_mask(path: &Path, dims: [usize; 3], mask: &[u8]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let res = (|| {
        write_header(&mut w, dims)?;
        w.write_all(mask)?;
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: &Path) -> Result<([usize; 3], Vec<u8>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let dims = read_header(&mut r, path)?;
    let n: usize = dims.iter().product();
    Ok((dims, read_payload(&mut r, path, n)?))
}

/// Reads `scan_id,x,y,z,diameter` rows.
pub fn read_annotations(path: &Path) -> Result<Vec<NoduleAnnotation>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let a: NoduleAnnotation = row?;
        if !(a.diameter > 0.0) {
            return Err(Error::Invalid(format!("{}: diameter {} must be positive", a.scan_id, a.diameter)));
        }
        out.push(a);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, annotations: &[NoduleAnnotation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    if annotations.is_empty() {
        w.write_record(["scan_id", "x", "y", "z", "diameter"])?;
    }
    for a in annotations {
        w.serialize(a)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Format { what: path.display().to_string(), detail: format!("{kind:?}") },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let dims = [9, 10, 11];
        let data: Vec<f32> = (0..990).map(|i| i as f32 * 0.37 - 120.5).collect();
        let v = Volume::new("scan", dims, data).unwrap();
        let p = dir.path().join("scan.vol3");
        write_volume(&p, &v).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.get(2, 3, 4), v.data()[(4 * 10 + 3) * 9 + 2]);

        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"VOL3");
        assert_eq!(bytes.len(), 4 + 2 + 12 + 990 * 4);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.vol3");
        std::fs::write(&p, b"NOPE\x01\x00").unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Format { .. })));
        let v = Volume::new("s", [8, 8, 8], vec![0.0; 512]).unwrap();
        write_volume(&p, &v).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Format { .. })));
        assert!(matches!(read_volume(&dir.path().join("missing.vol3")), Err(Error::Io { .. })));
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.vol3");
        let mask: Vec<u8> = (0..512).map(|i| (i % 3 == 0) as u8).collect();
        write_mask(&p, [8, 8, 8], &mask).unwrap();
        assert_eq!(read_mask(&p).unwrap(), ([8, 8, 8], mask));
    }

    #[test]
    fn annotations_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let anns = vec![
            NoduleAnnotation { scan_id: "a".into(), x: 1.5, y: 2.0, z: 3.25, diameter: 8.0 },
            NoduleAnnotation { scan_id: "b".into(), x: 10.0, y: 20.0, z: 30.0, diameter: 4.5 },
        ];
        write_annotations(&p, &anns).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("scan_id,x,y,z,diameter\n"));
        assert_eq!(read_annotations(&p).unwrap(), anns);
    }

    #[test]
    fn rejects_small_or_nonfinite_volumes() {
        assert!(Volume::new("s", [7, 8, 8], vec![0.0; 448]).is_err());
        let mut d = vec![0.0; 512];
        d[3] = f32::NAN;
        assert!(Volume::new("s", [8, 8, 8], d).is_err());
    }
}
