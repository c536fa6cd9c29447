//! Dense image and data rasters plus their binary file format.
//!
//! Files start with a 16-byte header: an 8-byte magic (`HCTVOL01` or
//! `HCTSIN01`), a little-endian `u32` format version and a reserved `u32`.
//! Three little-endian `u32` dimensions follow in layout order, then the
//! `f32` payload, row-major. Physical metadata lives in a JSON sidecar next
//! to the raster (`<path>.json`).

use crate::error::{Error, Result};
use crate::geometry::{HelicalGeometry, VolumeSpec};
use crate::real::Real;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

pub const VOLUME_MAGIC: &[u8; 8] = b"HCTVOL01";
pub const SINOGRAM_MAGIC: &[u8; 8] = b"HCTSIN01";
pub const FORMAT_VERSION: u32 = 1;

/// Image raster laid out as (slice, row, col).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    pub spec: VolumeSpec,
    pub data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn zeros(spec: VolumeSpec) -> Self {
        Volume { data: vec![T::zero(); spec.len()], spec }
    }

    pub fn from_data(spec: VolumeSpec, data: Vec<T>) -> Result<Self> {
        if data.len() != spec.len() {
            return Err(Error::ShapeMismatch(format!(
                "volume data has {} values, spec needs {}",
                data.len(),
                spec.len()
            )));
        }
        Ok(Volume { spec, data })
    }

    #[inline]
    pub fn index(&self, slice: usize, row: usize, col: usize) -> usize {
        (slice * self.spec.height + row) * self.spec.width + col
    }

    pub fn slice(&self, z: usize) -> &[T] {
        let n = self.spec.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn slices(&self, range: Range<usize>) -> &[T] {
        let n = self.spec.slice_len();
        &self.data[range.start * n..range.end * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume { spec: self.spec, data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    /// Copy of the slab `range`, with its own spec.
    pub fn crop_slices(&self, range: Range<usize>) -> Volume<T> {
        Volume { spec: self.spec.sub_slices(range.clone()), data: self.slices(range).to_vec() }
    }
}

/// Data raster laid out as (angle, row, col).
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram<T> {
    pub geometry_id: String,
    pub num_angles: usize,
    pub num_rows: usize,
    pub num_cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Sinogram<T> {
    pub fn zeros_for(geom: &HelicalGeometry) -> Self {
        Self::zeros(geom.id(), geom.num_angles(), geom.detector.num_rows, geom.detector.num_cols)
    }

    pub fn zeros(geometry_id: String, num_angles: usize, num_rows: usize, num_cols: usize) -> Self {
        Sinogram {
            geometry_id,
            num_angles,
            num_rows,
            num_cols,
            data: vec![T::zero(); num_angles * num_rows * num_cols],
        }
    }

    pub fn view_len(&self) -> usize {
        self.num_rows * self.num_cols
    }

    #[inline]
    pub fn index(&self, angle: usize, row: usize, col: usize) -> usize {
        (angle * self.num_rows + row) * self.num_cols + col
    }

    pub fn matches(&self, geom: &HelicalGeometry) -> bool {
        self.num_angles == geom.num_angles()
            && self.num_rows == geom.detector.num_rows
            && self.num_cols == geom.detector.num_cols
    }

    pub fn check(&self, geom: &HelicalGeometry) -> Result<()> {
        if !self.matches(geom) {
            return Err(Error::ShapeMismatch(format!(
                "sinogram {}x{}x{} does not match geometry {}x{}x{}",
                self.num_angles,
                self.num_rows,
                self.num_cols,
                geom.num_angles(),
                geom.detector.num_rows,
                geom.detector.num_cols
            )));
        }
        Ok(())
    }

    /// Views `range` as a new sinogram.
    pub fn crop_angles(&self, range: Range<usize>) -> Sinogram<T> {
        let v = self.view_len();
        Sinogram {
            geometry_id: self.geometry_id.clone(),
            num_angles: range.len(),
            num_rows: self.num_rows,
            num_cols: self.num_cols,
            data: self.data[range.start * v..range.end * v].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Sinogram<U> {
        Sinogram {
            geometry_id: self.geometry_id.clone(),
            num_angles: self.num_angles,
            num_rows: self.num_rows,
            num_cols: self.num_cols,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeSidecar {
    pub spec: VolumeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinogramSidecar {
    pub geometry_id: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn encode(magic: &[u8; 8], dims: [usize; 3], data: impl Iterator<Item = f32>) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(28 + 4 * dims.iter().product::<usize>());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<([usize; 3], Vec<f32>)> {
    if bytes.len() < 28 {
        return Err(Error::Format("file shorter than header".into()));
    }
    if &bytes[..8] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..8]),
            String::from_utf8_lossy(magic)
        )));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = word(8);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let dims = [word(16) as usize, word(20) as usize, word(24) as usize];
    let n: usize = dims.iter().product();
    let payload = &bytes[28..];
    if payload.len() != 4 * n {
        return Err(Error::Format(format!("payload has {} bytes, dims need {}", payload.len(), 4 * n)));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((dims, data))
}

/// Writes `bytes` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn encode_volume<T: Real>(vol: &Volume<T>) -> Result<Vec<u8>> {
    let s = &vol.spec;
    encode(VOLUME_MAGIC, [s.num_slices, s.height, s.width], vol.data.iter().map(|v| v.f64() as f32))
}

pub fn write_volume<T: Real>(path: &Path, vol: &Volume<T>, units: Option<&str>) -> Result<()> {
    write_atomic(path, &encode_volume(vol)?)?;
    let side = VolumeSidecar { spec: vol.spec, units: units.map(str::to_owned) };
    write_atomic(&sidecar_path(path), &serde_json::to_vec_pretty(&side)?)
}

pub fn read_volume(path: &Path) -> Result<Volume<f32>> {
    let (dims, data) = decode(VOLUME_MAGIC, &read_all(path)?)?;
    let side: VolumeSidecar = serde_json::from_slice(&read_all(&sidecar_path(path))?)?;
    let spec = side.spec;
    spec.validate()?;
    if dims != [spec.num_slices, spec.height, spec.width] {
        return Err(Error::Format(format!("raster dims {dims:?} disagree with sidecar spec")));
    }
    let vol = Volume::from_data(spec, data)?;
    if !vol.is_finite() {
        return Err(Error::NonFinite(format!("volume {}", path.display())));
    }
    Ok(vol)
}

pub fn encode_sinogram<T: Real>(sino: &Sinogram<T>) -> Result<Vec<u8>> {
    encode(
        SINOGRAM_MAGIC,
        [sino.num_angles, sino.num_rows, sino.num_cols],
        sino.data.iter().map(|v| v.f64() as f32),
    )
}

pub fn write_sinogram<T: Real>(path: &Path, sino: &Sinogram<T>) -> Result<()> {
    write_atomic(path, &encode_sinogram(sino)?)?;
    let side = SinogramSidecar { geometry_id: sino.geometry_id.clone() };
    write_atomic(&sidecar_path(path), &serde_json::to_vec_pretty(&side)?)
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram<f32>> {
    let ([a, r, c], data) = decode(SINOGRAM_MAGIC, &read_all(path)?)?;
    let side: SinogramSidecar = serde_json::from_slice(&read_all(&sidecar_path(path))?)?;
    let sino = Sinogram { geometry_id: side.geometry_id, num_angles: a, num_rows: r, num_cols: c, data };
    if !sino.is_finite() {
        return Err(Error::NonFinite(format!("sinogram {}", path.display())));
    }
    Ok(sino)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_all(path)?)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(value)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(w: usize, h: usize, n: usize) -> VolumeSpec {
        VolumeSpec { width: w, height: h, num_slices: n, voxel_size: [0.5, 0.5, 2.0], z_origin: -3.0 }
    }

    #[test]
    fn header_layout() {
        let v = Volume::<f32>::from_data(spec(2, 1, 1), vec![1.5, -2.0]).unwrap();
        let bytes = encode_volume(&v).unwrap();
        assert_eq!(&bytes[..8], b"HCTVOL01");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[28..32].try_into().unwrap()), 1.5);
        assert_eq!(bytes.len(), 36);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let s = Sinogram::<f32>::zeros("g".into(), 2, 1, 3);
        let bytes = encode_sinogram(&s).unwrap();
        assert!(decode(VOLUME_MAGIC, &bytes).is_err());
        assert!(decode(SINOGRAM_MAGIC, &bytes[..bytes.len() - 1]).is_err());
        assert!(decode(SINOGRAM_MAGIC, &bytes).is_ok());
    }

    #[test]
    fn files_round_trip() {
        let dir = std::env::temp_dir().join(format!("helix-vol-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let v = Volume::<f32>::from_data(spec(3, 2, 2), (0..12).map(|i| i as f32 * 0.25).collect()).unwrap();
        let p = dir.join("a.vol");
        write_volume(&p, &v, Some("mm^-1")).unwrap();
        assert_eq!(read_volume(&p).unwrap(), v);
        let mut s = Sinogram::<f32>::zeros("abc".into(), 2, 2, 2);
        s.data[3] = 7.0;
        let q = dir.join("a.sin");
        write_sinogram(&q, &s).unwrap();
        assert_eq!(read_sinogram(&q).unwrap(), s);
        fs::remove_dir_all(&dir).unwrap();
    }

    proptest! {
        #[test]
        fn payload_round_trips(vals in proptest::collection::vec(-1e6f32..1e6, 1..64)) {
            let n = vals.len();
            let v = Volume::from_data(spec(n, 1, 1), vals.clone()).unwrap();
            let (dims, data) = decode(VOLUME_MAGIC, &encode_volume(&v).unwrap()).unwrap();
            prop_assert_eq!(dims, [1, 1, n]);
            prop_assert_eq!(data, vals);
        }
    }
}
