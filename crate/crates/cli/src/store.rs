//! Content-addressed volume store (id = SHA-256 of the `.vgan` payload) and
//! 8-bit PNG slice rendering.

use std::fs;
use std::io::{self, Cursor};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use voxgan::volume::{decode_volume, encode_volume, FILE_EXTENSION};
use voxgan::Volume;

#[derive(Clone, Debug)]
pub struct VolumeStore {
    dir: PathBuf,
}

/// Hex SHA-256 of a payload.
pub fn content_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn valid_id(id: &str) -> bool {
    id.len() == 64 && id.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

impl VolumeStore {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> Option<PathBuf> {
        valid_id(id).then(|| self.dir.join(format!("{id}.{FILE_EXTENSION}")))
    }

    /// Persist `v` and return its id; storing identical content twice is a no-op.
    pub fn put(&self, v: &Volume, provenance: &str) -> io::Result<String> {
        self.put_bytes(&encode_volume(v, provenance))
    }

    pub fn put_bytes(&self, bytes: &[u8]) -> io::Result<String> {
        let id = content_id(bytes);
        let path = self.path(&id).expect("hex digest is a valid id");
        if !path.exists() {
            let tmp = self.dir.join(format!(".{id}.{}.tmp", std::process::id()));
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &path)?;
        }
        Ok(id)
    }

    pub fn get_bytes(&self, id: &str) -> Option<Vec<u8>> {
        fs::read(self.path(id)?).ok()
    }

    pub fn get(&self, id: &str) -> Option<Volume> {
        decode_volume(&self.get_bytes(id)?).ok().map(|(v, _)| v)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Plane of constant depth index (first axis).
    #[default]
    Axial,
    /// Plane of constant row index (second axis).
    Coronal,
    /// Plane of constant column index (third axis).
    Sagittal,
}

impl Axis {
    pub fn extent(self, shape: [usize; 3]) -> usize {
        match self {
            Axis::Axial => shape[0],
            Axis::Coronal => shape[1],
            Axis::Sagittal => shape[2],
        }
    }
}

/// Intensity `v` to an 8-bit gray level: 0.0 -> 0, 1.0 -> 255, clamped.
pub fn gray_level(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Row-major gray levels and `(width, height)` of one slice, or `None` when
/// `index` is out of range.
pub fn slice_pixels(v: &Volume, axis: Axis, index: usize) -> Option<(Vec<u8>, u32, u32)> {
    let [d, h, w] = v.shape();
    if index >= axis.extent(v.shape()) {
        return None;
    }
    let (rows, cols) = match axis {
        Axis::Axial => (h, w),
        Axis::Coronal => (d, w),
        Axis::Sagittal => (d, h),
    };
    let mut px = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let val = match axis {
                Axis::Axial => v.get(index, r, c),
                Axis::Coronal => v.get(r, index, c),
                Axis::Sagittal => v.get(r, c, index),
            };
            px.push(gray_level(val));
        }
    }
    Some((px, cols as u32, rows as u32))
}

/// PNG-encoded slice, or `None` when `index` is out of range.
pub fn render_slice(v: &Volume, axis: Axis, index: usize) -> Option<Vec<u8>> {
    let (px, w, h) = slice_pixels(v, axis, index)?;
    let img = GrayImage::from_raw(w, h, px).expect("buffer matches dimensions");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    Some(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Volume {
        Volume::from_fn([2, 3, 4], |z, y, x| (z * 12 + y * 4 + x) as f32 / 23.0)
    }

    #[test]
    fn store_is_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let s = VolumeStore::open(dir.path()).unwrap();
        let v = ramp();
        let a = s.put(&v, "x").unwrap();
        assert_eq!(a, s.put(&v, "x").unwrap());
        assert_ne!(a, s.put(&v, "y").unwrap());
        assert_eq!(s.get(&a).unwrap(), v);
        assert!(s.get("../etc/passwd").is_none());
        assert!(s.get(&"0".repeat(64)).is_none());
    }

    #[test]
    fn gray_mapping_is_linear_and_clamped() {
        assert_eq!(gray_level(0.0), 0);
        assert_eq!(gray_level(1.0), 255);
        assert_eq!(gray_level(0.5), 128);
        assert_eq!(gray_level(-3.0), 0);
        assert_eq!(gray_level(7.0), 255);
    }

    #[test]
    fn slices_pick_the_right_planes() {
        let v = ramp();
        let (px, w, h) = slice_pixels(&v, Axis::Axial, 1).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(px[0], gray_level(v.get(1, 0, 0)));
        let (px, w, h) = slice_pixels(&v, Axis::Sagittal, 3).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(px[w as usize + 2], gray_level(v.get(1, 2, 3)));
        assert!(slice_pixels(&v, Axis::Coronal, 3).is_none());
        let png = render_slice(&v, Axis::Coronal, 0).unwrap();
        assert_eq!(&png[1..4], b"PNG");
    }
}
