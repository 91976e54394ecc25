//! RGB float images plus their on-disk forms: an 8-bit PNG preview and a lossless
//! planar float dump.
//!
//! Float dump layout (little-endian):
//!
//! | offset | size      | content                                   |
//! |--------|-----------|-------------------------------------------|
//! | 0      | 4         | magic `DSFD`                              |
//! | 4      | 4         | height `H` (u32)                          |
//! | 8      | 4         | width `W` (u32)                           |
//! | 12     | 4         | channels `C` (u32)                        |
//! | 16     | 4·C·H·W   | f32 planes, channel-major, each row-major |

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const FLOAT_DUMP_MAGIC: &[u8; 4] = b"DSFD";

/// Row-major RGB image with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height * 3] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Contract(format!("image data has {} values, expected {}", data.len(), width * height * 3)));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.data.len() == other.data.len()
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "image shape mismatch: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Contract("png buffer size mismatch".into()))?;
        buf.save(path).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write_float_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(FLOAT_DUMP_MAGIC)?;
        w.write_u32::<LittleEndian>(self.height as u32)?;
        w.write_u32::<LittleEndian>(self.width as u32)?;
        w.write_u32::<LittleEndian>(3)?;
        for c in 0..3 {
            for p in 0..self.pixels() {
                w.write_f32::<LittleEndian>(self.data[p * 3 + c] as f32)?;
            }
        }
        Ok(())
    }

    pub fn read_float_dump<R: Read>(mut r: R) -> std::io::Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FLOAT_DUMP_MAGIC {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "bad float dump magic"));
        }
        let h = r.read_u32::<LittleEndian>()? as usize;
        let w = r.read_u32::<LittleEndian>()? as usize;
        let c = r.read_u32::<LittleEndian>()? as usize;
        if c != 3 {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("expected 3 channels, got {c}")));
        }
        let mut img = Image::new(w, h);
        for ch in 0..3 {
            for p in 0..w * h {
                img.data[p * 3 + ch] = r.read_f32::<LittleEndian>()? as f64;
            }
        }
        Ok(img)
    }

    pub fn save_float_dump(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_float_dump(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load_float_dump(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_float_dump(std::io::BufReader::new(f)).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_dump_round_trip_and_layout() {
        let mut img = Image::new(3, 2);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f64 * 0.125;
        }
        let mut buf = Vec::new();
        img.write_float_dump(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DSFD");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 3);
        assert_eq!(buf.len(), 16 + 4 * 18);
        // second float is the red channel of pixel 1
        assert_eq!(f32::from_le_bytes(buf[20..24].try_into().unwrap()), 3.0 * 0.125);
        let back = Image::read_float_dump(&buf[..]).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn float_dump_rejects_bad_magic() {
        assert!(Image::read_float_dump(&b"XXXX\0\0\0\0"[..]).is_err());
    }
}
