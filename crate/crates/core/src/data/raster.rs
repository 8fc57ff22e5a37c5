//! CXRS raster images and CXLB label maps.
//!
//! Both are little-endian. CXRS: magic, version 1, width, height, channels
//! (u32 each), dtype u8 (0 = u8, 1 = f32), 3 reserved zero bytes, planar
//! data. CXLB: magic, version 1, width, height, row-major u8 class ids.

use std::path::Path;

use crate::autodiff::IGNORE_INDEX;
use crate::binio::{put_u32, read_file, write_file, Reader};
use crate::error::{Error, Result};

const RASTER_MAGIC: &[u8; 4] = b"CXRS";
const LABEL_MAGIC: &[u8; 4] = b"CXLB";
const VERSION: u32 = 1;
pub const RASTER_HEADER_BYTES: usize = 24;
pub const LABEL_HEADER_BYTES: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub enum RasterData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl RasterData {
    pub fn len(&self) -> usize {
        match self {
            RasterData::U8(v) => v.len(),
            RasterData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value at `index` as a float in `[0, 1]`: u8 data is divided by 255,
    /// f32 data is taken as is.
    pub fn normalized(&self, index: usize) -> f32 {
        match self {
            RasterData::U8(v) => v[index] as f32 / 255.0,
            RasterData::F32(v) => v[index],
        }
    }
}

/// Planar, channel-major image.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: RasterData,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, data: RasterData) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 || data.len() != width * height * channels {
            return Err(Error::Data(format!(
                "{width}x{height}x{channels} raster needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RASTER_HEADER_BYTES + self.data.len() * 4);
        out.extend_from_slice(RASTER_MAGIC);
        for v in [VERSION, self.width as u32, self.height as u32, self.channels as u32] {
            put_u32(&mut out, v);
        }
        match &self.data {
            RasterData::U8(v) => {
                out.extend_from_slice(&[0, 0, 0, 0]);
                out.extend_from_slice(v);
            }
            RasterData::F32(v) => {
                out.extend_from_slice(&[1, 0, 0, 0]);
                v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.header(RASTER_MAGIC, VERSION)?;
        let (w, h, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let dtype = r.u8()?;
        r.take(3)?;
        let n = w
            .checked_mul(h)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| Error::Truncated(path.to_path_buf()))?;
        let data = match dtype {
            0 => RasterData::U8(r.take(n)?.to_vec()),
            1 => RasterData::F32(r.f32s(n)?),
            d => {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    detail: format!("unknown dtype {d}"),
                })
            }
        };
        r.finish()?;
        RasterImage::new(w, h, c, data).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

/// Row-major class ids; 255 marks ignored pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Data(format!(
                "{width}x{height} label map needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Fails if any label is neither a class id below `num_classes` nor the
    /// ignore index.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= num_classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, num_classes }),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(LABEL_HEADER_BYTES + self.data.len());
        out.extend_from_slice(LABEL_MAGIC);
        for v in [VERSION, self.width as u32, self.height as u32] {
            put_u32(&mut out, v);
        }
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.header(LABEL_MAGIC, VERSION)?;
        let (w, h) = (r.u32()? as usize, r.u32()? as usize);
        let n = w.checked_mul(h).ok_or_else(|| Error::Truncated(path.to_path_buf()))?;
        let data = r.take(n)?.to_vec();
        r.finish()?;
        LabelMap::new(w, h, data).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}
