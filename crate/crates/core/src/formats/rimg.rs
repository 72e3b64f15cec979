//! `RIMG` range-image files: magic, `u32` height, `u32` width, then
//! `height * width` little-endian `f32` ranges in meters, row-major.

use std::path::Path;

use super::{put_f32s, read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::projection::RangeImage;

pub const MAGIC: &[u8; 4] = b"RIMG";

pub fn encode(img: &RangeImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + img.ranges().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(img.height() as u32).to_le_bytes());
    out.extend_from_slice(&(img.width() as u32).to_le_bytes());
    put_f32s(&mut out, img.ranges());
    out
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<RangeImage> {
    let mut r = Reader::new(bytes, origin);
    if r.take(4)? != MAGIC {
        return Err(Error::format(origin, "bad magic, expected RIMG"));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n = h
        .checked_mul(w)
        .ok_or_else(|| Error::format(origin, "image extents overflow"))?;
    if r.remaining() != n * 4 {
        return Err(Error::format(
            origin,
            format!(
                "expected {} payload bytes for {h}x{w}, found {}",
                n * 4,
                r.remaining()
            ),
        ));
    }
    let ranges = r.f32s(n)?;
    RangeImage::from_ranges(h, w, ranges).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn write(path: &Path, img: &RangeImage) -> Result<()> {
    write_file(path, &encode(img))
}

pub fn read(path: &Path) -> Result<RangeImage> {
    decode(&read_file(path)?, &path.display().to_string())
}
