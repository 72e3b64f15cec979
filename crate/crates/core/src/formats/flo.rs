//! Middlebury `.flo` files: `f32` magic 202021.25, `i32` width, `i32`
//! height, then interleaved `(u, v)` `f32` pairs, row-major, little-endian.

use std::path::Path;

use super::{read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: f32 = 202021.25;

/// Encodes batch item 0 of `flow`.
pub fn encode(flow: &FlowField) -> Vec<u8> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(12 + h * w * 8);
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for (u, v) in flow.u(0).iter().zip(flow.v(0)) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<FlowField> {
    let mut r = Reader::new(bytes, origin);
    let magic = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if magic != MAGIC {
        return Err(Error::format(
            origin,
            format!("bad magic {magic}, expected {MAGIC}"),
        ));
    }
    let (w, h) = (r.i32()?, r.i32()?);
    if w <= 0 || h <= 0 {
        return Err(Error::format(origin, format!("invalid extents {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let plane = w * h;
    if r.remaining() != plane * 8 {
        return Err(Error::format(
            origin,
            format!(
                "expected {} payload bytes, found {}",
                plane * 8,
                r.remaining()
            ),
        ));
    }
    let pairs = r.f32s(2 * plane)?;
    let mut data = vec![0.0f32; 2 * plane];
    for (i, uv) in pairs.chunks_exact(2).enumerate() {
        data[i] = uv[0];
        data[plane + i] = uv[1];
    }
    FlowField::new(Tensor::from_vec(Shape::new(1, 2, h, w), data)?)
}

pub fn write(path: &Path, flow: &FlowField) -> Result<()> {
    write_file(path, &encode(flow))
}

pub fn read(path: &Path) -> Result<FlowField> {
    decode(&read_file(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_bytes() {
        let flow = FlowField::uniform(1, 1, 1, 1.0, -2.0);
        let bytes = encode(&flow);
        let mut expected = Vec::new();
        expected.extend_from_slice(&[0x50, 0x49, 0x45, 0x48]); // "PIEH"
        expected.extend_from_slice(&1i32.to_le_bytes());
        expected.extend_from_slice(&1i32.to_le_bytes());
        expected.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f]);
        expected.extend_from_slice(&[0x00, 0x00, 0x00, 0xc0]);
        assert_eq!(bytes, expected);
        assert_eq!(bytes.len(), 20);
        assert_eq!(decode(&bytes, "mem").unwrap(), flow);
    }

    #[test]
    fn corrupt_magic_rejected() {
        let mut bytes = encode(&FlowField::zeros(1, 2, 2));
        bytes[3] ^= 0xff;
        assert!(matches!(decode(&bytes, "mem"), Err(Error::Format { .. })));
    }
}
