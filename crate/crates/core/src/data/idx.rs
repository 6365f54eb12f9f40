//! IDX files as used by the MNIST distribution: big-endian magic and
//! dimension sizes followed by raw `u8` payload.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// A 3-D `u8` image tensor `(count, rows, cols)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [images.count, images.rows, images.cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read_u32(cur: &mut Cursor<&[u8]>, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    cur.read_exact(&mut buf).map_err(|e| Error::from_read(what, e))?;
    Ok(u32::from_be_bytes(buf))
}

fn check_magic(cur: &mut Cursor<&[u8]>, what: &str, expected: u32) -> Result<()> {
    let magic = read_u32(cur, what)?;
    if magic != expected {
        return Err(Error::format(
            what,
            format!("magic 0x{expected:08X}"),
            format!("0x{magic:08X}"),
        ));
    }
    Ok(())
}

fn read_payload(cur: &mut Cursor<&[u8]>, what: &str, len: usize) -> Result<Vec<u8>> {
    let mut payload = vec![0u8; len];
    cur.read_exact(&mut payload).map_err(|e| Error::from_read(what, e))?;
    let pos = cur.position() as usize;
    if pos != cur.get_ref().len() {
        return Err(Error::format(
            what,
            format!("{pos} bytes"),
            format!("{} bytes (trailing data)", cur.get_ref().len()),
        ));
    }
    Ok(payload)
}

pub fn decode_images(bytes: &[u8]) -> Result<IdxImages> {
    let what = "IDX image file";
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, what, IMAGES_MAGIC)?;
    let count = read_u32(&mut cur, what)? as usize;
    let rows = read_u32(&mut cur, what)? as usize;
    let cols = read_u32(&mut cur, what)? as usize;
    let pixels = read_payload(&mut cur, what, count * rows * cols)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let what = "IDX label file";
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, what, LABELS_MAGIC)?;
    let count = read_u32(&mut cur, what)? as usize;
    read_payload(&mut cur, what, count)
}

pub fn write_images(path: &Path, images: &IdxImages) -> Result<()> {
    fs::write(path, encode_images(images))?;
    Ok(())
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<()> {
    fs::write(path, encode_labels(labels))?;
    Ok(())
}

pub fn read_images(path: &Path) -> Result<IdxImages> {
    decode_images(&fs::read(path)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    decode_labels(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn magic_bytes() {
        let img = IdxImages {
            count: 1,
            rows: 2,
            cols: 2,
            pixels: vec![0, 1, 2, 3],
        };
        assert_eq!(&encode_images(&img)[..4], &[0, 0, 8, 3]);
        assert_eq!(&encode_labels(&[1, 2])[..4], &[0, 0, 8, 1]);
    }

    #[test]
    fn wrong_magic_named() {
        let labels = encode_labels(&[1, 2, 3]);
        let err = decode_images(&labels).unwrap_err().to_string();
        assert!(err.contains("0x00000803") && err.contains("0x00000801"), "{err}");
    }

    #[test]
    fn truncated_is_error() {
        let bytes = encode_labels(&[1, 2, 3]);
        let err = decode_labels(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    proptest! {
        #[test]
        fn round_trip(count in 1usize..5, rows in 1usize..6, cols in 1usize..6, seed in any::<u8>()) {
            let pixels: Vec<u8> = (0..count * rows * cols).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let img = IdxImages { count, rows, cols, pixels };
            let bytes = encode_images(&img);
            let back = decode_images(&bytes).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(encode_images(&back), bytes);

            let labels: Vec<u8> = (0..count as u8).collect();
            prop_assert_eq!(decode_labels(&encode_labels(&labels)).unwrap(), labels);
        }
    }
}
