//! IDX digit-corpus reader (big-endian header, unsigned-byte payload).

use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct DigitCorpus {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

fn read_u32(buf: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    let b = buf.get(offset..offset + 4).ok_or_else(|| Error::Parse {
        what,
        offset,
        reason: "unexpected end of file in header".into(),
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn check_magic(buf: &[u8], expected: u32, what: &'static str) -> Result<()> {
    let magic = read_u32(buf, 0, what)?;
    if magic != expected {
        return Err(Error::Parse {
            what,
            offset: 0,
            reason: format!("bad magic {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

fn payload<'a>(buf: &'a [u8], start: usize, len: usize, what: &'static str) -> Result<&'a [u8]> {
    if buf.len() < start + len {
        return Err(Error::Parse {
            what,
            offset: buf.len(),
            reason: format!("payload truncated: need {} bytes, have {}", len, buf.len() - start),
        });
    }
    if buf.len() > start + len {
        return Err(Error::Parse {
            what,
            offset: start + len,
            reason: format!("{} trailing bytes", buf.len() - start - len),
        });
    }
    Ok(&buf[start..])
}

/// Parses an image file, returning `(count, rows, cols, pixels)`.
pub fn parse_images(buf: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    const WHAT: &str = "idx image file";
    check_magic(buf, IMAGES_MAGIC, WHAT)?;
    let n = read_u32(buf, 4, WHAT)? as usize;
    let rows = read_u32(buf, 8, WHAT)? as usize;
    let cols = read_u32(buf, 12, WHAT)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Parse {
            what: WHAT,
            offset: 8,
            reason: format!("degenerate image size {rows}x{cols}"),
        });
    }
    let data = payload(buf, 16, n * rows * cols, WHAT)?;
    Ok((n, rows, cols, data.to_vec()))
}

pub fn parse_labels(buf: &[u8]) -> Result<Vec<u8>> {
    const WHAT: &str = "idx label file";
    check_magic(buf, LABELS_MAGIC, WHAT)?;
    let n = read_u32(buf, 4, WHAT)? as usize;
    let data = payload(buf, 8, n, WHAT)?;
    if let Some(pos) = data.iter().position(|&l| l > 9) {
        return Err(Error::Parse {
            what: WHAT,
            offset: 8 + pos,
            reason: format!("label {} out of range 0..=9", data[pos]),
        });
    }
    Ok(data.to_vec())
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

impl DigitCorpus {
    pub fn from_bytes(images: &[u8], labels: &[u8]) -> Result<Self> {
        let (n, rows, cols, pixels) = parse_images(images)?;
        let labels = parse_labels(labels)?;
        if labels.len() != n {
            return Err(Error::Parse {
                what: "idx label file",
                offset: 4,
                reason: format!("{} labels for {} images", labels.len(), n),
            });
        }
        if n == 0 {
            return Err(Error::Empty("digit corpus has no images".into()));
        }
        Ok(Self {
            rows,
            cols,
            pixels,
            labels,
        })
    }

    pub fn load(images: &Path, labels: &Path) -> Result<Self> {
        let a = std::fs::read(images).map_err(|e| Error::io(images, e))?;
        let b = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
        Self::from_bytes(&a, &b)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let s = self.rows * self.cols;
        &self.pixels[i * s..(i + 1) * s]
    }
}
