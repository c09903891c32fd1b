//! Reader for the big-endian IDX container used by the MNIST distribution.

use std::path::Path;

use crate::error::{Error, IdxError, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw `count × rows × cols` pixel payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn pixel_dim(&self) -> usize {
        self.rows * self.cols
    }

    /// Pixel `i` of image `n`, mapped to [0, 1].
    pub fn normalized(&self, n: usize, i: usize) -> f64 {
        f64::from(self.pixels[n * self.pixel_dim() + i]) / 255.0
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn header(bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>, IdxError> {
    let needed = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(IdxError::TruncatedHeader {
            needed,
            available: bytes.len(),
        });
    }
    let found = read_u32(bytes, 0);
    if found != magic {
        return Err(IdxError::BadMagic { expected: magic, found });
    }
    if bytes.len() < needed {
        return Err(IdxError::TruncatedHeader {
            needed,
            available: bytes.len(),
        });
    }
    Ok((0..dims).map(|d| read_u32(bytes, 4 + 4 * d) as usize).collect())
}

fn payload(bytes: &[u8], offset: usize, expected: usize, item: usize) -> Result<&[u8], IdxError> {
    let found = bytes.len() - offset;
    if found < expected {
        return Err(IdxError::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(IdxError::CountMismatch {
            declared: expected / item.max(1),
            actual: found / item.max(1),
        });
    }
    Ok(&bytes[offset..])
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    let dims = header(bytes, IMAGE_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let item = rows * cols;
    let pixels = payload(bytes, 16, count * item, item)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

/// Labels must fall in `[0, classes)`.
pub fn parse_labels(bytes: &[u8], classes: usize) -> Result<Vec<u8>, IdxError> {
    let dims = header(bytes, LABEL_MAGIC, 1)?;
    let labels = payload(bytes, 8, dims[0], 1)?;
    if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &v)| usize::from(v) >= classes) {
        return Err(IdxError::LabelOutOfRange { index, value, classes });
    }
    Ok(labels.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    parse_images(&read(path)?).map_err(|source| Error::Idx {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    parse_labels(&read(path)?, 10).map_err(|source| Error::Idx {
        path: path.to_path_buf(),
        source,
    })
}

/// Encodes an image container. Used for fixtures and tests.
pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> IdxImages {
        IdxImages {
            count: 2,
            rows: 2,
            cols: 3,
            pixels: vec![0, 255, 10, 20, 30, 40, 1, 2, 3, 4, 5, 6],
        }
    }

    #[test]
    fn image_header_constant() {
        let bytes = encode_images(&tiny());
        assert_eq!(&bytes[..4], &[0x00, 0x00, 0x08, 0x03]);
        let parsed = parse_images(&bytes).unwrap();
        assert_eq!(parsed, tiny());
        assert_eq!(parsed.normalized(0, 1), 1.0);
    }

    #[test]
    fn label_header_constant() {
        let bytes = encode_labels(&[9, 0, 3]);
        assert_eq!(&bytes[..4], &[0x00, 0x00, 0x08, 0x01]);
        assert_eq!(parse_labels(&bytes, 10).unwrap(), vec![9, 0, 3]);
    }

    #[test]
    fn label_out_of_range() {
        let bytes = encode_labels(&[1, 10]);
        assert_eq!(
            parse_labels(&bytes, 10),
            Err(IdxError::LabelOutOfRange {
                index: 1,
                value: 10,
                classes: 10
            })
        );
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_images(&tiny());
        bytes[3] = 0x01;
        assert!(matches!(
            parse_images(&bytes),
            Err(IdxError::BadMagic { found: 0x801, .. })
        ));
        // a label file offered as images
        assert!(matches!(
            parse_images(&encode_labels(&[1])),
            Err(IdxError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_mid_pixel() {
        let bytes = encode_images(&tiny());
        let err = parse_images(&bytes[..bytes.len() - 5]).unwrap_err();
        assert_eq!(err, IdxError::TruncatedPayload { expected: 12, found: 7 });
        assert!(err.to_string().contains("truncated payload"));
    }

    #[test]
    fn truncated_header() {
        let bytes = encode_images(&tiny());
        assert!(matches!(
            parse_images(&bytes[..10]),
            Err(IdxError::TruncatedHeader { .. })
        ));
        assert!(matches!(
            parse_labels(&bytes[..2], 10),
            Err(IdxError::TruncatedHeader { .. })
        ));
    }

    #[test]
    fn trailing_bytes_are_a_count_mismatch() {
        let mut bytes = encode_labels(&[1, 2]);
        bytes.push(3);
        assert_eq!(
            parse_labels(&bytes, 10),
            Err(IdxError::CountMismatch { declared: 2, actual: 3 })
        );
    }
}
