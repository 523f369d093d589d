//! IDX files: two zero bytes, a type code (0x08 = unsigned byte), a
//! dimension count, big-endian `u32` sizes, then the payload.

use std::path::Path;

use super::data::{Dataset, Split};
use crate::error::{argument, Error, Result};
use crate::numcore::Tensor;

pub const TYPE_UBYTE: u8 = 0x08;
/// Images: unsigned bytes, three dimensions (count, rows, columns).
pub const IMAGES_MAGIC: u32 = 0x0000_0803;
/// Labels: unsigned bytes, one dimension.
pub const LABELS_MAGIC: u32 = 0x0000_0801;
/// Class count assumed unless a label exceeds it.
pub const DEFAULT_CLASSES: usize = 10;

struct IdxFile {
    dims: Vec<usize>,
    payload_offset: usize,
    bytes: Vec<u8>,
}

fn parse(bytes: Vec<u8>, expected_dims: u8) -> Result<IdxFile> {
    if bytes.len() < 4 {
        return Err(Error::Format {
            offset: 0,
            message: format!("file of {} bytes has no magic word", bytes.len()),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format {
            offset: 0,
            message: "magic word must start with two zero bytes".into(),
        });
    }
    if bytes[2] != TYPE_UBYTE {
        return Err(Error::Format {
            offset: 2,
            message: format!("unsupported element type 0x{:02x}", bytes[2]),
        });
    }
    if bytes[3] != expected_dims {
        return Err(Error::Format {
            offset: 3,
            message: format!("expected {expected_dims} dimensions, found {}", bytes[3]),
        });
    }
    let header = 4 + 4 * expected_dims as usize;
    if bytes.len() < header {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: "truncated dimension header".into(),
        });
    }
    let dims: Vec<usize> = (0..expected_dims as usize)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let payload: usize = dims.iter().product();
    if bytes.len() - header < payload {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!(
                "truncated payload: {} of {payload} bytes present",
                bytes.len() - header
            ),
        });
    }
    Ok(IdxFile {
        dims,
        payload_offset: header,
        bytes,
    })
}

/// Load an image/label IDX pair, scaling pixels to `[0, 1]` and keeping at
/// most `limit` examples.
pub fn load_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    limit: usize,
    split: Split,
) -> Result<Dataset> {
    if limit == 0 {
        return Err(argument("IDX limit of 0 yields an empty dataset"));
    }
    let img = parse(std::fs::read(images)?, 3)?;
    let lab = parse(std::fs::read(labels)?, 1)?;
    if img.dims[0] != lab.dims[0] {
        return Err(Error::Format {
            offset: 4,
            message: format!("{} images but {} labels", img.dims[0], lab.dims[0]),
        });
    }
    let n = img.dims[0].min(limit);
    if n == 0 {
        return Err(argument("IDX files contain no examples"));
    }
    let d = img.dims[1] * img.dims[2];
    let pixels: Vec<f32> = img.bytes[img.payload_offset..img.payload_offset + n * d]
        .iter()
        .map(|&b| f32::from(b) / 255.0)
        .collect();
    let ys: Vec<usize> = lab.bytes[lab.payload_offset..lab.payload_offset + n]
        .iter()
        .map(|&b| b as usize)
        .collect();
    let classes = ys
        .iter()
        .map(|&y| y + 1)
        .max()
        .unwrap_or(0)
        .max(DEFAULT_CLASSES);
    Dataset::new(
        Tensor::new(vec![n, d], pixels)?,
        ys,
        classes,
        split,
        0.0,
        1.0,
    )
}

/// Encode unsigned-byte images (`count × rows × cols`) as IDX.
pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len() % (rows * cols), 0);
    let count = pixels.len() / (rows * cols);
    let mut out = IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [count, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pair(dir: &Path, img: &[u8], lab: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let (a, b) = (dir.join("img.idx"), dir.join("lab.idx"));
        std::fs::write(&a, img).unwrap();
        std::fs::write(&b, lab).unwrap();
        (a, b)
    }

    #[test]
    fn magic_words_decode_to_ubyte_codes() {
        let m = IMAGES_MAGIC.to_be_bytes();
        assert_eq!(m, [0, 0, 0x08, 3]);
        assert_eq!(LABELS_MAGIC.to_be_bytes(), [0, 0, 0x08, 1]);
    }

    #[test]
    fn round_trip_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..3 * 2 * 2).map(|i| (i * 21) as u8).collect();
        let (a, b) = write_pair(
            dir.path(),
            &encode_images(2, 2, &pixels),
            &encode_labels(&[3, 1, 4]),
        );
        let ds = load_idx(&a, &b, 100, Split::Train).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.labels, vec![3, 1, 4]);
        let back: Vec<u8> = ds
            .features
            .data()
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect();
        assert_eq!(back, pixels);

        let ds = load_idx(&a, &b, 2, Split::Test).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(matches!(
            load_idx(&a, &b, 0, Split::Train),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn malformed_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let pixels = [0u8; 8];
        let labels = encode_labels(&[0, 1]);

        let mut bad = encode_images(2, 2, &pixels);
        bad[2] = 0x09;
        let (a, b) = write_pair(dir.path(), &bad, &labels);
        assert!(matches!(
            load_idx(&a, &b, 10, Split::Train),
            Err(Error::Format { offset: 2, .. })
        ));

        let good = encode_images(2, 2, &pixels);
        let (a, b) = write_pair(dir.path(), &good[..good.len() - 1], &labels);
        assert!(matches!(
            load_idx(&a, &b, 10, Split::Train),
            Err(Error::Format { .. })
        ));

        let (a, b) = write_pair(dir.path(), &good, &encode_labels(&[0, 1, 2]));
        let err = load_idx(&a, &b, 10, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 4, .. }), "{err}");
    }
}
