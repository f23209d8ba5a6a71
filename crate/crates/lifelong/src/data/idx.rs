//! Readers and writers for the big-endian IDX container used by the
//! MNIST-family files: images carry magic 0x00000803 (unsigned byte, 3
//! dims), labels 0x00000801.

use std::fs;
use std::path::Path;

use diffcore::Tensor;

use crate::error::DataError;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// One split loaded from an image/label file pair: inputs scaled to [0, 1].
#[derive(Debug, Clone)]
pub struct DatasetPart {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &str) -> Result<u32, DataError> {
    if offset + 4 > bytes.len() {
        return Err(DataError::Truncated {
            path: path.to_string(),
            expected: offset + 4,
            got: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|e| DataError::Io { path: path.display().to_string(), message: e.to_string() })
}

/// Loads an image/label IDX pair into a [0, 1]-scaled dataset part.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetPart, DataError> {
    let img_bytes = read_file(images_path)?;
    let img_name = images_path.display().to_string();
    let magic = read_u32_be(&img_bytes, 0, &img_name)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DataError::BadMagic { path: img_name, expected: IDX_IMAGE_MAGIC, got: magic });
    }
    let count = read_u32_be(&img_bytes, 4, &img_name)? as usize;
    let rows = read_u32_be(&img_bytes, 8, &img_name)? as usize;
    let cols = read_u32_be(&img_bytes, 12, &img_name)? as usize;
    let expected = 16 + count * rows * cols;
    if img_bytes.len() < expected {
        return Err(DataError::Truncated { path: img_name, expected, got: img_bytes.len() });
    }

    let lab_bytes = read_file(labels_path)?;
    let lab_name = labels_path.display().to_string();
    let lab_magic = read_u32_be(&lab_bytes, 0, &lab_name)?;
    if lab_magic != IDX_LABEL_MAGIC {
        return Err(DataError::BadMagic { path: lab_name, expected: IDX_LABEL_MAGIC, got: lab_magic });
    }
    let lab_count = read_u32_be(&lab_bytes, 4, &lab_name)? as usize;
    if lab_bytes.len() < 8 + lab_count {
        return Err(DataError::Truncated {
            path: lab_name,
            expected: 8 + lab_count,
            got: lab_bytes.len(),
        });
    }
    if count != lab_count {
        return Err(DataError::CountMismatch { images: count, labels: lab_count });
    }

    let dim = rows * cols;
    let mut data = Vec::with_capacity(count * dim);
    for b in &img_bytes[16..16 + count * dim] {
        data.push(*b as f64 / 255.0);
    }
    let labels = lab_bytes[8..8 + lab_count].iter().map(|b| *b as usize).collect();
    Ok(DatasetPart { inputs: Tensor::new(vec![count, dim], data), labels, rows, cols })
}

/// Writes images in [0, 1] back to IDX bytes (values rounded to u8).
pub fn write_idx_images(path: &Path, inputs: &Tensor, rows: usize, cols: usize) -> Result<(), DataError> {
    let count = inputs.shape()[0];
    assert_eq!(inputs.shape()[1], rows * cols, "flat width must equal rows*cols");
    let mut bytes = Vec::with_capacity(16 + count * rows * cols);
    bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(count as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for v in inputs.data() {
        bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    fs::write(path, bytes)
        .map_err(|e| DataError::Io { path: path.display().to_string(), message: e.to_string() })
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for l in labels {
        assert!(*l <= u8::MAX as usize, "IDX labels are single bytes");
        bytes.push(*l as u8);
    }
    fs::write(path, bytes)
        .map_err(|e| DataError::Io { path: path.display().to_string(), message: e.to_string() })
}
