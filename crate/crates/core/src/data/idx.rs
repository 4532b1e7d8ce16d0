use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magic number of a rank-3 unsigned-byte IDX file (`N × H × W` images).
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Magic number of a rank-1 unsigned-byte IDX file (labels).
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

fn parse<'a>(bytes: &'a [u8], magic: u32, what: &str) -> Result<(Vec<usize>, &'a [u8])> {
    let found = read_u32(bytes, 0, what)?;
    if found != magic {
        return Err(Error::Format(format!(
            "{what}: bad magic {found:#010x}, expected {magic:#010x}"
        )));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|i| read_u32(bytes, 4 + 4 * i, what).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() < len {
        return Err(Error::Format(format!(
            "{what}: truncated payload, {} of {len} bytes",
            payload.len()
        )));
    }
    Ok((dims, &payload[..len]))
}

/// Parses an image file into `[N, 1, H, W]` values scaled to `[0, 1]`.
pub fn read_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (dims, payload) = parse(bytes, IDX_IMAGES_MAGIC, "images")?;
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(&[dims[0], 1, dims[1], dims[2]], data)
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, payload) = parse(bytes, IDX_LABELS_MAGIC, "labels")?;
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Loads a pair of IDX files. Classes are named `0..=max_label`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_idx_images(&fs::read(ip).map_err(|e| Error::io(ip, e))?)?;
    let labels = read_idx_labels(&fs::read(lp).map_err(|e| Error::io(lp, e))?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Format(format!(
            "{} holds {} images but {} holds {} labels",
            ip.display(),
            images.shape()[0],
            lp.display(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{} contains no images", ip.display())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(images, labels, (0..classes).map(|c| c.to_string()).collect())
}

/// Writes a single-channel dataset as an IDX image/label pair, quantizing
/// pixels to `round(255·v)`.
pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (c, h, w) = ds.sample_shape();
    if c != 1 {
        return Err(Error::Usage(format!("IDX export needs one channel, dataset has {c}")));
    }
    if let Some(&l) = ds.labels.iter().find(|&&l| l > 255) {
        return Err(Error::Usage(format!("label {l} does not fit in a byte")));
    }
    let mut img = Vec::with_capacity(16 + ds.images.numel());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [ds.len(), h, w] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, img).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, lab).map_err(|e| Error::io(lp, e))
}
