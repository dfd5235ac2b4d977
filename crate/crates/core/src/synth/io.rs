//! On-disk dataset layout:
//!
//! ```text
//! DIR/domain_00/manifest.json
//! DIR/domain_00/img_00000.bin   "SEGD0001", u32 C, H, W (LE), f32 values
//! DIR/domain_00/msk_00000.bin   "SEGM0001", u32 H, W (LE), u8 labels
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DomainDataset;
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

const IMAGE_MAGIC: &[u8; 8] = b"SEGD0001";
const MASK_MAGIC: &[u8; 8] = b"SEGM0001";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainManifest {
    pub format_version: u32,
    pub domain_id: u32,
    pub style: String,
    pub samples: usize,
    /// `[C, H, W]`
    pub image_shape: [usize; 3],
    /// `[H, W]`
    pub mask_shape: [usize; 2],
}

fn domain_dir(root: &Path, id: u32) -> PathBuf {
    root.join(format!("domain_{id:02}"))
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let [n, c, h, w] = image.shape();
    if n != 1 {
        return Err(Error::Shape(format!("image files hold one image, got batch {n}")));
    }
    let mut out = Vec::with_capacity(20 + 4 * image.numel());
    out.extend_from_slice(IMAGE_MAGIC);
    for v in [c, h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in image.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_mask(path: &Path, mask: &LabelMap) -> Result<()> {
    let [n, h, w] = mask.shape();
    if n != 1 {
        return Err(Error::Shape(format!("mask files hold one mask, got batch {n}")));
    }
    let mut out = Vec::with_capacity(16 + mask.data().len());
    out.extend_from_slice(MASK_MAGIC);
    for v in [h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(mask.data());
    fs::write(path, out)?;
    Ok(())
}

fn header<'a>(bytes: &'a [u8], magic: &[u8; 8], dims: usize, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let head = 8 + 4 * dims;
    if bytes.len() < head || &bytes[..8] != magic {
        return Err(Error::Format(format!("{}: bad magic or truncated header", path.display())));
    }
    let shape = bytes[8..head]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    Ok((shape, &bytes[head..]))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (shape, body) = header(&bytes, IMAGE_MAGIC, 3, path)?;
    let count = shape.iter().product::<usize>();
    if body.len() != 4 * count {
        return Err(Error::Format(format!("{}: expected {} values", path.display(), count)));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Tensor::from_vec([1, shape[0], shape[1], shape[2]], data)
}

pub fn read_mask(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path)?;
    let (shape, body) = header(&bytes, MASK_MAGIC, 2, path)?;
    if body.len() != shape[0] * shape[1] {
        return Err(Error::Format(format!("{}: expected {} labels", path.display(), shape[0] * shape[1])));
    }
    LabelMap::from_vec([1, shape[0], shape[1]], body.to_vec())
}

/// Writes every domain under `root`, one subdirectory each.
pub fn save_benchmark(root: &Path, domains: &[DomainDataset]) -> Result<()> {
    for d in domains {
        let dir = domain_dir(root, d.domain_id);
        fs::create_dir_all(&dir)?;
        let first = d.images.first().ok_or_else(|| Error::Config(format!("domain {} is empty", d.domain_id)))?;
        let [_, c, h, w] = first.shape();
        for (i, (image, mask)) in d.images.iter().zip(&d.masks).enumerate() {
            if image.shape() != [1, c, h, w] || mask.shape() != [1, h, w] {
                return Err(Error::Shape(format!("sample {i} of domain {} has a different size", d.domain_id)));
            }
            write_image(&dir.join(format!("img_{i:05}.bin")), image)?;
            write_mask(&dir.join(format!("msk_{i:05}.bin")), mask)?;
        }
        let manifest = DomainManifest {
            format_version: FORMAT_VERSION,
            domain_id: d.domain_id,
            style: d.style_name.clone(),
            samples: d.images.len(),
            image_shape: [c, h, w],
            mask_shape: [h, w],
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(())
}

pub fn load_domain(root: &Path, domain_id: u32) -> Result<DomainDataset> {
    let dir = domain_dir(root, domain_id);
    let manifest: DomainManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset format {}", manifest.format_version)));
    }
    if manifest.domain_id != domain_id {
        return Err(Error::Format(format!("{} claims domain {}", dir.display(), manifest.domain_id)));
    }
    let mut images = Vec::with_capacity(manifest.samples);
    let mut masks = Vec::with_capacity(manifest.samples);
    let [c, h, w] = manifest.image_shape;
    for i in 0..manifest.samples {
        let image = read_image(&dir.join(format!("img_{i:05}.bin")))?;
        let mask = read_mask(&dir.join(format!("msk_{i:05}.bin")))?;
        if image.shape() != [1, c, h, w] || mask.shape() != [1, h, w] {
            return Err(Error::Format(format!("sample {i} of domain {domain_id} disagrees with manifest")));
        }
        images.push(image);
        masks.push(mask);
    }
    Ok(DomainDataset { domain_id, style_name: manifest.style, images, masks })
}

/// Every `domain_XX` directory under `root`, ordered by id.
pub fn load_benchmark(root: &Path) -> Result<Vec<DomainDataset>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root)? {
        let name = entry?.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_prefix("domain_")).and_then(|n| n.parse().ok()) {
            ids.push(id);
        }
    }
    if ids.is_empty() {
        return Err(Error::Config(format!("no domain directories under {}", root.display())));
    }
    ids.sort_unstable();
    ids.into_iter().map(|id| load_domain(root, id)).collect()
}
