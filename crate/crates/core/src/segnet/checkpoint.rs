//! Model checkpoint file.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic            8 bytes  "MSEG0001"
//! in_channels      u32
//! kernel_size      u32
//! num_classes      u32
//! style_layer      u32      (1-based)
//! norm_eps         f64
//! num_layers       u32
//! widths           u32 x num_layers
//! per block l = 0..num_layers, f32 each:
//!     conv kernel  [C_out, C_in, k, k] row-major
//!     conv bias    [C_out]
//!     norm weight  [C_out]
//!     norm bias    [C_out]
//!     running mean [C_out]
//!     running var  [C_out]
//! classifier kernel [K, C_last] (f32)
//! classifier bias   [K]         (f32)
//! ```
//!
//! Values are stored as f32; a model loaded from a checkpoint saves back to
//! identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Block, ModelParams, NetworkConfig};
use crate::error::{Error, Result};
use crate::normstats::NormLayerState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MSEG0001";

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let cfg = &params.config;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [cfg.in_channels, cfg.kernel_size, cfg.num_classes, cfg.style_layer] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.norm_eps.to_le_bytes());
    out.extend_from_slice(&(cfg.widths.len() as u32).to_le_bytes());
    for &w in &cfg.widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    let mut put = |values: &[f64]| {
        for &v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    for block in &params.blocks {
        put(block.kernel.data());
        put(&block.bias);
        put(&block.norm.weight);
        put(&block.norm.bias);
        put(&block.norm.running_mean);
        put(&block.norm.running_var);
    }
    put(params.classifier_kernel.data());
    put(&params.classifier_bias);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let in_channels = r.u32()?;
    let kernel_size = r.u32()?;
    let num_classes = r.u32()?;
    let style_layer = r.u32()?;
    let norm_eps = r.f64()?;
    let layers = r.u32()?;
    if layers > 1024 {
        return Err(Error::Format(format!("implausible layer count {layers}")));
    }
    let widths = (0..layers).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let config = NetworkConfig { in_channels, widths, kernel_size, num_classes, norm_eps, style_layer };
    config.validate().map_err(|e| Error::Format(format!("invalid stored config: {e}")))?;

    let k = kernel_size;
    let mut blocks = Vec::with_capacity(layers);
    let mut c_in = in_channels;
    for &width in &config.widths {
        let kernel = Tensor::from_vec([width, c_in, k, k], r.f32s(width * c_in * k * k)?)?;
        let bias = r.f32s(width)?;
        let norm = NormLayerState {
            weight: r.f32s(width)?,
            bias: r.f32s(width)?,
            running_mean: r.f32s(width)?,
            running_var: r.f32s(width)?,
            eps: norm_eps,
        };
        blocks.push(Block { kernel, bias, norm });
        c_in = width;
    }
    let classifier_kernel = Tensor::from_vec([num_classes, c_in, 1, 1], r.f32s(num_classes * c_in)?)?;
    let classifier_bias = r.f32s(num_classes)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(ModelParams { config, blocks, classifier_kernel, classifier_bias })
}

/// Writes via a temporary file and rename so readers never see a partial file.
pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&to_bytes(params))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::init_params;

    #[test]
    fn reload_then_save_is_byte_identical() {
        let cfg = NetworkConfig { widths: vec![3, 5], num_classes: 2, style_layer: 2, ..NetworkConfig::default() };
        let params = init_params(&cfg, 9).unwrap();
        let bytes = to_bytes(&params);
        assert_eq!(&bytes[..8], b"MSEG0001");
        let loaded = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&loaded), bytes);
        assert_eq!(from_bytes(&to_bytes(&loaded)).unwrap(), loaded);
        assert_eq!(loaded.config, cfg);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let params = init_params(&NetworkConfig::default(), 1).unwrap();
        let mut bytes = to_bytes(&params);
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(from_bytes(&bytes).is_err());
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
    }
}
