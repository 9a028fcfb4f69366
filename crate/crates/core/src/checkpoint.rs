//! Checkpoint serialization: a config text block plus named f64 tensors,
//! all little-endian, restored bit-exactly.
//!
//! Layout: magic "VFCP", format version u32, config block (u32 byte length
//! then the pipeline config in the key-value file format), tensor count
//! u32, then per tensor: name length u32, name bytes, rank u32, one u64
//! per extent, and the row-major f64 payload.

use crate::config::{pipeline_config_string, RunConfig};
use crate::error::{Error, Result};
use crate::params::{named_tensors, ParamGroup};
use crate::pipeline::PipelineParams;
use crate::tensor::Tensor;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"VFCP";
pub const VERSION: u32 = 1;

pub fn to_bytes(params: &PipelineParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg_text = pipeline_config_string(&params.config);
    out.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg_text.as_bytes());
    let tensors = named_tensors(params);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {}: wanted {n} more, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<PipelineParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Checkpoint("config block is not utf-8".into()))?;
    let config = RunConfig::from_str_checked(cfg_text)?.pipeline;

    let count = r.u32()? as usize;
    let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        loaded.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }

    // Allocate the right structure from the config, then require the file
    // to cover it exactly: same names, same order, same shapes.
    let mut params = PipelineParams::init(config, 0)?;
    let expected: Vec<String> = named_tensors(&params).into_iter().map(|(n, _)| n).collect();
    if loaded.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, config implies {}",
            loaded.len(),
            expected.len()
        )));
    }
    let mut it = loaded.into_iter();
    let mut failure: Option<Error> = None;
    params.visit_mut("", &mut |name, t| {
        if failure.is_some() {
            return;
        }
        let (got_name, got) = it.next().expect("length checked above");
        if got_name != name {
            failure = Some(Error::Checkpoint(format!(
                "tensor name mismatch: file has '{got_name}', config implies '{name}'"
            )));
            return;
        }
        if got.shape() != t.shape() {
            failure = Some(Error::Checkpoint(format!(
                "tensor '{name}' has shape {:?} in file, {:?} per config",
                got.shape(),
                t.shape()
            )));
            return;
        }
        *t = got;
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(params),
    }
}

pub fn save(params: &PipelineParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PipelineParams> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{CompressorKind, FusionKind, PipelineConfig};

    fn make_params() -> PipelineParams {
        let cfg = PipelineConfig {
            d_v: 8,
            l_ve: 1,
            d_ff_v: 16,
            d_t: 8,
            l_llm: 1,
            d_ff_t: 16,
            patch_budget: 16,
            n_compressed: 4,
            max_text: 8,
            compressor: Some(CompressorKind::Conv2d),
            fusion: Some(FusionKind::Combined),
            ..PipelineConfig::default()
        };
        PipelineParams::init(cfg, 77).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let params = make_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vfcp");
        save(&params, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.config, params.config);
        // PartialEq over f64 data catches any bit drift except NaN; equality
        // of all named tensors covers structure and values.
        assert_eq!(back, params);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = to_bytes(&make_params());
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = to_bytes(&make_params());
        bytes[4] = 9;
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = to_bytes(&make_params());
        let cut = &bytes[..bytes.len() - 5];
        let err = from_bytes(cut).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let mut bytes = to_bytes(&make_params());
        bytes.extend_from_slice(&[0, 1, 2]);
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("trailing"));
    }

    #[test]
    fn tampered_tensor_name_is_rejected() {
        let params = make_params();
        let bytes = to_bytes(&params);
        // First tensor name starts right after magic, version, config block,
        // and the two u32 counts; flip one of its bytes.
        let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let name_start = 12 + cfg_len + 4 + 4;
        let mut tampered = bytes.clone();
        tampered[name_start] = b'z';
        let err = from_bytes(&tampered).unwrap_err();
        assert!(err.to_string().contains("name mismatch"), "{err}");
    }
}
