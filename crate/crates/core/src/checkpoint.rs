//! Checkpoint files: one JSON header line followed by little-endian f32
//! parameter blocks in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset from the first byte after the header line.
    pub byte_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub manifest: Vec<ManifestEntry>,
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Serializes every parameter and buffer of `model`.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(model.params.len());
    let mut body = Vec::new();
    for (_, p) in model.params.iter() {
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            byte_offset: body.len(),
        });
        for &v in p.value.data() {
            body.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        model_config: model.config.clone(),
        manifest,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend(body);
    Ok(out)
}

/// Writes the checkpoint to a sibling temporary file and renames it over
/// `path`, so readers never observe a partial file.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_header(bytes: &[u8], path: &Path) -> Result<(Header, usize)> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ckpt_err(path, "missing header line"))?;
    let header: Header =
        serde_json::from_slice(&bytes[..end]).map_err(|e| ckpt_err(path, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(ckpt_err(
            path,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    Ok((header, end + 1))
}

/// Rebuilds the model described by the header and fills in its values.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Model> {
    let (header, start) = read_header(bytes, path)?;
    let mut model = Model::new(&header.model_config, 0)?;
    let body = &bytes[start..];
    if header.manifest.len() != model.params.len() {
        return Err(ckpt_err(
            path,
            format!(
                "manifest lists {} tensors, model has {}",
                header.manifest.len(),
                model.params.len()
            ),
        ));
    }
    for entry in &header.manifest {
        let id = model
            .params
            .id(&entry.name)
            .ok_or_else(|| ckpt_err(path, format!("unknown parameter {}", entry.name)))?;
        let value = model.params.value_mut(id);
        if value.shape() != entry.shape.as_slice() {
            return Err(ckpt_err(
                path,
                format!("{}: shape {:?} expected {:?}", entry.name, entry.shape, value.shape()),
            ));
        }
        let n = value.numel();
        let block = body
            .get(entry.byte_offset..entry.byte_offset + 4 * n)
            .ok_or_else(|| ckpt_err(path, format!("{}: data truncated", entry.name)))?;
        for (dst, chunk) in value.data_mut().iter_mut().zip(block.chunks_exact(4)) {
            *dst = f64::from(f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")));
        }
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Copies every `bg.*` tensor of `source` into `target`.
pub fn copy_background(source: &Model, target: &mut Model) -> Result<()> {
    if source.config.background != target.config.background || source.config.image_size != target.config.image_size {
        return Err(Error::Config(
            "background checkpoint was trained with a different background configuration".into(),
        ));
    }
    for (_, p) in source.params.iter().filter(|(_, p)| p.name.starts_with("bg.")) {
        let id = target
            .params
            .id(&p.name)
            .ok_or_else(|| Error::Config(format!("parameter {} missing", p.name)))?;
        *target.params.value_mut(id) = p.value.clone();
    }
    Ok(())
}
