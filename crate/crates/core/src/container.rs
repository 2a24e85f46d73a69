//! On-disk weights: a `manifest.json` plus one little-endian `f32` blob per layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{element_count, Shape, WeightTensor};

pub const MANIFEST_FILE: &str = "manifest.json";

pub type WeightMap = BTreeMap<String, WeightTensor>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub shape: Shape,
    pub file: String,
}

fn blob_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    format!("{safe}.bin")
}

pub fn write_weights(weights: &WeightMap, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(weights.len());
    let mut used = BTreeMap::new();
    for (id, tensor) in weights {
        if id != &tensor.layer_id {
            return Err(Error::format(id, format!("map key differs from tensor id `{}`", tensor.layer_id)));
        }
        let mut file = blob_name(id);
        // Sanitised names can collide; disambiguate by position.
        if used.contains_key(&file) {
            file = format!("{}_{}.bin", file.trim_end_matches(".bin"), used.len());
        }
        used.insert(file.clone(), ());
        let mut bytes = Vec::with_capacity(tensor.data().len() * 4);
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            id: id.clone(),
            shape: tensor.shape(),
            file,
        });
    }
    let manifest = Manifest { tensors: entries };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn read_weights(dir: &Path) -> Result<WeightMap> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        let empty = match fs::read_dir(dir) {
            Ok(mut it) => it.next().is_none(),
            Err(e) => return Err(Error::io(dir, e)),
        };
        if empty {
            tracing::warn!(dir = %dir.display(), "weights directory is empty; no tensors loaded");
            return Ok(WeightMap::new());
        }
        return Err(Error::format("<manifest>", format!("{} not found", manifest_path.display())));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format("<manifest>", format!("malformed manifest: {e}")))?;

    let mut out = WeightMap::new();
    for entry in manifest.tensors {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path)
            .map_err(|e| Error::format(&entry.id, format!("missing blob {}: {e}", path.display())))?;
        let expected = element_count(&entry.shape) * 4;
        if bytes.len() != expected {
            return Err(Error::format(
                &entry.id,
                format!("blob has {} bytes, shape {:?} needs {expected}", bytes.len(), entry.shape),
            ));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = WeightTensor::new(entry.id.clone(), entry.shape, data)?;
        if out.insert(entry.id.clone(), tensor).is_some() {
            return Err(Error::format(&entry.id, "duplicate layer id in manifest"));
        }
    }
    Ok(out)
}
