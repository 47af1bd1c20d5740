//! Checkpoint files: a safetensors archive whose header metadata holds a
//! single `manifest` entry, a JSON object with the format tag, the format
//! version and the model configuration. One entry keeps the header bytes
//! independent of map iteration order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::{ParamGroup, ParamStore};
use super::sam::Sam;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "nucleisam-checkpoint";
const MANIFEST_KEY: &str = "manifest";

/// Writes the model to `path` and returns its checkpoint id.
pub fn checkpoint_save(model: &Sam, path: &Path) -> Result<String> {
    let bytes = serialize(model.params(), model.config())?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(checkpoint_id(&bytes))
}

/// Loads a model saved by [`checkpoint_save`]; the returned model carries the
/// checkpoint id.
pub fn checkpoint_load(path: &Path) -> Result<Sam> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (params, config) = deserialize(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })?;
    let mut model = Sam::from_params(config, params)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    model.set_checkpoint_id(checkpoint_id(&bytes));
    Ok(model)
}

/// First 16 hex digits of the SHA-256 of the file contents.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    format_version: u32,
    config: ModelConfig,
}

pub fn serialize(params: &ParamStore, config: &ModelConfig) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: config.clone(),
    };
    let metadata = HashMap::from([(MANIFEST_KEY.to_string(), serde_json::to_string(&manifest)?)]);
    let tensors: Vec<(String, Tensor)> = params
        .iter()
        .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
        .collect();
    safetensors::serialize(tensors, Some(metadata)).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn deserialize(bytes: &[u8]) -> Result<(ParamStore, ModelConfig)> {
    let corrupt = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("corrupt checkpoint: {e}"));
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(corrupt)?;
    let text = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| Error::Checkpoint("missing manifest".into()))?;
    let manifest: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.get("format").and_then(|v| v.as_str()) != Some(FORMAT_TAG) {
        return Err(Error::Checkpoint(format!("not a {FORMAT_TAG} file")));
    }
    let version = manifest.get("format_version").cloned().unwrap_or_default();
    if version != serde_json::json!(CHECKPOINT_FORMAT_VERSION) {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"
        )));
    }
    let Manifest { config, .. } =
        serde_json::from_value(manifest).map_err(|e| Error::Checkpoint(format!("manifest config: {e}")))?;

    let st = SafeTensors::deserialize(bytes).map_err(corrupt)?;
    let mut dtype = None;
    let mut store = None::<ParamStore>;
    for (name, view) in st.tensors() {
        let t = tensor_from_view(&name, &view)?;
        let d = *dtype.get_or_insert(t.dtype());
        if t.dtype() != d {
            return Err(Error::Checkpoint(format!("parameter {name} has dtype {:?}, expected {d:?}", t.dtype())));
        }
        store
            .get_or_insert_with(|| ParamStore::new(d))
            .insert(name, Var::from_tensor(&t)?);
    }
    Ok((store.unwrap_or_else(|| ParamStore::new(DType::F32)), config))
}

fn tensor_from_view(name: &str, view: &safetensors::tensor::TensorView<'_>) -> Result<Tensor> {
    use safetensors::Dtype as S;
    let dtype = match view.dtype() {
        S::F32 => DType::F32,
        S::F64 => DType::F64,
        S::F16 => DType::F16,
        S::BF16 => DType::BF16,
        other => return Err(Error::Checkpoint(format!("parameter {name} has unsupported dtype {other:?}"))),
    };
    Ok(Tensor::from_raw_buffer(view.data(), dtype, view.shape(), &Device::Cpu)?)
}

/// Prefix-rewrite table from external parameter names to internal ones.
#[derive(Clone, Debug, PartialEq)]
pub struct NameMap {
    rules: Vec<(String, Option<String>)>,
}

impl NameMap {
    /// The table shipped in `assets/name_map.tsv`.
    pub fn builtin() -> Self {
        Self::parse(include_str!("../../assets/name_map.tsv")).expect("bundled name map parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (from, to) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("name map line {}: expected two tab-separated fields", i + 1)))?;
            let to = (to != "-").then(|| to.to_string());
            rules.push((from.to_string(), to));
        }
        rules.sort_by_key(|(from, _)| std::cmp::Reverse(from.len()));
        Ok(NameMap { rules })
    }

    /// `Ok(None)` for deliberately dropped entries; an error for names no rule covers.
    pub fn map(&self, external: &str) -> Result<Option<String>> {
        for (from, to) in &self.rules {
            if let Some(rest) = external.strip_prefix(from.as_str()) {
                return Ok(to.as_ref().map(|t| format!("{t}{rest}")));
            }
        }
        Err(Error::Checkpoint(format!("no name-map rule for external parameter {external}")))
    }
}

/// Imports externally published weights (`.safetensors` or PyTorch `.pth`)
/// into a freshly initialised model of `config`. Every backbone, prompt
/// encoder and mask decoder parameter must be supplied; adapters keep their
/// seeded initialisation.
pub fn import_external_weights(path: &Path, config: ModelConfig, map: &NameMap, seed: u64) -> Result<Sam> {
    let entries: Vec<(String, Tensor)> = match path.extension().and_then(|e| e.to_str()) {
        Some("safetensors") => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let st = SafeTensors::deserialize(&bytes)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
            st.tensors()
                .iter()
                .map(|(n, v)| Ok((n.clone(), tensor_from_view(n, v)?)))
                .collect::<Result<_>>()?
        }
        _ => candle_core::pickle::read_all(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?,
    };
    let model = Sam::new(config, seed)?;
    let mut supplied = std::collections::BTreeSet::new();
    for (external, tensor) in entries {
        let Some(internal) = map.map(&external)? else { continue };
        let var = model
            .params()
            .get(&internal)
            .ok_or_else(|| Error::Checkpoint(format!("{external} maps to unknown parameter {internal}")))?;
        if var.dims() != tensor.dims() {
            return Err(Error::Checkpoint(format!(
                "{external}: shape {:?} does not match {internal} {:?}",
                tensor.dims(),
                var.dims()
            )));
        }
        var.set(&tensor.to_dtype(var.dtype())?)?;
        supplied.insert(internal);
    }
    for name in model.params().names() {
        if ParamGroup::of(name) != Some(ParamGroup::Adapters) && !supplied.contains(name) {
            return Err(Error::Checkpoint(format!("external weights lack parameter {name}")));
        }
    }
    Ok(model)
}
