//! Versioned weight container: named sections of f32 tensors plus a config
//! snapshot, stored as one safetensors file.
//!
//! Tensor keys are `<section>/<name>`. Header metadata carries the format tag,
//! version, the config as TOML and free-form entries (training state,
//! perceptual extractor identity).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::config::ShtConfig;
use crate::error::{Result, ShtError};
use crate::nn::ParamStore;

pub const FORMAT: &str = "sht-checkpoint";
pub const VERSION: &str = "1";
const RESERVED: [&str; 3] = ["format", "version", "config"];

pub type Section = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ShtConfig,
    pub sections: BTreeMap<String, Section>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(config: ShtConfig) -> Self {
        Self { config, sections: BTreeMap::new(), metadata: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, section: Section) {
        self.sections.insert(name.to_string(), section);
    }

    pub fn insert_params(&mut self, name: &str, params: &ParamStore) -> Result<()> {
        self.insert(name, params.snapshot()?);
        Ok(())
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Section> {
        self.section(name).ok_or_else(|| ShtError::Checkpoint(format!("checkpoint has no `{name}` weights")))
    }

    /// Loads section `name` into `params`; names and shapes must match exactly.
    pub fn restore(&self, name: &str, params: &ParamStore) -> Result<()> {
        let section = self.require(name)?;
        if let Some(extra) = section.keys().find(|k| params.get(k).is_none()) {
            return Err(ShtError::Checkpoint(format!("`{name}` holds unknown parameter `{extra}`")));
        }
        params.load(section)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let write_err = |reason: String| ShtError::CheckpointWriteError { path: path.to_path_buf(), reason };
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (section, tensors) in &self.sections {
            for (name, t) in tensors {
                let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
                buffers.push((format!("{section}/{name}"), t.dims().to_vec(), bytes));
            }
        }
        let views = buffers
            .iter()
            .map(|(k, shape, bytes)| Ok((k.as_str(), TensorView::new(Dtype::F32, shape.clone(), bytes).map_err(|e| write_err(e.to_string()))?)))
            .collect::<Result<Vec<_>>>()?;
        let mut meta: HashMap<String, String> = self.metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        meta.insert("format".into(), FORMAT.into());
        meta.insert("version".into(), VERSION.into());
        meta.insert("config".into(), self.config.to_toml_string());
        let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| write_err(e.to_string()))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| write_err(e.to_string()))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| write_err(e.to_string()))?;
        fs::rename(&tmp, path).map_err(|e| write_err(e.to_string()))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bad = |why: String| ShtError::Checkpoint(format!("{}: {why}", path.display()));
        let bytes = fs::read(path).map_err(|e| bad(e.to_string()))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let meta = header.metadata().clone().unwrap_or_default();
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(bad("not an sht checkpoint".into()));
        }
        if meta.get("version").map(String::as_str) != Some(VERSION) {
            return Err(bad(format!("unsupported version {:?}", meta.get("version"))));
        }
        let config = ShtConfig::from_toml_str(meta.get("config").ok_or_else(|| bad("missing config".into()))?)?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut sections: BTreeMap<String, Section> = BTreeMap::new();
        for (key, view) in st.tensors() {
            let (section, name) = key.split_once('/').ok_or_else(|| bad(format!("tensor `{key}` has no section")))?;
            if view.dtype() != Dtype::F32 {
                return Err(bad(format!("tensor `{key}` is {:?}, expected F32", view.dtype())));
            }
            let values: Vec<f32> =
                view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::from_vec(values, view.shape(), device)?;
            sections.entry(section.to_string()).or_default().insert(name.to_string(), t);
        }
        let metadata = meta.into_iter().filter(|(k, _)| !RESERVED.contains(&k.as_str())).collect();
        Ok(Self { config, sections, metadata })
    }
}
