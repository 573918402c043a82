//! Trained-model artifacts: the checkpoint container with its JSON model
//! configuration, and CSV export of the learned embeddings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pmdm_tensor::{checkpoint, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PmDmNet};
use crate::training::{Normalizer, NORM_MEAN, NORM_STD};

pub const CHECKPOINT_FILE: &str = "checkpoint.pmdm";
pub const MODEL_CONFIG_FILE: &str = "model.json";
pub const EMBEDDINGS_DIR: &str = "embeddings";

/// Writes the parameters and normaliser to `path` and the model
/// configuration to `model.json` in the same directory.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &PmDmNet,
    store: &ParamStore,
    normalizer: &Normalizer,
) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = store.values();
    for (name, t) in normalizer.to_tensors() {
        tensors.insert(name, t);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    checkpoint::save(path, &tensors)?;
    model.config.save(config_path(path))?;
    Ok(())
}

fn config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_file_name(MODEL_CONFIG_FILE)
}

#[derive(Debug)]
pub struct LoadedModel {
    pub model: PmDmNet,
    pub store: ParamStore,
    pub normalizer: Normalizer,
}

/// Reads a checkpoint and its `model.json`, checking every parameter the
/// architecture expects is present with the right shape.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LoadedModel> {
    let path = path.as_ref();
    let cfg_path = config_path(path);
    let config = ModelConfig::load(&cfg_path).map_err(|e| {
        Error::Config(format!("{}: {e}", cfg_path.display()))
    })?;
    let model = PmDmNet::new(config)?;
    let mut tensors = checkpoint::load(path)?;
    let normalizer = Normalizer::from_tensors(&tensors)?;
    tensors.remove(NORM_MEAN);
    tensors.remove(NORM_STD);
    let expected = model.init_params(0);
    let mut store = ParamStore::new();
    for (name, template) in expected.iter() {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        if t.shape() != template.shape() {
            return Err(Error::Config(format!(
                "checkpoint parameter `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                template.shape()
            )));
        }
        store.insert(name.to_string(), t);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Config(format!(
            "checkpoint holds `{extra}`, which the model configuration does not use"
        )));
    }
    Ok(LoadedModel {
        model,
        store,
        normalizer,
    })
}

/// Parameters worth visualising: node embeddings, memory matrices and the
/// two time-embedding pools.
pub fn embedding_parameters(store: &ParamStore) -> BTreeMap<String, Tensor> {
    store
        .iter()
        .filter(|(name, t)| {
            t.rank() == 2
                && (name.ends_with(".node_embedding")
                    || name.ends_with(".memory")
                    || name.starts_with("time."))
        })
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
}

/// Writes one CSV per embedding parameter into `dir`, named after the
/// parameter. The header is `dim0,dim1,...`; each row is one embedding row.
pub fn export_embeddings(store: &ParamStore, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (name, t) in embedding_parameters(store) {
        let path = dir.join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        let cols = t.shape()[1];
        w.write_record((0..cols).map(|j| format!("dim{j}")))?;
        for row in t.data().chunks(cols) {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}
