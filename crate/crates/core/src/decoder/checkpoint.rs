//! Decoder checkpoints: one NPY file per tensor plus `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Decoder, DecoderConfig, Running};
use crate::error::{Error, Result};
use crate::iocli::npy::{read_npy, write_npy};
use crate::tensorkit::{Real, Tensor};

const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct RunningEntry {
    name: String,
    mean_file: String,
    var_file: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: DecoderConfig,
    params: Vec<ParamEntry>,
    running: Vec<RunningEntry>,
}

pub fn save_checkpoint<T: Real>(dir: impl AsRef<Path>, decoder: &Decoder<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    for (name, t) in &decoder.params {
        let file = format!("{name}.npy");
        write_npy(dir.join(&file), t)?;
        params.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let mut running = Vec::new();
    for (name, r) in &decoder.running {
        let mean_file = format!("{name}.running_mean.npy");
        let var_file = format!("{name}.running_var.npy");
        write_npy(dir.join(&mean_file), &Tensor::new(vec![r.mean.len()], r.mean.clone())?)?;
        write_npy(dir.join(&var_file), &Tensor::new(vec![r.var.len()], r.var.clone())?)?;
        running.push(RunningEntry {
            name: name.clone(),
            mean_file,
            var_file,
        });
    }
    let manifest = Manifest {
        config: decoder.config.clone(),
        params,
        running,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Loads a checkpoint, checking that it holds exactly the tensors the
/// recorded configuration builds.
pub fn load_checkpoint<T: Real>(dir: impl AsRef<Path>) -> Result<Decoder<T>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut decoder = Decoder::<T>::new(manifest.config)?;
    if manifest.params.len() != decoder.params.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, configuration expects {}",
            manifest.params.len(),
            decoder.params.len()
        )));
    }
    for entry in manifest.params {
        let t: Tensor<T> = read_npy(dir.join(&entry.file))?;
        let slot = decoder
            .params
            .get_mut(&entry.name)
            .ok_or_else(|| Error::Config(format!("unexpected parameter {}", entry.name)))?;
        if slot.shape() != t.shape() || entry.shape != t.shape() {
            return Err(Error::Config(format!(
                "{}: stored shape {:?}, expected {:?}",
                entry.name,
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    for entry in manifest.running {
        let mean: Tensor<T> = read_npy(dir.join(&entry.mean_file))?;
        let var: Tensor<T> = read_npy(dir.join(&entry.var_file))?;
        let slot = decoder
            .running
            .get_mut(&entry.name)
            .ok_or_else(|| Error::Config(format!("unexpected batch norm {}", entry.name)))?;
        if mean.numel() != slot.mean.len() || var.numel() != slot.var.len() {
            return Err(Error::Config(format!(
                "{}: running statistics have the wrong size",
                entry.name
            )));
        }
        *slot = Running {
            mean: mean.into_data(),
            var: var.into_data(),
        };
    }
    Ok(decoder)
}
