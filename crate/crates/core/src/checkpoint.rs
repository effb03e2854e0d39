//! Parameter checkpoints: a JSON manifest plus one `UNGE` blob per tensor.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct Manifest<A> {
    kind: String,
    architecture: A,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn blob_shape(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [n, rest @ ..] => (*n, rest.iter().product()),
    }
}

/// Writes `store` under `dir` tagged with `kind` and an architecture record.
pub fn save<A: Serialize>(
    dir: &Path,
    kind: &str,
    architecture: &A,
    store: &ParamStore,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    for (i, (_, name, t)) in store.iter().enumerate() {
        let file = format!("p{i:04}.unge");
        let (n, d) = blob_shape(t.shape());
        EmbeddingMatrix::new(n, d, t.data().to_vec())?.save(&dir.join(&file))?;
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        kind: kind.to_string(),
        architecture,
        params,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

/// Reads the architecture record of a checkpoint of the given `kind`.
pub fn load_architecture<A: DeserializeOwned>(dir: &Path, kind: &str) -> Result<A> {
    Ok(read_manifest::<A>(dir, kind)?.architecture)
}

fn read_manifest<A: DeserializeOwned>(dir: &Path, kind: &str) -> Result<Manifest<A>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest<A> = serde_json::from_str(&text)?;
    if m.kind != kind {
        return Err(Error::format(
            &path,
            format!("checkpoint holds a {} model, expected {kind}", m.kind),
        ));
    }
    Ok(m)
}

/// Overwrites every parameter of `store` with the checkpointed values.
/// Names and shapes must match exactly.
pub fn load_into(dir: &Path, kind: &str, store: &mut ParamStore) -> Result<()> {
    let m = read_manifest::<serde_json::Value>(dir, kind)?;
    let path = dir.join(MANIFEST);
    if m.params.len() != store.len() {
        return Err(Error::format(
            &path,
            format!(
                "{} parameters in checkpoint, model has {}",
                m.params.len(),
                store.len()
            ),
        ));
    }
    for entry in &m.params {
        let id = store
            .id_of(&entry.name)
            .ok_or_else(|| Error::format(&path, format!("unknown parameter {}", entry.name)))?;
        if store.get(id).shape() != entry.shape.as_slice() {
            return Err(Error::format(
                &path,
                format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    entry.name,
                    entry.shape,
                    store.get(id).shape()
                ),
            ));
        }
        let blob = EmbeddingMatrix::load(&dir.join(&entry.file))?;
        let t = Tensor::new(&entry.shape, blob.data().to_vec())?;
        store.set_value(id, t.data())?;
    }
    Ok(())
}
