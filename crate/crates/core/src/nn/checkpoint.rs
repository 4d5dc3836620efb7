//! Checkpoint directories: one array file per parameter and optimizer slot,
//! plus a JSON manifest tying names to files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::Optimizer;
use super::train::TrainHistory;
use super::{Float, ParamStore, Tensor};
use crate::dataio::{read_npy, write_npy, NpyData};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub file: String,
    pub moment1: Option<String>,
    pub moment2: Option<String>,
    /// Best-validation snapshot of the value, when one was kept.
    pub best: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Model family, e.g. "autoencoder".
    pub model: String,
    /// Model configuration as written by the owning module.
    pub config: serde_json::Value,
    /// Layer specs, for inspection.
    pub layers: serde_json::Value,
    pub dtype: String,
    pub seed: u64,
    pub optimizer: Option<Optimizer>,
    /// Next epoch to run.
    pub epoch: usize,
    pub history: TrainHistory,
    pub params: Vec<ParamRecord>,
    /// Free-form extras such as latent normalization constants.
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn to_npy<T: Float>(v: &[T]) -> NpyData {
    match T::NAME {
        "f32" => NpyData::F32(v.iter().map(|x| x.f64() as f32).collect()),
        _ => NpyData::F64(v.iter().map(|x| x.f64()).collect()),
    }
}

fn from_npy<T: Float>(d: NpyData) -> Vec<T> {
    match d {
        NpyData::U8(v) => v.into_iter().map(|x| T::of(x as f64)).collect(),
        NpyData::F32(v) => v.into_iter().map(|x| T::of(x as f64)).collect(),
        NpyData::F64(v) => v.into_iter().map(T::of).collect(),
    }
}

/// Writes `store` (and an optional best snapshot) into `dir`; `manifest.params`
/// is filled in here.
pub fn save<T: Float>(
    dir: &Path,
    mut manifest: Manifest,
    store: &ParamStore<T>,
    best: Option<&ParamStore<T>>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    manifest.dtype = T::NAME.to_string();
    manifest.params.clear();
    for (id, e) in store.entries() {
        let stem = format!("p{:03}", id.0);
        let file = format!("{stem}.npy");
        write_npy(dir.join(&file), e.value.shape(), &to_npy(e.value.data()))?;
        let mut rec = ParamRecord {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            trainable: e.trainable,
            file,
            moment1: None,
            moment2: None,
            best: None,
        };
        if e.trainable {
            let m1 = format!("{stem}.m1.npy");
            let m2 = format!("{stem}.m2.npy");
            write_npy(dir.join(&m1), e.value.shape(), &to_npy(&e.moment1))?;
            write_npy(dir.join(&m2), e.value.shape(), &to_npy(&e.moment2))?;
            rec.moment1 = Some(m1);
            rec.moment2 = Some(m2);
        }
        if let Some(b) = best {
            let bf = format!("{stem}.best.npy");
            let v = b.value(id);
            write_npy(dir.join(&bf), v.shape(), &to_npy(v.data()))?;
            rec.best = Some(bf);
        }
        manifest.params.push(rec);
    }
    let path = dir.join(MANIFEST);
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io_at(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let raw = std::fs::read(&path).map_err(|e| Error::io_at(&path, e))?;
    Ok(serde_json::from_slice(&raw)?)
}

fn load_array<T: Float>(dir: &Path, file: &str, shape: &[usize]) -> Result<Vec<T>> {
    let arr = read_npy(dir.join(file))?;
    if arr.shape != shape {
        return Err(Error::State(format!(
            "{file} has shape {:?}, expected {shape:?}",
            arr.shape
        )));
    }
    Ok(from_npy(arr.data))
}

/// Overwrites the values and optimizer slots of a freshly built `store` from
/// the checkpoint, matching entries by name. Returns the best snapshot if saved.
pub fn restore<T: Float>(
    dir: &Path,
    manifest: &Manifest,
    store: &mut ParamStore<T>,
) -> Result<Option<ParamStore<T>>> {
    if manifest.params.len() != store.len() {
        return Err(Error::State(format!(
            "checkpoint holds {} arrays, model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    let mut best = manifest
        .params
        .iter()
        .all(|r| r.best.is_some())
        .then(|| store.clone());
    for rec in &manifest.params {
        let id = store.find(&rec.name).ok_or_else(|| {
            Error::State(format!("checkpoint parameter {} not in model", rec.name))
        })?;
        if store.value(id).shape() != rec.shape.as_slice() {
            return Err(Error::State(format!(
                "parameter {} has shape {:?} in checkpoint",
                rec.name, rec.shape
            )));
        }
        let value = load_array::<T>(dir, &rec.file, &rec.shape)?;
        let e = store.entry_mut(id);
        e.value = Tensor::new(rec.shape.clone(), value)?;
        if let (true, Some(m1), Some(m2)) = (e.trainable, &rec.moment1, &rec.moment2) {
            e.moment1 = load_array(dir, m1, &rec.shape)?;
            e.moment2 = load_array(dir, m2, &rec.shape)?;
        }
        if let (Some(b), Some(f)) = (best.as_mut(), &rec.best) {
            b.entry_mut(id).value =
                Tensor::new(rec.shape.clone(), load_array(dir, f, &rec.shape)?)?;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OptimizerConfig;

    #[test]
    fn store_round_trip_is_bitwise() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add_param(
            "w",
            Tensor::new(vec![2, 2], vec![0.1, -3.5, 1e-20, 7.0]).unwrap(),
        );
        store.add_buffer("running", Tensor::full(vec![3], 0.25));
        store.entry_mut(w).moment1 = vec![1.0, 2.0, 3.0, 4.0];
        store.entry_mut(w).moment2 = vec![0.5; 4];
        let dir = tempfile::tempdir().unwrap();
        let manifest = Manifest {
            model: "test".into(),
            config: serde_json::Value::Null,
            layers: serde_json::Value::Null,
            dtype: String::new(),
            seed: 9,
            optimizer: Some(Optimizer::new(OptimizerConfig::adam(1e-3))),
            epoch: 3,
            history: TrainHistory::default(),
            params: vec![],
            extra: serde_json::Value::Null,
        };
        save(dir.path(), manifest, &store, None).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!((m.epoch, m.seed, m.dtype.as_str()), (3, 9, "f32"));
        let mut fresh = ParamStore::<f32>::new();
        fresh.add_param("w", Tensor::zeros(vec![2, 2]));
        fresh.add_buffer("running", Tensor::zeros(vec![3]));
        assert!(restore(dir.path(), &m, &mut fresh).unwrap().is_none());
        for ((_, a), (_, b)) in store.entries().zip(fresh.entries()) {
            assert_eq!(a.value, b.value);
            assert_eq!(a.moment1, b.moment1);
            assert_eq!(a.moment2, b.moment2);
        }
    }
}
