use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{ensure, Error, Result};
use crate::synthdata::container::{
    check_schema_version, read_file, write_file, ArrayReader, ArrayWriter, ARRAYS_FILE, MANIFEST_FILE,
    SCHEMA_VERSION,
};

const CHECKPOINT_FORMAT: &str = "avmix-checkpoint";

/// Named parameter tensors addressed by dense ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Normal init with standard deviation `std`.
    pub fn push_normal<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> usize {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.push(name, Tensor::new(shape.to_vec(), data).expect("sized by shape"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Order-sensitive FNV-1a hash over the raw bits of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// Squared L2 distance between two stores of identical layout.
    pub fn distance_sq(&self, other: &ParamStore) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
            .sum()
    }
}

/// Resolves parameter ids to graph nodes, either as trainable parameters or
/// as constants.
#[derive(Clone, Copy)]
pub struct Binder<'a> {
    pub params: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Binder<'a> {
    pub fn train(params: &'a ParamStore) -> Self {
        Self { params, trainable: true }
    }

    pub fn frozen(params: &'a ParamStore) -> Self {
        Self { params, trainable: false }
    }

    pub fn var(&self, g: &mut Graph, id: usize) -> Var {
        if self.trainable {
            g.param(id, self.params.get(id))
        } else {
            g.input(self.params.get(id).clone())
        }
    }
}

/// `teacher ← m·teacher + (1−m)·student` for every parameter.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, m: f64) -> Result<()> {
    ensure!(teacher.same_layout(student), Shape, "teacher and student layouts differ");
    ensure!((0.0..=1.0).contains(&m), InvalidArgument, "EMA momentum {m} outside [0, 1]");
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    schema_version: String,
    data_file: String,
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

/// Writes the store (f64 arrays) plus caller metadata to directory `dir`.
pub fn save_params(store: &ParamStore, meta: serde_json::Value, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = ArrayWriter::new();
    for t in &store.tensors {
        w.write_f64(t.shape(), t.data());
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        schema_version: SCHEMA_VERSION.into(),
        data_file: ARRAYS_FILE.into(),
        meta,
        params: store
            .names
            .iter()
            .zip(&store.tensors)
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    write_file(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    write_file(&dir.join(ARRAYS_FILE), &w.into_bytes())
}

pub fn load_params(dir: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let text = read_file(&dir.join(MANIFEST_FILE))?;
    let value: serde_json::Value = serde_json::from_slice(&text)?;
    check_schema_version(&value)?;
    let manifest: CheckpointManifest = serde_json::from_value(value)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("not a checkpoint: format `{}`", manifest.format)));
    }
    let bytes = read_file(&dir.join(ARRAYS_FILE))?;
    let mut r = ArrayReader::new(&bytes);
    let mut store = ParamStore::new();
    for e in manifest.params {
        let data = r.read_f64(&e.shape, &e.name)?;
        store.push(e.name, Tensor::new(e.shape, data)?);
    }
    Ok((store, manifest.meta))
}
