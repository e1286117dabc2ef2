//! Self-contained binary model snapshots.
//!
//! Layout: the magic `ICDMSNAP`, a little-endian `u32` format version, a
//! `u64` header length, a JSON header, every tensor as little-endian `f64`
//! in header order, then the graph logs as `(u64, u64, u8)` triplets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, IdMap, QMatrix, ResponseLog};
use crate::diffcore::{Mat, ParameterStore};
use crate::error::{IcdmError, Result};
use crate::model::{Model, ModelConfig, TrainGraph};
use crate::train::{TrainConfig, TrainOutcome};

pub const MAGIC: &[u8; 8] = b"ICDMSNAP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Counts {
    students: usize,
    exercises: usize,
    concepts: usize,
    logs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    best_epoch: Option<usize>,
    counts: Counts,
    tensors: Vec<TensorEntry>,
    student_ids: Vec<u64>,
    exercise_ids: Vec<u64>,
    concept_ids: Vec<u64>,
    q: Vec<Vec<usize>>,
}

/// Trained parameters plus everything needed to rebuild the training
/// graphs and map raw ids.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    pub model: Model,
    pub train_config: Option<TrainConfig>,
    pub best_epoch: Option<usize>,
    /// Logs, Q-matrix and id maps the graphs are built from.
    pub data: Dataset,
}

impl ModelSnapshot {
    pub fn new(model: Model, data: Dataset) -> Result<Self> {
        if model.n_students != data.n_students()
            || model.n_exercises != data.n_exercises()
            || model.n_concepts != data.n_concepts()
        {
            return Err(IcdmError::Snapshot("model and data dimensions differ".into()));
        }
        Ok(Self {
            model,
            train_config: None,
            best_epoch: None,
            data,
        })
    }

    pub fn from_outcome(outcome: &TrainOutcome, cfg: &TrainConfig) -> Result<Self> {
        let mut snap = Self::new(outcome.model.clone(), outcome.graph_data.clone())?;
        snap.train_config = Some(cfg.clone());
        snap.best_epoch = Some(outcome.best_epoch);
        Ok(snap)
    }

    pub fn graph(&self) -> Result<TrainGraph> {
        TrainGraph::build(&self.data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.model.store;
        let header = Header {
            model: self.model.config.clone(),
            train: self.train_config.clone(),
            best_epoch: self.best_epoch,
            counts: Counts {
                students: self.data.n_students(),
                exercises: self.data.n_exercises(),
                concepts: self.data.n_concepts(),
                logs: self.data.logs.len(),
            },
            tensors: store
                .iter()
                .map(|(_, p)| TensorEntry {
                    name: p.name.clone(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                })
                .collect(),
            student_ids: self.data.students.raw_ids().to_vec(),
            exercise_ids: self.data.exercises.raw_ids().to_vec(),
            concept_ids: self.data.concepts.raw_ids().to_vec(),
            q: (0..self.data.q.n_exercises())
                .map(|j| self.data.q.concepts(j).to_vec())
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| IcdmError::Snapshot(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 8 * store.n_scalars() + 17 * self.data.logs.len() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in store.iter() {
            for v in p.value.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for l in &self.data.logs {
            out.extend_from_slice(&(l.student as u64).to_le_bytes());
            out.extend_from_slice(&(l.exercise as u64).to_le_bytes());
            out.push(l.score);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(IcdmError::Snapshot("not a snapshot file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(IcdmError::Snapshot(format!("unsupported snapshot version {version}")));
        }
        let len = r.u64()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| IcdmError::Snapshot(format!("bad header: {e}")))?;

        let mut store = ParameterStore::new();
        for t in &header.tensors {
            let n = t
                .rows
                .checked_mul(t.cols)
                .ok_or_else(|| IcdmError::Snapshot("tensor size overflow".into()))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| IcdmError::Snapshot("tensor size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.add(t.name.clone(), Mat::from_vec(t.rows, t.cols, data));
        }
        let mut logs = Vec::with_capacity(header.counts.logs);
        for _ in 0..header.counts.logs {
            let s = r.u64()? as usize;
            let e = r.u64()? as usize;
            let score = r.take(1)?[0];
            logs.push(ResponseLog::new(s, e, score));
        }
        if r.pos != bytes.len() {
            return Err(IcdmError::Snapshot("trailing bytes after log section".into()));
        }
        let q = QMatrix::from_rows(header.concept_ids.len(), header.q)?;
        let data = Dataset::new(
            logs,
            q,
            IdMap::from_ordered(header.student_ids),
            IdMap::from_ordered(header.exercise_ids),
            IdMap::from_ordered(header.concept_ids),
        )?;
        let model = Model::from_store(header.model, store)?;
        let mut snap = Self::new(model, data)?;
        snap.train_config = header.train;
        snap.best_epoch = header.best_epoch;
        Ok(snap)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| IcdmError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| IcdmError::Snapshot("truncated snapshot".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
