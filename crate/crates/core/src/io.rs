//! File formats: CSV scans, JSON manifests and reports, and a checksummed
//! little-endian container shared by graph files and checkpoints.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic[6] | version u32 | header_len u64 | header (JSON) | n_tensors u32 |
//!   { name_len u32 | name | dtype u8 | rows u64 | cols u64 | payload }* |
//! sha256[32] over everything before it
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{BrainGraph, Edge, LabeledGraph, ScanTimeSeries, TaskId, TaskSet};
use crate::math::{DType, Matrix, Real};
use crate::model::{ModelConfig, TaGat};
use crate::train::{Exposure, Integrity, PartitionMap, TrainConfig, TrainState, NUM_PARTITIONS};

pub const MANIFEST_VERSION: u32 = 1;
pub const GRAPH_MAGIC: &[u8; 6] = b"TAGATG";
pub const GRAPH_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 6] = b"TAGAT1";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const GRAPH_INDEX_FILE: &str = "graphs.json";
pub const GRAPH_EXTENSION: &str = "tgraph";

const CHECKSUM_LEN: usize = 32;

fn display(path: &Path) -> String {
    path.display().to_string()
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with keys in sorted order, newline-terminated.
pub fn to_canonical_json<S: Serialize>(value: &S) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    write_atomic(path, to_canonical_json(value)?.as_bytes())
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::ParseError {
        path: display(path),
        line: e.line(),
        col: e.column(),
        msg: e.to_string(),
    })
}

// ---------------------------------------------------------------- CSV scans

/// Reads a `T×N` numeric CSV. A first row in which no cell is numeric is
/// taken as a header. Lines and columns in errors are 1-based.
pub fn load_scan_csv(path: &Path) -> Result<Matrix<f64>> {
    let p = display(path);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::ParseError {
            path: p.clone(),
            line: e.position().map_or(k + 1, |pos| pos.line() as usize),
            col: 0,
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(k + 1, |pos| pos.line() as usize);
        if k == 0 && record.iter().all(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::ParseError {
                path: p,
                line,
                col: w.min(record.len()) + 1,
                msg: format!("expected {w} fields, found {}", record.len()),
            });
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::ParseError {
                path: p.clone(),
                line,
                col: c + 1,
                msg: format!("not a number: '{field}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    path: p,
                    line,
                    col: c + 1,
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    let Some(cols) = width else {
        return Err(Error::ParseError {
            path: p,
            line: 1,
            col: 1,
            msg: "no data rows".into(),
        });
    };
    Matrix::from_vec(rows, cols, data)
}

/// Writes a `T×N` CSV with a `roi1..roiN` header; values round-trip exactly.
pub fn write_scan_csv(path: &Path, data: &Matrix<f64>) -> Result<()> {
    let mut out = (1..=data.cols())
        .map(|j| format!("roi{j}"))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for i in 0..data.rows() {
        let row: Vec<String> = data.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

// ---------------------------------------------------------------- manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub subject_id: String,
    pub task: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub gender: u8,
    pub cog_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub roi_count: usize,
    /// Task name → 1-based index.
    pub tasks: BTreeMap<String, usize>,
    pub scans: Vec<ScanEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partitions: Option<PartitionMap>,
}

fn task_set_from(tasks: &BTreeMap<String, usize>) -> Result<TaskSet> {
    let mut by_index = vec![None; tasks.len()];
    for (name, &idx) in tasks {
        match by_index.get_mut(idx.wrapping_sub(1)) {
            Some(slot @ None) => *slot = Some(name.clone()),
            _ => {
                return Err(Error::InvalidManifest(format!(
                    "task indices must be a permutation of 1..={}; '{name}' has {idx}",
                    tasks.len()
                )))
            }
        }
    }
    TaskSet::new(by_index.into_iter().flatten()).map_err(|e| Error::InvalidManifest(e.to_string()))
}

pub fn task_map(tasks: &TaskSet) -> BTreeMap<String, usize> {
    tasks.iter().map(|t| (t.name, t.index)).collect()
}

fn check_partitions(partitions: &Option<PartitionMap>, subjects: &BTreeSet<&str>) -> Result<()> {
    let Some(map) = partitions else {
        return Ok(());
    };
    for (s, &p) in map {
        if !(1..=NUM_PARTITIONS).contains(&p) {
            return Err(Error::InvalidManifest(format!(
                "subject '{s}' has partition {p}, expected 1..={NUM_PARTITIONS}"
            )));
        }
    }
    if let Some(s) = subjects.iter().find(|s| !map.contains_key(**s)) {
        return Err(Error::InvalidManifest(format!("subject '{s}' missing from partitions")));
    }
    Ok(())
}

impl Manifest {
    pub fn validate(&self) -> Result<TaskSet> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::InvalidManifest(format!(
                "version {} (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.roi_count < 2 {
            return Err(Error::InvalidManifest(format!("roi_count {} < 2", self.roi_count)));
        }
        let tasks = task_set_from(&self.tasks)?;
        let mut seen = BTreeSet::new();
        for s in &self.scans {
            if !self.tasks.contains_key(&s.task) {
                return Err(Error::InvalidManifest(format!(
                    "scan {}/{}: task not in task list",
                    s.subject_id, s.task
                )));
            }
            if s.gender > 1 {
                return Err(Error::InvalidManifest(format!(
                    "scan {}/{}: gender {} not in {{0,1}}",
                    s.subject_id, s.task, s.gender
                )));
            }
            if !(0.0..=1.0).contains(&s.cog_score) {
                return Err(Error::InvalidManifest(format!(
                    "scan {}/{}: cog_score {} outside [0,1]",
                    s.subject_id, s.task, s.cog_score
                )));
            }
            if !seen.insert((s.subject_id.as_str(), s.task.as_str())) {
                return Err(Error::InvalidManifest(format!(
                    "duplicate scan {}/{}",
                    s.subject_id, s.task
                )));
            }
        }
        let subjects = self.scans.iter().map(|s| s.subject_id.as_str()).collect();
        check_partitions(&self.partitions, &subjects)?;
        Ok(tasks)
    }
}

pub fn load_manifest(path: &Path) -> Result<(Manifest, TaskSet)> {
    let m: Manifest = read_json(path)?;
    let tasks = m.validate()?;
    Ok((m, tasks))
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads every scan listed in the manifest at `manifest_path`.
pub fn load_scans(manifest_path: &Path) -> Result<(Manifest, TaskSet, Vec<ScanTimeSeries>)> {
    let (manifest, tasks) = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let scans = manifest
        .scans
        .par_iter()
        .map(|e| {
            let path = resolve(base, &e.path);
            let data = load_scan_csv(&path)?;
            if data.cols() != manifest.roi_count {
                return Err(Error::InvalidManifest(format!(
                    "{}: {} columns, manifest says {} ROIs",
                    path.display(),
                    data.cols(),
                    manifest.roi_count
                )));
            }
            ScanTimeSeries::new(e.subject_id.clone(), tasks.by_name(&e.task)?, data, e.gender, e.cog_score)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, tasks, scans))
}

// ---------------------------------------------------------------- container

/// A named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: DType,
    pub rows: usize,
    pub cols: usize,
    pub payload: Vec<u8>,
}

impl RawTensor {
    pub fn from_matrix<T: Real>(name: impl Into<String>, m: &Matrix<T>) -> Self {
        let mut payload = Vec::with_capacity(m.len() * T::DTYPE.width());
        for &v in m.data() {
            v.write_le(&mut payload);
        }
        RawTensor {
            name: name.into(),
            dtype: T::DTYPE,
            rows: m.rows(),
            cols: m.cols(),
            payload,
        }
    }

    pub fn to_matrix<T: Real>(&self) -> Result<Matrix<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::InvalidArgument(format!(
                "tensor '{}' is {}, requested {}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let data = self.payload.chunks_exact(self.dtype.width()).map(T::read_le).collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }
}

fn encode_container(magic: &[u8; 6], version: u32, header: &[u8], tensors: &[RawTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dtype.tag());
        out.extend_from_slice(&(t.rows as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols as u64).to_le_bytes());
        out.extend_from_slice(&t.payload);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptPayload {
            path: display(self.path),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| self.corrupt("length overflows usize"))
    }
}

fn decode_container(
    path: &Path,
    bytes: &[u8],
    magic: &[u8; 6],
    version: u32,
) -> Result<(Vec<u8>, Vec<RawTensor>)> {
    let corrupt = |reason: &str| Error::CorruptPayload {
        path: display(path),
        reason: reason.into(),
    };
    if bytes.len() < magic.len() + 4 + CHECKSUM_LEN {
        return Err(corrupt("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    if &body[..magic.len()] != magic {
        return Err(corrupt("bad magic"));
    }
    let mut c = Cursor {
        bytes: body,
        pos: magic.len(),
        path,
    };
    let found = c.u32()?;
    if found != version {
        return Err(Error::VersionMismatch {
            path: display(path),
            found: found.to_string(),
            expected: version.to_string(),
        });
    }
    let header_len = c.u64()?;
    let header = c.take(header_len)?.to_vec();
    let count = c.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec()).map_err(|_| c.corrupt("tensor name is not UTF-8"))?;
        let tag = c.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| c.corrupt(format!("unknown dtype tag {tag}")))?;
        let rows = c.u64()?;
        let cols = c.u64()?;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(dtype.width()))
            .ok_or_else(|| c.corrupt("tensor size overflows"))?;
        let payload = c.take(len)?.to_vec();
        tensors.push(RawTensor {
            name,
            dtype,
            rows,
            cols,
            payload,
        });
    }
    if c.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok((header, tensors))
}

fn header_json<S: Serialize>(header: &S) -> Result<Vec<u8>> {
    serde_json::to_vec(header).map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn parse_header<D: DeserializeOwned>(path: &Path, header: &[u8]) -> Result<D> {
    serde_json::from_slice(header).map_err(|e| Error::CorruptPayload {
        path: display(path),
        reason: format!("header: {e}"),
    })
}

fn take_tensor(path: &Path, tensors: &mut Vec<RawTensor>, name: &str) -> Result<RawTensor> {
    let k = tensors.iter().position(|t| t.name == name).ok_or_else(|| Error::CorruptPayload {
        path: display(path),
        reason: format!("missing tensor '{name}'"),
    })?;
    Ok(tensors.remove(k))
}

// ---------------------------------------------------------------- graphs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GraphHeader {
    subject_id: String,
    task: TaskId,
    gender: u8,
    cog_score: f64,
    density: f64,
    ridge: f64,
    drop_diagonal: bool,
}

pub fn encode_graph(g: &LabeledGraph) -> Result<Vec<u8>> {
    let header = GraphHeader {
        subject_id: g.subject_id.clone(),
        task: g.task.clone(),
        gender: g.gender,
        cog_score: g.cog_score,
        density: g.graph.density,
        ridge: g.graph.ridge,
        drop_diagonal: g.graph.drop_diagonal,
    };
    let e = &g.graph.edges;
    let index = Matrix::from_vec(e.len(), 2, e.iter().flat_map(|e| [e.i as f64, e.j as f64]).collect())?;
    let weight = Matrix::from_vec(e.len(), 1, e.iter().map(|e| e.w).collect())?;
    let tensors = [
        RawTensor::from_matrix("node_features", &g.graph.node_features),
        RawTensor::from_matrix("edge_index", &index),
        RawTensor::from_matrix("edge_weight", &weight),
    ];
    Ok(encode_container(GRAPH_MAGIC, GRAPH_VERSION, &header_json(&header)?, &tensors))
}

pub fn save_graph(path: &Path, g: &LabeledGraph) -> Result<()> {
    write_atomic(path, &encode_graph(g)?)
}

pub fn load_graph(path: &Path) -> Result<LabeledGraph> {
    let bytes = read_bytes(path)?;
    let (header, mut tensors) = decode_container(path, &bytes, GRAPH_MAGIC, GRAPH_VERSION)?;
    let h: GraphHeader = parse_header(path, &header)?;
    let features = take_tensor(path, &mut tensors, "node_features")?.to_matrix::<f64>()?;
    let index = take_tensor(path, &mut tensors, "edge_index")?.to_matrix::<f64>()?;
    let weight = take_tensor(path, &mut tensors, "edge_weight")?.to_matrix::<f64>()?;
    let n = features.rows();
    let corrupt = |reason: String| Error::CorruptPayload {
        path: display(path),
        reason,
    };
    if index.cols() != 2 || weight.cols() != 1 || index.rows() != weight.rows() {
        return Err(corrupt("edge tensors have inconsistent shapes".into()));
    }
    let mut edges = Vec::with_capacity(index.rows());
    for k in 0..index.rows() {
        let (i, j) = (index[(k, 0)], index[(k, 1)]);
        let valid = |v: f64| v >= 0.0 && v.fract() == 0.0 && (v as usize) < n;
        if !valid(i) || !valid(j) {
            return Err(corrupt(format!("edge {k} has invalid endpoints ({i}, {j})")));
        }
        edges.push(Edge {
            i: i as usize,
            j: j as usize,
            w: weight[(k, 0)],
        });
    }
    Ok(LabeledGraph {
        subject_id: h.subject_id,
        task: h.task,
        gender: h.gender,
        cog_score: h.cog_score,
        graph: BrainGraph {
            node_features: features,
            edges,
            density: h.density,
            ridge: h.ridge,
            drop_diagonal: h.drop_diagonal,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEntry {
    pub subject_id: String,
    pub task: String,
    pub path: String,
}

/// Index of a directory of graph files, written by `build-graphs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphIndex {
    pub version: u32,
    pub roi_count: usize,
    pub tasks: BTreeMap<String, usize>,
    pub density: f64,
    /// Requested ridge; `None` means the per-scan default.
    pub ridge: Option<f64>,
    pub drop_diagonal: bool,
    pub graphs: Vec<GraphEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partitions: Option<PartitionMap>,
}

pub fn graph_file_name(subject_id: &str, task: &str) -> String {
    format!("{subject_id}_{task}.{GRAPH_EXTENSION}")
}

/// A loaded graph directory.
#[derive(Debug, Clone)]
pub struct GraphSet {
    pub index: GraphIndex,
    pub tasks: TaskSet,
    pub graphs: Vec<LabeledGraph>,
}

pub fn load_graph_dir(dir: &Path) -> Result<GraphSet> {
    let index: GraphIndex = read_json(&dir.join(GRAPH_INDEX_FILE))?;
    if index.version != MANIFEST_VERSION {
        return Err(Error::VersionMismatch {
            path: display(&dir.join(GRAPH_INDEX_FILE)),
            found: index.version.to_string(),
            expected: MANIFEST_VERSION.to_string(),
        });
    }
    let tasks = task_set_from(&index.tasks)?;
    let subjects = index.graphs.iter().map(|g| g.subject_id.as_str()).collect();
    check_partitions(&index.partitions, &subjects)?;
    let graphs = index
        .graphs
        .par_iter()
        .map(|e| {
            let path = resolve(dir, &e.path);
            let g = load_graph(&path)?;
            let expected = tasks.by_name(&e.task)?;
            if g.subject_id != e.subject_id || g.task != expected {
                return Err(Error::InvalidManifest(format!(
                    "{}: holds {}/{}, index says {}/{}",
                    path.display(),
                    g.subject_id,
                    g.task.name,
                    e.subject_id,
                    e.task
                )));
            }
            if g.graph.num_nodes() != index.roi_count {
                return Err(Error::InvalidManifest(format!(
                    "{}: {} nodes, index says {}",
                    path.display(),
                    g.graph.num_nodes(),
                    index.roi_count
                )));
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GraphSet { index, tasks, graphs })
}

// ---------------------------------------------------------------- checkpoints

/// Position of the counter-based generators: everything needed to resume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dtype: DType,
    pub rng: RngState,
    pub tasks: TaskSet,
    pub held_out_task: String,
    pub test_partition: u8,
    pub exposure: Exposure,
    pub integrity: Option<Integrity>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<RawTensor>,
}

const VELOCITY_PREFIX: &str = "velocity/";

impl Checkpoint {
    pub fn capture<T: Real>(mut meta: CheckpointMeta, model: &TaGat<T>, state: &TrainState<T>) -> Self {
        meta.dtype = T::DTYPE;
        meta.model = model.config().clone();
        meta.rng.next_epoch = state.next_epoch;
        meta.exposure = state.exposure.clone();
        let mut tensors: Vec<RawTensor> = model
            .params()
            .iter()
            .map(|(name, m)| RawTensor::from_matrix(name, m))
            .collect();
        for ((name, _), v) in model.params().iter().zip(&state.velocity) {
            tensors.push(RawTensor::from_matrix(format!("{VELOCITY_PREFIX}{name}"), v));
        }
        Checkpoint { meta, tensors }
    }

    /// Rebuilds the model and training state at precision `T`.
    pub fn restore<T: Real>(&self) -> Result<(TaGat<T>, TrainState<T>)> {
        let (params, velocity): (Vec<&RawTensor>, Vec<&RawTensor>) =
            self.tensors.iter().partition(|t| !t.name.starts_with(VELOCITY_PREFIX));
        let stored = params
            .iter()
            .map(|t| Ok((t.name.clone(), t.to_matrix::<T>()?)))
            .collect::<Result<Vec<_>>>()?;
        let model = TaGat::from_params(self.meta.model.clone(), &stored)?;
        if !velocity.is_empty() && velocity.len() != stored.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} velocity tensors for {} parameters",
                velocity.len(),
                stored.len()
            )));
        }
        let velocity = velocity.iter().map(|t| t.to_matrix::<T>()).collect::<Result<Vec<_>>>()?;
        let state = TrainState {
            next_epoch: self.meta.rng.next_epoch,
            velocity,
            exposure: self.meta.exposure.clone(),
        };
        Ok((model, state))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        Ok(encode_container(
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            &header_json(&self.meta)?,
            &self.tensors,
        ))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.encode()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_bytes(path)?;
    let (header, tensors) = decode_container(path, &bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    Ok(Checkpoint {
        meta: parse_header(path, &header)?,
        tensors,
    })
}
