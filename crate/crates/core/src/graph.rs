//! Functional-connectome graphs from ROI-averaged time series.
//!
//! Node features are the rows of the Pearson correlation matrix. Edges are
//! the strongest positive partial correlations, estimated from a
//! ridge-regularized precision matrix because scans usually have fewer
//! timepoints than regions.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{
    covariance, default_ridge, partial_corr, pearson_corr_matrix, precision_ridge, Matrix,
};

/// Task names in acquisition-list order; index `k` is position + 1.
pub const HCP_TASKS: [&str; 7] = [
    "emotion",
    "gambling",
    "language",
    "motor",
    "relational",
    "social",
    "wm",
];

pub const DEFAULT_DENSITY: f64 = 0.05;

/// One task category, 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskId {
    pub index: usize,
    pub name: String,
}

/// Ordered, duplicate-free set of task names for one experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSet {
    names: Vec<String>,
}

impl TaskSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::InvalidArgument("empty task name".into()));
            }
            if names[..i].contains(n) {
                return Err(Error::InvalidArgument(format!("duplicate task name '{n}'")));
            }
        }
        if names.is_empty() {
            return Err(Error::InvalidArgument("task set is empty".into()));
        }
        Ok(TaskSet { names })
    }

    /// The first `m` canonical task names, or `task1..taskM` beyond seven.
    pub fn canonical(m: usize) -> Result<Self> {
        if m <= HCP_TASKS.len() {
            Self::new(HCP_TASKS[..m].iter().copied())
        } else {
            Self::new((1..=m).map(|k| format!("task{k}")))
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn by_name(&self, name: &str) -> Result<TaskId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|p| TaskId {
                index: p + 1,
                name: name.to_string(),
            })
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn by_index(&self, index: usize) -> Result<TaskId> {
        if index == 0 || index > self.names.len() {
            return Err(Error::UnknownTask(index.to_string()));
        }
        Ok(TaskId {
            index,
            name: self.names[index - 1].clone(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.names.iter().enumerate().map(|(p, n)| TaskId {
            index: p + 1,
            name: n.clone(),
        })
    }
}

/// One subject-task acquisition: `T×N` ROI signals plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanTimeSeries {
    pub subject_id: String,
    pub task: TaskId,
    pub data: Matrix<f64>,
    pub gender: u8,
    pub cog_score: f64,
}

impl ScanTimeSeries {
    pub fn new(
        subject_id: impl Into<String>,
        task: TaskId,
        data: Matrix<f64>,
        gender: u8,
        cog_score: f64,
    ) -> Result<Self> {
        if gender > 1 {
            return Err(Error::InvalidArgument(format!("gender label {gender} not in {{0,1}}")));
        }
        if !(0.0..=1.0).contains(&cog_score) {
            return Err(Error::InvalidArgument(format!(
                "cognitive score {cog_score} outside [0, 1]"
            )));
        }
        if !data.is_finite() {
            return Err(Error::InvalidArgument("time series contains non-finite values".into()));
        }
        Ok(ScanTimeSeries {
            subject_id: subject_id.into(),
            task,
            data,
            gender,
            cog_score,
        })
    }

    pub fn timepoints(&self) -> usize {
        self.data.rows()
    }

    pub fn rois(&self) -> usize {
        self.data.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub w: f64,
}

/// Knobs for graph construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphOptions {
    pub density: f64,
    /// `None` selects `1e-3 · trace(cov) / N` per scan.
    pub ridge: Option<f64>,
    /// Zero the self-correlation on the node-feature diagonal.
    pub drop_diagonal: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            density: DEFAULT_DENSITY,
            ridge: None,
            drop_diagonal: false,
        }
    }
}

/// Undirected weighted graph over ROIs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrainGraph {
    pub node_features: Matrix<f64>,
    /// Sorted by `(i, j)`, `i < j`, all weights positive.
    pub edges: Vec<Edge>,
    pub density: f64,
    pub ridge: f64,
    pub drop_diagonal: bool,
}

impl BrainGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    /// Relabels node `v` as `perm⁻¹(v)`: new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> BrainGraph {
        let n = self.num_nodes();
        let mut inv = vec![0; n];
        for (k, &old) in perm.iter().enumerate() {
            inv[old] = k;
        }
        let node_features = if self.feature_dim() == n {
            self.node_features.permute_symmetric(perm)
        } else {
            Matrix::from_fn(n, self.feature_dim(), |k, c| self.node_features[(perm[k], c)])
        };
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .map(|e| {
                let (a, b) = (inv[e.i], inv[e.j]);
                Edge {
                    i: a.min(b),
                    j: a.max(b),
                    w: e.w,
                }
            })
            .collect();
        edges.sort_by_key(|e| (e.i, e.j));
        BrainGraph {
            node_features,
            edges,
            ..self.clone()
        }
    }
}

/// A graph together with the identity and labels of the scan it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledGraph {
    pub subject_id: String,
    pub task: TaskId,
    pub gender: u8,
    pub cog_score: f64,
    pub graph: BrainGraph,
}

/// `⌈density · N(N−1)/2⌉`.
pub fn edge_count(n: usize, density: f64) -> usize {
    let pairs = n * n.saturating_sub(1) / 2;
    let x = density * pairs as f64;
    // Strip representation error so that exact products are not rounded up.
    let x = x - x.abs() * 1e-12;
    (x.ceil().max(0.0) as usize).min(pairs)
}

/// Pearson correlation rows, self-correlation kept unless `drop_diagonal`.
pub fn build_node_features(ts: &ScanTimeSeries, drop_diagonal: bool) -> Result<Matrix<f64>> {
    let mut corr = pearson_corr_matrix(&ts.data)?;
    if drop_diagonal {
        for i in 0..corr.rows() {
            corr[(i, i)] = 0.0;
        }
    }
    Ok(corr)
}

/// Keeps the top `⌈density · N(N−1)/2⌉` unordered pairs of `values`, ranked
/// by signed value (ties by `(i, j)`), and requires all of them positive.
pub fn top_positive_edges(values: &Matrix<f64>, density: f64) -> Result<Vec<Edge>> {
    if !(density > 0.0 && density < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "edge density must be in (0, 1), got {density}"
        )));
    }
    let n = values.rows();
    let mut pairs: Vec<Edge> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push(Edge {
                i,
                j,
                w: values[(i, j)],
            });
        }
    }
    pairs.sort_by(|a, b| {
        b.w.partial_cmp(&a.w)
            .unwrap_or(Ordering::Equal)
            .then((a.i, a.j).cmp(&(b.i, b.j)))
    });
    pairs.truncate(edge_count(n, density));
    if let Some(bad) = pairs.iter().find(|e| !(e.w > 0.0)) {
        return Err(Error::NonPositiveEdgeWeight {
            i: bad.i,
            j: bad.j,
            w: bad.w,
        });
    }
    pairs.sort_by_key(|e| (e.i, e.j));
    Ok(pairs)
}

/// Edges from ridge partial correlations. Returns the edges and the ridge used.
pub fn build_edges(ts: &ScanTimeSeries, density: f64, ridge: Option<f64>) -> Result<(Vec<Edge>, f64)> {
    let cov = covariance(&ts.data)?;
    let ridge = ridge.unwrap_or_else(|| default_ridge(&cov));
    let prec = precision_ridge(&cov, ridge)?;
    let pc = partial_corr(&prec)?;
    Ok((top_positive_edges(&pc, density)?, ridge))
}

pub fn build_graph(ts: &ScanTimeSeries, opts: &GraphOptions) -> Result<BrainGraph> {
    let node_features = build_node_features(ts, opts.drop_diagonal)?;
    let (edges, ridge) = build_edges(ts, opts.density, opts.ridge)?;
    Ok(BrainGraph {
        node_features,
        edges,
        density: opts.density,
        ridge,
        drop_diagonal: opts.drop_diagonal,
    })
}

pub fn build_labeled(ts: &ScanTimeSeries, opts: &GraphOptions) -> Result<LabeledGraph> {
    Ok(LabeledGraph {
        subject_id: ts.subject_id.clone(),
        task: ts.task.clone(),
        gender: ts.gender,
        cog_score: ts.cog_score,
        graph: build_graph(ts, opts)?,
    })
}

/// Builds every scan in parallel; output order matches input order.
pub fn build_all(scans: &[ScanTimeSeries], opts: &GraphOptions) -> Result<Vec<LabeledGraph>> {
    let n = scans.first().map(ScanTimeSeries::rois);
    if let Some(bad) = scans.iter().find(|s| Some(s.rois()) != n) {
        return Err(Error::InvalidArgument(format!(
            "scan {}/{} has {} ROIs, expected {}",
            bad.subject_id,
            bad.task.name,
            bad.rois(),
            n.unwrap_or(0)
        )));
    }
    scans.par_iter().map(|s| build_labeled(s, opts)).collect()
}
