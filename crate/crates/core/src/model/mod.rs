//! Task-aware graph attention network.
//!
//! A two-layer GAT encoder reads a brain graph; each layer's node outputs are
//! mean- and max-pooled and the four pooled vectors are concatenated into the
//! graph embedding. A memory bank holds one learnable vector per task; the
//! selected row passes through a single linear projection and is appended to
//! the embedding. Two four-layer MLP heads then produce the class
//! probabilities (softmax over two channels) and a score in `(0, 1)`.

mod params;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use params::ParamStore;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{BrainGraph, TaskId};
use crate::math::{Matrix, Real, DEFAULT_NEGATIVE_SLOPE};
use crate::rng::{stream, DOMAIN_DROPOUT, DOMAIN_INIT};

pub const MLP_LAYERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    /// GAT output width per layer, all heads together.
    pub d_h: usize,
    pub d_mem: usize,
    pub d_proj: usize,
    pub num_tasks: usize,
    pub heads: usize,
    /// Widths of the three hidden MLP layers.
    pub mlp_hidden: Vec<usize>,
    pub dropout: f64,
    pub negative_slope: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size configuration: 2048-wide GAT and memory bank, 7 tasks.
    pub fn full(d_in: usize) -> Self {
        ModelConfig {
            d_in,
            d_h: 2048,
            d_mem: 2048,
            d_proj: 2048,
            num_tasks: 7,
            heads: 1,
            mlp_hidden: vec![1024, 128, 16],
            dropout: 0.2,
            negative_slope: DEFAULT_NEGATIVE_SLOPE,
            seed: 0,
        }
    }

    /// Small configuration for gradient checks and unit tests.
    pub fn toy(d_in: usize, num_tasks: usize) -> Self {
        ModelConfig {
            d_in,
            d_h: 4,
            d_mem: 4,
            d_proj: 4,
            num_tasks,
            heads: 1,
            mlp_hidden: vec![8, 6, 4],
            dropout: 0.2,
            negative_slope: DEFAULT_NEGATIVE_SLOPE,
            seed: 0,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        4 * self.d_h
    }

    pub fn head_input_dim(&self) -> usize {
        self.embedding_dim() + self.d_proj
    }

    pub fn head_dim(&self) -> usize {
        self.d_h / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_in == 0 || self.d_h == 0 || self.d_mem == 0 || self.d_proj == 0 {
            return bad("all widths must be positive".into());
        }
        if self.num_tasks == 0 {
            return bad("at least one task is required".into());
        }
        if self.heads == 0 || !self.d_h.is_multiple_of(self.heads) {
            return bad(format!(
                "d_h = {} is not divisible into {} heads",
                self.d_h, self.heads
            ));
        }
        if self.mlp_hidden.len() != MLP_LAYERS - 1 || self.mlp_hidden.contains(&0) {
            return bad(format!(
                "MLP needs {} positive hidden widths, got {:?}",
                MLP_LAYERS - 1,
                self.mlp_hidden
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.negative_slope.is_finite() && self.negative_slope >= 0.0) {
            return bad(format!("invalid negative slope {}", self.negative_slope));
        }
        Ok(())
    }
}

/// A graph prepared for attention: self-loops plus both directions of every edge.
#[derive(Debug, Clone)]
pub struct GraphInput<T> {
    pub features: Matrix<T>,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    /// `E×1` arc weights.
    pub weights: Matrix<T>,
    all_nodes: Arc<[usize]>,
}

impl<T: Real> GraphInput<T> {
    pub fn new(features: Matrix<T>, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let n = features.rows();
        if n == 0 {
            return Err(Error::InvalidArgument("graph has no nodes".into()));
        }
        let mut src = Vec::with_capacity(n + 2 * edges.len());
        let mut dst = Vec::with_capacity(n + 2 * edges.len());
        let mut w = Vec::with_capacity(n + 2 * edges.len());
        for i in 0..n {
            src.push(i);
            dst.push(i);
            w.push(T::one());
        }
        for &(i, j, wt) in edges {
            for idx in [i, j] {
                if idx >= n {
                    return Err(Error::IndexOutOfRange { index: idx, len: n });
                }
            }
            if i == j {
                return Err(Error::InvalidArgument(format!("self-edge at node {i}")));
            }
            src.extend([i, j]);
            dst.extend([j, i]);
            w.extend([T::c(wt), T::c(wt)]);
        }
        Ok(GraphInput {
            features,
            src: src.into(),
            dst: dst.into(),
            weights: Matrix::col_vector(w),
            all_nodes: vec![0; n].into(),
        })
    }

    pub fn from_graph(g: &BrainGraph) -> Result<Self> {
        let edges: Vec<_> = g.edges.iter().map(|e| (e.i, e.j, e.w)).collect();
        Self::new(g.node_features.cast(), &edges)
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_arcs(&self) -> usize {
        self.src.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train(DropoutKey),
}

#[derive(Debug, Clone, Copy)]
struct HeadSlots {
    weight: usize,
    att_dst: usize,
    att_src: usize,
    edge_coef: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    gat: [Vec<HeadSlots>; 2],
    bank: usize,
    proj_weight: usize,
    proj_bias: usize,
    cls: Vec<(usize, usize)>,
    reg: Vec<(usize, usize)>,
}

/// Output of one eval-mode forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction<T> {
    pub class_probs: [T; 2],
    pub score: T,
}

impl<T: Real> Prediction<T> {
    pub fn predicted_class(&self) -> u8 {
        u8::from(self.class_probs[1] > self.class_probs[0])
    }
}

/// Batched outputs on a tape: `B×2` class probabilities and `B×1` scores.
#[derive(Debug, Clone, Copy)]
pub struct BatchOutput {
    pub probs: Var,
    pub scores: Var,
}

#[derive(Debug, Clone)]
pub struct TaGat<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

fn glorot<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Matrix<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::c(rng.random_range(-bound..bound)))
}

fn fan_in_uniform<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<T> {
    let bound = 1.0 / (rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::c(rng.random_range(-bound..bound)))
}

impl<T: Real> TaGat<T> {
    /// Builds and initializes a model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, &[DOMAIN_INIT]);
        let mut params = ParamStore::new();
        let dh = config.head_dim();

        let mut gat = [Vec::new(), Vec::new()];
        for (layer, slots) in gat.iter_mut().enumerate() {
            let fan_in = if layer == 0 { config.d_in } else { config.d_h };
            for h in 0..config.heads {
                let p = format!("gat{}.head{h}", layer + 1);
                let weight = params.push(format!("{p}.weight"), glorot(&mut rng, fan_in, dh, fan_in, dh));
                let att_dst = params.push(format!("{p}.att_dst"), glorot(&mut rng, dh, 1, 2 * dh, 1));
                let att_src = params.push(format!("{p}.att_src"), glorot(&mut rng, dh, 1, 2 * dh, 1));
                let edge_coef = params.push(format!("{p}.edge_coef"), Matrix::zeros(1, 1));
                slots.push(HeadSlots {
                    weight,
                    att_dst,
                    att_src,
                    edge_coef,
                });
            }
        }

        let normal = Normal::new(0.0, 1.0 / (config.d_mem as f64).sqrt())
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let bank_vals = Matrix::from_fn(config.num_tasks, config.d_mem, |_, _| {
            T::c(normal.sample(&mut rng))
        });
        let bank = params.push("bank.rows", bank_vals);
        let proj_weight = params.push(
            "bank.proj_weight",
            fan_in_uniform(&mut rng, config.d_mem, config.d_proj),
        );
        let proj_bias = params.push("bank.proj_bias", Matrix::zeros(1, config.d_proj));

        let mut head = |name: &str, out: usize, params: &mut ParamStore<T>| {
            let mut widths = vec![config.head_input_dim()];
            widths.extend_from_slice(&config.mlp_hidden);
            widths.push(out);
            (0..MLP_LAYERS)
                .map(|l| {
                    let w = params.push(
                        format!("{name}.{l}.weight"),
                        fan_in_uniform(&mut rng, widths[l], widths[l + 1]),
                    );
                    let b = params.push(format!("{name}.{l}.bias"), Matrix::zeros(1, widths[l + 1]));
                    (w, b)
                })
                .collect::<Vec<_>>()
        };
        let cls = head("cls", 2, &mut params);
        let reg = head("reg", 1, &mut params);

        Ok(TaGat {
            config,
            params,
            layout: Layout {
                gat,
                bank,
                proj_weight,
                proj_bias,
                cls,
                reg,
            },
        })
    }

    /// Rebuilds a model from stored tensors; names and shapes must match `config`.
    pub fn from_params(config: ModelConfig, stored: &[(String, Matrix<T>)]) -> Result<Self> {
        let mut model = Self::new(config)?;
        if stored.len() != model.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                stored.len()
            )));
        }
        for (slot, (name, _)) in stored.iter().enumerate() {
            if model.params.name(slot) != name {
                return Err(Error::InvalidArgument(format!(
                    "tensor {slot} is '{name}', expected '{}'",
                    model.params.name(slot)
                )));
            }
        }
        model
            .params
            .set_values(stored.iter().map(|(_, m)| m.clone()).collect())?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bank_slot(&self) -> usize {
        self.layout.bank
    }

    pub fn bank(&self) -> &Matrix<T> {
        self.params.get(self.layout.bank)
    }

    /// Slot index of the first classification-head weight.
    pub fn head_input_slot(&self) -> usize {
        self.layout.cls[0].0
    }

    fn check_task(&self, task: &TaskId) -> Result<()> {
        if task.index == 0 || task.index > self.config.num_tasks {
            return Err(Error::UnknownTask(format!("{} (index {})", task.name, task.index)));
        }
        Ok(())
    }

    /// One GAT layer over `x` (`N×d_layer_in`), heads concatenated.
    pub fn gat_layer(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        layer: usize,
        x: Var,
        g: &GraphInput<T>,
    ) -> Result<Var> {
        let n = g.num_nodes();
        let slope = T::c(self.config.negative_slope);
        let weights = tape.constant(g.weights.clone());
        let mut outs = Vec::with_capacity(self.config.heads);
        for h in &self.layout.gat[layer] {
            let z = tape.matmul(x, vars[h.weight])?;
            let s_dst = tape.matmul(z, vars[h.att_dst])?;
            let s_src = tape.matmul(z, vars[h.att_src])?;
            let e_dst = tape.gather_rows(s_dst, g.dst.clone())?;
            let e_src = tape.gather_rows(s_src, g.src.clone())?;
            let e = tape.add(e_dst, e_src)?;
            let ew = tape.mul(weights, vars[h.edge_coef])?;
            let e = tape.add(e, ew)?;
            let e = tape.leaky_relu(e, slope)?;
            let alpha = tape.segment_softmax(e, g.dst.clone(), n)?;
            let msg = tape.gather_rows(z, g.src.clone())?;
            let msg = tape.mul(msg, alpha)?;
            outs.push(tape.segment_sum(msg, g.dst.clone(), n)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            tape.concat_cols(&outs)
        }
    }

    /// Graph embedding `[mean₁ ‖ max₁ ‖ mean₂ ‖ max₂]`, `1×4·d_h`.
    pub fn encode(&self, tape: &mut Tape<T>, vars: &[Var], g: &GraphInput<T>) -> Result<Var> {
        if g.features.cols() != self.config.d_in {
            return Err(Error::shape(
                "encode",
                g.features.shape(),
                (g.num_nodes(), self.config.d_in),
            ));
        }
        let x = tape.constant(g.features.clone());
        let h1 = self.gat_layer(tape, vars, 0, x, g)?;
        let h2 = self.gat_layer(tape, vars, 1, h1, g)?;
        let mut pooled = Vec::with_capacity(4);
        for h in [h1, h2] {
            pooled.push(tape.segment_mean(h, g.all_nodes.clone(), 1)?);
            pooled.push(tape.segment_max(h, g.all_nodes.clone(), 1)?);
        }
        tape.concat_cols(&pooled)
    }

    /// Projected task representation, `1×d_proj`.
    pub fn bank_lookup(&self, tape: &mut Tape<T>, vars: &[Var], task: &TaskId) -> Result<Var> {
        self.check_task(task)?;
        let row = tape.gather_rows(vars[self.layout.bank], vec![task.index - 1].into())?;
        let p = tape.matmul(row, vars[self.layout.proj_weight])?;
        tape.add(p, vars[self.layout.proj_bias])
    }

    fn mlp(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        layers: &[(usize, usize)],
        mut x: Var,
        mode: Mode,
        layer_base: u64,
    ) -> Result<Var> {
        for (l, &(w, b)) in layers.iter().enumerate() {
            x = tape.matmul(x, vars[w])?;
            x = tape.add(x, vars[b])?;
            if l + 1 < layers.len() {
                x = tape.silu(x)?;
                x = match mode {
                    Mode::Eval => tape.dropout::<ChaCha8Rng>(x, self.config.dropout, None)?,
                    Mode::Train(key) => {
                        let mut rng = stream(
                            key.seed,
                            &[DOMAIN_DROPOUT, key.epoch, key.batch, layer_base + l as u64],
                        );
                        tape.dropout(x, self.config.dropout, Some(&mut rng))?
                    }
                };
            }
        }
        Ok(x)
    }

    /// Forward pass over a batch of `(graph, task)` pairs.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        items: &[(&GraphInput<T>, &TaskId)],
        mode: Mode,
    ) -> Result<BatchOutput> {
        if items.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut rows = Vec::with_capacity(items.len());
        for (g, task) in items {
            let emb = self.encode(tape, vars, g)?;
            let ctx = self.bank_lookup(tape, vars, task)?;
            rows.push(tape.concat_cols(&[emb, ctx])?);
        }
        let input = tape.concat_rows(&rows)?;
        let logits = self.mlp(tape, vars, &self.layout.cls, input, mode, 0)?;
        let probs = tape.softmax_rows(logits)?;
        let raw = self.mlp(tape, vars, &self.layout.reg, input, mode, MLP_LAYERS as u64)?;
        let scores = tape.sigmoid(raw)?;
        Ok(BatchOutput { probs, scores })
    }

    /// Single-scan forward on a tape.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        g: &GraphInput<T>,
        task: &TaskId,
        mode: Mode,
    ) -> Result<BatchOutput> {
        self.forward_batch(tape, vars, &[(g, task)], mode)
    }

    /// Eval-mode prediction on the model's current parameters.
    pub fn predict(&self, g: &GraphInput<T>, task: &TaskId) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|(_, m)| tape.constant(m.clone())).collect();
        let out = self.forward(&mut tape, &vars, g, task, Mode::Eval)?;
        let p = tape.value(out.probs);
        Ok(Prediction {
            class_probs: [p[(0, 0)], p[(0, 1)]],
            score: tape.value(out.scores).item(),
        })
    }

    /// Eval-mode graph embedding on the current parameters.
    pub fn embed(&self, g: &GraphInput<T>) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|(_, m)| tape.constant(m.clone())).collect();
        let e = self.encode(&mut tape, &vars, g)?;
        Ok(tape.value(e).clone())
    }
}
