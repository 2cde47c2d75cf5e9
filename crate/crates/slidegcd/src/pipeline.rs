//! Two-stage training orchestration (warmup → formal), frozen-buffer
//! inference, and split evaluation.

use crate::backbone::{abmil_embed, mil_head, precomputed_embed, BackboneParams, BackboneVars, MilHeadParams, MilHeadVars};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::{softmax_temp, Matrix};
use crate::metrics::{compute_metrics, Metrics};
use crate::objectives::{cross_entropy, fuse, kd_js, kd_kl, total_loss, FusionParams, FusionVars, InteractionStrategy};
use crate::optim::{cosine_anneal_lr, AdamState};
use crate::rehearsal::{buffer_update_loss, snapshot_nodes, NodeBuffer};
use crate::slidegraph::{build_graph, propagator_for, slide_gnn_forward, ConvVariant, GnnParams, GnnVars};
use crate::tape::{Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneMode {
    Abmil,
    Precomputed,
}

/// Every hyper-parameter of a run. `buffer_len` is the paper's L,
/// `batch_size` its B. Defaults are the synthetic reference configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub classes: usize,
    pub buffer_len: usize,
    pub k: usize,
    pub batch_size: usize,
    pub d_patch: usize,
    pub d_s: usize,
    pub d_proj: usize,
    pub d_attn: usize,
    pub t: f64,
    pub beta: f64,
    pub tau: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub lr_warmup: f64,
    pub lr_formal: f64,
    pub lr_min: f64,
    pub leaky_slope: f64,
    pub strategy: InteractionStrategy,
    pub conv: ConvVariant,
    pub backbone: BackboneMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            classes: 2,
            buffer_len: 64,
            k: 5,
            batch_size: 8,
            d_patch: 32,
            d_s: 32,
            d_proj: 8,
            d_attn: 64,
            t: 1.5,
            beta: 1.75,
            tau: 0.5,
            warmup_epochs: 5,
            total_epochs: 30,
            lr_warmup: 2e-4,
            lr_formal: 1e-4,
            lr_min: 0.0,
            leaky_slope: 0.01,
            strategy: InteractionStrategy::DistillJs,
            conv: ConvVariant::Hyper,
            backbone: BackboneMode::Abmil,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("classes must be >= 2".into()));
        }
        if self.buffer_len == 0 || self.buffer_len % self.classes != 0 {
            return Err(Error::Config(format!(
                "buffer_len {} must be a positive multiple of classes {}",
                self.buffer_len, self.classes
            )));
        }
        if self.k == 0 || self.k >= self.buffer_len + 1 {
            // inference inserts a single query: N = L+1 nodes, so k <= L
            return Err(Error::Config(format!(
                "k = {} must satisfy 1 <= k <= buffer_len = {}",
                self.k, self.buffer_len
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.d_patch == 0 || self.d_s == 0 || self.d_proj == 0 || self.d_attn == 0 {
            return Err(Error::Config("all dimensions must be >= 1".into()));
        }
        if self.backbone == BackboneMode::Precomputed && self.d_patch != self.d_s {
            return Err(Error::Config(format!(
                "precomputed backbone requires d_patch == d_s, got {} vs {}",
                self.d_patch, self.d_s
            )));
        }
        for (name, v) in [("t", self.t), ("tau", self.tau)] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.warmup_epochs == 0 {
            return Err(Error::Config("warmup_epochs must be >= 1".into()));
        }
        if self.total_epochs < self.warmup_epochs {
            return Err(Error::Config(format!(
                "total_epochs {} must be >= warmup_epochs {}",
                self.total_epochs, self.warmup_epochs
            )));
        }
        for (name, lr) in [("lr_warmup", self.lr_warmup), ("lr_formal", self.lr_formal)] {
            if lr <= 0.0 || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        if self.lr_min < 0.0 || self.lr_min > self.lr_formal {
            return Err(Error::Config("lr_min must lie in [0, lr_formal]".into()));
        }
        Ok(())
    }
}

/// All model weights. `w_p` is the fixed random graph-construction
/// projection — stored for reproducibility, never optimized.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub backbone: BackboneParams,
    pub mil_head: MilHeadParams,
    pub gnn: GnnParams,
    pub fusion: FusionParams,
    pub w_p: Matrix,
}

impl ModelParams {
    pub fn init(config: &TrainConfig, rng: &mut ChaCha8Rng) -> Self {
        ModelParams {
            backbone: BackboneParams::init(config.d_patch, config.d_attn, config.d_s, rng),
            mil_head: MilHeadParams::init(config.d_s, config.classes, rng),
            gnn: GnnParams::init(config.d_s, config.classes, config.leaky_slope, rng),
            fusion: FusionParams::init(config.d_s, config.classes, rng),
            w_p: Matrix::randn(config.d_s, config.d_proj, 1.0 / (config.d_s as f64).sqrt(), rng),
        }
    }

    /// Trainable matrices in the fixed optimizer/checkpoint order.
    pub fn trainable(&self) -> Vec<&Matrix> {
        let mut v = self.backbone.params();
        v.extend(self.mil_head.params());
        v.extend(self.gnn.params());
        v.extend(self.fusion.params());
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.backbone.params_mut();
        v.extend(self.mil_head.params_mut());
        v.extend(self.gnn.params_mut());
        v.extend(self.fusion.params_mut());
        v
    }

    fn register(&self, tape: &Tape) -> ModelVars {
        ModelVars {
            backbone: self.backbone.register(tape),
            mil: self.mil_head.register(tape),
            gnn: self.gnn.register(tape),
            fusion: self.fusion.register(tape),
        }
    }
}

struct ModelVars {
    backbone: BackboneVars,
    mil: MilHeadVars,
    gnn: GnnVars,
    fusion: FusionVars,
}

impl ModelVars {
    /// Same order as `ModelParams::trainable`.
    fn var_list(&self) -> Vec<Var> {
        vec![
            self.backbone.v,
            self.backbone.u,
            self.backbone.w,
            self.backbone.proj,
            self.backbone.proj_b,
            self.mil.w,
            self.mil.b,
            self.gnn.theta1,
            self.gnn.theta2,
            self.gnn.attn_w0,
            self.gnn.attn_w1,
            self.gnn.cls_w,
            self.gnn.cls_b,
            self.fusion.cat_w,
            self.fusion.cat_b,
            self.fusion.add_proj_g,
            self.fusion.add_proj_m,
            self.fusion.add_w,
            self.fusion.add_b,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub stage: String,
    pub step: usize,
    pub l_ce_mil: f64,
    pub l_ce_graph: f64,
    pub l_kd: f64,
    pub l_update: f64,
    pub total: f64,
    pub lr: f64,
}

/// A trained model: weights, the frozen Class-Aware Node Buffer, the config
/// that produced it, and the per-step training log.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub buffer: NodeBuffer,
    pub log: Vec<LogRecord>,
}

impl Checkpoint {
    /// Inference-time conv-variant overrides must match the training config.
    pub fn ensure_conv(&self, requested: Option<ConvVariant>) -> Result<()> {
        match requested {
            Some(v) if v != self.config.conv => Err(Error::Config(format!(
                "checkpoint was trained with conv={}, cannot infer with conv={v}",
                self.config.conv
            ))),
            _ => Ok(()),
        }
    }
}

fn embed_batch(
    tape: &Tape,
    config: &TrainConfig,
    vars: &ModelVars,
    bags: &[&Matrix],
) -> Result<Var> {
    let mut rows = Vec::with_capacity(bags.len());
    for patches in bags {
        let s = match config.backbone {
            BackboneMode::Abmil => abmil_embed(tape, patches, &vars.backbone)?.0,
            BackboneMode::Precomputed => precomputed_embed(tape, patches, config.d_s)?,
        };
        rows.push(s);
    }
    tape.concat_rows(&rows)
}

struct FormalOutputs {
    g_logits: Var,
    h_batch: Var,
    l_update: Var,
}

/// Shared graph-branch forward: buffer update loss, node snapshot, graph
/// build, and SlideGNN forward. `update_buffer` distinguishes training
/// (mutating) from inference (frozen).
fn graph_forward(
    tape: &Tape,
    config: &TrainConfig,
    vars: &ModelVars,
    w_p: &Matrix,
    buffer: &mut NodeBuffer,
    s_batch: Var,
    labels: &[usize],
    update_buffer: bool,
) -> Result<FormalOutputs> {
    let centers = buffer.compute_centers(config.tau)?;
    let l_update = buffer_update_loss(tape, s_batch, labels, &centers)?;
    if update_buffer {
        let s_val = tape.value(s_batch);
        buffer.formal_update(&s_val, labels, &centers)?;
    }
    let (x0, _node_labels, mask) = snapshot_nodes(tape, buffer, Some(s_batch), labels)?;
    let graph = build_graph(&tape.value(x0), w_p, config.k)?;
    let prop = propagator_for(config.conv, &graph)?;
    let (g_logits, h_batch) = slide_gnn_forward(tape, x0, &prop, &vars.gnn, &mask)?;
    Ok(FormalOutputs { g_logits, h_batch, l_update })
}

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<Checkpoint> {
    config.validate()?;
    if dataset.class_count != config.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, config expects {}",
            dataset.class_count, config.classes
        )));
    }
    for &i in &dataset.train {
        if dataset.bags[i].dim() != config.d_patch {
            return Err(Error::Input(format!(
                "bag {} has patch dim {}, config expects {}",
                dataset.bags[i].slide_id,
                dataset.bags[i].dim(),
                config.d_patch
            )));
        }
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(config, &mut init_rng);
    let mut adam = AdamState::new(&params.trainable());
    let mut buffer = NodeBuffer::new(config.buffer_len, config.classes, config.d_s)?;
    let mut log = Vec::new();

    let n_train = dataset.train.len();
    let batches_per_epoch = n_train.div_ceil(config.batch_size);
    let total_formal_steps =
        (config.total_epochs - config.warmup_epochs) * batches_per_epoch;
    let mut formal_step = 0usize;
    let mut global_step = 0usize;

    for epoch in 1..=config.total_epochs {
        let warmup = epoch <= config.warmup_epochs;
        let mut order = dataset.train.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(
            config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(config.batch_size) {
            let bags: Vec<&Matrix> = chunk.iter().map(|&i| &dataset.bags[i].embeddings).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.bags[i].label).collect();

            let tape = Tape::new();
            let vars = params.register(&tape);
            let s_batch = embed_batch(&tape, config, &vars, &bags)?;
            let mil_logits = mil_head(&tape, s_batch, &vars.mil)?;
            let (l_ce_mil, _) = cross_entropy(&tape, mil_logits, &labels)?;

            let (root, record, lr) = if warmup {
                let lr = config.lr_warmup;
                let v = tape.value(l_ce_mil).get(0, 0);
                if !v.is_finite() {
                    return Err(Error::Training(format!("warmup CE non-finite at epoch {epoch}")));
                }
                let record = LogRecord {
                    epoch,
                    stage: "warmup".into(),
                    step: global_step,
                    l_ce_mil: v,
                    l_ce_graph: 0.0,
                    l_kd: 0.0,
                    l_update: 0.0,
                    total: v,
                    lr,
                };
                (l_ce_mil, record, lr)
            } else {
                if !buffer.is_full() {
                    return Err(Error::State(format!(
                        "buffer not full at formal start ({}/{}); increase warmup epochs or training data",
                        buffer.len(),
                        buffer.capacity()
                    )));
                }
                let out = graph_forward(
                    &tape, config, &vars, &params.w_p, &mut buffer, s_batch, &labels, true,
                )?;
                let (l_ce_graph, l_kd) = match config.strategy {
                    InteractionStrategy::DistillJs => {
                        let (ce, _) = cross_entropy(&tape, out.g_logits, &labels)?;
                        (ce, Some(kd_js(&tape, out.g_logits, mil_logits, config.t)?))
                    }
                    InteractionStrategy::DistillKl => {
                        let (ce, _) = cross_entropy(&tape, out.g_logits, &labels)?;
                        (ce, Some(kd_kl(&tape, out.g_logits, mil_logits, config.t)?))
                    }
                    _ => {
                        let fused = fuse(
                            &tape,
                            config.strategy,
                            out.g_logits,
                            mil_logits,
                            out.h_batch,
                            s_batch,
                            &vars.fusion,
                        )?;
                        let (ce, _) = cross_entropy(&tape, fused, &labels)?;
                        (ce, None)
                    }
                };
                let (total, bd) = total_loss(
                    &tape,
                    config.strategy,
                    config.beta,
                    l_ce_mil,
                    l_ce_graph,
                    l_kd,
                    out.l_update,
                )?;
                let lr = cosine_anneal_lr(formal_step, total_formal_steps, config.lr_formal, config.lr_min);
                formal_step += 1;
                let record = LogRecord {
                    epoch,
                    stage: "formal".into(),
                    step: global_step,
                    l_ce_mil: bd.l_ce_mil,
                    l_ce_graph: bd.l_ce_graph,
                    l_kd: bd.l_kd,
                    l_update: bd.l_update,
                    total: bd.total,
                    lr,
                };
                (total, record, lr)
            };

            let mut grads = tape.backward(root)?;
            let grad_vec: Vec<Option<Matrix>> =
                vars.var_list().into_iter().map(|v| grads.take(v)).collect();
            adam.step(&mut params.trainable_mut(), &grad_vec, lr)?;

            if warmup {
                // buffer stores the embedding snapshot that produced this
                // batch's loss, not a re-embedding under the stepped weights
                let s_val = tape.value(s_batch);
                buffer.warmup_push(&s_val, &labels)?;
            }
            log.push(record);
            global_step += 1;
        }
    }
    buffer.check_invariants()?;
    Ok(Checkpoint { config: config.clone(), params, buffer, log })
}

#[derive(Clone, Debug, Serialize)]
pub struct Neighbor {
    pub node: usize,
    pub label: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct InferResult {
    pub predicted: usize,
    pub probabilities: Vec<f64>,
    /// Members of the query's hyperedge (buffer nodes), with labels.
    pub neighbors: Vec<Neighbor>,
    pub graph_predicted: usize,
    pub mil_predicted: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Single-query inference against the frozen buffer (N = L+1 graph nodes).
/// The checkpoint is never mutated.
pub fn infer(ckpt: &Checkpoint, patches: &Matrix) -> Result<InferResult> {
    let config = &ckpt.config;
    if patches.cols() != config.d_patch {
        return Err(Error::Input(format!(
            "query bag dim {} != configured d_patch {}",
            patches.cols(),
            config.d_patch
        )));
    }
    let tape = Tape::new();
    let vars = ckpt.params.register(&tape);
    let s = embed_batch(&tape, config, &vars, &[patches])?;
    let mil_logits = mil_head(&tape, s, &vars.mil)?;

    let (x0, node_labels, mask) = snapshot_nodes(&tape, &ckpt.buffer, Some(s), &[0])?;
    let graph = build_graph(&tape.value(x0), &ckpt.params.w_p, config.k)?;
    let prop = propagator_for(config.conv, &graph)?;
    let (g_logits, h_batch) = slide_gnn_forward(&tape, x0, &prop, &vars.gnn, &mask)?;
    let final_logits = fuse(
        &tape,
        config.strategy,
        g_logits,
        mil_logits,
        h_batch,
        s,
        &vars.fusion,
    )?;

    let final_row = tape.value(final_logits);
    let probabilities = softmax_temp(final_row.row(0), 1.0)?;
    let query_node = ckpt.buffer.len();
    let neighbors = graph.hyperedges[query_node]
        .iter()
        .copied()
        .filter(|&m| m != query_node)
        .map(|m| Neighbor { node: m, label: node_labels[m] })
        .collect();
    Ok(InferResult {
        predicted: argmax(&probabilities),
        probabilities,
        neighbors,
        graph_predicted: argmax(tape.value(g_logits).row(0)),
        mil_predicted: argmax(tape.value(mil_logits).row(0)),
    })
}

/// Slide embedding of one bag under the frozen checkpoint weights (1×D_s).
pub fn embed_bag(ckpt: &Checkpoint, patches: &Matrix) -> Result<Matrix> {
    if patches.cols() != ckpt.config.d_patch {
        return Err(Error::Input(format!(
            "bag dim {} != configured d_patch {}",
            patches.cols(),
            ckpt.config.d_patch
        )));
    }
    let tape = Tape::new();
    let vars = ckpt.params.register(&tape);
    let s = embed_batch(&tape, &ckpt.config, &vars, &[patches])?;
    Ok(tape.value(s))
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    /// Accuracy of the graph branch alone over the split.
    pub graph_accuracy: f64,
    /// Accuracy of the MIL branch alone over the split.
    pub mil_accuracy: f64,
}

/// Per-slide inference over a split of a dataset.
pub fn evaluate(ckpt: &Checkpoint, dataset: &Dataset, indices: &[usize]) -> Result<EvalReport> {
    let bags: Vec<&crate::data::PatchBag> = indices.iter().map(|&i| &dataset.bags[i]).collect();
    evaluate_bags(ckpt, &bags)
}

/// Per-slide inference over a plain bag list with deterministic ordered
/// reduction.
pub fn evaluate_bags(ckpt: &Checkpoint, bags: &[&crate::data::PatchBag]) -> Result<EvalReport> {
    if bags.is_empty() {
        return Err(Error::Input("empty evaluation split".into()));
    }
    let run = |bag: &&crate::data::PatchBag| -> Result<(usize, InferResult)> {
        Ok((bag.label, infer(ckpt, &bag.embeddings)?))
    };
    #[cfg(feature = "parallel")]
    let results: Vec<(usize, InferResult)> =
        bags.par_iter().map(run).collect::<Result<Vec<_>>>()?;
    #[cfg(not(feature = "parallel"))]
    let results: Vec<(usize, InferResult)> = bags.iter().map(run).collect::<Result<Vec<_>>>()?;

    let labels: Vec<usize> = results.iter().map(|(y, _)| *y).collect();
    let preds: Vec<usize> = results.iter().map(|(_, r)| r.predicted).collect();
    let scores: Vec<Vec<f64>> = results.iter().map(|(_, r)| r.probabilities.clone()).collect();
    let metrics = compute_metrics(&labels, &preds, &scores, ckpt.config.classes)?;
    let frac = |ok: usize| ok as f64 / results.len() as f64;
    let graph_accuracy =
        frac(results.iter().filter(|(y, r)| r.graph_predicted == *y).count());
    let mil_accuracy = frac(results.iter().filter(|(y, r)| r.mil_predicted == *y).count());
    Ok(EvalReport { metrics, graph_accuracy, mil_accuracy })
}
