//! Adaptive slide-graph construction and the SlideGNN head.
//!
//! Each node is joined with its k nearest neighbors (under a fixed random
//! linear projection of the node features) into one hyperedge; two
//! hypergraph-convolution layers, hop concatenation, channel attention with
//! mean-centered scores, and a linear classifier over the batch rows follow.
//! A simple-graph GCN variant star-expands the hyperedges.

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::sparse::SparseSym;
use crate::tape::{Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvVariant {
    Hyper,
    Gcn,
}

impl std::fmt::Display for ConvVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConvVariant::Hyper => write!(f, "hyper"),
            ConvVariant::Gcn => write!(f, "gcn"),
        }
    }
}

/// Node features, projected coordinates, and one hyperedge per node
/// (anchor first, then its k neighbors in selection order).
#[derive(Clone, Debug)]
pub struct SlideGraph {
    pub x0: Matrix,
    pub projected: Matrix,
    pub hyperedges: Vec<Vec<usize>>,
    pub k: usize,
}

/// k nearest neighbors of each node in projection space. Euclidean distance,
/// self excluded, ties broken toward the smaller index.
fn knn_of(projected: &Matrix, anchor: usize, k: usize) -> Vec<usize> {
    let n = projected.rows();
    let arow = projected.row(anchor);
    let mut cand: Vec<(f64, usize)> = (0..n)
        .filter(|&j| j != anchor)
        .map(|j| (squared_distance(arow, projected.row(j)), j))
        .collect();
    cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    cand.truncate(k);
    cand.into_iter().map(|(_, j)| j).collect()
}

/// Adaptive graph generation: P = X0 · W_p, then one hyperedge
/// {anchor} ∪ kNN(anchor) per node.
pub fn build_graph(x0: &Matrix, w_p: &Matrix, k: usize) -> Result<SlideGraph> {
    let n = x0.rows();
    if k == 0 || k >= n {
        return Err(Error::Parameter(format!("k = {k} must satisfy 0 < k < node count {n}")));
    }
    if x0.cols() != w_p.rows() {
        return Err(Error::dim("build_graph projection", x0.shape(), w_p.shape()));
    }
    if w_p.cols() == 0 {
        return Err(Error::Parameter("projection must have >= 1 column".into()));
    }
    let projected = x0.matmul(w_p)?;

    let edge_of = |i: usize| -> Vec<usize> {
        let mut edge = Vec::with_capacity(k + 1);
        edge.push(i);
        edge.extend(knn_of(&projected, i, k));
        edge
    };
    #[cfg(feature = "parallel")]
    let hyperedges: Vec<Vec<usize>> = (0..n).into_par_iter().map(edge_of).collect();
    #[cfg(not(feature = "parallel"))]
    let hyperedges: Vec<Vec<usize>> = (0..n).map(edge_of).collect();

    Ok(SlideGraph { x0: x0.clone(), projected, hyperedges, k })
}

/// Hypergraph propagation matrix D_v^{-1/2} M D_e^{-1} Mᵀ D_v^{-1/2} with
/// identity hyperedge weights, materialized as a symmetric sparse matrix.
pub fn hyper_propagator(hyperedges: &[Vec<usize>], n: usize) -> Result<SparseSym> {
    let mut degree = vec![0usize; n];
    for edge in hyperedges {
        for &i in edge {
            if i >= n {
                return Err(Error::Index(format!("hyperedge member {i} >= node count {n}")));
            }
            degree[i] += 1;
        }
    }
    if let Some(i) = degree.iter().position(|&d| d == 0) {
        return Err(Error::State(format!("node {i} is isolated (degree 0)")));
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|&d| 1.0 / (d as f64).sqrt()).collect();
    let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
    for edge in hyperedges {
        if edge.is_empty() {
            return Err(Error::Input("empty hyperedge".into()));
        }
        let inv_card = 1.0 / edge.len() as f64;
        for &i in edge {
            for &j in edge {
                *rows[i].entry(j).or_insert(0.0) += inv_sqrt[i] * inv_card * inv_sqrt[j];
            }
        }
    }
    Ok(SparseSym::from_rows(
        rows.into_iter().map(|r| r.into_iter().collect()).collect(),
    ))
}

/// Star-expand hyperedges (anchor <-> each member, deduplicated), add self
/// loops, and build the symmetric-normalized adjacency D̂^{-1/2} Â D̂^{-1/2}.
pub fn gcn_propagator(hyperedges: &[Vec<usize>], n: usize) -> Result<SparseSym> {
    let mut adj: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
    for i in 0..n {
        adj[i].insert(i, 1.0); // self loop
    }
    for edge in hyperedges {
        let Some((&anchor, members)) = edge.split_first() else {
            return Err(Error::Input("empty hyperedge".into()));
        };
        if anchor >= n {
            return Err(Error::Index(format!("anchor {anchor} >= node count {n}")));
        }
        for &m in members {
            if m >= n {
                return Err(Error::Index(format!("member {m} >= node count {n}")));
            }
            if m != anchor {
                adj[anchor].insert(m, 1.0);
                adj[m].insert(anchor, 1.0);
            }
        }
    }
    let degree: Vec<f64> = adj.iter().map(|r| r.len() as f64).collect();
    let rows = adj
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.keys()
                .map(|&j| (j, 1.0 / (degree[i] * degree[j]).sqrt()))
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(SparseSym::from_rows(rows))
}

/// One graph-convolution layer: LeakyReLU(prop · X · Θ).
pub fn graph_conv(tape: &Tape, x: Var, prop: &SparseSym, theta: Var, slope: f64) -> Result<Var> {
    let xt = tape.matmul(x, theta)?;
    let agg = tape.propagate(xt, prop)?;
    Ok(tape.leaky_relu(agg, slope))
}

/// Columnwise [X0 ‖ X1 ‖ X2].
pub fn hop_concat(tape: &Tape, x0: Var, x1: Var, x2: Var) -> Result<Var> {
    tape.concat_cols(&[x0, x1, x2])
}

/// Channel attention with mean-centered scores:
/// z = column-mean of H; a = Sigmoid(ReLU(z W0) W1); H'[:, j] = H[:, j] (a_j - mean(a)).
/// Returns (H', a). The applied scores sum to zero by construction.
pub fn centering_attention(tape: &Tape, h: Var, w0: Var, w1: Var) -> Result<(Var, Var)> {
    let (_, width) = tape.shape(h);
    let (w0r, _) = tape.shape(w0);
    let (_, w1c) = tape.shape(w1);
    if w0r != width || w1c != width {
        return Err(Error::dim("centering_attention", (width, width), tape.shape(w0)));
    }
    let z = tape.mean_rows(h);
    let a = tape.sigmoid(tape.matmul(tape.relu(tape.matmul(z, w0)?), w1)?);
    let centered = tape.sub_bscalar(a, tape.mean_all(a))?;
    let hp = tape.mul_row(h, centered)?;
    Ok((hp, a))
}

/// Linear classifier over the masked (batch) rows only; buffer rows never
/// receive task loss.
pub fn graph_classify(tape: &Tape, hp: Var, w: Var, b: Var, mask: &[usize]) -> Result<Var> {
    let rows = tape.select_rows(hp, mask)?;
    tape.linear(rows, w, b)
}

/// Learnable weights of the graph branch. The projection W_p is a fixed,
/// seeded random matrix (kNN selection gives it no gradient path) and is
/// stored separately.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnParams {
    pub theta1: Matrix,
    pub theta2: Matrix,
    pub attn_w0: Matrix,
    pub attn_w1: Matrix,
    pub cls_w: Matrix,
    pub cls_b: Matrix,
    pub leaky_slope: f64,
}

impl GnnParams {
    pub fn init(d_s: usize, classes: usize, leaky_slope: f64, rng: &mut impl Rng) -> Self {
        let xavier = |fi: usize, fo: usize| (2.0 / (fi + fo) as f64).sqrt();
        let width = 3 * d_s;
        let r = (width / 4).max(1);
        GnnParams {
            theta1: Matrix::randn(d_s, d_s, xavier(d_s, d_s), rng),
            theta2: Matrix::randn(d_s, d_s, xavier(d_s, d_s), rng),
            attn_w0: Matrix::randn(width, r, xavier(width, r), rng),
            attn_w1: Matrix::randn(r, width, xavier(r, width), rng),
            cls_w: Matrix::randn(width, classes, xavier(width, classes), rng),
            cls_b: Matrix::zeros(1, classes),
        leaky_slope,
        }
    }

    pub fn params(&self) -> Vec<&Matrix> {
        vec![&self.theta1, &self.theta2, &self.attn_w0, &self.attn_w1, &self.cls_w, &self.cls_b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.theta1,
            &mut self.theta2,
            &mut self.attn_w0,
            &mut self.attn_w1,
            &mut self.cls_w,
            &mut self.cls_b,
        ]
    }

    pub fn register(&self, tape: &Tape) -> GnnVars {
        GnnVars {
            theta1: tape.input(self.theta1.clone()),
            theta2: tape.input(self.theta2.clone()),
            attn_w0: tape.input(self.attn_w0.clone()),
            attn_w1: tape.input(self.attn_w1.clone()),
            cls_w: tape.input(self.cls_w.clone()),
            cls_b: tape.input(self.cls_b.clone()),
            leaky_slope: self.leaky_slope,
        }
    }
}

#[derive(Copy, Clone)]
pub struct GnnVars {
    pub theta1: Var,
    pub theta2: Var,
    pub attn_w0: Var,
    pub attn_w1: Var,
    pub cls_w: Var,
    pub cls_b: Var,
    pub leaky_slope: f64,
}

/// Full SlideGNN forward over a node matrix: two conv layers, hop concat,
/// centering attention, classifier over the masked rows.
/// Returns (batch logits, attended batch features H'_batch).
pub fn slide_gnn_forward(
    tape: &Tape,
    x0: Var,
    prop: &SparseSym,
    vars: &GnnVars,
    mask: &[usize],
) -> Result<(Var, Var)> {
    let x1 = graph_conv(tape, x0, prop, vars.theta1, vars.leaky_slope)?;
    let x2 = graph_conv(tape, x1, prop, vars.theta2, vars.leaky_slope)?;
    let h = hop_concat(tape, x0, x1, x2)?;
    let (hp, _a) = centering_attention(tape, h, vars.attn_w0, vars.attn_w1)?;
    let logits = graph_classify(tape, hp, vars.cls_w, vars.cls_b, mask)?;
    let h_batch = tape.select_rows(hp, mask)?;
    Ok((logits, h_batch))
}

/// Build the propagation matrix for the configured variant.
pub fn propagator_for(variant: ConvVariant, graph: &SlideGraph) -> Result<SparseSym> {
    let n = graph.x0.rows();
    match variant {
        ConvVariant::Hyper => hyper_propagator(&graph.hyperedges, n),
        ConvVariant::Gcn => gcn_propagator(&graph.hyperedges, n),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn build_graph_colinear_points() {
        // identity projection, points {0,1,2,10}, k=1
        let x0 = Matrix::from_fn(4, 1, |i, _| [0.0, 1.0, 2.0, 10.0][i]);
        let g = build_graph(&x0, &Matrix::identity(1), 1).unwrap();
        assert_eq!(g.hyperedges, vec![vec![0, 1], vec![1, 0], vec![2, 1], vec![3, 2]]);
    }

    #[test]
    fn build_graph_complete_when_k_is_n_minus_1() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x0 = Matrix::randn(5, 3, 1.0, &mut rng);
        let g = build_graph(&x0, &Matrix::identity(3), 4).unwrap();
        for (i, edge) in g.hyperedges.iter().enumerate() {
            assert_eq!(edge.len(), 5);
            assert_eq!(edge[0], i);
            let mut sorted = edge.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn build_graph_duplicate_points_tie_to_smallest_index() {
        let x0 = Matrix::from_fn(4, 2, |_, _| 1.0); // all identical
        let g1 = build_graph(&x0, &Matrix::identity(2), 2).unwrap();
        let g2 = build_graph(&x0, &Matrix::identity(2), 2).unwrap();
        assert_eq!(g1.hyperedges, g2.hyperedges);
        // every node picks the smallest-index others
        assert_eq!(g1.hyperedges[3], vec![3, 0, 1]);
        assert_eq!(g1.hyperedges[0], vec![0, 1, 2]);
    }

    #[test]
    fn build_graph_rejects_k_too_large() {
        let x0 = Matrix::zeros(3, 2);
        assert!(build_graph(&x0, &Matrix::identity(2), 3).is_err());
    }

    #[test]
    fn hyper_conv_single_node_is_leaky_identity() {
        let tape = Tape::new();
        let prop = hyper_propagator(&[vec![0]], 1).unwrap();
        let x = tape.input(Matrix::row_vec(&[2.0, -3.0]));
        let theta = tape.input(Matrix::identity(2));
        let y = graph_conv(&tape, x, &prop, theta, 0.01).unwrap();
        let v = tape.value(y);
        assert!((v.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((v.get(0, 1) + 0.03).abs() < 1e-12);
    }

    #[test]
    fn hyper_conv_two_nodes_one_edge_averages() {
        // hand evaluation: Dv = De = ... -> each output row = mean of input rows
        let tape = Tape::new();
        let prop = hyper_propagator(&[vec![0, 1]], 2).unwrap();
        let x = tape.input(Matrix::from_fn(2, 2, |i, j| (i * 2 + j) as f64 + 1.0));
        let theta = tape.input(Matrix::identity(2));
        let y = tape.value(graph_conv(&tape, x, &prop, theta, 0.01).unwrap());
        assert!((y.get(0, 0) - 2.0).abs() < 1e-12 && (y.get(1, 0) - 2.0).abs() < 1e-12);
        assert!((y.get(0, 1) - 3.0).abs() < 1e-12 && (y.get(1, 1) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn hyper_conv_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x0 = Matrix::randn(6, 3, 1.0, &mut rng);
        let g = build_graph(&x0, &Matrix::identity(3), 2).unwrap();
        let prop = hyper_propagator(&g.hyperedges, 6).unwrap();
        let inputs = vec![x0, Matrix::randn(3, 3, 1.0, &mut rng)];
        let err = grad_check(&inputs, 1e-5, |t, v| {
            let y = graph_conv(t, v[0], &prop, v[1], 0.01)?;
            Ok(t.sum_all(t.mul(y, y)?))
        })
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn hyper_regular_graph_equal_features_stay_equal() {
        // ring hyperedges {i, i+1, .., i+k mod n}: vertex-regular, so the
        // propagation matrix is row-stochastic and equal rows are preserved.
        let n = 8;
        let k = 3;
        let edges: Vec<Vec<usize>> =
            (0..n).map(|i| (0..=k).map(|d| (i + d) % n).collect()).collect();
        let prop = hyper_propagator(&edges, n).unwrap();
        let tape = Tape::new();
        let x = tape.input(Matrix::from_fn(n, 3, |_, j| [0.5, 1.5, 2.0][j]));
        let theta = tape.input(Matrix::identity(3));
        let y = tape.value(graph_conv(&tape, x, &prop, theta, 0.01).unwrap());
        for i in 0..n {
            for j in 0..3 {
                assert!((y.get(i, j) - [0.5, 1.5, 2.0][j]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn hyper_propagator_rejects_isolated_node() {
        assert!(matches!(hyper_propagator(&[vec![0, 1]], 3), Err(Error::State(_))));
    }

    #[test]
    fn gcn_single_node_self_loop_identity() {
        let tape = Tape::new();
        let prop = gcn_propagator(&[vec![0]], 1).unwrap();
        let x = tape.input(Matrix::row_vec(&[4.0, -1.0]));
        let theta = tape.input(Matrix::identity(2));
        let y = tape.value(graph_conv(&tape, x, &prop, theta, 0.01).unwrap());
        assert!((y.get(0, 0) - 4.0).abs() < 1e-12);
        assert!((y.get(0, 1) + 0.01).abs() < 1e-12);
    }

    #[test]
    fn gcn_two_nodes_edge_and_self_loops_average() {
        let tape = Tape::new();
        let prop = gcn_propagator(&[vec![0, 1], vec![1, 0]], 2).unwrap();
        let x = tape.input(Matrix::from_fn(2, 1, |i, _| [2.0, 6.0][i]));
        let theta = tape.input(Matrix::identity(1));
        let y = tape.value(graph_conv(&tape, x, &prop, theta, 0.01).unwrap());
        assert!((y.get(0, 0) - 4.0).abs() < 1e-12);
        assert!((y.get(1, 0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn gcn_conv_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let x0 = Matrix::randn(6, 3, 1.0, &mut rng);
        let g = build_graph(&x0, &Matrix::identity(3), 2).unwrap();
        let prop = gcn_propagator(&g.hyperedges, 6).unwrap();
        let inputs = vec![x0, Matrix::randn(3, 3, 1.0, &mut rng)];
        let err = grad_check(&inputs, 1e-5, |t, v| {
            let y = graph_conv(t, v[0], &prop, v[1], 0.01)?;
            Ok(t.sum_all(t.mul(y, y)?))
        })
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn hop_concat_block_structure() {
        let tape = Tape::new();
        let a = tape.input(Matrix::from_fn(2, 2, |i, j| (i * 2 + j) as f64));
        let z = tape.input(Matrix::zeros(2, 2));
        let h = hop_concat(&tape, a, z, z).unwrap();
        let v = tape.value(h);
        assert_eq!(v.shape(), (2, 6));
        assert_eq!(&v.row(0)[0..2], &[0.0, 1.0]);
        assert_eq!(&v.row(0)[2..6], &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn centering_scores_sum_to_zero_and_constant_a_zeroes_h() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let h = Matrix::randn(4, 6, 1.0, &mut rng);
        let tape = Tape::new();
        let hv = tape.input(h);
        // zero weights force a = sigmoid(0) = 0.5 everywhere -> H' = 0 exactly
        let w0 = tape.input(Matrix::zeros(6, 2));
        let w1 = tape.input(Matrix::zeros(2, 6));
        let (hp, a) = centering_attention(&tape, hv, w0, w1).unwrap();
        assert_eq!(tape.value(hp), Matrix::zeros(4, 6));
        let av = tape.value(a);
        let mean = av.data().iter().sum::<f64>() / 6.0;
        let centered_sum: f64 = av.data().iter().map(|x| x - mean).sum();
        assert!(centered_sum.abs() <= 1e-9);
    }

    #[test]
    fn centering_forced_scores() {
        // a = (0.2, 0.5, 0.8) -> centered (-0.3, 0, 0.3)
        let a = [0.2f64, 0.5, 0.8];
        let mean = a.iter().sum::<f64>() / 3.0;
        let centered: Vec<f64> = a.iter().map(|x| x - mean).collect();
        assert!((centered[0] + 0.3).abs() < 1e-12);
        assert!(centered[1].abs() < 1e-12);
        assert!((centered[2] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn centering_attention_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let inputs = vec![
            Matrix::randn(4, 6, 1.0, &mut rng),
            Matrix::randn(6, 2, 1.0, &mut rng),
            Matrix::randn(2, 6, 1.0, &mut rng),
        ];
        let err = grad_check(&inputs, 1e-5, |t, v| {
            let (hp, _) = centering_attention(t, v[0], v[1], v[2])?;
            Ok(t.sum_all(t.mul(hp, hp)?))
        })
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn graph_classify_masked_rows_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let hp = Matrix::randn(5, 4, 1.0, &mut rng);
        let w = Matrix::randn(4, 3, 1.0, &mut rng);
        let b = Matrix::randn(1, 3, 1.0, &mut rng);
        let tape = Tape::new();
        let hv = tape.input(hp.clone());
        let wv = tape.input(w.clone());
        let bv = tape.input(b.clone());
        // empty mask -> empty logits
        let empty = graph_classify(&tape, hv, wv, bv, &[]).unwrap();
        assert_eq!(tape.shape(empty), (0, 3));
        // two masked rows match the unmasked affine map restricted to them
        let logits = tape.value(graph_classify(&tape, hv, wv, bv, &[1, 3]).unwrap());
        let full = tape.value(tape.linear(hv, wv, bv).unwrap());
        for (r, &src) in [1usize, 3].iter().enumerate() {
            for j in 0..3 {
                assert!((logits.get(r, j) - full.get(src, j)).abs() <= 1e-12);
            }
        }
        // zero classifier -> uniform predictions
        let zw = tape.input(Matrix::zeros(4, 3));
        let zb = tape.input(Matrix::zeros(1, 3));
        let zl = tape.value(graph_classify(&tape, hv, zw, zb, &[0, 2]).unwrap());
        assert_eq!(zl, Matrix::zeros(2, 3));
        // out-of-range mask -> index error
        assert!(matches!(graph_classify(&tape, hv, wv, bv, &[7]), Err(Error::Index(_))));
    }

    #[test]
    fn full_gnn_gradcheck_small_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let x0m = Matrix::randn(8, 3, 1.0, &mut rng);
        let graph = build_graph(&x0m, &Matrix::identity(3), 3).unwrap();
        let prop = hyper_propagator(&graph.hyperedges, 8).unwrap();
        let p = GnnParams::init(3, 2, 0.01, &mut rng);
        let inputs = vec![
            x0m,
            p.theta1.clone(),
            p.theta2.clone(),
            p.attn_w0.clone(),
            p.attn_w1.clone(),
            p.cls_w.clone(),
            p.cls_b.clone(),
        ];
        let err = grad_check(&inputs, 1e-5, |t, v| {
            let vars = GnnVars {
                theta1: v[1],
                theta2: v[2],
                attn_w0: v[3],
                attn_w1: v[4],
                cls_w: v[5],
                cls_b: v[6],
                leaky_slope: 0.01,
            };
            let (logits, _) = slide_gnn_forward(t, v[0], &prop, &vars, &[6, 7])?;
            t.cross_entropy(logits, &[0, 1], true)
        })
        .unwrap();
        assert!(err <= 1e-3, "rel err {err}");
    }

    #[test]
    fn gnn_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let x0m = Matrix::randn(7, 3, 1.0, &mut rng); // distinct points
        let p = GnnParams::init(3, 2, 0.01, &mut rng);
        let run = |x: &Matrix, mask: &[usize]| {
            let g = build_graph(x, &Matrix::identity(3), 2).unwrap();
            let prop = hyper_propagator(&g.hyperedges, x.rows()).unwrap();
            let t = Tape::new();
            let xv = t.input(x.clone());
            let vars = p.register(&t);
            let (logits, _) = slide_gnn_forward(&t, xv, &prop, &vars, mask).unwrap();
            t.value(logits)
        };
        let perm = [3usize, 1, 6, 0, 5, 2, 4];
        let permuted = Matrix::from_fn(7, 3, |i, j| x0m.get(perm[i], j));
        let base = run(&x0m, &[5, 6]);
        // rows 5, 6 of the original are rows 4, 2 of the permuted matrix
        let moved = run(&permuted, &[4, 2]);
        for i in 0..2 {
            for j in 0..2 {
                assert!((base.get(i, j) - moved.get(i, j)).abs() <= 1e-6);
            }
        }
    }
}
