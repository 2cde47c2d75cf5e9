//! Reverse-mode autodiff over [`Matrix`] values.
//!
//! Operations are recorded onto a [`Tape`] as they execute; `backward` replays
//! them in exact reverse order, accumulating gradients additively. One tape
//! per training step, never shared between steps. Every op's backward is
//! validated against central finite differences in the test suites.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sparse::SparseSym;
use std::cell::RefCell;

/// Handle to a value recorded on a tape.
#[derive(Copy, Clone, Debug)]
pub struct Var {
    id: usize,
}

/// upstream gradient + parent values -> one gradient per parent
type BackFn = Box<dyn Fn(&Matrix, &[&Matrix]) -> Vec<Matrix>>;

struct Node {
    value: Matrix,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Per-variable gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, value: Matrix, parents: Vec<usize>, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents, back });
        Var { id: nodes.len() - 1 }
    }

    /// Register a leaf value. Gradients w.r.t. inputs are available after backward.
    pub fn input(&self, value: Matrix) -> Var {
        self.push(value, vec![], None)
    }

    /// Clone of the current value of a variable.
    pub fn value(&self, v: Var) -> Matrix {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.id].value.shape()
    }

    /// Identity forward, no backward edge: gradients never flow past this.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.push(value, vec![], None)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(&bv)?;
        let back: BackFn = Box::new(|up, parents| {
            let (a, b) = (parents[0], parents[1]);
            let da = up.matmul(&b.transpose()).expect("matmul backward da");
            let db = a.transpose().matmul(up).expect("matmul backward db");
            vec![da, db]
        });
        Ok(self.push(out, vec![a.id, b.id], Some(back)))
    }

    /// Affine map x·W + b with b broadcast over rows (the spec's linear_forward).
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(&self.value(b))?;
        let back: BackFn = Box::new(|up, _| vec![up.clone(), up.clone()]);
        Ok(self.push(out, vec![a.id, b.id], Some(back)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(&self.value(b))?;
        let back: BackFn = Box::new(|up, _| vec![up.clone(), up.scale(-1.0)]);
        Ok(self.push(out, vec![a.id, b.id], Some(back)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(&self.value(b))?;
        let back: BackFn = Box::new(|up, parents| {
            vec![
                up.hadamard(parents[1]).expect("mul backward"),
                up.hadamard(parents[0]).expect("mul backward"),
            ]
        });
        Ok(self.push(out, vec![a.id, b.id], Some(back)))
    }

    /// a + r with r a 1 x cols row vector broadcast over the rows of a.
    pub fn add_row(&self, a: Var, r: Var) -> Result<Var> {
        let av = self.value(a);
        let rv = self.value(r);
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::dim("add_row", av.shape(), rv.shape()));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v += rv.get(0, j);
            }
        }
        let back: BackFn = Box::new(|up, _| {
            let mut dr = Matrix::zeros(1, up.cols());
            for i in 0..up.rows() {
                for j in 0..up.cols() {
                    dr.set(0, j, dr.get(0, j) + up.get(i, j));
                }
            }
            vec![up.clone(), dr]
        });
        Ok(self.push(out, vec![a.id, r.id], Some(back)))
    }

    /// a with column j scaled by r[0, j].
    pub fn mul_row(&self, a: Var, r: Var) -> Result<Var> {
        let av = self.value(a);
        let rv = self.value(r);
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::dim("mul_row", av.shape(), rv.shape()));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v *= rv.get(0, j);
            }
        }
        let back: BackFn = Box::new(|up, parents| {
            let (a, r) = (parents[0], parents[1]);
            let mut da = up.clone();
            for i in 0..da.rows() {
                let row = da.row_mut(i);
                for (j, v) in row.iter_mut().enumerate() {
                    *v *= r.get(0, j);
                }
            }
            let mut dr = Matrix::zeros(1, up.cols());
            for i in 0..up.rows() {
                for j in 0..up.cols() {
                    dr.set(0, j, dr.get(0, j) + up.get(i, j) * a.get(i, j));
                }
            }
            vec![da, dr]
        });
        Ok(self.push(out, vec![a.id, r.id], Some(back)))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let back: BackFn = Box::new(move |up, _| vec![up.scale(c)]);
        self.push(out, vec![a.id], Some(back))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        let back: BackFn = Box::new(move |up, parents| {
            let x = parents[0];
            let mut da = up.clone();
            for (g, &xv) in da.data_mut().iter_mut().zip(x.data()) {
                if xv < 0.0 {
                    *g *= slope;
                }
            }
            vec![da]
        });
        self.push(out, vec![a.id], Some(back))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av;
        for v in out.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        let y = out.clone();
        let back: BackFn = Box::new(move |up, _| {
            let mut da = up.clone();
            for (g, &yv) in da.data_mut().iter_mut().zip(y.data()) {
                *g *= yv * (1.0 - yv);
            }
            vec![da]
        });
        self.push(out, vec![a.id], Some(back))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av;
        for v in out.data_mut() {
            *v = v.tanh();
        }
        let y = out.clone();
        let back: BackFn = Box::new(move |up, _| {
            let mut da = up.clone();
            for (g, &yv) in da.data_mut().iter_mut().zip(y.data()) {
                *g *= 1.0 - yv * yv;
            }
            vec![da]
        });
        self.push(out, vec![a.id], Some(back))
    }

    pub fn ln(&self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av;
        for v in out.data_mut() {
            *v = v.ln();
        }
        let back: BackFn = Box::new(|up, parents| {
            let x = parents[0];
            let mut da = up.clone();
            for (g, &xv) in da.data_mut().iter_mut().zip(x.data()) {
                *g /= xv;
            }
            vec![da]
        });
        self.push(out, vec![a.id], Some(back))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let back: BackFn = Box::new(|up, _| vec![up.transpose()]);
        self.push(out, vec![a.id], Some(back))
    }

    /// Columnwise concatenation (block order preserved).
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat_cols of zero blocks".into()));
        }
        let values: Vec<Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let rows = values[0].rows();
        for v in &values {
            if v.rows() != rows {
                return Err(Error::dim("concat_cols", values[0].shape(), v.shape()));
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Matrix::zeros(rows, total);
        for i in 0..rows {
            let mut off = 0;
            for v in &values {
                out.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
                off += v.cols();
            }
        }
        let back: BackFn = Box::new(move |up, _| {
            let mut grads = Vec::with_capacity(widths.len());
            let mut off = 0;
            for &w in &widths {
                let mut g = Matrix::zeros(up.rows(), w);
                for i in 0..up.rows() {
                    g.row_mut(i).copy_from_slice(&up.row(i)[off..off + w]);
                }
                off += w;
                grads.push(g);
            }
            grads
        });
        Ok(self.push(out, parts.iter().map(|v| v.id).collect(), Some(back)))
    }

    /// Rowwise concatenation (block order preserved).
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat_rows of zero blocks".into()));
        }
        let values: Vec<Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let cols = values[0].cols();
        for v in &values {
            if v.cols() != cols {
                return Err(Error::dim("concat_rows", values[0].shape(), v.shape()));
            }
        }
        let heights: Vec<usize> = values.iter().map(|v| v.rows()).collect();
        let total: usize = heights.iter().sum();
        let mut data = Vec::with_capacity(total * cols);
        for v in &values {
            data.extend_from_slice(v.data());
        }
        let out = Matrix::new(total, cols, data)?;
        let back: BackFn = Box::new(move |up, _| {
            let mut grads = Vec::with_capacity(heights.len());
            let mut off = 0;
            for &h in &heights {
                let mut g = Matrix::zeros(h, up.cols());
                for i in 0..h {
                    g.row_mut(i).copy_from_slice(up.row(off + i));
                }
                off += h;
                grads.push(g);
            }
            grads
        });
        Ok(self.push(out, parts.iter().map(|v| v.id).collect(), Some(back)))
    }

    /// Gather the listed rows; backward scatters into the source shape.
    pub fn select_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        for &i in indices {
            if i >= av.rows() {
                return Err(Error::Index(format!(
                    "row {} out of range for {} rows",
                    i,
                    av.rows()
                )));
            }
        }
        let mut out = Matrix::zeros(indices.len(), av.cols());
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(av.row(i));
        }
        let idx = indices.to_vec();
        let src_shape = av.shape();
        let back: BackFn = Box::new(move |up, _| {
            let mut da = Matrix::zeros(src_shape.0, src_shape.1);
            for (r, &i) in idx.iter().enumerate() {
                let src = up.row(r);
                let dst = da.row_mut(i);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            vec![da]
        });
        Ok(self.push(out, vec![a.id], Some(back)))
    }

    /// Column means: n x c -> 1 x c.
    pub fn mean_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.rows() as f64;
        let mut out = Matrix::zeros(1, av.cols());
        for i in 0..av.rows() {
            for j in 0..av.cols() {
                out.set(0, j, out.get(0, j) + av.get(i, j) / n);
            }
        }
        let rows = av.rows();
        let back: BackFn = Box::new(move |up, _| {
            let mut da = Matrix::zeros(rows, up.cols());
            for i in 0..rows {
                for j in 0..up.cols() {
                    da.set(i, j, up.get(0, j) / rows as f64);
                }
            }
            vec![da]
        });
        self.push(out, vec![a.id], Some(back))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let s: f64 = av.data().iter().sum();
        let shape = av.shape();
        let out = Matrix::new(1, 1, vec![s]).expect("scalar");
        let back: BackFn = Box::new(move |up, _| {
            let g = up.get(0, 0);
            vec![Matrix::from_fn(shape.0, shape.1, |_, _| g)]
        });
        self.push(out, vec![a.id], Some(back))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    /// a - s with s a 1x1 scalar broadcast over every entry.
    pub fn sub_bscalar(&self, a: Var, s: Var) -> Result<Var> {
        let av = self.value(a);
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(Error::dim("sub_bscalar", av.shape(), sv.shape()));
        }
        let mut out = av;
        let c = sv.get(0, 0);
        for v in out.data_mut() {
            *v -= c;
        }
        let back: BackFn = Box::new(|up, _| {
            let total: f64 = up.data().iter().sum();
            vec![up.clone(), Matrix::new(1, 1, vec![-total]).expect("scalar")]
        });
        Ok(self.push(out, vec![a.id, s.id], Some(back)))
    }

    /// Row-wise temperature softmax, max-subtracted for stability.
    pub fn softmax_t_rows(&self, a: Var, t: f64) -> Result<Var> {
        if t <= 0.0 || !t.is_finite() {
            return Err(Error::Parameter(format!("softmax temperature must be > 0, got {t}")));
        }
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows(), av.cols());
        for i in 0..av.rows() {
            let p = crate::matrix::softmax_temp(av.row(i), t)?;
            out.row_mut(i).copy_from_slice(&p);
        }
        let y = out.clone();
        let back: BackFn = Box::new(move |up, _| {
            let mut da = Matrix::zeros(up.rows(), up.cols());
            for i in 0..up.rows() {
                let dot: f64 = up.row(i).iter().zip(y.row(i)).map(|(u, p)| u * p).sum();
                for j in 0..up.cols() {
                    da.set(i, j, y.get(i, j) * (up.get(i, j) - dot) / t);
                }
            }
            vec![da]
        });
        Ok(self.push(out, vec![a.id], Some(back)))
    }

    /// Unit-normalize each row; errors on a zero-norm row.
    pub fn normalize_rows(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut norms = Vec::with_capacity(av.rows());
        for i in 0..av.rows() {
            let n: f64 = av.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Input(format!(
                    "cannot normalize row {i}: norm is {n}"
                )));
            }
            norms.push(n);
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            let n = norms[i];
            for v in out.row_mut(i) {
                *v /= n;
            }
        }
        let y = out.clone();
        let back: BackFn = Box::new(move |up, _| {
            let mut da = Matrix::zeros(up.rows(), up.cols());
            for i in 0..up.rows() {
                let dot: f64 = up.row(i).iter().zip(y.row(i)).map(|(u, v)| u * v).sum();
                for j in 0..up.cols() {
                    da.set(i, j, (up.get(i, j) - y.get(i, j) * dot) / norms[i]);
                }
            }
            vec![da]
        });
        Ok(self.push(out, vec![a.id], Some(back)))
    }

    /// Multiply by a symmetric sparse propagation matrix (graph message passing).
    /// Symmetry makes the backward pass the same apply on the upstream gradient.
    pub fn propagate(&self, a: Var, prop: &SparseSym) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != prop.dim() {
            return Err(Error::dim("propagate", av.shape(), (prop.dim(), prop.dim())));
        }
        let out = prop.apply(&av);
        let p = prop.clone();
        let back: BackFn = Box::new(move |up, _| vec![p.apply(up)]);
        Ok(self.push(out, vec![a.id], Some(back)))
    }

    /// Stabilized softmax cross-entropy against integer labels.
    /// `mean` picks mean-over-rows reduction, otherwise sum.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize], mean: bool) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() {
            return Err(Error::Input(format!(
                "{} labels for {} logit rows",
                labels.len(),
                lv.rows()
            )));
        }
        if lv.rows() == 0 {
            return Err(Error::Input("cross_entropy over an empty batch".into()));
        }
        for (i, &y) in labels.iter().enumerate() {
            if y >= lv.cols() {
                return Err(Error::Input(format!(
                    "label {} at row {} out of range for {} classes",
                    y,
                    i,
                    lv.cols()
                )));
            }
        }
        let mut total = 0.0;
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        for i in 0..lv.rows() {
            let row = lv.row(i);
            total += crate::matrix::log_sum_exp(row) - row[labels[i]];
            let p = crate::matrix::softmax_temp(row, 1.0)?;
            probs.row_mut(i).copy_from_slice(&p);
        }
        let w = if mean { 1.0 / lv.rows() as f64 } else { 1.0 };
        let out = Matrix::new(1, 1, vec![total * w])?;
        let labels = labels.to_vec();
        let back: BackFn = Box::new(move |up, _| {
            let g = up.get(0, 0) * w;
            let mut da = probs.scale(g);
            for (i, &y) in labels.iter().enumerate() {
                da.set(i, y, da.get(i, y) - g);
            }
            vec![da]
        });
        Ok(self.push(out, vec![logits.id], Some(back)))
    }

    /// Reverse sweep from a 1x1 root. Gradients accumulate additively; ops are
    /// visited in exact reverse of recording order.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let rv = &nodes[root.id].value;
        if rv.shape() != (1, 1) {
            return Err(Error::Input(format!(
                "backward root must be a scalar, got {}x{}",
                rv.rows(),
                rv.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[root.id] = Some(Matrix::new(1, 1, vec![1.0])?);
        for id in (0..=root.id).rev() {
            let Some(up) = grads[id].clone() else { continue };
            let node = &nodes[id];
            let Some(back) = &node.back else { continue };
            let parent_values: Vec<&Matrix> =
                node.parents.iter().map(|&p| &nodes[p].value).collect();
            let pgrads = back(&up, &parent_values);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&pid, g) in node.parents.iter().zip(pgrads) {
                debug_assert_eq!(g.shape(), nodes[pid].value.shape());
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Compare tape gradients against central finite differences for a scalar
/// function of several matrix inputs. Returns the max relative error over all
/// input entries. The quotient is recomputed from scratch at each perturbed
/// point, so the oracle is independent of the backward implementation.
pub fn grad_check<F>(inputs: &[Matrix], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Parameter(format!("grad_check eps must be > 0, got {eps}")));
    }
    let eval = |points: &[Matrix]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|m| tape.input(m.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out);
        if v.shape() != (1, 1) {
            return Err(Error::Input("grad_check function must return a scalar".into()));
        }
        Ok(v.get(0, 0))
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.input(m.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut max_rel = 0.0f64;
    let mut points = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(inputs[k].rows(), inputs[k].cols()));
        for idx in 0..inputs[k].data().len() {
            let orig = points[k].data()[idx];
            points[k].data_mut()[idx] = orig + eps;
            let fp = eval(&points)?;
            points[k].data_mut()[idx] = orig - eps;
            let fm = eval(&points)?;
            points[k].data_mut()[idx] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            if !fd.is_finite() {
                return Err(Error::Oracle(format!(
                    "non-finite difference quotient at input {k} entry {idx}"
                )));
            }
            let g = analytic.data()[idx];
            let rel = (g - fd).abs() / (g.abs().max(fd.abs()) + 1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
