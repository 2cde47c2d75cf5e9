//! MIL backbones: bag of patch embeddings -> fixed-width slide embedding,
//! plus the MIL head that predicts from it.
//!
//! The reference backbone is gated attention pooling:
//! a_j ∝ w · (tanh(V x_j) ⊙ sigmoid(U x_j)), s = proj(Σ_j a_j x_j).
//! A "precomputed" mode passes mean-pooled bag rows through untouched
//! (no parameters, no gradient) for debugging the graph branch alone.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    /// D_patch x D_a gate weights.
    pub v: Matrix,
    pub u: Matrix,
    /// D_a x 1 scoring vector.
    pub w: Matrix,
    /// D_patch x D_s embedding projection (+ bias).
    pub proj: Matrix,
    pub proj_b: Matrix,
}

impl BackboneParams {
    /// Xavier init; the projection starts as identity when D_s = D_patch.
    pub fn init(d_patch: usize, d_attn: usize, d_s: usize, rng: &mut impl Rng) -> Self {
        let xavier = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();
        let proj = if d_s == d_patch {
            Matrix::identity(d_patch)
        } else {
            Matrix::randn(d_patch, d_s, xavier(d_patch, d_s), rng)
        };
        BackboneParams {
            v: Matrix::randn(d_patch, d_attn, xavier(d_patch, d_attn), rng),
            u: Matrix::randn(d_patch, d_attn, xavier(d_patch, d_attn), rng),
            w: Matrix::randn(d_attn, 1, xavier(d_attn, 1), rng),
            proj,
            proj_b: Matrix::zeros(1, d_s),
        }
    }

    pub fn d_patch(&self) -> usize {
        self.v.rows()
    }

    pub fn d_s(&self) -> usize {
        self.proj.cols()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        vec![&self.v, &self.u, &self.w, &self.proj, &self.proj_b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.v, &mut self.u, &mut self.w, &mut self.proj, &mut self.proj_b]
    }
}

/// Tape handles for one registration of the backbone parameters.
#[derive(Copy, Clone)]
pub struct BackboneVars {
    pub v: Var,
    pub u: Var,
    pub w: Var,
    pub proj: Var,
    pub proj_b: Var,
}

impl BackboneParams {
    pub fn register(&self, tape: &Tape) -> BackboneVars {
        BackboneVars {
            v: tape.input(self.v.clone()),
            u: tape.input(self.u.clone()),
            w: tape.input(self.w.clone()),
            proj: tape.input(self.proj.clone()),
            proj_b: tape.input(self.proj_b.clone()),
        }
    }
}

/// Gated-attention embedding of one bag. Returns the 1 x D_s slide embedding
/// and the 1 x M attention row (non-negative, sums to 1).
pub fn abmil_embed(tape: &Tape, patches: &Matrix, vars: &BackboneVars) -> Result<(Var, Var)> {
    if patches.rows() == 0 {
        return Err(Error::Input("cannot embed an empty bag".into()));
    }
    let x = tape.input(patches.clone());
    let gate = tape.mul(tape.tanh(tape.matmul(x, vars.v)?), tape.sigmoid(tape.matmul(x, vars.u)?))?;
    let scores = tape.matmul(gate, vars.w)?; // M x 1
    let attn = tape.softmax_t_rows(tape.transpose(scores), 1.0)?; // 1 x M
    let pooled = tape.matmul(attn, x)?; // 1 x D_patch
    let s = tape.linear(pooled, vars.proj, vars.proj_b)?;
    Ok((s, attn))
}

/// Mean-pooled pass-through for precomputed slide embeddings. Constant on the
/// tape: no gradient reaches the (non-existent) backbone parameters.
pub fn precomputed_embed(tape: &Tape, patches: &Matrix, d_s: usize) -> Result<Var> {
    if patches.rows() == 0 {
        return Err(Error::Input("cannot embed an empty bag".into()));
    }
    if patches.cols() != d_s {
        return Err(Error::Input(format!(
            "precomputed backbone requires D_patch = D_s, got {} vs {}",
            patches.cols(),
            d_s
        )));
    }
    let mut s = Matrix::zeros(1, d_s);
    let n = patches.rows() as f64;
    for i in 0..patches.rows() {
        for (acc, &v) in s.row_mut(0).iter_mut().zip(patches.row(i)) {
            *acc += v / n;
        }
    }
    Ok(tape.input(s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilHeadParams {
    /// D_s x C classifier (+ bias).
    pub w: Matrix,
    pub b: Matrix,
}

impl MilHeadParams {
    pub fn init(d_s: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (d_s + classes) as f64).sqrt();
        MilHeadParams { w: Matrix::randn(d_s, classes, std, rng), b: Matrix::zeros(1, classes) }
    }

    pub fn classes(&self) -> usize {
        self.w.cols()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn register(&self, tape: &Tape) -> MilHeadVars {
        MilHeadVars { w: tape.input(self.w.clone()), b: tape.input(self.b.clone()) }
    }
}

#[derive(Copy, Clone)]
pub struct MilHeadVars {
    pub w: Var,
    pub b: Var,
}

/// Affine map s -> logits (width C).
pub fn mil_head(tape: &Tape, s: Var, vars: &MilHeadVars) -> Result<Var> {
    let (_, d) = tape.shape(s);
    let (dw, _) = tape.shape(vars.w);
    if d != dw {
        return Err(Error::dim("mil_head", tape.shape(s), tape.shape(vars.w)));
    }
    tape.linear(s, vars.w, vars.b)
}
