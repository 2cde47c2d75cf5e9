//! Class-aware node buffer: FIFO warmup filling, center-based formal
//! replacement, the buffer-update loss, and node-matrix snapshots for
//! graph construction.

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    /// Detached value snapshot, length D_s.
    pub embedding: Vec<f64>,
    pub label: usize,
    /// Monotone insertion counter; smallest = oldest (FIFO eviction order).
    pub counter: u64,
}

/// C sub-queues of capacity L/C each; entry labels always match their
/// sub-queue's class.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeBuffer {
    queues: Vec<Vec<BufferEntry>>,
    per_class_cap: usize,
    dim: usize,
    next_counter: u64,
}

/// Per-class means of the stored embeddings, plus the update-loss temperature.
#[derive(Clone, Debug)]
pub struct ClassCenters {
    /// C x D_s, row c = mean of sub-queue c.
    pub q: Matrix,
    pub tau: f64,
}

impl NodeBuffer {
    /// `capacity` (the spec's L) must be divisible by the class count.
    pub fn new(capacity: usize, classes: usize, dim: usize) -> Result<Self> {
        if classes == 0 || capacity == 0 || dim == 0 {
            return Err(Error::Parameter("buffer needs capacity, classes and dim >= 1".into()));
        }
        if capacity % classes != 0 {
            return Err(Error::Config(format!(
                "buffer capacity {capacity} must be divisible by class count {classes}"
            )));
        }
        Ok(NodeBuffer {
            queues: vec![Vec::new(); classes],
            per_class_cap: capacity / classes,
            dim,
            next_counter: 0,
        })
    }

    pub fn classes(&self) -> usize {
        self.queues.len()
    }

    pub fn capacity(&self) -> usize {
        self.per_class_cap * self.queues.len()
    }

    pub fn per_class_cap(&self) -> usize {
        self.per_class_cap
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.queues.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full(&self) -> bool {
        self.queues.iter().all(|q| q.len() == self.per_class_cap)
    }

    pub fn class_len(&self, c: usize) -> usize {
        self.queues[c].len()
    }

    pub fn entries(&self, c: usize) -> &[BufferEntry] {
        &self.queues[c]
    }

    /// Rebuild from serialized entries (checkpoint load path).
    pub fn from_entries(
        capacity: usize,
        classes: usize,
        dim: usize,
        entries: Vec<BufferEntry>,
    ) -> Result<Self> {
        let mut buf = NodeBuffer::new(capacity, classes, dim)?;
        for e in entries {
            if e.label >= classes {
                return Err(Error::Input(format!("buffer entry label {} >= {classes}", e.label)));
            }
            if e.embedding.len() != dim {
                return Err(Error::Input(format!(
                    "buffer entry dim {} != {dim}",
                    e.embedding.len()
                )));
            }
            if buf.queues[e.label].len() == buf.per_class_cap {
                return Err(Error::Input("buffer entries exceed per-class capacity".into()));
            }
            buf.next_counter = buf.next_counter.max(e.counter + 1);
            buf.queues[e.label].push(e);
        }
        Ok(buf)
    }

    fn check_sample(&self, embedding: &[f64], label: usize) -> Result<()> {
        if label >= self.classes() {
            return Err(Error::Input(format!(
                "label {label} out of range for {} classes",
                self.classes()
            )));
        }
        if embedding.len() != self.dim {
            return Err(Error::Input(format!(
                "embedding dim {} != buffer dim {}",
                embedding.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Warmup-stage FIFO push: append to the class sub-queue, evicting the
    /// oldest entry (smallest counter) when the sub-queue is full.
    pub fn warmup_push(&mut self, embeddings: &Matrix, labels: &[usize]) -> Result<()> {
        if embeddings.rows() != labels.len() {
            return Err(Error::Input(format!(
                "{} embeddings for {} labels",
                embeddings.rows(),
                labels.len()
            )));
        }
        for (i, &label) in labels.iter().enumerate() {
            let row = embeddings.row(i);
            self.check_sample(row, label)?;
            let counter = self.next_counter;
            self.next_counter += 1;
            let q = &mut self.queues[label];
            if q.len() == self.per_class_cap {
                let oldest = q
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, e)| e.counter)
                    .map(|(k, _)| k)
                    .expect("non-empty queue");
                q.remove(oldest);
            }
            q.push(BufferEntry { embedding: row.to_vec(), label, counter });
        }
        Ok(())
    }

    /// Per-class arithmetic means. Errors if any sub-queue is still empty
    /// (the formal stage must not start before warmup covers every class).
    pub fn compute_centers(&self, tau: f64) -> Result<ClassCenters> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::Parameter(format!("tau must be > 0, got {tau}")));
        }
        let mut q = Matrix::zeros(self.classes(), self.dim);
        for (c, queue) in self.queues.iter().enumerate() {
            if queue.is_empty() {
                return Err(Error::State(format!(
                    "sub-queue for class {c} is empty; centers undefined before warmup fills it"
                )));
            }
            let inv = 1.0 / queue.len() as f64;
            for e in queue {
                for (acc, &v) in q.row_mut(c).iter_mut().zip(&e.embedding) {
                    *acc += v * inv;
                }
            }
        }
        Ok(ClassCenters { q, tau })
    }

    /// Formal-stage replacement. For each batch sample u (in batch order):
    /// find the stored entry farthest from u's class center; u replaces it
    /// iff u is strictly closer to the center. Returns per-sample accepted flags.
    /// Centers are the snapshot taken at mini-batch start and are not refreshed
    /// between replacements.
    pub fn formal_update(
        &mut self,
        embeddings: &Matrix,
        labels: &[usize],
        centers: &ClassCenters,
    ) -> Result<Vec<bool>> {
        if embeddings.rows() != labels.len() {
            return Err(Error::Input(format!(
                "{} embeddings for {} labels",
                embeddings.rows(),
                labels.len()
            )));
        }
        let mut accepted = Vec::with_capacity(labels.len());
        for (i, &label) in labels.iter().enumerate() {
            let row = embeddings.row(i);
            self.check_sample(row, label)?;
            let center = centers.q.row(label);
            let q = &mut self.queues[label];
            if q.is_empty() {
                return Err(Error::State(format!("sub-queue for class {label} is empty")));
            }
            // farthest stored sample; ties resolved to the first (smallest index)
            let (far_idx, far_dist) = q
                .iter()
                .enumerate()
                .map(|(k, e)| (k, squared_distance(&e.embedding, center)))
                .fold((0usize, f64::NEG_INFINITY), |best, (k, d)| if d > best.1 { (k, d) } else { best });
            let u_dist = squared_distance(row, center);
            if u_dist < far_dist {
                let counter = self.next_counter;
                self.next_counter += 1;
                q[far_idx] = BufferEntry { embedding: row.to_vec(), label, counter };
                accepted.push(true);
            } else {
                accepted.push(false);
            }
        }
        Ok(accepted)
    }

    /// Buffer contents as node rows, sub-queue order (class 0 first), with labels.
    pub fn node_rows(&self) -> (Matrix, Vec<usize>) {
        let mut m = Matrix::zeros(self.len(), self.dim);
        let mut labels = Vec::with_capacity(self.len());
        let mut r = 0;
        for queue in &self.queues {
            for e in queue {
                m.row_mut(r).copy_from_slice(&e.embedding);
                labels.push(e.label);
                r += 1;
            }
        }
        (m, labels)
    }

    /// Class-purity and capacity invariants; asserted by tests after updates.
    pub fn check_invariants(&self) -> Result<()> {
        for (c, queue) in self.queues.iter().enumerate() {
            if queue.len() > self.per_class_cap {
                return Err(Error::State(format!(
                    "sub-queue {c} holds {} > cap {}",
                    queue.len(),
                    self.per_class_cap
                )));
            }
            for e in queue {
                if e.label != c {
                    return Err(Error::State(format!(
                        "entry with label {} stored in sub-queue {c}",
                        e.label
                    )));
                }
                if e.embedding.iter().any(|v| !v.is_finite()) {
                    return Err(Error::State(format!("non-finite embedding in sub-queue {c}")));
                }
            }
        }
        Ok(())
    }
}

/// Node matrix X0 for graph construction: buffer rows first (detached),
/// batch rows last (gradient-carrying). Returns (X0 var, node labels with
/// batch labels appended, batch row indices).
pub fn snapshot_nodes(
    tape: &Tape,
    buffer: &NodeBuffer,
    batch: Option<Var>,
    batch_labels: &[usize],
) -> Result<(Var, Vec<usize>, Vec<usize>)> {
    if !buffer.is_full() {
        return Err(Error::State(format!(
            "buffer holds {}/{} entries; snapshot requires a full buffer",
            buffer.len(),
            buffer.capacity()
        )));
    }
    let (rows, mut labels) = buffer.node_rows();
    let buffer_var = tape.input(rows); // leaf: no backward edge into the buffer
    let l = buffer.len();
    match batch {
        None => {
            if !batch_labels.is_empty() {
                return Err(Error::Input("batch labels without batch embeddings".into()));
            }
            Ok((buffer_var, labels, vec![]))
        }
        Some(b) => {
            let (bn, bd) = tape.shape(b);
            if bd != buffer.dim() {
                return Err(Error::dim("snapshot_nodes", (l, buffer.dim()), (bn, bd)));
            }
            if bn != batch_labels.len() {
                return Err(Error::Input(format!(
                    "{bn} batch rows for {} labels",
                    batch_labels.len()
                )));
            }
            let x0 = tape.concat_rows(&[buffer_var, b])?;
            labels.extend_from_slice(batch_labels);
            Ok((x0, labels, (l..l + bn).collect()))
        }
    }
}

/// The buffer-update loss over the mini-batch embeddings U (centers constant):
/// term 1: -Σ_u log( exp(û·q̂_+/τ) / Σ_c exp(û·q̂_c/τ) ) over unit-normalized
///         embeddings and centers;
/// term 2: Σ_u Σ_{c != label} cos(u, q_c).
pub fn buffer_update_loss(
    tape: &Tape,
    batch: Var,
    labels: &[usize],
    centers: &ClassCenters,
) -> Result<Var> {
    let (b, d) = tape.shape(batch);
    if b != labels.len() {
        return Err(Error::Input(format!("{b} embeddings for {} labels", labels.len())));
    }
    let classes = centers.q.rows();
    if centers.q.cols() != d {
        return Err(Error::dim("buffer_update_loss", (b, d), centers.q.shape()));
    }
    for &y in labels {
        if y >= classes {
            return Err(Error::Input(format!("label {y} out of range for {classes} classes")));
        }
    }
    for c in 0..classes {
        let n: f64 = centers.q.row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Input(format!("class {c} center has norm {n}; cannot normalize")));
        }
    }
    let u_hat = tape.normalize_rows(batch)?;
    let q_hat = {
        let q = tape.input(centers.q.clone());
        tape.normalize_rows(q)?
    };
    // cosine similarities to every center: B x C
    let sims = tape.matmul(u_hat, tape.transpose(q_hat))?;
    // term 1: softmax cross-entropy over sims / tau, sum reduction
    let scaled = tape.scale(sims, 1.0 / centers.tau);
    let term1 = tape.cross_entropy(scaled, labels, false)?;
    // term 2: off-class cosine sum
    let mask = Matrix::from_fn(b, classes, |i, c| if c == labels[i] { 0.0 } else { 1.0 });
    let term2 = tape.sum_all(tape.mul(sims, tape.input(mask))?);
    tape.add(term1, term2)
}
