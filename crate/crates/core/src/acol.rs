//! The auto-clustering output layer.
//!
//! `n = n_p·k` softmax nodes feed a fixed pooling matrix made of `k`
//! stacked `n_p x n_p` identities, so node `j` (1-based) belongs to parent
//! `((j-1) mod n_p) + 1` and is duplicate `((j-1) div n_p) + 1` of it.
//! After training the pooling is dropped and each example is annotated with
//! the argmax node of `Z`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gar::ActivityMatrix;
use crate::numeric::{argmax, matmul, relu, softmax_rows, Matrix};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct AcolHead {
    n_parents: usize,
    k: usize,
    pooling: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub n_p: usize,
    pub k: usize,
}

impl AcolHead {
    pub fn new(n_parents: usize, k: usize) -> Result<Self> {
        Ok(Self {
            n_parents,
            k,
            pooling: build_pooling(n_parents, k)?,
        })
    }

    pub fn from_config(cfg: HeadConfig) -> Result<Self> {
        Self::new(cfg.n_p, cfg.k)
    }

    pub fn config(&self) -> HeadConfig {
        HeadConfig {
            n_p: self.n_parents,
            k: self.k,
        }
    }

    pub fn n_parents(&self) -> usize {
        self.n_parents
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Total softmax nodes, `n_p·k`.
    pub fn n(&self) -> usize {
        self.n_parents * self.k
    }

    pub fn pooling(&self) -> &Matrix {
        &self.pooling
    }

    /// 1-based parent of 1-based node `node`.
    #[inline]
    pub fn parent_of(&self, node: usize) -> usize {
        (node - 1) % self.n_parents + 1
    }

    /// 1-based duplicate index of 1-based node `node`.
    #[inline]
    pub fn sub_of(&self, node: usize) -> usize {
        (node - 1) / self.n_parents + 1
    }

    fn check_columns(&self, z: &Matrix, op: &'static str) -> Result<()> {
        if z.cols() != self.n() {
            return Err(Error::shape(op, z.shape(), (z.rows(), self.n())));
        }
        Ok(())
    }
}

/// `k` vertically stacked `n_p x n_p` identities.
pub fn build_pooling(n_parents: usize, k: usize) -> Result<Matrix> {
    if n_parents < 2 {
        return Err(Error::Config(format!("n_p must be >= 2, got {n_parents}")));
    }
    if k < 1 {
        return Err(Error::Config(format!("k must be >= 1, got {k}")));
    }
    Ok(Matrix::from_fn(n_parents * k, n_parents, |r, c| {
        if r % n_parents == c {
            1.0
        } else {
            0.0
        }
    }))
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// `B = max(0, Z)`.
    pub activity: ActivityMatrix,
    /// `softmax(Z)` over all `n` nodes.
    pub node_probs: Matrix,
    /// Pooled parent probabilities, `m x n_p`.
    pub parent_probs: Matrix,
}

pub fn head_forward(z: &Matrix, head: &AcolHead) -> Result<HeadOutput> {
    head.check_columns(z, "head_forward")?;
    let node_probs = softmax_rows(z);
    let parent_probs = matmul(&node_probs, head.pooling())?;
    Ok(HeadOutput {
        activity: ActivityMatrix::new(relu(z))?,
        node_probs,
        parent_probs,
    })
}

/// Pooled parent probabilities only; skips building `B`.
pub fn parent_probabilities(z: &Matrix, head: &AcolHead) -> Result<Matrix> {
    head.check_columns(z, "parent_probabilities")?;
    let s = softmax_rows(z);
    let np = head.n_parents();
    let mut y = Matrix::zeros(z.rows(), np);
    for r in 0..z.rows() {
        let dst = y.row_mut(r);
        for (j, &p) in s.row(r).iter().enumerate() {
            dst[j % np] += p;
        }
    }
    Ok(y)
}

pub(crate) fn check_labels(labels: &[usize], n_parents: usize) -> Result<()> {
    for (index, &label) in labels.iter().enumerate() {
        if label < 1 || label > n_parents {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                n_parents,
            });
        }
    }
    Ok(())
}

/// Mean log loss of the pooled prediction and its gradient at `Z`.
///
/// With `S = softmax(Z)` and `Y = S·W`, the gradient is
/// `dZ_ij = (S_ij - [parent(j) = t_i] S_ij / Y_{i,t_i}) / m`. A row whose
/// target probability sits under the clamp floor contributes a constant
/// and therefore a zero gradient row.
pub fn supervised_grad(z: &Matrix, labels: &[usize], head: &AcolHead) -> Result<(f64, Matrix)> {
    head.check_columns(z, "supervised_grad")?;
    if labels.len() != z.rows() {
        return Err(Error::Length {
            op: "supervised_grad",
            left: z.rows(),
            right: labels.len(),
        });
    }
    check_labels(labels, head.n_parents())?;
    let m = z.rows();
    let np = head.n_parents();
    let inv_m = 1.0 / m as f64;
    let mut dz = softmax_rows(z);
    let mut loss = 0.0;
    for (i, &t) in labels.iter().enumerate() {
        let row = dz.row_mut(i);
        let target = t - 1;
        let y_t: f64 = row.iter().skip(target).step_by(np).sum();
        if y_t < PROB_FLOOR {
            loss -= PROB_FLOOR.ln();
            row.iter_mut().for_each(|x| *x = 0.0);
            continue;
        }
        loss -= y_t.ln();
        let inv_y = 1.0 / y_t;
        for (j, x) in row.iter_mut().enumerate() {
            let s = *x;
            *x = if j % np == target {
                (s - s * inv_y) * inv_m
            } else {
                s * inv_m
            };
        }
    }
    Ok((loss * inv_m, dz))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationAssignment {
    /// 1-based node index in `1..=n`.
    pub node: usize,
    /// 1-based parent index in `1..=n_p`.
    pub parent: usize,
    /// 1-based duplicate index in `1..=k`.
    pub sub: usize,
}

impl AnnotationAssignment {
    pub fn from_node(node: usize, head: &AcolHead) -> Self {
        Self {
            node,
            parent: head.parent_of(node),
            sub: head.sub_of(node),
        }
    }
}

/// Argmax node of every row of `Z` (lowest index on ties), decomposed into
/// parent and duplicate.
pub fn assign_annotations(z: &Matrix, head: &AcolHead) -> Result<Vec<AnnotationAssignment>> {
    head.check_columns(z, "assign_annotations")?;
    Ok(z
        .row_iter()
        .map(|row| AnnotationAssignment::from_node(argmax(row) + 1, head))
        .collect())
}
