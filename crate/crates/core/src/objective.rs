//! Modularity, its trace relaxation, and the collapse-regularized training loss.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{ModularityMatrix, PatchGraph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Soft `n x k` cluster assignment with its hard argmax labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment<T> {
    pub soft: Tensor<T>,
    pub hard: Vec<usize>,
}

impl<T: Scalar> Assignment<T> {
    /// Ties go to the lowest cluster index.
    pub fn from_soft(soft: Tensor<T>) -> Self {
        let hard = (0..soft.rows()).map(|i| argmax(soft.row(i))).collect();
        Self { soft, hard }
    }

    pub fn clusters(&self) -> usize {
        self.soft.cols()
    }
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = j;
        }
    }
    best
}

/// One-hot `n x k` matrix for the given labels.
pub fn one_hot<T: Scalar>(labels: &[usize], k: usize) -> Tensor<T> {
    Tensor::from_fn(labels.len(), k, |i, j| if labels[i] == j { T::one() } else { T::zero() })
}

/// Hard modularity `Q = (1/2m) sum_ij (A_ij - d_i d_j / 2m) [c_i == c_j]`.
pub fn hard_modularity<T: Scalar>(g: &PatchGraph<T>, labels: &[usize]) -> Result<T> {
    let n = g.nodes();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "hard_modularity",
            lhs: vec![n],
            rhs: vec![labels.len()],
        });
    }
    let two_m = g.edge_mass;
    let mut q = T::zero();
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                q += g.adjacency.get(i, j) - g.degrees[i] * g.degrees[j] / two_m;
            }
        }
    }
    Ok(q / two_m)
}

fn check_rows<T: Scalar>(op: &'static str, b: &ModularityMatrix<T>, c: &Tensor<T>) -> Result<()> {
    if c.rows() != b.b.rows() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: b.b.shape().to_vec(),
            rhs: c.shape().to_vec(),
        });
    }
    Ok(())
}

/// `(1/2m) Tr(C^T B C)`.
pub fn relaxed_modularity<T: Scalar>(b: &ModularityMatrix<T>, c: &Tensor<T>) -> Result<T> {
    check_rows("relaxed_modularity", b, c)?;
    let bc = b.b.matmul(c)?;
    let tr: T = bc.data().iter().zip(c.data()).map(|(&x, &y)| x * y).sum();
    Ok(tr / b.edge_mass)
}

/// `(sqrt(k)/n) * ||sum_i C_i||_2 - 1`.
pub fn collapse_regularizer<T: Scalar>(c: &Tensor<T>) -> T {
    let (n, k) = (c.rows(), c.cols());
    let norm = (0..k)
        .map(|j| {
            let s: T = (0..n).map(|i| c.get(i, j)).sum();
            s * s
        })
        .sum::<T>()
        .sqrt();
    T::from_usize_lossy(k).sqrt() / T::from_usize_lossy(n) * norm - T::one()
}

/// Loss value `-Q̄ + collapse_regularizer` without a tape.
pub fn loss_value<T: Scalar>(b: &ModularityMatrix<T>, c: &Tensor<T>) -> Result<T> {
    Ok(-relaxed_modularity(b, c)? + collapse_regularizer(c))
}

/// Records the loss on `tape` so gradients reach whatever produced `c`.
pub fn loss<T: Scalar>(tape: &mut Tape<T>, b: &ModularityMatrix<T>, c: Var) -> Result<Var> {
    let (n, k) = {
        let v = tape.value(c);
        (v.rows(), v.cols())
    };
    if n != b.b.rows() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: b.b.shape().to_vec(),
            rhs: vec![n, k],
        });
    }
    let tr = tape.trace_quadratic_form(c, Arc::clone(&b.b))?;
    let neg_q = tape.scale(tr, -T::one() / b.edge_mass);
    let sums = tape.sum_rows(c);
    let norm = tape.frobenius_norm(sums);
    let reg = tape.scale(norm, T::from_usize_lossy(k).sqrt() / T::from_usize_lossy(n));
    let total = tape.add(neg_q, reg)?;
    Ok(tape.add_scalar(total, -T::one()))
}
