//! Operations built from the primitives in [`Graph`]. Their gradients come
//! for free from the primitive rules.

use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<F: Scalar> Graph<F> {
    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.mul(x, x)
    }

    /// Elementwise `(a - b)^2`.
    pub fn squared_difference(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        self.mul(d, d)
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, F::one() / F::of_usize(n))
    }

    /// Euclidean norm of each row, shape `[n, 1]`.
    pub fn row_norms(&mut self, x: NodeId) -> Result<NodeId> {
        let sq = self.mul(x, x)?;
        let s = self.sum_cols(sq)?;
        self.sqrt(s)
    }

    /// Scales every row of a matrix to unit L2 norm. A zero row is a domain error.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let m = match self.shape(x) {
            [_, m] => *m,
            s => {
                return Err(Error::ShapeMismatch {
                    op: "l2_normalize_rows",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        let norms = self.row_norms(x)?;
        let norms = self.repeat_cols(norms, m)?;
        self.div(x, norms)
    }

    /// Row-wise `softmax(x / temperature)`.
    pub fn softmax_rows(&mut self, x: NodeId, temperature: F) -> Result<NodeId> {
        if !(temperature > F::zero()) {
            return Err(Error::Domain {
                op: "softmax_rows",
                detail: format!("temperature must be positive, got {temperature}"),
            });
        }
        let z = self.scale(x, F::one() / temperature)?;
        let lp = self.log_softmax_rows(z)?;
        self.exp(lp)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (n, c) = match self.shape(logits) {
            [n, c] => (*n, *c),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    lhs: s.to_vec(),
                    rhs: vec![targets.len()],
                })
            }
        };
        if targets.len() != n || targets.iter().any(|&t| t >= c) {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: vec![n, c],
                rhs: vec![targets.len()],
            });
        }
        let mut mask = Tensor::zeros(&[n, c]);
        for (i, &t) in targets.iter().enumerate() {
            mask.data_mut()[i * c + t] = F::one();
        }
        let mask = self.constant(mask);
        let lp = self.log_softmax_rows(logits)?;
        let picked = self.mul(lp, mask)?;
        let s = self.sum_all(picked)?;
        self.scale(s, -F::one() / F::of_usize(n))
    }

    /// Sum of scalar nodes in the given order.
    pub fn add_all(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::invalid("add_all of an empty list"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }
}
