//! Named parameter collections, both as plain values and as graph nodes.

use std::collections::HashMap;

use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub trainable: bool,
}

/// Ordered map from parameter name to tensor. Iteration follows insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<F> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<F>> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    pub fn entry(&self, i: usize) -> &ParamEntry<F> {
        &self.entries[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut ParamEntry<F> {
        &mut self.entries[i]
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
        self.entries[i].trainable = trainable;
        Ok(())
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Same names, shapes and order.
    pub fn is_congruent(&self, other: &ParamSet<F>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    pub fn check_congruent(&self, other: &ParamSet<F>) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(Error::Incongruent(format!(
                "{:?} vs {:?}",
                self.names().collect::<Vec<_>>(),
                other.names().collect::<Vec<_>>()
            )))
        }
    }

    /// Congruent set of zeros with the same trainable flags.
    pub fn zeros_like(&self) -> Self {
        self.map_values(|e| Tensor::zeros(e.value.shape()))
    }

    pub fn map_values(&self, mut f: impl FnMut(&ParamEntry<F>) -> Tensor<F>) -> Self {
        let mut out = ParamSet::new();
        for e in &self.entries {
            out.insert(e.name.clone(), f(e), e.trainable)
                .expect("names are unique in the source set");
        }
        out
    }

    /// Euclidean norm over all entries, as if flattened into one vector.
    pub fn global_norm(&self) -> F {
        self.entries
            .iter()
            .flat_map(|e| e.value.data().iter())
            .map(|&v| v * v)
            .sum::<F>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }

    /// Largest absolute entrywise difference; `None` when incongruent.
    pub fn max_abs_diff(&self, other: &ParamSet<F>) -> Option<F> {
        if !self.is_congruent(other) {
            return None;
        }
        Some(
            self.entries
                .iter()
                .zip(&other.entries)
                .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()))
                .fold(F::zero(), |m, (&x, &y)| m.max((x - y).abs())),
        )
    }

    /// Entrywise `self + s * other`.
    pub fn add_scaled(&self, other: &ParamSet<F>, s: F) -> Result<Self> {
        self.check_congruent(other)?;
        Ok(ParamSet {
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| ParamEntry {
                    name: a.name.clone(),
                    value: Tensor::new(
                        a.value.shape().to_vec(),
                        a.value
                            .data()
                            .iter()
                            .zip(b.value.data())
                            .map(|(&x, &y)| x + s * y)
                            .collect(),
                    )
                    .expect("congruent shapes"),
                    trainable: a.trainable,
                })
                .collect(),
            index: self.index.clone(),
        })
    }

    /// Flattened values in entry order.
    pub fn flatten(&self) -> Vec<F> {
        self.entries
            .iter()
            .flat_map(|e| e.value.data().iter().copied())
            .collect()
    }
}

/// Parameters bound into a graph: same names and order as the source
/// [`ParamSet`], each mapped to a node.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamNodes {
    entries: Vec<(String, NodeId, bool)>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, id, _)| *id)
            .ok_or_else(|| Error::invalid(format!("parameter {name:?} is not bound")))
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.entries.iter().map(|(_, id, _)| *id).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId, bool)> {
        self.entries.iter().map(|(n, id, t)| (n.as_str(), *id, *t))
    }

    pub fn is_congruent<F: Scalar>(&self, other: &ParamNodes, graph: &Graph<F>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ia, _), (b, ib, _))| a == b && graph.shape(*ia) == graph.shape(*ib))
    }

    fn with_ids(&self, ids: Vec<NodeId>) -> ParamNodes {
        ParamNodes {
            entries: self
                .entries
                .iter()
                .zip(ids)
                .map(|((n, _, t), id)| (n.clone(), id, *t))
                .collect(),
        }
    }
}

impl<F: Scalar> Graph<F> {
    /// Adds every parameter as an input node. Trainable entries become
    /// differentiable leaves; frozen ones become constants.
    pub fn bind(&mut self, params: &ParamSet<F>) -> ParamNodes {
        ParamNodes {
            entries: params
                .iter()
                .map(|e| {
                    let id = if e.trainable {
                        self.leaf(e.value.clone())
                    } else {
                        self.constant(e.value.clone())
                    };
                    (e.name.clone(), id, e.trainable)
                })
                .collect(),
        }
    }

    /// Current values of bound parameters.
    pub fn values(&self, nodes: &ParamNodes) -> ParamSet<F> {
        let mut out = ParamSet::new();
        for (name, id, trainable) in nodes.iter() {
            out.insert(name, self.value(id).clone(), trainable)
                .expect("bound names are unique");
        }
        out
    }

    /// Gradient nodes of `root` for every bound parameter. With
    /// `create_graph = false` the results are detached constants.
    pub fn grad_params(&mut self, root: NodeId, wrt: &ParamNodes, create_graph: bool) -> Result<ParamNodes> {
        let mut ids = self.grad(root, &wrt.ids())?;
        if !create_graph {
            ids = ids.into_iter().map(|g| self.detach(g)).collect();
        }
        // frozen entries report zero
        for ((_, _, trainable), g) in wrt.entries.iter().zip(ids.iter_mut()) {
            if !trainable {
                let shape = self.shape(*g).to_vec();
                *g = self.constant(Tensor::zeros(&shape));
            }
        }
        Ok(wrt.with_ids(ids))
    }

    /// Gradient values of the scalar `root`, congruent with `wrt`.
    pub fn backward(&mut self, root: NodeId, wrt: &ParamNodes) -> Result<ParamSet<F>> {
        let g = self.grad_params(root, wrt, false)?;
        Ok(self.values(&g))
    }

    /// One differentiable gradient-descent step `theta - lr * grad` on the
    /// entries selected by `update` (others pass through unchanged). If the
    /// gradient nodes are still attached to the graph that produced them,
    /// differentiating through the result includes second-order terms.
    pub fn sgd_step(
        &mut self,
        params: &ParamNodes,
        grads: &ParamNodes,
        lr: F,
        update: impl Fn(&str) -> bool,
    ) -> Result<ParamNodes> {
        if !(lr >= F::zero()) || !lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if !params.is_congruent(grads, self) {
            return Err(Error::Incongruent("parameters and gradients differ".into()));
        }
        let mut ids = Vec::with_capacity(params.len());
        for ((name, theta, trainable), (_, g, _)) in params.entries.iter().zip(&grads.entries) {
            if *trainable && update(name) {
                let step = self.scale(*g, lr)?;
                ids.push(self.sub(*theta, step)?);
            } else {
                ids.push(*theta);
            }
        }
        Ok(params.with_ids(ids))
    }
}
