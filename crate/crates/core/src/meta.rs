//! Bilevel training: K-step inner adaptation on a task's support set,
//! query-set meta-loss at the adapted parameters, alignment at the global
//! parameters, and one outer optimizer step. Also the pooled single-objective
//! baseline used for comparison.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamNodes, ParamSet};
use crate::data::{Batch, Task};
use crate::error::{Error, Result};
use crate::losses::{alignment_loss, contrastive_loss, total_loss, AlignGroup, LossConfig};
use crate::model::{DualEncoder, Side, DOMAIN_TABLE};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::scalar::Scalar;

/// Whether the outer gradient differentiates through the inner gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    /// Inner gradients are treated as constants.
    First,
    /// Exact unrolled gradient, including Hessian-vector terms.
    Second,
}

/// Parameters the inner loop is allowed to move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptSubset {
    All,
    FilmOnly,
    DomainEmbeddingOnly,
}

impl AdaptSubset {
    pub fn includes(self, name: &str) -> bool {
        match self {
            AdaptSubset::All => true,
            AdaptSubset::FilmOnly => name.starts_with("film."),
            AdaptSubset::DomainEmbeddingOnly => name == DOMAIN_TABLE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub meta_batch_size: usize,
    pub support_size: usize,
    pub query_size: usize,
    /// Rows per training domain in the alignment batch.
    pub align_per_domain: usize,
    pub order: Order,
    pub adapt_subset: AdaptSubset,
    pub iterations: usize,
    pub outer: OptimizerConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 0.01,
            inner_steps: 3,
            meta_batch_size: 4,
            support_size: 16,
            query_size: 16,
            align_per_domain: 16,
            order: Order::First,
            adapt_subset: AdaptSubset::All,
            iterations: 2000,
            outer: OptimizerConfig::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0) || !self.inner_lr.is_finite() {
            return Err(Error::Config(format!("meta.inner_lr must be positive, got {}", self.inner_lr)));
        }
        for (name, v) in [
            ("meta_batch_size", self.meta_batch_size),
            ("support_size", self.support_size),
            ("query_size", self.query_size),
            ("iterations", self.iterations),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("meta.{name} must be positive")));
            }
        }
        self.outer.validate()
    }
}

/// Result of adapting the global parameters to one task.
#[derive(Debug, Clone)]
pub struct AdaptedParams<'a, F> {
    pub base: &'a ParamSet<F>,
    pub adapted: ParamSet<F>,
    /// Support loss before each inner step.
    pub trace: Vec<F>,
}

/// Every intermediate parameter set of an inner loop, as graph nodes.
#[derive(Debug, Clone)]
pub struct AdaptPath<F> {
    /// `steps[k]` is the parameter set after `k` updates; `steps[0]` is the input.
    pub steps: Vec<ParamNodes>,
    pub trace: Vec<F>,
}

impl<F> AdaptPath<F> {
    pub fn last(&self) -> &ParamNodes {
        self.steps.last().expect("path holds at least the initial parameters")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub query_losses: Vec<f64>,
    pub align_loss: f64,
    pub align_pairs: usize,
    pub total: f64,
    pub grad_norm: f64,
}

/// Model, loop and objective settings bundled for the training operations.
#[derive(Debug)]
pub struct MetaEngine<'m> {
    pub model: &'m DualEncoder,
    pub meta: MetaConfig,
    pub loss: LossConfig,
    inner_calls: AtomicUsize,
}

fn check_finite<F: Scalar>(v: F, what: &str, step: Option<usize>) -> Result<F> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
            step,
        })
    }
}

impl<'m> MetaEngine<'m> {
    pub fn new(model: &'m DualEncoder, meta: MetaConfig, loss: LossConfig) -> Result<Self> {
        model.validate()?;
        meta.validate()?;
        loss.validate()?;
        Ok(MetaEngine {
            model,
            meta,
            loss,
            inner_calls: AtomicUsize::new(0),
        })
    }

    /// Number of inner-loop runs started through this engine.
    pub fn inner_adapt_calls(&self) -> usize {
        self.inner_calls.load(Ordering::Relaxed)
    }

    /// Contrastive loss of a batch, each row conditioned on its own domain.
    pub fn pair_loss<F: Scalar>(&self, g: &mut Graph<F>, p: &ParamNodes, batch: &Batch<F>) -> Result<NodeId> {
        let x = g.constant(batch.x.clone());
        let t = g.constant(batch.t.clone());
        let zx = self.model.embed(g, p, Side::Image, x, &batch.domain_ids)?;
        let zt = self.model.embed(g, p, Side::Text, t, &batch.domain_ids)?;
        contrastive_loss(g, zx, zt, &self.loss.contrastive())
    }

    /// Alignment term over one batch per domain, on pre-modulation image
    /// embeddings at `p`.
    pub fn align_term<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &ParamNodes,
        batches: &[Batch<F>],
    ) -> Result<(NodeId, usize)> {
        if batches.is_empty() {
            return Ok((g.scalar(F::zero()), 0));
        }
        let mut embeddings = Vec::with_capacity(batches.len());
        for b in batches {
            let x = g.constant(b.x.clone());
            embeddings.push(self.model.encode_image(g, p, x)?);
        }
        let groups: Vec<AlignGroup<'_>> = batches
            .iter()
            .zip(&embeddings)
            .filter(|(b, _)| !b.is_empty())
            .map(|(b, &z)| AlignGroup {
                domain: b.domain_ids[0],
                embeddings: z,
                concepts: &b.concept_ids,
            })
            .collect();
        let term = alignment_loss(g, &groups)?;
        Ok((term.loss, term.pairs))
    }

    /// Runs `steps` differentiable SGD updates on the support loss. With
    /// [`Order::Second`] the returned nodes keep the full dependency on the
    /// inner gradients.
    pub fn inner_adapt_graph<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        theta: &ParamNodes,
        support: &Batch<F>,
        steps: usize,
        order: Order,
    ) -> Result<AdaptPath<F>> {
        self.inner_calls.fetch_add(1, Ordering::Relaxed);
        let lr = F::of(self.meta.inner_lr);
        let subset = self.meta.adapt_subset;
        let mut path = AdaptPath {
            steps: vec![theta.clone()],
            trace: Vec::with_capacity(steps),
        };
        for k in 0..steps {
            let current = path.last().clone();
            let loss = self.pair_loss(g, &current, support)?;
            let v = check_finite(g.value(loss).item(), "support loss", Some(k))?;
            path.trace.push(v);
            let grads = g.grad_params(loss, &current, order == Order::Second)?;
            let next = g.sgd_step(&current, &grads, lr, |name| subset.includes(name))?;
            path.steps.push(next);
        }
        Ok(path)
    }

    /// Adapts `theta` to a task with `meta.inner_steps` updates. `theta`
    /// itself is never modified.
    pub fn inner_adapt<'a, F: Scalar>(&self, theta: &'a ParamSet<F>, task: &Task<F>) -> Result<AdaptedParams<'a, F>> {
        self.inner_adapt_steps(theta, task, self.meta.inner_steps)
    }

    pub fn inner_adapt_steps<'a, F: Scalar>(
        &self,
        theta: &'a ParamSet<F>,
        task: &Task<F>,
        steps: usize,
    ) -> Result<AdaptedParams<'a, F>> {
        check_task(task)?;
        let mut g = Graph::new();
        let nodes = g.bind(theta);
        let path = self.inner_adapt_graph(&mut g, &nodes, &task.support, steps, Order::First)?;
        Ok(AdaptedParams {
            base: theta,
            adapted: g.values(path.last()),
            trace: path.trace,
        })
    }

    /// Gradient of `sum_i L_query_i(theta_i*) + lambda * L_align(theta)` with
    /// respect to `theta`, plus the loss values.
    pub fn meta_gradient<F: Scalar>(
        &self,
        theta: &ParamSet<F>,
        tasks: &[Task<F>],
        align: &[Batch<F>],
    ) -> Result<(ParamSet<F>, StepMetrics)> {
        if tasks.is_empty() {
            return Err(Error::invalid("meta step needs at least one task"));
        }
        let mut g = Graph::new();
        let nodes = g.bind(theta);
        let mut query_losses = Vec::with_capacity(tasks.len());
        for task in tasks {
            check_task(task)?;
            let path = self.inner_adapt_graph(
                &mut g,
                &nodes,
                &task.support,
                self.meta.inner_steps,
                self.meta.order,
            )?;
            query_losses.push(self.pair_loss(&mut g, path.last(), &task.query)?);
        }
        let (align_loss, align_pairs) = self.align_term(&mut g, &nodes, align)?;
        let total = total_loss(
            &mut g,
            &query_losses,
            align_loss,
            F::of(self.loss.lambda),
            self.loss.reduction,
        )?;
        let total_v = check_finite(g.value(total).item(), "meta objective", None)?;
        let grads = g.backward(total, &nodes)?;
        let grad_norm = check_finite(grads.global_norm(), "meta-gradient", None)?;
        let metrics = StepMetrics {
            query_losses: query_losses.iter().map(|&q| g.value(q).item().as_f64()).collect(),
            align_loss: g.value(align_loss).item().as_f64(),
            align_pairs,
            total: total_v.as_f64(),
            grad_norm: grad_norm.as_f64(),
        };
        Ok((grads, metrics))
    }

    /// One outer update of `theta` (encoders, FiLM heads and domain table).
    pub fn meta_step<F: Scalar>(
        &self,
        theta: &mut ParamSet<F>,
        optimizer: &mut Optimizer<F>,
        tasks: &[Task<F>],
        align: &[Batch<F>],
    ) -> Result<StepMetrics> {
        let (grads, metrics) = self.meta_gradient(theta, tasks, align)?;
        optimizer.step(theta, &grads)?;
        Ok(metrics)
    }

    /// Gradient of the plain contrastive loss on a pooled batch. The
    /// alignment value is reported on `align` but does not enter the gradient.
    pub fn baseline_gradient<F: Scalar>(
        &self,
        theta: &ParamSet<F>,
        batch: &Batch<F>,
        align: &[Batch<F>],
    ) -> Result<(ParamSet<F>, StepMetrics)> {
        let mut g = Graph::new();
        let nodes = g.bind(theta);
        let loss = self.pair_loss(&mut g, &nodes, batch)?;
        let loss_v = check_finite(g.value(loss).item(), "baseline loss", None)?;
        let grads = g.backward(loss, &nodes)?;
        let grad_norm = check_finite(grads.global_norm(), "baseline gradient", None)?;
        let (align_loss, align_pairs) = if align.is_empty() {
            (0.0, 0)
        } else {
            let mut ga = Graph::new();
            let na = ga.bind(theta);
            let (a, n) = self.align_term(&mut ga, &na, align)?;
            (ga.value(a).item().as_f64(), n)
        };
        Ok((
            grads,
            StepMetrics {
                query_losses: vec![loss_v.as_f64()],
                align_loss,
                align_pairs,
                total: loss_v.as_f64(),
                grad_norm: grad_norm.as_f64(),
            },
        ))
    }

    pub fn baseline_step<F: Scalar>(
        &self,
        theta: &mut ParamSet<F>,
        optimizer: &mut Optimizer<F>,
        batch: &Batch<F>,
        align: &[Batch<F>],
    ) -> Result<StepMetrics> {
        let (grads, metrics) = self.baseline_gradient(theta, batch, align)?;
        optimizer.step(theta, &grads)?;
        Ok(metrics)
    }
}

fn check_task<F: Scalar>(task: &Task<F>) -> Result<()> {
    if task.support.is_empty() || task.query.is_empty() {
        return Err(Error::invalid("task support and query must be non-empty"));
    }
    if task
        .support
        .domain_ids
        .iter()
        .chain(&task.query.domain_ids)
        .any(|&d| d != task.domain)
    {
        return Err(Error::invalid(format!("task rows do not all belong to domain {}", task.domain)));
    }
    Ok(())
}

/// Sets the embedding rows of domains never seen in training to the mean of
/// the trained rows, so the inner loop adapts from a neutral starting point.
pub fn init_unseen_domains<F: Scalar>(theta: &ParamSet<F>, unseen: &[usize], seen: &[usize]) -> Result<ParamSet<F>> {
    if seen.is_empty() {
        return Err(Error::invalid("no trained domains to average"));
    }
    let mut out = theta.clone();
    let table = out
        .get_mut(DOMAIN_TABLE)
        .ok_or_else(|| Error::invalid("parameter set has no domain table"))?;
    let (rows, dim) = table.dims2();
    if let Some(d) = unseen.iter().chain(seen).find(|&&d| d >= rows) {
        return Err(Error::invalid(format!("domain {d} out of range for {rows} table rows")));
    }
    let mut mean = vec![F::zero(); dim];
    for &d in seen {
        for (m, &v) in mean.iter_mut().zip(table.row(d)) {
            *m = *m + v;
        }
    }
    let n = F::of_usize(seen.len());
    mean.iter_mut().for_each(|m| *m = *m / n);
    let data = table.data_mut();
    for &d in unseen {
        data[d * dim..(d + 1) * dim].copy_from_slice(&mean);
    }
    Ok(out)
}
