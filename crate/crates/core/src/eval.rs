//! Cross-modal retrieval metrics, adaptation curves and the domain-gap
//! diagnostic.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet};
use crate::data::{sample_task, Batch, DomainDataset, Task};
use crate::error::{Error, Result};
use crate::losses::alignment_pairs;
use crate::meta::{init_unseen_domains, MetaEngine};
use crate::model::{DualEncoder, Side};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which modality is the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalDirection {
    I2t,
    T2i,
}

impl RetrievalDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalDirection::I2t => "i2t",
            RetrievalDirection::T2i => "t2i",
        }
    }
}

pub const RECALL_KS: [usize; 2] = [1, 5];

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub median_rank: f64,
    pub n_queries: usize,
    pub direction: RetrievalDirection,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// Element-wise mean of several reports with the same direction.
    pub fn mean(reports: &[RetrievalReport]) -> Result<RetrievalReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::invalid("mean of no reports"))?;
        let n = reports.len() as f64;
        let recall_at = RECALL_KS
            .iter()
            .map(|&k| (k, reports.iter().map(|r| r.recall(k)).sum::<f64>() / n))
            .collect();
        Ok(RetrievalReport {
            recall_at,
            median_rank: reports.iter().map(|r| r.median_rank).sum::<f64>() / n,
            n_queries: reports.iter().map(|r| r.n_queries).sum(),
            direction: first.direction,
        })
    }
}

/// 1-based rank of each query's partner (the diagonal) in a square score
/// matrix, where row `i` scores query `i` against every candidate. Ties go
/// to the lower candidate index.
pub fn partner_ranks<F: Scalar>(scores: &Tensor<F>) -> Result<Vec<usize>> {
    let (n, m) = scores.dims2();
    if n != m || scores.shape().len() != 2 {
        return Err(Error::invalid(format!("score matrix must be square, got {:?}", scores.shape())));
    }
    Ok((0..n)
        .map(|i| {
            let row = scores.row(i);
            let own = row[i];
            1 + row
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > own || (s == own && j < i))
                .count()
        })
        .collect())
}

/// Recall@{1,5} and median rank from a query-by-candidate score matrix.
pub fn report_from_scores<F: Scalar>(scores: &Tensor<F>, direction: RetrievalDirection) -> Result<RetrievalReport> {
    let ranks = partner_ranks(scores)?;
    let n = ranks.len();
    if n < 2 {
        return Err(Error::invalid("retrieval needs at least 2 rows"));
    }
    let recall_at = RECALL_KS
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64))
        .collect();
    let mut sorted = ranks;
    sorted.sort_unstable();
    let median_rank = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    Ok(RetrievalReport {
        recall_at,
        median_rank,
        n_queries: n,
        direction,
    })
}

/// Ranks every query's true partner among the batch by cosine similarity of
/// the domain-conditioned embeddings.
pub fn retrieval_eval<F: Scalar>(
    model: &DualEncoder,
    theta: &ParamSet<F>,
    batch: &Batch<F>,
    direction: RetrievalDirection,
) -> Result<RetrievalReport> {
    if batch.len() < 2 {
        return Err(Error::invalid("retrieval needs at least 2 rows"));
    }
    let mut g = Graph::new();
    let p = g.bind(theta);
    let x = g.constant(batch.x.clone());
    let t = g.constant(batch.t.clone());
    let zx = model.embed(&mut g, &p, Side::Image, x, &batch.domain_ids)?;
    let zt = model.embed(&mut g, &p, Side::Text, t, &batch.domain_ids)?;
    let (q, c) = match direction {
        RetrievalDirection::I2t => (zx, zt),
        RetrievalDirection::T2i => (zt, zx),
    };
    let ct = g.transpose(c)?;
    let scores = g.matmul(q, ct)?;
    report_from_scores(g.value(scores), direction)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationCurve {
    pub points: Vec<(usize, RetrievalReport)>,
}

impl AdaptationCurve {
    pub fn at(&self, k: usize) -> Option<&RetrievalReport> {
        self.points.iter().find(|(kk, _)| *kk == k).map(|(_, r)| r)
    }
}

/// Retrieval on the task's query set after `k` first-order inner steps on
/// its support set, for every `k` in `ks`.
pub fn adaptation_curve<F: Scalar>(
    engine: &MetaEngine<'_>,
    theta: &ParamSet<F>,
    task: &Task<F>,
    ks: &[usize],
    direction: RetrievalDirection,
) -> Result<AdaptationCurve> {
    if ks.first() != Some(&0) || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("ks must be strictly increasing and start at 0, got {ks:?}")));
    }
    let mut points = Vec::with_capacity(ks.len());
    let mut current = theta.clone();
    let mut done = 0;
    for &k in ks {
        if k > done {
            current = engine.inner_adapt_steps(&current, task, k - done)?.adapted;
            done = k;
        }
        points.push((k, retrieval_eval(engine.model, &current, &task.query, direction)?));
    }
    Ok(AdaptationCurve { points })
}

/// Settings for [`heldout_adaptation`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeldoutProtocol {
    pub ks: Vec<usize>,
    pub num_tasks: usize,
    pub support_size: usize,
    pub query_size: usize,
    pub direction: RetrievalDirection,
    pub seed: u64,
}

/// Mean adaptation curve of one held-out domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainCurve {
    pub domain: usize,
    pub curve: AdaptationCurve,
}

/// For each held-out domain: resets its embedding row to the mean of the
/// `seen` rows unless it is itself in `seen`, then averages the adaptation curve over `num_tasks` sampled
/// tasks. Task draws depend only on `(seed, domain, task index)`.
pub fn heldout_adaptation<F: Scalar>(
    engine: &MetaEngine<'_>,
    theta: &ParamSet<F>,
    dataset: &DomainDataset<F>,
    held_out: &[usize],
    seen: &[usize],
    protocol: &HeldoutProtocol,
) -> Result<Vec<DomainCurve>> {
    let present = dataset.domains();
    if let Some(d) = held_out.iter().find(|d| !present.contains(d)) {
        return Err(Error::invalid(format!("unknown domain id {d}")));
    }
    if protocol.num_tasks == 0 {
        return Err(Error::invalid("num_tasks must be positive"));
    }
    let unseen: Vec<usize> = held_out.iter().copied().filter(|d| !seen.contains(d)).collect();
    let start = init_unseen_domains(theta, &unseen, seen)?;
    let mut out = Vec::with_capacity(held_out.len());
    for &domain in held_out {
        let mut per_k: Vec<Vec<RetrievalReport>> = vec![Vec::new(); protocol.ks.len()];
        for task_index in 0..protocol.num_tasks {
            let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed ^ ((domain as u64) << 32));
            rng.set_stream(task_index as u64);
            let task = sample_task(dataset, domain, protocol.support_size, protocol.query_size, &mut rng)?;
            let curve = adaptation_curve(engine, &start, &task, &protocol.ks, protocol.direction)?;
            for (slot, (_, report)) in per_k.iter_mut().zip(curve.points) {
                slot.push(report);
            }
        }
        let points = protocol
            .ks
            .iter()
            .zip(&per_k)
            .map(|(&k, reports)| Ok((k, RetrievalReport::mean(reports)?)))
            .collect::<Result<Vec<_>>>()?;
        out.push(DomainCurve {
            domain,
            curve: AdaptationCurve { points },
        });
    }
    Ok(out)
}

/// Mean squared distance between pre-modulation image embeddings of
/// same-concept samples from different domains, over every such pair in
/// `dataset`.
pub fn domain_gap<F: Scalar>(model: &DualEncoder, theta: &ParamSet<F>, dataset: &DomainDataset<F>) -> Result<F> {
    let domains = dataset.domains();
    if domains.len() < 2 {
        return Err(Error::invalid("domain gap needs at least two domains"));
    }
    let mut g = Graph::new();
    let p = g.bind(theta);
    let mut embeddings = Vec::new();
    let mut concepts = Vec::new();
    for &d in &domains {
        let b = dataset.domain_batch(d);
        let x = g.constant(b.x);
        let z = model.encode_image(&mut g, &p, x)?;
        embeddings.push(g.value(z).clone());
        concepts.push(b.concept_ids);
    }
    let keys: Vec<(usize, &[usize])> = domains
        .iter()
        .zip(&concepts)
        .map(|(&d, c)| (d, c.as_slice()))
        .collect();
    let pairs = alignment_pairs(&keys);
    if pairs.is_empty() {
        return Err(Error::invalid("no same-concept pairs across domains"));
    }
    let total: F = pairs
        .iter()
        .map(|p| {
            embeddings[p.group_a]
                .row(p.row_a)
                .iter()
                .zip(embeddings[p.group_b].row(p.row_b))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<F>()
        })
        .sum();
    Ok(total / F::of_usize(pairs.len()))
}
