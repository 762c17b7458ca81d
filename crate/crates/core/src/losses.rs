//! Domain-conditioned InfoNCE, the cross-domain alignment regularizer and
//! the combined training objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Each image ranks all texts in the batch.
    ImageToText,
    /// Average of image-to-text and text-to-image.
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub direction: Direction,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.1,
            direction: Direction::ImageToText,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// How per-task meta-losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Which samples the alignment term pairs up across domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    #[default]
    ByLatentConcept,
}

/// Objective hyperparameters: temperature and direction of the contrastive
/// term, weight of the alignment term and how task losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub direction: Direction,
    pub lambda: f64,
    pub pairing: Pairing,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.1,
            direction: Direction::ImageToText,
            lambda: 0.1,
            pairing: Pairing::ByLatentConcept,
            reduction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
            direction: self.direction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.contrastive().validate()?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// InfoNCE over a batch of `N` positive pairs, with `sim` taken as the dot
/// product of the (already normalized) rows:
///
/// `-(1/N) sum_i log( exp(s_ii / tau) / sum_j exp(s_ij / tau) )`
pub fn contrastive_loss<F: Scalar>(
    g: &mut Graph<F>,
    image: NodeId,
    text: NodeId,
    cfg: &ContrastiveConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let (n, d) = match g.shape(image) {
        [n, d] => (*n, *d),
        s => {
            return Err(Error::ShapeMismatch {
                op: "contrastive_loss",
                lhs: s.to_vec(),
                rhs: g.shape(text).to_vec(),
            })
        }
    };
    if g.shape(text) != [n, d] {
        return Err(Error::ShapeMismatch {
            op: "contrastive_loss",
            lhs: vec![n, d],
            rhs: g.shape(text).to_vec(),
        });
    }
    let tt = g.transpose(text)?;
    let sims = g.matmul(image, tt)?;
    let logits = g.scale(sims, F::one() / F::of(cfg.temperature))?;
    let targets: Vec<usize> = (0..n).collect();
    let i2t = g.softmax_cross_entropy(logits, &targets)?;
    match cfg.direction {
        Direction::ImageToText => Ok(i2t),
        Direction::Symmetric => {
            let lt = g.transpose(logits)?;
            let t2i = g.softmax_cross_entropy(lt, &targets)?;
            let both = g.add(i2t, t2i)?;
            g.scale(both, F::of(0.5))
        }
    }
}

/// Embeddings of one domain for the alignment term.
#[derive(Debug, Clone, Copy)]
pub struct AlignGroup<'a> {
    pub domain: usize,
    /// `[M, D]` pre-modulation image embeddings.
    pub embeddings: NodeId,
    pub concepts: &'a [usize],
}

/// A matched cross-domain pair: `(group a, row i, group b, row j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignPair {
    pub group_a: usize,
    pub row_a: usize,
    pub group_b: usize,
    pub row_b: usize,
}

/// Every pair of rows from groups with different domain ids that share a
/// concept id, in group-major then row-major order.
pub fn alignment_pairs(groups: &[(usize, &[usize])]) -> Vec<AlignPair> {
    let mut out = Vec::new();
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            if groups[a].0 == groups[b].0 {
                continue;
            }
            for (i, ci) in groups[a].1.iter().enumerate() {
                for (j, cj) in groups[b].1.iter().enumerate() {
                    if ci == cj {
                        out.push(AlignPair {
                            group_a: a,
                            row_a: i,
                            group_b: b,
                            row_b: j,
                        });
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct AlignmentTerm {
    pub loss: NodeId,
    pub pairs: usize,
}

/// Mean squared L2 distance over all same-concept cross-domain pairs.
/// With no pairs the loss is a zero constant and a warning is logged.
pub fn alignment_loss<F: Scalar>(g: &mut Graph<F>, groups: &[AlignGroup<'_>]) -> Result<AlignmentTerm> {
    for grp in groups {
        if g.shape(grp.embeddings).first() != Some(&grp.concepts.len()) {
            return Err(Error::ShapeMismatch {
                op: "alignment_loss",
                lhs: g.shape(grp.embeddings).to_vec(),
                rhs: vec![grp.concepts.len()],
            });
        }
    }
    let keys: Vec<(usize, &[usize])> = groups.iter().map(|g| (g.domain, g.concepts)).collect();
    let pairs = alignment_pairs(&keys);
    if pairs.is_empty() {
        log::warn!("alignment loss: no same-concept cross-domain pairs in {} groups", groups.len());
        return Ok(AlignmentTerm {
            loss: g.scalar(F::zero()),
            pairs: 0,
        });
    }
    // one gather per (group a, group b) block
    let mut parts = Vec::new();
    let mut start = 0;
    while start < pairs.len() {
        let (ga, gb) = (pairs[start].group_a, pairs[start].group_b);
        let end = start
            + pairs[start..]
                .iter()
                .take_while(|p| p.group_a == ga && p.group_b == gb)
                .count();
        let ia: Vec<usize> = pairs[start..end].iter().map(|p| p.row_a).collect();
        let ib: Vec<usize> = pairs[start..end].iter().map(|p| p.row_b).collect();
        let za = g.gather_rows(groups[ga].embeddings, &ia)?;
        let zb = g.gather_rows(groups[gb].embeddings, &ib)?;
        let sq = g.squared_difference(za, zb)?;
        parts.push(g.sum_all(sq)?);
        start = end;
    }
    let total = g.add_all(&parts)?;
    let loss = g.scale(total, F::one() / F::of_usize(pairs.len()))?;
    Ok(AlignmentTerm {
        loss,
        pairs: pairs.len(),
    })
}

/// `sum_i meta_i + lambda * align` (or the mean over tasks with
/// [`Reduction::Mean`]).
pub fn total_loss<F: Scalar>(
    g: &mut Graph<F>,
    meta_losses: &[NodeId],
    align: NodeId,
    lambda: F,
    reduction: Reduction,
) -> Result<NodeId> {
    if meta_losses.is_empty() {
        return Err(Error::invalid("total_loss needs at least one meta-loss"));
    }
    if !(lambda >= F::zero()) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let mut meta = g.add_all(meta_losses)?;
    if reduction == Reduction::Mean {
        meta = g.scale(meta, F::one() / F::of_usize(meta_losses.len()))?;
    }
    let reg = g.scale(align, lambda)?;
    g.add(meta, reg)
}
