//! Dual MLP encoders, the domain-embedding table and FiLM modulators that
//! turn raw features into domain-conditioned, unit-norm embeddings.
//!
//! Parameter names:
//!
//! | name                         | shape              |
//! |------------------------------|--------------------|
//! | `img.layer{i}.weight`        | `[in, out]`        |
//! | `img.layer{i}.bias`          | `[out]`            |
//! | `txt.layer{i}.*`             | same for text      |
//! | `domain.embedding`           | `[domains, d_dim]` |
//! | `film.{img,txt}.gamma.weight`| `[d_dim, embed]`   |
//! | `film.{img,txt}.gamma.bias`  | `[embed]`          |
//! | `film.{img,txt}.beta.*`      | same as gamma      |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamNodes, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DOMAIN_TABLE: &str = "domain.embedding";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl EncoderSpec {
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainTableSpec {
    pub num_domains: usize,
    pub dim: usize,
}

/// Which tower of the dual encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Image,
    Text,
}

impl Side {
    fn prefix(self) -> &'static str {
        match self {
            Side::Image => "img",
            Side::Text => "txt",
        }
    }
}

/// Shapes of the image tower, text tower and domain table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DualEncoder {
    pub image: EncoderSpec,
    pub text: EncoderSpec,
    pub domains: DomainTableSpec,
}

impl DualEncoder {
    pub fn new(image: EncoderSpec, text: EncoderSpec, domains: DomainTableSpec) -> Result<Self> {
        let m = DualEncoder {
            image,
            text,
            domains,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for (side, s) in [("image", &self.image), ("text", &self.text)] {
            if s.input_dim == 0 || s.embed_dim == 0 || s.hidden_dims.contains(&0) {
                return Err(Error::Config(format!("{side} encoder dimensions must be positive")));
            }
        }
        if self.image.embed_dim != self.text.embed_dim {
            return Err(Error::Config(format!(
                "image and text encoders must share embed_dim ({} vs {})",
                self.image.embed_dim, self.text.embed_dim
            )));
        }
        if self.domains.num_domains == 0 || self.domains.dim == 0 {
            return Err(Error::Config("domain table dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.image.embed_dim
    }

    fn spec(&self, side: Side) -> &EncoderSpec {
        match side {
            Side::Image => &self.image,
            Side::Text => &self.text,
        }
    }

    /// Deterministic initialization: Glorot-uniform encoder weights, zero
    /// biases, `N(0, 0.1^2)` domain embeddings and all-zero FiLM heads, so
    /// the modulation starts as the identity for every domain.
    pub fn init_params<F: Scalar>(&self, seed: u64) -> ParamSet<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let put = |p: &mut ParamSet<F>, name: String, t: Tensor<F>| {
            p.insert(name, t, true).expect("generated names are unique");
        };
        for side in [Side::Image, Side::Text] {
            for (i, (fan_in, fan_out)) in self.spec(side).layer_dims().into_iter().enumerate() {
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w: Vec<F> = (0..fan_in * fan_out)
                    .map(|_| F::of(rng.random_range(-s..s)))
                    .collect();
                let pre = side.prefix();
                put(&mut p, format!("{pre}.layer{i}.weight"), Tensor::new(vec![fan_in, fan_out], w).unwrap());
                put(&mut p, format!("{pre}.layer{i}.bias"), Tensor::zeros(&[fan_out]));
            }
        }
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let (nd, dd) = (self.domains.num_domains, self.domains.dim);
        let table: Vec<F> = (0..nd * dd).map(|_| F::of(normal.sample(&mut rng))).collect();
        put(&mut p, DOMAIN_TABLE.into(), Tensor::new(vec![nd, dd], table).unwrap());
        let e = self.embed_dim();
        for side in [Side::Image, Side::Text] {
            for head in ["gamma", "beta"] {
                let pre = format!("film.{}.{head}", side.prefix());
                put(&mut p, format!("{pre}.weight"), Tensor::zeros(&[dd, e]));
                put(&mut p, format!("{pre}.bias"), Tensor::zeros(&[e]));
            }
        }
        p
    }

    /// Raw (pre-modulation, unnormalized) embedding of one tower.
    pub fn encode<F: Scalar>(&self, g: &mut Graph<F>, p: &ParamNodes, side: Side, x: NodeId) -> Result<NodeId> {
        let spec = self.spec(side);
        match g.shape(x) {
            [_, d] if *d == spec.input_dim => {}
            s => {
                return Err(Error::ShapeMismatch {
                    op: "encode",
                    lhs: s.to_vec(),
                    rhs: vec![spec.input_dim],
                })
            }
        }
        let layers = spec.layer_dims().len();
        let mut h = x;
        for i in 0..layers {
            let w = p.get(&format!("{}.layer{i}.weight", side.prefix()))?;
            let b = p.get(&format!("{}.layer{i}.bias", side.prefix()))?;
            h = g.matmul(h, w)?;
            h = g.add(h, b)?;
            if i + 1 < layers {
                h = match spec.activation {
                    Activation::Tanh => g.tanh(h)?,
                    Activation::Relu => g.relu(h)?,
                };
            }
        }
        Ok(h)
    }

    pub fn encode_image<F: Scalar>(&self, g: &mut Graph<F>, p: &ParamNodes, x: NodeId) -> Result<NodeId> {
        self.encode(g, p, Side::Image, x)
    }

    pub fn encode_text<F: Scalar>(&self, g: &mut Graph<F>, p: &ParamNodes, t: NodeId) -> Result<NodeId> {
        self.encode(g, p, Side::Text, t)
    }

    pub fn check_domains(&self, domain_ids: &[usize]) -> Result<()> {
        match domain_ids.iter().find(|&&d| d >= self.domains.num_domains) {
            Some(d) => Err(Error::invalid(format!(
                "domain id {d} out of range for {} domains",
                self.domains.num_domains
            ))),
            None => Ok(()),
        }
    }

    /// FiLM conditioning followed by row-wise L2 normalization:
    /// `normalize((1 + W_g e_d + b_g) * z + W_b e_d + b_b)`.
    pub fn modulate<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &ParamNodes,
        side: Side,
        z: NodeId,
        domain_ids: &[usize],
    ) -> Result<NodeId> {
        self.check_domains(domain_ids)?;
        if g.shape(z).first() != Some(&domain_ids.len()) {
            return Err(Error::ShapeMismatch {
                op: "modulate",
                lhs: g.shape(z).to_vec(),
                rhs: vec![domain_ids.len()],
            });
        }
        let table = p.get(DOMAIN_TABLE)?;
        let e = g.gather_rows(table, domain_ids)?;
        let pre = format!("film.{}", side.prefix());
        let gamma = {
            let w = p.get(&format!("{pre}.gamma.weight"))?;
            let b = p.get(&format!("{pre}.gamma.bias"))?;
            let raw = g.matmul(e, w)?;
            let raw = g.add(raw, b)?;
            g.affine(raw, F::one(), F::one())?
        };
        let beta = {
            let w = p.get(&format!("{pre}.beta.weight"))?;
            let b = p.get(&format!("{pre}.beta.bias"))?;
            let raw = g.matmul(e, w)?;
            g.add(raw, b)?
        };
        let scaled = g.mul(gamma, z)?;
        let shifted = g.add(scaled, beta)?;
        g.l2_normalize_rows(shifted)
    }

    /// Full conditioned pathway `(x, d) -> z~` for one tower.
    pub fn embed<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &ParamNodes,
        side: Side,
        x: NodeId,
        domain_ids: &[usize],
    ) -> Result<NodeId> {
        let z = self.encode(g, p, side, x)?;
        self.modulate(g, p, side, z, domain_ids)
    }
}
