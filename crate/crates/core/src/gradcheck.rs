//! Finite-difference oracle suite behind `metacon gradcheck`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, OpKind, ParamSet};
use crate::data::{generate, sample_task, DomainDataset, GeneratorSpec, Task};
use crate::error::{Error, Result};
use crate::losses::{alignment_loss, contrastive_loss, AlignGroup, ContrastiveConfig, Direction, LossConfig};
use crate::meta::{MetaConfig, MetaEngine, Order};
use crate::model::{Activation, DomainTableSpec, DualEncoder, EncoderSpec};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so entries that are zero in both
/// gradients do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-4;
pub const META_TOL: f64 = 1e-3;
pub const ORDER_AGREE_TOL: f64 = 1e-3;
pub const ORDER_DIVERGE_MIN: f64 = 1e-3;
pub const SMALL_ALPHA: f64 = 1e-6;
pub const LARGE_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Tiny,
    Small,
}

impl Scale {
    pub fn from_name(s: &str) -> Option<Scale> {
        match s {
            "tiny" => Some(Scale::Tiny),
            "small" => Some(Scale::Small),
            _ => None,
        }
    }

    /// Network used for the meta-gradient checks.
    pub fn model(self) -> DualEncoder {
        let (input, hidden, embed, ddim, domains) = match self {
            Scale::Tiny => (3, 2, 2, 1, 2),
            Scale::Small => (4, 4, 3, 2, 3),
        };
        let tower = EncoderSpec {
            input_dim: input,
            hidden_dims: vec![hidden],
            embed_dim: embed,
            activation: Activation::Tanh,
        };
        DualEncoder::new(
            tower.clone(),
            tower,
            DomainTableSpec {
                num_domains: domains,
                dim: ddim,
            },
        )
        .expect("built-in gradcheck model is valid")
    }

    fn trials(self) -> usize {
        match self {
            Scale::Tiny => 2,
            Scale::Small => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound {
    /// Passes when the measured value is strictly below.
    Below(f64),
    /// Passes when the measured value is strictly above.
    Above(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub bound: Bound,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        match self.bound {
            Bound::Below(t) => self.value < t,
            Bound::Above(t) => self.value > t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub scale: Scale,
    pub fault: Option<OpKind>,
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<34} {:>12}  {:<14} result", "check", "measured", "bound")?;
        for c in &self.checks {
            let bound = match c.bound {
                Bound::Below(t) => format!("< {t:e}"),
                Bound::Above(t) => format!("> {t:e}"),
            };
            let verdict = if c.passed() { "ok" } else { "FAIL" };
            writeln!(f, "{:<34} {:>12.3e}  {:<14} {verdict}", c.name, c.value, bound)?;
        }
        Ok(())
    }
}

pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm.
pub fn norm_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let d = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        d
    } else {
        d / scale
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("non-empty shape")
}

/// Central differences of scalar `root` w.r.t. every element of `leaf`.
fn numeric_grad(g: &mut Graph<f64>, root: NodeId, leaf: NodeId) -> Result<Vec<f64>> {
    let base = g.value(leaf).clone();
    let mut out = Vec::with_capacity(base.numel());
    for i in 0..base.numel() {
        let mut plus = base.clone();
        plus.data_mut()[i] += FD_STEP;
        g.set_value(leaf, plus)?;
        let fp = g.forward(root)?.item();
        let mut minus = base.clone();
        minus.data_mut()[i] -= FD_STEP;
        g.set_value(leaf, minus)?;
        let fm = g.forward(root)?.item();
        out.push((fp - fm) / (2.0 * FD_STEP));
    }
    g.set_value(leaf, base)?;
    g.forward(root)?;
    Ok(out)
}

/// Worst relative error over `leaves` between reverse mode and central
/// differences.
fn compare_leaves(g: &mut Graph<f64>, root: NodeId, leaves: &[NodeId]) -> Result<f64> {
    let grads = g.grad(root, leaves)?;
    let mut worst = 0.0f64;
    for (&leaf, gid) in leaves.iter().zip(grads) {
        let analytic = g.value(gid).data().to_vec();
        let numeric = numeric_grad(g, root, leaf)?;
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    Ok(worst)
}

pub const PRIMITIVE_CASES: [&str; 28] = [
    "add",
    "add_rows",
    "sub_scalar",
    "mul",
    "mul_rows",
    "div",
    "div_rows",
    "div_scalar",
    "affine",
    "matmul",
    "transpose",
    "tanh",
    "relu",
    "exp",
    "log",
    "sqrt",
    "sum_rows",
    "sum_cols",
    "expand",
    "repeat_rows",
    "repeat_cols",
    "log_softmax_rows",
    "gather_rows",
    "scatter_rows",
    "l2_normalize_rows",
    "softmax_rows",
    "squared_difference",
    "reshape",
];

/// loss = sum(op(inputs) * w) for a fixed random `w`, checked on every input.
fn primitive_trial(case: &str, rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let mut g = Graph::new().with_sign_fault(fault);
    let a = g.leaf(random(rng, &[3, 4], -1.5, 1.5));
    let b = g.leaf(random(rng, &[3, 4], -1.5, 1.5));
    let pos = g.leaf(random(rng, &[3, 4], 0.5, 2.0));
    let row = g.leaf(random(rng, &[4], 0.5, 1.5));
    let sq = g.leaf(random(rng, &[4, 2], -1.0, 1.0));
    let scal = g.leaf(random(rng, &[1], 0.5, 1.5));
    let out = match case {
        "add" => g.add(a, b)?,
        "add_rows" => g.add(a, row)?,
        "sub_scalar" => g.sub(a, scal)?,
        "mul" => g.mul(a, b)?,
        "mul_rows" => g.mul(a, row)?,
        "div" => g.div(a, pos)?,
        "div_rows" => g.div(a, row)?,
        "div_scalar" => g.div(a, scal)?,
        "affine" => g.affine(a, -1.7, 0.3)?,
        "matmul" => g.matmul(a, sq)?,
        "transpose" => g.transpose(a)?,
        "tanh" => g.tanh(a)?,
        "relu" => {
            // inputs in [-0.75, 0.75] minus a gap around the kink
            let shifted = g.affine(pos, 1.0, -1.25)?;
            g.relu(shifted)?
        }
        "exp" => g.exp(a)?,
        "log" => g.log(pos)?,
        "sqrt" => g.sqrt(pos)?,
        "sum_rows" => {
            let s = g.sum_rows(a)?;
            g.mul(s, row)?
        }
        "sum_cols" => g.sum_cols(a)?,
        "expand" => {
            let s = g.sum_all(a)?;
            g.expand(s, &[2, 3])?
        }
        "repeat_rows" => g.repeat_rows(row, 5)?,
        "repeat_cols" => {
            let c = g.sum_cols(a)?;
            g.repeat_cols(c, 3)?
        }
        "log_softmax_rows" => g.log_softmax_rows(a)?,
        "gather_rows" => g.gather_rows(a, &[2, 0, 2, 1, 2])?,
        "scatter_rows" => g.scatter_rows(a, &[1, 1, 0], 4)?,
        "l2_normalize_rows" => g.l2_normalize_rows(a)?,
        "softmax_rows" => g.softmax_rows(a, 0.3)?,
        "squared_difference" => g.squared_difference(a, b)?,
        "reshape" => g.reshape(a, &[2, 6])?,
        other => return Err(Error::GradCheck(format!("unknown primitive case {other:?}"))),
    };
    let shape = g.shape(out).to_vec();
    let w = g.constant(random(rng, &shape, -1.0, 1.0));
    let y = g.mul(out, w)?;
    let y = g.sum_all(y)?;
    compare_leaves(&mut g, y, &[a, b, pos, row, sq, scal])
}

fn check_primitives(scale: Scale, fault: Option<OpKind>, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    PRIMITIVE_CASES
        .iter()
        .map(|case| {
            let mut worst = 0.0f64;
            for _ in 0..scale.trials() {
                worst = worst.max(primitive_trial(case, rng, fault)?);
            }
            Ok(CheckResult {
                name: format!("primitive/{case}"),
                value: worst,
                bound: Bound::Below(PRIMITIVE_TOL),
            })
        })
        .collect()
}

fn check_losses(scale: Scale, fault: Option<OpKind>, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, direction) in [
        ("loss/contrastive-i2t", Direction::ImageToText),
        ("loss/contrastive-symmetric", Direction::Symmetric),
    ] {
        let mut worst = 0.0f64;
        for _ in 0..scale.trials() {
            let mut g = Graph::new().with_sign_fault(fault);
            let x = g.leaf(random(rng, &[5, 3], -1.0, 1.0));
            let t = g.leaf(random(rng, &[5, 3], -1.0, 1.0));
            let cfg = ContrastiveConfig {
                temperature: rng.random_range(0.2..1.0),
                direction,
            };
            let loss = contrastive_loss(&mut g, x, t, &cfg)?;
            worst = worst.max(compare_leaves(&mut g, loss, &[x, t])?);
        }
        out.push(CheckResult {
            name: name.into(),
            value: worst,
            bound: Bound::Below(LOSS_TOL),
        });
    }

    let mut worst = 0.0f64;
    for _ in 0..scale.trials() {
        let mut g = Graph::new().with_sign_fault(fault);
        let concepts = [vec![0, 1, 2, 0], vec![2, 0, 1], vec![1, 1, 0, 2]];
        let leaves: Vec<NodeId> = concepts
            .iter()
            .map(|c| g.leaf(random(rng, &[c.len(), 3], -1.0, 1.0)))
            .collect();
        let groups: Vec<AlignGroup<'_>> = leaves
            .iter()
            .zip(&concepts)
            .enumerate()
            .map(|(d, (&z, c))| AlignGroup {
                domain: d,
                embeddings: z,
                concepts: c,
            })
            .collect();
        let term = alignment_loss(&mut g, &groups)?;
        worst = worst.max(compare_leaves(&mut g, term.loss, &leaves)?);
    }
    out.push(CheckResult {
        name: "loss/alignment".into(),
        value: worst,
        bound: Bound::Below(LOSS_TOL),
    });
    Ok(out)
}

/// A fixture for the model-level checks: every parameter is randomized so
/// no path (notably the zero-initialized FiLM heads) is trivially inactive.
pub struct Fixture {
    pub model: DualEncoder,
    pub theta: ParamSet<f64>,
    pub data: DomainDataset<f64>,
    pub task: Task<f64>,
}

impl Fixture {
    pub fn new(scale: Scale, seed: u64) -> Result<Self> {
        let model = scale.model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = model.init_params::<f64>(seed).map_values(|e| e.value.map(|_| rng.random_range(-0.8..0.8)));
        let spec = GeneratorSpec {
            num_domains: model.domains.num_domains,
            num_concepts: 3,
            latent_dim: 2,
            image_dim: model.image.input_dim,
            text_dim: model.text.input_dim,
            domain_shift: 1.0,
            noise_std: 0.1,
            samples_per_domain: 8,
            seed,
        };
        let data = generate(&spec)?;
        let task = sample_task(&data, 0, 4, 4, &mut rng)?;
        Ok(Fixture {
            model,
            theta,
            data,
            task,
        })
    }

    pub fn align_batches(&self) -> Vec<crate::data::Batch<f64>> {
        self.data.domains().into_iter().map(|d| self.data.domain_batch(d)).collect()
    }

    pub fn engine(&self, inner_lr: f64, inner_steps: usize, order: Order, lambda: f64) -> Result<MetaEngine<'_>> {
        let meta = MetaConfig {
            inner_lr,
            inner_steps,
            order,
            meta_batch_size: 1,
            ..MetaConfig::default()
        };
        let loss = LossConfig {
            temperature: 0.5,
            lambda,
            ..LossConfig::default()
        };
        MetaEngine::new(&self.model, meta, loss)
    }
}

/// Central differences of the scalar meta-objective w.r.t. every entry of
/// `theta`.
pub fn meta_objective_fd(engine: &MetaEngine<'_>, fx: &Fixture) -> Result<Vec<f64>> {
    let tasks = std::slice::from_ref(&fx.task);
    let align = fx.align_batches();
    let eval = |theta: &ParamSet<f64>| engine.meta_gradient(theta, tasks, &align).map(|(_, m)| m.total);
    let mut out = Vec::with_capacity(fx.theta.numel());
    for entry in fx.theta.iter() {
        for i in 0..entry.value.numel() {
            let mut plus = fx.theta.clone();
            plus.get_mut(&entry.name).expect("own entry").data_mut()[i] += FD_STEP;
            let mut minus = fx.theta.clone();
            minus.get_mut(&entry.name).expect("own entry").data_mut()[i] -= FD_STEP;
            out.push((eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP));
        }
    }
    Ok(out)
}

fn check_meta(scale: Scale) -> Result<Vec<CheckResult>> {
    let fx = Fixture::new(scale, 11)?;
    let tasks = std::slice::from_ref(&fx.task);
    let align = fx.align_batches();
    let mut out = Vec::new();

    {
        let engine = fx.engine(0.1, 0, Order::Second, 0.5)?;
        let (g, _) = engine.meta_gradient(&fx.theta, tasks, &align)?;
        out.push(CheckResult {
            name: "loss/full-model".into(),
            value: max_rel_error(&g.flatten(), &meta_objective_fd(&engine, &fx)?),
            bound: Bound::Below(LOSS_TOL),
        });
    }
    for k in 1..=3 {
        let engine = fx.engine(LARGE_ALPHA, k, Order::Second, 0.5)?;
        let (g, _) = engine.meta_gradient(&fx.theta, tasks, &align)?;
        out.push(CheckResult {
            name: format!("meta/second-order-k{k}"),
            value: max_rel_error(&g.flatten(), &meta_objective_fd(&engine, &fx)?),
            bound: Bound::Below(META_TOL),
        });
    }
    let orders = |alpha: f64| -> Result<f64> {
        let first = fx.engine(alpha, 1, Order::First, 0.0)?;
        let second = fx.engine(alpha, 1, Order::Second, 0.0)?;
        let (g1, _) = first.meta_gradient(&fx.theta, tasks, &[])?;
        let (g2, _) = second.meta_gradient(&fx.theta, tasks, &[])?;
        Ok(norm_rel_diff(&g1.flatten(), &g2.flatten()))
    };
    out.push(CheckResult {
        name: "meta/first-vs-second@1e-6".into(),
        value: orders(SMALL_ALPHA)?,
        bound: Bound::Below(ORDER_AGREE_TOL),
    });
    out.push(CheckResult {
        name: "meta/first-vs-second@0.1".into(),
        value: orders(LARGE_ALPHA)?,
        bound: Bound::Above(ORDER_DIVERGE_MIN),
    });
    Ok(out)
}

/// Runs every check. `fault` flips the sign of one primitive's
/// vector-Jacobian product in the primitive and loss checks, which must then
/// fail.
pub fn run(scale: Scale, fault: Option<OpKind>) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checks = check_primitives(scale, fault, &mut rng)?;
    checks.extend(check_losses(scale, fault, &mut rng)?);
    checks.extend(check_meta(scale)?);
    Ok(GradcheckReport { scale, fault, checks })
}
