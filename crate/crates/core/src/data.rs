//! Synthetic multi-domain paired data and the task sampler.
//!
//! Linear-Gaussian generator: every concept `c` has a latent mean `mu_c`.
//! Every domain `d` has its own image and text maps, each a shared base
//! projection plus a domain perturbation with entries `N(0, shift^2)`, and
//! its own offsets. A sample of concept `c` in domain `d` is
//!
//! ```text
//! u = mu_c + noise
//! x = (A_img + D_img[d]) u / sqrt(latent_dim) + b_img[d] + noise
//! t = (A_txt + D_txt[d]) u / sqrt(latent_dim) + b_txt[d] + noise
//! ```
//!
//! with all noise `N(0, noise_std^2)`. The domain shift is a single scalar.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub num_domains: usize,
    pub num_concepts: usize,
    pub latent_dim: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub domain_shift: f64,
    pub noise_std: f64,
    pub samples_per_domain: usize,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            num_domains: 5,
            num_concepts: 8,
            latent_dim: 8,
            image_dim: 16,
            text_dim: 12,
            domain_shift: 1.0,
            noise_std: 0.1,
            samples_per_domain: 256,
            seed: 7,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_concepts", self.num_concepts),
            ("latent_dim", self.latent_dim),
            ("image_dim", self.image_dim),
            ("text_dim", self.text_dim),
            ("samples_per_domain", self.samples_per_domain),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("generator.{name} must be positive")));
        }
        if self.num_domains < 2 {
            return Err(Error::Config("generator.num_domains must be at least 2".into()));
        }
        for (name, v) in [("domain_shift", self.domain_shift), ("noise_std", self.noise_std)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("generator.{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Paired rows from one or more domains. Row `i` of `x` and `t` is a
/// positive pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<F> {
    pub x: Tensor<F>,
    pub t: Tensor<F>,
    pub domain_ids: Vec<usize>,
    pub concept_ids: Vec<usize>,
}

impl<F: Scalar> Batch<F> {
    pub fn len(&self) -> usize {
        self.domain_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domain_ids.is_empty()
    }
}

/// Support/query split drawn from a single domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Task<F> {
    pub domain: usize,
    pub support: Batch<F>,
    pub query: Batch<F>,
    /// Dataset row indices, support first.
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset<F> {
    pub spec: GeneratorSpec,
    /// `[n, image_dim]`
    pub x: Tensor<F>,
    /// `[n, text_dim]`
    pub t: Tensor<F>,
    /// Generating latents `u`, `[n, latent_dim]`.
    pub latents: Tensor<F>,
    pub domain_ids: Vec<usize>,
    pub concept_ids: Vec<usize>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `out = m u / sqrt(latent) + b + noise`, `m` row-major `[out_dim, latent]`.
fn project(m: &[f64], u: &[f64], b: &[f64], noise: &[f64]) -> Vec<f64> {
    let l = u.len();
    let s = 1.0 / (l as f64).sqrt();
    b.iter()
        .enumerate()
        .map(|(r, &br)| {
            let dot: f64 = m[r * l..(r + 1) * l].iter().zip(u).map(|(a, x)| a * x).sum();
            dot * s + br + noise[r]
        })
        .collect()
}

/// Draws the full dataset. Samples are grouped by domain and concepts are
/// assigned round-robin, so every domain holds a balanced set of concepts.
pub fn generate<F: Scalar>(spec: &GeneratorSpec) -> Result<DomainDataset<F>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (l, di, dt) = (spec.latent_dim, spec.image_dim, spec.text_dim);
    let means = gaussian(&mut rng, spec.num_concepts * l, 1.0);
    let base_img = gaussian(&mut rng, di * l, 1.0);
    let base_txt = gaussian(&mut rng, dt * l, 1.0);

    let n = spec.num_domains * spec.samples_per_domain;
    let (mut xs, mut ts, mut us) = (
        Vec::with_capacity(n * di),
        Vec::with_capacity(n * dt),
        Vec::with_capacity(n * l),
    );
    let (mut domain_ids, mut concept_ids) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for d in 0..spec.num_domains {
        let shift = |rng: &mut ChaCha8Rng, base: &[f64]| -> Vec<f64> {
            gaussian(rng, base.len(), spec.domain_shift)
                .iter()
                .zip(base)
                .map(|(p, b)| b + p)
                .collect()
        };
        let a_img = shift(&mut rng, &base_img);
        let a_txt = shift(&mut rng, &base_txt);
        let b_img = gaussian(&mut rng, di, spec.domain_shift);
        let b_txt = gaussian(&mut rng, dt, spec.domain_shift);
        for i in 0..spec.samples_per_domain {
            let c = i % spec.num_concepts;
            let u: Vec<f64> = means[c * l..(c + 1) * l]
                .iter()
                .zip(gaussian(&mut rng, l, spec.noise_std))
                .map(|(m, e)| m + e)
                .collect();
            let nx = gaussian(&mut rng, di, spec.noise_std);
            let nt = gaussian(&mut rng, dt, spec.noise_std);
            xs.extend(project(&a_img, &u, &b_img, &nx));
            ts.extend(project(&a_txt, &u, &b_txt, &nt));
            us.extend_from_slice(&u);
            domain_ids.push(d);
            concept_ids.push(c);
        }
    }
    let conv = |v: Vec<f64>| v.into_iter().map(F::of).collect::<Vec<F>>();
    Ok(DomainDataset {
        spec: spec.clone(),
        x: Tensor::new(vec![n, di], conv(xs))?,
        t: Tensor::new(vec![n, dt], conv(ts))?,
        latents: Tensor::new(vec![n, l], conv(us))?,
        domain_ids,
        concept_ids,
    })
}

impl<F: Scalar> DomainDataset<F> {
    pub fn len(&self) -> usize {
        self.domain_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domain_ids.is_empty()
    }

    /// Distinct domain ids present, ascending.
    pub fn domains(&self) -> Vec<usize> {
        let mut d = self.domain_ids.clone();
        d.sort_unstable();
        d.dedup();
        d
    }

    pub fn indices_of(&self, domain: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.domain_ids[i] == domain).collect()
    }

    pub fn batch(&self, rows: &[usize]) -> Batch<F> {
        Batch {
            x: self.x.select_rows(rows),
            t: self.t.select_rows(rows),
            domain_ids: rows.iter().map(|&i| self.domain_ids[i]).collect(),
            concept_ids: rows.iter().map(|&i| self.concept_ids[i]).collect(),
        }
    }

    pub fn domain_batch(&self, domain: usize) -> Batch<F> {
        self.batch(&self.indices_of(domain))
    }

    /// Rows whose domain satisfies `keep`, in original order.
    pub fn filter_domains(&self, keep: impl Fn(usize) -> bool) -> DomainDataset<F> {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep(self.domain_ids[i])).collect();
        DomainDataset {
            spec: self.spec.clone(),
            x: self.x.select_rows(&rows),
            t: self.t.select_rows(&rows),
            latents: self.latents.select_rows(&rows),
            domain_ids: rows.iter().map(|&i| self.domain_ids[i]).collect(),
            concept_ids: rows.iter().map(|&i| self.concept_ids[i]).collect(),
        }
    }

    /// Uniform draw without replacement over all rows, regardless of domain.
    pub fn sample_pooled(&self, size: usize, rng: &mut impl Rng) -> Result<Batch<F>> {
        if size == 0 || size > self.len() {
            return Err(Error::invalid(format!(
                "cannot draw {size} rows from a dataset of {}",
                self.len()
            )));
        }
        let rows = index::sample(rng, self.len(), size).into_vec();
        Ok(self.batch(&rows))
    }

    /// Draws `size` rows of one domain without replacement.
    pub fn sample_domain(&self, domain: usize, size: usize, rng: &mut impl Rng) -> Result<Batch<F>> {
        let pool = self.indices_of(domain);
        if size == 0 || size > pool.len() {
            return Err(Error::invalid(format!(
                "domain {domain} has {} rows, cannot draw {size}",
                pool.len()
            )));
        }
        let rows: Vec<usize> = index::sample(rng, pool.len(), size)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        Ok(self.batch(&rows))
    }
}

/// Draws disjoint support and query sets from one domain.
pub fn sample_task<F: Scalar>(
    dataset: &DomainDataset<F>,
    domain: usize,
    support_size: usize,
    query_size: usize,
    rng: &mut impl Rng,
) -> Result<Task<F>> {
    if support_size == 0 || query_size == 0 {
        return Err(Error::invalid("support and query sizes must be positive"));
    }
    let pool = dataset.indices_of(domain);
    let need = support_size + query_size;
    if pool.len() < need {
        return Err(Error::invalid(format!(
            "domain {domain} has {} samples, task needs {need}",
            pool.len()
        )));
    }
    let indices: Vec<usize> = index::sample(rng, pool.len(), need)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    Ok(Task {
        domain,
        support: dataset.batch(&indices[..support_size]),
        query: dataset.batch(&indices[support_size..]),
        indices,
    })
}

/// Splits off the held-out domains. Domain ids are preserved.
pub fn holdout_split<F: Scalar>(
    dataset: &DomainDataset<F>,
    held_out: &[usize],
) -> Result<(DomainDataset<F>, DomainDataset<F>)> {
    let present = dataset.domains();
    if let Some(d) = held_out.iter().find(|d| !present.contains(d)) {
        return Err(Error::invalid(format!("held-out domain {d} is not in the dataset")));
    }
    if present.iter().all(|d| held_out.contains(d)) {
        return Err(Error::invalid("holding out every domain leaves no training data"));
    }
    Ok((
        dataset.filter_domains(|d| !held_out.contains(&d)),
        dataset.filter_domains(|d| held_out.contains(&d)),
    ))
}
