//! The outer training loop for both the meta-learner and the pooled
//! baseline.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParamSet;
use crate::config::{Mode, TrainConfig};
use crate::data::{holdout_split, sample_task, Batch, DomainDataset, Task};
use crate::error::{Error, Result};
use crate::meta::{MetaEngine, StepMetrics};
use crate::optim::Optimizer;
use crate::scalar::Scalar;

pub const METRICS_HEADER: &str = "iteration\tquery_losses\talign_loss\talign_pairs\ttotal_loss\tgrad_norm";

/// One line of the metrics table. `iteration` counts from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub metrics: StepMetrics,
}

impl MetricsRow {
    /// Tab-separated, per-task query losses joined with `;`. Floats use the
    /// shortest representation that round-trips.
    pub fn to_tsv(&self) -> String {
        let m = &self.metrics;
        let q: Vec<String> = m.query_losses.iter().map(|v| v.to_string()).collect();
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.iteration,
            q.join(";"),
            m.align_loss,
            m.align_pairs,
            m.total,
            m.grad_norm
        )
    }

    pub fn from_tsv(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad metrics row {line:?}"));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(MetricsRow {
            iteration: f[0].parse().map_err(|_| bad())?,
            metrics: StepMetrics {
                query_losses: f[1].split(';').map(num).collect::<Result<_>>()?,
                align_loss: num(f[2])?,
                align_pairs: f[3].parse().map_err(|_| bad())?,
                total: num(f[4])?,
                grad_norm: num(f[5])?,
            },
        })
    }
}

/// Parameters and optimizer state after `iteration` completed iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<F> {
    pub iteration: usize,
    pub params: ParamSet<F>,
    pub optimizer: Optimizer<F>,
}

impl<F: Scalar> TrainState<F> {
    pub fn fresh(config: &TrainConfig) -> Result<Self> {
        Ok(TrainState {
            iteration: 0,
            params: config.model()?.init_params(config.seed),
            optimizer: Optimizer::new(config.meta.outer),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainingRun<F> {
    pub state: TrainState<F>,
    pub history: Vec<MetricsRow>,
    /// Inner-loop runs started during this call. Always 0 in baseline mode.
    pub inner_adapt_calls: usize,
}

/// The sampled inputs of one iteration.
pub enum IterationBatch<F> {
    Meta { tasks: Vec<Task<F>>, align: Vec<Batch<F>> },
    Baseline { batch: Batch<F>, align: Vec<Batch<F>> },
}

/// The randomness of iteration `i` depends only on `(seed, i)`, so a resumed
/// run draws exactly what an unbroken one would have.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Draws the domains of one meta-batch uniformly, without replacement when
/// there are enough domains.
pub fn sample_domains(domains: &[usize], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    if count <= domains.len() {
        index::sample(rng, domains.len(), count)
            .into_iter()
            .map(|i| domains[i])
            .collect()
    } else {
        (0..count).map(|_| domains[rng.random_range(0..domains.len())]).collect()
    }
}

pub fn sample_iteration<F: Scalar>(
    config: &TrainConfig,
    train: &DomainDataset<F>,
    iteration: usize,
) -> Result<IterationBatch<F>> {
    let m = &config.meta;
    let domains = train.domains();
    let mut rng = iteration_rng(config.seed, iteration);
    let draw_align = |rng: &mut ChaCha8Rng| -> Result<Vec<Batch<F>>> {
        if m.align_per_domain == 0 {
            return Ok(Vec::new());
        }
        domains
            .iter()
            .map(|&d| train.sample_domain(d, m.align_per_domain, rng))
            .collect()
    };
    match config.mode {
        Mode::Meta => {
            let tasks = sample_domains(&domains, m.meta_batch_size, &mut rng)
                .into_iter()
                .map(|d| sample_task(train, d, m.support_size, m.query_size, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let align = draw_align(&mut rng)?;
            Ok(IterationBatch::Meta { tasks, align })
        }
        Mode::Baseline => {
            let size = (m.meta_batch_size * (m.support_size + m.query_size)).min(train.len());
            let batch = train.sample_pooled(size, &mut rng)?;
            let align = draw_align(&mut rng)?;
            Ok(IterationBatch::Baseline { batch, align })
        }
    }
}

/// Checks that `data` is the dataset `config` describes and returns the
/// training split.
pub fn training_split<F: Scalar>(config: &TrainConfig, data: &DomainDataset<F>) -> Result<DomainDataset<F>> {
    config.validate()?;
    let g = &config.generator;
    let domains = data.domains();
    if domains.len() < 2 {
        return Err(Error::invalid(format!("dataset has {} domain(s), need at least 2", domains.len())));
    }
    if domains.len() != g.num_domains || domains.iter().any(|&d| d >= g.num_domains) {
        return Err(Error::invalid(format!(
            "dataset domains {domains:?} do not match generator.num_domains = {}",
            g.num_domains
        )));
    }
    if data.x.dims2().1 != g.image_dim || data.t.dims2().1 != g.text_dim {
        return Err(Error::invalid("dataset feature dimensions do not match the config"));
    }
    let (train, _) = holdout_split(data, &config.eval.holdout_domains)?;
    let m = &config.meta;
    for d in train.domains() {
        let n = train.indices_of(d).len();
        if n < m.support_size + m.query_size || n < m.align_per_domain {
            return Err(Error::invalid(format!("domain {d} has only {n} samples")));
        }
    }
    Ok(train)
}

/// Runs iterations `state.iteration + 1 ..= meta.iterations`. `on_step` sees
/// every row together with the state right after that update; an error from
/// it stops training.
pub fn train_meta<F: Scalar>(
    config: &TrainConfig,
    data: &DomainDataset<F>,
    mut state: TrainState<F>,
    mut on_step: impl FnMut(&MetricsRow, &TrainState<F>) -> Result<()>,
) -> Result<TrainingRun<F>> {
    let train = training_split(config, data)?;
    let model = config.model()?;
    let expected = model.init_params::<F>(0);
    state.params.check_congruent(&expected)?;
    if state.iteration > config.meta.iterations {
        return Err(Error::invalid(format!(
            "start iteration {} is past meta.iterations = {}",
            state.iteration, config.meta.iterations
        )));
    }
    let engine = MetaEngine::new(&model, config.meta.clone(), config.loss)?;
    let mut history = Vec::with_capacity(config.meta.iterations - state.iteration);
    while state.iteration < config.meta.iterations {
        let iteration = state.iteration + 1;
        let metrics = match sample_iteration(config, &train, iteration)? {
            IterationBatch::Meta { tasks, align } => {
                engine.meta_step(&mut state.params, &mut state.optimizer, &tasks, &align)
            }
            IterationBatch::Baseline { batch, align } => {
                engine.baseline_step(&mut state.params, &mut state.optimizer, &batch, &align)
            }
        }
        .map_err(|e| match e {
            Error::NonFinite { what, step } => Error::NonFinite {
                what: format!("{what} in iteration {iteration}"),
                step,
            },
            e => e,
        })?;
        if !state.params.all_finite() {
            return Err(Error::NonFinite {
                what: format!("parameters after iteration {iteration}"),
                step: None,
            });
        }
        state.iteration = iteration;
        let row = MetricsRow { iteration, metrics };
        log::debug!("{}", row.to_tsv());
        on_step(&row, &state)?;
        history.push(row);
    }
    Ok(TrainingRun {
        state,
        history,
        inner_adapt_calls: engine.inner_adapt_calls(),
    })
}
