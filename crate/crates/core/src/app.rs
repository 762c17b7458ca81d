//! The four command-line operations. Each one validates every input before
//! it creates or modifies anything on disk.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autodiff::OpKind;
use crate::config::{Mode, TrainConfig};
use crate::data::{generate, DomainDataset};
use crate::error::{Error, Result};
use crate::eval::{domain_gap, heldout_adaptation, DomainCurve, HeldoutProtocol, RECALL_KS};
use crate::gradcheck::{self, GradcheckReport, Scale};
use crate::meta::MetaEngine;
use crate::persist::{load_dataset, save_dataset, Checkpoint};
use crate::train::{train_meta, training_split, MetricsRow, TrainState, METRICS_HEADER};

pub const OUTPUT_ROOT_ENV: &str = "METACON_OUTPUT_ROOT";

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const TIMING_FILE: &str = "timing.tsv";
pub const TRACE_FILE: &str = "trace.tsv";
pub const HELDOUT_FILE: &str = "heldout.tsv";
pub const LOCK_FILE: &str = "run.lock";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Root that relative output paths in a config are resolved against.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn resolve(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

pub fn checkpoint_path(run_dir: &Path, iteration: usize) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("iter-{iteration:06}.ckpt"))
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let config = TrainConfig::load(path)?;
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub path: PathBuf,
    pub counts: Vec<(usize, usize)>,
}

pub fn cmd_generate(config_path: &Path, root: &Path) -> Result<GenerateSummary> {
    let config = load_config(config_path)?;
    let data: DomainDataset<f64> = generate(&config.generator)?;
    let path = resolve(root, &config.io.dataset);
    save_dataset(&data, &path)?;
    let counts = data
        .domains()
        .into_iter()
        .map(|d| (d, data.indices_of(d).len()))
        .collect();
    Ok(GenerateSummary { path, counts })
}

/// Held for the lifetime of a training run; removed on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Invalid(format!(
                "{} exists: another process owns this run directory",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub config: PathBuf,
    pub mode: Option<Mode>,
    pub resume: Option<PathBuf>,
    /// Resume even when the checkpoint's config hash differs.
    pub force: bool,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub start_iteration: usize,
    pub last: Option<MetricsRow>,
    pub inner_adapt_calls: usize,
}

/// Keeps the header and the rows up to `iteration`, so a resumed run appends
/// where the checkpoint left off.
fn truncate_table(path: &Path, header: &str, iteration: usize) -> Result<()> {
    let mut kept = vec![header.to_string()];
    if path.exists() {
        let lines = BufReader::new(File::open(path)?).lines().skip(1);
        for line in lines {
            let line = line?;
            let it: usize = line
                .split('\t')
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::Format(format!("{}: bad row {line:?}", path.display())))?;
            if it <= iteration {
                kept.push(line);
            }
        }
    }
    let mut f = File::create(path)?;
    for line in kept {
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn open_append(path: &Path) -> Result<File> {
    Ok(OpenOptions::new().append(true).open(path)?)
}

fn load_or_generate(config: &TrainConfig, root: &Path) -> Result<(DomainDataset<f64>, bool)> {
    let path = resolve(root, &config.io.dataset);
    if path.exists() {
        let data: DomainDataset<f64> = load_dataset(&path)?;
        if data.spec != config.generator {
            return Err(Error::Config(format!(
                "{} was generated from a different [generator] section",
                path.display()
            )));
        }
        Ok((data, false))
    } else {
        Ok((generate(&config.generator)?, true))
    }
}

fn protocol(config: &TrainConfig) -> HeldoutProtocol {
    HeldoutProtocol {
        ks: config.eval.ks.clone(),
        num_tasks: config.eval.num_tasks,
        support_size: config.eval.support_size,
        query_size: config.eval.query_size,
        direction: config.eval.direction,
        seed: config.seed,
    }
}

pub fn cmd_train(opts: &TrainOptions, root: &Path) -> Result<TrainSummary> {
    let mut config = TrainConfig::load(&opts.config)?;
    if let Some(mode) = opts.mode {
        config.mode = mode;
    }
    config.validate()?;
    let (data, generated) = load_or_generate(&config, root)?;
    training_split(&config, &data)?;
    let state = match &opts.resume {
        Some(path) => {
            let ckpt: Checkpoint<f64> = Checkpoint::load(path)?;
            ckpt.check_config(&config, opts.force)?;
            ckpt.params.check_congruent(&TrainState::<f64>::fresh(&config)?.params)?;
            if ckpt.iteration > config.meta.iterations {
                return Err(Error::Config(format!(
                    "checkpoint is at iteration {} but meta.iterations = {}",
                    ckpt.iteration, config.meta.iterations
                )));
            }
            TrainState {
                iteration: ckpt.iteration,
                params: ckpt.params,
                optimizer: ckpt.optimizer,
            }
        }
        None => TrainState::fresh(&config)?,
    };
    let start_iteration = state.iteration;

    let run_dir = resolve(root, &config.io.out_dir);
    fs::create_dir_all(&run_dir)?;
    let _lock = RunLock::acquire(&run_dir)?;
    if generated {
        save_dataset(&data, &resolve(root, &config.io.dataset))?;
    }
    fs::write(run_dir.join(CONFIG_FILE), config.to_toml())?;
    let metrics_path = run_dir.join(METRICS_FILE);
    let timing_path = run_dir.join(TIMING_FILE);
    let heldout_path = run_dir.join(HELDOUT_FILE);
    truncate_table(&metrics_path, METRICS_HEADER, start_iteration)?;
    truncate_table(&timing_path, "iteration\tseconds", start_iteration)?;
    let eval_every = config.eval.every;
    if eval_every > 0 {
        truncate_table(&heldout_path, "iteration\tdomain\tk\trecall@1\trecall@5", start_iteration)?;
    }
    let mut metrics = open_append(&metrics_path)?;
    let mut timing = open_append(&timing_path)?;

    let model = config.model()?;
    let eval_engine = MetaEngine::new(&model, config.meta.clone(), config.loss)?;
    let train_domains = config.train_domains();
    let holdout = config.eval.holdout_domains.clone();
    let mut clock = Instant::now();
    let run = train_meta(&config, &data, state, |row, state| {
        writeln!(metrics, "{}", row.to_tsv())?;
        writeln!(timing, "{}\t{:.6}", row.iteration, clock.elapsed().as_secs_f64())?;
        let it = row.iteration;
        if config.io.checkpoint_every > 0 && it % config.io.checkpoint_every == 0 {
            Checkpoint::new(&config, it, state.params.clone(), state.optimizer.clone())
                .save(&checkpoint_path(&run_dir, it))?;
        }
        if eval_every > 0 && it % eval_every == 0 && !holdout.is_empty() {
            let curves = heldout_adaptation(
                &eval_engine,
                &state.params,
                &data,
                &holdout,
                &train_domains,
                &protocol(&config),
            )?;
            let mut f = open_append(&heldout_path)?;
            for c in &curves {
                for (k, r) in &c.curve.points {
                    writeln!(f, "{it}\t{}\t{k}\t{}\t{}", c.domain, r.recall(1), r.recall(5))?;
                }
                log::info!(
                    "iteration {it}: domain {} recall@1 {:?}",
                    c.domain,
                    c.curve.points.iter().map(|(k, r)| (*k, r.recall(1))).collect::<Vec<_>>()
                );
            }
        }
        clock = Instant::now();
        Ok(())
    })?;
    metrics.flush()?;
    timing.flush()?;

    Checkpoint::new(&config, run.state.iteration, run.state.params, run.state.optimizer)
        .save(&run_dir.join(FINAL_CHECKPOINT))?;
    fs::write(
        run_dir.join(TRACE_FILE),
        format!("mode\t{:?}\ninner_adapt_calls\t{}\n", config.mode, run.inner_adapt_calls).to_lowercase(),
    )?;
    Ok(TrainSummary {
        run_dir,
        start_iteration,
        last: run.history.last().cloned(),
        inner_adapt_calls: run.inner_adapt_calls,
    })
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub holdout_domains: Option<Vec<usize>>,
    pub ks: Option<Vec<usize>>,
    /// A second checkpoint evaluated the same way for a side-by-side table.
    pub compare: Option<PathBuf>,
    /// Defaults to `eval/` next to the checkpoint.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunEvaluation {
    pub label: String,
    pub checkpoint: PathBuf,
    pub iteration: usize,
    pub curves: Vec<DomainCurve>,
    pub domain_gap: f64,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub out_dir: PathBuf,
    pub runs: Vec<RunEvaluation>,
}

struct PreparedRun {
    label: String,
    path: PathBuf,
    ckpt: Checkpoint<f64>,
    config: TrainConfig,
}

fn prepare_run(label: &str, path: &Path, data: &DomainDataset<f64>) -> Result<PreparedRun> {
    let ckpt: Checkpoint<f64> = Checkpoint::load(path)?;
    let config = ckpt.config()?;
    let model = config.model()?;
    ckpt.params.check_congruent(&model.init_params::<f64>(0))?;
    let g = &config.generator;
    if data.x.dims2().1 != g.image_dim || data.t.dims2().1 != g.text_dim || data.spec.num_domains != g.num_domains {
        return Err(Error::Config(format!(
            "dataset does not match the model stored in {}",
            path.display()
        )));
    }
    Ok(PreparedRun {
        label: label.to_string(),
        path: path.to_path_buf(),
        ckpt,
        config,
    })
}

fn evaluate_run(run: &PreparedRun, data: &DomainDataset<f64>, holdout: &[usize], ks: &[usize]) -> Result<RunEvaluation> {
    let model = run.config.model()?;
    let engine = MetaEngine::new(&model, run.config.meta.clone(), run.config.loss)?;
    let mut protocol = protocol(&run.config);
    protocol.ks = ks.to_vec();
    let curves = heldout_adaptation(
        &engine,
        &run.ckpt.params,
        data,
        holdout,
        &run.config.train_domains(),
        &protocol,
    )?;
    Ok(RunEvaluation {
        label: run.label.clone(),
        checkpoint: run.path.clone(),
        iteration: run.ckpt.iteration,
        curves,
        domain_gap: domain_gap(&model, &run.ckpt.params, data)?,
    })
}

fn write_report(path: &Path, runs: &[RunEvaluation]) -> Result<()> {
    let mut f = File::create(path)?;
    let recall_cols: Vec<String> = RECALL_KS.iter().map(|k| format!("recall@{k}")).collect();
    writeln!(f, "run\tdomain\tk\t{}\tmedian_rank\tn_queries", recall_cols.join("\t"))?;
    for run in runs {
        for c in &run.curves {
            for (k, r) in &c.curve.points {
                let recalls: Vec<String> = RECALL_KS.iter().map(|&n| r.recall(n).to_string()).collect();
                writeln!(
                    f,
                    "{}\t{}\t{k}\t{}\t{}\t{}",
                    run.label,
                    c.domain,
                    recalls.join("\t"),
                    r.median_rank,
                    r.n_queries
                )?;
            }
        }
    }
    Ok(())
}

fn write_summary(path: &Path, runs: &[RunEvaluation]) -> Result<()> {
    let mut f = File::create(path)?;
    for run in runs {
        writeln!(
            f,
            "{} ({}, iteration {})",
            run.label,
            run.checkpoint.display(),
            run.iteration
        )?;
        writeln!(f, "  domain gap over all domains: {:.6}", run.domain_gap)?;
        for c in &run.curves {
            writeln!(f, "  held-out domain {}:", c.domain)?;
            for (k, r) in &c.curve.points {
                writeln!(
                    f,
                    "    K={k:<3} recall@1 {:.4}  recall@5 {:.4}  median rank {:.2}",
                    r.recall(1),
                    r.recall(5),
                    r.median_rank
                )?;
            }
        }
    }
    Ok(())
}

fn write_comparison(path: &Path, a: &RunEvaluation, b: &RunEvaluation) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "metric\tdomain\tk\t{}\t{}", a.label, b.label)?;
    for (ca, cb) in a.curves.iter().zip(&b.curves) {
        for ((k, ra), (_, rb)) in ca.curve.points.iter().zip(&cb.curve.points) {
            writeln!(f, "recall@1\t{}\t{k}\t{}\t{}", ca.domain, ra.recall(1), rb.recall(1))?;
        }
    }
    writeln!(f, "domain_gap\tall\t-\t{}\t{}", a.domain_gap, b.domain_gap)?;
    Ok(())
}

pub const REPORT_FILE: &str = "report.tsv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const COMPARISON_FILE: &str = "comparison.tsv";

pub fn cmd_eval(opts: &EvalOptions) -> Result<EvalSummary> {
    let data: DomainDataset<f64> = load_dataset(&opts.dataset)?;
    let primary = prepare_run("primary", &opts.checkpoint, &data)?;
    let compare = opts
        .compare
        .as_deref()
        .map(|p| prepare_run("compare", p, &data))
        .transpose()?;
    let holdout = opts
        .holdout_domains
        .clone()
        .unwrap_or_else(|| primary.config.eval.holdout_domains.clone());
    if holdout.is_empty() {
        return Err(Error::Config("no held-out domains to evaluate".into()));
    }
    let present = data.domains();
    if let Some(d) = holdout.iter().find(|d| !present.contains(d)) {
        return Err(Error::Config(format!("unknown domain id {d}")));
    }
    let ks = opts.ks.clone().unwrap_or_else(|| primary.config.eval.ks.clone());
    if ks.first() != Some(&0) || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("ks must be increasing and start at 0, got {ks:?}")));
    }
    let out_dir = match &opts.out_dir {
        Some(d) => d.clone(),
        None => opts
            .checkpoint
            .parent()
            .map(|p| p.join("eval"))
            .unwrap_or_else(|| PathBuf::from("eval")),
    };

    let mut runs = vec![evaluate_run(&primary, &data, &holdout, &ks)?];
    if let Some(c) = &compare {
        runs.push(evaluate_run(c, &data, &holdout, &ks)?);
    }
    fs::create_dir_all(&out_dir)?;
    write_report(&out_dir.join(REPORT_FILE), &runs)?;
    write_summary(&out_dir.join(SUMMARY_FILE), &runs)?;
    if let [a, b] = runs.as_slice() {
        write_comparison(&out_dir.join(COMPARISON_FILE), a, b)?;
    }
    Ok(EvalSummary { out_dir, runs })
}

/// Ops whose gradient a sign flip can corrupt. Leaves, constants and the
/// step function carry no vector-Jacobian product.
pub fn injectable(op: OpKind) -> bool {
    !matches!(op, OpKind::Leaf | OpKind::Constant | OpKind::Step)
}

/// Runs the oracle suite; an `Err(GradCheck)` lists the failing checks.
pub fn cmd_gradcheck(scale: Scale, fault: Option<OpKind>) -> Result<GradcheckReport> {
    if let Some(op) = fault.filter(|&op| !injectable(op)) {
        return Err(Error::Invalid(format!("{} has no gradient to corrupt", op.name())));
    }
    gradcheck::run(scale, fault)
}
