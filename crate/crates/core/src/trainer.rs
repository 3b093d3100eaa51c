//! Meta-training loop and evaluation.
//!
//! Each outer iteration samples `meta_batch` tasks, adapts the shared
//! initialization on every task's K-shot set, sums the meta-gradients of the
//! post-adaptation query losses over the batch, and applies one ADAM step to
//! the initialization and one to each learnable rule group. Per-task work
//! may run on a thread pool; results are always reduced in task order.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::checkpoint::{BestRecord, Checkpoint, LossWindow, SCHEMA_NAME, SCHEMA_VERSION};
use crate::config::TrainConfig;
use crate::error::{invalid, Error, Result};
use crate::inner::{adapt, meta_gradients, InnerRule, MetaGrads, RuleGrad};
use crate::model::{mse_loss, Mlp};
use crate::rng::{stream, Domain};
use crate::task::{sample_episode, sample_task, Episode};

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    /// Mean post-adaptation query loss over the meta-batches since the
    /// previous row.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ci: f64,
    /// Milliseconds since the run started; zero for deterministic runs.
    pub wall_ms: u64,
    pub method: String,
    pub seed: u64,
    pub negative_rates: usize,
}

/// Mean MSE over tasks with a 95% confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    pub ci95: f64,
    pub n_tasks: usize,
    pub k_shot: usize,
    pub inner_steps: usize,
}

/// Mean and `1.96 · sd / √n` of per-task losses (sample standard deviation).
pub fn mean_ci(losses: &[f64]) -> (f64, f64) {
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    if losses.len() < 2 {
        return (mean, 0.0);
    }
    let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Worker count from `METACURV_THREADS`, defaulting to the available cores.
pub fn thread_cap() -> usize {
    std::env::var("METACURV_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Clone, Default)]
struct Workers(Option<Arc<ThreadPool>>);

impl Workers {
    fn new(threads: usize) -> Self {
        if threads <= 1 {
            return Workers(None);
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().ok();
        Workers(pool.map(Arc::new))
    }

    /// `f(0..n)` collected in index order.
    fn map<T: Send>(&self, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        match &self.0 {
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
            None => (0..n).map(f).collect(),
        }
    }
}

/// Episode `index` of an evaluation stream.
pub fn eval_episode(seed: u64, domain: Domain, index: usize, k_shot: usize, n_points: usize) -> Episode {
    let mut rng = stream(seed, domain, index as u64, 0);
    let task = sample_task(&mut rng);
    sample_episode(task, k_shot, n_points, &mut rng)
}

pub fn train_episode(config: &TrainConfig, iteration: u64, index: usize) -> Episode {
    let mut rng = stream(config.seed, Domain::Train, iteration, index as u64);
    let task = sample_task(&mut rng);
    sample_episode(task, config.k_shot, config.query_points, &mut rng)
}

fn evaluate_with(
    workers: &Workers,
    theta: &Mlp,
    rules: &[InnerRule],
    episodes: impl Fn(usize) -> Episode + Sync + Send,
    n_tasks: usize,
    inner_steps: usize,
) -> Result<(f64, f64)> {
    let losses = workers.map(n_tasks, |i| {
        let ep = episodes(i);
        let adapted = adapt(theta, &ep, rules, inner_steps)?.adapted;
        mse_loss(&adapted, &ep.eval_x, &ep.eval_y)
    });
    let losses = losses.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(mean_ci(&losses))
}

/// Post-adaptation MSE over `n_tasks` fresh test tasks.
pub fn evaluate_params(
    theta: &Mlp,
    rules: &[InnerRule],
    n_tasks: usize,
    k_shot: usize,
    inner_steps: usize,
    n_points: usize,
    seed: u64,
) -> Result<EvalResult> {
    if n_tasks < 2 {
        return invalid("evaluation needs at least 2 tasks");
    }
    if k_shot == 0 || inner_steps == 0 || n_points == 0 {
        return invalid("shots, steps and evaluation points must be positive");
    }
    for rule in rules {
        rule.check_layout(theta)?;
    }
    let workers = Workers::new(thread_cap());
    let (mean, ci95) = evaluate_with(
        &workers,
        theta,
        rules,
        |i| eval_episode(seed, Domain::Test, i, k_shot, n_points),
        n_tasks,
        inner_steps,
    )?;
    Ok(EvalResult {
        mean,
        ci95,
        n_tasks,
        k_shot,
        inner_steps,
    })
}

/// Evaluates a checkpoint's initialization and rule on fresh test tasks.
pub fn evaluate(ckpt: &Checkpoint, n_tasks: usize, k_shot: usize, inner_steps: usize, seed: u64) -> Result<EvalResult> {
    let theta = ckpt.network()?;
    evaluate_params(
        &theta,
        &ckpt.rules,
        n_tasks,
        k_shot,
        inner_steps,
        ckpt.config.eval_points,
        seed,
    )
}

/// Meta-training state.
pub struct Trainer {
    config: TrainConfig,
    theta: Mlp,
    rules: Vec<InnerRule>,
    theta_adam: AdamState,
    rule_adam: Vec<Vec<AdamState>>,
    iteration: u64,
    best: Option<BestRecord>,
    best_checkpoint: Option<Checkpoint>,
    window: LossWindow,
    workers: Workers,
    started: Instant,
}

/// Outcome of [`meta_train`].
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, Domain::Init, 0, 0);
        let theta = Mlp::glorot(&config.sizes, &mut rng)?;
        let rules: Vec<InnerRule> = (0..config.rule_count())
            .map(|_| config.method.initial_rule(&theta, config.inner_lr))
            .collect();
        let rule_adam = rules
            .iter()
            .map(|r| {
                r.learnable_groups()
                    .iter()
                    .map(|(_, g)| AdamState::new(g.len()))
                    .collect()
            })
            .collect();
        Ok(Trainer {
            theta_adam: AdamState::new(theta.num_params()),
            theta,
            rules,
            rule_adam,
            iteration: 0,
            best: None,
            best_checkpoint: None,
            window: LossWindow::default(),
            workers: Workers::new(thread_cap()),
            started: Instant::now(),
            config,
        })
    }

    /// Resumes from `last`; `best` restores the retained best checkpoint.
    pub fn resume(last: Checkpoint, best: Option<Checkpoint>) -> Result<Self> {
        last.validate()?;
        last.config.validate()?;
        if let Some(b) = &best {
            b.validate()?;
        }
        Ok(Trainer {
            theta: last.network()?,
            rules: last.rules,
            theta_adam: last.theta_adam,
            rule_adam: last.rule_adam,
            iteration: last.iteration,
            best: last.best,
            best_checkpoint: best,
            window: last.window,
            workers: Workers::new(thread_cap()),
            started: Instant::now(),
            config: last.config,
        })
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.workers = Workers::new(threads);
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn theta(&self) -> &Mlp {
        &self.theta
    }

    pub fn rules(&self) -> &[InnerRule] {
        &self.rules
    }

    pub fn best_checkpoint(&self) -> Option<&Checkpoint> {
        self.best_checkpoint.as_ref()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema: SCHEMA_NAME.to_string(),
            schema_version: SCHEMA_VERSION,
            iteration: self.iteration,
            seed: self.config.seed,
            sizes: self.config.sizes.clone(),
            theta: self.theta.to_vector(),
            rules: self.rules.clone(),
            theta_adam: self.theta_adam.clone(),
            rule_adam: self.rule_adam.clone(),
            best: self.best,
            window: self.window,
            config: self.config.clone(),
        }
    }

    /// Summed meta-gradients of one meta-batch without applying them.
    pub fn batch_gradients(&self, iteration: u64) -> Result<MetaGrads> {
        let config = &self.config;
        let per_task = self.workers.map(config.meta_batch, |i| {
            let ep = train_episode(config, iteration, i);
            meta_gradients(&self.theta, &ep, &self.rules, config.inner_steps, config.meta_grad_mode)
        });
        let mut total: Option<MetaGrads> = None;
        for grads in per_task {
            let grads = grads?;
            match &mut total {
                None => total = Some(grads),
                Some(acc) => {
                    acc.theta.axpy(1.0, &grads.theta);
                    for (a, g) in acc.rules.iter_mut().zip(&grads.rules) {
                        a.accumulate(g);
                    }
                    acc.val_loss += grads.val_loss;
                    acc.train_loss += grads.train_loss;
                }
            }
        }
        Ok(total.expect("meta_batch is positive"))
    }

    /// One outer iteration. On error the state is left untouched.
    pub fn step(&mut self) -> Result<()> {
        let grads = self.batch_gradients(self.iteration)?;
        let context = |e: Error| match e {
            Error::NumericFailure(msg) => Error::NumericFailure(format!("iteration {}: {msg}", self.iteration + 1)),
            other => other,
        };
        let theta_grad = grads.theta.to_vector().0;
        let rule_grads: Vec<Vec<Vec<f64>>> = grads
            .rules
            .iter()
            .zip(&self.rules)
            .map(|(g, r)| match r {
                // The fixed MAML rate is not learned.
                InnerRule::FixedLr { .. } => vec![],
                _ => g.groups(r),
            })
            .collect();

        let mut theta_vec = self.theta.to_vector().0;
        let mut theta_adam = self.theta_adam.clone();
        theta_adam
            .step(&mut theta_vec, &theta_grad, self.config.outer_lr)
            .map_err(context)?;
        let mut rules = self.rules.clone();
        let mut rule_adam = self.rule_adam.clone();
        for ((rule, states), groups) in rules.iter_mut().zip(rule_adam.iter_mut()).zip(&rule_grads) {
            let mut params: Vec<Vec<f64>> = rule.learnable_groups().into_iter().map(|(_, g)| g).collect();
            for ((p, s), g) in params.iter_mut().zip(states.iter_mut()).zip(groups) {
                s.step(p, g, self.config.outer_lr).map_err(context)?;
            }
            rule.set_learnable_groups(&params)?;
        }
        let mut theta = self.theta.clone();
        theta.assign_vector(&crate::model::ParamVector(theta_vec))?;
        if !grads.val_loss.is_finite() {
            return Err(context(Error::NumericFailure("non-finite query loss".into())));
        }

        self.theta = theta;
        self.theta_adam = theta_adam;
        self.rules = rules;
        self.rule_adam = rule_adam;
        self.window.sum += grads.val_loss;
        self.window.count += self.config.meta_batch as u64;
        self.iteration += 1;
        Ok(())
    }

    /// Mean post-adaptation loss on the fixed held-out validation tasks.
    pub fn validate(&self) -> Result<(f64, f64)> {
        let c = &self.config;
        evaluate_with(
            &self.workers,
            &self.theta,
            &self.rules,
            |i| eval_episode(c.seed, Domain::Validation, i, c.k_shot, c.eval_points),
            c.eval_tasks,
            c.inner_steps,
        )
    }

    fn metrics_row(&mut self) -> Result<MetricsRow> {
        let (val_loss, val_ci) = self.validate()?;
        let train_loss = if self.window.count > 0 {
            self.window.sum / self.window.count as f64
        } else {
            f64::NAN
        };
        self.window = LossWindow::default();
        if self.best.is_none_or(|b| val_loss < b.val_loss) {
            self.best = Some(BestRecord {
                iteration: self.iteration,
                val_loss,
            });
            self.best_checkpoint = Some(self.checkpoint());
        }
        let wall_ms = if self.config.deterministic {
            0
        } else {
            self.started.elapsed().as_millis() as u64
        };
        Ok(MetricsRow {
            iteration: self.iteration,
            train_loss,
            val_loss,
            val_ci,
            wall_ms,
            method: self.config.method.name().to_string(),
            seed: self.config.seed,
            negative_rates: self.rules.iter().map(InnerRule::negative_rates).sum(),
        })
    }

    /// Runs until `until` iterations (capped at the configured total),
    /// emitting a metrics row every `eval_every` iterations and at the final
    /// iteration.
    pub fn run_until(&mut self, until: u64, mut on_row: impl FnMut(&MetricsRow, &Trainer) -> Result<()>) -> Result<()> {
        let until = until.min(self.config.iterations);
        while self.iteration < until {
            self.step()?;
            if self.iteration.is_multiple_of(self.config.eval_every) || self.iteration == self.config.iterations {
                let row = self.metrics_row()?;
                on_row(&row, self)?;
            }
        }
        Ok(())
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.config.iterations
    }
}

/// Full meta-training run returning the best checkpoint and the metrics.
pub fn meta_train(config: TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config)?;
    let mut metrics = Vec::new();
    trainer.run_until(u64::MAX, |row, _| {
        metrics.push(row.clone());
        Ok(())
    })?;
    let last = trainer.checkpoint();
    let best = trainer.best_checkpoint.take().unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { best, last, metrics })
}

/// Gradients of one meta-batch, exposed for equivalence checks.
pub fn first_batch_gradients(config: &TrainConfig) -> Result<(Mlp, Vec<RuleGrad>)> {
    let trainer = Trainer::new(config.clone())?.with_threads(1);
    let g = trainer.batch_gradients(0)?;
    Ok((g.theta, g.rules))
}
