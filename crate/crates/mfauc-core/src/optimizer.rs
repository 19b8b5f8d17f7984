//! Averaged stochastic gradient descent over user/item rows.
//!
//! One iteration performs max(m, n) paired row updates over fresh random
//! permutations with wrap-around, maintains running averages of the factors
//! once the averaging start is passed, re-estimates the objective on the
//! averaged factors with a fixed evaluation stream, and stops when
//! consecutive objective values move less than the threshold.

use std::time::Instant;

use crate::distributions::{build_distributions, ItemDistributions};
use crate::error::{Error, Result};
use crate::losses::{check_compatible, LossSpec, WeightSpec};
use crate::mat::axpy;
use crate::model::{init_factors, init_factors_svd, FactorModel};
use crate::objective::{
    self, grad_u_cached, grad_v_cached, ExpectationCache, ItemDraws,
};
use crate::ratings::ImplicitRatings;
use crate::rng::{self, Stream, Tag};
use crate::sweep::{run_sweep, ScopeSampler, SweepParams, SweepStats};

pub use crate::sweep::running_average_update;

/// Divergence sentinel on factor entries.
pub const MAX_FACTOR_MAGNITUDE: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Subsampled gradients (kappa_w users, kappa_y items).
    Sgd,
    /// Exact gradients and exact objective; for tests and small problems.
    FullBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// I.i.d. Gaussian entries scaled by `init_std`.
    Gaussian,
    /// Randomised truncated SVD of the training matrix.
    Svd,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub k: usize,
    pub lambda: f64,
    pub alpha: f64,
    /// Maximum number of iterations T.
    pub iters: usize,
    /// Averaging starts after this iteration (T0). `>= iters` disables it.
    pub avg_start: usize,
    /// Convergence threshold on consecutive objective estimates.
    pub eps: f64,
    pub kappa_w: usize,
    pub kappa_y: usize,
    /// Popularity exponent for the item distributions.
    pub tau: f64,
    pub loss: LossSpec,
    pub weight: WeightSpec,
    pub init_std: f64,
    pub init: InitKind,
    pub seed: u64,
    pub mode: TrainMode,
    /// Evaluate the objective every this many iterations.
    pub objective_check_period: usize,
    /// Optional (iteration, beta) schedule for sigmoid/logistic.
    pub beta_schedule: Vec<(usize, f64)>,
    /// Weight running averages by the row index instead of the per-row
    /// visit count.
    pub index_weighted_averaging: bool,
    /// Draw the update permutations once up front instead of fresh per
    /// iteration.
    pub fixed_permutations: bool,
}

impl TrainConfig {
    pub fn new(k: usize, loss: LossSpec, weight: WeightSpec) -> Self {
        TrainConfig {
            k,
            lambda: 0.0,
            alpha: 0.05,
            iters: 100,
            avg_start: 80,
            eps: 0.0,
            kappa_w: 30,
            kappa_y: 10,
            tau: 0.0,
            loss,
            weight,
            init_std: 0.1,
            init: InitKind::Gaussian,
            seed: 0,
            mode: TrainMode::Sgd,
            objective_check_period: 1,
            beta_schedule: Vec::new(),
            index_weighted_averaging: false,
            fixed_permutations: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k", "must be at least 1"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid("alpha", "must be non-negative"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda", "must be non-negative"));
        }
        if self.iters == 0 {
            return Err(Error::invalid("iters", "must be at least 1"));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::invalid("eps", "must be non-negative"));
        }
        if self.kappa_w == 0 || self.kappa_y == 0 {
            return Err(Error::invalid("kappa", "sample counts must be at least 1"));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::invalid("tau", "must be non-negative"));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::invalid("init_std", "must be non-negative"));
        }
        if self.objective_check_period == 0 {
            return Err(Error::invalid("objective_check_period", "must be at least 1"));
        }
        if !self.beta_schedule.is_empty() && self.loss.is_squared() {
            return Err(Error::invalid(
                "beta_schedule",
                "only meaningful for sigmoid/logistic losses",
            ));
        }
        check_compatible(&self.loss, &self.weight)?;
        Ok(())
    }

    /// The loss in effect at iteration `s` under the beta schedule.
    pub fn loss_at(&self, s: usize) -> Result<LossSpec> {
        let mut beta = None;
        for &(start, b) in &self.beta_schedule {
            if start <= s {
                beta = Some(b);
            }
        }
        match beta {
            Some(b) => self.loss.with_beta(b),
            None => Ok(self.loss),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    MaxIters,
    Converged,
}

#[derive(Debug)]
pub struct TrainReport {
    /// (iteration, objective estimate); entry 0 is the initial model.
    pub trace: Vec<(usize, f64)>,
    pub iter_seconds: Vec<f64>,
    pub termination: Termination,
    /// The returned solution (averaged factors once averaging has started).
    pub model: FactorModel,
    pub averaged_returned: bool,
    /// Users excluded from training for having no relevant or no irrelevant
    /// items.
    pub skipped_users: Vec<u32>,
    /// Row updates skipped inside sweeps (block-restricted scopes only).
    pub skipped_updates: u64,
    pub final_raw_objective: f64,
    pub final_avg_objective: f64,
}

pub(crate) struct TrainEnv {
    pub dists: ItemDistributions,
    pub eligible: Vec<u32>,
    pub items: Vec<u32>,
    pub skipped_users: Vec<u32>,
}

pub(crate) fn prepare_env(ratings: &ImplicitRatings, tau: f64) -> Result<TrainEnv> {
    let dists = build_distributions(ratings, tau)?;
    let eligible = ratings.eligible_users();
    if eligible.is_empty() {
        return Err(Error::invalid(
            "ratings",
            "every user is degenerate; nothing to train on",
        ));
    }
    let skipped_users = (0..ratings.num_users() as u32)
        .filter(|&i| ratings.is_degenerate(i as usize))
        .collect();
    Ok(TrainEnv {
        dists,
        eligible,
        items: (0..ratings.num_items() as u32).collect(),
        skipped_users,
    })
}

/// Objective estimate used for the convergence trace: the subsampled
/// objective on a fixed evaluation stream in SGD mode, the exact objective
/// in full-batch mode. Evaluated on the averaged factors.
pub(crate) fn trace_objective(
    model: &FactorModel,
    ratings: &ImplicitRatings,
    env: &TrainEnv,
    config: &TrainConfig,
    loss: &LossSpec,
) -> Result<f64> {
    let averaged = model.averaged();
    match config.mode {
        TrainMode::FullBatch => objective::objective_full(
            &averaged,
            ratings,
            &env.dists,
            loss,
            &config.weight,
            config.lambda,
        ),
        TrainMode::Sgd => {
            let mut rng = rng::stream(config.seed, Tag::Eval, 0, 0);
            objective::objective_sampled_over(
                &averaged,
                ratings,
                &env.dists,
                loss,
                &config.weight,
                config.lambda,
                config.kappa_w,
                ItemDraws::Count(config.kappa_y),
                &env.eligible,
                &mut rng,
            )
        }
    }
}

pub(crate) fn check_divergence(
    model: &FactorModel,
    objective: f64,
    iteration: usize,
) -> Result<()> {
    if !objective.is_finite()
        || !model.all_finite()
        || model.max_abs_entry() > MAX_FACTOR_MAGNITUDE
    {
        return Err(Error::Diverged { iteration });
    }
    Ok(())
}

/// One full-batch iteration: exact preconditioned gradients over the same
/// paired permutation discipline as the stochastic sweep.
fn full_batch_iteration(
    model: &mut FactorModel,
    ratings: &ImplicitRatings,
    env: &TrainEnv,
    config: &TrainConfig,
    loss: &LossSpec,
    averaging: bool,
    cache: &mut ExpectationCache,
    rng: &mut Stream,
) -> Result<()> {
    let m = ratings.num_users() as f64;
    let n = ratings.num_items() as f64;
    let mut zu = env.eligible.clone();
    let mut zv = env.items.clone();
    rng::shuffle(&mut zu, rng);
    rng::shuffle(&mut zv, rng);
    let updates = ratings.num_users().max(ratings.num_items());
    let fast = config.loss.kind() == crate::losses::LossKind::Square
        && config.weight.kind() == crate::losses::WeightKind::Identity;
    for t in 0..updates {
        let i = zu[t % zu.len()] as usize;
        let j = zv[t % zv.len()] as usize;
        let mut gu = if fast {
            grad_u_cached(model, i, ratings, &env.dists, 0.0, cache)?
        } else {
            objective::grad_u_reference(
                model,
                i,
                ratings,
                &env.dists,
                loss,
                &config.weight,
                0.0,
            )?
        };
        for x in gu.iter_mut() {
            *x *= m;
        }
        axpy(config.lambda, model.u_row(i), &mut gu);
        {
            let (row, avg, visits) = model.u_parts_mut(i);
            step_and_average(row, avg, visits, &gu, i as u32, config, averaging);
        }
        let mut gv = if fast {
            grad_v_cached(model, j, ratings, &env.dists, 0.0, cache)?
        } else {
            objective::grad_v_reference(
                model,
                j,
                ratings,
                &env.dists,
                loss,
                &config.weight,
                0.0,
            )?
        };
        for x in gv.iter_mut() {
            *x *= n;
        }
        axpy(config.lambda, model.v_row(j), &mut gv);
        {
            let (row, avg, visits) = model.v_parts_mut(j);
            step_and_average(row, avg, visits, &gv, j as u32, config, averaging);
        }
    }
    Ok(())
}

fn step_and_average(
    row: &mut [f64],
    avg: &mut [f64],
    visits: &mut u64,
    grad: &[f64],
    index: u32,
    config: &TrainConfig,
    averaging: bool,
) {
    for (x, &g) in row.iter_mut().zip(grad) {
        *x -= config.alpha * g;
    }
    if averaging {
        let count = if config.index_weighted_averaging {
            index as u64
        } else {
            *visits
        };
        running_average_update(avg, row, count);
        *visits += 1;
    } else {
        avg.copy_from_slice(row);
    }
}

pub(crate) fn initial_model(
    ratings: &ImplicitRatings,
    config: &TrainConfig,
) -> Result<FactorModel> {
    match config.init {
        InitKind::Gaussian => init_factors(
            ratings.num_users(),
            ratings.num_items(),
            config.k,
            config.init_std,
            config.seed,
        ),
        InitKind::Svd => init_factors_svd(ratings, config.k, config.seed),
    }
}

/// Trains factors on the ratings with averaged SGD (Algorithm 1 style).
pub fn train(ratings: &ImplicitRatings, config: &TrainConfig) -> Result<TrainReport> {
    let model = initial_model_checked(ratings, config)?;
    train_from(ratings, config, model)
}

fn initial_model_checked(
    ratings: &ImplicitRatings,
    config: &TrainConfig,
) -> Result<FactorModel> {
    config.validate()?;
    initial_model(ratings, config)
}

/// Like `train`, but starting from the given factors (warm start).
pub fn train_from(
    ratings: &ImplicitRatings,
    config: &TrainConfig,
    model: FactorModel,
) -> Result<TrainReport> {
    config.validate()?;
    if config.mode == TrainMode::FullBatch {
        for i in 0..ratings.num_users() {
            ratings.check_user(i)?;
        }
    }
    let env = prepare_env(ratings, config.tau)?;
    let mut model = model;
    let mut cache = ExpectationCache::new(ratings.num_users());

    let fixed_perms: Option<(Vec<u32>, Vec<u32>)> = if config.fixed_permutations {
        let mut rng = rng::stream(config.seed, Tag::Sweep, 0, 0);
        let mut zu = env.eligible.clone();
        let mut zv = env.items.clone();
        rng::shuffle(&mut zu, &mut rng);
        rng::shuffle(&mut zv, &mut rng);
        Some((zu, zv))
    } else {
        None
    };

    let loss0 = config.loss_at(0)?;
    let mut prev = trace_objective(&model, ratings, &env, config, &loss0)?;
    check_divergence(&model, prev, 0)?;
    let mut trace = vec![(0usize, prev)];
    let mut iter_seconds = Vec::new();
    let mut termination = Termination::MaxIters;
    let mut stats = SweepStats::default();
    let updates = ratings.num_users().max(ratings.num_items());

    for s in 1..=config.iters {
        let start = Instant::now();
        let loss = config.loss_at(s)?;
        let averaging = s > config.avg_start;
        let mut rng = rng::stream(config.seed, Tag::Sweep, s as u64, 0);
        match config.mode {
            TrainMode::Sgd => {
                let sampler = ScopeSampler::Full {
                    ratings,
                    dists: &env.dists,
                };
                let params = SweepParams {
                    loss,
                    weight: config.weight,
                    lambda: config.lambda,
                    alpha: config.alpha,
                    kappa_w: config.kappa_w,
                    kappa_y: config.kappa_y,
                    averaging,
                    index_weighted_averaging: config.index_weighted_averaging,
                };
                stats.absorb(run_sweep(
                    &mut model,
                    &sampler,
                    &env.eligible,
                    &env.items,
                    &params,
                    updates,
                    fixed_perms.as_ref().map(|(u, v)| (u.as_slice(), v.as_slice())),
                    &mut rng,
                ));
            }
            TrainMode::FullBatch => {
                full_batch_iteration(
                    &mut model, ratings, &env, config, &loss, averaging, &mut cache, &mut rng,
                )?;
            }
        }
        iter_seconds.push(start.elapsed().as_secs_f64());
        if s % config.objective_check_period == 0 || s == config.iters {
            let value = trace_objective(&model, ratings, &env, config, &loss)?;
            check_divergence(&model, value, s)?;
            trace.push((s, value));
            if (value - prev).abs() < config.eps {
                termination = Termination::Converged;
                break;
            }
            prev = value;
        }
    }

    finish_report(
        model,
        ratings,
        &env,
        config,
        trace,
        iter_seconds,
        termination,
        stats,
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn finish_report(
    model: FactorModel,
    ratings: &ImplicitRatings,
    env: &TrainEnv,
    config: &TrainConfig,
    trace: Vec<(usize, f64)>,
    iter_seconds: Vec<f64>,
    termination: Termination,
    stats: SweepStats,
) -> Result<TrainReport> {
    let last_iter = trace.last().map(|&(s, _)| s).unwrap_or(0);
    let averaging_started = last_iter > config.avg_start;
    let loss = config.loss_at(last_iter)?;
    let raw_view = FactorModel::from_factors(
        crate::mat::Mat::from_fn(model.num_users(), model.k(), |i, c| model.u_row(i)[c]),
        crate::mat::Mat::from_fn(model.num_items(), model.k(), |j, c| model.v_row(j)[c]),
    );
    let final_raw = trace_objective(&raw_view, ratings, env, config, &loss)?;
    let final_avg = trace_objective(&model, ratings, env, config, &loss)?;
    let returned = if averaging_started {
        model.averaged()
    } else {
        raw_view
    };
    Ok(TrainReport {
        trace,
        iter_seconds,
        termination,
        model: returned,
        averaged_returned: averaging_started,
        skipped_users: env.skipped_users.clone(),
        skipped_updates: stats.skipped_updates,
        final_raw_objective: final_raw,
        final_avg_objective: final_avg,
    })
}
