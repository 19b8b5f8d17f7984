use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;

use mfauc_core::diagnostics::{rademacher_bound, BoundInputs};
use mfauc_core::losses::{LossKind, LossSpec, WeightSpec};
use mfauc_core::metrics::{
    empirical_auc, holdout_auc, local_auc, mean_roc, precision_recall_at,
};
use mfauc_core::model::{load_factors, save_factors};
use mfauc_core::objective::objective_full;
use mfauc_core::optimizer::{train, InitKind, Termination, TrainConfig, TrainMode};
use mfauc_core::parallel::train_parallel;
use mfauc_core::ratings::{load_ratings, save_ratings, split_holdout, ImplicitRatings};
use mfauc_core::synthetic::{gen_synthetic1, gen_synthetic2, Synthetic1Spec, Synthetic2Spec};
use mfauc_core::tuning::grid_search;
use mfauc_core::Error as CoreError;

use crate::gridfile;
use crate::manifest::Manifest;

pub fn invalid(name: &'static str, msg: impl Into<String>) -> anyhow::Error {
    CoreError::invalid(name, msg).into()
}

fn default_workers() -> usize {
    std::env::var("MFAUC_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&w| w >= 1)
        .unwrap_or(1)
}

/// Loss/weighting selection shared by train, tune and evaluate.
#[derive(Args, Debug, Clone)]
pub struct LossArgs {
    /// Surrogate loss: square_hinge | square | sigmoid | logistic
    #[arg(long, default_value = "square_hinge")]
    pub loss: String,
    /// Sharpness of the sigmoid/logistic losses
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Rank weighting: identity | tanh
    #[arg(long, default_value = "identity")]
    pub weight: String,
    /// Scale of the tanh weighting
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
}

impl LossArgs {
    pub fn loss_spec(&self) -> Result<LossSpec> {
        Ok(LossSpec::new(LossKind::parse(&self.loss)?, self.beta)?)
    }

    pub fn weight_spec(&self) -> Result<WeightSpec> {
        Ok(WeightSpec::parse(&self.weight, self.rho)?)
    }
}

#[derive(Args, Debug, Clone)]
pub struct TrainHyperArgs {
    /// Latent dimension
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Learning rate
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Regularisation constant
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// Maximum iterations
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    /// Iteration after which factor averaging starts (default: 4/5 of iters)
    #[arg(long)]
    pub t0: Option<usize>,
    /// Convergence threshold on consecutive objective estimates
    #[arg(long, default_value_t = 0.0)]
    pub eps: f64,
    /// Users sampled per item-gradient estimate
    #[arg(long = "kappa-w", default_value_t = 30)]
    pub kappa_w: usize,
    /// Items sampled per expectation
    #[arg(long = "kappa-y", default_value_t = 10)]
    pub kappa_y: usize,
    /// Popularity exponent of the item distributions
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
    /// Standard deviation of the Gaussian factor init
    #[arg(long = "init-std", default_value_t = 0.1)]
    pub init_std: f64,
    /// Factor initialisation: gaussian | svd
    #[arg(long, default_value = "gaussian")]
    pub init: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// sgd | full-batch
    #[arg(long, default_value = "sgd")]
    pub mode: String,
    /// Optional sigmoid/logistic annealing, e.g. "0:0.5,100:1,300:2"
    #[arg(long = "beta-schedule")]
    pub beta_schedule: Option<String>,
    /// Weight running averages by row index instead of visit count
    #[arg(long = "index-weighted-averaging", default_value_t = false)]
    pub index_averaging: bool,
    /// Draw the update permutations once instead of fresh per iteration
    #[arg(long = "fixed-permutations", default_value_t = false)]
    pub fixed_permutations: bool,
}

impl TrainHyperArgs {
    pub fn config(&self, loss_args: &LossArgs) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::new(self.k, loss_args.loss_spec()?, loss_args.weight_spec()?);
        cfg.alpha = self.alpha;
        cfg.lambda = self.lambda;
        cfg.iters = self.iters;
        cfg.avg_start = self.t0.unwrap_or(self.iters * 4 / 5);
        cfg.eps = self.eps;
        cfg.kappa_w = self.kappa_w;
        cfg.kappa_y = self.kappa_y;
        cfg.tau = self.tau;
        cfg.init_std = self.init_std;
        cfg.init = match self.init.as_str() {
            "gaussian" => InitKind::Gaussian,
            "svd" => InitKind::Svd,
            other => return Err(invalid("init", format!("unknown init `{other}`"))),
        };
        cfg.seed = self.seed;
        cfg.mode = match self.mode.as_str() {
            "sgd" => TrainMode::Sgd,
            "full-batch" | "full_batch" => TrainMode::FullBatch,
            other => return Err(invalid("mode", format!("unknown mode `{other}`"))),
        };
        cfg.index_weighted_averaging = self.index_averaging;
        cfg.fixed_permutations = self.fixed_permutations;
        if let Some(raw) = &self.beta_schedule {
            cfg.beta_schedule = parse_beta_schedule(raw)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_beta_schedule(raw: &str) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for part in raw.split(',') {
        let (iter, beta) = part
            .split_once(':')
            .ok_or_else(|| invalid("beta_schedule", format!("expected iter:beta, got `{part}`")))?;
        out.push((
            iter.trim()
                .parse::<usize>()
                .map_err(|_| invalid("beta_schedule", format!("bad iteration `{iter}`")))?,
            beta.trim()
                .parse::<f64>()
                .map_err(|_| invalid("beta_schedule", format!("bad beta `{beta}`")))?,
        ));
    }
    out.sort_by_key(|&(s, _)| s);
    Ok(out)
}

pub fn parse_blocks(raw: &str) -> Result<(usize, usize)> {
    let (a, b) = raw
        .split_once('x')
        .ok_or_else(|| invalid("blocks", format!("expected d1xd2, got `{raw}`")))?;
    Ok((
        a.parse::<usize>()
            .map_err(|_| invalid("blocks", format!("bad d1 `{a}`")))?,
        b.parse::<usize>()
            .map_err(|_| invalid("blocks", format!("bad d2 `{b}`")))?,
    ))
}

fn parse_cutoffs(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| invalid("cutoffs", format!("bad cutoff `{t}`")))
        })
        .collect()
}

// ---------------------------------------------------------------- generate

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Benchmark variant: 1 (quantile thresholded) or 2 (power-law sampled)
    #[arg(long)]
    pub variant: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output rating matrix (MatrixMarket)
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the ground-truth factors here
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Users (default 500 for variant 1, 600 for variant 2)
    #[arg(long)]
    pub users: Option<usize>,
    /// Items (default 200 for variant 1, 300 for variant 2)
    #[arg(long)]
    pub items: Option<usize>,
    /// Ground-truth latent dimension
    #[arg(long, default_value_t = 8)]
    pub latent: usize,
    /// Variant 1: per-row top quantile marked relevant
    #[arg(long = "quantile-t", default_value_t = 0.1)]
    pub quantile_t: f64,
    /// Variant 1: expected random extra relevant items per row
    #[arg(long, default_value_t = 5.0)]
    pub noise: f64,
    /// Variant 1: quantile scope, per-row | global
    #[arg(long = "quantile-mode", default_value = "per-row")]
    pub quantile_mode: String,
    /// Variant 2: power-law exponent
    #[arg(long, default_value_t = 1.0)]
    pub exponent: f64,
    /// Variant 2: target density
    #[arg(long, default_value_t = 0.1)]
    pub density: f64,
    /// Withhold this many relevant items per user into a test split
    #[arg(long)]
    pub holdout: Option<usize>,
    /// Users must keep at least this many items to be split
    #[arg(long = "min-remaining", default_value_t = 1)]
    pub min_remaining: usize,
    /// Seed of the holdout split (defaults to --seed)
    #[arg(long = "holdout-seed")]
    pub holdout_seed: Option<u64>,
    /// Where to write the training part of the split
    #[arg(long = "train-out")]
    pub train_out: Option<PathBuf>,
    /// Where to write the held-out part of the split
    #[arg(long = "test-out")]
    pub test_out: Option<PathBuf>,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let start = Instant::now();
    let mut manifest = Manifest::new("generate");
    let (ratings, truth) = match args.variant {
        1 => {
            let spec = Synthetic1Spec {
                m: args.users.unwrap_or(500),
                n: args.items.unwrap_or(200),
                k: args.latent,
                quantile_t: args.quantile_t,
                noise_per_row: args.noise,
                global_quantile: match args.quantile_mode.as_str() {
                    "per-row" => false,
                    "global" => true,
                    other => {
                        return Err(invalid(
                            "quantile_mode",
                            format!("expected per-row|global, got `{other}`"),
                        ))
                    }
                },
                seed: args.seed,
            };
            manifest.set("quantile_mode", &args.quantile_mode);
            manifest.set("m", spec.m);
            manifest.set("n", spec.n);
            manifest.set("latent", spec.k);
            manifest.set("quantile_t", spec.quantile_t);
            manifest.set("noise", spec.noise_per_row);
            gen_synthetic1(&spec)?
        }
        2 => {
            let spec = Synthetic2Spec {
                m: args.users.unwrap_or(600),
                n: args.items.unwrap_or(300),
                k: args.latent,
                exponent: args.exponent,
                target_density: args.density,
                seed: args.seed,
            };
            manifest.set("m", spec.m);
            manifest.set("n", spec.n);
            manifest.set("latent", spec.k);
            manifest.set("exponent", spec.exponent);
            manifest.set("density", spec.target_density);
            gen_synthetic2(&spec)?
        }
        other => return Err(invalid("variant", format!("must be 1 or 2, got {other}"))),
    };
    manifest.set("variant", args.variant);
    manifest.set("seed", args.seed);
    manifest.set("generated_users", ratings.num_users());
    manifest.set("generated_items", ratings.num_items());
    manifest.set("generated_nnz", ratings.nnz());

    save_ratings(&ratings, &args.out)?;
    manifest.output(&args.out);
    if let Some(truth_path) = &args.truth {
        save_factors(&truth.model, truth_path)?;
        manifest.output(truth_path);
    }

    if let Some(per_user) = args.holdout {
        let (train_out, test_out) = match (&args.train_out, &args.test_out) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(invalid(
                    "holdout",
                    "--holdout requires --train-out and --test-out",
                ))
            }
        };
        let split = split_holdout(
            &ratings,
            per_user,
            args.min_remaining,
            args.holdout_seed.unwrap_or(args.seed),
        )?;
        save_ratings(&split.train, train_out)?;
        let test =
            ImplicitRatings::from_rows(ratings.num_items(), split.test.clone())?;
        save_ratings(&test, test_out)?;
        manifest.set("holdout_per_user", per_user);
        manifest.set("holdout_skipped_users", split.skipped.len());
        manifest.output(train_out);
        manifest.output(test_out);
    }
    manifest.write(&args.out, start.elapsed().as_secs_f64())?;
    println!(
        "generated {} x {} matrix with {} nonzeros -> {}",
        ratings.num_users(),
        ratings.num_items(),
        ratings.nnz(),
        args.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Input rating matrix (MatrixMarket)
    #[arg(long)]
    pub input: PathBuf,
    /// Ratings strictly greater than this are relevant
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Output factor model
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub hyper: TrainHyperArgs,
    #[command(flatten)]
    pub loss_args: LossArgs,
    /// Worker threads (default: MFAUC_WORKERS or 1); > 1 selects the
    /// block-parallel trainer
    #[arg(long)]
    pub workers: Option<usize>,
    /// Block grid d1xd2 for the parallel trainer (default workers x workers)
    #[arg(long)]
    pub blocks: Option<String>,
    /// Warm-start from an existing factor file instead of random init
    #[arg(long = "init-model")]
    pub init_model: Option<PathBuf>,
    /// Drop degenerate users with a warning instead of failing
    #[arg(long = "drop-degenerate", default_value_t = false)]
    pub drop_degenerate: bool,
    /// Write the objective trace as TSV
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = args.hyper.config(&args.loss_args)?;
    let ratings = load_ratings(&args.input, args.threshold)?;
    if !args.drop_degenerate {
        for i in 0..ratings.num_users() {
            ratings.check_user(i)?;
        }
    }
    let workers = args.workers.unwrap_or_else(default_workers);
    if workers == 0 {
        return Err(invalid("workers", "must be at least 1"));
    }
    let blocks = match &args.blocks {
        Some(raw) => Some(parse_blocks(raw)?),
        None => None,
    };
    let warm_start = match &args.init_model {
        Some(path) => {
            let model = load_factors(path)?;
            if model.num_users() != ratings.num_users()
                || model.num_items() != ratings.num_items()
                || model.k() != cfg.k
            {
                return Err(invalid(
                    "init_model",
                    "warm-start factors must match the matrix dimensions and --k",
                ));
            }
            Some(model)
        }
        None => None,
    };
    let parallel = workers > 1 || blocks.is_some();
    let report = if parallel {
        let (d1, d2) = blocks.unwrap_or((workers, workers));
        let d1 = d1.min(ratings.num_users());
        let d2 = d2.min(ratings.num_items());
        if warm_start.is_some() {
            return Err(invalid(
                "init_model",
                "warm starts are only supported by the serial trainer",
            ));
        }
        train_parallel(&ratings, &cfg, workers, d1, d2)?
    } else {
        match warm_start {
            Some(model) => mfauc_core::optimizer::train_from(&ratings, &cfg, model)?,
            None => train(&ratings, &cfg)?,
        }
    };
    if !report.skipped_users.is_empty() {
        eprintln!(
            "warning: {} degenerate users excluded from training",
            report.skipped_users.len()
        );
    }

    save_factors(&report.model, &args.out)?;
    if let Some(trace_path) = &args.trace {
        let mut text = String::from("iteration\tobjective\n");
        for (s, v) in &report.trace {
            text.push_str(&format!("{s}\t{v:.10e}\n"));
        }
        fs::write(trace_path, text)
            .with_context(|| format!("writing {}", trace_path.display()))?;
    }

    let mut manifest = Manifest::new("train");
    manifest.set("seed", cfg.seed);
    manifest.set("k", cfg.k);
    manifest.set("loss", cfg.loss.kind().name());
    manifest.set("beta", cfg.loss.beta());
    manifest.set("weight", cfg.weight.name());
    manifest.set("rho", cfg.weight.rho());
    manifest.set("alpha", cfg.alpha);
    manifest.set("lambda", cfg.lambda);
    manifest.set("iters", cfg.iters);
    manifest.set("t0", cfg.avg_start);
    manifest.set("eps", cfg.eps);
    manifest.set("kappa_w", cfg.kappa_w);
    manifest.set("kappa_y", cfg.kappa_y);
    manifest.set("tau", cfg.tau);
    manifest.set("init_std", cfg.init_std);
    manifest.set(
        "init",
        match cfg.init {
            InitKind::Gaussian => "gaussian",
            InitKind::Svd => "svd",
        },
    );
    manifest.set("workers", workers);
    if let Some((d1, d2)) = blocks {
        manifest.set("blocks", format!("{d1}x{d2}"));
    }
    manifest.set(
        "termination",
        match report.termination {
            Termination::Converged => "converged",
            Termination::MaxIters => "max_iters",
        },
    );
    manifest.set("iterations_run", report.trace.last().map(|&(s, _)| s).unwrap_or(0));
    manifest.set("final_objective", report.trace.last().map(|&(_, v)| v).unwrap_or(f64::NAN));
    manifest.set("averaged_returned", report.averaged_returned);
    manifest.set("skipped_users", report.skipped_users.len());
    manifest.set("skipped_updates", report.skipped_updates);
    manifest.input(&args.input);
    manifest.output(&args.out);
    if let Some(trace_path) = &args.trace {
        manifest.output(trace_path);
    }
    manifest.write(&args.out, start.elapsed().as_secs_f64())?;
    println!(
        "trained {} iterations ({}), final objective {:.6} -> {}",
        report.trace.last().map(|&(s, _)| s).unwrap_or(0),
        match report.termination {
            Termination::Converged => "converged",
            Termination::MaxIters => "max iterations",
        },
        report.trace.last().map(|&(_, v)| v).unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Factor model to score with
    #[arg(long)]
    pub model: PathBuf,
    /// Training rating matrix
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Held-out rating matrix; enables precision/recall and test AUC
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Top-l cutoffs, comma separated
    #[arg(long, default_value = "1,3,5")]
    pub cutoffs: String,
    /// Quantile of the local AUC
    #[arg(long = "local-t", default_value_t = 0.2)]
    pub local_t: f64,
    /// Popularity exponent for the weighted AUC
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
    /// Also evaluate the training objective with the flags below
    #[arg(long, default_value_t = false)]
    pub objective: bool,
    #[command(flatten)]
    pub loss_args: LossArgs,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// Output metric table (TSV)
    #[arg(long)]
    pub out: PathBuf,
    /// Optional mean ROC points file (TSV fpr/tpr)
    #[arg(long = "roc-out")]
    pub roc_out: Option<PathBuf>,
    #[arg(long = "max-fpr", default_value_t = 1.0)]
    pub max_fpr: f64,
    /// Points on the ROC grid
    #[arg(long, default_value_t = 101)]
    pub grid: usize,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let start = Instant::now();
    let ratings = load_ratings(&args.train, args.threshold)?;
    let model = load_factors(&args.model)?;
    if model.num_users() != ratings.num_users() || model.num_items() != ratings.num_items() {
        return Err(invalid(
            "model",
            format!(
                "model is {}x{} but the training matrix is {}x{}",
                model.num_users(),
                model.num_items(),
                ratings.num_users(),
                ratings.num_items()
            ),
        ));
    }
    let cutoffs = parse_cutoffs(&args.cutoffs)?;
    let mut rows: Vec<(String, f64)> = Vec::new();

    let train_auc = empirical_auc(&model, &ratings, None)?;
    rows.push(("auc_train_uniform".into(), train_auc.value));
    let dists = mfauc_core::distributions::build_distributions(&ratings, args.tau)?;
    let weighted = empirical_auc(&model, &ratings, Some(&dists))?;
    rows.push(("auc_train_weighted".into(), weighted.value));
    match local_auc(&model, &ratings, args.local_t) {
        Ok(l) => rows.push((format!("local_auc_train@{}", args.local_t), l.value)),
        Err(CoreError::UndefinedMetric(msg)) => eprintln!("warning: local AUC skipped: {msg}"),
        Err(e) => return Err(e.into()),
    }

    if args.objective {
        let loss = args.loss_args.loss_spec()?;
        let weight = args.loss_args.weight_spec()?;
        let value = objective_full(&model, &ratings, &dists, &loss, &weight, args.lambda)?;
        rows.push(("objective".into(), value));
    }

    let mut test_positives: Option<Vec<Vec<u32>>> = None;
    if let Some(test_path) = &args.test {
        let test = load_ratings(test_path, args.threshold)?;
        if test.num_users() != ratings.num_users() || test.num_items() != ratings.num_items() {
            return Err(invalid(
                "test",
                "test matrix dimensions must match the training matrix",
            ));
        }
        let positives: Vec<Vec<u32>> = (0..test.num_users())
            .map(|i| test.row(i).to_vec())
            .collect();
        let masked = holdout_auc(&model, &positives, Some(&ratings))?;
        rows.push(("auc_test_masked".into(), masked.value));
        let unmasked = holdout_auc(&model, &positives, None)?;
        rows.push(("auc_test_all".into(), unmasked.value));
        let table = precision_recall_at(&model, &ratings, &positives, &cutoffs)?;
        for row in &table.rows {
            rows.push((format!("p@{}", row.cutoff), row.precision));
            rows.push((format!("r@{}", row.cutoff), row.recall));
            rows.push((format!("f1@{}", row.cutoff), row.f1));
        }
        rows.push(("test_users_evaluated".into(), table.users as f64));
        test_positives = Some(positives);
    }

    let mut text = String::from("metric\tvalue\n");
    for (name, value) in &rows {
        text.push_str(&format!("{name}\t{value:.10}\n"));
    }
    fs::write(&args.out, text).with_context(|| format!("writing {}", args.out.display()))?;

    if let Some(roc_path) = &args.roc_out {
        let curve = match &test_positives {
            Some(pos) => mean_roc(&model, pos, Some(&ratings), args.max_fpr, args.grid)?,
            None => {
                let pos: Vec<Vec<u32>> = (0..ratings.num_users())
                    .map(|i| ratings.row(i).to_vec())
                    .collect();
                mean_roc(&model, &pos, None, args.max_fpr, args.grid)?
            }
        };
        write_roc(roc_path, &curve)?;
    }

    let mut manifest = Manifest::new("evaluate");
    manifest.set("cutoffs", &args.cutoffs);
    manifest.set("local_t", args.local_t);
    manifest.set("tau", args.tau);
    manifest.input(&args.model);
    manifest.input(&args.train);
    if let Some(test_path) = &args.test {
        manifest.input(test_path);
    }
    manifest.output(&args.out);
    if let Some(roc_path) = &args.roc_out {
        manifest.output(roc_path);
    }
    manifest.write(&args.out, start.elapsed().as_secs_f64())?;
    for (name, value) in &rows {
        println!("{name}\t{value:.6}");
    }
    Ok(())
}

fn write_roc(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut text = String::from("fpr\ttpr\n");
    for (f, t) in curve {
        text.push_str(&format!("{f:.8}\t{t:.8}\n"));
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

// --------------------------------------------------------------------- roc

#[derive(Args, Debug)]
pub struct RocArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Held-out matrix: positives come from here and training items are
    /// masked; without it the curve is over the training relevance
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long = "max-fpr", default_value_t = 0.2)]
    pub max_fpr: f64,
    /// Points on the FPR grid
    #[arg(long, default_value_t = 101)]
    pub grid: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_roc(args: &RocArgs) -> Result<()> {
    let start = Instant::now();
    let ratings = load_ratings(&args.train, args.threshold)?;
    let model = load_factors(&args.model)?;
    if model.num_users() != ratings.num_users() || model.num_items() != ratings.num_items() {
        return Err(invalid("model", "model/matrix dimensions differ"));
    }
    let curve = match &args.test {
        Some(test_path) => {
            let test = load_ratings(test_path, args.threshold)?;
            let positives: Vec<Vec<u32>> = (0..test.num_users())
                .map(|i| test.row(i).to_vec())
                .collect();
            mean_roc(&model, &positives, Some(&ratings), args.max_fpr, args.grid)?
        }
        None => {
            let positives: Vec<Vec<u32>> = (0..ratings.num_users())
                .map(|i| ratings.row(i).to_vec())
                .collect();
            mean_roc(&model, &positives, None, args.max_fpr, args.grid)?
        }
    };
    write_roc(&args.out, &curve)?;
    let mut manifest = Manifest::new("roc");
    manifest.set("max_fpr", args.max_fpr);
    manifest.set("grid", args.grid);
    manifest.input(&args.model);
    manifest.input(&args.train);
    if let Some(test_path) = &args.test {
        manifest.input(test_path);
    }
    manifest.output(&args.out);
    manifest.write(&args.out, start.elapsed().as_secs_f64())?;
    println!(
        "wrote {} ROC points up to fpr {} -> {}",
        curve.len(),
        args.max_fpr,
        args.out.display()
    );
    Ok(())
}

// -------------------------------------------------------------------- tune

#[derive(Args, Debug)]
pub struct TuneArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Grid file: flat `key = [values]` lines
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub folds: usize,
    /// Validation items withheld per user and fold
    #[arg(long = "val-per-user", default_value_t = 3)]
    pub val_per_user: usize,
    /// F1 cutoff used for selection
    #[arg(long, default_value_t = 5)]
    pub cutoff: usize,
    /// Model selection subsample bound (0 disables)
    #[arg(long = "max-ratings", default_value_t = 100_000)]
    pub max_ratings: usize,
    #[command(flatten)]
    pub hyper: TrainHyperArgs,
    #[command(flatten)]
    pub loss_args: LossArgs,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output: the selected configuration as a flat table
    #[arg(long)]
    pub out: PathBuf,
    /// Optional per-point score table (TSV)
    #[arg(long)]
    pub table: Option<PathBuf>,
}

pub fn cmd_tune(args: &TuneArgs) -> Result<()> {
    let start = Instant::now();
    let ratings = load_ratings(&args.input, args.threshold)?;
    let base = args.hyper.config(&args.loss_args)?;
    let text = fs::read_to_string(&args.grid)
        .with_context(|| format!("reading {}", args.grid.display()))?;
    let mut grid = gridfile::parse_grid(&text)?;
    grid.folds = args.folds;
    grid.validation_per_user = args.val_per_user;
    grid.cutoff = args.cutoff;
    grid.max_ratings = args.max_ratings;
    let workers = args.workers.unwrap_or_else(default_workers);
    let result = grid_search(&ratings, &grid, &base, base.seed, workers)?;

    let best_row = &result.table[result.best_index];
    fs::write(&args.out, gridfile::render_best(&result.best, best_row.mean_f1))
        .with_context(|| format!("writing {}", args.out.display()))?;

    if let Some(table_path) = &args.table {
        let mut text =
            String::from("alpha\tlambda\tk\tloss\tbeta\tweight\trho\tmean_f1\tfailures\tfolds\n");
        for row in &result.table {
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.10}\t{}\t{}\n",
                row.point.alpha,
                row.point.lambda,
                row.point.k,
                row.point.loss.kind().name(),
                row.point.loss.beta(),
                row.point.weight.name(),
                row.point.weight.rho(),
                row.mean_f1,
                row.failures,
                row.fold_scores
                    .iter()
                    .map(|s| format!("{s:.6}"))
                    .collect::<Vec<_>>()
                    .join(","),
            ));
        }
        fs::write(table_path, text)
            .with_context(|| format!("writing {}", table_path.display()))?;
    }

    let mut manifest = Manifest::new("tune");
    manifest.set("folds", grid.folds);
    manifest.set("val_per_user", grid.validation_per_user);
    manifest.set("cutoff", grid.cutoff);
    manifest.set("max_ratings", grid.max_ratings);
    manifest.set("grid_points", result.table.len());
    manifest.set("best_index", result.best_index);
    manifest.set("best_mean_f1", best_row.mean_f1);
    manifest.set("seed", base.seed);
    manifest.set("workers", workers);
    if let Some((mu, ni)) = result.subsampled_to {
        manifest.set("subsampled_users", mu);
        manifest.set("subsampled_items", ni);
    }
    manifest.input(&args.input);
    manifest.input(&args.grid);
    manifest.output(&args.out);
    if let Some(table_path) = &args.table {
        manifest.output(table_path);
    }
    manifest.write(&args.out, start.elapsed().as_secs_f64())?;
    println!(
        "best of {} grid points: alpha {} lambda {} k {} loss {} (mean F1@{} = {:.4}) -> {}",
        result.table.len(),
        result.best.alpha,
        result.best.lambda,
        result.best.k,
        result.best.loss.kind().name(),
        grid.cutoff,
        best_row.mean_f1,
        args.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------- bound

#[derive(Args, Debug)]
pub struct BoundArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Lipschitz constant of the loss kernel
    #[arg(long = "b", visible_alias = "B")]
    pub b: f64,
    /// Frobenius radius of the user factors
    #[arg(long)]
    pub ru: f64,
    /// Frobenius radius of the item factors
    #[arg(long)]
    pub rv: f64,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    /// Optional TSV output of the three numbers
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_bound(args: &BoundArgs) -> Result<()> {
    let start = Instant::now();
    let ratings = load_ratings(&args.input, args.threshold)?;
    let report = rademacher_bound(
        &ratings,
        &BoundInputs {
            b: args.b,
            r_u: args.ru,
            r_v: args.rv,
            delta: args.delta,
        },
    )?;
    println!("complexity_term\t{:.12e}", report.complexity_term);
    println!("deviation_term\t{:.12e}", report.deviation_term);
    println!("total\t{:.12e}", report.total);
    if let Some(out) = &args.out {
        let text = format!(
            "term\tvalue\ncomplexity_term\t{:.12e}\ndeviation_term\t{:.12e}\ndeviation_term_half\t{:.12e}\ntotal\t{:.12e}\n",
            report.complexity_term,
            report.deviation_term,
            report.deviation_term_half,
            report.total
        );
        fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
        let mut manifest = Manifest::new("bound");
        manifest.set("b", args.b);
        manifest.set("ru", args.ru);
        manifest.set("rv", args.rv);
        manifest.set("delta", args.delta);
        manifest.input(&args.input);
        manifest.output(out);
        manifest.write(out, start.elapsed().as_secs_f64())?;
    }
    Ok(())
}

pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<CoreError>() {
        Some(
            CoreError::InvalidParameter { .. }
            | CoreError::DegenerateUser { .. }
            | CoreError::Parse { .. }
            | CoreError::Bounds { .. }
            | CoreError::DuplicateEntry { .. }
            | CoreError::EmptyResult,
        ) => 1,
        Some(CoreError::Io(_) | CoreError::Diverged { .. } | CoreError::UndefinedMetric(_)) => 2,
        None => 2,
    }
}
