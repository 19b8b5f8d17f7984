//! Grid-search model selection with per-user fold cross-validation,
//! selecting by mean F1 on validation items.

use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::losses::{check_compatible, LossSpec, WeightSpec};
use crate::metrics::precision_recall_at;
use crate::optimizer::{train, TrainConfig};
use crate::ratings::{sequential_subsample, ImplicitRatings};
use crate::rng::{self, shuffle, Tag};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Grid {
    pub alphas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub ks: Vec<usize>,
    /// Optional loss/weight candidates; empty lists fall back to the base
    /// configuration's choice.
    pub losses: Vec<LossSpec>,
    pub weights: Vec<WeightSpec>,
    pub folds: usize,
    pub validation_per_user: usize,
    /// F1 cutoff used for selection.
    pub cutoff: usize,
    /// Model selection runs on at most this many ratings (0 disables the
    /// subsampling).
    pub max_ratings: usize,
}

impl Grid {
    pub fn new(alphas: Vec<f64>, lambdas: Vec<f64>, ks: Vec<usize>) -> Self {
        Grid {
            alphas,
            lambdas,
            ks,
            losses: Vec::new(),
            weights: Vec::new(),
            folds: 3,
            validation_per_user: 3,
            cutoff: 5,
            max_ratings: 100_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.lambdas.is_empty() || self.ks.is_empty() {
            return Err(Error::invalid("grid", "candidate lists must be non-empty"));
        }
        if self.folds < 2 {
            return Err(Error::invalid("folds", "need at least 2 folds"));
        }
        if self.validation_per_user == 0 {
            return Err(Error::invalid("validation_per_user", "must be at least 1"));
        }
        if self.cutoff == 0 {
            return Err(Error::invalid("cutoff", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub alpha: f64,
    pub lambda: f64,
    pub k: usize,
    pub loss: LossSpec,
    pub weight: WeightSpec,
}

#[derive(Debug, Clone)]
pub struct GridRow {
    pub point: GridPoint,
    /// F1 per fold; diverged or unevaluable folds score 0.
    pub fold_scores: Vec<f64>,
    pub mean_f1: f64,
    /// Folds that failed to train or evaluate.
    pub failures: usize,
}

#[derive(Debug)]
pub struct GridSearchResult {
    pub best: TrainConfig,
    pub best_index: usize,
    pub table: Vec<GridRow>,
    /// Users/items of the model-selection subsample, when one was taken.
    pub subsampled_to: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct FoldData {
    pub train: ImplicitRatings,
    pub validation: Vec<Vec<u32>>,
}

/// Splits each user's items round-robin into `folds` disjoint parts and
/// builds, per fold, a training matrix with up to `per_user` validation
/// items withheld from that fold's part.
pub fn make_folds(
    ratings: &ImplicitRatings,
    folds: usize,
    per_user: usize,
    seed: u64,
) -> Result<Vec<FoldData>> {
    if folds < 2 {
        return Err(Error::invalid("folds", "need at least 2 folds"));
    }
    let m = ratings.num_users();
    let mut parts: Vec<Vec<Vec<u32>>> = vec![vec![Vec::new(); folds]; m];
    let mut rng = rng::stream(seed, Tag::Fold, 0, 0);
    for i in 0..m {
        let mut pool = ratings.row(i).to_vec();
        shuffle(&mut pool, &mut rng);
        for (idx, &j) in pool.iter().enumerate() {
            parts[i][idx % folds].push(j);
        }
    }
    let mut out = Vec::with_capacity(folds);
    for f in 0..folds {
        let mut rows = Vec::with_capacity(m);
        let mut validation = Vec::with_capacity(m);
        for i in 0..m {
            let mut val: Vec<u32> = parts[i][f]
                .iter()
                .copied()
                .take(per_user)
                .collect();
            val.sort_unstable();
            let keep: Vec<u32> = ratings
                .row(i)
                .iter()
                .copied()
                .filter(|j| val.binary_search(j).is_err())
                .collect();
            if keep.is_empty() {
                // never empty a user's training row for validation's sake
                rows.push(ratings.row(i).to_vec());
                validation.push(Vec::new());
            } else {
                rows.push(keep);
                validation.push(val);
            }
        }
        out.push(FoldData {
            train: ImplicitRatings::from_rows(ratings.num_items(), rows)?,
            validation,
        });
    }
    Ok(out)
}

fn enumerate_points(grid: &Grid, base: &TrainConfig) -> Vec<GridPoint> {
    let losses = if grid.losses.is_empty() {
        vec![base.loss]
    } else {
        grid.losses.clone()
    };
    let weights = if grid.weights.is_empty() {
        vec![base.weight]
    } else {
        grid.weights.clone()
    };
    let mut points = Vec::new();
    for &k in &grid.ks {
        for loss in &losses {
            for weight in &weights {
                if check_compatible(loss, weight).is_err() {
                    continue;
                }
                for &alpha in &grid.alphas {
                    for &lambda in &grid.lambdas {
                        points.push(GridPoint {
                            alpha,
                            lambda,
                            k,
                            loss: *loss,
                            weight: *weight,
                        });
                    }
                }
            }
        }
    }
    points
}

fn evaluate_fold(
    fold: &FoldData,
    point: &GridPoint,
    base: &TrainConfig,
    fold_seed: u64,
    cutoff: usize,
) -> (f64, bool) {
    let mut cfg = base.clone();
    cfg.alpha = point.alpha;
    cfg.lambda = point.lambda;
    cfg.k = point.k;
    cfg.loss = point.loss;
    cfg.weight = point.weight;
    cfg.seed = fold_seed;
    let report = match train(&fold.train, &cfg) {
        Ok(r) => r,
        Err(_) => return (0.0, true),
    };
    match precision_recall_at(&report.model, &fold.train, &fold.validation, &[cutoff]) {
        Ok(table) => (table.rows[0].f1, false),
        Err(_) => (0.0, true),
    }
}

/// Runs the grid over `folds`-fold cross-validation, scoring each point by
/// mean F1 at the selection cutoff and returning the best configuration
/// (ties break on grid order). Jobs run on `workers` threads; the reduction
/// is deterministic.
pub fn grid_search(
    ratings: &ImplicitRatings,
    grid: &Grid,
    base: &TrainConfig,
    seed: u64,
    workers: usize,
) -> Result<GridSearchResult> {
    grid.validate()?;
    base.validate()?;
    let workers = workers.max(1);

    let (selection, subsampled_to) =
        if grid.max_ratings > 0 && ratings.nnz() > grid.max_ratings {
            let (sub, _) = sequential_subsample(ratings, grid.max_ratings)?;
            let dims = (sub.num_users(), sub.num_items());
            (sub, Some(dims))
        } else {
            (ratings.clone(), None)
        };

    let folds = make_folds(&selection, grid.folds, grid.validation_per_user, seed)?;
    let points = enumerate_points(grid, base);
    if points.is_empty() {
        return Err(Error::invalid(
            "grid",
            "no valid loss/weight combination in the grid",
        ));
    }
    let fold_seeds: Vec<u64> = (0..grid.folds)
        .map(|f| rng::stream(seed, Tag::Fold, 1, f as u64).gen())
        .collect();

    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..grid.folds).map(move |f| (p, f)))
        .collect();
    let mut scores = vec![vec![0.0f64; grid.folds]; points.len()];
    let mut failures = vec![vec![false; grid.folds]; points.len()];

    std::thread::scope(|scope| {
        let (job_tx, job_rx) = mpsc::channel::<(usize, usize)>();
        let job_rx = Arc::new(Mutex::new(job_rx));
        let (out_tx, out_rx) = mpsc::channel::<(usize, usize, f64, bool)>();
        for _ in 0..workers {
            let job_rx = Arc::clone(&job_rx);
            let out_tx = out_tx.clone();
            let folds = &folds;
            let points = &points;
            let fold_seeds = &fold_seeds;
            scope.spawn(move || loop {
                let job = {
                    let guard = job_rx.lock().expect("job queue poisoned");
                    guard.recv()
                };
                match job {
                    Ok((p, f)) => {
                        let (score, failed) =
                            evaluate_fold(&folds[f], &points[p], base, fold_seeds[f], grid.cutoff);
                        if out_tx.send((p, f, score, failed)).is_err() {
                            break;
                        }
                    }
                    Err(_) => break,
                }
            });
        }
        drop(out_tx);
        for &job in &jobs {
            job_tx.send(job).expect("worker pool gone");
        }
        drop(job_tx);
        for _ in 0..jobs.len() {
            let (p, f, score, failed) = out_rx.recv().expect("worker pool gone");
            scores[p][f] = score;
            failures[p][f] = failed;
        }
    });

    let table: Vec<GridRow> = points
        .iter()
        .enumerate()
        .map(|(p, point)| {
            let fold_scores = scores[p].clone();
            let mean_f1 = fold_scores.iter().sum::<f64>() / grid.folds as f64;
            GridRow {
                point: point.clone(),
                fold_scores,
                mean_f1,
                failures: failures[p].iter().filter(|&&x| x).count(),
            }
        })
        .collect();

    let mut best_index = 0;
    for (idx, row) in table.iter().enumerate() {
        if row.mean_f1 > table[best_index].mean_f1 {
            best_index = idx;
        }
    }
    let mut best = base.clone();
    let bp = &table[best_index].point;
    best.alpha = bp.alpha;
    best.lambda = bp.lambda;
    best.k = bp.k;
    best.loss = bp.loss;
    best.weight = bp.weight;
    Ok(GridSearchResult {
        best,
        best_index,
        table,
        subsampled_to,
    })
}
