//! Cross-module training pipeline checks on reduced synthetic data.

use mfauc_core::losses::{LossSpec, WeightSpec};
use mfauc_core::metrics::{empirical_auc, holdout_auc, precision_recall_at};
use mfauc_core::optimizer::{train, TrainConfig};
use mfauc_core::parallel::train_parallel;
use mfauc_core::ratings::split_holdout;
use mfauc_core::synthetic::{gen_synthetic1, Synthetic1Spec};

fn small_synthetic1(seed: u64) -> mfauc_core::ImplicitRatings {
    let spec = Synthetic1Spec {
        m: 120,
        n: 60,
        k: 4,
        quantile_t: 0.15,
        noise_per_row: 2.0,
        global_quantile: false,
        seed,
    };
    gen_synthetic1(&spec).unwrap().0
}

fn small_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(4, LossSpec::square_hinge(), WeightSpec::identity());
    cfg.alpha = 0.05;
    cfg.iters = 120;
    cfg.avg_start = 90;
    cfg.kappa_w = 15;
    cfg.kappa_y = 8;
    cfg.init_std = 0.1;
    cfg.seed = seed;
    cfg
}

#[test]
fn sgd_learns_to_rank_heldout_items() {
    let ratings = small_synthetic1(5);
    let split = split_holdout(&ratings, 3, 3, 99).unwrap();
    let report = train(&split.train, &small_config(7)).unwrap();

    let train_auc = empirical_auc(&report.model, &split.train, None).unwrap().value;
    assert!(train_auc > 0.8, "training AUC {train_auc}");

    let test_auc = holdout_auc(&report.model, &split.test, Some(&split.train))
        .unwrap()
        .value;
    assert!(test_auc > 0.7, "held-out AUC {test_auc}");

    let table = precision_recall_at(&report.model, &split.train, &split.test, &[1, 3]).unwrap();
    assert!(table.rows[0].precision > 0.3, "p@1 {}", table.rows[0].precision);
}

#[test]
fn averaging_stabilises_the_final_objective() {
    let ratings = small_synthetic1(6);
    let report = train(&ratings, &small_config(8)).unwrap();
    // soft property: the averaged solution should not be much worse than
    // the raw final iterate; log both
    println!(
        "raw objective {:.6}, averaged objective {:.6}",
        report.final_raw_objective, report.final_avg_objective
    );
    assert!(report.final_avg_objective <= report.final_raw_objective * 1.1 + 0.05);
}

#[test]
fn block_parallel_training_reaches_a_similar_objective() {
    let ratings = small_synthetic1(9);
    let mut cfg = small_config(11);
    cfg.iters = 80;
    cfg.avg_start = 60;
    cfg.lambda = 0.1;
    let serial = train(&ratings, &cfg).unwrap();
    let par = train_parallel(&ratings, &cfg, 2, 2, 2).unwrap();
    let s = serial.trace.last().unwrap().1;
    let p = par.trace.last().unwrap().1;
    assert!(
        (s - p).abs() <= 0.10 * s.abs().max(0.05),
        "serial {s} vs parallel {p}"
    );
}

#[test]
fn weighted_training_auc_exceeds_random_baseline() {
    let ratings = small_synthetic1(12);
    let dists = mfauc_core::distributions::build_distributions(&ratings, 1.0).unwrap();
    let mut cfg = small_config(13);
    cfg.tau = 1.0;
    let report = train(&ratings, &cfg).unwrap();
    let weighted = empirical_auc(&report.model, &ratings, Some(&dists)).unwrap().value;
    assert!(weighted > 0.75, "weighted AUC {weighted}");
}
