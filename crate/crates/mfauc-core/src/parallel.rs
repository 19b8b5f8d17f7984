//! Block-parallel trainer.
//!
//! Each epoch draws a fresh nnz-balanced partition of users into d1 row
//! blocks and items into d2 col blocks, then runs max(d1, d2) rounds; the
//! blocks of one round share no row block and no col block, so their
//! writable rows are disjoint and they can run on separate workers without
//! synchronisation. Within a block, updates see only the block's columns
//! (distributions renormalised over them); the per-epoch random
//! reassignment is what makes the epoch-averaged estimator cover all
//! user/item pairs. Sampling streams are derived per (epoch, block), so
//! results do not depend on worker interleaving.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::model::FactorModel;
use crate::objective::Rows;
use crate::optimizer::{
    check_divergence, finish_report, initial_model, prepare_env, trace_objective, Termination,
    TrainConfig, TrainMode, TrainReport,
};
use crate::ratings::ImplicitRatings;
use crate::rng::{self, shuffle, AliasTable, Stream, Tag};
use crate::sweep::{run_sweep, ScopeSampler, SweepParams, SweepRows, SweepStats};

/// Assignment of users and items to a d1 x d2 block grid.
#[derive(Debug, Clone)]
pub struct BlockPartition {
    pub d1: usize,
    pub d2: usize,
    pub row_assignment: Vec<u16>,
    pub col_assignment: Vec<u16>,
    /// Members of each row block, sorted ascending.
    pub row_groups: Vec<Vec<u32>>,
    /// Members of each col block, sorted ascending.
    pub col_groups: Vec<Vec<u32>>,
    /// Position of each user within its (sorted) row group.
    pub row_local: Vec<u32>,
    /// Position of each item within its (sorted) col group.
    pub col_local: Vec<u32>,
    /// Nonzeros per (row block, col block), row-major.
    pub block_nnz: Vec<u64>,
}

impl BlockPartition {
    pub fn nnz_of(&self, a: usize, b: usize) -> u64 {
        self.block_nnz[a * self.d2 + b]
    }
}

fn greedy_pack(weights: &[u64], groups: usize, rng: &mut Stream) -> Vec<u16> {
    let mut order: Vec<u32> = (0..weights.len() as u32).collect();
    shuffle(&mut order, rng);
    // heaviest first gives balanced loads; the shuffle breaks ties
    order.sort_by(|&x, &y| weights[y as usize].cmp(&weights[x as usize]));
    let mut load = vec![0u64; groups];
    let mut assignment = vec![0u16; weights.len()];
    for &idx in &order {
        let g = (0..groups).min_by_key(|&g| load[g]).unwrap();
        load[g] += weights[idx as usize];
        assignment[idx as usize] = g as u16;
    }
    assignment
}

/// Splits users into d1 groups and items into d2 groups, balancing the
/// nonzero counts greedily after a seeded shuffle.
pub fn make_partition(
    ratings: &ImplicitRatings,
    d1: usize,
    d2: usize,
    seed: u64,
) -> Result<BlockPartition> {
    let m = ratings.num_users();
    let n = ratings.num_items();
    if d1 == 0 || d1 > m {
        return Err(Error::invalid("d1", format!("must be in [1, {m}], got {d1}")));
    }
    if d2 == 0 || d2 > n {
        return Err(Error::invalid("d2", format!("must be in [1, {n}], got {d2}")));
    }
    let mut rng = rng::stream(seed, Tag::Partition, 0, 0);
    let row_weights: Vec<u64> = (0..m).map(|i| ratings.row(i).len() as u64).collect();
    let row_assignment = greedy_pack(&row_weights, d1, &mut rng);
    let col_weights: Vec<u64> = ratings
        .column_counts()
        .iter()
        .map(|&c| c as u64)
        .collect();
    let col_assignment = greedy_pack(&col_weights, d2, &mut rng);

    let mut row_groups = vec![Vec::new(); d1];
    for (i, &g) in row_assignment.iter().enumerate() {
        row_groups[g as usize].push(i as u32);
    }
    let mut col_groups = vec![Vec::new(); d2];
    for (j, &g) in col_assignment.iter().enumerate() {
        col_groups[g as usize].push(j as u32);
    }
    let mut row_local = vec![0u32; m];
    for group in &row_groups {
        for (pos, &i) in group.iter().enumerate() {
            row_local[i as usize] = pos as u32;
        }
    }
    let mut col_local = vec![0u32; n];
    for group in &col_groups {
        for (pos, &j) in group.iter().enumerate() {
            col_local[j as usize] = pos as u32;
        }
    }
    let mut block_nnz = vec![0u64; d1 * d2];
    for i in 0..m {
        let a = row_assignment[i] as usize;
        for &j in ratings.row(i) {
            let b = col_assignment[j as usize] as usize;
            block_nnz[a * d2 + b] += 1;
        }
    }
    Ok(BlockPartition {
        d1,
        d2,
        row_assignment,
        col_assignment,
        row_groups,
        col_groups,
        row_local,
        col_local,
        block_nnz,
    })
}

/// Conflict-free round schedule: max(d1, d2) rounds jointly covering every
/// (row block, col block) pair exactly once.
#[derive(Debug, Clone)]
pub struct RoundSchedule {
    pub rounds: Vec<Vec<(u16, u16)>>,
}

pub fn make_schedule(d1: usize, d2: usize, seed: u64) -> RoundSchedule {
    let maxd = d1.max(d2);
    let mut rng = rng::stream(seed, Tag::Schedule, 0, 0);
    let mut perm: Vec<u32> = (0..maxd as u32).collect();
    shuffle(&mut perm, &mut rng);
    let mut rounds = Vec::with_capacity(maxd);
    for r in 0..maxd {
        let mut round = Vec::new();
        for a in 0..d1 {
            let b = perm[(a + r) % maxd] as usize;
            if b < d2 {
                round.push((a as u16, b as u16));
            }
        }
        rounds.push(round);
    }
    RoundSchedule { rounds }
}

/// Runtime assertion that no two concurrently running blocks write the same
/// factor rows; each task stamps the rows it owns with its round token.
struct OwnershipLedger {
    u: Vec<AtomicU64>,
    v: Vec<AtomicU64>,
}

impl OwnershipLedger {
    fn new(m: usize, n: usize) -> Self {
        OwnershipLedger {
            u: (0..m).map(|_| AtomicU64::new(0)).collect(),
            v: (0..n).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    fn claim(&self, token: u64, users: &[u32], cols: &[u32]) {
        for &i in users {
            let prev = self.u[i as usize].swap(token, Ordering::SeqCst);
            assert!(
                prev != token,
                "ownership ledger: user row {i} claimed twice in round token {token}"
            );
        }
        for &j in cols {
            let prev = self.v[j as usize].swap(token, Ordering::SeqCst);
            assert!(
                prev != token,
                "ownership ledger: item row {j} claimed twice in round token {token}"
            );
        }
    }
}

/// Factor rows owned by one block task, addressed by global ids through
/// the partition's local-index maps.
struct BlockShard {
    k: usize,
    users: Vec<u32>,
    cols: Vec<u32>,
    row_local: Arc<Vec<u32>>,
    col_local: Arc<Vec<u32>>,
    u_data: Vec<f64>,
    u_avg: Vec<f64>,
    u_visits: Vec<u64>,
    v_data: Vec<f64>,
    v_avg: Vec<f64>,
    v_visits: Vec<u64>,
}

impl BlockShard {
    fn extract(
        model: &FactorModel,
        users: Vec<u32>,
        cols: Vec<u32>,
        row_local: Arc<Vec<u32>>,
        col_local: Arc<Vec<u32>>,
    ) -> Self {
        let k = model.k();
        let mut u_data = Vec::with_capacity(users.len() * k);
        let mut u_avg = Vec::with_capacity(users.len() * k);
        let mut u_visits = Vec::with_capacity(users.len());
        for &i in &users {
            u_data.extend_from_slice(model.u_row(i as usize));
            u_avg.extend_from_slice(model.u_avg_row(i as usize));
            u_visits.push(model.u_visits(i as usize));
        }
        let mut v_data = Vec::with_capacity(cols.len() * k);
        let mut v_avg = Vec::with_capacity(cols.len() * k);
        let mut v_visits = Vec::with_capacity(cols.len());
        for &j in &cols {
            v_data.extend_from_slice(model.v_row(j as usize));
            v_avg.extend_from_slice(model.v_avg_row(j as usize));
            v_visits.push(model.v_visits(j as usize));
        }
        BlockShard {
            k,
            users,
            cols,
            row_local,
            col_local,
            u_data,
            u_avg,
            u_visits,
            v_data,
            v_avg,
            v_visits,
        }
    }

    fn install(self, model: &mut FactorModel) {
        let k = self.k;
        for (local, &i) in self.users.iter().enumerate() {
            model.install_u_row(
                i as usize,
                &self.u_data[local * k..(local + 1) * k],
                &self.u_avg[local * k..(local + 1) * k],
                self.u_visits[local],
            );
        }
        for (local, &j) in self.cols.iter().enumerate() {
            model.install_v_row(
                j as usize,
                &self.v_data[local * k..(local + 1) * k],
                &self.v_avg[local * k..(local + 1) * k],
                self.v_visits[local],
            );
        }
    }

    #[inline]
    fn user_local(&self, i: u32) -> usize {
        let l = self.row_local[i as usize] as usize;
        debug_assert_eq!(self.users[l], i, "user row not owned by this block");
        l
    }

    #[inline]
    fn col_local(&self, j: u32) -> usize {
        let l = self.col_local[j as usize] as usize;
        debug_assert_eq!(self.cols[l], j, "item row not owned by this block");
        l
    }
}

impl Rows for BlockShard {
    fn k(&self) -> usize {
        self.k
    }

    #[inline]
    fn u(&self, i: u32) -> &[f64] {
        let l = self.user_local(i);
        &self.u_data[l * self.k..(l + 1) * self.k]
    }

    #[inline]
    fn v(&self, j: u32) -> &[f64] {
        let l = self.col_local(j);
        &self.v_data[l * self.k..(l + 1) * self.k]
    }
}

impl SweepRows for BlockShard {
    fn u_parts(&mut self, i: u32) -> (&mut [f64], &mut [f64], &mut u64) {
        let l = self.user_local(i);
        let k = self.k;
        (
            &mut self.u_data[l * k..(l + 1) * k],
            &mut self.u_avg[l * k..(l + 1) * k],
            &mut self.u_visits[l],
        )
    }

    fn v_parts(&mut self, j: u32) -> (&mut [f64], &mut [f64], &mut u64) {
        let l = self.col_local(j);
        let k = self.k;
        (
            &mut self.v_data[l * k..(l + 1) * k],
            &mut self.v_avg[l * k..(l + 1) * k],
            &mut self.v_visits[l],
        )
    }
}

struct BlockTask {
    shard: BlockShard,
    /// Users of the block eligible for updates (non-degenerate rows).
    eligible: Vec<u32>,
    epoch: u64,
    block_id: u64,
    round_token: u64,
    loss: LossSpec,
    averaging: bool,
    updates: usize,
    full_scope: bool,
    /// global item -> column block of the epoch's partition
    col_block: Arc<Vec<u16>>,
    block: u16,
    /// alias table over the block's irrelevant-side weights (tau > 0)
    irr_alias: Option<AliasTable>,
    irr_total: f64,
}

struct BlockOutcome {
    shard: BlockShard,
    stats: SweepStats,
}

fn run_block_task(
    task: BlockTask,
    ratings: &ImplicitRatings,
    env_dists: &crate::distributions::ItemDistributions,
    config: &TrainConfig,
    ledger: &OwnershipLedger,
) -> BlockOutcome {
    let mut task = task;
    ledger.claim(task.round_token, &task.shard.users, &task.shard.cols);
    let params = SweepParams {
        loss: task.loss,
        weight: config.weight,
        lambda: config.lambda,
        alpha: config.alpha,
        kappa_w: config.kappa_w,
        kappa_y: config.kappa_y,
        averaging: task.averaging,
        index_weighted_averaging: config.index_weighted_averaging,
    };
    let mut rng = rng::stream(config.seed, Tag::Sweep, task.epoch, task.block_id);
    let users = std::mem::take(&mut task.eligible);
    let cols = task.shard.cols.clone();
    let row_local = Arc::clone(&task.shard.row_local);
    let local_users = task.shard.users.len();
    let stats = if task.full_scope {
        let sampler = ScopeSampler::Full {
            ratings,
            dists: env_dists,
        };
        run_sweep(
            &mut task.shard,
            &sampler,
            &users,
            &cols,
            &params,
            task.updates,
            None,
            &mut rng,
        )
    } else {
        let sampler = ScopeSampler::block(
            ratings,
            env_dists,
            &cols,
            &task.col_block,
            task.block,
            task.irr_alias.as_ref(),
            task.irr_total,
            &row_local,
            local_users,
        );
        run_sweep(
            &mut task.shard,
            &sampler,
            &users,
            &cols,
            &params,
            task.updates,
            None,
            &mut rng,
        )
    };
    BlockOutcome {
        shard: task.shard,
        stats,
    }
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Trains with the block-parallel scheme on `workers` OS threads.
pub fn train_parallel(
    ratings: &ImplicitRatings,
    config: &TrainConfig,
    workers: usize,
    d1: usize,
    d2: usize,
) -> Result<TrainReport> {
    config.validate()?;
    if workers == 0 {
        return Err(Error::invalid("workers", "must be at least 1"));
    }
    if config.mode != TrainMode::Sgd {
        return Err(Error::invalid(
            "mode",
            "the parallel trainer only supports sgd mode",
        ));
    }
    let m = ratings.num_users();
    let n = ratings.num_items();
    if d1 == 0 || d1 > m {
        return Err(Error::invalid("d1", format!("must be in [1, {m}], got {d1}")));
    }
    if d2 == 0 || d2 > n {
        return Err(Error::invalid("d2", format!("must be in [1, {n}], got {d2}")));
    }
    let env = prepare_env(ratings, config.tau)?;
    let mut model = initial_model(ratings, config)?;
    let ledger = OwnershipLedger::new(m, n);
    let full_scope = d1 == 1 && d2 == 1;
    let updates_per_block = m.max(n).div_ceil(d1 * d2);

    let loss0 = config.loss_at(0)?;
    let mut prev = trace_objective(&model, ratings, &env, config, &loss0)?;
    check_divergence(&model, prev, 0)?;
    let mut trace = vec![(0usize, prev)];
    let mut iter_seconds = Vec::new();
    let mut termination = Termination::MaxIters;
    let mut stats = SweepStats::default();

    let outcome: Result<()> = std::thread::scope(|scope| {
        let (task_tx, task_rx) = mpsc::channel::<BlockTask>();
        let task_rx = Arc::new(Mutex::new(task_rx));
        let (out_tx, out_rx) = mpsc::channel::<BlockOutcome>();
        for _ in 0..workers {
            let task_rx = Arc::clone(&task_rx);
            let out_tx = out_tx.clone();
            let env_dists = &env.dists;
            let ledger = &ledger;
            let config_ref = &*config;
            scope.spawn(move || loop {
                let task = {
                    let guard = task_rx.lock().expect("task queue poisoned");
                    guard.recv()
                };
                match task {
                    Ok(task) => {
                        let outcome =
                            run_block_task(task, ratings, env_dists, config_ref, ledger);
                        if out_tx.send(outcome).is_err() {
                            break;
                        }
                    }
                    Err(_) => break,
                }
            });
        }
        drop(out_tx);

        for s in 1..=config.iters {
            let start = Instant::now();
            let loss = config.loss_at(s)?;
            let averaging = s > config.avg_start;
            let eseed = epoch_seed(config.seed, s as u64);
            let partition = make_partition(ratings, d1, d2, eseed)?;
            let schedule = make_schedule(d1, d2, eseed);
            let col_block = Arc::new(partition.col_assignment.clone());

            // per-epoch irrelevant-side alias tables, one per col block
            let col_alias: Vec<(Option<AliasTable>, f64)> = partition
                .col_groups
                .iter()
                .map(|cols| {
                    if env.dists.tau() == 0.0 {
                        (None, cols.len() as f64)
                    } else {
                        let weights: Vec<f64> =
                            cols.iter().map(|&j| env.dists.irr_weight(j)).collect();
                        let total: f64 = weights.iter().sum();
                        (AliasTable::new(&weights), total)
                    }
                })
                .collect();

            // eligible users of each row block
            let block_users: Vec<Vec<u32>> = partition
                .row_groups
                .iter()
                .map(|group| {
                    group
                        .iter()
                        .copied()
                        .filter(|&i| !ratings.is_degenerate(i as usize))
                        .collect()
                })
                .collect();

            let row_local = Arc::new(partition.row_local.clone());
            let col_local = Arc::new(partition.col_local.clone());
            for (r, round) in schedule.rounds.iter().enumerate() {
                let round_token = (s as u64) * (schedule.rounds.len() as u64 + 1) + r as u64 + 1;
                let mut sent = 0usize;
                for &(a, b) in round {
                    let eligible = block_users[a as usize].clone();
                    let cols = partition.col_groups[b as usize].clone();
                    if eligible.is_empty() || cols.is_empty() {
                        continue;
                    }
                    let shard = BlockShard::extract(
                        &model,
                        partition.row_groups[a as usize].clone(),
                        cols,
                        Arc::clone(&row_local),
                        Arc::clone(&col_local),
                    );
                    let (alias, total) = &col_alias[b as usize];
                    let task = BlockTask {
                        shard,
                        eligible,
                        epoch: s as u64,
                        block_id: a as u64 * d2 as u64 + b as u64,
                        round_token,
                        loss,
                        averaging,
                        updates: updates_per_block,
                        full_scope,
                        col_block: Arc::clone(&col_block),
                        block: b,
                        irr_alias: alias.clone(),
                        irr_total: *total,
                    };
                    task_tx.send(task).expect("worker pool gone");
                    sent += 1;
                }
                for _ in 0..sent {
                    let outcome = out_rx.recv().expect("worker pool gone");
                    stats.absorb(outcome.stats);
                    outcome.shard.install(&mut model);
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
        drop(task_tx);
        Ok(())
    });
    outcome?;

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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::WeightSpec;
    use rand::Rng;

    fn random_ratings(m: usize, n: usize, density: f64, seed: u64) -> ImplicitRatings {
        let mut rng = rng::stream(seed, Tag::Generator, 0, 0);
        let rows: Vec<Vec<u32>> = (0..m)
            .map(|_| loop {
                let row: Vec<u32> = (0..n as u32)
                    .filter(|_| rng.gen::<f64>() < density)
                    .collect();
                if !row.is_empty() && row.len() < n {
                    break row;
                }
            })
            .collect();
        ImplicitRatings::from_rows(n, rows).unwrap()
    }

    #[test]
    fn single_block_partition_holds_everything() {
        let r = random_ratings(6, 8, 0.4, 1);
        let p = make_partition(&r, 1, 1, 7).unwrap();
        assert_eq!(p.row_groups[0].len(), 6);
        assert_eq!(p.col_groups[0].len(), 8);
        assert_eq!(p.nnz_of(0, 0), r.nnz() as u64);
        assert_eq!(p.row_groups[0], (0..6u32).collect::<Vec<_>>());
    }

    #[test]
    fn greedy_packing_balances_the_hand_case() {
        // users with nnz 10, 10, 1, 1 into two groups -> 11 and 11
        let mut rows = Vec::new();
        rows.push((0..10).collect::<Vec<u32>>());
        rows.push((0..10).collect::<Vec<u32>>());
        rows.push(vec![0]);
        rows.push(vec![1]);
        let r = ImplicitRatings::from_rows(12, rows).unwrap();
        for seed in 0..20 {
            let p = make_partition(&r, 2, 1, seed).unwrap();
            let mut loads = [0u64; 2];
            for i in 0..4 {
                loads[p.row_assignment[i] as usize] += r.row(i).len() as u64;
            }
            assert_eq!(loads[0], 11);
            assert_eq!(loads[1], 11);
        }
    }

    #[test]
    fn partition_is_deterministic_and_in_bounds() {
        let r = random_ratings(10, 12, 0.3, 2);
        let a = make_partition(&r, 3, 4, 5).unwrap();
        let b = make_partition(&r, 3, 4, 5).unwrap();
        assert_eq!(a.row_assignment, b.row_assignment);
        assert_eq!(a.col_assignment, b.col_assignment);
        assert!(make_partition(&r, 0, 1, 5).is_err());
        assert!(make_partition(&r, 11, 1, 5).is_err());
        assert!(make_partition(&r, 1, 13, 5).is_err());
    }

    fn check_schedule_invariants(d1: usize, d2: usize, seed: u64) {
        let s = make_schedule(d1, d2, seed);
        let maxd = d1.max(d2);
        assert_eq!(s.rounds.len(), maxd);
        let mut seen = vec![false; d1 * d2];
        for round in &s.rounds {
            let mut rows_used = vec![false; d1];
            let mut cols_used = vec![false; d2];
            for &(a, b) in round {
                let (a, b) = (a as usize, b as usize);
                assert!(a < d1 && b < d2);
                assert!(!rows_used[a], "row block repeated within a round");
                assert!(!cols_used[b], "col block repeated within a round");
                rows_used[a] = true;
                cols_used[b] = true;
                assert!(!seen[a * d2 + b], "pair visited twice in epoch");
                seen[a * d2 + b] = true;
            }
        }
        assert!(seen.iter().all(|&x| x), "{d1}x{d2}: epoch must cover all pairs");
    }

    #[test]
    fn schedule_invariants_exhaustive_small_grids() {
        for d1 in 1..=6 {
            for d2 in 1..=6 {
                for seed in 0..3 {
                    check_schedule_invariants(d1, d2, seed);
                }
            }
        }
    }

    #[test]
    fn two_by_two_schedule_is_the_only_conflict_free_cover() {
        let s = make_schedule(2, 2, 9);
        assert_eq!(s.rounds.len(), 2);
        for round in &s.rounds {
            assert_eq!(round.len(), 2);
            let (a0, b0) = round[0];
            let (a1, b1) = round[1];
            assert_ne!(a0, a1);
            assert_ne!(b0, b1);
        }
    }

    #[test]
    fn degenerate_grid_matches_serial_trainer_exactly() {
        let r = random_ratings(9, 7, 0.4, 3);
        let mut cfg = TrainConfig::new(3, LossSpec::square_hinge(), WeightSpec::identity());
        cfg.iters = 6;
        cfg.avg_start = 3;
        cfg.seed = 11;
        let serial = crate::optimizer::train(&r, &cfg).unwrap();
        let par = train_parallel(&r, &cfg, 1, 1, 1).unwrap();
        assert_eq!(serial.trace, par.trace);
        for i in 0..9 {
            assert_eq!(serial.model.u_row(i), par.model.u_row(i));
        }
        for j in 0..7 {
            assert_eq!(serial.model.v_row(j), par.model.v_row(j));
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let r = random_ratings(12, 10, 0.35, 4);
        let mut cfg = TrainConfig::new(2, LossSpec::square_hinge(), WeightSpec::identity());
        cfg.iters = 5;
        cfg.avg_start = 2;
        cfg.seed = 21;
        let one = train_parallel(&r, &cfg, 1, 2, 2).unwrap();
        let four = train_parallel(&r, &cfg, 4, 2, 2).unwrap();
        assert_eq!(one.trace, four.trace);
        for i in 0..12 {
            assert_eq!(one.model.u_row(i), four.model.u_row(i));
        }
    }

    #[test]
    fn parallel_objective_tracks_serial_on_tau_weighted_data() {
        let r = random_ratings(16, 12, 0.3, 5);
        let mut cfg = TrainConfig::new(2, LossSpec::square_hinge(), WeightSpec::identity());
        cfg.iters = 25;
        cfg.avg_start = 15;
        cfg.seed = 31;
        cfg.tau = 1.0;
        let serial = crate::optimizer::train(&r, &cfg).unwrap();
        let par = train_parallel(&r, &cfg, 2, 2, 2).unwrap();
        let s = serial.trace.last().unwrap().1;
        let p = par.trace.last().unwrap().1;
        assert!(
            (s - p).abs() <= 0.25 * s.abs().max(0.05),
            "serial {s} vs parallel {p}"
        );
    }

    #[test]
    fn partition_balance_is_within_twice_the_mean() {
        let r = random_ratings(40, 30, 0.2, 6);
        let p = make_partition(&r, 4, 3, 13).unwrap();
        let mean = r.nnz() as f64 / 12.0;
        for a in 0..4 {
            for b in 0..3 {
                assert!(
                    (p.nnz_of(a, b) as f64) <= 2.0 * mean,
                    "block ({a},{b}) nnz {} vs mean {mean}",
                    p.nnz_of(a, b)
                );
            }
        }
    }
}
