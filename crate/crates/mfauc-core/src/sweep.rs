//! The paired row-update sweep shared by the serial and block-parallel
//! trainers.
//!
//! A sweep performs `updates` steps; step t updates user row z_t and item
//! row z'_t (wrapping around the permutations) with Monte-Carlo gradients.
//! Row updates are preconditioned per side: the user-average 1/m and the
//! g/g' point-mass scales of the raw derivative are multiplied away by the
//! number of users/items in scope, which preserves stationary points while
//! keeping both factor matrices moving at comparable speed under one
//! learning rate. Item sampling can be restricted to a column block; the
//! restricted distributions are g and g' renormalised over the block.

use std::cell::RefCell;

use rand::Rng;

use crate::distributions::ItemDistributions;
use crate::losses::{LossSpec, WeightKind, WeightSpec};
use crate::objective::{sampled_grad_u_data, sampled_grad_v_user_term, Rows};
use crate::ratings::ImplicitRatings;
use crate::rng::{shuffle, AliasTable, Stream};

/// Mutable factor access for sweeps; implemented by the whole model and by
/// block-local shards.
pub(crate) trait SweepRows: Rows {
    /// (row, averaged row, visit counter) of user `i`.
    fn u_parts(&mut self, i: u32) -> (&mut [f64], &mut [f64], &mut u64);
    fn v_parts(&mut self, j: u32) -> (&mut [f64], &mut [f64], &mut u64);
}

impl SweepRows for crate::model::FactorModel {
    fn u_parts(&mut self, i: u32) -> (&mut [f64], &mut [f64], &mut u64) {
        self.u_parts_mut(i as usize)
    }

    fn v_parts(&mut self, j: u32) -> (&mut [f64], &mut [f64], &mut u64) {
        self.v_parts_mut(j as usize)
    }
}

/// Item scope for sampling: the full item set, or one column block.
pub(crate) enum ScopeSampler<'a> {
    Full {
        ratings: &'a ImplicitRatings,
        dists: &'a ItemDistributions,
    },
    Block {
        ratings: &'a ImplicitRatings,
        dists: &'a ItemDistributions,
        /// Sorted items of the column block.
        cols: &'a [u32],
        /// Global item -> column block assignment; membership tests must be
        /// O(1), the per-update sampling below runs allocation-free.
        col_block: &'a [u16],
        /// This column block's index.
        block: u16,
        /// Alias table over the block's irrelevant-side weights; None when
        /// uniform (tau 0).
        irr_alias: Option<&'a AliasTable>,
        /// Total irrelevant-side weight over the block.
        irr_total: f64,
        /// Per-user scope data, filled on first touch; indexed by
        /// `user_local`. Users recur many times per sweep, so the single
        /// pass over the row amortises away.
        cache: RefCell<Vec<Option<BlockUserScope>>>,
        /// Global user -> local cache index.
        user_local: &'a [u32],
    },
}

/// The in-block view of one user's relevant set.
#[derive(Clone)]
pub(crate) struct BlockUserScope {
    /// Relevant items inside the block, in row order.
    candidates: Vec<u32>,
    /// Sum of relevant-side weights over `candidates`.
    rel_total: f64,
    /// Sum of irrelevant-side weights over `candidates` (subtracted from
    /// the block total to normalise g').
    irr_in_rel: f64,
}

impl<'a> ScopeSampler<'a> {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn block(
        ratings: &'a ImplicitRatings,
        dists: &'a ItemDistributions,
        cols: &'a [u32],
        col_block: &'a [u16],
        block: u16,
        irr_alias: Option<&'a AliasTable>,
        irr_total: f64,
        user_local: &'a [u32],
        local_users: usize,
    ) -> Self {
        ScopeSampler::Block {
            ratings,
            dists,
            cols,
            col_block,
            block,
            irr_alias,
            irr_total,
            cache: RefCell::new(vec![None; local_users]),
            user_local,
        }
    }

    fn ratings(&self) -> &'a ImplicitRatings {
        match self {
            ScopeSampler::Full { ratings, .. } => ratings,
            ScopeSampler::Block { ratings, .. } => ratings,
        }
    }

    /// Runs `f` over the user's block scope, building it on first touch.
    fn with_scope<T>(
        ratings: &ImplicitRatings,
        dists: &ItemDistributions,
        col_block: &[u16],
        block: u16,
        cache: &RefCell<Vec<Option<BlockUserScope>>>,
        user_local: &[u32],
        i: u32,
        f: impl FnOnce(&BlockUserScope) -> T,
    ) -> T {
        let local = user_local[i as usize] as usize;
        let mut guard = cache.borrow_mut();
        if guard[local].is_none() {
            let mut candidates = Vec::new();
            let mut rel_total = 0.0;
            let mut irr_in_rel = 0.0;
            for &p in ratings.row(i as usize) {
                if col_block[p as usize] == block {
                    candidates.push(p);
                    rel_total += dists.rel_weight(p);
                    irr_in_rel += dists.irr_weight(p);
                }
            }
            guard[local] = Some(BlockUserScope {
                candidates,
                rel_total,
                irr_in_rel,
            });
        }
        f(guard[local].as_ref().expect("just filled"))
    }

    /// Draws `count` relevant items of user `i` (with replacement) into
    /// `out`. Returns false when the user has no relevant item in scope.
    fn sample_rel(
        &self,
        i: u32,
        count: usize,
        out: &mut Vec<u32>,
        rng: &mut Stream,
    ) -> bool {
        out.clear();
        match self {
            ScopeSampler::Full { ratings, dists } => {
                for _ in 0..count {
                    match dists.sample_relevant(ratings, i as usize, rng) {
                        Ok(j) => out.push(j),
                        Err(_) => return false,
                    }
                }
                true
            }
            ScopeSampler::Block {
                ratings,
                dists,
                col_block,
                block,
                cache,
                user_local,
                ..
            } => {
                Self::with_scope(
                    ratings, dists, col_block, *block, cache, user_local, i,
                    |scope| {
                        if scope.candidates.is_empty() {
                            return false;
                        }
                        if dists.tau() == 0.0 {
                            for _ in 0..count {
                                out.push(
                                    scope.candidates
                                        [rng.gen_range(0..scope.candidates.len())],
                                );
                            }
                            return true;
                        }
                        if !(scope.rel_total > 0.0) {
                            return false;
                        }
                        for _ in 0..count {
                            let mut target = rng.gen::<f64>() * scope.rel_total;
                            let mut picked = scope.candidates[scope.candidates.len() - 1];
                            for &p in &scope.candidates {
                                target -= dists.rel_weight(p);
                                if target <= 0.0 {
                                    picked = p;
                                    break;
                                }
                            }
                            out.push(picked);
                        }
                        true
                    },
                )
            }
        }
    }

    /// Draws `count` irrelevant items of user `i` into `out`. Returns false
    /// when everything in scope is relevant for the user.
    fn sample_irr(
        &self,
        i: u32,
        count: usize,
        out: &mut Vec<u32>,
        rng: &mut Stream,
    ) -> bool {
        out.clear();
        match self {
            ScopeSampler::Full { ratings, dists } => {
                for _ in 0..count {
                    match dists.sample_irrelevant(ratings, i as usize, rng) {
                        Ok(j) => out.push(j),
                        Err(_) => return false,
                    }
                }
                true
            }
            ScopeSampler::Block {
                ratings,
                dists,
                cols,
                col_block,
                block,
                irr_alias,
                cache,
                user_local,
                ..
            } => {
                let rel_in_scope = Self::with_scope(
                    ratings, dists, col_block, *block, cache, user_local, i,
                    |scope| scope.candidates.len(),
                );
                if rel_in_scope == cols.len() {
                    return false;
                }
                for _ in 0..count {
                    let mut drawn = None;
                    for _ in 0..64 {
                        let j = match irr_alias {
                            Some(table) => cols[table.sample(rng)],
                            None => cols[rng.gen_range(0..cols.len())],
                        };
                        if !ratings.is_relevant(i as usize, j) {
                            drawn = Some(j);
                            break;
                        }
                    }
                    let j = match drawn {
                        Some(j) => j,
                        // exact fallback over the block complement, reached
                        // only for near-full user rows
                        None => {
                            if dists.tau() == 0.0 {
                                let target = rng.gen_range(0..cols.len() - rel_in_scope);
                                let mut seen = 0usize;
                                let mut pick = None;
                                for &j in *cols {
                                    if !ratings.is_relevant(i as usize, j) {
                                        if seen == target {
                                            pick = Some(j);
                                            break;
                                        }
                                        seen += 1;
                                    }
                                }
                                pick.expect("complement is non-empty")
                            } else {
                                let mut total = 0.0;
                                for &j in *cols {
                                    if !ratings.is_relevant(i as usize, j) {
                                        total += dists.irr_weight(j);
                                    }
                                }
                                if !(total > 0.0) {
                                    return false;
                                }
                                let mut target = rng.gen::<f64>() * total;
                                let mut pick = None;
                                for &j in *cols {
                                    if !ratings.is_relevant(i as usize, j) {
                                        target -= dists.irr_weight(j);
                                        pick = Some(j);
                                        if target <= 0.0 {
                                            break;
                                        }
                                    }
                                }
                                pick.expect("positive total implies a pick")
                            }
                        }
                    };
                    out.push(j);
                }
                true
            }
        }
    }

    /// Preconditioned g point mass for a relevant item: |scope| * g(i, j)
    /// renormalised over the scope.
    fn scaled_rel_mass(&self, i: u32, j: u32) -> f64 {
        match self {
            ScopeSampler::Full { ratings, dists } => {
                ratings.num_items() as f64 * dists.g(i as usize, j)
            }
            ScopeSampler::Block {
                ratings,
                dists,
                cols,
                col_block,
                block,
                cache,
                user_local,
                ..
            } => {
                let norm = Self::with_scope(
                    ratings, dists, col_block, *block, cache, user_local, i,
                    |scope| scope.rel_total,
                );
                if !(norm > 0.0) {
                    return 0.0;
                }
                cols.len() as f64 * dists.rel_weight(j) / norm
            }
        }
    }

    /// Preconditioned g' point mass for an irrelevant item.
    fn scaled_irr_mass(&self, i: u32, j: u32) -> f64 {
        match self {
            ScopeSampler::Full { ratings, dists } => {
                ratings.num_items() as f64 * dists.g_prime(i as usize, j)
            }
            ScopeSampler::Block {
                ratings,
                dists,
                cols,
                col_block,
                block,
                irr_total,
                cache,
                user_local,
                ..
            } => {
                let rel_in_block = Self::with_scope(
                    ratings, dists, col_block, *block, cache, user_local, i,
                    |scope| scope.irr_in_rel,
                );
                let norm = irr_total - rel_in_block;
                if !(norm > 0.0) {
                    return 0.0;
                }
                cols.len() as f64 * dists.irr_weight(j) / norm
            }
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct SweepStats {
    pub u_updates: u64,
    pub v_updates: u64,
    /// u-side updates skipped because the user had no relevant or no
    /// irrelevant item in scope.
    pub skipped_updates: u64,
    /// users skipped while sampling the v-side estimate.
    pub skipped_user_samples: u64,
}

impl SweepStats {
    pub fn absorb(&mut self, other: SweepStats) {
        self.u_updates += other.u_updates;
        self.v_updates += other.v_updates;
        self.skipped_updates += other.skipped_updates;
        self.skipped_user_samples += other.skipped_user_samples;
    }
}

pub(crate) struct SweepParams {
    pub loss: LossSpec,
    pub weight: WeightSpec,
    pub lambda: f64,
    pub alpha: f64,
    pub kappa_w: usize,
    pub kappa_y: usize,
    pub averaging: bool,
    pub index_weighted_averaging: bool,
}

/// Applies the running-average recursion of averaged SGD. `visit_count`
/// is the per-row visit count, or the row index in index-weighted mode.
pub fn running_average_update(avg: &mut [f64], new_row: &[f64], visit_count: u64) {
    let c = visit_count as f64;
    let keep = c / (c + 1.0);
    let take = 1.0 / (c + 1.0);
    for (a, &x) in avg.iter_mut().zip(new_row) {
        *a = keep * *a + take * x;
    }
}

fn apply_step(
    row: &mut [f64],
    avg: &mut [f64],
    visits: &mut u64,
    grad: &[f64],
    row_index: u32,
    params: &SweepParams,
) {
    for (x, &g) in row.iter_mut().zip(grad) {
        *x -= params.alpha * (g + params.lambda * *x);
    }
    if params.averaging {
        let count = if params.index_weighted_averaging {
            row_index as u64
        } else {
            *visits
        };
        running_average_update(avg, row, count);
        *visits += 1;
    } else {
        avg.copy_from_slice(row);
    }
}

/// Runs `updates` paired row updates over `users` and `items`, drawing the
/// permutations (unless fixed ones are supplied) and all samples from `rng`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_sweep<F: SweepRows>(
    factors: &mut F,
    sampler: &ScopeSampler,
    users: &[u32],
    items: &[u32],
    params: &SweepParams,
    updates: usize,
    fixed_perms: Option<(&[u32], &[u32])>,
    rng: &mut Stream,
) -> SweepStats {
    let mut stats = SweepStats::default();
    if users.is_empty() || items.is_empty() || updates == 0 {
        return stats;
    }
    let (zu, zv): (Vec<u32>, Vec<u32>) = match fixed_perms {
        Some((u, v)) => (u.to_vec(), v.to_vec()),
        None => {
            let mut zu = users.to_vec();
            let mut zv = items.to_vec();
            shuffle(&mut zu, rng);
            shuffle(&mut zv, rng);
            (zu, zv)
        }
    };
    let k = factors.k();
    let tanh = params.weight.kind() == WeightKind::Tanh;
    let ratings = sampler.ratings();
    let mut ps: Vec<u32> = Vec::with_capacity(params.kappa_y);
    let mut qs: Vec<u32> = Vec::with_capacity(params.kappa_y);
    let mut grad = vec![0.0f64; k];
    let mut vacc = vec![0.0f64; k];

    for t in 0..updates {
        let i = zu[t % zu.len()];
        let j = zv[t % zv.len()];

        // user row step
        let ok = sampler.sample_rel(i, params.kappa_y, &mut ps, rng)
            && sampler.sample_irr(i, params.kappa_y, &mut qs, rng);
        if ok {
            sampled_grad_u_data(factors, i, &ps, &qs, &params.loss, &params.weight, &mut grad);
            let (row, avg, visits) = factors.u_parts(i);
            apply_step(row, avg, visits, &grad, i, params);
            stats.u_updates += 1;
        } else {
            stats.skipped_updates += 1;
        }

        // item row step from kappa_w sampled users
        for x in vacc.iter_mut() {
            *x = 0.0;
        }
        let mut contributing = 0usize;
        for _ in 0..params.kappa_w {
            let iu = users[rng.gen_range(0..users.len())];
            let j_rel = ratings.is_relevant(iu as usize, j);
            ps.clear();
            qs.clear();
            if !j_rel && !sampler.sample_rel(iu, params.kappa_y, &mut ps, rng) {
                stats.skipped_user_samples += 1;
                continue;
            }
            if (j_rel || tanh) && !sampler.sample_irr(iu, params.kappa_y, &mut qs, rng) {
                stats.skipped_user_samples += 1;
                continue;
            }
            let mass = if j_rel {
                sampler.scaled_rel_mass(iu, j)
            } else {
                sampler.scaled_irr_mass(iu, j)
            };
            sampled_grad_v_user_term(
                factors,
                iu,
                j,
                j_rel,
                mass,
                &ps,
                &qs,
                &params.loss,
                &params.weight,
                &mut vacc,
            );
            contributing += 1;
        }
        if contributing > 0 {
            for x in vacc.iter_mut() {
                *x /= contributing as f64;
            }
            let (row, avg, visits) = factors.v_parts(j);
            apply_step(row, avg, visits, &vacc, j, params);
            stats.v_updates += 1;
        } else {
            stats.skipped_updates += 1;
        }
    }
    stats
}
