//! The ranking objective and its gradients.
//!
//! The data term averages, over users, the phi-weighted loss mass of each
//! relevant item against the user's irrelevant items, with item weights g
//! and g'; a Frobenius penalty on the factors is added on top. Gradients
//! come in three flavours: an exact double-sum reference, a cached
//! expectation fast path for the square loss with identity weighting, and
//! Monte-Carlo estimates driven by item/user sampling.

use rand::Rng;

use crate::distributions::ItemDistributions;
use crate::error::{Error, Result};
use crate::losses::{check_compatible, LossSpec, WeightKind, WeightSpec};
use crate::mat::{axpy, dot, dot_diff};
use crate::model::FactorModel;
use crate::ratings::ImplicitRatings;
use crate::rng::Stream;

/// Row access used by the gradient kernels. The parallel trainer implements
/// this over block-local row storage addressed by global ids.
pub(crate) trait Rows {
    fn k(&self) -> usize;
    fn u(&self, i: u32) -> &[f64];
    fn v(&self, j: u32) -> &[f64];
}

impl Rows for FactorModel {
    fn k(&self) -> usize {
        FactorModel::k(self)
    }

    #[inline]
    fn u(&self, i: u32) -> &[f64] {
        self.u_row(i as usize)
    }

    #[inline]
    fn v(&self, j: u32) -> &[f64] {
        self.v_row(j as usize)
    }
}

/// How inner item expectations are evaluated in the sampled objective.
#[derive(Debug, Clone, Copy)]
pub enum ItemDraws {
    /// Sum over the full relevant/irrelevant sets.
    Exhaustive,
    /// Monte-Carlo with this many draws from g and g'.
    Count(usize),
}

fn for_each_irrelevant(row: &[u32], n: usize, mut f: impl FnMut(u32)) {
    let mut next = 0usize;
    for j in 0..n as u32 {
        if next < row.len() && row[next] == j {
            next += 1;
            continue;
        }
        f(j);
    }
}

fn regulariser(model: &FactorModel, lambda: f64) -> f64 {
    0.5 * lambda
        * (model.sq_frobenius_u() / model.num_users() as f64
            + model.sq_frobenius_v() / model.num_items() as f64)
}

fn user_term_exact(
    model: &FactorModel,
    ratings: &ImplicitRatings,
    dists: &ItemDistributions,
    loss: &LossSpec,
    weight: &WeightSpec,
    i: usize,
    scores: &mut Vec<f64>,
) -> f64 {
    model.score_row_into(i, scores);
    let row = ratings.row(i);
    let n = ratings.num_items();
    let mut acc = 0.0;
    for &p in row {
        let sp = scores[p as usize];
        let mut mass = 0.0;
        for_each_irrelevant(row, n, |q| {
            mass += loss.value(sp - scores[q as usize]) * dists.g_prime(i, q);
        });
        acc += dists.g(i, p) * weight.phi(mass);
    }
    acc
}

/// Exact value of the objective (double sum over every pair).
pub fn objective_full(
    model: &FactorModel,
    ratings: &ImplicitRatings,
    dists: &ItemDistributions,
    loss: &LossSpec,
    weight: &WeightSpec,
    lambda: f64,
) -> Result<f64> {
    check_compatible(loss, weight)?;
    let m = ratings.num_users();
    let mut scores = Vec::new();
    let mut acc = 0.0;
    for i in 0..m {
        ratings.check_user(i)?;
        acc += user_term_exact(model, ratings, dists, loss, weight, i, &mut scores);
    }
    Ok(acc / m as f64 + regulariser(model, lambda))
}

/// Monte-Carlo estimate of the objective from `kappa_w` user draws and
/// `draws` item draws per expectation. Deterministic under the stream.
pub fn objective_sampled(
    model: &FactorModel,
    ratings: &ImplicitRatings,
    dists: &ItemDistributions,
    loss: &LossSpec,
    weight: &WeightSpec,
    lambda: f64,
    kappa_w: usize,
    draws: ItemDraws,
    rng: &mut Stream,
) -> Result<f64> {
    let users: Vec<u32> = (0..ratings.num_users() as u32).collect();
    objective_sampled_over(
        model, ratings, dists, loss, weight, lambda, kappa_w, draws, &users, rng,
    )
}

pub(crate) fn objective_sampled_over(
    model: &FactorModel,
    ratings: &ImplicitRatings,
    dists: &ItemDistributions,
    loss: &LossSpec,
    weight: &WeightSpec,
    lambda: f64,
    kappa_w: usize,
    draws: ItemDraws,
    users: &[u32],
    rng: &mut Stream,
) -> Result<f64> {
    check_compatible(loss, weight)?;
    if kappa_w == 0 {
        return Err(Error::invalid("kappa_w", "must be at least 1"));
    }
    if users.is_empty() {
        return Err(Error::invalid("users", "no users to sample"));
    }
    if let ItemDraws::Count(0) = draws {
        return Err(Error::invalid("kappa_y", "must be at least 1"));
    }
    let mut scores = Vec::new();
    let mut acc = 0.0;
    for _ in 0..kappa_w {
        let i = users[rng.gen_range(0..users.len())] as usize;
        ratings.check_user(i)?;
        match draws {
            ItemDraws::Exhaustive => {
                acc += user_term_exact(model, ratings, dists, loss, weight, i, &mut scores);
            }
            ItemDraws::Count(kappa_y) => {
                let mut ps = Vec::with_capacity(kappa_y);
                let mut qs = Vec::with_capacity(kappa_y);
                for _ in 0..kappa_y {
                    ps.push(dists.sample_relevant(ratings, i, rng)?);
                }
                for _ in 0..kappa_y {
                    qs.push(dists.sample_irrelevant(ratings, i, rng)?);
                }
                let u = model.u_row(i);
                let mut user_acc = 0.0;
                for &p in &ps {
                    let vp = model.v_row(p as usize);
                    let mut mass = 0.0;
                    for &q in &qs {
                        mass += loss.value(dot_diff(u, vp, model.v_row(q as usize)));
                    }
                    user_acc += weight.phi(mass / kappa_y as f64);
                }
                acc += user_acc / kappa_y as f64;
            }
        }
    }
    Ok(acc / kappa_w as f64 + regulariser(model, lambda))
}

/// Per-user expectations of item factors under g and g', used by the
/// square-loss fast path.
#[derive(Debug, Clone)]
pub struct UserExpectations {
    /// sum_p g(p) v_p
    pub v_dot: Vec<f64>,
    /// sum_q g'(q) v_q
    pub v_ddot: Vec<f64>,
    /// sum_p g(p) v_p (v_p' u_i)
    pub w_dot: Vec<f64>,
    /// sum_q g'(q) v_q (v_q' u_i)
    pub w_ddot: Vec<f64>,
}

fn compute_user_expectations(
    model: &FactorModel,
    ratings: &ImplicitRatings,
    dists: &ItemDistributions,
    i: usize,
) -> UserExpectations {
    let k = model.k();
    let u = model.u_row(i);
    let row = ratings.row(i);
    let n = ratings.num_items();
    let mut e = UserExpectations {
        v_dot: vec![0.0; k],
        v_ddot: vec![0.0; k],
        w_dot: vec![0.0; k],
        w_ddot: vec![0.0; k],
    };
    for &p in row {
        let vp = model.v_row(p as usize);
        let g = dists.g(i, p);
        axpy(g, vp, &mut e.v_dot);
        axpy(g * dot(vp, u), vp, &mut e.w_dot);
    }
    for_each_irrelevant(row, n, |q| {
        let vq = model.v_row(q as usize);
        let gp = dists.g_prime(i, q);
        axpy(gp, vq, &mut e.v_ddot);
        axpy(gp * dot(vq, u), vq, &mut e.w_ddot);
    });
    e
}

/// Lazily filled per-user expectation cache, invalidated whenever the model
/// generation moves.
#[derive(Debug)]
pub struct ExpectationCache {
    generation: u64,
    entries: Vec<Option<UserExpectations>>,
}

impl ExpectationCache {
    pub fn new(num_users: usize) -> Self {
        ExpectationCache {
            generation: u64::MAX,
            entries: vec![None; num_users],
        }
    }

    pub fn entry(
        &mut self,
        model: &FactorModel,
        ratings: &ImplicitRatings,
        dists: &ItemDistributions,
        i: usize,
    ) -> &UserExpectations {
        if self.generation != model.generation() {
            for e in self.entries.iter_mut() {
                *e = None;
            }
            self.generation = model.generation();
        }
        if self.entries[i].is_none() {
            self.entries[i] = Some(compute_user_expectations(model, ratings, dists, i));
        }
        self.entries[i].as_ref().unwrap()
    }
}

/// Eagerly computes the expectations of every user at the current model.
pub fn build_expectation_cache(
    model: &FactorModel,
    ratings: &ImplicitRatings,
    dists: &ItemDistributions,
) -> ExpectationCache {
    let mut cache = ExpectationCache::new(ratings.num_users());
    for i in 0..ratings.num_users() {
        cache.entry(model, ratings, dists, i);
    }
    cache
}

/// Monte-Carlo data gradient for one user row at per-user scale (no 1/m),
/// from caller-provided item samples. Shared by the library gradient and
/// the SGD sweeps.
pub(crate) fn sampled_grad_u_data<R: Rows>(
    rows: &R,
    i: u32,
    ps: &[u32],
    qs: &[u32],
    loss: &LossSpec,
    weight: &WeightSpec,
    out: &mut [f64],
) {
    let k = rows.k();
    debug_assert_eq!(out.len(), k);
    for x in out.iter_mut() {
        *x = 0.0;
    }
    if ps.is_empty() || qs.is_empty() {
        return;
    }
    let u = rows.u(i);
    let tanh = weight.kind() == WeightKind::Tanh;
    let mut inner = vec![0.0f64; k];
    for &p in ps {
        let vp = rows.v(p);
        for x in inner.iter_mut() {
            *x = 0.0;
        }
        let mut loss_mass = 0.0;
        for &q in qs {
            let vq = rows.v(q);
            let gamma = dot_diff(u, vp, vq);
            let h = loss.h(gamma);
            if tanh {
                loss_mass += loss.value(gamma);
            }
            for c in 0..k {
                inner[c] += h * (vq[c] - vp[c]);
            }
        }
        let factor = if tanh {
            weight.phi_factor(loss_mass / qs.len() as f64)
        } else {
            1.0
        };
        axpy(factor / qs.len() as f64, &inner, out);
    }
    let scale = loss.kernel_scale() * weight.grad_scale() / ps.len() as f64;
    for x in out.iter_mut() {
        *x *= scale;
    }
}

/// One user's contribution to the data gradient of item row `j`, at the
/// scale of `mass` (the caller passes the g/g' point mass it wants),
/// accumulated into `out`.
pub(crate) fn sampled_grad_v_user_term<R: Rows>(
    rows: &R,
    i: u32,
    j: u32,
    j_relevant: bool,
    mass: f64,
    ps: &[u32],
    qs: &[u32],
    loss: &LossSpec,
    weight: &WeightSpec,
    out: &mut [f64],
) {
    let u = rows.u(i);
    let tanh = weight.kind() == WeightKind::Tanh;
    let scale = loss.kernel_scale() * weight.grad_scale();
    if j_relevant {
        if qs.is_empty() {
            return;
        }
        let vj = rows.v(j);
        let mut hsum = 0.0;
        let mut loss_mass = 0.0;
        for &q in qs {
            let gamma = dot_diff(u, vj, rows.v(q));
            hsum += loss.h(gamma);
            if tanh {
                loss_mass += loss.value(gamma);
            }
        }
        let factor = if tanh {
            weight.phi_factor(loss_mass / qs.len() as f64)
        } else {
            1.0
        };
        let coeff = -scale * mass * factor * hsum / qs.len() as f64;
        axpy(coeff, u, out);
    } else {
        if ps.is_empty() {
            return;
        }
        let vj = rows.v(j);
        let mut acc = 0.0;
        for &p in ps {
            let vp = rows.v(p);
            let h = loss.h(dot_diff(u, vp, vj));
            let factor = if tanh {
                if qs.is_empty() {
                    return;
                }
                let mut loss_mass = 0.0;
                for &q in qs {
                    loss_mass += loss.value(dot_diff(u, vp, rows.v(q)));
                }
                weight.phi_factor(loss_mass / qs.len() as f64)
            } else {
                1.0
            };
            acc += h * factor;
        }
        let coeff = scale * mass * acc / ps.len() as f64;
        axpy(coeff, u, out);
    }
}

/// Exact data gradient for u_i at per-user scale (no 1/m, no regulariser):
/// the plain double sum over relevant and irrelevant items.
fn exact_grad_u_data(
    model: &FactorModel,
    ratings: &ImplicitRatings,
    dists: &ItemDistributions,
    loss: &LossSpec,
    weight: &WeightSpec,
    i: usize,
) -> Vec<f64> {
    let k = model.k();
    let u = model.u_row(i);
    let row = ratings.row(i);
    let n = ratings.num_items();
    let tanh = weight.kind() == WeightKind::Tanh;
    let mut out = vec![0.0f64; k];
    let mut inner = vec![0.0f64; k];
    for &p in row {
        let vp = model.v_row(p as usize);
        for x in inner.iter_mut() {
            *x = 0.0;
        }
        let mut loss_mass = 0.0;
        for_each_irrelevant(row, n, |q| {
            let vq = model.v_row(q as usize);
            let gp = dists.g_prime(i, q);
            let gamma = dot_diff(u, vp, vq);
            let h = loss.h(gamma);
            if tanh {
                loss_mass += gp * loss.value(gamma);
            }
            for c in 0..k {
                inner[c] += gp * h * (vq[c] - vp[c]);
            }
        });
        let factor = if tanh { weight.phi_factor(loss_mass) } else { 1.0 };
        axpy(dists.g(i, p) * factor, &inner, &mut out);
    }
    let scale = loss.kernel_scale() * weight.grad_scale();
    for x in out.iter_mut() {
        *x *= scale;
    }
    out
}

/// Exact double-sum gradient of the objective with respect to u_i. This is
/// the reference path; `grad_u` routes the square loss through the cache.
pub fn grad_u_reference(
    model: &FactorModel,
    i: usize,
    ratings: &ImplicitRatings,
    dists: &ItemDistributions,
    loss: &LossSpec,
    weight: &WeightSpec,
    lambda: f64,
) -> Result<Vec<f64>> {
    check_compatible(loss, weight)?;
    ratings.check_user(i)?;
    let m = ratings.num_users() as f64;
    let mut out = exact_grad_u_data(model, ratings, dists, loss, weight, i);
    for x in out.iter_mut() {
        *x /= m;
    }
    axpy(lambda / m, model.u_row(i), &mut out);
    Ok(out)
}

fn grad_u_square_cached(
    model: &FactorModel,
    i: usize,
    lambda: f64,
    m: f64,
    e: &UserExpectations,
) -> Vec<f64> {
    let k = model.k();
    let u = model.u_row(i);
    let vd_u = dot(&e.v_dot, u);
    let vdd_u = dot(&e.v_ddot, u);
    let mut out = vec![0.0f64; k];
    for c in 0..k {
        out[c] = (e.v_ddot[c] - e.v_dot[c] + e.w_ddot[c] + e.w_dot[c]
            - e.v_dot[c] * vdd_u
            - e.v_ddot[c] * vd_u)
            / m;
    }
    axpy(lambda / m, u, &mut out);
    out
}

/// Gradient of the objective with respect to u_i.
///
/// Without sampling, the square loss with identity weighting is required to
/// go through the expectation cache (linear instead of quadratic in the
/// item sets); other losses use the exact double sum. With sampling, a
/// Monte-Carlo estimate from `kappa_y` draws of g and g'.
pub fn grad_u(
    model: &FactorModel,
    i: usize,
    ratings: &ImplicitRatings,
    dists: &ItemDistributions,
    loss: &LossSpec,
    weight: &WeightSpec,
    lambda: f64,
    sampling: Option<(usize, &mut Stream)>,
) -> Result<Vec<f64>> {
    check_compatible(loss, weight)?;
    ratings.check_user(i)?;
    let m = ratings.num_users() as f64;
    match sampling {
        Some((kappa_y, rng)) => {
            if kappa_y == 0 {
                return Err(Error::invalid("kappa_y", "must be at least 1"));
            }
            let mut ps = Vec::with_capacity(kappa_y);
            let mut qs = Vec::with_capacity(kappa_y);
            for _ in 0..kappa_y {
                ps.push(dists.sample_relevant(ratings, i, rng)?);
            }
            for _ in 0..kappa_y {
                qs.push(dists.sample_irrelevant(ratings, i, rng)?);
            }
            let mut out = vec![0.0f64; model.k()];
            sampled_grad_u_data(model, i as u32, &ps, &qs, loss, weight, &mut out);
            for x in out.iter_mut() {
                *x /= m;
            }
            axpy(lambda / m, model.u_row(i), &mut out);
            Ok(out)
        }
        None => {
            if loss.is_square_identity_fast_path(weight) {
                let e = compute_user_expectations(model, ratings, dists, i);
                Ok(grad_u_square_cached(model, i, lambda, m, &e))
            } else {
                grad_u_reference(model, i, ratings, dists, loss, weight, lambda)
            }
        }
    }
}

/// Like `grad_u` exact mode, but reusing a persistent cache across calls at
/// the same model generation.
pub fn grad_u_cached(
    model: &FactorModel,
    i: usize,
    ratings: &ImplicitRatings,
    dists: &ItemDistributions,
    lambda: f64,
    cache: &mut ExpectationCache,
) -> Result<Vec<f64>> {
    ratings.check_user(i)?;
    let m = ratings.num_users() as f64;
    let e = cache.entry(model, ratings, dists, i);
    Ok(grad_u_square_cached(model, i, lambda, m, e))
}

/// Exact double-sum gradient of the objective with respect to v_j.
pub fn grad_v_reference(
    model: &FactorModel,
    j: usize,
    ratings: &ImplicitRatings,
    dists: &ItemDistributions,
    loss: &LossSpec,
    weight: &WeightSpec,
    lambda: f64,
) -> Result<Vec<f64>> {
    check_compatible(loss, weight)?;
    let m = ratings.num_users();
    let n = ratings.num_items();
    let k = model.k();
    let tanh = weight.kind() == WeightKind::Tanh;
    let jj = j as u32;
    let mut out = vec![0.0f64; k];
    for i in 0..m {
        ratings.check_user(i)?;
        let u = model.u_row(i);
        let row = ratings.row(i);
        let vj = model.v_row(j);
        if ratings.is_relevant(i, jj) {
            // relevant occurrence: -g(j) sum_q g'(q) h(gamma_ijq) phi'(A_ij)
            let mut hsum = 0.0;
            let mut loss_mass = 0.0;
            for_each_irrelevant(row, n, |q| {
                let gp = dists.g_prime(i, q);
                let gamma = dot_diff(u, vj, model.v_row(q as usize));
                hsum += gp * loss.h(gamma);
                if tanh {
                    loss_mass += gp * loss.value(gamma);
                }
            });
            let factor = if tanh { weight.phi_factor(loss_mass) } else { 1.0 };
            axpy(-dists.g(i, jj) * factor * hsum, u, &mut out);
        } else {
            // irrelevant occurrence: +g'(j) sum_p g(p) h(gamma_ipj) phi'(A_ip)
            let mut acc = 0.0;
            for &p in row {
                let vp = model.v_row(p as usize);
                let h = loss.h(dot_diff(u, vp, vj));
                let factor = if tanh {
                    let mut loss_mass = 0.0;
                    for_each_irrelevant(row, n, |q| {
                        loss_mass += dists.g_prime(i, q)
                            * loss.value(dot_diff(u, vp, model.v_row(q as usize)));
                    });
                    weight.phi_factor(loss_mass)
                } else {
                    1.0
                };
                acc += dists.g(i, p) * h * factor;
            }
            axpy(dists.g_prime(i, jj) * acc, u, &mut out);
        }
    }
    let scale = loss.kernel_scale() * weight.grad_scale() / m as f64;
    for x in out.iter_mut() {
        *x *= scale;
    }
    axpy(lambda / n as f64, model.v_row(j), &mut out);
    Ok(out)
}

fn grad_v_square_cached(
    model: &FactorModel,
    j: usize,
    ratings: &ImplicitRatings,
    dists: &ItemDistributions,
    lambda: f64,
    cache: &mut ExpectationCache,
) -> Result<Vec<f64>> {
    let m = ratings.num_users();
    let n = ratings.num_items();
    let k = model.k();
    let jj = j as u32;
    let mut out = vec![0.0f64; k];
    for i in 0..m {
        ratings.check_user(i)?;
        let e = cache.entry(model, ratings, dists, i);
        // entry() returns a borrow tied to cache, copy the two dots we need
        let u = model.u_row(i);
        let vj = model.v_row(j);
        let coeff = if ratings.is_relevant(i, jj) {
            let vdd_u = dot(&e.v_ddot, u);
            -dists.g(i, jj) * (1.0 + vdd_u - dot(vj, u))
        } else {
            let vd_u = dot(&e.v_dot, u);
            dists.g_prime(i, jj) * (1.0 + dot(vj, u) - vd_u)
        };
        axpy(coeff, u, &mut out);
    }
    for x in out.iter_mut() {
        *x /= m as f64;
    }
    axpy(lambda / n as f64, model.v_row(j), &mut out);
    Ok(out)
}

/// Gradient of the objective with respect to v_j; same dispatch rules as
/// `grad_u`.
pub fn grad_v(
    model: &FactorModel,
    j: usize,
    ratings: &ImplicitRatings,
    dists: &ItemDistributions,
    loss: &LossSpec,
    weight: &WeightSpec,
    lambda: f64,
    sampling: Option<(usize, usize, &mut Stream)>,
) -> Result<Vec<f64>> {
    check_compatible(loss, weight)?;
    let m = ratings.num_users();
    let n = ratings.num_items();
    match sampling {
        Some((kappa_w, kappa_y, rng)) => {
            if kappa_w == 0 || kappa_y == 0 {
                return Err(Error::invalid("kappa", "sample counts must be at least 1"));
            }
            let mut out = vec![0.0f64; model.k()];
            let tanh = weight.kind() == WeightKind::Tanh;
            let mut ps = Vec::with_capacity(kappa_y);
            let mut qs = Vec::with_capacity(kappa_y);
            for _ in 0..kappa_w {
                let i = rng.gen_range(0..m);
                ratings.check_user(i)?;
                let j_rel = ratings.is_relevant(i, j as u32);
                ps.clear();
                qs.clear();
                if !j_rel {
                    for _ in 0..kappa_y {
                        ps.push(dists.sample_relevant(ratings, i, rng)?);
                    }
                }
                if j_rel || tanh {
                    for _ in 0..kappa_y {
                        qs.push(dists.sample_irrelevant(ratings, i, rng)?);
                    }
                }
                let mass = if j_rel {
                    dists.g(i, j as u32)
                } else {
                    dists.g_prime(i, j as u32)
                };
                sampled_grad_v_user_term(
                    model, i as u32, j as u32, j_rel, mass, &ps, &qs, loss, weight, &mut out,
                );
            }
            for x in out.iter_mut() {
                *x /= kappa_w as f64;
            }
            axpy(lambda / n as f64, model.v_row(j), &mut out);
            Ok(out)
        }
        None => {
            if loss.is_square_identity_fast_path(weight) {
                let mut cache = ExpectationCache::new(m);
                grad_v_square_cached(model, j, ratings, dists, lambda, &mut cache)
            } else {
                grad_v_reference(model, j, ratings, dists, loss, weight, lambda)
            }
        }
    }
}

/// Like `grad_v` exact mode with a persistent cache.
pub fn grad_v_cached(
    model: &FactorModel,
    j: usize,
    ratings: &ImplicitRatings,
    dists: &ItemDistributions,
    lambda: f64,
    cache: &mut ExpectationCache,
) -> Result<Vec<f64>> {
    grad_v_square_cached(model, j, ratings, dists, lambda, cache)
}

impl LossSpec {
    fn is_square_identity_fast_path(&self, weight: &WeightSpec) -> bool {
        self.kind() == crate::losses::LossKind::Square && weight.kind() == WeightKind::Identity
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::build_distributions;
    use crate::losses::{LossSpec, WeightSpec};
    use crate::model::init_factors;
    use crate::rng::{stream, Tag};

    fn random_instance(
        m: usize,
        n: usize,
        k: usize,
        density: f64,
        seed: u64,
    ) -> (FactorModel, ImplicitRatings) {
        let mut rng = stream(seed, Tag::Generator, 0, 0);
        let rows: Vec<Vec<u32>> = (0..m)
            .map(|_| {
                loop {
                    let row: Vec<u32> = (0..n as u32)
                        .filter(|_| rng.gen::<f64>() < density)
                        .collect();
                    if !row.is_empty() && row.len() < n {
                        return row;
                    }
                }
            })
            .collect();
        let ratings = ImplicitRatings::from_rows(n, rows).unwrap();
        let model = init_factors(m, n, k, 0.4, seed ^ 0x5eed).unwrap();
        (model, ratings)
    }

    fn all_combos() -> Vec<(LossSpec, WeightSpec)> {
        let mut combos = Vec::new();
        let losses = [
            LossSpec::square_hinge(),
            LossSpec::square(),
            LossSpec::sigmoid(1.0).unwrap(),
            LossSpec::logistic(1.0).unwrap(),
        ];
        for loss in losses {
            combos.push((loss, WeightSpec::identity()));
            if loss.is_squared() {
                combos.push((loss, WeightSpec::tanh(1.5).unwrap()));
            }
        }
        combos
    }

    /// Independent scalar-loop oracle: no shared score buffers, no merge
    /// walk, plain nested loops over index sets.
    fn objective_oracle(
        model: &FactorModel,
        ratings: &ImplicitRatings,
        dists: &ItemDistributions,
        loss: &LossSpec,
        weight: &WeightSpec,
        lambda: f64,
    ) -> f64 {
        let m = ratings.num_users();
        let n = ratings.num_items();
        let mut total = 0.0;
        for i in 0..m {
            for &p in ratings.row(i) {
                let mut mass = 0.0;
                for q in 0..n as u32 {
                    if ratings.is_relevant(i, q) {
                        continue;
                    }
                    let gamma = model.score(i, p as usize) - model.score(i, q as usize);
                    mass += loss.value(gamma) * dists.g_prime(i, q);
                }
                total += dists.g(i, p) * weight.phi(mass);
            }
        }
        let mut reg = 0.0;
        for i in 0..m {
            for x in model.u_row(i) {
                reg += x * x / m as f64;
            }
        }
        for j in 0..n {
            for x in model.v_row(j) {
                reg += x * x / n as f64;
            }
        }
        total / m as f64 + 0.5 * lambda * reg
    }

    fn fd_grad_u(
        model: &FactorModel,
        i: usize,
        ratings: &ImplicitRatings,
        dists: &ItemDistributions,
        loss: &LossSpec,
        weight: &WeightSpec,
        lambda: f64,
    ) -> Vec<f64> {
        let step = 1e-5;
        let mut work = model.clone();
        let mut out = vec![0.0; model.k()];
        for c in 0..model.k() {
            let orig = model.u_row(i)[c];
            work.u_row_mut(i)[c] = orig + step;
            let plus = objective_full(&work, ratings, dists, loss, weight, lambda).unwrap();
            work.u_row_mut(i)[c] = orig - step;
            let minus = objective_full(&work, ratings, dists, loss, weight, lambda).unwrap();
            work.u_row_mut(i)[c] = orig;
            out[c] = (plus - minus) / (2.0 * step);
        }
        out
    }

    fn fd_grad_v(
        model: &FactorModel,
        j: usize,
        ratings: &ImplicitRatings,
        dists: &ItemDistributions,
        loss: &LossSpec,
        weight: &WeightSpec,
        lambda: f64,
    ) -> Vec<f64> {
        let step = 1e-5;
        let mut work = model.clone();
        let mut out = vec![0.0; model.k()];
        for c in 0..model.k() {
            let orig = model.v_row(j)[c];
            work.v_row_mut(j)[c] = orig + step;
            let plus = objective_full(&work, ratings, dists, loss, weight, lambda).unwrap();
            work.v_row_mut(j)[c] = orig - step;
            let minus = objective_full(&work, ratings, dists, loss, weight, lambda).unwrap();
            work.v_row_mut(j)[c] = orig;
            out[c] = (plus - minus) / (2.0 * step);
        }
        out
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        diff / norm.max(1e-8)
    }

    #[test]
    fn zero_model_closed_forms() {
        let ratings =
            ImplicitRatings::from_rows(5, vec![vec![0, 2], vec![1, 3, 4], vec![2]]).unwrap();
        let dists = build_distributions(&ratings, 0.0).unwrap();
        let model = init_factors(3, 5, 2, 0.0, 0).unwrap();
        let id = WeightSpec::identity();
        let sh = objective_full(&model, &ratings, &dists, &LossSpec::square_hinge(), &id, 0.0)
            .unwrap();
        assert!((sh - 0.5).abs() < 1e-15);
        let sg = objective_full(
            &model,
            &ratings,
            &dists,
            &LossSpec::sigmoid(1.0).unwrap(),
            &id,
            0.0,
        )
        .unwrap();
        assert!((sg + 0.5).abs() < 1e-15);
        let lg = objective_full(
            &model,
            &ratings,
            &dists,
            &LossSpec::logistic(1.0).unwrap(),
            &id,
            0.0,
        )
        .unwrap();
        assert!((lg - std::f64::consts::LN_2).abs() < 1e-14);
    }

    #[test]
    fn objective_matches_scalar_oracle() {
        for seed in [1u64, 2, 3] {
            let (model, ratings) = random_instance(6, 5, 2, 0.45, seed);
            for tau in [0.0, 1.0] {
                let dists = build_distributions(&ratings, tau).unwrap();
                for (loss, weight) in all_combos() {
                    let got =
                        objective_full(&model, &ratings, &dists, &loss, &weight, 0.3).unwrap();
                    let want = objective_oracle(&model, &ratings, &dists, &loss, &weight, 0.3);
                    assert!(
                        (got - want).abs() < 1e-12,
                        "{:?}/{:?} tau {tau}: {got} vs {want}",
                        loss.kind(),
                        weight.kind()
                    );
                }
            }
        }
    }

    #[test]
    fn objective_invariant_under_user_permutation() {
        let (mut model, ratings) = random_instance(7, 6, 3, 0.4, 9);
        let dists = build_distributions(&ratings, 1.0).unwrap();
        let loss = LossSpec::square_hinge();
        let weight = WeightSpec::identity();
        let before = objective_full(&model, &ratings, &dists, &loss, &weight, 0.2).unwrap();
        // permute users 1 and 4 in both the ratings and U
        let mut rows: Vec<Vec<u32>> = (0..7).map(|i| ratings.row(i).to_vec()).collect();
        rows.swap(1, 4);
        let permuted = ImplicitRatings::from_rows(6, rows).unwrap();
        let pd = build_distributions(&permuted, 1.0).unwrap();
        model.swap_users(1, 4);
        let after = objective_full(&model, &permuted, &pd, &loss, &weight, 0.2).unwrap();
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn degenerate_user_is_reported_by_name() {
        let ratings = ImplicitRatings::from_rows(3, vec![vec![0], vec![], vec![1]]).unwrap();
        let dists = build_distributions(&ratings, 0.0).unwrap();
        let model = init_factors(3, 3, 2, 0.1, 0).unwrap();
        let err = objective_full(
            &model,
            &ratings,
            &dists,
            &LossSpec::square(),
            &WeightSpec::identity(),
            0.0,
        )
        .unwrap_err();
        match err {
            Error::DegenerateUser { user, .. } => assert_eq!(user, 1),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn gradients_vanish_at_zero_model() {
        let ratings = ImplicitRatings::from_rows(4, vec![vec![0, 1], vec![2]]).unwrap();
        let dists = build_distributions(&ratings, 0.0).unwrap();
        let model = init_factors(2, 4, 3, 0.0, 0).unwrap();
        for (loss, weight) in all_combos() {
            let gu = grad_u(&model, 0, &ratings, &dists, &loss, &weight, 0.0, None).unwrap();
            assert!(gu.iter().all(|x| x.abs() < 1e-15));
            let gv = grad_v(&model, 1, &ratings, &dists, &loss, &weight, 0.0, None).unwrap();
            assert!(gv.iter().all(|x| x.abs() < 1e-15));
        }
    }

    #[test]
    fn only_regulariser_survives_when_items_are_zero() {
        let ratings = ImplicitRatings::from_rows(4, vec![vec![0, 1], vec![2]]).unwrap();
        let dists = build_distributions(&ratings, 0.0).unwrap();
        let mut model = init_factors(2, 4, 2, 0.0, 0).unwrap();
        model.u_row_mut(0).copy_from_slice(&[0.7, -1.3]);
        let lambda = 0.8;
        let gu = grad_u(
            &model,
            0,
            &ratings,
            &dists,
            &LossSpec::square_hinge(),
            &WeightSpec::identity(),
            lambda,
            None,
        )
        .unwrap();
        // V = 0 so every (v_q - v_p) vanishes
        assert!((gu[0] - lambda / 2.0 * 0.7).abs() < 1e-15);
        assert!((gu[1] - lambda / 2.0 * -1.3).abs() < 1e-15);
    }

    #[test]
    fn grad_v_is_pure_regulariser_when_users_are_zero() {
        let ratings = ImplicitRatings::from_rows(4, vec![vec![0, 1], vec![2]]).unwrap();
        let dists = build_distributions(&ratings, 0.0).unwrap();
        let mut model = init_factors(2, 4, 2, 0.0, 0).unwrap();
        model.v_row_mut(3).copy_from_slice(&[0.5, 0.25]);
        let lambda = 1.2;
        for (loss, weight) in all_combos() {
            let gv = grad_v(&model, 3, &ratings, &dists, &loss, &weight, lambda, None).unwrap();
            assert!((gv[0] - lambda / 4.0 * 0.5).abs() < 1e-15);
            assert!((gv[1] - lambda / 4.0 * 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for seed in [11u64, 12] {
            let (model, ratings) = random_instance(8, 7, 3, 0.4, seed);
            for tau in [0.0, 1.0] {
                let dists = build_distributions(&ratings, tau).unwrap();
                for (loss, weight) in all_combos() {
                    for i in [0usize, 3] {
                        let analytic =
                            grad_u(&model, i, &ratings, &dists, &loss, &weight, 0.3, None)
                                .unwrap();
                        let fd = fd_grad_u(&model, i, &ratings, &dists, &loss, &weight, 0.3);
                        let err = rel_err(&analytic, &fd);
                        assert!(
                            err < 1e-4,
                            "grad_u {:?}/{:?} tau {tau}: rel err {err}",
                            loss.kind(),
                            weight.kind()
                        );
                    }
                    for j in [0usize, 5] {
                        let analytic =
                            grad_v(&model, j, &ratings, &dists, &loss, &weight, 0.3, None)
                                .unwrap();
                        let fd = fd_grad_v(&model, j, &ratings, &dists, &loss, &weight, 0.3);
                        let err = rel_err(&analytic, &fd);
                        assert!(
                            err < 1e-4,
                            "grad_v {:?}/{:?} tau {tau}: rel err {err}",
                            loss.kind(),
                            weight.kind()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn square_reference_also_matches_finite_differences() {
        // pins the reference path for the square loss, which grad_u/grad_v
        // normally bypass in favour of the cache
        let (model, ratings) = random_instance(6, 6, 2, 0.4, 21);
        let dists = build_distributions(&ratings, 0.0).unwrap();
        let loss = LossSpec::square();
        let weight = WeightSpec::identity();
        let gu = grad_u_reference(&model, 2, &ratings, &dists, &loss, &weight, 0.1).unwrap();
        let fu = fd_grad_u(&model, 2, &ratings, &dists, &loss, &weight, 0.1);
        assert!(rel_err(&gu, &fu) < 1e-4);
        let gv = grad_v_reference(&model, 4, &ratings, &dists, &loss, &weight, 0.1).unwrap();
        let fv = fd_grad_v(&model, 4, &ratings, &dists, &loss, &weight, 0.1);
        assert!(rel_err(&gv, &fv) < 1e-4);
    }

    #[test]
    fn expectation_cache_matches_naive_sums() {
        let (model, ratings) = random_instance(5, 6, 3, 0.45, 31);
        for tau in [0.0, 1.0] {
            let dists = build_distributions(&ratings, tau).unwrap();
            let mut cache = ExpectationCache::new(5);
            for i in 0..5 {
                let e = cache.entry(&model, &ratings, &dists, i).clone();
                let mut v_dot = vec![0.0; 3];
                let mut v_ddot = vec![0.0; 3];
                let mut w_dot = vec![0.0; 3];
                let mut w_ddot = vec![0.0; 3];
                let u = model.u_row(i);
                for &p in ratings.row(i) {
                    let vp = model.v_row(p as usize);
                    for c in 0..3 {
                        v_dot[c] += dists.g(i, p) * vp[c];
                        w_dot[c] += dists.g(i, p) * vp[c] * dot(vp, u);
                    }
                }
                for q in 0..6u32 {
                    if ratings.is_relevant(i, q) {
                        continue;
                    }
                    let vq = model.v_row(q as usize);
                    for c in 0..3 {
                        v_ddot[c] += dists.g_prime(i, q) * vq[c];
                        w_ddot[c] += dists.g_prime(i, q) * vq[c] * dot(vq, u);
                    }
                }
                for c in 0..3 {
                    assert!((e.v_dot[c] - v_dot[c]).abs() < 1e-12);
                    assert!((e.v_ddot[c] - v_ddot[c]).abs() < 1e-12);
                    assert!((e.w_dot[c] - w_dot[c]).abs() < 1e-12);
                    assert!((e.w_ddot[c] - w_ddot[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn expectation_cache_uniform_two_items() {
        let ratings = ImplicitRatings::from_rows(4, vec![vec![1, 3]]).unwrap();
        let dists = build_distributions(&ratings, 0.0).unwrap();
        let model = init_factors(1, 4, 2, 0.3, 5).unwrap();
        let cache = build_expectation_cache(&model, &ratings, &dists);
        let mut cache = cache;
        let e = cache.entry(&model, &ratings, &dists, 0);
        for c in 0..2 {
            let expect = 0.5 * (model.v_row(1)[c] + model.v_row(3)[c]);
            assert!((e.v_dot[c] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn square_fast_path_equals_reference() {
        for seed in 40..48u64 {
            let (model, ratings) = random_instance(7, 8, 3, 0.4, seed);
            for tau in [0.0, 1.0] {
                let dists = build_distributions(&ratings, tau).unwrap();
                let loss = LossSpec::square();
                let weight = WeightSpec::identity();
                for i in 0..7 {
                    let fast =
                        grad_u(&model, i, &ratings, &dists, &loss, &weight, 0.2, None).unwrap();
                    let naive =
                        grad_u_reference(&model, i, &ratings, &dists, &loss, &weight, 0.2)
                            .unwrap();
                    for c in 0..3 {
                        assert!(
                            (fast[c] - naive[c]).abs() < 1e-10,
                            "u {i}[{c}]: {} vs {}",
                            fast[c],
                            naive[c]
                        );
                    }
                }
                for j in 0..8 {
                    let fast =
                        grad_v(&model, j, &ratings, &dists, &loss, &weight, 0.2, None).unwrap();
                    let naive =
                        grad_v_reference(&model, j, &ratings, &dists, &loss, &weight, 0.2)
                            .unwrap();
                    for c in 0..3 {
                        assert!(
                            (fast[c] - naive[c]).abs() < 1e-10,
                            "v {j}[{c}]: {} vs {}",
                            fast[c],
                            naive[c]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn cache_invalidates_on_model_mutation() {
        let (mut model, ratings) = random_instance(4, 5, 2, 0.5, 50);
        let dists = build_distributions(&ratings, 0.0).unwrap();
        let mut cache = ExpectationCache::new(4);
        let before = cache.entry(&model, &ratings, &dists, 0).v_dot.clone();
        // perturb an item that is in user 0's relevant set
        let target = ratings.row(0)[0] as usize;
        model.v_row_mut(target)[0] += 1.0;
        let after = cache.entry(&model, &ratings, &dists, 0).v_dot.clone();
        assert_ne!(before, after);
        let direct = compute_user_expectations(&model, &ratings, &dists, 0);
        assert_eq!(after, direct.v_dot);
    }

    #[test]
    fn sampled_objective_constant_integrand_is_exact() {
        let ratings = ImplicitRatings::from_rows(6, vec![vec![0, 1, 4], vec![2, 3]]).unwrap();
        let dists = build_distributions(&ratings, 0.0).unwrap();
        let model = init_factors(2, 6, 2, 0.0, 0).unwrap();
        let mut rng = stream(3, Tag::Eval, 0, 0);
        let got = objective_sampled(
            &model,
            &ratings,
            &dists,
            &LossSpec::square_hinge(),
            &WeightSpec::identity(),
            0.4,
            5,
            ItemDraws::Count(3),
            &mut rng,
        )
        .unwrap();
        assert!((got - 0.5).abs() < 1e-15, "reg is zero for a zero model: {got}");
    }

    #[test]
    fn sampled_objective_is_reproducible() {
        let (model, ratings) = random_instance(6, 7, 2, 0.4, 60);
        let dists = build_distributions(&ratings, 1.0).unwrap();
        let loss = LossSpec::logistic(1.0).unwrap();
        let weight = WeightSpec::identity();
        let mut a = stream(9, Tag::Eval, 0, 0);
        let mut b = stream(9, Tag::Eval, 0, 0);
        let va = objective_sampled(
            &model, &ratings, &dists, &loss, &weight, 0.1, 4, ItemDraws::Count(5), &mut a,
        )
        .unwrap();
        let vb = objective_sampled(
            &model, &ratings, &dists, &loss, &weight, 0.1, 4, ItemDraws::Count(5), &mut b,
        )
        .unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn sampled_objective_unbiased_against_full() {
        let (model, ratings) = random_instance(6, 7, 2, 0.4, 70);
        let dists = build_distributions(&ratings, 0.0).unwrap();
        let loss = LossSpec::square_hinge();
        let weight = WeightSpec::identity();
        let full = objective_full(&model, &ratings, &dists, &loss, &weight, 0.0).unwrap();
        let m = ratings.num_users();
        let seeds = 200;
        let mut values = Vec::with_capacity(seeds);
        for s in 0..seeds {
            let mut rng = stream(s as u64, Tag::Eval, 1, 0);
            values.push(
                objective_sampled(
                    &model,
                    &ratings,
                    &dists,
                    &loss,
                    &weight,
                    0.0,
                    m,
                    ItemDraws::Exhaustive,
                    &mut rng,
                )
                .unwrap(),
            );
        }
        let mean: f64 = values.iter().sum::<f64>() / seeds as f64;
        let var: f64 =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (seeds - 1) as f64;
        let se = (var / seeds as f64).sqrt();
        assert!(
            (mean - full).abs() < 2.0 * se.max(1e-12),
            "mean {mean} vs full {full} (se {se})"
        );
    }

    #[test]
    fn sampled_grad_v_unbiased_against_exact() {
        let (model, ratings) = random_instance(6, 6, 2, 0.45, 80);
        let dists = build_distributions(&ratings, 0.0).unwrap();
        let loss = LossSpec::square_hinge();
        let weight = WeightSpec::identity();
        let j = 2usize;
        let exact = grad_v(&model, j, &ratings, &dists, &loss, &weight, 0.0, None).unwrap();
        let seeds = 500;
        let mut mean = vec![0.0f64; 2];
        let mut sq = vec![0.0f64; 2];
        for s in 0..seeds {
            let mut rng = stream(s as u64, Tag::Eval, 2, 0);
            let g = grad_v(
                &model,
                j,
                &ratings,
                &dists,
                &loss,
                &weight,
                0.0,
                Some((6, 8, &mut rng)),
            )
            .unwrap();
            for c in 0..2 {
                mean[c] += g[c];
                sq[c] += g[c] * g[c];
            }
        }
        for c in 0..2 {
            mean[c] /= seeds as f64;
            let var = sq[c] / seeds as f64 - mean[c] * mean[c];
            let se = (var / seeds as f64).sqrt();
            assert!(
                (mean[c] - exact[c]).abs() < 3.0 * se.max(1e-12),
                "component {c}: {} vs {} (se {se})",
                mean[c],
                exact[c]
            );
        }
    }

    #[test]
    fn sampled_grad_u_unbiased_against_exact() {
        let (model, ratings) = random_instance(5, 6, 2, 0.45, 90);
        let dists = build_distributions(&ratings, 1.0).unwrap();
        let loss = LossSpec::logistic(1.5).unwrap();
        let weight = WeightSpec::identity();
        let i = 1usize;
        let exact = grad_u(&model, i, &ratings, &dists, &loss, &weight, 0.0, None).unwrap();
        let seeds = 500;
        let mut mean = vec![0.0f64; 2];
        let mut sq = vec![0.0f64; 2];
        for s in 0..seeds {
            let mut rng = stream(s as u64, Tag::Eval, 3, 0);
            let g = grad_u(
                &model,
                i,
                &ratings,
                &dists,
                &loss,
                &weight,
                0.0,
                Some((8, &mut rng)),
            )
            .unwrap();
            for c in 0..2 {
                mean[c] += g[c];
                sq[c] += g[c] * g[c];
            }
        }
        for c in 0..2 {
            mean[c] /= seeds as f64;
            let var = sq[c] / seeds as f64 - mean[c] * mean[c];
            let se = (var / seeds as f64).sqrt();
            assert!(
                (mean[c] - exact[c]).abs() < 3.0 * se.max(1e-12),
                "component {c}: {} vs {} (se {se})",
                mean[c],
                exact[c]
            );
        }
    }
}
