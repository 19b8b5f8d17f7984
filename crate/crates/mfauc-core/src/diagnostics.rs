//! Data-dependent generalisation diagnostics.
//!
//! The capacity term is the spectral norm of E - Ebar, where E stacks the
//! row-normalised relevant indicators of each user as columns and Ebar does
//! the same for the complement. The norm is computed matrix-free by power
//! iteration on (E - Ebar)' (E - Ebar); a dense Jacobi eigensolver over the
//! explicit matrix serves as the small-instance oracle.

use crate::error::{Error, Result};
use crate::ratings::ImplicitRatings;
use crate::rng::{self, Tag};

/// Inputs of the generalisation bound.
#[derive(Debug, Clone, Copy)]
pub struct BoundInputs {
    /// Lipschitz constant of the loss kernel.
    pub b: f64,
    /// Frobenius-norm radius of the user factors.
    pub r_u: f64,
    /// Frobenius-norm radius of the item factors.
    pub r_v: f64,
    /// Confidence level.
    pub delta: f64,
}

impl BoundInputs {
    fn validate(&self) -> Result<()> {
        if !(self.b > 0.0) || !(self.r_u > 0.0) || !(self.r_v > 0.0) {
            return Err(Error::invalid("bound", "B, R_U, R_V must be positive"));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::invalid("delta", "must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundReport {
    /// 2 B R_U R_V / m * ||E - Ebar||_2
    pub complexity_term: f64,
    /// sqrt(2 ln(1/delta) (n-1)^2 / m^2 * sum_i 1/(n_i nbar_i^2))
    pub deviation_term: f64,
    /// The variant with coefficient 1/2 under the root instead of 2; both
    /// appear in the source analysis in different statements.
    pub deviation_term_half: f64,
    pub total: f64,
}

fn check_rows(ratings: &ImplicitRatings) -> Result<()> {
    for i in 0..ratings.num_users() {
        ratings.check_user(i)?;
    }
    Ok(())
}

struct MarginOperator<'a> {
    ratings: &'a ImplicitRatings,
    /// 1/n_i + 1/nbar_i per user
    coeff: Vec<f64>,
    /// 1/nbar_i per user
    inv_bar: Vec<f64>,
}

impl<'a> MarginOperator<'a> {
    fn new(ratings: &'a ImplicitRatings) -> Self {
        let n = ratings.num_items() as f64;
        let coeff = (0..ratings.num_users())
            .map(|i| {
                let ni = ratings.row(i).len() as f64;
                1.0 / ni + 1.0 / (n - ni)
            })
            .collect();
        let inv_bar = (0..ratings.num_users())
            .map(|i| 1.0 / (n - ratings.row(i).len() as f64))
            .collect();
        MarginOperator {
            ratings,
            coeff,
            inv_bar,
        }
    }

    /// y = (E - Ebar) x, with x over users and y over items.
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let shift: f64 = x
            .iter()
            .zip(&self.inv_bar)
            .map(|(&xi, &ib)| xi * ib)
            .sum();
        for v in y.iter_mut() {
            *v = -shift;
        }
        for i in 0..self.ratings.num_users() {
            let w = x[i] * self.coeff[i];
            for &j in self.ratings.row(i) {
                y[j as usize] += w;
            }
        }
    }

    /// x = (E - Ebar)' y, with y over items and x over users.
    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        let total: f64 = y.iter().sum();
        for (i, v) in x.iter_mut().enumerate() {
            let mut s = 0.0;
            for &j in self.ratings.row(i) {
                s += y[j as usize];
            }
            *v = self.coeff[i] * s - self.inv_bar[i] * total;
        }
    }
}

/// Largest singular value of E - Ebar by power iteration on the Gram
/// operator, with a Rayleigh-quotient convergence test.
pub fn margin_matrix_norm(ratings: &ImplicitRatings) -> Result<f64> {
    margin_matrix_norm_tol(ratings, 1e-8)
}

pub fn margin_matrix_norm_tol(ratings: &ImplicitRatings, tol: f64) -> Result<f64> {
    check_rows(ratings)?;
    let m = ratings.num_users();
    let n = ratings.num_items();
    let op = MarginOperator::new(ratings);
    let mut rng = rng::stream(0x4d41_5247_494e, Tag::Generator, 0, 0);
    let mut x: Vec<f64> = (0..m).map(|_| rng::gaussian(&mut rng)).collect();
    let mut y = vec![0.0f64; n];
    let mut ax = vec![0.0f64; m];
    let mut lambda_prev = f64::INFINITY;
    let max_iters = 500_000;
    for _ in 0..max_iters {
        op.apply(&x, &mut y);
        op.apply_transpose(&y, &mut ax);
        let num: f64 = x.iter().zip(&ax).map(|(a, b)| a * b).sum();
        let den: f64 = x.iter().map(|a| a * a).sum();
        if !(den > 0.0) {
            // restart from a fresh direction
            for v in x.iter_mut() {
                *v = rng::gaussian(&mut rng);
            }
            continue;
        }
        let lambda = num / den;
        if (lambda - lambda_prev).abs() <= 1e-3 * tol * lambda.abs().max(f64::MIN_POSITIVE) {
            return Ok(lambda.max(0.0).sqrt());
        }
        lambda_prev = lambda;
        let norm: f64 = ax.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Ok(0.0);
        }
        for (xi, &a) in x.iter_mut().zip(&ax) {
            *xi = a / norm;
        }
    }
    Ok(lambda_prev.max(0.0).sqrt())
}

/// Dense oracle: explicit E - Ebar and a cyclic Jacobi eigensolver on the
/// smaller Gram matrix.
pub fn margin_matrix_norm_dense(ratings: &ImplicitRatings) -> Result<f64> {
    check_rows(ratings)?;
    let m = ratings.num_users();
    let n = ratings.num_items();
    // dense M with M[j][i] over items x users
    let nf = n as f64;
    let mut mm = vec![vec![0.0f64; m]; n];
    for i in 0..m {
        let ni = ratings.row(i).len() as f64;
        let pos = 1.0 / ni;
        let neg = 1.0 / (nf - ni);
        for j in 0..n as u32 {
            mm[j as usize][i] = if ratings.is_relevant(i, j) { pos } else { -neg };
        }
    }
    // gram over the smaller side
    let dim = m.min(n);
    let mut gram = vec![vec![0.0f64; dim]; dim];
    if m <= n {
        for a in 0..m {
            for b in a..m {
                let mut s = 0.0;
                for row in &mm {
                    s += row[a] * row[b];
                }
                gram[a][b] = s;
                gram[b][a] = s;
            }
        }
    } else {
        for a in 0..n {
            for b in a..n {
                let mut s = 0.0;
                for i in 0..m {
                    s += mm[a][i] * mm[b][i];
                }
                gram[a][b] = s;
                gram[b][a] = s;
            }
        }
    }
    Ok(jacobi_max_eigenvalue(&mut gram).max(0.0).sqrt())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; returns
/// (eigenvalues, eigenvectors as columns), sorted by descending eigenvalue.
pub(crate) fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut vecs = vec![vec![0.0f64; n]; n];
    for (i, row) in vecs.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale: f64 = a
        .iter()
        .flat_map(|row| row.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p][q] * a[p][q];
            }
        }
        if off.sqrt() <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p][q];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let app = a[p][p];
                let aqq = a[q][q];
                a[p][p] = app - t * apq;
                a[q][q] = aqq + t * apq;
                a[p][q] = 0.0;
                a[q][p] = 0.0;
                for r in 0..n {
                    if r != p && r != q {
                        let arp = a[r][p];
                        let arq = a[r][q];
                        a[r][p] = c * arp - s * arq;
                        a[p][r] = a[r][p];
                        a[r][q] = s * arp + c * arq;
                        a[q][r] = a[r][q];
                    }
                    let vrp = vecs[r][p];
                    let vrq = vecs[r][q];
                    vecs[r][p] = c * vrp - s * vrq;
                    vecs[r][q] = s * vrp + c * vrq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y][y].partial_cmp(&a[x][x]).expect("finite eigenvalues"));
    let values: Vec<f64> = order.iter().map(|&i| a[i][i]).collect();
    let vectors: Vec<Vec<f64>> = (0..n)
        .map(|r| order.iter().map(|&c| vecs[r][c]).collect())
        .collect();
    (values, vectors)
}

fn jacobi_max_eigenvalue(a: &mut [Vec<f64>]) -> f64 {
    let n = a.len();
    if n == 1 {
        return a[0][0];
    }
    let scale: f64 = a
        .iter()
        .flat_map(|row| row.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p][q] * a[p][q];
            }
        }
        if off.sqrt() <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p][q];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let app = a[p][p];
                let aqq = a[q][q];
                a[p][p] = app - t * apq;
                a[q][q] = aqq + t * apq;
                a[p][q] = 0.0;
                a[q][p] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[r][p];
                    let arq = a[r][q];
                    a[r][p] = c * arp - s * arq;
                    a[p][r] = a[r][p];
                    a[r][q] = s * arp + c * arq;
                    a[q][r] = a[r][q];
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).fold(f64::NEG_INFINITY, f64::max)
}

/// The empirical Rademacher bound terms and their sum.
pub fn rademacher_bound(ratings: &ImplicitRatings, inputs: &BoundInputs) -> Result<BoundReport> {
    inputs.validate()?;
    check_rows(ratings)?;
    let m = ratings.num_users() as f64;
    let n = ratings.num_items() as f64;
    let norm = margin_matrix_norm(ratings)?;
    let complexity_term = 2.0 * inputs.b * inputs.r_u * inputs.r_v / m * norm;
    let mut row_sum = 0.0;
    for i in 0..ratings.num_users() {
        let ni = ratings.row(i).len() as f64;
        let nbar = n - ni;
        row_sum += 1.0 / (ni * nbar * nbar);
    }
    let ln_term = (1.0 / inputs.delta).ln();
    let base = (n - 1.0) * (n - 1.0) / (m * m) * row_sum;
    let deviation_term = (2.0 * ln_term * base).sqrt();
    let deviation_term_half = (0.5 * ln_term * base).sqrt();
    Ok(BoundReport {
        complexity_term,
        deviation_term,
        deviation_term_half,
        total: complexity_term + deviation_term,
    })
}
