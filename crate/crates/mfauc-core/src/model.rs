//! User/item factor matrices with their running averages.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mat::{dot, Mat};
use crate::rng::{self, Tag};

#[derive(Debug, Clone)]
pub struct FactorModel {
    k: usize,
    u: Mat,
    v: Mat,
    u_avg: Mat,
    v_avg: Mat,
    u_visits: Vec<u64>,
    v_visits: Vec<u64>,
    /// Bumped on every mutation; lets caches detect staleness.
    generation: u64,
}

impl FactorModel {
    pub fn from_factors(u: Mat, v: Mat) -> Self {
        assert_eq!(u.ncols(), v.ncols());
        let k = u.ncols();
        let u_visits = vec![0; u.nrows()];
        let v_visits = vec![0; v.nrows()];
        FactorModel {
            k,
            u_avg: u.clone(),
            v_avg: v.clone(),
            u,
            v,
            u_visits,
            v_visits,
            generation: 0,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_users(&self) -> usize {
        self.u.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.v.nrows()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    #[inline]
    pub fn u_row(&self, i: usize) -> &[f64] {
        self.u.row(i)
    }

    #[inline]
    pub fn v_row(&self, j: usize) -> &[f64] {
        self.v.row(j)
    }

    pub fn u_avg_row(&self, i: usize) -> &[f64] {
        self.u_avg.row(i)
    }

    pub fn v_avg_row(&self, j: usize) -> &[f64] {
        self.v_avg.row(j)
    }

    pub fn u_visits(&self, i: usize) -> u64 {
        self.u_visits[i]
    }

    pub fn v_visits(&self, j: usize) -> u64 {
        self.v_visits[j]
    }

    /// Mutable row access; bumps the generation counter.
    pub fn u_row_mut(&mut self, i: usize) -> &mut [f64] {
        self.generation += 1;
        self.u.row_mut(i)
    }

    pub fn v_row_mut(&mut self, j: usize) -> &mut [f64] {
        self.generation += 1;
        self.v.row_mut(j)
    }

    pub(crate) fn u_parts_mut(&mut self, i: usize) -> (&mut [f64], &mut [f64], &mut u64) {
        self.generation += 1;
        (
            self.u.row_mut(i),
            self.u_avg.row_mut(i),
            &mut self.u_visits[i],
        )
    }

    pub(crate) fn v_parts_mut(&mut self, j: usize) -> (&mut [f64], &mut [f64], &mut u64) {
        self.generation += 1;
        (
            self.v.row_mut(j),
            self.v_avg.row_mut(j),
            &mut self.v_visits[j],
        )
    }

    pub(crate) fn install_u_row(&mut self, i: usize, row: &[f64], avg: &[f64], visits: u64) {
        self.generation += 1;
        self.u.row_mut(i).copy_from_slice(row);
        self.u_avg.row_mut(i).copy_from_slice(avg);
        self.u_visits[i] = visits;
    }

    pub(crate) fn install_v_row(&mut self, j: usize, row: &[f64], avg: &[f64], visits: u64) {
        self.generation += 1;
        self.v.row_mut(j).copy_from_slice(row);
        self.v_avg.row_mut(j).copy_from_slice(avg);
        self.v_visits[j] = visits;
    }

    #[inline]
    pub fn score(&self, i: usize, j: usize) -> f64 {
        dot(self.u.row(i), self.v.row(j))
    }

    /// Scores of every item for user `i`.
    pub fn score_row_into(&self, i: usize, out: &mut Vec<f64>) {
        out.clear();
        out.reserve(self.v.nrows());
        let u = self.u.row(i);
        for j in 0..self.v.nrows() {
            out.push(dot(u, self.v.row(j)));
        }
    }

    pub fn sq_frobenius_u(&self) -> f64 {
        self.u.sq_frobenius()
    }

    pub fn sq_frobenius_v(&self) -> f64 {
        self.v.sq_frobenius()
    }

    pub fn all_finite(&self) -> bool {
        self.u.all_finite() && self.v.all_finite()
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.u.max_abs().max(self.v.max_abs())
    }

    /// A model whose raw factors are the current averaged iterates.
    pub fn averaged(&self) -> FactorModel {
        FactorModel::from_factors(self.u_avg.clone(), self.v_avg.clone())
    }

    /// Swaps user rows `a` and `b` (together with averages and counters).
    pub fn swap_users(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        self.generation += 1;
        let k = self.k;
        for c in 0..k {
            let (ra, rb) = (self.u.row(a)[c], self.u.row(b)[c]);
            self.u.row_mut(a)[c] = rb;
            self.u.row_mut(b)[c] = ra;
            let (aa, ab) = (self.u_avg.row(a)[c], self.u_avg.row(b)[c]);
            self.u_avg.row_mut(a)[c] = ab;
            self.u_avg.row_mut(b)[c] = aa;
        }
        self.u_visits.swap(a, b);
    }
}

/// Gaussian-initialised factors; averages start equal to the raw factors.
pub fn init_factors(m: usize, n: usize, k: usize, init_std: f64, seed: u64) -> Result<FactorModel> {
    if k == 0 {
        return Err(Error::invalid("k", "latent dimension must be at least 1"));
    }
    if !(init_std >= 0.0) {
        return Err(Error::invalid("init_std", "must be non-negative"));
    }
    let mut rng = rng::stream(seed, Tag::FactorInit, 0, 0);
    let u = Mat::from_fn(m, k, |_, _| init_std * rng::gaussian(&mut rng));
    let v = Mat::from_fn(n, k, |_, _| init_std * rng::gaussian(&mut rng));
    Ok(FactorModel::from_factors(u, v))
}

/// Factor initialisation from a randomised truncated SVD of the rating
/// matrix: X ~ Q B with an orthonormal range basis Q found by subspace
/// iteration, then an exact decomposition of the small projected matrix.
/// The singular values are split evenly between the two factors.
pub fn init_factors_svd(
    ratings: &crate::ratings::ImplicitRatings,
    k: usize,
    seed: u64,
) -> Result<FactorModel> {
    let m = ratings.num_users();
    let n = ratings.num_items();
    if k == 0 || k > m.min(n) {
        return Err(Error::invalid(
            "k",
            format!("rank must be in [1, {}], got {k}", m.min(n)),
        ));
    }
    let l = (k + 4).min(m.min(n));
    let mut rng = rng::stream(seed, Tag::FactorInit, 1, 0);

    // y = X * omega
    let mut omega = vec![vec![0.0f64; l]; n];
    for row in omega.iter_mut() {
        for x in row.iter_mut() {
            *x = rng::gaussian(&mut rng);
        }
    }
    let mut y = vec![vec![0.0f64; l]; m];
    let apply = |input: &[Vec<f64>], out: &mut [Vec<f64>]| {
        for (i, out_row) in out.iter_mut().enumerate() {
            for v in out_row.iter_mut() {
                *v = 0.0;
            }
            for &j in ratings.row(i) {
                for c in 0..l {
                    out_row[c] += input[j as usize][c];
                }
            }
        }
    };
    let apply_t = |input: &[Vec<f64>], out: &mut [Vec<f64>]| {
        for row in out.iter_mut() {
            for v in row.iter_mut() {
                *v = 0.0;
            }
        }
        for i in 0..m {
            for &j in ratings.row(i) {
                for c in 0..l {
                    out[j as usize][c] += input[i][c];
                }
            }
        }
    };
    apply(&omega, &mut y);
    let mut z = vec![vec![0.0f64; l]; n];
    for _ in 0..4 {
        orthonormalise_columns(&mut y);
        apply_t(&y, &mut z);
        orthonormalise_columns(&mut z);
        apply(&z, &mut y);
    }
    orthonormalise_columns(&mut y);

    // b = Q' X, l x n
    let mut b = vec![vec![0.0f64; n]; l];
    for i in 0..m {
        for &j in ratings.row(i) {
            for (c, b_row) in b.iter_mut().enumerate() {
                b_row[j as usize] += y[i][c];
            }
        }
    }
    // small symmetric eigenproblem on B B'
    let mut gram = vec![vec![0.0f64; l]; l];
    for a in 0..l {
        for bb in a..l {
            let mut s = 0.0;
            for j in 0..n {
                s += b[a][j] * b[bb][j];
            }
            gram[a][bb] = s;
            gram[bb][a] = s;
        }
    }
    let (values, vectors) = crate::diagnostics::jacobi_eigen(gram);
    let mut u = Mat::zeros(m, k);
    let mut v = Mat::zeros(n, k);
    for c in 0..k {
        let sigma = values[c].max(0.0).sqrt();
        if sigma <= 0.0 {
            continue;
        }
        let root = sigma.sqrt();
        // left singular vector in the original space: Q w_c
        for i in 0..m {
            let mut s = 0.0;
            for (a, y_row) in y[i].iter().enumerate() {
                s += y_row * vectors[a][c];
            }
            u.row_mut(i)[c] = s * root;
        }
        // right singular vector: B' w_c / sigma
        for j in 0..n {
            let mut s = 0.0;
            for (a, b_row) in b.iter().enumerate() {
                s += b_row[j] * vectors[a][c];
            }
            v.row_mut(j)[c] = s / sigma * root;
        }
    }
    Ok(FactorModel::from_factors(u, v))
}

fn orthonormalise_columns(mat: &mut [Vec<f64>]) {
    let rows = mat.len();
    if rows == 0 {
        return;
    }
    let cols = mat[0].len();
    for c in 0..cols {
        for prev in 0..c {
            let mut coeff = 0.0;
            for row in mat.iter() {
                coeff += row[c] * row[prev];
            }
            for row in mat.iter_mut() {
                let p = row[prev];
                row[c] -= coeff * p;
            }
        }
        let mut norm = 0.0;
        for row in mat.iter() {
            norm += row[c] * row[c];
        }
        let norm = norm.sqrt();
        if norm > 1e-12 {
            for row in mat.iter_mut() {
                row[c] /= norm;
            }
        } else {
            for (r, row) in mat.iter_mut().enumerate() {
                row[c] = if r % rows == c % rows { 1e-6 } else { 0.0 };
            }
        }
    }
}

const FACTORS_MAGIC: &str = "MFAUC-FACTORS v1";

/// Writes `MFAUC-FACTORS v1` followed by `m n k` and the rows of U then V
/// with 17 significant digits (lossless for f64).
pub fn save_factors(model: &FactorModel, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{FACTORS_MAGIC}")?;
    writeln!(w, "{} {} {}", model.num_users(), model.num_items(), model.k())?;
    let write_row = |row: &[f64], w: &mut BufWriter<File>| -> Result<()> {
        let mut first = true;
        for x in row {
            if !first {
                write!(w, " ")?;
            }
            write!(w, "{x:.16e}")?;
            first = false;
        }
        writeln!(w)?;
        Ok(())
    };
    for i in 0..model.num_users() {
        write_row(model.u_row(i), &mut w)?;
    }
    for j in 0..model.num_items() {
        write_row(model.v_row(j), &mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_factors(path: impl AsRef<Path>) -> Result<FactorModel> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let magic = lines.next().transpose()?.unwrap_or_default();
    if magic.trim() != FACTORS_MAGIC {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected `{FACTORS_MAGIC}` header, got `{magic}`"),
        });
    }
    let dims = lines.next().transpose()?.ok_or(Error::Parse {
        line: 2,
        msg: "missing dimension line".into(),
    })?;
    let parts: Vec<usize> = dims
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            line: 2,
            msg: format!("bad dimensions: {e}"),
        })?;
    if parts.len() != 3 {
        return Err(Error::Parse {
            line: 2,
            msg: "expected `m n k`".into(),
        });
    }
    let (m, n, k) = (parts[0], parts[1], parts[2]);
    let mut read_mat = |rows: usize, start_line: usize| -> Result<Mat> {
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let line = lines.next().transpose()?.ok_or(Error::Parse {
                line: start_line + r,
                msg: "unexpected end of file".into(),
            })?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: start_line + r,
                    msg: format!("bad factor value: {e}"),
                })?;
            if row.len() != k {
                return Err(Error::Parse {
                    line: start_line + r,
                    msg: format!("expected {k} values, got {}", row.len()),
                });
            }
            data.push(row);
        }
        Ok(Mat::from_rows(data, k))
    };
    let u = read_mat(m, 3)?;
    let v = read_mat(n, 3 + m)?;
    Ok(FactorModel::from_factors(u, v))
}
