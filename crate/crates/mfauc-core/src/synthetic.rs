//! Synthetic benchmark generators.
//!
//! Variant 1 thresholds the scores of orthogonal-column ground-truth
//! factors at a per-row top quantile and sprinkles random extra relevant
//! items. Variant 2 samples user/item pairs from per-axis power laws and
//! accepts a pair when its ground-truth score is at least the global mean
//! score, until a target density is reached.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mat::{dot, norm2, Mat};
use crate::model::FactorModel;
use crate::ratings::ImplicitRatings;
use crate::rng::{self, gaussian, AliasTable, Tag};

#[derive(Debug, Clone)]
pub struct Synthetic1Spec {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// Fraction of items marked relevant by the score threshold.
    pub quantile_t: f64,
    /// Expected number of extra random relevant items per row.
    pub noise_per_row: f64,
    /// Threshold scores globally (counts per row average t*n) instead of
    /// per row (counts per row exactly t*n).
    pub global_quantile: bool,
    pub seed: u64,
}

impl Default for Synthetic1Spec {
    fn default() -> Self {
        Synthetic1Spec {
            m: 500,
            n: 200,
            k: 8,
            quantile_t: 0.1,
            noise_per_row: 5.0,
            global_quantile: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic2Spec {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// Power-law exponent of the user/item observation distributions.
    pub exponent: f64,
    /// Sampling stops once nnz / (m n) reaches this density.
    pub target_density: f64,
    pub seed: u64,
}

impl Default for Synthetic2Spec {
    fn default() -> Self {
        Synthetic2Spec {
            m: 600,
            n: 300,
            k: 8,
            exponent: 1.0,
            target_density: 0.1,
            seed: 0,
        }
    }
}

/// Ground truth emitted alongside a generated matrix, for diagnostics.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub model: FactorModel,
    /// Original user ids of the rows kept after compaction (variant 2 can
    /// drop users that never produced a relevant entry).
    pub kept_users: Vec<u32>,
    pub kept_items: Vec<u32>,
}

/// Random matrix with exactly orthogonal columns: QR of a Gaussian matrix
/// with the columns rescaled back to the Gaussian column norms.
pub fn orthogonal_factors(m: usize, k: usize, seed: u64) -> Result<Mat> {
    if k == 0 || m == 0 {
        return Err(Error::invalid("k", "dimensions must be positive"));
    }
    if k > m {
        return Err(Error::invalid(
            "k",
            format!("cannot build {k} orthogonal columns in dimension {m}"),
        ));
    }
    let mut rng = rng::stream(seed, Tag::Generator, 0, 0);
    // columns as vectors for Gram-Schmidt
    let mut cols: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..m).map(|_| gaussian(&mut rng)).collect())
        .collect();
    let norms: Vec<f64> = cols.iter().map(|c| norm2(c)).collect();
    // modified Gram-Schmidt with one re-orthogonalisation pass
    for j in 0..k {
        for _ in 0..2 {
            for prev in 0..j {
                let coeff = dot(&cols[j], &cols[prev]) / dot(&cols[prev], &cols[prev]);
                for r in 0..m {
                    cols[j][r] -= coeff * cols[prev][r];
                }
            }
        }
        let len = norm2(&cols[j]);
        if len < 1e-12 {
            return Err(Error::invalid("seed", "degenerate Gaussian draw"));
        }
        let scale = norms[j] / len;
        for r in 0..m {
            cols[j][r] *= scale;
        }
    }
    Ok(Mat::from_fn(m, k, |r, c| cols[c][r]))
}

/// Threshold index such that exactly round(t * n) scores lie strictly
/// above the returned value (generic scores, no ties).
fn row_quantile_threshold(scores: &[f64], t: f64) -> f64 {
    let n = scores.len();
    let top = ((t * n as f64).round() as usize).clamp(0, n);
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("scores must not be NaN"));
    if top == 0 {
        f64::INFINITY
    } else {
        sorted[n - top]
    }
}

pub fn gen_synthetic1(spec: &Synthetic1Spec) -> Result<(ImplicitRatings, GroundTruth)> {
    if !(spec.quantile_t > 0.0 && spec.quantile_t < 1.0) {
        return Err(Error::invalid("quantile_t", "must be in (0, 1)"));
    }
    if !(spec.noise_per_row >= 0.0) {
        return Err(Error::invalid("noise_per_row", "must be non-negative"));
    }
    let u = orthogonal_factors(spec.m, spec.k, spec.seed)?;
    let v = orthogonal_factors(spec.n, spec.k, spec.seed ^ 0x0feed_c0de)?;
    let mut rng = rng::stream(spec.seed, Tag::Generator, 1, 0);
    let noise_p = (spec.noise_per_row / spec.n as f64).min(1.0);
    let global_threshold = if spec.global_quantile {
        let mut all = Vec::with_capacity(spec.m * spec.n);
        for i in 0..spec.m {
            for j in 0..spec.n {
                all.push(dot(u.row(i), v.row(j)));
            }
        }
        Some(row_quantile_threshold(&all, spec.quantile_t))
    } else {
        None
    };
    let mut rows = Vec::with_capacity(spec.m);
    let mut scores = vec![0.0f64; spec.n];
    for i in 0..spec.m {
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(u.row(i), v.row(j));
        }
        let threshold =
            global_threshold.unwrap_or_else(|| row_quantile_threshold(&scores, spec.quantile_t));
        let mut mask: Vec<bool> = (0..spec.n).map(|j| scores[j] > threshold).collect();
        for flag in mask.iter_mut() {
            // Binomial(n, noise/n) extra relevant entries, duplicates ignored
            if rng.gen::<f64>() < noise_p {
                *flag = true;
            }
        }
        rows.push(
            (0..spec.n as u32)
                .filter(|&j| mask[j as usize])
                .collect(),
        );
    }
    let ratings = ImplicitRatings::from_rows(spec.n, rows)?;
    let truth = GroundTruth {
        model: FactorModel::from_factors(u, v),
        kept_users: (0..spec.m as u32).collect(),
        kept_items: (0..spec.n as u32).collect(),
    };
    Ok((ratings, truth))
}

const MAX_DRAWS: u64 = 100_000_000;

pub fn gen_synthetic2(spec: &Synthetic2Spec) -> Result<(ImplicitRatings, GroundTruth)> {
    if !(spec.target_density > 0.0 && spec.target_density < 1.0) {
        return Err(Error::invalid("target_density", "must be in (0, 1)"));
    }
    if !(spec.exponent >= 0.0) {
        return Err(Error::invalid("exponent", "must be non-negative"));
    }
    let u = orthogonal_factors(spec.m, spec.k, spec.seed)?;
    let v = orthogonal_factors(spec.n, spec.k, spec.seed ^ 0x0feed_c0de)?;
    // mean of the full score matrix is the acceptance threshold
    let mut mean_score = 0.0;
    for i in 0..spec.m {
        for j in 0..spec.n {
            mean_score += dot(u.row(i), v.row(j));
        }
    }
    mean_score /= (spec.m * spec.n) as f64;

    // zipf-like weights over ranked indices
    let user_weights: Vec<f64> = (0..spec.m)
        .map(|i| 1.0 / ((i + 1) as f64).powf(spec.exponent))
        .collect();
    let item_weights: Vec<f64> = (0..spec.n)
        .map(|j| 1.0 / ((j + 1) as f64).powf(spec.exponent))
        .collect();
    let user_table = AliasTable::new(&user_weights).expect("positive weights");
    let item_table = AliasTable::new(&item_weights).expect("positive weights");

    let mut rng = rng::stream(spec.seed, Tag::Generator, 2, 0);
    let mut relevant: Vec<Vec<u32>> = vec![Vec::new(); spec.m];
    let mut nnz = 0usize;
    let target = (spec.target_density * (spec.m * spec.n) as f64).ceil() as usize;
    let mut draws = 0u64;
    while nnz < target {
        draws += 1;
        if draws > MAX_DRAWS {
            return Err(Error::invalid(
                "target_density",
                format!("not reached after {MAX_DRAWS} draws"),
            ));
        }
        let i = user_table.sample(&mut rng);
        let j = item_table.sample(&mut rng) as u32;
        if dot(u.row(i), v.row(j as usize)) >= mean_score {
            if let Err(pos) = relevant[i].binary_search(&j) {
                relevant[i].insert(pos, j);
                nnz += 1;
            }
        }
    }

    // drop users/items that never received a relevant entry
    let full = ImplicitRatings::from_rows(spec.n, relevant)?;
    let (compact, report) = crate::ratings::filter_sparse(&full, 1, 1)?;
    let truth_u = Mat::from_fn(report.kept_users.len(), spec.k, |r, c| {
        u.row(report.kept_users[r] as usize)[c]
    });
    let truth_v = Mat::from_fn(report.kept_items.len(), spec.k, |r, c| {
        v.row(report.kept_items[r] as usize)[c]
    });
    let truth = GroundTruth {
        model: FactorModel::from_factors(truth_u, truth_v),
        kept_users: report.kept_users,
        kept_items: report.kept_items,
    };
    Ok((compact, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_columns_are_orthogonal() {
        let g = orthogonal_factors(50, 6, 3).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                if a == b {
                    continue;
                }
                let mut s = 0.0;
                for r in 0..50 {
                    s += g.row(r)[a] * g.row(r)[b];
                }
                assert!(s.abs() < 1e-10, "columns {a},{b}: {s}");
            }
        }
    }

    #[test]
    fn orthogonal_factors_rejects_k_above_m() {
        assert!(orthogonal_factors(3, 4, 0).is_err());
        assert!(orthogonal_factors(3, 3, 0).is_ok());
    }

    #[test]
    fn orthogonal_factors_single_column_is_nonzero() {
        let g = orthogonal_factors(10, 1, 1).unwrap();
        let norm: f64 = (0..10).map(|r| g.row(r)[0] * g.row(r)[0]).sum();
        assert!(norm > 0.0);
    }

    #[test]
    fn orthogonal_factors_deterministic() {
        let a = orthogonal_factors(20, 4, 9).unwrap();
        let b = orthogonal_factors(20, 4, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic1_defaults_match_expected_shape() {
        let spec = Synthetic1Spec {
            seed: 7,
            ..Default::default()
        };
        let (ratings, _) = gen_synthetic1(&spec).unwrap();
        assert_eq!(ratings.num_users(), 500);
        assert_eq!(ratings.num_items(), 200);
        let mean_nnz = ratings.nnz() as f64 / 500.0;
        // ~20 threshold entries plus ~5 noise entries per row
        assert!(
            (23.0..=27.0).contains(&mean_nnz),
            "mean row nnz {mean_nnz}"
        );
    }

    #[test]
    fn synthetic1_half_quantile_without_noise() {
        let spec = Synthetic1Spec {
            m: 40,
            n: 30,
            k: 4,
            quantile_t: 0.5,
            noise_per_row: 0.0,
            global_quantile: false,
            seed: 5,
        };
        let (ratings, _) = gen_synthetic1(&spec).unwrap();
        for i in 0..40 {
            let len = ratings.row(i).len() as i64;
            assert!((len - 15).abs() <= 1, "row {i} has {len}");
        }
    }

    #[test]
    fn synthetic1_threshold_entries_verifiable_from_truth() {
        let spec = Synthetic1Spec {
            m: 60,
            n: 40,
            k: 4,
            quantile_t: 0.2,
            noise_per_row: 3.0,
            global_quantile: false,
            seed: 11,
        };
        let (ratings, truth) = gen_synthetic1(&spec).unwrap();
        for i in 0..60 {
            let scores: Vec<f64> = (0..40)
                .map(|j| dot(truth.model.u_row(i), truth.model.v_row(j)))
                .collect();
            let threshold = row_quantile_threshold(&scores, 0.2);
            for j in 0..40u32 {
                if scores[j as usize] > threshold {
                    assert!(
                        ratings.is_relevant(i, j),
                        "threshold entry ({i},{j}) missing"
                    );
                }
            }
        }
    }

    #[test]
    fn synthetic1_is_deterministic() {
        let spec = Synthetic1Spec {
            m: 30,
            n: 20,
            k: 3,
            seed: 13,
            ..Default::default()
        };
        let (a, _) = gen_synthetic1(&spec).unwrap();
        let (b, _) = gen_synthetic1(&spec).unwrap();
        assert_eq!(a, b);
        let (c, _) = gen_synthetic1(&Synthetic1Spec {
            seed: 14,
            ..spec.clone()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic2_reaches_target_density() {
        let spec = Synthetic2Spec {
            m: 120,
            n: 60,
            k: 4,
            seed: 17,
            ..Default::default()
        };
        let (ratings, _) = gen_synthetic2(&spec).unwrap();
        let density = ratings.nnz() as f64
            / (ratings.num_users() * ratings.num_items()) as f64;
        assert!(density >= 0.1, "density {density}");
    }

    #[test]
    fn synthetic2_is_deterministic_and_truth_aligned() {
        let spec = Synthetic2Spec {
            m: 80,
            n: 40,
            k: 3,
            seed: 19,
            ..Default::default()
        };
        let (a, ta) = gen_synthetic2(&spec).unwrap();
        let (b, tb) = gen_synthetic2(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.kept_users, tb.kept_users);
        assert_eq!(a.num_users(), ta.kept_users.len());
        assert_eq!(a.num_items(), ta.kept_items.len());
    }

    #[test]
    fn synthetic2_item_frequencies_follow_a_power_law() {
        let spec = Synthetic2Spec {
            m: 300,
            n: 150,
            k: 4,
            seed: 23,
            ..Default::default()
        };
        let (ratings, _) = gen_synthetic2(&spec).unwrap();
        let mut counts: Vec<f64> = ratings
            .column_counts()
            .iter()
            .map(|&c| c as f64)
            .filter(|&c| c > 0.0)
            .collect();
        counts.sort_by(|a, b| b.partial_cmp(a).unwrap());
        // regress log(count) on log(rank) over the head of the curve
        let head = counts.len() / 2;
        let xs: Vec<f64> = (0..head).map(|r| ((r + 1) as f64).ln()).collect();
        let ys: Vec<f64> = counts[..head].iter().map(|&c| c.ln()).collect();
        let mean_x = xs.iter().sum::<f64>() / head as f64;
        let mean_y = ys.iter().sum::<f64>() / head as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for r in 0..head {
            num += (xs[r] - mean_x) * (ys[r] - mean_y);
            den += (xs[r] - mean_x) * (xs[r] - mean_x);
        }
        let slope = num / den;
        assert!(
            (-1.5..=-0.5).contains(&slope),
            "log-log item frequency slope {slope}"
        );
    }
}
