//! Per-user sampling distributions over relevant and irrelevant items,
//! shaped by the popularity exponent tau'.
//!
//! Relevant-item weights are p_hat(y)^tau' normalised over each user's
//! relevant set; irrelevant-item weights are (1 - p_hat(y))^tau' kept as
//! global item weights plus a per-user normaliser. The irrelevant side is
//! sampled from a global alias table with rejection of the user's relevant
//! items, so no per-user dense table is ever materialised.

use crate::error::{Error, Result};
use crate::ratings::ImplicitRatings;
use crate::rng::{AliasTable, Stream};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct ItemDistributions {
    tau: f64,
    /// p_hat(y): fraction of users that rated each item.
    item_popularity: Vec<f64>,
    /// p_hat(y)^tau'
    rel_weight: Vec<f64>,
    /// (1 - p_hat(y))^tau'
    irr_weight: Vec<f64>,
    /// Per-user normaliser over the relevant set.
    rel_norm: Vec<f64>,
    /// Per-user normaliser over the (virtual) irrelevant set.
    irr_norm: Vec<f64>,
    /// Per-user alias tables over the relevant set; index into `row(i)`.
    rel_alias: Vec<Option<AliasTable>>,
    /// Global alias table over `irr_weight`.
    irr_alias: Option<AliasTable>,
}

impl ItemDistributions {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn popularity(&self, j: u32) -> f64 {
        self.item_popularity[j as usize]
    }

    /// Unnormalised relevant-side weight of item `j`.
    #[inline]
    pub fn rel_weight(&self, j: u32) -> f64 {
        self.rel_weight[j as usize]
    }

    /// Unnormalised irrelevant-side weight of item `j`.
    #[inline]
    pub fn irr_weight(&self, j: u32) -> f64 {
        self.irr_weight[j as usize]
    }

    /// g(y_j) for user `i`; `j` must be relevant for `i`.
    #[inline]
    pub fn g(&self, i: usize, j: u32) -> f64 {
        self.rel_weight[j as usize] / self.rel_norm[i]
    }

    /// g'(y_j) for user `i`; `j` must be irrelevant for `i`.
    #[inline]
    pub fn g_prime(&self, i: usize, j: u32) -> f64 {
        self.irr_weight[j as usize] / self.irr_norm[i]
    }

    pub fn rel_norm(&self, i: usize) -> f64 {
        self.rel_norm[i]
    }

    pub fn irr_norm(&self, i: usize) -> f64 {
        self.irr_norm[i]
    }

    /// Draws one relevant item of user `i` proportional to g.
    #[inline]
    pub fn sample_relevant(
        &self,
        ratings: &ImplicitRatings,
        i: usize,
        rng: &mut Stream,
    ) -> Result<u32> {
        let row = ratings.row(i);
        if row.is_empty() {
            return Err(Error::DegenerateUser {
                user: i,
                kind: "relevant",
            });
        }
        match &self.rel_alias[i] {
            Some(table) => Ok(row[table.sample(rng)]),
            None => Ok(row[rng.gen_range(0..row.len())]),
        }
    }

    /// Draws one irrelevant item of user `i` proportional to g'.
    #[inline]
    pub fn sample_irrelevant(
        &self,
        ratings: &ImplicitRatings,
        i: usize,
        rng: &mut Stream,
    ) -> Result<u32> {
        let n = ratings.num_items();
        let row = ratings.row(i);
        if row.len() == n {
            return Err(Error::DegenerateUser {
                user: i,
                kind: "irrelevant",
            });
        }
        // rejection against the relevant set; expected O(1) at realistic
        // sparsity, with an exact fallback for pathological rows
        for _ in 0..64 {
            let j = match &self.irr_alias {
                Some(table) => table.sample(rng) as u32,
                None => rng.gen_range(0..n) as u32,
            };
            if !ratings.is_relevant(i, j) {
                return Ok(j);
            }
        }
        let candidates: Vec<u32> = (0..n as u32).filter(|&j| !ratings.is_relevant(i, j)).collect();
        let weights: Vec<f64> = candidates.iter().map(|&j| self.irr_weight(j)).collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            // only reachable when every weight underflows; fall back to uniform
            return Ok(candidates[rng.gen_range(0..candidates.len())]);
        }
        let mut target = rng.gen::<f64>() * total;
        for (idx, &w) in weights.iter().enumerate() {
            target -= w;
            if target <= 0.0 {
                return Ok(candidates[idx]);
            }
        }
        Ok(*candidates.last().unwrap())
    }
}

/// Builds the distributions from column frequencies: p_hat(y) is the
/// fraction of users who rated y, and weights are p_hat^tau' / q_hat^tau'.
pub fn build_distributions(ratings: &ImplicitRatings, tau: f64) -> Result<ItemDistributions> {
    if !(tau >= 0.0) {
        return Err(Error::invalid("tau", format!("requires tau >= 0, got {tau}")));
    }
    let m = ratings.num_users();
    let n = ratings.num_items();
    let counts = ratings.column_counts();
    let item_popularity: Vec<f64> = counts.iter().map(|&c| c as f64 / m as f64).collect();
    let rel_weight: Vec<f64> = item_popularity.iter().map(|&p| p.powf(tau)).collect();
    let irr_weight: Vec<f64> = item_popularity.iter().map(|&p| (1.0 - p).powf(tau)).collect();
    let irr_total: f64 = irr_weight.iter().sum();

    let mut rel_norm = vec![0.0f64; m];
    let mut irr_norm = vec![0.0f64; m];
    let mut rel_alias = Vec::with_capacity(m);
    let uniform = tau == 0.0;
    for i in 0..m {
        let row = ratings.row(i);
        let mut rel_sum = 0.0;
        let mut irr_in_row = 0.0;
        for &j in row {
            rel_sum += rel_weight[j as usize];
            irr_in_row += irr_weight[j as usize];
        }
        rel_norm[i] = rel_sum;
        irr_norm[i] = if uniform {
            (n - row.len()) as f64
        } else {
            irr_total - irr_in_row
        };
        if uniform || row.is_empty() {
            rel_alias.push(None);
        } else {
            let weights: Vec<f64> = row.iter().map(|&j| rel_weight[j as usize]).collect();
            rel_alias.push(AliasTable::new(&weights));
        }
    }
    let irr_alias = if uniform { None } else { AliasTable::new(&irr_weight) };
    Ok(ItemDistributions {
        tau,
        item_popularity,
        rel_weight,
        irr_weight,
        rel_norm,
        irr_norm,
        rel_alias,
        irr_alias,
    })
}

/// Draws `count_pos` relevant and `count_neg` irrelevant items for the user,
/// with replacement.
pub fn sample_items(
    dist: &ItemDistributions,
    ratings: &ImplicitRatings,
    user: usize,
    count_pos: usize,
    count_neg: usize,
    rng: &mut Stream,
) -> Result<(Vec<u32>, Vec<u32>)> {
    ratings.check_user(user)?;
    let mut pos = Vec::with_capacity(count_pos);
    for _ in 0..count_pos {
        pos.push(dist.sample_relevant(ratings, user, rng)?);
    }
    let mut neg = Vec::with_capacity(count_neg);
    for _ in 0..count_neg {
        neg.push(dist.sample_irrelevant(ratings, user, rng)?);
    }
    Ok((pos, neg))
}
