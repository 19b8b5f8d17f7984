//! Ranking evaluation: empirical AUC (uniform and weighted), local AUC,
//! ROC curves, and precision/recall at cutoffs.
//!
//! Ties always contribute one half. The uniform AUC path counts wins and
//! ties in integers so it reproduces exhaustive pair counting exactly.

use crate::distributions::ItemDistributions;
use crate::error::{Error, Result};
use crate::model::FactorModel;
use crate::ratings::ImplicitRatings;

/// Anything that can score all items for a user.
pub trait Scorer {
    fn num_users(&self) -> usize;
    fn num_items(&self) -> usize;
    fn score_user_into(&self, i: usize, out: &mut Vec<f64>);
}

impl Scorer for FactorModel {
    fn num_users(&self) -> usize {
        FactorModel::num_users(self)
    }

    fn num_items(&self) -> usize {
        FactorModel::num_items(self)
    }

    fn score_user_into(&self, i: usize, out: &mut Vec<f64>) {
        self.score_row_into(i, out);
    }
}

/// Fixed score rows, mainly for tests and precomputed score matrices.
pub struct DenseScores(pub Vec<Vec<f64>>);

impl Scorer for DenseScores {
    fn num_users(&self) -> usize {
        self.0.len()
    }

    fn num_items(&self) -> usize {
        self.0.first().map_or(0, |r| r.len())
    }

    fn score_user_into(&self, i: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.0[i]);
    }
}

/// A metric averaged over users, with the number of users that entered the
/// average and the number skipped as degenerate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserAveraged {
    pub value: f64,
    pub users: usize,
    pub skipped: usize,
}

/// Exact win/tie counts of relevant-over-irrelevant score pairs.
fn count_pairs(scores: &[f64], relevant: &[u32]) -> (u64, u64) {
    // sort ascending and sweep equal-score groups
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[a as usize]
            .partial_cmp(&scores[b as usize])
            .expect("scores must not be NaN")
    });
    let is_rel = |j: u32| relevant.binary_search(&j).is_ok();
    let mut wins = 0u64;
    let mut ties = 0u64;
    let mut irr_below = 0u64;
    let mut idx = 0usize;
    while idx < order.len() {
        let mut end = idx + 1;
        while end < order.len()
            && scores[order[end] as usize] == scores[order[idx] as usize]
        {
            end += 1;
        }
        let mut rel_in = 0u64;
        let mut irr_in = 0u64;
        for &j in &order[idx..end] {
            if is_rel(j) {
                rel_in += 1;
            } else {
                irr_in += 1;
            }
        }
        wins += rel_in * irr_below;
        ties += rel_in * irr_in;
        irr_below += irr_in;
        idx = end;
    }
    (wins, ties)
}

fn uniform_user_auc(scores: &[f64], relevant: &[u32]) -> f64 {
    let p = relevant.len() as u64;
    let n = scores.len() as u64 - p;
    let (wins, ties) = count_pairs(scores, relevant);
    (wins as f64 + 0.5 * ties as f64) / (p * n) as f64
}

fn weighted_user_auc(
    scores: &[f64],
    ratings: &ImplicitRatings,
    dists: &ItemDistributions,
    i: usize,
) -> f64 {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[a as usize]
            .partial_cmp(&scores[b as usize])
            .expect("scores must not be NaN")
    });
    let mut auc = 0.0;
    let mut irr_mass_below = 0.0;
    let mut idx = 0usize;
    while idx < order.len() {
        let mut end = idx + 1;
        while end < order.len()
            && scores[order[end] as usize] == scores[order[idx] as usize]
        {
            end += 1;
        }
        let mut rel_mass_in = 0.0;
        let mut irr_mass_in = 0.0;
        for &j in &order[idx..end] {
            if ratings.is_relevant(i, j) {
                rel_mass_in += dists.g(i, j);
            } else {
                irr_mass_in += dists.g_prime(i, j);
            }
        }
        auc += rel_mass_in * (irr_mass_below + 0.5 * irr_mass_in);
        irr_mass_below += irr_mass_in;
        idx = end;
    }
    auc
}

/// Mean per-user AUC over the full item set of `ratings`. With `dists`,
/// pairs are weighted by g and g'; without, every pair counts equally.
/// Degenerate users are skipped.
pub fn empirical_auc(
    scorer: &impl Scorer,
    ratings: &ImplicitRatings,
    dists: Option<&ItemDistributions>,
) -> Result<UserAveraged> {
    let mut scores = Vec::new();
    let mut total = 0.0;
    let mut users = 0usize;
    let mut skipped = 0usize;
    for i in 0..ratings.num_users() {
        if ratings.is_degenerate(i) {
            skipped += 1;
            continue;
        }
        scorer.score_user_into(i, &mut scores);
        total += match dists {
            Some(d) => weighted_user_auc(&scores, ratings, d, i),
            None => uniform_user_auc(&scores, ratings.row(i)),
        };
        users += 1;
    }
    if users == 0 {
        return Err(Error::UndefinedMetric(
            "AUC: every user is degenerate".into(),
        ));
    }
    Ok(UserAveraged {
        value: total / users as f64,
        users,
        skipped,
    })
}

/// AUC over positives restricted to evaluation sets other than the training
/// rows: per user, `positives[i]` are the relevant items and everything
/// else in the candidate set counts as irrelevant. Items in
/// `mask` (typically the training matrix) are excluded from the candidates.
pub fn holdout_auc(
    scorer: &impl Scorer,
    positives: &[Vec<u32>],
    mask: Option<&ImplicitRatings>,
) -> Result<UserAveraged> {
    let n = scorer.num_items();
    let mut scores = Vec::new();
    let mut total = 0.0;
    let mut users = 0usize;
    let mut skipped = 0usize;
    for (i, pos) in positives.iter().enumerate() {
        if pos.is_empty() {
            skipped += 1;
            continue;
        }
        scorer.score_user_into(i, &mut scores);
        let (cand_scores, cand_rel) = match mask {
            Some(train) => {
                let mut cs = Vec::with_capacity(n - train.row(i).len());
                let mut rel = Vec::new();
                for j in 0..n as u32 {
                    if train.is_relevant(i, j) {
                        continue;
                    }
                    if pos.binary_search(&j).is_ok() {
                        rel.push(cs.len() as u32);
                    }
                    cs.push(scores[j as usize]);
                }
                (cs, rel)
            }
            None => (scores.clone(), pos.clone()),
        };
        if cand_rel.is_empty() || cand_rel.len() == cand_scores.len() {
            skipped += 1;
            continue;
        }
        total += uniform_user_auc(&cand_scores, &cand_rel);
        users += 1;
    }
    if users == 0 {
        return Err(Error::UndefinedMetric(
            "holdout AUC: no user has evaluable positives".into(),
        ));
    }
    Ok(UserAveraged {
        value: total / users as f64,
        users,
        skipped,
    })
}

/// AUC counting only pairs whose relevant item scores at or above the
/// (1-t) quantile of the user's full score vector.
pub fn local_auc(
    scorer: &impl Scorer,
    ratings: &ImplicitRatings,
    t: f64,
) -> Result<UserAveraged> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid("t", format!("quantile must be in (0, 1], got {t}")));
    }
    let n = ratings.num_items();
    let top = ((t * n as f64).ceil() as usize).clamp(1, n);
    let mut scores = Vec::new();
    let mut total = 0.0;
    let mut users = 0usize;
    let mut skipped = 0usize;
    for i in 0..ratings.num_users() {
        if ratings.is_degenerate(i) {
            skipped += 1;
            continue;
        }
        scorer.score_user_into(i, &mut scores);
        let mut sorted = scores.clone();
        sorted.sort_unstable_by(|a, b| b.partial_cmp(a).expect("scores must not be NaN"));
        let threshold = sorted[top - 1];
        let qualifying: Vec<u32> = ratings
            .row(i)
            .iter()
            .copied()
            .filter(|&p| scores[p as usize] >= threshold)
            .collect();
        if qualifying.is_empty() {
            skipped += 1;
            continue;
        }
        // count qualifying relevant vs all irrelevant
        let mut wins = 0u64;
        let mut ties = 0u64;
        for &p in &qualifying {
            let sp = scores[p as usize];
            for q in 0..n as u32 {
                if ratings.is_relevant(i, q) {
                    continue;
                }
                let sq = scores[q as usize];
                if sp > sq {
                    wins += 1;
                } else if sp == sq {
                    ties += 1;
                }
            }
        }
        let pairs = (qualifying.len() * ratings.num_irrelevant(i)) as f64;
        total += (wins as f64 + 0.5 * ties as f64) / pairs;
        users += 1;
    }
    if users == 0 {
        return Err(Error::UndefinedMetric(
            "local AUC: no user has a qualifying pair".into(),
        ));
    }
    Ok(UserAveraged {
        value: total / users as f64,
        users,
        skipped,
    })
}

/// ROC curve for one score vector: points from (0,0) to (1,1), monotone in
/// both coordinates, ties advancing diagonally. Optionally truncated at
/// `max_fpr` (with interpolation).
pub fn roc_curve(
    scores: &[f64],
    relevant: &[u32],
    max_fpr: Option<f64>,
) -> Result<Vec<(f64, f64)>> {
    let p = relevant.len();
    let n = scores.len().checked_sub(p).unwrap_or(0);
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(
            "ROC requires at least one relevant and one irrelevant item".into(),
        ));
    }
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .expect("scores must not be NaN")
    });
    let is_rel = |j: u32| relevant.binary_search(&j).is_ok();
    let mut points = vec![(0.0f64, 0.0f64)];
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut idx = 0usize;
    while idx < order.len() {
        let mut end = idx + 1;
        while end < order.len()
            && scores[order[end] as usize] == scores[order[idx] as usize]
        {
            end += 1;
        }
        for &j in &order[idx..end] {
            if is_rel(j) {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
        idx = end;
    }
    if let Some(limit) = max_fpr {
        if !(0.0..=1.0).contains(&limit) {
            return Err(Error::invalid("max_fpr", "must be in [0, 1]"));
        }
        let mut truncated = Vec::new();
        for w in 0..points.len() {
            if points[w].0 <= limit {
                truncated.push(points[w]);
            } else {
                let (f0, t0) = *truncated.last().unwrap_or(&(0.0, 0.0));
                let (f1, t1) = points[w];
                let frac = if f1 > f0 { (limit - f0) / (f1 - f0) } else { 0.0 };
                truncated.push((limit, t0 + frac * (t1 - t0)));
                break;
            }
        }
        return Ok(truncated);
    }
    Ok(points)
}

/// Trapezoid area under a curve returned by `roc_curve`.
pub fn curve_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) * 0.5)
        .sum()
}

/// True positive rate of the (piecewise linear) curve at the given FPR.
pub fn tpr_at(points: &[(f64, f64)], fpr: f64) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    if fpr <= points[0].0 {
        return points[0].1;
    }
    for w in points.windows(2) {
        let (f0, t0) = w[0];
        let (f1, t1) = w[1];
        if fpr <= f1 {
            if f1 > f0 {
                return t0 + (fpr - f0) / (f1 - f0) * (t1 - t0);
            }
            return t1;
        }
    }
    points.last().unwrap().1
}

/// Vertically averaged ROC curve over users on a regular FPR grid.
/// Positives come from `positives`; items in `mask` are excluded from the
/// candidate set.
pub fn mean_roc(
    scorer: &impl Scorer,
    positives: &[Vec<u32>],
    mask: Option<&ImplicitRatings>,
    max_fpr: f64,
    grid: usize,
) -> Result<Vec<(f64, f64)>> {
    if grid < 2 {
        return Err(Error::invalid("grid", "need at least 2 points"));
    }
    let n = scorer.num_items();
    let mut scores = Vec::new();
    let mut sums = vec![0.0f64; grid];
    let mut users = 0usize;
    for (i, pos) in positives.iter().enumerate() {
        if pos.is_empty() {
            continue;
        }
        scorer.score_user_into(i, &mut scores);
        let (cand_scores, cand_rel) = match mask {
            Some(train) => {
                let mut cs = Vec::new();
                let mut rel = Vec::new();
                for j in 0..n as u32 {
                    if train.is_relevant(i, j) {
                        continue;
                    }
                    if pos.binary_search(&j).is_ok() {
                        rel.push(cs.len() as u32);
                    }
                    cs.push(scores[j as usize]);
                }
                (cs, rel)
            }
            None => (scores.clone(), pos.clone()),
        };
        if cand_rel.is_empty() || cand_rel.len() == cand_scores.len() {
            continue;
        }
        let curve = roc_curve(&cand_scores, &cand_rel, None)?;
        for (g, sum) in sums.iter_mut().enumerate() {
            let fpr = max_fpr * g as f64 / (grid - 1) as f64;
            *sum += tpr_at(&curve, fpr);
        }
        users += 1;
    }
    if users == 0 {
        return Err(Error::UndefinedMetric("mean ROC: no evaluable user".into()));
    }
    Ok((0..grid)
        .map(|g| {
            (
                max_fpr * g as f64 / (grid - 1) as f64,
                sums[g] / users as f64,
            )
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrRow {
    pub cutoff: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone)]
pub struct PrTable {
    pub rows: Vec<PrRow>,
    pub users: usize,
    pub skipped: usize,
}

/// Top-l precision/recall/F1 against held-out items; training items are
/// masked out of the ranking candidates. Ties rank by ascending item index.
pub fn precision_recall_at(
    scorer: &impl Scorer,
    train: &ImplicitRatings,
    heldout: &[Vec<u32>],
    cutoffs: &[usize],
) -> Result<PrTable> {
    if cutoffs.is_empty() || cutoffs.iter().any(|&c| c == 0) {
        return Err(Error::invalid("cutoffs", "must be non-empty and positive"));
    }
    let max_cut = *cutoffs.iter().max().unwrap();
    let n = train.num_items();
    let mut scores = Vec::new();
    let mut hit_sums = vec![0.0f64; cutoffs.len()];
    let mut rec_sums = vec![0.0f64; cutoffs.len()];
    let mut f1_sums = vec![0.0f64; cutoffs.len()];
    let mut users = 0usize;
    let mut skipped = 0usize;
    for (i, held) in heldout.iter().enumerate() {
        if held.is_empty() {
            skipped += 1;
            continue;
        }
        scorer.score_user_into(i, &mut scores);
        let mut candidates: Vec<u32> = (0..n as u32)
            .filter(|&j| !train.is_relevant(i, j))
            .collect();
        candidates.sort_unstable_by(|&a, &b| {
            scores[b as usize]
                .partial_cmp(&scores[a as usize])
                .expect("scores must not be NaN")
                .then(a.cmp(&b))
        });
        let top = &candidates[..max_cut.min(candidates.len())];
        for (ci, &cut) in cutoffs.iter().enumerate() {
            let hits = top
                .iter()
                .take(cut)
                .filter(|&&j| held.binary_search(&j).is_ok())
                .count();
            let precision = hits as f64 / cut as f64;
            let recall = hits as f64 / held.len() as f64;
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            hit_sums[ci] += precision;
            rec_sums[ci] += recall;
            f1_sums[ci] += f1;
        }
        users += 1;
    }
    if users == 0 {
        return Err(Error::UndefinedMetric(
            "precision/recall: no user has held-out items".into(),
        ));
    }
    let rows = cutoffs
        .iter()
        .enumerate()
        .map(|(ci, &cut)| PrRow {
            cutoff: cut,
            precision: hit_sums[ci] / users as f64,
            recall: rec_sums[ci] / users as f64,
            f1: f1_sums[ci] / users as f64,
        })
        .collect();
    Ok(PrTable {
        rows,
        users,
        skipped,
    })
}
