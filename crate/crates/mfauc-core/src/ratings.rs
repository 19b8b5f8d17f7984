//! Sparse implicit rating matrix, holdout splitting and MatrixMarket I/O.
//!
//! Rows store the sorted indices of relevant items; the irrelevant set is
//! always virtual and membership is decided by binary search, because the
//! number of items can vastly exceed the number of relevant items per user.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{self, Tag};

/// Binary user x item relevance matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImplicitRatings {
    m: usize,
    n: usize,
    rows: Vec<Vec<u32>>,
}

impl ImplicitRatings {
    /// Builds a matrix from per-user item lists, sorting and validating them.
    pub fn from_rows(n: usize, rows: Vec<Vec<u32>>) -> Result<Self> {
        let mut sorted = rows;
        for (i, row) in sorted.iter_mut().enumerate() {
            row.sort_unstable();
            for w in row.windows(2) {
                if w[0] == w[1] {
                    return Err(Error::DuplicateEntry {
                        line: 0,
                        row: i,
                        col: w[0] as usize,
                    });
                }
            }
            if let Some(&last) = row.last() {
                if last as usize >= n {
                    return Err(Error::Bounds {
                        line: 0,
                        row: i,
                        col: last as usize,
                        m: sorted.len(),
                        n,
                    });
                }
            }
        }
        Ok(ImplicitRatings {
            m: sorted.len(),
            n,
            rows: sorted,
        })
    }

    pub fn num_users(&self) -> usize {
        self.m
    }

    pub fn num_items(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    /// Sorted relevant item indices of user `i`.
    #[inline]
    pub fn row(&self, i: usize) -> &[u32] {
        &self.rows[i]
    }

    #[inline]
    pub fn is_relevant(&self, i: usize, j: u32) -> bool {
        self.rows[i].binary_search(&j).is_ok()
    }

    /// Number of irrelevant/missing items of user `i`.
    #[inline]
    pub fn num_irrelevant(&self, i: usize) -> usize {
        self.n - self.rows[i].len()
    }

    /// A user is degenerate for training/evaluation when it has no relevant
    /// or no irrelevant items.
    pub fn is_degenerate(&self, i: usize) -> bool {
        self.rows[i].is_empty() || self.rows[i].len() == self.n
    }

    pub fn check_user(&self, i: usize) -> Result<()> {
        if self.rows[i].is_empty() {
            return Err(Error::DegenerateUser {
                user: i,
                kind: "relevant",
            });
        }
        if self.rows[i].len() == self.n {
            return Err(Error::DegenerateUser {
                user: i,
                kind: "irrelevant",
            });
        }
        Ok(())
    }

    /// Users eligible for training, ascending.
    pub fn eligible_users(&self) -> Vec<u32> {
        (0..self.m as u32)
            .filter(|&i| !self.is_degenerate(i as usize))
            .collect()
    }

    /// Number of users rating each item.
    pub fn column_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.n];
        for row in &self.rows {
            for &j in row {
                counts[j as usize] += 1;
            }
        }
        counts
    }
}

/// Result of withholding relevant items per user.
#[derive(Debug, Clone)]
pub struct HoldoutSplit {
    pub train: ImplicitRatings,
    /// Withheld relevant items per user, sorted; empty for skipped users.
    pub test: Vec<Vec<u32>>,
    /// Users with too few items to split, left untouched in `train`.
    pub skipped: Vec<u32>,
}

/// Loads a MatrixMarket coordinate file. Entries with value strictly greater
/// than `threshold` become relevant; the rest are dropped. Pass `None` to
/// keep every listed entry with a positive value.
pub fn load_ratings(path: impl AsRef<Path>, threshold: Option<f64>) -> Result<ImplicitRatings> {
    let file = File::open(path.as_ref())?;
    read_ratings(BufReader::new(file), threshold)
}

pub fn read_ratings(reader: impl BufRead, threshold: Option<f64>) -> Result<ImplicitRatings> {
    let threshold = threshold.unwrap_or(0.0);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(l) => l?,
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() < 5
        || fields[0] != "%%MatrixMarket"
        || fields[1] != "matrix"
        || fields[2] != "coordinate"
        || fields[3] != "real"
        || fields[4] != "general"
    {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected `%%MatrixMarket matrix coordinate real general`, got `{header}`"),
        });
    }

    let mut lineno = 1usize;
    let mut dims: Option<(usize, usize, usize)> = None;
    let mut rows: Vec<Vec<u32>> = Vec::new();
    let mut seen = 0usize;
    for line in lines {
        let line = line?;
        lineno += 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        if dims.is_none() {
            let m = parse_field::<usize>(parts.next(), lineno, "row count")?;
            let n = parse_field::<usize>(parts.next(), lineno, "column count")?;
            let nnz = parse_field::<usize>(parts.next(), lineno, "nonzero count")?;
            dims = Some((m, n, nnz));
            rows = vec![Vec::new(); m];
            continue;
        }
        let (m, n, nnz) = dims.unwrap();
        let i = parse_field::<usize>(parts.next(), lineno, "row index")?;
        let j = parse_field::<usize>(parts.next(), lineno, "column index")?;
        let value = parse_field::<f64>(parts.next(), lineno, "value")?;
        if i == 0 || j == 0 || i > m || j > n {
            return Err(Error::Bounds {
                line: lineno,
                row: i,
                col: j,
                m,
                n,
            });
        }
        seen += 1;
        if seen > nnz {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("more than the declared {nnz} entries"),
            });
        }
        if value > threshold {
            rows[i - 1].push((j - 1) as u32);
        }
    }
    let (m, n, nnz) = dims.ok_or(Error::Parse {
        line: lineno,
        msg: "missing size line".into(),
    })?;
    if seen != nnz {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("declared {nnz} entries but found {seen}"),
        });
    }
    let _ = m;
    // from_rows reports duplicates; map its line-less error to the file
    ImplicitRatings::from_rows(n, rows)
}

fn parse_field<T: std::str::FromStr>(
    field: Option<&str>,
    line: usize,
    what: &str,
) -> Result<T> {
    let raw = field.ok_or_else(|| Error::Parse {
        line,
        msg: format!("missing {what}"),
    })?;
    raw.parse::<T>().map_err(|_| Error::Parse {
        line,
        msg: format!("cannot parse {what} from `{raw}`"),
    })
}

/// Writes the matrix in MatrixMarket coordinate format with 1-based indices
/// and value 1 per relevant entry.
pub fn save_ratings(ratings: &ImplicitRatings, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(
        w,
        "{} {} {}",
        ratings.num_users(),
        ratings.num_items(),
        ratings.nnz()
    )?;
    for i in 0..ratings.num_users() {
        for &j in ratings.row(i) {
            writeln!(w, "{} {} 1", i + 1, j + 1)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Withholds `per_user` random relevant items from every user that keeps at
/// least `min_remaining` items afterwards; other users are skipped and
/// reported. Deterministic under `seed`.
pub fn split_holdout(
    ratings: &ImplicitRatings,
    per_user: usize,
    min_remaining: usize,
    seed: u64,
) -> Result<HoldoutSplit> {
    if per_user == 0 {
        return Err(Error::invalid("per_user", "must be at least 1"));
    }
    let mut rng = rng::stream(seed, Tag::Holdout, 0, 0);
    let mut train_rows = Vec::with_capacity(ratings.num_users());
    let mut test = Vec::with_capacity(ratings.num_users());
    let mut skipped = Vec::new();
    for i in 0..ratings.num_users() {
        let row = ratings.row(i);
        if row.len() < per_user + min_remaining {
            skipped.push(i as u32);
            train_rows.push(row.to_vec());
            test.push(Vec::new());
            continue;
        }
        let mut pool = row.to_vec();
        rng::shuffle(&mut pool, &mut rng);
        let mut held: Vec<u32> = pool[..per_user].to_vec();
        let mut kept: Vec<u32> = pool[per_user..].to_vec();
        held.sort_unstable();
        kept.sort_unstable();
        train_rows.push(kept);
        test.push(held);
    }
    Ok(HoldoutSplit {
        train: ImplicitRatings::from_rows(ratings.num_items(), train_rows)?,
        test,
        skipped,
    })
}

/// Index remapping produced by `filter_sparse`: original ids of the kept
/// rows/columns, in output order.
#[derive(Debug, Clone)]
pub struct FilterReport {
    pub kept_users: Vec<u32>,
    pub kept_items: Vec<u32>,
    pub dropped_users: usize,
    pub dropped_items: usize,
}

/// Alternately drops users with fewer than `min_items_per_user` items and
/// items with fewer than `min_users_per_item` users until a fixed point,
/// then compacts indices.
pub fn filter_sparse(
    ratings: &ImplicitRatings,
    min_items_per_user: usize,
    min_users_per_item: usize,
) -> Result<(ImplicitRatings, FilterReport)> {
    let m = ratings.num_users();
    let n = ratings.num_items();
    let mut user_alive = vec![true; m];
    let mut item_alive = vec![true; n];
    loop {
        let mut changed = false;
        for i in 0..m {
            if !user_alive[i] {
                continue;
            }
            let deg = ratings
                .row(i)
                .iter()
                .filter(|&&j| item_alive[j as usize])
                .count();
            if deg < min_items_per_user {
                user_alive[i] = false;
                changed = true;
            }
        }
        let mut item_deg = vec![0usize; n];
        for i in 0..m {
            if !user_alive[i] {
                continue;
            }
            for &j in ratings.row(i) {
                if item_alive[j as usize] {
                    item_deg[j as usize] += 1;
                }
            }
        }
        for j in 0..n {
            if item_alive[j] && item_deg[j] < min_users_per_item {
                item_alive[j] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let kept_users: Vec<u32> = (0..m as u32).filter(|&i| user_alive[i as usize]).collect();
    let kept_items: Vec<u32> = (0..n as u32).filter(|&j| item_alive[j as usize]).collect();
    if kept_users.is_empty() || kept_items.is_empty() {
        return Err(Error::EmptyResult);
    }
    let mut item_map = vec![u32::MAX; n];
    for (new, &old) in kept_items.iter().enumerate() {
        item_map[old as usize] = new as u32;
    }
    let rows: Vec<Vec<u32>> = kept_users
        .iter()
        .map(|&i| {
            ratings
                .row(i as usize)
                .iter()
                .filter(|&&j| item_alive[j as usize])
                .map(|&j| item_map[j as usize])
                .collect()
        })
        .collect();
    let report = FilterReport {
        dropped_users: m - kept_users.len(),
        dropped_items: n - kept_items.len(),
        kept_users,
        kept_items,
    };
    Ok((ImplicitRatings::from_rows(report.kept_items.len(), rows)?, report))
}

/// Model-selection subsample: users taken in order until `max_ratings`
/// nonzeros are reached, then items left with no ratings are removed.
pub fn sequential_subsample(
    ratings: &ImplicitRatings,
    max_ratings: usize,
) -> Result<(ImplicitRatings, FilterReport)> {
    let mut total = 0usize;
    let mut cutoff = ratings.num_users();
    for i in 0..ratings.num_users() {
        if total >= max_ratings {
            cutoff = i;
            break;
        }
        total += ratings.row(i).len();
    }
    let rows: Vec<Vec<u32>> = (0..cutoff).map(|i| ratings.row(i).to_vec()).collect();
    let head = ImplicitRatings::from_rows(ratings.num_items(), rows)?;
    // prune items that lost all their ratings, keep all selected users
    let (pruned, mut report) = filter_sparse(&head, 0, 1)?;
    report.kept_users = (0..cutoff as u32).collect();
    report.dropped_users = ratings.num_users() - cutoff;
    Ok((pruned, report))
}
