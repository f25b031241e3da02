//! Item-based collaborative filtering over implicit interaction counts.
//!
//! Item similarity is the cosine between item columns of the user×item
//! rating matrix. A user's score for an unrated item `j` is
//! `Σ_i CS(i, j) · q_iu` over the items `i` the user rated; the top `r`
//! scores (ties by ascending item id, zero scores dropped) form the
//! recommendation list.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::datasets::{ItemId, Session, UserId};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RatingMatrix {
    num_users: usize,
    num_items: usize,
    /// Per user: `(item, q)` sorted by item, `q > 0`.
    rows: Vec<Vec<(ItemId, f64)>>,
    /// Per item: `(user, q)` sorted by user.
    cols: Vec<Vec<(UserId, f64)>>,
}

impl RatingMatrix {
    /// Builds from explicit `(user, item, q)` triples. Repeated pairs are
    /// summed; non-positive values are dropped.
    pub fn from_entries(
        num_users: usize,
        num_items: usize,
        entries: impl IntoIterator<Item = (UserId, ItemId, f64)>,
    ) -> Result<Self> {
        let mut rows: Vec<Vec<(ItemId, f64)>> = vec![Vec::new(); num_users];
        for (u, i, q) in entries {
            if u as usize >= num_users || i as usize >= num_items {
                return Err(Error::invalid(format!(
                    "rating ({u}, {i}) outside {num_users}x{num_items}"
                )));
            }
            if !q.is_finite() {
                return Err(Error::NonFinite(format!("rating ({u}, {i})")));
            }
            rows[u as usize].push((i, q));
        }
        for row in &mut rows {
            row.sort_by_key(|(i, _)| *i);
            let mut merged: Vec<(ItemId, f64)> = Vec::with_capacity(row.len());
            for &(i, q) in row.iter() {
                match merged.last_mut() {
                    Some((last, acc)) if *last == i => *acc += q,
                    _ => merged.push((i, q)),
                }
            }
            merged.retain(|(_, q)| *q > 0.0);
            *row = merged;
        }
        let mut cols: Vec<Vec<(UserId, f64)>> = vec![Vec::new(); num_items];
        for (u, row) in rows.iter().enumerate() {
            for &(i, q) in row {
                cols[i as usize].push((u as UserId, q));
            }
        }
        Ok(RatingMatrix {
            num_users,
            num_items,
            rows,
            cols,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn user_ratings(&self, user: UserId) -> &[(ItemId, f64)] {
        &self.rows[user as usize]
    }

    pub fn item_ratings(&self, item: ItemId) -> &[(UserId, f64)] {
        &self.cols[item as usize]
    }

    pub fn get(&self, user: UserId, item: ItemId) -> f64 {
        let row = &self.rows[user as usize];
        row.binary_search_by_key(&item, |(i, _)| *i)
            .map_or(0.0, |idx| row[idx].1)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Every entry multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> RatingMatrix {
        let mut out = self.clone();
        for row in &mut out.rows {
            row.iter_mut().for_each(|(_, q)| *q *= factor);
        }
        for col in &mut out.cols {
            col.iter_mut().for_each(|(_, q)| *q *= factor);
        }
        out
    }

    fn column_norm(&self, item: ItemId) -> f64 {
        self.cols[item as usize]
            .iter()
            .map(|(_, q)| q * q)
            .sum::<f64>()
            .sqrt()
    }
}

/// `q_iu` = number of times user `u` interacted with item `i` across all of
/// their sessions, duplicates within a session included.
pub fn build_rating_matrix<'a>(
    sessions: impl IntoIterator<Item = &'a Session>,
    num_users: usize,
    num_items: usize,
) -> Result<RatingMatrix> {
    let entries = sessions
        .into_iter()
        .flat_map(|s| s.items.iter().map(move |&i| (s.user_id, i, 1.0)));
    RatingMatrix::from_entries(num_users, num_items, entries)
}

/// Cosine between item columns `i` and `j`; zero when either column is empty.
pub fn cosine_similarity(m: &RatingMatrix, i: ItemId, j: ItemId) -> f64 {
    let (a, b) = (m.item_ratings(i), m.item_ratings(j));
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let (mut x, mut y, mut dot) = (0, 0, 0.0);
    while x < a.len() && y < b.len() {
        match a[x].0.cmp(&b[y].0) {
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
            std::cmp::Ordering::Equal => {
                dot += a[x].1 * b[y].1;
                x += 1;
                y += 1;
            }
        }
    }
    dot / (m.column_norm(i) * m.column_norm(j))
}

/// Sparse symmetric item-item cosine matrix. Pairs without a common user are
/// absent and read as zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    num_items: usize,
    /// Per item: `(other, CS)` sorted by `other`, self included.
    rows: Vec<Vec<(ItemId, f64)>>,
}

impl SimilarityMatrix {
    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn row(&self, item: ItemId) -> &[(ItemId, f64)] {
        &self.rows[item as usize]
    }

    pub fn get(&self, i: ItemId, j: ItemId) -> Option<f64> {
        let row = &self.rows[i as usize];
        row.binary_search_by_key(&j, |(k, _)| *k)
            .ok()
            .map(|idx| row[idx].1)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

pub fn build_similarity(m: &RatingMatrix) -> SimilarityMatrix {
    let norms: Vec<f64> = (0..m.num_items as ItemId)
        .map(|i| m.column_norm(i))
        .collect();
    let rows = (0..m.num_items)
        .into_par_iter()
        .map_init(
            || (vec![0.0f64; m.num_items], Vec::<ItemId>::new()),
            |(acc, touched), i| {
                for &(u, qi) in &m.cols[i] {
                    for &(j, qj) in &m.rows[u as usize] {
                        if acc[j as usize] == 0.0 {
                            touched.push(j);
                        }
                        acc[j as usize] += qi * qj;
                    }
                }
                touched.sort_unstable();
                let row: Vec<(ItemId, f64)> = touched
                    .iter()
                    .map(|&j| {
                        let cs = if j as usize == i {
                            1.0
                        } else {
                            (acc[j as usize] / (norms[i] * norms[j as usize])).min(1.0)
                        };
                        acc[j as usize] = 0.0;
                        (j, cs)
                    })
                    .collect();
                touched.clear();
                row
            },
        )
        .collect();
    SimilarityMatrix {
        num_items: m.num_items,
        rows,
    }
}

/// Rating matrix plus its similarity matrix.
#[derive(Clone, Debug)]
pub struct Recommender {
    pub ratings: RatingMatrix,
    pub similarity: SimilarityMatrix,
}

impl Recommender {
    pub fn new(ratings: RatingMatrix) -> Self {
        let similarity = build_similarity(&ratings);
        Recommender {
            ratings,
            similarity,
        }
    }

    pub fn from_sessions<'a>(
        sessions: impl IntoIterator<Item = &'a Session>,
        num_users: usize,
        num_items: usize,
    ) -> Result<Self> {
        Ok(Recommender::new(build_rating_matrix(
            sessions, num_users, num_items,
        )?))
    }

    pub fn recommend(&self, user: UserId, r: usize) -> Vec<ItemId> {
        let mut scratch = vec![0.0; self.ratings.num_items];
        recommend_into(&self.ratings, &self.similarity, user, r, &mut scratch)
    }

    /// Top-`r` lists for `users`, in the given order.
    pub fn recommend_all(&self, users: &[UserId], r: usize) -> RecommendationTable {
        let lists = users
            .par_iter()
            .map_init(
                || vec![0.0; self.ratings.num_items],
                |scratch, &u| recommend_into(&self.ratings, &self.similarity, u, r, scratch),
            )
            .collect();
        RecommendationTable {
            r,
            num_items: self.ratings.num_items,
            users: users.to_vec(),
            lists,
        }
    }
}

fn recommend_into(
    m: &RatingMatrix,
    sim: &SimilarityMatrix,
    user: UserId,
    r: usize,
    scores: &mut [f64],
) -> Vec<ItemId> {
    let rated = m.user_ratings(user);
    if rated.is_empty() || r == 0 {
        return Vec::new();
    }
    let mut touched: Vec<ItemId> = Vec::new();
    for &(i, q) in rated {
        for &(j, cs) in sim.row(i) {
            if cs == 0.0 {
                continue;
            }
            if scores[j as usize] == 0.0 {
                touched.push(j);
            }
            scores[j as usize] += cs * q;
        }
    }
    let mut candidates: Vec<(ItemId, f64)> = Vec::with_capacity(touched.len());
    for &j in &touched {
        let s = scores[j as usize];
        scores[j as usize] = 0.0;
        if s > 0.0 && rated.binary_search_by_key(&j, |(i, _)| *i).is_err() {
            candidates.push((j, s));
        }
    }
    let order = |a: &(ItemId, f64), b: &(ItemId, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if candidates.len() > r {
        candidates.select_nth_unstable_by(r - 1, order);
        // keep everything that may tie with the r-th score
        let cutoff = candidates[r - 1].1 * (1.0 - TIE_TOLERANCE);
        let (mut head, tail) = (candidates[..r].to_vec(), &candidates[r..]);
        head.extend(tail.iter().filter(|c| c.1 >= cutoff));
        candidates = head;
    }
    candidates.sort_unstable_by(order);
    merge_ties(&mut candidates);
    candidates.truncate(r);
    candidates.into_iter().map(|(j, _)| j).collect()
}

/// Relative gap below which two scores count as equal. Equal scores reached
/// through different summation orders differ by a few ulps.
const TIE_TOLERANCE: f64 = 1e-12;

/// Reorders runs of tied scores in a descending list by ascending id. A run
/// starts at its highest score and takes every score within tolerance of it.
fn merge_ties(sorted: &mut [(ItemId, f64)]) {
    let mut start = 0;
    while start < sorted.len() {
        let floor = sorted[start].1 * (1.0 - TIE_TOLERANCE);
        let end = start + sorted[start..].iter().take_while(|c| c.1 >= floor).count();
        sorted[start..end].sort_unstable_by_key(|c| c.0);
        start = end;
    }
}

/// Top-`r` recommendations for `user`. Empty when the user has no ratings.
pub fn recommend(m: &RatingMatrix, sim: &SimilarityMatrix, user: UserId, r: usize) -> Vec<ItemId> {
    let mut scratch = vec![0.0; m.num_items];
    recommend_into(m, sim, user, r, &mut scratch)
}

/// Fraction of `normal_users` whose top-`r` list contains `target`.
pub fn hit_ratio(
    m: &RatingMatrix,
    sim: &SimilarityMatrix,
    normal_users: &[UserId],
    target: ItemId,
    r: usize,
) -> Result<f64> {
    if normal_users.is_empty() {
        return Err(Error::invalid("hit ratio needs at least one normal user"));
    }
    let mut scratch = vec![0.0; m.num_items];
    let hits = normal_users
        .iter()
        .filter(|&&u| recommend_into(m, sim, u, r, &mut scratch).contains(&target))
        .count();
    Ok(hits as f64 / normal_users.len() as f64)
}

/// Per-user recommendation lists of length at most `r`. Any `r' <= r` view is
/// the prefix of each list.
#[derive(Clone, Debug, PartialEq)]
pub struct RecommendationTable {
    pub r: usize,
    num_items: usize,
    pub users: Vec<UserId>,
    pub lists: Vec<Vec<ItemId>>,
}

impl RecommendationTable {
    fn check_r(&self, r: usize) -> Result<()> {
        if r > self.r {
            return Err(Error::invalid(format!(
                "table holds top-{} lists, asked for top-{r}",
                self.r
            )));
        }
        Ok(())
    }

    pub fn hit_ratio(&self, target: ItemId, r: usize) -> Result<f64> {
        self.check_r(r)?;
        if self.users.is_empty() {
            return Err(Error::invalid("hit ratio needs at least one normal user"));
        }
        let hits = self
            .lists
            .iter()
            .filter(|l| l.iter().take(r).any(|&j| j == target))
            .count();
        Ok(hits as f64 / self.users.len() as f64)
    }

    /// Number of users whose top-`r` list contains each item.
    pub fn hit_counts(&self, r: usize) -> Result<Vec<usize>> {
        self.check_r(r)?;
        let mut counts = vec![0usize; self.num_items];
        for l in &self.lists {
            for &j in l.iter().take(r) {
                counts[j as usize] += 1;
            }
        }
        Ok(counts)
    }

    /// Highest hit ratio of any item at cutoff `r`.
    pub fn best_hit_ratio(&self, r: usize) -> Result<f64> {
        if self.users.is_empty() {
            return Err(Error::invalid("hit ratio needs at least one normal user"));
        }
        let best = self.hit_counts(r)?.into_iter().max().unwrap_or(0);
        Ok(best as f64 / self.users.len() as f64)
    }

    /// CSV with columns `user_id,rank,item_id`; rank starts at 1.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "user_id,rank,item_id").map_err(io)?;
        for (u, list) in self.users.iter().zip(&self.lists) {
            for (rank, j) in list.iter().enumerate() {
                writeln!(w, "{u},{},{j}", rank + 1).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }
}
