//! Cosine similarity, neighborhood density and Cross-Domain Similarity Local
//! Scaling (CSLS).
//!
//! CSLS penalizes vectors that sit in dense neighborhoods:
//! `csls(x, y) = 2·cos(x, y) − r_Y(x) − r_X(y)`, where `r_Y(x)` is the mean
//! cosine between `x` and its `k` nearest neighbors in `Y`.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::EmbeddingSpace;

/// Similarity used to rank candidate targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    Csls { k: usize },
}

impl Metric {
    pub fn name(&self) -> String {
        match self {
            Metric::Cosine => "cosine".into(),
            Metric::Csls { k } => format!("csls@{k}"),
        }
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension {
            expected: u.len(),
            got: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector("cosine operand".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Mean of the `k` largest values. Sorting first fixes the summation order.
pub(crate) fn mean_top_k(values: &mut [f64], k: usize) -> f64 {
    values.sort_unstable_by(|a, b| b.total_cmp(a));
    values[..k].iter().sum::<f64>() / k as f64
}

/// Mean cosine between `x` and its `k` most similar items of `pool`.
pub fn mean_knn_similarity(x: &[f64], pool: &EmbeddingSpace, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    if pool.len() < k {
        return Err(Error::Contract(format!(
            "pool `{}` has {} items, fewer than k = {k}",
            pool.name(),
            pool.len()
        )));
    }
    let mut sims = pool
        .iter()
        .map(|(_, p)| cosine(x, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_top_k(&mut sims, k))
}

/// CSLS between a mapped source vector `v` and a target vector `t`.
///
/// `pool_t` is the target space and `pool_v` the mapped source space.
pub fn csls(
    v: &[f64],
    t: &[f64],
    pool_t: &EmbeddingSpace,
    pool_v: &EmbeddingSpace,
    k: usize,
) -> Result<f64> {
    Ok(2.0 * cosine(v, t)? - mean_knn_similarity(v, pool_t, k)? - mean_knn_similarity(t, pool_v, k)?)
}

/// Dense `queries × targets` score matrix.
#[derive(Debug, Clone)]
pub struct SimilarityTable {
    rows: usize,
    cols: usize,
    scores: Vec<f64>,
}

fn unit_rows(space: &EmbeddingSpace) -> Vec<f64> {
    let mut data = space.as_slice().to_vec();
    for row in data.chunks_exact_mut(space.dim().max(1)) {
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    data
}

impl SimilarityTable {
    /// Cosine similarities. A zero vector has similarity 0 to everything.
    pub fn cosine(queries: &EmbeddingSpace, targets: &EmbeddingSpace) -> Result<Self> {
        if queries.dim() != targets.dim() {
            return Err(Error::Dimension {
                expected: targets.dim(),
                got: queries.dim(),
            });
        }
        let dim = queries.dim().max(1);
        let q = unit_rows(queries);
        let t = unit_rows(targets);
        let cols = targets.len();
        let mut scores = vec![0.0; queries.len() * cols];
        if cols > 0 {
            scores
                .par_chunks_mut(cols)
                .zip(q.par_chunks(dim))
                .for_each(|(out, qv)| {
                    for (o, tv) in out.iter_mut().zip(t.chunks_exact(dim)) {
                        *o = dot(qv, tv).clamp(-1.0, 1.0);
                    }
                });
        }
        Ok(Self {
            rows: queries.len(),
            cols,
            scores,
        })
    }

    /// CSLS scores, with neighborhoods of size `k` taken within this table.
    pub fn csls(queries: &EmbeddingSpace, targets: &EmbeddingSpace, k: usize) -> Result<Self> {
        Self::cosine(queries, targets)?.into_csls(k)
    }

    pub fn for_metric(
        queries: &EmbeddingSpace,
        targets: &EmbeddingSpace,
        metric: Metric,
    ) -> Result<Self> {
        match metric {
            Metric::Cosine => Self::cosine(queries, targets),
            Metric::Csls { k } => Self::csls(queries, targets, k),
        }
    }

    pub fn into_csls(mut self, k: usize) -> Result<Self> {
        let r_rows = self.row_density(k)?;
        let r_cols = self.col_density(k)?;
        let cols = self.cols;
        for (r, row) in self.scores.chunks_exact_mut(cols.max(1)).enumerate() {
            for (c, s) in row.iter_mut().enumerate() {
                *s = 2.0 * *s - r_rows[r] - r_cols[c];
            }
        }
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.scores[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.scores[r * self.cols..(r + 1) * self.cols]
    }

    /// Mean of the `k` best scores in every row.
    pub fn row_density(&self, k: usize) -> Result<Vec<f64>> {
        check_k(k, self.cols)?;
        Ok((0..self.rows)
            .into_par_iter()
            .map(|r| mean_top_k(&mut self.row(r).to_vec(), k))
            .collect())
    }

    /// Mean of the `k` best scores in every column.
    pub fn col_density(&self, k: usize) -> Result<Vec<f64>> {
        check_k(k, self.rows)?;
        Ok((0..self.cols)
            .into_par_iter()
            .map(|c| {
                let mut col: Vec<f64> = (0..self.rows).map(|r| self.get(r, c)).collect();
                mean_top_k(&mut col, k)
            })
            .collect())
    }
}

fn check_k(k: usize, pool: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    if pool < k {
        return Err(Error::Contract(format!(
            "pool has {pool} items, fewer than k = {k}"
        )));
    }
    Ok(())
}

/// Orders candidate `a` before `b`: higher score first, then smaller id.
pub(crate) fn rank_order(score_a: f64, id_a: &str, score_b: f64, id_b: &str) -> Ordering {
    score_b.total_cmp(&score_a).then_with(|| id_a.cmp(id_b))
}

/// Index of the best-scoring entry, ties going to the smaller id.
pub(crate) fn argmax_by_id<'a>(
    candidates: impl IntoIterator<Item = (usize, f64)>,
    id: impl Fn(usize) -> &'a str,
) -> Option<usize> {
    candidates
        .into_iter()
        .min_by(|&(a, sa), &(b, sb)| rank_order(sa, id(a), sb, id(b)))
        .map(|(i, _)| i)
}

/// Number of entries of `scores` ranked strictly ahead of entry `target`.
pub(crate) fn rank_of(scores: &[f64], target: usize, ids: &[String]) -> usize {
    let (s, id) = (scores[target], ids[target].as_str());
    scores
        .iter()
        .zip(ids)
        .filter(|(&x, other)| rank_order(x, other, s, id) == Ordering::Less)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(name: &str, rows: &[&[f64]]) -> EmbeddingSpace {
        EmbeddingSpace::from_rows(
            name,
            rows[0].len(),
            rows.iter().enumerate().map(|(i, v)| (format!("{name}{i}"), v.to_vec())),
        )
        .unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = [0.3, -1.2, 2.5];
        let v3: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
        assert!((cosine(&v, &v3).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn knn_similarity_examples() {
        let x = [1.0, 0.0];
        let pool = space("p", &[&[1.0, 0.0], &[-1.0, 0.1], &[0.0, -1.0]]);
        assert!((mean_knn_similarity(&x, &pool, 1).unwrap() - 1.0).abs() < 1e-15);
        let same = space("s", &[&[2.0, 0.0], &[5.0, 0.0], &[0.5, 0.0]]);
        for k in 1..=3 {
            assert!((mean_knn_similarity(&x, &same, k).unwrap() - 1.0).abs() < 1e-15);
        }
        assert!(mean_knn_similarity(&x, &pool, 4).is_err());
        assert!(mean_knn_similarity(&x, &pool, 0).is_err());
    }

    #[test]
    fn knn_similarity_matches_sort_then_average() {
        let pts: [&[f64]; 5] = [&[1.0, 0.2], &[0.1, 1.0], &[-0.7, 0.7], &[0.9, -0.4], &[-1.0, -1.0]];
        let pool = space("p", &pts);
        let x = [0.6, 0.8];
        // cosines by hand-free brute force: compute, sort descending, average first two
        let mut cos: Vec<f64> = pts
            .iter()
            .map(|p| (x[0] * p[0] + x[1] * p[1]) / (p[0].hypot(p[1])))
            .collect();
        cos.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let expected = (cos[0] + cos[1]) / 2.0;
        assert!((mean_knn_similarity(&x, &pool, 2).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn csls_degenerate_pools_give_zero() {
        let u = [0.0, 1.0];
        let t = space("t", &[&u, &u, &u]);
        let v = space("v", &[&u, &u, &u]);
        assert!(csls(&u, &u, &t, &v, 2).unwrap().abs() < 1e-15);
    }

    #[test]
    fn csls_hand_computed_3_plus_3() {
        // Mapped sources and targets in 2D, k = 1.
        let v = space("v", &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let t = space("t", &[&[1.0, 0.1], &[-1.0, 1.0], &[0.0, -1.0]]);
        let (x, y) = (v.vector(0), t.vector(0));
        // cos(x, y) = 1/sqrt(1.01)
        let c = 1.0 / 1.01f64.sqrt();
        // r_T(x): best target for (1,0) is (1,0.1) itself -> c
        let r_t = c;
        // r_V(y): best source for (1,0.1): (1,0) -> c; (1,1) -> 1.1/(sqrt2 sqrt1.01) < c
        let r_v = c;
        let expected = 2.0 * c - r_t - r_v;
        assert!((csls(x, y, &t, &v, 1).unwrap() - expected).abs() < 1e-15);
        // second pair: (0,1) with (-1,1): cos = 1/sqrt2
        let c2 = 1.0 / 2f64.sqrt();
        // r_T((0,1)) = max(0.1/sqrt1.01, 1/sqrt2, -1) = 1/sqrt2
        // r_V((-1,1)) = max(-1/sqrt2, 1/sqrt2, 0) = 1/sqrt2
        let got = csls(v.vector(1), t.vector(1), &t, &v, 1).unwrap();
        assert!((got - (2.0 * c2 - c2 - c2)).abs() < 1e-15);
    }

    #[test]
    fn table_agrees_with_pointwise_csls() {
        let v = space("v", &[&[1.0, 0.3, 0.0], &[0.2, 1.0, -0.5], &[0.4, 0.4, 0.4], &[-1.0, 0.0, 0.2]]);
        let t = space("t", &[&[0.9, 0.1, 0.1], &[0.0, 1.0, 0.0], &[0.3, -0.2, 1.0]]);
        let table = SimilarityTable::csls(&v, &t, 2).unwrap();
        for i in 0..v.len() {
            for j in 0..t.len() {
                let direct = csls(v.vector(i), t.vector(j), &t, &v, 2).unwrap();
                assert!((table.get(i, j) - direct).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rank_ties_break_by_id() {
        let ids: Vec<String> = ["b", "a", "c"].iter().map(|s| s.to_string()).collect();
        let scores = [0.5, 0.5, 0.9];
        assert_eq!(rank_of(&scores, 2, &ids), 0);
        assert_eq!(rank_of(&scores, 1, &ids), 1);
        assert_eq!(rank_of(&scores, 0, &ids), 2);
        assert_eq!(argmax_by_id([(0, 0.5), (1, 0.5)], |i| ids[i].as_str()), Some(1));
    }
}
