//! Alignment and retrieval metrics.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::map::AlignmentMap;
use crate::similarity::{argmax_by_id, rank_of, Metric, SimilarityTable};
use crate::space::EmbeddingSpace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    /// Translation precision keyed by cutoff `k`.
    pub precision_at: BTreeMap<usize, f64>,
    pub avg_wcd: Option<f64>,
    pub hub_max_indegree: Option<usize>,
    pub hub_mean_indegree: Option<f64>,
    pub auc: Option<f64>,
}

impl EvalReport {
    pub fn empty(metric: Metric) -> Self {
        Self {
            metric,
            precision_at: BTreeMap::new(),
            avg_wcd: None,
            hub_max_indegree: None,
            hub_mean_indegree: None,
            auc: None,
        }
    }

    pub fn p_at_1(&self) -> Option<f64> {
        self.precision_at.get(&1).copied()
    }
}

fn ranking_table(
    map: &AlignmentMap,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    metric: Metric,
) -> Result<(EmbeddingSpace, SimilarityTable)> {
    let mapped = map.apply_space(source)?;
    let table = SimilarityTable::for_metric(&mapped, target, metric)?;
    Ok((mapped, table))
}

/// Precision at each cutoff in `ks` from a single ranking of all targets
/// for every mapped source.
pub fn precision_at_ks(
    map: &AlignmentMap,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    gold: &Dictionary,
    ks: &[usize],
    metric: Metric,
) -> Result<BTreeMap<usize, f64>> {
    if gold.is_empty() {
        return Err(Error::Contract("gold dictionary is empty".into()));
    }
    if ks.contains(&0) {
        return Err(Error::Contract("precision cutoff k must be at least 1".into()));
    }
    let resolved = gold
        .iter()
        .map(|(s, t)| Ok((source.lookup(s)?, target.lookup(t)?)))
        .collect::<Result<Vec<_>>>()?;
    let (_, table) = ranking_table(map, source, target, metric)?;
    let ranks: Vec<usize> = resolved
        .iter()
        .map(|&(s, t)| rank_of(table.row(s), t, target.ids()))
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r < k).count();
            (k, hits as f64 / ranks.len() as f64)
        })
        .collect())
}

/// Fraction of gold pairs whose target ranks in the top `k` for the mapped
/// source. Ties rank the smaller id first.
pub fn precision_at_k(
    map: &AlignmentMap,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    gold: &Dictionary,
    k: usize,
    metric: Metric,
) -> Result<f64> {
    Ok(precision_at_ks(map, source, target, gold, &[k], metric)?[&k])
}

/// Mean over clusters of the mean Euclidean distance from members to their
/// centroid. Cluster labels must cover `0..=max` without gaps.
pub fn avg_wcd(points: &[&[f64]], cluster_of: &[usize]) -> Result<f64> {
    if points.len() != cluster_of.len() {
        return Err(Error::Contract(format!(
            "{} points but {} cluster labels",
            points.len(),
            cluster_of.len()
        )));
    }
    let Some(&max) = cluster_of.iter().max() else {
        return Err(Error::Contract("no points".into()));
    };
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Contract("points differ in dimension".into()));
    }
    let mut members = vec![Vec::new(); max + 1];
    for (p, &c) in points.iter().zip(cluster_of) {
        members[c].push(*p);
    }
    let mut total = 0.0;
    for (c, pts) in members.iter().enumerate() {
        if pts.is_empty() {
            return Err(Error::Contract(format!("cluster {c} is empty")));
        }
        let mut centroid = vec![0.0; dim];
        for p in pts {
            centroid.iter_mut().zip(p.iter()).for_each(|(m, x)| *m += x);
        }
        centroid.iter_mut().for_each(|m| *m /= pts.len() as f64);
        let spread: f64 = pts
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&centroid)
                    .map(|(x, m)| (x - m).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        total += spread / pts.len() as f64;
    }
    Ok(total / members.len() as f64)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// AvgWCD with one cluster per dictionary target id: the target vector and
/// every mapped source paired with it. All vectors are scaled to unit length
/// first so maps of different norm compare fairly.
pub fn dictionary_wcd(
    map: &AlignmentMap,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    dict: &Dictionary,
) -> Result<f64> {
    if dict.is_empty() {
        return Err(Error::Contract("dictionary is empty".into()));
    }
    let mut cluster_ids: HashMap<&str, usize> = HashMap::new();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (s, t) in dict.iter() {
        let next = cluster_ids.len();
        let c = *cluster_ids.entry(t).or_insert_with(|| {
            next
        });
        if c == next {
            points.push(unit(target.vector(target.lookup(t)?)));
            labels.push(c);
        }
        points.push(unit(&map.apply(source.vector(source.lookup(s)?))?));
        labels.push(c);
    }
    let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
    avg_wcd(&refs, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HubnessStats {
    pub max_indegree: usize,
    pub mean_indegree: f64,
    /// In-degree of every `to` item, in space order.
    pub indegree: Vec<(String, usize)>,
}

/// In-degree statistics of the graph linking every `from` item to its best
/// `to` item under `metric`. Items may be their own neighbor when both
/// spaces share vectors.
pub fn hubness(from: &EmbeddingSpace, to: &EmbeddingSpace, metric: Metric) -> Result<HubnessStats> {
    if from.is_empty() || to.is_empty() {
        return Err(Error::Contract("hubness needs nonempty spaces".into()));
    }
    let table = SimilarityTable::for_metric(from, to, metric)?;
    let mut indegree = vec![0usize; to.len()];
    for r in 0..table.rows() {
        let best = argmax_by_id(table.row(r).iter().copied().enumerate(), |j| to.id(j))
            .expect("nonempty row");
        indegree[best] += 1;
    }
    Ok(HubnessStats {
        max_indegree: indegree.iter().copied().max().unwrap_or(0),
        mean_indegree: from.len() as f64 / to.len() as f64,
        indegree: to.ids().iter().cloned().zip(indegree).collect(),
    })
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half, from mid-ranks (Mann–Whitney U).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Contract("labels must be 0 or 1".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Contract("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of doubled mid-ranks of the positives keeps everything integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, doubled mid-rank = i + j + 2
        let mid2 = (i + j + 2) as u128;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank_sum2 += mid2 * tied_pos;
        i = j + 1;
    }
    let (pos, neg) = (pos as u128, neg as u128);
    let u2 = rank_sum2 - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

/// `(id, x, y)` coordinates on the top two principal components.
///
/// Each component's sign makes its largest-magnitude loading positive (the
/// first such loading on ties).
pub fn project_2d(space: &EmbeddingSpace) -> Result<Vec<(String, f64, f64)>> {
    let n = space.len();
    if n < 2 {
        return Err(Error::Contract("projection needs at least two items".into()));
    }
    let d = space.dim();
    let mean = space.mean();
    let x = DMatrix::from_fn(n, d, |r, c| space.vector(r)[c] - mean[c]);

    // Loadings (unit principal directions in the input space), largest
    // variance first.
    let loadings: Vec<Vec<f64>> = if d <= n {
        let eig = SymmetricEigen::new(x.transpose() * &x);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        order
            .iter()
            .take(2)
            .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
            .collect()
    } else {
        let eig = SymmetricEigen::new(&x * x.transpose());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        order
            .iter()
            .take(2)
            .map(|&i| {
                let l = x.transpose() * eig.eigenvectors.column(i);
                let norm = l.norm();
                if norm > 0.0 {
                    (l / norm).iter().copied().collect()
                } else {
                    vec![0.0; d]
                }
            })
            .collect()
    };

    let mut comps: Vec<Vec<f64>> = loadings
        .into_iter()
        .map(|mut l| {
            let lead = l
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if v.abs() > l[best].abs() { i } else { best });
            if l[lead] < 0.0 {
                l.iter_mut().for_each(|v| *v = -*v);
            }
            l
        })
        .collect();
    comps.resize(2, vec![0.0; d]);

    Ok((0..n)
        .map(|r| {
            let row = x.row(r);
            let coord = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            (space.id(r).to_string(), coord(&comps[0]), coord(&comps[1]))
        })
        .collect())
}

pub fn write_projection_csv<W: Write>(rows: &[(String, f64, f64)], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["id", "x", "y"])?;
    for (id, x, y) in rows {
        out.write_record([id.clone(), x.to_string(), y.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_hubness_csv<W: Write>(stats: &HubnessStats, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["id", "indegree"])?;
    for (id, deg) in &stats.indegree {
        out.write_record([id.clone(), deg.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Which metrics [`evaluate`] computes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub metric: Metric,
    /// Precision cutoffs; empty skips precision.
    pub ks: Vec<usize>,
    pub avg_wcd: bool,
    pub hubness: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            metric: Metric::Csls { k: 10 },
            ks: vec![1, 5, 10],
            avg_wcd: true,
            hubness: true,
        }
    }
}

pub fn evaluate(
    map: &AlignmentMap,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    gold: &Dictionary,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut report = EvalReport::empty(opts.metric);
    if !opts.ks.is_empty() {
        report.precision_at = precision_at_ks(map, source, target, gold, &opts.ks, opts.metric)?;
    }
    if opts.avg_wcd {
        report.avg_wcd = Some(dictionary_wcd(map, source, target, gold)?);
    }
    if opts.hubness {
        let mapped = map.apply_space(source)?;
        let h = hubness(&mapped, target, opts.metric)?;
        report.hub_max_indegree = Some(h.max_indegree);
        report.hub_mean_indegree = Some(h.mean_indegree);
    }
    Ok(report)
}
