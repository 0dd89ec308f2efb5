//! Seeded synthetic data with known answers: paired spaces related by a
//! planted semi-orthogonal map, a labeled corpus over them, and a small
//! instance built to exhibit hubness.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal, Zipf};
use serde::{Deserialize, Serialize};

use crate::dictionary::{Dictionary, LabeledCorpus, LabeledItem, Provenance, Text};
use crate::error::{Error, Result};
use crate::map::AlignmentMap;
use crate::space::EmbeddingSpace;
use crate::Rng;

pub const ZIPF_EXPONENT: f64 = 1.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dim_target: usize,
    pub dim_source: usize,
    pub n_clusters: usize,
    pub points_per_cluster: usize,
    pub noise_sigma: f64,
    /// Standard deviation of points around their cluster center; centers
    /// themselves are standard normal.
    pub cluster_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim_target: 16,
            dim_source: 32,
            n_clusters: 8,
            points_per_cluster: 50,
            noise_sigma: 0.01,
            cluster_spread: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim_target == 0 {
            return Err(Error::Config("dim_target must be positive".into()));
        }
        if self.dim_source < self.dim_target {
            return Err(Error::Config(format!(
                "dim_source {} is smaller than dim_target {}",
                self.dim_source, self.dim_target
            )));
        }
        if self.n_clusters == 0 || self.points_per_cluster == 0 {
            return Err(Error::Config(
                "n_clusters and points_per_cluster must be positive".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::Config("cluster_spread must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PairedSpaces {
    pub source: EmbeddingSpace,
    pub target: EmbeddingSpace,
    pub gold: Dictionary,
    pub planted_map: AlignmentMap,
    /// Cluster index of every target item, in target order.
    pub clusters: Vec<usize>,
}

fn gaussian_vec(rng: &mut Rng, n: usize, sigma: f64) -> Vec<f64> {
    (0..n)
        .map(|_| sigma * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>()
}

/// A `rows × cols` matrix with orthonormal rows (`rows ≤ cols`), from the QR
/// factorization of a Gaussian matrix with the sign ambiguity removed.
pub fn random_semi_orthogonal(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
    assert!(rows <= cols);
    let g = DMatrix::from_fn(cols, rows, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..rows {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q.transpose()
}

/// Zipf-distributed counts: `10·n` draws over frequency ranks, with ranks
/// assigned to items by a seeded shuffle.
fn zipf_counts(n: usize, rng: &mut Rng) -> Vec<u64> {
    let mut counts = vec![0u64; n];
    if n == 0 {
        return counts;
    }
    let mut rank_to_item: Vec<usize> = (0..n).collect();
    rank_to_item.shuffle(rng);
    let zipf = Zipf::new(n as f64, ZIPF_EXPONENT).expect("valid zipf parameters");
    for _ in 0..10 * n {
        let rank = zipf.sample(rng) as usize - 1;
        counts[rank_to_item[rank.min(n - 1)]] += 1;
    }
    counts
}

/// Generates a target mixture, a source space `Aᵀ·t + ε` related to it by a
/// planted semi-orthogonal `A`, and the gold pairing.
///
/// Target ids are `w00000…` in generation order; source ids are `r00000…`
/// with the source items in a shuffled order, so ids carry no pairing
/// information. Sources inherit the frequency of their gold target.
pub fn synth_paired_spaces(cfg: &SynthConfig) -> Result<PairedSpaces> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let (d2, d1) = (cfg.dim_target, cfg.dim_source);
    let n = cfg.n_clusters * cfg.points_per_cluster;

    let a = random_semi_orthogonal(d2, d1, &mut rng);
    let centers: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|_| gaussian_vec(&mut rng, d2, 1.0))
        .collect();

    let mut target = EmbeddingSpace::new("target", d2);
    let mut clusters = Vec::with_capacity(n);
    for c in 0..cfg.n_clusters {
        for _ in 0..cfg.points_per_cluster {
            let offset = gaussian_vec(&mut rng, d2, cfg.cluster_spread);
            let v: Vec<f64> = centers[c].iter().zip(&offset).map(|(m, o)| m + o).collect();
            target.push(format!("w{:05}", target.len()), &v)?;
            clusters.push(c);
        }
    }
    let counts = zipf_counts(n, &mut rng);
    for (i, &count) in counts.iter().enumerate() {
        target.set_freq(&format!("w{i:05}"), count)?;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let at = a.transpose();
    let mut source = EmbeddingSpace::new("source", d1);
    let mut gold = Dictionary::new(Provenance::Gold);
    for (s, &t) in order.iter().enumerate() {
        let tv = nalgebra::DVector::from_column_slice(target.vector(t));
        let mut v: Vec<f64> = (&at * tv).iter().copied().collect();
        if cfg.noise_sigma > 0.0 {
            let eps = gaussian_vec(&mut rng, d1, cfg.noise_sigma);
            v.iter_mut().zip(eps).for_each(|(x, e)| *x += e);
        }
        let sid = format!("r{s:05}");
        source.push(sid.clone(), &v)?;
        source.set_freq(&sid, counts[t])?;
        gold.push(sid, target.id(t));
    }

    Ok(PairedSpaces {
        source,
        target,
        gold,
        planted_map: AlignmentMap::from_parts(a, true),
        clusters,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Fraction of gold pairs that appear as a labeled item with a text.
    pub coverage: f64,
    /// Probability that an item's label (and its text's noun) names a wrong
    /// target.
    pub label_noise: f64,
    /// Unmatched nouns added to each text.
    pub distractor_nouns: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            coverage: 0.5,
            label_noise: 0.1,
            distractor_nouns: 1,
            seed: 0,
        }
    }
}

/// Builds a corpus where each covered gold pair `(r, w)` becomes an item
/// labeled `{w}` scoped to a text mentioning the noun `w`. Noisy items use
/// some other target id for both the label and the noun.
pub fn synth_labeled_corpus(
    gold: &Dictionary,
    target: &EmbeddingSpace,
    cfg: &CorpusConfig,
) -> Result<LabeledCorpus> {
    if !(0.0..=1.0).contains(&cfg.coverage) || !(0.0..=1.0).contains(&cfg.label_noise) {
        return Err(Error::Config(
            "coverage and label_noise must lie in [0, 1]".into(),
        ));
    }
    if target.len() < 2 {
        return Err(Error::Config("target space needs at least two items".into()));
    }
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut chosen: Vec<usize> = (0..gold.len()).collect();
    chosen.shuffle(&mut rng);
    chosen.truncate((cfg.coverage * gold.len() as f64).round() as usize);
    chosen.sort_unstable();

    let other = |rng: &mut Rng, not: &str| loop {
        let id = target.id(rng.random_range(0..target.len()));
        if id != not {
            return id.to_string();
        }
    };

    let mut corpus = LabeledCorpus::default();
    for (k, &p) in chosen.iter().enumerate() {
        let (source_id, true_target) = &gold.pairs()[p];
        let noun = if rng.random::<f64>() < cfg.label_noise {
            other(&mut rng, true_target)
        } else {
            true_target.clone()
        };
        let text_id = format!("q{k:05}");
        let mut tokens = vec!["buy".to_string(), noun.clone()];
        let mut noun_flags = vec![false, true];
        for _ in 0..cfg.distractor_nouns {
            tokens.push(other(&mut rng, &noun));
            noun_flags.push(true);
        }
        tokens.push("online".into());
        noun_flags.push(false);
        corpus.items.push(LabeledItem {
            source_id: source_id.clone(),
            labels: [noun].into(),
            text_id: Some(text_id.clone()),
        });
        corpus.texts.push(Text {
            text_id,
            tokens,
            noun_flags,
            token_ids: None,
        });
    }
    Ok(corpus)
}

/// Queries and targets where one target sits close to every query.
#[derive(Debug, Clone)]
pub struct HubInstance {
    pub queries: EmbeddingSpace,
    pub targets: EmbeddingSpace,
    /// `q_i ↔ t_i`; the hub has no partner.
    pub gold: Dictionary,
    pub hub_id: String,
}

/// In `n + 1` dimensions: queries `q_i ∝ e0 + 0.5·e_i`, targets
/// `t_i ∝ 0.3·e0 + e_i` and the hub `e0`. Cosine sends every query to the
/// hub; CSLS with `2 ≤ k ≤ n` sends each `q_i` to `t_i`.
pub fn crafted_hub_instance(n: usize) -> Result<HubInstance> {
    if n < 2 {
        return Err(Error::Config("hub instance needs at least two queries".into()));
    }
    let dim = n + 1;
    let unit = |mut v: Vec<f64>| {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    };
    let mut queries = EmbeddingSpace::new("queries", dim);
    let mut targets = EmbeddingSpace::new("targets", dim);
    let mut gold = Dictionary::new(Provenance::Gold);
    for i in 1..=n {
        let mut q = vec![0.0; dim];
        q[0] = 1.0;
        q[i] = 0.5;
        let mut t = vec![0.0; dim];
        t[0] = 0.3;
        t[i] = 1.0;
        let (qid, tid) = (format!("q{i:03}"), format!("t{i:03}"));
        queries.push(qid.clone(), &unit(q))?;
        targets.push(tid.clone(), &unit(t))?;
        gold.push(qid, tid);
    }
    let mut hub = vec![0.0; dim];
    hub[0] = 1.0;
    targets.push("hub", &hub)?;
    Ok(HubInstance {
        queries,
        targets,
        gold,
        hub_id: "hub".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::SimilarityTable;

    #[test]
    fn noiseless_square_case_is_exact() {
        let cfg = SynthConfig {
            dim_target: 6,
            dim_source: 6,
            n_clusters: 1,
            points_per_cluster: 20,
            noise_sigma: 0.0,
            seed: 11,
            ..SynthConfig::default()
        };
        let p = synth_paired_spaces(&cfg).unwrap();
        assert!(p.planted_map.orthogonality_residual() < 1e-12);
        for (s, t) in p.gold.iter() {
            let mapped = p.planted_map.apply(p.source.get(s).unwrap()).unwrap();
            for (a, b) in mapped.iter().zip(p.target.get(t).unwrap()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_output() {
        let cfg = SynthConfig {
            seed: 5,
            ..SynthConfig::default()
        };
        let a = synth_paired_spaces(&cfg).unwrap();
        let b = synth_paired_spaces(&cfg).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.target, b.target);
        assert_eq!(a.gold, b.gold);
        assert_eq!(a.planted_map, b.planted_map);
        let c = synth_paired_spaces(&SynthConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a.target, c.target);
    }

    #[test]
    fn planted_map_nearest_neighbor_is_gold() {
        let p = synth_paired_spaces(&SynthConfig {
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let mapped = p.planted_map.apply_space(&p.source).unwrap();
        let mut hits = 0;
        for (s, t) in p.gold.iter() {
            let v = mapped.get(s).unwrap();
            let nearest = (0..p.target.len())
                .min_by(|&a, &b| {
                    let da: f64 = p.target.vector(a).iter().zip(v).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = p.target.vector(b).iter().zip(v).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            hits += (p.target.id(nearest) == t) as usize;
        }
        assert!(hits as f64 >= 0.99 * p.gold.len() as f64, "{hits}");
    }

    #[test]
    fn frequencies_follow_gold() {
        let p = synth_paired_spaces(&SynthConfig::default()).unwrap();
        assert!(p.target.freqs().iter().sum::<u64>() == 10 * p.target.len() as u64);
        for (s, t) in p.gold.iter() {
            let (si, ti) = (p.source.lookup(s).unwrap(), p.target.lookup(t).unwrap());
            assert_eq!(p.source.freq(si), p.target.freq(ti));
        }
    }

    #[test]
    fn rejects_source_smaller_than_target() {
        let cfg = SynthConfig {
            dim_target: 16,
            dim_source: 8,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_paired_spaces(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn corpus_noise_and_coverage() {
        let p = synth_paired_spaces(&SynthConfig::default()).unwrap();
        let cfg = CorpusConfig {
            coverage: 0.5,
            label_noise: 0.0,
            ..CorpusConfig::default()
        };
        let c = synth_labeled_corpus(&p.gold, &p.target, &cfg).unwrap();
        assert_eq!(c.items.len(), 200);
        for item in &c.items {
            let label = item.labels.iter().next().unwrap();
            assert!(p.gold.contains(&item.source_id, label));
        }
        c.validate().unwrap();
    }

    #[test]
    fn hub_instance_has_a_cosine_hub() {
        let h = crafted_hub_instance(20).unwrap();
        let cos = SimilarityTable::cosine(&h.queries, &h.targets).unwrap();
        let hub = h.targets.lookup("hub").unwrap();
        for q in 0..h.queries.len() {
            let best = (0..h.targets.len())
                .max_by(|&a, &b| cos.get(q, a).total_cmp(&cos.get(q, b)))
                .unwrap();
            assert_eq!(best, hub);
        }
    }
}
