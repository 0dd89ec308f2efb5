//! Query/ad relevance at toy scale: a logistic scorer over features built
//! from the query, the ad text and the ad's region vectors, with regions
//! either mapped into the query space first or used raw.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::auc;
use crate::map::AlignmentMap;
use crate::synth::random_semi_orthogonal;
use crate::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAdsInstance {
    /// Pooled query embedding, `d2` long.
    pub query: Vec<f64>,
    /// Ad text embedding, `d2` long.
    pub text: Vec<f64>,
    /// Ad image regions, each `d1` long.
    pub regions: Vec<Vec<f64>>,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    #[default]
    ConcatMean,
    ConcatMax,
}

/// `[query, text, pooled regions, query ⊙ pooled regions]`, `4·d2` long.
///
/// With a map, regions are mapped into the query space; without one they are
/// truncated or zero-padded to the query dimension.
pub fn featurize(inst: &QueryAdsInstance, map: Option<&AlignmentMap>, recipe: Recipe) -> Result<Vec<f64>> {
    let d2 = inst.query.len();
    if inst.text.len() != d2 {
        return Err(Error::Dimension {
            expected: d2,
            got: inst.text.len(),
        });
    }
    let Some(first) = inst.regions.first() else {
        return Err(Error::Contract("an ad needs at least one region".into()));
    };
    if let Some(bad) = inst.regions.iter().find(|r| r.len() != first.len()) {
        return Err(Error::Dimension {
            expected: first.len(),
            got: bad.len(),
        });
    }
    if let Some(m) = map {
        if m.d2() != d2 {
            return Err(Error::Dimension {
                expected: d2,
                got: m.d2(),
            });
        }
    }
    let projected = inst
        .regions
        .iter()
        .map(|r| match map {
            Some(m) => m.apply(r),
            None => {
                let mut v = r.clone();
                v.resize(d2, 0.0);
                Ok(v)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled: Vec<f64> = (0..d2)
        .map(|c| {
            let col = projected.iter().map(|r| r[c]);
            match recipe {
                Recipe::ConcatMean => col.sum::<f64>() / projected.len() as f64,
                Recipe::ConcatMax => col.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let mut f = Vec::with_capacity(4 * d2);
    f.extend_from_slice(&inst.query);
    f.extend_from_slice(&inst.text);
    f.extend_from_slice(&pooled);
    f.extend(inst.query.iter().zip(&pooled).map(|(q, p)| q * p));
    Ok(f)
}

/// For each positive, with probability `prob` appends a negative copy whose
/// query comes from a uniformly chosen instance with a different query.
pub fn make_negatives(positives: &[QueryAdsInstance], prob: f64, seed: u64) -> Result<Vec<QueryAdsInstance>> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::Config(format!("negative probability {prob} outside [0, 1]")));
    }
    let key = |q: &[f64]| q.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
    let distinct: HashSet<Vec<u64>> = positives.iter().map(|p| key(&p.query)).collect();
    if distinct.len() < 2 {
        return Err(Error::Contract("negative sampling needs at least two distinct queries".into()));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(positives.len() + (prob * positives.len() as f64) as usize + 1);
    for p in positives {
        out.push(p.clone());
        if rng.random::<f64>() < prob {
            let other = loop {
                let j = rng.random_range(0..positives.len());
                if positives[j].query != p.query {
                    break j;
                }
            };
            out.push(QueryAdsInstance {
                query: positives[other].query.clone(),
                label: 0,
                ..p.clone()
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScorer {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub recipe: Recipe,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl RelevanceScorer {
    pub fn zeros(dim: usize, recipe: Recipe) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
            recipe,
        }
    }

    pub fn logit(&self, features: &[f64]) -> f64 {
        self.weights.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    pub fn score(&self, features: &[f64]) -> f64 {
        sigmoid(self.logit(features))
    }

    /// Scores an instance through [`featurize`].
    pub fn score_instance(&self, inst: &QueryAdsInstance, map: Option<&AlignmentMap>) -> Result<f64> {
        Ok(self.score(&featurize(inst, map, self.recipe)?))
    }
}

/// Mean binary cross-entropy of the scorer over rows of `x`, and its
/// gradient with respect to the weights and the bias.
pub fn bce_loss_and_grad(scorer: &RelevanceScorer, x: &DMatrix<f64>, labels: &[u8]) -> (f64, Vec<f64>, f64) {
    let n = x.nrows() as f64;
    let w = DVector::from_column_slice(&scorer.weights);
    let z = x * &w;
    let mut loss = 0.0;
    let mut resid = DVector::zeros(x.nrows());
    for (i, (&zi, &y)) in z.iter().zip(labels).enumerate() {
        let zi = zi + scorer.bias;
        let y = y as f64;
        // −y·log σ(z) − (1 − y)·log(1 − σ(z))
        loss += y * softplus(-zi) + (1.0 - y) * softplus(zi);
        resid[i] = (sigmoid(zi) - y) / n;
    }
    let gw = x.transpose() * &resid;
    (loss / n, gw.iter().copied().collect(), resid.sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Initial weights are uniform in `±init_scale`; 0 starts from zeros.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 1.0,
            init_scale: 0.0,
            seed: 0,
        }
    }
}

/// Full-batch gradient descent on the BCE loss. A step that would raise the
/// loss is rejected and the learning rate halved, so the recorded losses
/// never increase. Returns the scorer and the loss before every epoch.
pub fn train_on_features(
    x: &DMatrix<f64>,
    labels: &[u8],
    recipe: Recipe,
    cfg: &TrainConfig,
) -> Result<(RelevanceScorer, Vec<f64>)> {
    if x.nrows() != labels.len() {
        return Err(Error::Contract(format!("{} rows but {} labels", x.nrows(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Contract("training data needs both classes".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::Config("lr must be positive".into()));
    }
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut scorer = RelevanceScorer::zeros(x.ncols(), recipe);
    if cfg.init_scale > 0.0 {
        let a = cfg.init_scale;
        scorer.weights.iter_mut().for_each(|w| *w = rng.random_range(-a..a));
    }
    let mut lr = cfg.lr;
    let (mut loss, mut gw, mut gb) = bce_loss_and_grad(&scorer, x, labels);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        losses.push(loss);
        let mut trial = scorer.clone();
        trial.weights.iter_mut().zip(&gw).for_each(|(w, g)| *w -= lr * g);
        trial.bias -= lr * gb;
        let (l, w, b) = bce_loss_and_grad(&trial, x, labels);
        if !l.is_finite() {
            return Err(Error::Numeric("BCE loss became non-finite".into()));
        }
        if l > loss {
            lr *= 0.5;
            continue;
        }
        (scorer, loss, gw, gb) = (trial, l, w, b);
    }
    Ok((scorer, losses))
}

pub fn feature_matrix(data: &[QueryAdsInstance], map: Option<&AlignmentMap>, recipe: Recipe) -> Result<DMatrix<f64>> {
    let rows = data
        .iter()
        .map(|i| featurize(i, map, recipe))
        .collect::<Result<Vec<_>>>()?;
    let dim = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(DMatrix::from_row_slice(data.len(), dim, &flat))
}

pub fn train_relevance(
    data: &[QueryAdsInstance],
    map: Option<&AlignmentMap>,
    recipe: Recipe,
    cfg: &TrainConfig,
) -> Result<(RelevanceScorer, Vec<f64>)> {
    let x = feature_matrix(data, map, recipe)?;
    let labels: Vec<u8> = data.iter().map(|i| i.label).collect();
    train_on_features(&x, &labels, recipe, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryAdsConfig {
    /// Number of positive (query, ad) pairs generated.
    pub n: usize,
    pub n_themes: usize,
    pub regions_per_ad: usize,
    /// Fraction of ads whose theme shows only in their regions; the rest
    /// show it only in their text.
    pub region_dependence: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for QueryAdsConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            n_themes: 16,
            regions_per_ad: 3,
            region_dependence: 1.0,
            noise: 0.3,
            seed: 0,
        }
    }
}

fn unit_gaussian(rng: &mut Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn noisy_unit(center: &[f64], noise: f64, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = center
        .iter()
        .map(|c| c + noise * Distribution::<f64>::sample(&StandardNormal, rng) / (center.len() as f64).sqrt())
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Positive (query, ad) pairs sharing a theme. Queries and ad texts live in
/// the `d2` space; regions are produced in the `d1` space as
/// `Aᵀ·(theme + noise)` for the planted `A`. Region-dependent ads carry an
/// unrelated random text; the others carry random regions.
pub fn synth_query_ads(cfg: &QueryAdsConfig, planted: &AlignmentMap) -> Result<Vec<QueryAdsInstance>> {
    if cfg.n < 4 {
        return Err(Error::Config("need at least 4 instances".into()));
    }
    if cfg.n_themes < 2 || cfg.regions_per_ad == 0 {
        return Err(Error::Config("need at least 2 themes and 1 region per ad".into()));
    }
    if !(0.0..=1.0).contains(&cfg.region_dependence) || !(cfg.noise >= 0.0) {
        return Err(Error::Config("region_dependence must lie in [0, 1] and noise be >= 0".into()));
    }
    let (d2, d1) = (planted.d2(), planted.d1());
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let themes: Vec<Vec<f64>> = (0..cfg.n_themes).map(|_| unit_gaussian(&mut rng, d2)).collect();
    let at = planted.matrix().transpose();
    let lift = |v: &[f64]| -> Vec<f64> { (&at * DVector::from_column_slice(v)).iter().copied().collect() };

    let mut out = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let theme = &themes[rng.random_range(0..cfg.n_themes)];
        let query = noisy_unit(theme, cfg.noise, &mut rng);
        let region_dependent = rng.random::<f64>() < cfg.region_dependence;
        let (text, regions) = if region_dependent {
            let text = unit_gaussian(&mut rng, d2);
            let regions = (0..cfg.regions_per_ad)
                .map(|_| lift(&noisy_unit(theme, cfg.noise, &mut rng)))
                .collect();
            (text, regions)
        } else {
            let text = noisy_unit(theme, cfg.noise, &mut rng);
            let regions = (0..cfg.regions_per_ad)
                .map(|_| unit_gaussian(&mut rng, d1))
                .collect();
            (text, regions)
        };
        out.push(QueryAdsInstance {
            query,
            text,
            regions,
            label: 1,
        });
    }
    Ok(out)
}

/// Scores `dot(query, pooled mapped regions)`: the relevance rule the
/// synthetic data is built on.
pub fn oracle_scorer(d2: usize) -> RelevanceScorer {
    let mut s = RelevanceScorer::zeros(4 * d2, Recipe::ConcatMean);
    s.weights[3 * d2..].iter_mut().for_each(|w| *w = 1.0);
    s
}

pub fn write_dataset<W: Write>(data: &[QueryAdsInstance], mut w: W) -> Result<()> {
    for inst in data {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<QueryAdsInstance>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Aligned,
    Unaligned,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Aligned => "aligned",
            Condition::Unaligned => "unaligned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub data: QueryAdsConfig,
    pub dim_target: usize,
    pub dim_source: usize,
    pub negative_prob: f64,
    pub train_fraction: f64,
    pub recipe: Recipe,
    pub train: TrainConfig,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            data: QueryAdsConfig::default(),
            dim_target: 16,
            dim_source: 32,
            negative_prob: 0.25,
            train_fraction: 0.8,
            recipe: Recipe::ConcatMean,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRow {
    pub condition: Condition,
    pub seed: u64,
    pub auc: f64,
}

/// For every seed: plants a map, generates positives, adds negatives,
/// splits train/test, and reports test AUC with regions mapped by `map`
/// (the planted map when `None`) and with raw regions.
pub fn run_demo(cfg: &DemoConfig, seeds: &[u64], map: Option<&AlignmentMap>) -> Result<Vec<DemoRow>> {
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
    }
    let mut rows = Vec::with_capacity(2 * seeds.len());
    for &seed in seeds {
        let mut rng = Rng::seed_from_u64(seed);
        let planted = AlignmentMap::new(random_semi_orthogonal(cfg.dim_target, cfg.dim_source, &mut rng), false)?;
        let aligning = map.unwrap_or(&planted);
        let data_cfg = QueryAdsConfig {
            seed,
            ..cfg.data.clone()
        };
        let positives = synth_query_ads(&data_cfg, &planted)?;
        let mut all = make_negatives(&positives, cfg.negative_prob, seed.wrapping_add(1))?;
        all.shuffle(&mut rng);
        let cut = (cfg.train_fraction * all.len() as f64).round() as usize;
        let (train, test) = all.split_at(cut);
        let test_labels: Vec<u8> = test.iter().map(|i| i.label).collect();
        for condition in [Condition::Aligned, Condition::Unaligned] {
            let m = match condition {
                Condition::Aligned => Some(aligning),
                Condition::Unaligned => None,
            };
            let train_cfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let (scorer, _) = train_relevance(train, m, cfg.recipe, &train_cfg)?;
            let x = feature_matrix(test, m, cfg.recipe)?;
            let scores: Vec<f64> = x.row_iter().map(|r| scorer.logit(r.transpose().as_slice())).collect();
            rows.push(DemoRow {
                condition,
                seed,
                auc: auc(&scores, &test_labels)?,
            });
        }
    }
    Ok(rows)
}

pub fn write_demo_csv<W: Write>(rows: &[DemoRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["condition", "seed", "auc"])?;
    for r in rows {
        out.write_record([r.condition.name().to_string(), r.seed.to_string(), r.auc.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Mean AUC of one condition.
pub fn mean_auc(rows: &[DemoRow], condition: Condition) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| r.condition == condition).map(|r| r.auc).collect();
    v.iter().sum::<f64>() / v.len() as f64
}
