//! The three-stage alignment procedure and its ablations.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::adversarial::{train_adversarial, AdvConfig, AdversarialResult};
use crate::dictionary::{
    build_semantic_dictionary, build_structure_dictionary, sample_dictionary, Dictionary,
    LabeledCorpus,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::map::AlignmentMap;
use crate::procrustes::{assemble_pairs, solve_procrustes};
use crate::space::{EmbeddingSpace, Normalization};
use crate::synth::{synth_labeled_corpus, synth_paired_spaces, CorpusConfig, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Distribution,
    Coarse,
    Refine,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Distribution, Stage::Coarse, Stage::Refine];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Distribution => "distribution",
            Stage::Coarse => "coarse",
            Stage::Refine => "refine",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "distribution" => Ok(Stage::Distribution),
            "coarse" => Ok(Stage::Coarse),
            "refine" => Ok(Stage::Refine),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

/// Parses a comma-separated stage list such as `distribution,coarse`.
pub fn parse_stages(s: &str) -> Result<Vec<Stage>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// Starting map when the distribution stage is skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMap {
    /// `[I 0]`: the first `d2` source coordinates.
    Identity,
    /// A map supplied with the inputs.
    Given,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub normalization: Normalization,
    pub init: Option<InitMap>,
    pub n_frequent: usize,
    pub m_candidates: usize,
    pub csls_k: usize,
    pub semantic_fraction: f64,
    /// Rounds of structure-dictionary induction and Procrustes in the
    /// coarse stage.
    pub coarse_iterations: usize,
    /// Store wall-clock time per stage in the report. Off by default so
    /// reports are byte-reproducible.
    pub record_timing: bool,
    pub adv: AdvConfig,
    pub eval: EvalOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stages: Stage::ALL.to_vec(),
            normalization: Normalization::CenterThenUnit,
            init: None,
            n_frequent: 30,
            m_candidates: 10,
            csls_k: 10,
            semantic_fraction: 0.2,
            coarse_iterations: 1,
            record_timing: false,
            adv: AdvConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// All stages with [`AdvConfig::desk_scale`] for the adversarial part.
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            seed,
            adv: AdvConfig::desk_scale(seed),
            ..Self::default()
        }
    }

    pub fn has(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if self.n_frequent == 0 || self.m_candidates == 0 || self.csls_k == 0 {
            return Err(Error::Config(
                "n_frequent, m_candidates and csls_k must be positive".into(),
            ));
        }
        if !(self.semantic_fraction > 0.0 && self.semantic_fraction <= 1.0) {
            return Err(Error::Config("semantic_fraction must lie in (0, 1]".into()));
        }
        if self.coarse_iterations == 0 {
            return Err(Error::Config("coarse_iterations must be at least 1".into()));
        }
        if self.has(Stage::Coarse) && !self.has(Stage::Distribution) && self.init.is_none() {
            return Err(Error::Config(
                "the coarse stage needs the distribution stage or an explicit init map".into(),
            ));
        }
        self.adv.validate()
    }
}

/// Everything a run consumes.
#[derive(Debug, Clone, Copy)]
pub struct PipelineInput<'a> {
    pub source: &'a EmbeddingSpace,
    pub target: &'a EmbeddingSpace,
    pub corpus: Option<&'a LabeledCorpus>,
    /// When present, every stage is evaluated against it.
    pub gold: Option<&'a Dictionary>,
    /// Used with `init = "given"`.
    pub init_map: Option<&'a AlignmentMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub checksum: String,
    pub semi_orthogonal: bool,
    pub orthogonality_residual: f64,
    /// Pairs in the dictionary the stage solved on.
    pub dictionary_pairs: Option<usize>,
    /// Selection criterion of the chosen adversarial map.
    pub validation: Option<f64>,
    pub eval: Option<EvalReport>,
    pub wall_clock_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub stages: Vec<StageReport>,
    pub final_checksum: String,
}

impl PipelineReport {
    pub fn stage(&self, stage: Stage) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn final_eval(&self) -> Option<&EvalReport> {
        self.stages.last().and_then(|s| s.eval.as_ref())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per stage: stage, checksum, p@k columns, AvgWCD, hub max.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let ks: Vec<usize> = self
            .stages
            .iter()
            .find_map(|s| s.eval.as_ref())
            .map(|e| e.precision_at.keys().copied().collect())
            .unwrap_or_default();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["stage".to_string(), "checksum".to_string()];
        header.extend(ks.iter().map(|k| format!("p_at_{k}")));
        header.extend(["avg_wcd".to_string(), "hub_max_indegree".to_string()]);
        out.write_record(&header)?;
        for s in &self.stages {
            let mut row = vec![s.stage.to_string(), s.checksum.clone()];
            let e = s.eval.as_ref();
            for k in &ks {
                row.push(opt(e.and_then(|e| e.precision_at.get(k))));
            }
            row.push(opt(e.and_then(|e| e.avg_wcd.as_ref())));
            row.push(opt(e.and_then(|e| e.hub_max_indegree.as_ref())));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn opt<T: ToString>(v: Option<&T>) -> String {
    v.map(ToString::to_string).unwrap_or_default()
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub map: AlignmentMap,
    pub report: PipelineReport,
    pub adversarial: Option<AdversarialResult>,
    pub structure_dictionary: Option<Dictionary>,
    pub semantic_dictionary: Option<Dictionary>,
    pub sampled_dictionary: Option<Dictionary>,
}

/// `d2 × d1` map copying the first `min(d1, d2)` coordinates.
pub fn rectangular_identity(d2: usize, d1: usize) -> AlignmentMap {
    AlignmentMap::new(DMatrix::identity(d2, d1), d2 <= d1)
        .expect("identity is finite and has orthonormal rows when d2 <= d1")
}

/// Runs the configured stages in canonical order. Skipped stages leave the
/// map unchanged; a corpus is only read by the refine stage.
pub fn run_valse(input: PipelineInput<'_>, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    if cfg.has(Stage::Refine) && input.corpus.is_none() {
        return Err(Error::Config("the refine stage needs a labeled corpus".into()));
    }
    let source = input.source.normalize(cfg.normalization)?;
    let target = input.target.normalize(cfg.normalization)?;
    let (d1, d2) = (source.dim(), target.dim());

    let mut map = match (cfg.init, input.init_map) {
        (Some(InitMap::Given), Some(m)) => m.clone(),
        (Some(InitMap::Given), None) => {
            return Err(Error::Config("init = given but no initial map supplied".into()))
        }
        (Some(InitMap::Identity), _) => rectangular_identity(d2, d1),
        (None, _) => AlignmentMap::zeros(d2, d1),
    };
    if (map.d2(), map.d1()) != (d2, d1) {
        return Err(Error::Config(format!(
            "initial map is {}x{} but spaces need {d2}x{d1}",
            map.d2(),
            map.d1()
        )));
    }

    let eval_at = |m: &AlignmentMap| -> Result<Option<EvalReport>> {
        input
            .gold
            .map(|g| evaluate(m, &source, &target, g, &cfg.eval))
            .transpose()
    };
    let mut out = PipelineOutput {
        map: map.clone(),
        report: PipelineReport {
            seed: cfg.seed,
            stages: Vec::new(),
            final_checksum: String::new(),
        },
        adversarial: None,
        structure_dictionary: None,
        semantic_dictionary: None,
        sampled_dictionary: None,
    };

    for stage in Stage::ALL.into_iter().filter(|s| cfg.has(*s)) {
        let started = Instant::now();
        let mut pairs = None;
        let mut validation = None;
        match stage {
            Stage::Distribution => {
                let adv_cfg = AdvConfig {
                    seed: cfg.seed,
                    ..cfg.adv.clone()
                };
                let result = train_adversarial(&source, &target, &adv_cfg)?;
                map = result.best_map.clone();
                validation = Some(result.best_validation);
                out.adversarial = Some(result);
            }
            Stage::Coarse => {
                for _ in 0..cfg.coarse_iterations {
                    let dict = build_structure_dictionary(
                        &map,
                        &source,
                        &target,
                        cfg.n_frequent,
                        cfg.m_candidates,
                        cfg.csls_k,
                    )?;
                    if dict.is_empty() {
                        return Err(Error::Pipeline(
                            "structure dictionary is empty; increase n_frequent or m_candidates"
                                .into(),
                        ));
                    }
                    map = solve_procrustes(&assemble_pairs(&dict, &source, &target)?)?;
                    pairs = Some(dict.len());
                    out.structure_dictionary = Some(dict);
                }
            }
            Stage::Refine => {
                let corpus = input.corpus.expect("checked above");
                let semantic = build_semantic_dictionary(corpus, &source, &target)?;
                if semantic.dictionary.is_empty() {
                    return Err(Error::Pipeline(
                        "semantic dictionary is empty; no corpus noun matches an item label".into(),
                    ));
                }
                let sampled = sample_dictionary(&semantic.dictionary, cfg.semantic_fraction, cfg.seed)?;
                map = solve_procrustes(&assemble_pairs(&sampled, &source, &semantic.nouns)?)?;
                pairs = Some(sampled.len());
                out.semantic_dictionary = Some(semantic.dictionary);
                out.sampled_dictionary = Some(sampled);
            }
        }
        let elapsed = started.elapsed().as_secs_f64();
        out.report.stages.push(StageReport {
            stage,
            checksum: map.checksum(),
            semi_orthogonal: map.is_semi_orthogonal(),
            orthogonality_residual: map.orthogonality_residual(),
            dictionary_pairs: pairs,
            validation,
            eval: eval_at(&map)?,
            wall_clock_secs: cfg.record_timing.then_some(elapsed),
        });
    }
    out.report.final_checksum = map.checksum();
    out.map = map;
    Ok(out)
}

/// Owned inputs for one seed of an ablation study.
#[derive(Debug, Clone)]
pub struct AblationData {
    pub source: EmbeddingSpace,
    pub target: EmbeddingSpace,
    pub corpus: Option<LabeledCorpus>,
    pub gold: Dictionary,
}

impl AblationData {
    /// The standard synthetic benchmark for `seed`: default spaces and corpus.
    pub fn synthetic(seed: u64) -> Result<Self> {
        let p = synth_paired_spaces(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })?;
        let corpus = synth_labeled_corpus(
            &p.gold,
            &p.target,
            &CorpusConfig {
                seed,
                ..CorpusConfig::default()
            },
        )?;
        Ok(Self {
            source: p.source,
            target: p.target,
            corpus: Some(corpus),
            gold: p.gold,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub config: PipelineConfig,
}

/// `full`, `w/o refine`, `w/o coarse` and `stage-1 only` built from `base`.
pub fn standard_variants(base: &PipelineConfig) -> Vec<Variant> {
    use Stage::*;
    [
        ("full", vec![Distribution, Coarse, Refine]),
        ("w/o refine", vec![Distribution, Coarse]),
        ("w/o coarse", vec![Distribution, Refine]),
        ("stage-1 only", vec![Distribution]),
    ]
    .into_iter()
    .map(|(name, stages)| Variant {
        name: name.into(),
        config: PipelineConfig {
            stages,
            ..base.clone()
        },
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub stages: String,
    pub p_at_1: f64,
    pub avg_wcd: Option<f64>,
    pub checksum: String,
}

/// Runs every variant on the data of every seed. Each variant's config seed
/// is replaced by the shared seed.
pub fn ablate<F>(variants: &[Variant], seeds: &[u64], mut data: F) -> Result<Vec<AblationRow>>
where
    F: FnMut(u64) -> Result<AblationData>,
{
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for &seed in seeds {
        let d = data(seed)?;
        for v in variants {
            let cfg = PipelineConfig {
                seed,
                ..v.config.clone()
            };
            let input = PipelineInput {
                source: &d.source,
                target: &d.target,
                corpus: d.corpus.as_ref(),
                gold: Some(&d.gold),
                init_map: None,
            };
            let out = run_valse(input, &cfg)?;
            let eval = out.report.final_eval().cloned().unwrap_or_else(|| EvalReport::empty(cfg.eval.metric));
            rows.push(AblationRow {
                variant: v.name.clone(),
                seed,
                stages: cfg
                    .stages
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("+"),
                p_at_1: eval.p_at_1().unwrap_or(f64::NAN),
                avg_wcd: eval.avg_wcd,
                checksum: out.report.final_checksum,
            });
        }
    }
    Ok(rows)
}

/// Mean precision@1 per variant, in first-appearance order.
pub fn ablation_means(rows: &[AblationRow]) -> Vec<(String, f64)> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|n| {
            let ps: Vec<f64> = rows.iter().filter(|r| r.variant == n).map(|r| r.p_at_1).collect();
            (n.to_string(), ps.iter().sum::<f64>() / ps.len() as f64)
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["variant", "seed", "stages", "p_at_1", "avg_wcd", "checksum"])?;
    for r in rows {
        out.write_record([
            r.variant.clone(),
            r.seed.to_string(),
            r.stages.clone(),
            r.p_at_1.to_string(),
            opt(r.avg_wcd.as_ref()),
            r.checksum.clone(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
