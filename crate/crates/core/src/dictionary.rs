//! Source→target supervision: structure dictionaries induced by mutual
//! nearest neighbors under CSLS, semantic dictionaries from label/noun
//! matches, and noun-stratified subsampling.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::AlignmentMap;
use crate::similarity::{argmax_by_id, rank_order, SimilarityTable};
use crate::space::{top_n_indices, EmbeddingSpace};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Structure,
    Semantic,
    Gold,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Structure => "structure",
            Provenance::Semantic => "semantic",
            Provenance::Gold => "gold",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "structure" => Ok(Self::Structure),
            "semantic" => Ok(Self::Semantic),
            "gold" => Ok(Self::Gold),
            other => Err(Error::Config(format!("unknown provenance `{other}`"))),
        }
    }
}

/// Ordered, duplicate-free list of `(source_id, target_id)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dictionary {
    pairs: Vec<(String, String)>,
    seen: HashSet<(String, String)>,
    provenance: Provenance,
}

impl Dictionary {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            pairs: Vec::new(),
            seen: HashSet::new(),
            provenance,
        }
    }

    /// Builds a dictionary, dropping repeated pairs after their first
    /// occurrence.
    pub fn from_pairs<I, S, T>(provenance: Provenance, pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let mut d = Self::new(provenance);
        for (s, t) in pairs {
            d.push(s, t);
        }
        d
    }

    /// Returns false when the pair was already present.
    pub fn push(&mut self, source: impl Into<String>, target: impl Into<String>) -> bool {
        let pair = (source.into(), target.into());
        if self.seen.contains(&pair) {
            return false;
        }
        self.seen.insert(pair.clone());
        self.pairs.push(pair);
        true
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, source: &str, target: &str) -> bool {
        self.seen
            .contains(&(source.to_string(), target.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.pairs.iter().map(|(s, t)| (s.as_str(), t.as_str()))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        for (s, t) in self.iter() {
            writeln!(w, "{s}\t{t}\t{}", self.provenance)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Reads `source<TAB>target<TAB>provenance` lines. All lines must share
    /// one provenance; an empty file needs `fallback`.
    pub fn load(path: &Path, fallback: Option<Provenance>) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut dict: Option<Dictionary> = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(
                    path,
                    idx + 1,
                    "expected `source<TAB>target<TAB>provenance`",
                ));
            }
            let prov: Provenance = fields[2]
                .parse()
                .map_err(|e: Error| Error::parse(path, idx + 1, e.to_string()))?;
            let d = dict.get_or_insert_with(|| Dictionary::new(prov));
            if d.provenance != prov {
                return Err(Error::parse(path, idx + 1, "mixed provenance tags"));
            }
            d.push(fields[0], fields[1]);
        }
        dict.or_else(|| fallback.map(Dictionary::new))
            .ok_or_else(|| Error::parse(path, 1, "empty dictionary with unknown provenance"))
    }

    /// Checks that every pair resolves in the given spaces.
    pub fn check_resolves(&self, source: &EmbeddingSpace, target: &EmbeddingSpace) -> Result<()> {
        for (s, t) in self.iter() {
            source.lookup(s)?;
            target.lookup(t)?;
        }
        Ok(())
    }
}

/// An object region with the labels a detector assigned to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledItem {
    #[serde(rename = "item_id")]
    pub source_id: String,
    pub labels: BTreeSet<String>,
    /// Restricts matching to nouns of this text. Unscoped items match nouns
    /// from every text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_id: Option<String>,
}

/// A tokenized query or ad text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Text {
    pub text_id: String,
    pub tokens: Vec<String>,
    pub noun_flags: Vec<bool>,
    /// Target-space id of each token occurrence (e.g. contextual
    /// embeddings). Defaults to the token string itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_ids: Option<Vec<String>>,
}

impl Text {
    fn target_id(&self, pos: usize) -> &str {
        match &self.token_ids {
            Some(ids) => &ids[pos],
            None => &self.tokens[pos],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum CorpusRecord {
    Item(LabeledItem),
    Text(Text),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledCorpus {
    pub items: Vec<LabeledItem>,
    pub texts: Vec<Text>,
}

impl LabeledCorpus {
    pub fn validate(&self) -> Result<()> {
        for t in &self.texts {
            if t.noun_flags.len() != t.tokens.len() {
                return Err(Error::Contract(format!(
                    "text `{}` has {} tokens but {} noun flags",
                    t.text_id,
                    t.tokens.len(),
                    t.noun_flags.len()
                )));
            }
            if let Some(ids) = &t.token_ids {
                if ids.len() != t.tokens.len() {
                    return Err(Error::Contract(format!(
                        "text `{}` has {} tokens but {} token ids",
                        t.text_id,
                        t.tokens.len(),
                        ids.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Reads JSON lines; each record is either an item
    /// (`item_id`, `labels`, optional `text_id`) or a text
    /// (`text_id`, `tokens`, `noun_flags`, optional `token_ids`).
    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut corpus = Self::default();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: CorpusRecord = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
            match record {
                CorpusRecord::Item(i) => corpus.items.push(i),
                CorpusRecord::Text(t) => corpus.texts.push(t),
            }
        }
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        for item in &self.items {
            serde_json::to_writer(&mut *w, item)?;
            w.write_all(b"\n")?;
        }
        for text in &self.texts {
            serde_json::to_writer(&mut *w, text)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Builds the pseudo structure dictionary.
///
/// For each of the `n_frequent` most frequent targets, the `m_candidates`
/// mapped sources closest in cosine are rescored by CSLS; the best one is
/// kept only if the target is in turn its best CSLS match among the frequent
/// targets. CSLS neighborhoods are computed between the mapped source space
/// and the frequent-target subset, with `k` clamped to the smaller of the two.
pub fn build_structure_dictionary(
    map: &AlignmentMap,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    n_frequent: usize,
    m_candidates: usize,
    k: usize,
) -> Result<Dictionary> {
    if n_frequent == 0 || m_candidates == 0 || k == 0 {
        return Err(Error::Config(
            "n_frequent, m_candidates and k must be positive".into(),
        ));
    }
    if source.is_empty() || target.is_empty() {
        return Ok(Dictionary::new(Provenance::Structure));
    }
    let mapped = map.apply_space(source)?;
    let frequent = target.select(&top_n_indices(target, n_frequent));
    let k = k.min(frequent.len()).min(mapped.len());

    let cos = SimilarityTable::cosine(&mapped, &frequent)?;
    let scores = cos.clone().into_csls(k)?;
    let source_id = |i: usize| mapped.id(i);
    let target_id = |j: usize| frequent.id(j);

    let mut dict = Dictionary::new(Provenance::Structure);
    for j in 0..frequent.len() {
        let mut candidates: Vec<usize> = (0..mapped.len()).collect();
        candidates.sort_by(|&a, &b| rank_order(cos.get(a, j), source_id(a), cos.get(b, j), source_id(b)));
        candidates.truncate(m_candidates);
        let best = argmax_by_id(candidates.iter().map(|&i| (i, scores.get(i, j))), source_id)
            .expect("nonempty candidates");
        let back = argmax_by_id(scores.row(best).iter().copied().enumerate(), target_id)
            .expect("nonempty targets");
        if back == j {
            dict.push(source_id(best), target_id(j));
        }
    }
    Ok(dict)
}

/// A semantic dictionary together with the averaged noun vectors its target
/// ids refer to.
#[derive(Debug, Clone)]
pub struct SemanticDictionary {
    pub dictionary: Dictionary,
    /// One vector per paired noun: the mean of its target-space vectors over
    /// every noun occurrence in the corpus. Frequencies count occurrences.
    pub nouns: EmbeddingSpace,
}

/// Pairs each labeled item with the nouns of the texts in its scope whose
/// string appears among its labels.
pub fn build_semantic_dictionary(
    corpus: &LabeledCorpus,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
) -> Result<SemanticDictionary> {
    corpus.validate()?;
    for item in &corpus.items {
        source.lookup(&item.source_id)?;
    }

    let mut scoped: HashMap<&str, Vec<&LabeledItem>> = HashMap::new();
    let mut global: Vec<&LabeledItem> = Vec::new();
    for item in &corpus.items {
        match &item.text_id {
            Some(t) => scoped.entry(t.as_str()).or_default().push(item),
            None => global.push(item),
        }
    }

    let mut dict = Dictionary::new(Provenance::Semantic);
    // noun -> (sum of occurrence vectors, occurrence count)
    let mut occurrences: BTreeMap<&str, (Vec<f64>, u64)> = BTreeMap::new();
    for text in &corpus.texts {
        let local = scoped.get(text.text_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        for (pos, noun) in text.tokens.iter().enumerate() {
            if !text.noun_flags[pos] {
                continue;
            }
            let vector = target.get(text.target_id(pos)).ok_or_else(|| {
                Error::UnknownId(text.target_id(pos).to_string())
            })?;
            let entry = occurrences
                .entry(noun.as_str())
                .or_insert_with(|| (vec![0.0; target.dim()], 0));
            entry.0.iter_mut().zip(vector).for_each(|(s, x)| *s += x);
            entry.1 += 1;

            for item in global.iter().chain(local) {
                if item.labels.contains(noun) {
                    dict.push(item.source_id.as_str(), noun.as_str());
                }
            }
        }
    }

    let paired: BTreeSet<&str> = dict.iter().map(|(_, t)| t).collect();
    let mut nouns = EmbeddingSpace::new("nouns", target.dim());
    for (noun, (sum, count)) in &occurrences {
        if !paired.contains(noun) {
            continue;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / *count as f64).collect();
        nouns.push(*noun, &mean)?;
        nouns.set_freq(noun, *count)?;
    }
    Ok(SemanticDictionary {
        dictionary: dict,
        nouns,
    })
}

/// Keeps `round(fraction · n)` pairs (at least one) of every target-id
/// stratum, chosen by a seeded shuffle. Kept pairs stay in input order.
pub fn sample_dictionary(dict: &Dictionary, fraction: f64, seed: u64) -> Result<Dictionary> {
    if dict.is_empty() {
        return Err(Error::Contract("cannot sample an empty dictionary".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Contract(format!(
            "sampling fraction {fraction} outside (0, 1]"
        )));
    }
    let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (_, t)) in dict.iter().enumerate() {
        strata.entry(t).or_default().push(i);
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(dict.len());
    for members in strata.values_mut() {
        let quota = ((fraction * members.len() as f64).round() as usize).max(1);
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..quota.min(members.len())]);
    }
    keep.sort_unstable();
    Ok(Dictionary::from_pairs(
        dict.provenance,
        keep.into_iter().map(|i| dict.pairs[i].clone()),
    ))
}
