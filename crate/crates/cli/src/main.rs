mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use xalign::dictionary::{
    build_semantic_dictionary, build_structure_dictionary, sample_dictionary, Dictionary,
    LabeledCorpus,
};
use xalign::eval::{
    dictionary_wcd, hubness, precision_at_ks, project_2d, write_hubness_csv, write_projection_csv,
    EvalReport,
};
use xalign::format::{load_frequencies, load_space, save_frequencies, save_space, SpaceFormat};
use xalign::pipeline::{parse_stages, run_valse, InitMap, PipelineConfig, PipelineInput};
use xalign::procrustes::{assemble_pairs, frobenius_loss, solve_procrustes};
use xalign::relevance::{
    run_demo, synth_query_ads, write_dataset, write_demo_csv, DemoConfig, DemoRow, QueryAdsConfig,
};
use xalign::similarity::Metric;
use xalign::synth::{synth_labeled_corpus, synth_paired_spaces, CorpusConfig, SynthConfig};
use xalign::adversarial::save_history_csv;
use xalign::{AlignmentMap, EmbeddingSpace, Error, ErrorClass, Normalization, Result};

use manifest::ManifestBuilder;

#[derive(Parser)]
#[command(name = "xalign", version, about = "Align a source embedding space onto a target space")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel scoring; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Embedding file format for reading and writing spaces.
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Text)]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Binary,
}

impl From<FormatArg> for SpaceFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Text => SpaceFormat::Text,
            FormatArg::Binary => SpaceFormat::Binary,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired synthetic spaces, a gold dictionary, the planted map,
    /// a labeled corpus and optionally query/ad instances.
    Synth(SynthArgs),
    /// Run the alignment pipeline.
    Align(AlignArgs),
    /// Build a structure or semantic dictionary.
    InduceDict(InduceArgs),
    /// Solve orthogonal Procrustes on a dictionary.
    Procrustes(ProcrustesArgs),
    /// Evaluate a saved map.
    Eval(EvalArgs),
    /// Compare relevance AUC with and without aligned regions.
    DemoRelevance(DemoArgs),
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| "expected SOURCE:TARGET".to_string())?;
    let p = |x: &str| x.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((p(a)?, p(b)?))
}

#[derive(Args)]
struct SynthArgs {
    /// Source and target dimensions as SOURCE:TARGET.
    #[arg(long, value_parser = parse_dims, default_value = "32:16")]
    dims: (usize, usize),
    #[arg(long, default_value_t = 8)]
    clusters: usize,
    /// Points per cluster.
    #[arg(long, default_value_t = 50)]
    points: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 0.5)]
    spread: f64,
    /// Fraction of gold pairs that appear in the corpus.
    #[arg(long, default_value_t = 0.5)]
    coverage: f64,
    #[arg(long, default_value_t = 0.1)]
    label_noise: f64,
    /// Also write this many positive query/ad instances.
    #[arg(long, default_value_t = 0)]
    ads: usize,
}

#[derive(Args)]
struct SpaceArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Frequency sidecar for the source (default: SOURCE with extension .freq, if present).
    #[arg(long)]
    source_freq: Option<PathBuf>,
    /// Frequency sidecar for the target (default: TARGET with extension .freq, if present).
    #[arg(long)]
    target_freq: Option<PathBuf>,
}

#[derive(Args)]
struct AlignArgs {
    #[command(flatten)]
    spaces: SpaceArgs,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Pipeline configuration (TOML). Flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated subset of distribution,coarse,refine.
    #[arg(long)]
    stages: Option<String>,
    /// Starting map when the distribution stage is skipped: `identity` or a
    /// map file.
    #[arg(long)]
    init: Option<String>,
    /// Gold dictionary used to evaluate every stage.
    #[arg(long)]
    gold: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DictKind {
    Structure,
    Semantic,
}

#[derive(Args)]
struct InduceArgs {
    #[arg(long, value_enum)]
    kind: DictKind,
    #[command(flatten)]
    spaces: SpaceArgs,
    /// Map for the structure dictionary.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Labeled corpus for the semantic dictionary.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Also write a stratified sample of the semantic dictionary.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long, default_value_t = 30)]
    n_frequent: usize,
    #[arg(long, default_value_t = 10)]
    m_candidates: usize,
    #[arg(long, default_value_t = 10)]
    csls_k: usize,
    #[arg(long, default_value = "center_then_unit")]
    normalization: Normalization,
}

#[derive(Args)]
struct ProcrustesArgs {
    #[command(flatten)]
    spaces: SpaceArgs,
    #[arg(long)]
    dict: PathBuf,
    #[arg(long, default_value = "center_then_unit")]
    normalization: Normalization,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Cosine,
    Csls,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    spaces: SpaceArgs,
    #[arg(long)]
    map: PathBuf,
    /// Gold dictionary; needed for precision and AvgWCD.
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long, conflicts_with = "all")]
    precision: bool,
    #[arg(long, conflicts_with = "all")]
    avgwcd: bool,
    #[arg(long, conflicts_with = "all")]
    hubness: bool,
    #[arg(long, conflicts_with = "all")]
    projection: bool,
    /// Every metric; the default when no metric flag is given.
    #[arg(long)]
    all: bool,
    #[arg(long, value_enum, default_value_t = MetricArg::Csls)]
    metric: MetricArg,
    #[arg(long, default_value_t = 10)]
    csls_k: usize,
    /// Precision cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    ks: Vec<usize>,
    #[arg(long, default_value = "center_then_unit")]
    normalization: Normalization,
}

#[derive(Args)]
struct DemoArgs {
    /// Number of seeds, counting up from --seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Demo configuration (TOML). Flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Positive instances per seed.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    region_dependence: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    /// Map used for the aligned condition instead of the planted one.
    #[arg(long)]
    map: Option<PathBuf>,
}

struct Ctx {
    seed: Option<u64>,
    out: PathBuf,
    format: SpaceFormat,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn space_path(&self, stem: &str) -> PathBuf {
        self.out.join(format!("{stem}.{}", self.format.extension()))
    }
}

fn load_with_freq(
    path: &Path,
    format: SpaceFormat,
    freq: Option<&Path>,
    m: &mut ManifestBuilder,
) -> Result<EmbeddingSpace> {
    let mut space = load_space(path, format)?;
    m.input(path);
    let sidecar = freq.map(Path::to_path_buf).or_else(|| {
        let p = path.with_extension("freq");
        (p != path && p.exists()).then_some(p)
    });
    if let Some(f) = sidecar {
        load_frequencies(&mut space, &f)?;
        m.input(f);
    }
    Ok(space)
}

fn load_spaces(a: &SpaceArgs, ctx: &Ctx, m: &mut ManifestBuilder) -> Result<(EmbeddingSpace, EmbeddingSpace)> {
    Ok((
        load_with_freq(&a.source, ctx.format, a.source_freq.as_deref(), m)?,
        load_with_freq(&a.target, ctx.format, a.target_freq.as_deref(), m)?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn cmd_synth(a: &SynthArgs, ctx: &Ctx) -> Result<()> {
    let seed = ctx.seed.unwrap_or(0);
    let cfg = SynthConfig {
        dim_source: a.dims.0,
        dim_target: a.dims.1,
        n_clusters: a.clusters,
        points_per_cluster: a.points,
        noise_sigma: a.noise,
        cluster_spread: a.spread,
        seed,
    };
    let corpus_cfg = CorpusConfig {
        coverage: a.coverage,
        label_noise: a.label_noise,
        seed,
        ..CorpusConfig::default()
    };
    let mut m = ManifestBuilder::new("synth", vec![seed]);
    m.config(&(&cfg, &corpus_cfg, a.ads))?;
    let p = synth_paired_spaces(&cfg)?;
    let corpus = synth_labeled_corpus(&p.gold, &p.target, &corpus_cfg)?;
    fs::create_dir_all(&ctx.out)?;

    let source = ctx.space_path("source");
    let target = ctx.space_path("target");
    save_space(&p.source, &source, ctx.format)?;
    save_space(&p.target, &target, ctx.format)?;
    let outputs = [
        source.clone(),
        target.clone(),
        ctx.path("gold.tsv"),
        ctx.path("planted.valw"),
        ctx.path("source.freq"),
        ctx.path("target.freq"),
        ctx.path("corpus.jsonl"),
    ];
    p.gold.save(&outputs[2])?;
    p.planted_map.save(&outputs[3])?;
    save_frequencies(&p.source, &outputs[4])?;
    save_frequencies(&p.target, &outputs[5])?;
    corpus.save(&outputs[6])?;
    outputs.iter().for_each(|o| m.output(o));

    if a.ads > 0 {
        let ads_cfg = QueryAdsConfig {
            n: a.ads,
            seed,
            ..QueryAdsConfig::default()
        };
        let data = synth_query_ads(&ads_cfg, &p.planted_map)?;
        let path = ctx.path("query_ads.jsonl");
        write_dataset(&data, std::io::BufWriter::new(fs::File::create(&path)?))?;
        m.output(path);
    }
    m.write(&ctx.out)?;
    Ok(())
}

fn cmd_align(a: &AlignArgs, ctx: &Ctx) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    if let Some(stages) = &a.stages {
        cfg.stages = parse_stages(stages)?;
    }
    let mut m = ManifestBuilder::new("align", vec![cfg.seed]);
    if let Some(p) = &a.config {
        m.input(p);
    }
    let init_map = match a.init.as_deref() {
        None => None,
        Some("identity") => {
            cfg.init = Some(InitMap::Identity);
            None
        }
        Some(path) => {
            cfg.init = Some(InitMap::Given);
            m.input(path);
            Some(AlignmentMap::load(Path::new(path))?)
        }
    };
    cfg.validate()?;
    m.config(&cfg)?;
    let (source, target) = load_spaces(&a.spaces, ctx, &mut m)?;
    let corpus = match &a.corpus {
        Some(p) => {
            m.input(p);
            Some(LabeledCorpus::load(p)?)
        }
        None => None,
    };
    let gold = match &a.gold {
        Some(p) => {
            m.input(p);
            Some(Dictionary::load(p, None)?)
        }
        None => None,
    };
    let out = run_valse(
        PipelineInput {
            source: &source,
            target: &target,
            corpus: corpus.as_ref(),
            gold: gold.as_ref(),
            init_map: init_map.as_ref(),
        },
        &cfg,
    )?;

    fs::create_dir_all(&ctx.out)?;
    let map_path = ctx.path("map.valw");
    out.map.save(&map_path)?;
    m.output(&map_path);
    let report = ctx.path("report.json");
    fs::write(&report, out.report.to_json()? + "\n")?;
    m.output(&report);
    let csv_path = ctx.path("report.csv");
    out.report.write_csv(fs::File::create(&csv_path)?)?;
    m.output(&csv_path);
    let effective = ctx.path("config.toml");
    fs::write(&effective, cfg.to_toml()?)?;
    m.output(&effective);
    for (name, dict) in [
        ("structure_dictionary.tsv", &out.structure_dictionary),
        ("semantic_dictionary.tsv", &out.semantic_dictionary),
        ("sampled_dictionary.tsv", &out.sampled_dictionary),
    ] {
        if let Some(d) = dict {
            let p = ctx.path(name);
            d.save(&p)?;
            m.output(p);
        }
    }
    if let Some(adv) = &out.adversarial {
        let p = ctx.path("adversarial_history.csv");
        save_history_csv(&adv.history, &p)?;
        m.output(p);
    }
    m.write(&ctx.out)?;
    Ok(())
}

fn cmd_induce(a: &InduceArgs, ctx: &Ctx) -> Result<()> {
    let seed = ctx.seed.unwrap_or(0);
    let mut m = ManifestBuilder::new("induce-dict", vec![seed]);
    m.config(&(
        matches!(a.kind, DictKind::Structure),
        a.fraction,
        a.n_frequent,
        a.m_candidates,
        a.csls_k,
        a.normalization,
    ))?;
    let (source, target) = load_spaces(&a.spaces, ctx, &mut m)?;
    let source = source.normalize(a.normalization)?;
    let target = target.normalize(a.normalization)?;
    fs::create_dir_all(&ctx.out)?;
    let dict_path = ctx.path("dictionary.tsv");
    match a.kind {
        DictKind::Structure => {
            let map_path = a
                .map
                .as_ref()
                .ok_or_else(|| Error::Config("--kind structure needs --map".into()))?;
            m.input(map_path);
            let map = AlignmentMap::load(map_path)?;
            let d = build_structure_dictionary(&map, &source, &target, a.n_frequent, a.m_candidates, a.csls_k)?;
            d.save(&dict_path)?;
            m.output(&dict_path);
        }
        DictKind::Semantic => {
            let corpus_path = a
                .corpus
                .as_ref()
                .ok_or_else(|| Error::Config("--kind semantic needs --corpus".into()))?;
            m.input(corpus_path);
            let corpus = LabeledCorpus::load(corpus_path)?;
            let sem = build_semantic_dictionary(&corpus, &source, &target)?;
            sem.dictionary.save(&dict_path)?;
            m.output(&dict_path);
            let nouns = ctx.space_path("nouns");
            save_space(&sem.nouns, &nouns, ctx.format)?;
            m.output(&nouns);
            let freq = ctx.path("nouns.freq");
            save_frequencies(&sem.nouns, &freq)?;
            m.output(&freq);
            if let Some(fraction) = a.fraction {
                let sampled = sample_dictionary(&sem.dictionary, fraction, seed)?;
                let p = ctx.path("sampled_dictionary.tsv");
                sampled.save(&p)?;
                m.output(p);
            }
        }
    }
    m.write(&ctx.out)?;
    Ok(())
}

#[derive(Serialize)]
struct ProcrustesSummary {
    pairs: usize,
    frobenius_loss: f64,
    orthogonality_residual: f64,
    checksum: String,
}

fn cmd_procrustes(a: &ProcrustesArgs, ctx: &Ctx) -> Result<()> {
    let mut m = ManifestBuilder::new("procrustes", vec![]);
    m.config(&a.normalization)?;
    let (source, target) = load_spaces(&a.spaces, ctx, &mut m)?;
    let source = source.normalize(a.normalization)?;
    let target = target.normalize(a.normalization)?;
    m.input(&a.dict);
    let dict = Dictionary::load(&a.dict, None)?;
    let pm = assemble_pairs(&dict, &source, &target)?;
    let map = solve_procrustes(&pm)?;
    fs::create_dir_all(&ctx.out)?;
    let map_path = ctx.path("map.valw");
    map.save(&map_path)?;
    m.output(&map_path);
    let summary = ctx.path("procrustes.json");
    write_json(
        &summary,
        &ProcrustesSummary {
            pairs: pm.len(),
            frobenius_loss: frobenius_loss(&map, &pm)?,
            orthogonality_residual: map.orthogonality_residual(),
            checksum: map.checksum(),
        },
    )?;
    m.output(&summary);
    m.write(&ctx.out)?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, ctx: &Ctx) -> Result<()> {
    let none = !(a.precision || a.avgwcd || a.hubness || a.projection);
    let all = a.all || none;
    let (precision, avgwcd, hub, projection) = (
        all || a.precision,
        all || a.avgwcd,
        all || a.hubness,
        all || a.projection,
    );
    let metric = match a.metric {
        MetricArg::Cosine => Metric::Cosine,
        MetricArg::Csls => Metric::Csls { k: a.csls_k },
    };
    let mut m = ManifestBuilder::new("eval", vec![]);
    m.config(&(precision, avgwcd, hub, projection, metric, &a.ks, a.normalization))?;
    let (source, target) = load_spaces(&a.spaces, ctx, &mut m)?;
    let source = source.normalize(a.normalization)?;
    let target = target.normalize(a.normalization)?;
    m.input(&a.map);
    let map = AlignmentMap::load(&a.map)?;
    let gold = match &a.gold {
        Some(p) => {
            m.input(p);
            Some(Dictionary::load(p, None)?)
        }
        None if precision || avgwcd => {
            return Err(Error::Config("precision and AvgWCD need --gold".into()))
        }
        None => None,
    };

    fs::create_dir_all(&ctx.out)?;
    let mut report = EvalReport::empty(metric);
    if let Some(g) = &gold {
        if precision {
            report.precision_at = precision_at_ks(&map, &source, &target, g, &a.ks, metric)?;
        }
        if avgwcd {
            report.avg_wcd = Some(dictionary_wcd(&map, &source, &target, g)?);
        }
    }
    let mapped = map.apply_space(&source)?;
    if hub {
        let h = hubness(&mapped, &target, metric)?;
        report.hub_max_indegree = Some(h.max_indegree);
        report.hub_mean_indegree = Some(h.mean_indegree);
        let p = ctx.path("hubness.csv");
        write_hubness_csv(&h, fs::File::create(&p)?)?;
        m.output(p);
    }
    if projection {
        let mut union = EmbeddingSpace::new("union", target.dim());
        for (id, v) in mapped.iter() {
            union.push(format!("source:{id}"), v)?;
        }
        for (id, v) in target.iter() {
            union.push(format!("target:{id}"), v)?;
        }
        let p = ctx.path("projection.csv");
        write_projection_csv(&project_2d(&union)?, fs::File::create(&p)?)?;
        m.output(p);
    }
    let report_path = ctx.path("eval.json");
    write_json(&report_path, &report)?;
    m.output(&report_path);
    m.write(&ctx.out)?;
    Ok(())
}

fn cmd_demo(a: &DemoArgs, ctx: &Ctx) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => toml::from_str::<DemoConfig>(&fs::read_to_string(p)?)
            .map_err(|e| Error::Config(e.to_string()))?,
        None => DemoConfig::default(),
    };
    if let Some(n) = a.n {
        cfg.data.n = n;
    }
    if let Some(f) = a.region_dependence {
        cfg.data.region_dependence = f;
    }
    if let Some(noise) = a.noise {
        cfg.data.noise = noise;
    }
    let base = ctx.seed.unwrap_or(0);
    let seeds: Vec<u64> = (base..base + a.seeds).collect();
    let mut m = ManifestBuilder::new("demo-relevance", seeds.clone());
    m.config(&cfg)?;
    if let Some(p) = &a.config {
        m.input(p);
    }
    let map = match &a.map {
        Some(p) => {
            m.input(p);
            Some(AlignmentMap::load(p)?)
        }
        None => None,
    };
    let rows = run_demo(&cfg, &seeds, map.as_ref())?;
    finish_demo(&rows, ctx, m)
}

fn finish_demo(rows: &[DemoRow], ctx: &Ctx, mut m: ManifestBuilder) -> Result<()> {
    fs::create_dir_all(&ctx.out)?;
    let p = ctx.path("demo.csv");
    write_demo_csv(rows, fs::File::create(&p)?)?;
    m.output(p);
    m.write(&ctx.out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure {n} threads: {e}")))?;
    }
    let ctx = Ctx {
        seed: cli.global.seed,
        out: cli.global.out.clone(),
        format: cli.global.format.into(),
    };
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, &ctx),
        Command::Align(a) => cmd_align(a, &ctx),
        Command::InduceDict(a) => cmd_induce(a, &ctx),
        Command::Procrustes(a) => cmd_procrustes(a, &ctx),
        Command::Eval(a) => cmd_eval(a, &ctx),
        Command::DemoRelevance(a) => cmd_demo(a, &ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Numeric => 3,
                ErrorClass::Io => 4,
            })
        }
    }
}
