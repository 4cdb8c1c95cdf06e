//! Command-line front end. Every stage is a file-based runner: it reads its
//! inputs from disk, does one job, and writes its outputs to disk. The
//! `pipeline` subcommand calls the same runners in order, so a pipeline run
//! and the equivalent sequence of single-stage runs produce identical bytes.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data or format error,
//! 3 training failure. Log verbosity comes from `AIN_LOG` (error, info,
//! debug; default info).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::adapt::{
    adversarial_stage, embed, hold_out_probe, load_adapt, pretrain, save_adapt, stage2_finetune,
    trace_to_csv, AdaptModel, StageConfig,
};
use crate::datasynth::{
    generate_domain_pair, make_verification_pairs, read_embeddings, read_truth_sidecar,
    write_embeddings, write_truth_sidecar, SynthConfig,
};
use crate::error::{file_err, Error, Result};
use crate::gcn::{gcn_infer_linkages, gcn_train, load_gcn, save_gcn, GcnTrainConfig};
use crate::graph::{
    iterative_threshold_clustering, ClusterAssignment, KnnParams, LinkageGraph,
};
use crate::metrics::{
    cluster_report, intra_class_distance, intra_domain_gap, verification_accuracy, GapReport,
};
use crate::numerics::seeded_rng;

// Stage indices added to the base seed so every stage draws from its own
// deterministic stream.
const SEED_GEN: u64 = 0;
const SEED_PRETRAIN: u64 = 1;
const SEED_GCN: u64 = 2;
const SEED_FINETUNE: u64 = 3;
const SEED_ADVERSARY: u64 = 4;
const SEED_EVAL: u64 = 5;
const SEED_PROBE: u64 = 6;

/// Everything a full run needs. JSON configs may set any subset; the rest
/// comes from the defaults. Nested `seed` fields are ignored in favor of
/// the top-level seed plus the stage index.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    pub gcn: GcnTrainConfig,
    pub stages: StageConfig,
    pub knn: KnnParams,
    pub eta_start: f64,
    pub eta_step: f64,
    pub max_cluster_size: usize,
    /// Fraction of pseudo-labeled rows withheld from stages 2 and 3 as the
    /// unlabeled probe that the compactness gap is measured on.
    pub probe_fraction: f64,
    /// Genuine and impostor pair count (each) for verification accuracy.
    pub n_eval_pairs: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            synth: SynthConfig::default(),
            gcn: GcnTrainConfig::default(),
            stages: StageConfig::default(),
            knn: KnnParams::default(),
            eta_start: 0.1,
            eta_step: 0.1,
            max_cluster_size: 32,
            probe_fraction: 0.1,
            n_eval_pairs: 400,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.gcn.validate()?;
        self.stages.validate()?;
        self.knn.validate()?;
        if !(self.eta_start > 0.0 && self.eta_start <= 1.0) {
            return Err(Error::Config(format!("eta_start {} outside (0, 1]", self.eta_start)));
        }
        if !(self.eta_step > 0.0 && self.eta_step.is_finite()) {
            return Err(Error::Config(format!("eta_step {} must be positive", self.eta_step)));
        }
        if self.max_cluster_size < 2 {
            return Err(Error::Config("max_cluster_size must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.probe_fraction) {
            return Err(Error::Config(format!(
                "probe_fraction {} outside [0, 1)",
                self.probe_fraction
            )));
        }
        if self.n_eval_pairs == 0 {
            return Err(Error::Config("n_eval_pairs must be >= 1".into()));
        }
        Ok(())
    }

    fn sub_seed(&self, stage: u64) -> u64 {
        self.seed.wrapping_add(stage)
    }
}

#[derive(Parser)]
#[command(name = "ain", version, about = "domain-adaptive embedding pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON config file; omitted fields fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic source/target embedding pair plus truth sidecar.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Stage 1: train extractor and source prototypes with alignment.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Overrides the alignment weight.
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Train the linkage network on source pivot graphs.
    GcnTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        /// Stage-1 model checkpoint providing the embeddings.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Infer the target linkage graph.
    Link {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gcn: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster a linkage graph with the rising-threshold schedule.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        eta_start: Option<f64>,
        #[arg(long)]
        eta_step: Option<f64>,
        #[arg(long)]
        max_size: Option<usize>,
    },
    /// Stage 2: finetune on pseudo-labels with fresh target prototypes.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Overrides the pseudo-label loss weight.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Stage 3: adversarial alternation of prototype and extractor steps.
    Adversary {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
    },
    /// Score a model and clustering against the truth sidecar.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage in order inside one output directory.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
            serde_json::from_str::<PipelineConfig>(&text).map_err(|e| {
                Error::Config(format!("bad config {}: {e}", path.display()))
            })?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A report field; integers keep their own formatting.
pub enum ReportValue {
    Float(f64),
    Count(usize),
}

/// Canonical report serialization: keys sorted, floats fixed to six
/// decimals, one line, trailing newline. Non-finite values are rejected so
/// a broken run can never produce a plausible-looking report.
pub fn canonical_report(fields: &[(&str, ReportValue)]) -> Result<String> {
    let mut sorted: Vec<&(&str, ReportValue)> = fields.iter().collect();
    sorted.sort_by_key(|(k, _)| *k);
    let mut out = String::from("{");
    for (i, (k, v)) in sorted.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        match v {
            ReportValue::Float(x) => {
                if !x.is_finite() {
                    return Err(Error::Eval(format!("report field {k} is not finite ({x})")));
                }
                out.push_str(&format!("\"{k}\":{x:.6}"));
            }
            ReportValue::Count(c) => out.push_str(&format!("\"{k}\":{c}")),
        }
    }
    out.push_str("}\n");
    Ok(out)
}

fn read_clusters(path: &Path) -> Result<ClusterAssignment> {
    let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    serde_json::from_str::<ClusterAssignment>(&text)
        .map_err(|e| Error::Format { offset: 0, msg: format!("{}: {e}", path.display()) })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| file_err(path, e))
}

fn stage_config(cfg: &PipelineConfig, stage: u64) -> StageConfig {
    let mut sc = cfg.stages.clone();
    sc.seed = cfg.sub_seed(stage);
    sc
}

fn run_gen(cfg: &PipelineConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| file_err(out_dir, e))?;
    let (source, target, truth) = generate_domain_pair(&cfg.synth, cfg.sub_seed(SEED_GEN))?;
    write_embeddings(&source, &out_dir.join("source.aine"))?;
    write_embeddings(&target, &out_dir.join("target.aine"))?;
    write_truth_sidecar(&truth, &out_dir.join("target_truth.aine"))?;
    log::info!(
        "generated {} source and {} target rows of dim {}",
        source.len(),
        target.len(),
        source.dim()
    );
    Ok(())
}

fn run_pretrain(
    cfg: &PipelineConfig,
    source_path: &Path,
    target_path: &Path,
    out: &Path,
    trace_out: Option<&Path>,
) -> Result<()> {
    let source = read_embeddings(source_path)?;
    let target = read_embeddings(target_path)?;
    if source.dim() != target.dim() {
        return Err(Error::Dim(format!(
            "source dim {} vs target dim {}",
            source.dim(),
            target.dim()
        )));
    }
    let sc = stage_config(cfg, SEED_PRETRAIN);
    let n_classes = source.labels.iter().copied().max().unwrap_or(-1) + 1;
    let mut rng = seeded_rng(sc.seed);
    let model =
        AdaptModel::new(source.dim(), &sc.extractor_dims, n_classes as usize, &mut rng)?;
    let (model, trace) = pretrain(model, &source, &target, &sc)?;
    if let Some(p) = trace_out {
        write_text(p, &trace_to_csv(&trace))?;
    }
    save_adapt(&model, out)?;
    log::info!("stage 1 done after {} iterations", trace.len());
    Ok(())
}

fn run_gcn_train(
    cfg: &PipelineConfig,
    source_path: &Path,
    model_path: &Path,
    out: &Path,
) -> Result<()> {
    let source = read_embeddings(source_path)?;
    let model = load_adapt(model_path)?;
    let embedded = crate::datasynth::EmbeddingSet::new(
        embed(&model, &source.features)?,
        source.labels.clone(),
        source.domain,
    )?;
    let mut gc = cfg.gcn.clone();
    gc.seed = cfg.sub_seed(SEED_GCN);
    let (gcn, trace) = gcn_train(&embedded, &cfg.knn, &gc)?;
    save_gcn(&gcn, out)?;
    log::info!(
        "linkage network trained, final batch loss {:.4}",
        trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn run_link(
    cfg: &PipelineConfig,
    target_path: &Path,
    model_path: &Path,
    gcn_path: &Path,
    out: &Path,
) -> Result<()> {
    let target = read_embeddings(target_path)?;
    let model = load_adapt(model_path)?;
    let gcn = load_gcn(gcn_path)?;
    let embedded = crate::datasynth::EmbeddingSet::new(
        embed(&model, &target.features)?,
        target.labels.clone(),
        target.domain,
    )?;
    let graph = gcn_infer_linkages(&embedded, &gcn, &cfg.knn)?;
    write_text(out, &graph.to_text())?;
    log::info!("linkage graph: {} nodes, {} edges", graph.n_nodes(), graph.edges().len());
    Ok(())
}

fn run_cluster(cfg: &PipelineConfig, graph_path: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(graph_path).map_err(|e| file_err(graph_path, e))?;
    let graph = LinkageGraph::from_text(&text)?;
    let assignment =
        iterative_threshold_clustering(&graph, cfg.eta_start, cfg.eta_step, cfg.max_cluster_size)?;
    write_text(out, &serde_json::to_string(&assignment)?)?;
    log::info!(
        "{} clusters covering {:.1}% of rows",
        assignment.n_clusters(),
        100.0 * assignment.labeled_ratio()
    );
    Ok(())
}

fn run_finetune(
    cfg: &PipelineConfig,
    source_path: &Path,
    target_path: &Path,
    model_path: &Path,
    clusters_path: &Path,
    out: &Path,
    trace_out: Option<&Path>,
) -> Result<()> {
    let source = read_embeddings(source_path)?;
    let target = read_embeddings(target_path)?;
    let model = load_adapt(model_path)?;
    let raw = read_clusters(clusters_path)?;
    let pseudo = hold_out_probe(&raw, cfg.probe_fraction, cfg.sub_seed(SEED_PROBE))?;
    let sc = stage_config(cfg, SEED_FINETUNE);
    let (model, trace) = stage2_finetune(model, &source, &target, &pseudo, &sc)?;
    if let Some(p) = trace_out {
        write_text(p, &trace_to_csv(&trace))?;
    }
    save_adapt(&model, out)?;
    log::info!("stage 2 done after {} iterations", trace.len());
    Ok(())
}

fn run_adversary(
    cfg: &PipelineConfig,
    source_path: &Path,
    target_path: &Path,
    model_path: &Path,
    clusters_path: &Path,
    out: &Path,
    trace_out: Option<&Path>,
) -> Result<()> {
    let source = read_embeddings(source_path)?;
    let target = read_embeddings(target_path)?;
    let model = load_adapt(model_path)?;
    let raw = read_clusters(clusters_path)?;
    let pseudo = hold_out_probe(&raw, cfg.probe_fraction, cfg.sub_seed(SEED_PROBE))?;
    let sc = stage_config(cfg, SEED_ADVERSARY);
    let (model, trace) = adversarial_stage(model, &source, &target, &pseudo, &sc, None)?;
    if let Some(p) = trace_out {
        write_text(p, &trace_to_csv(&trace))?;
    }
    save_adapt(&model, out)?;
    log::info!("stage 3 done after {} iterations", trace.len());
    Ok(())
}

fn run_eval(
    cfg: &PipelineConfig,
    target_path: &Path,
    truth_path: &Path,
    model_path: &Path,
    clusters_path: &Path,
    out: &Path,
) -> Result<()> {
    let target = read_embeddings(target_path)?;
    let truth = read_truth_sidecar(truth_path)?;
    let model = load_adapt(model_path)?;
    let raw = read_clusters(clusters_path)?;
    let y = embed(&model, &target.features)?;
    let cr = cluster_report(&raw, &truth)?;
    // the gap is measured on the same probe split the training stages used,
    // not on the raw clustering, so the unlabeled side exists whenever the
    // probe fraction is positive
    let pseudo = hold_out_probe(&raw, cfg.probe_fraction, cfg.sub_seed(SEED_PROBE))?;
    // when the split still leaves one side empty (probe fraction zero on a
    // full cover, or an all-singleton clustering) the empty side reports 0
    // so the schema stays complete
    let gaps = if pseudo.labels().iter().any(|&l| l < 0)
        && pseudo.labels().iter().any(|&l| l >= 0)
    {
        intra_domain_gap(&y, &pseudo, &truth)?
    } else {
        log::info!("one compactness subset is empty; reporting zero for it");
        let d = intra_class_distance(&y, &truth)?;
        if pseudo.labels().iter().any(|&l| l >= 0) {
            GapReport { d_pseudo: d, d_unlabeled: 0.0, gap: d }
        } else {
            GapReport { d_pseudo: 0.0, d_unlabeled: d, gap: -d }
        }
    };
    let pairs = make_verification_pairs(
        &truth,
        cfg.n_eval_pairs,
        cfg.n_eval_pairs,
        cfg.sub_seed(SEED_EVAL),
    )?;
    let (acc, _) = verification_accuracy(&y, &pairs)?;
    let report = canonical_report(&[
        ("bcubed_precision", ReportValue::Float(cr.bcubed_precision)),
        ("bcubed_recall", ReportValue::Float(cr.bcubed_recall)),
        ("bcubed_f", ReportValue::Float(cr.bcubed_f)),
        ("nmi", ReportValue::Float(cr.nmi)),
        ("labeled_ratio", ReportValue::Float(cr.labeled_ratio)),
        ("n_clusters", ReportValue::Count(cr.n_clusters)),
        ("d_pseudo", ReportValue::Float(gaps.d_pseudo)),
        ("d_unlabeled", ReportValue::Float(gaps.d_unlabeled)),
        ("gap", ReportValue::Float(gaps.gap)),
        ("verification_accuracy", ReportValue::Float(acc)),
    ])?;
    write_text(out, &report)?;
    log::info!("report written to {}", out.display());
    Ok(())
}

fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<()> {
    run_gen(cfg, out_dir)?;
    let src = out_dir.join("source.aine");
    let tgt = out_dir.join("target.aine");
    let truth = out_dir.join("target_truth.aine");
    let m1 = out_dir.join("model_stage1.ainm");
    let m2 = out_dir.join("model_stage2.ainm");
    let m3 = out_dir.join("model_stage3.ainm");
    let gcn = out_dir.join("gcn.aing");
    let graph = out_dir.join("linkage.txt");
    let clusters = out_dir.join("clusters.json");
    run_pretrain(cfg, &src, &tgt, &m1, Some(&out_dir.join("trace_stage1.csv")))?;
    run_gcn_train(cfg, &src, &m1, &gcn)?;
    run_link(cfg, &tgt, &m1, &gcn, &graph)?;
    run_cluster(cfg, &graph, &clusters)?;
    run_finetune(cfg, &src, &tgt, &m1, &clusters, &m2, Some(&out_dir.join("trace_stage2.csv")))?;
    run_adversary(cfg, &src, &tgt, &m2, &clusters, &m3, Some(&out_dir.join("trace_stage3.csv")))?;
    run_eval(cfg, &tgt, &truth, &m3, &clusters, &out_dir.join("report.json"))?;
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen { common, out_dir } => {
            let cfg = load_config(&common)?;
            run_gen(&cfg, &out_dir)
        }
        Cmd::Pretrain { common, source, target, out, trace, beta } => {
            let mut cfg = load_config(&common)?;
            if let Some(b) = beta {
                cfg.stages.beta = b;
                cfg.stages.validate()?;
            }
            run_pretrain(&cfg, &source, &target, &out, trace.as_deref())
        }
        Cmd::GcnTrain { common, source, model, out } => {
            let cfg = load_config(&common)?;
            run_gcn_train(&cfg, &source, &model, &out)
        }
        Cmd::Link { common, target, model, gcn, out } => {
            let cfg = load_config(&common)?;
            run_link(&cfg, &target, &model, &gcn, &out)
        }
        Cmd::Cluster { common, graph, out, eta_start, eta_step, max_size } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = eta_start {
                cfg.eta_start = v;
            }
            if let Some(v) = eta_step {
                cfg.eta_step = v;
            }
            if let Some(v) = max_size {
                cfg.max_cluster_size = v;
            }
            cfg.validate()?;
            run_cluster(&cfg, &graph, &out)
        }
        Cmd::Finetune { common, source, target, model, clusters, out, trace, alpha } => {
            let mut cfg = load_config(&common)?;
            if let Some(a) = alpha {
                cfg.stages.alpha = a;
                cfg.stages.validate()?;
            }
            run_finetune(&cfg, &source, &target, &model, &clusters, &out, trace.as_deref())
        }
        Cmd::Adversary { common, source, target, model, clusters, out, trace, lambda1, lambda2 } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = lambda1 {
                cfg.stages.lambda1 = v;
            }
            if let Some(v) = lambda2 {
                cfg.stages.lambda2 = v;
            }
            cfg.stages.validate()?;
            run_adversary(&cfg, &source, &target, &model, &clusters, &out, trace.as_deref())
        }
        Cmd::Eval { common, target, truth, model, clusters, out } => {
            let cfg = load_config(&common)?;
            run_eval(&cfg, &target, &truth, &model, &clusters, &out)
        }
        Cmd::Pipeline { common, out_dir } => {
            let cfg = load_config(&common)?;
            run_pipeline(&cfg, &out_dir)
        }
    }
}

fn init_logging() {
    let spec = std::env::var("AIN_LOG").unwrap_or_else(|_| "info".into());
    let _ = env_logger::Builder::new()
        .parse_filters(&spec)
        .format_timestamp(None)
        .try_init();
}

/// Parses `argv`, runs the requested stage, and returns the process exit
/// code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
