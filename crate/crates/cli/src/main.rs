//! `gridsearch` command line.
//!
//! Results go to stdout as JSON (or CSV where noted); logs go to stderr. A failure
//! exits non-zero with one JSON line on stderr: `{"error": "...", "kind": "..."}`.

mod settings;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use gridsearch_core::api::{self, ApiError, QueryRequest};
use gridsearch_core::dataset::{load_annotations, summarize, write_heatmap_csv, KeyframeManifest, Subset};
use gridsearch_core::eval::{
    mean_iou_report, run_eval, similarity_delta_analysis, sweep, write_sweep_csv, Aggregation, EvalCell,
    EvalReport, QueryLength,
};
use gridsearch_core::geometry::{GridLayout, LayoutKind, Rect, RegionSet, SelectionMode};
use gridsearch_core::retrieval::SearchModel;
use gridsearch_core::store::{store_file_name, EmbeddingStore};

use settings::Settings;

#[derive(Parser)]
#[command(name = "gridsearch", version, about = "Region-constrained keyframe search and evaluation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Each overrides the matching config key.
#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Keyframe manifest (JSON lines).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Directory of `.gses` embedding stores.
    #[arg(long = "stores", global = true)]
    pub store_dir: Option<PathBuf>,
    /// Annotation set (JSON lines).
    #[arg(long, global = true)]
    pub annotations: Option<PathBuf>,
    /// Embedder kind.
    #[arg(long, global = true, value_enum)]
    pub embedder: Option<EmbedderKind>,
    /// Embedding service base URI (also `GRIDSEARCH_EMBEDDER_URL`).
    #[arg(long, global = true)]
    pub embedder_url: Option<String>,
    #[arg(long, global = true)]
    pub embedder_model: Option<String>,
    #[arg(long, global = true)]
    pub embedder_dim: Option<usize>,
    /// Directory evaluation reports are written to.
    #[arg(long, global = true)]
    pub report_dir: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// First perturbation seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbedderKind {
    Synthetic,
    Http,
}

#[derive(Subcommand)]
enum Command {
    /// Build embedding stores from raw vectors or from the configured embedder.
    Ingest(IngestArgs),
    /// Check an annotation set against a manifest.
    Validate,
    /// Run one query and print the ranked hits.
    Query(QueryArgs),
    /// Evaluate one model configuration over an annotation set.
    Eval(EvalArgs),
    /// Evaluate the configured grid of settings and print a long CSV.
    Sweep(SweepArgs),
    /// Similarity-delta and mean-IoU analyses.
    Analyze(AnalyzeArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Annotation statistics and spatial heatmaps.
    Stats(StatsArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Region set(s) to build, e.g. `whole`, `static5`, `static9@e=0.1`.
    #[arg(long = "region-set", required = true)]
    region_sets: Vec<String>,
    /// Raw little-endian vector file with a `<file>.json` sidecar; one region set only.
    #[arg(long)]
    vectors: Option<PathBuf>,
    /// Output directory (defaults to the store directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    text: String,
    #[arg(long, default_value = "whole-image")]
    model: String,
    /// Normalized `x1,y1,x2,y2`.
    #[arg(long = "box")]
    bbox: Option<Rect>,
    #[arg(long)]
    selection: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    enlargement: f64,
    #[arg(long, default_value_t = api::DEFAULT_TOP_K)]
    top_k: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: SearchModel,
    #[arg(long, default_value = "long")]
    length: QueryLength,
    #[arg(long, default_value = "all")]
    subset: Subset,
    #[arg(long, default_value = "any_overlap")]
    selection: SelectionMode,
    #[arg(long, default_value_t = 0.0)]
    enlargement: f64,
    #[arg(long, default_value_t = 0.0)]
    sigma_shift: f64,
    /// Fraction or percentage (values above 1).
    #[arg(long, default_value_t = 0.0)]
    sigma_area: f64,
    /// Seeds per annotation; defaults to 5 when perturbed.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long, default_value = "per_sample")]
    aggregation: Aggregation,
    /// Select cells on the unenlarged layout.
    #[arg(long)]
    select_on_base: bool,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct SweepArgs {
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, default_value = "static9")]
    layout: LayoutKind,
    #[arg(long, default_value_t = 0.0)]
    enlargement: f64,
    #[arg(long, default_value = "long")]
    length: QueryLength,
    #[arg(long, default_value = "all")]
    subset: Subset,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    thumbnail_root: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Write the spatial heatmaps as long CSV.
    #[arg(long)]
    heatmap_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", json!({"error": first, "kind": "usage"}));
            return ExitCode::from(2);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("GRIDSEARCH_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<ApiError>().map_or("error".to_string(), |a| {
                serde_json::to_value(a.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
            });
            eprintln!("{}", json!({"error": format!("{e:#}"), "kind": kind}));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let settings = Settings::resolve(&cli.global)?;
    if let Some(jobs) = settings.jobs.filter(|j| *j > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring worker pool")?;
    }
    match cli.command {
        Command::Ingest(a) => ingest(&settings, a),
        Command::Validate => validate(&settings),
        Command::Query(a) => query(&settings, a),
        Command::Eval(a) => eval(&settings, a),
        Command::Sweep(a) => run_sweep(&settings, a),
        Command::Analyze(a) => analyze(&settings, a),
        Command::Serve(a) => serve(settings, a),
        Command::Stats(a) => stats(&settings, a),
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_manifest(settings: &Settings) -> Result<KeyframeManifest> {
    let path = settings.require(&settings.service.manifest, "manifest")?;
    KeyframeManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn load_annotation_set(settings: &Settings, manifest: &KeyframeManifest) -> Result<Vec<gridsearch_core::dataset::Annotation>> {
    let path = settings.require(&settings.annotations, "annotations")?;
    let loaded = load_annotations(path, manifest).with_context(|| format!("loading annotations {}", path.display()))?;
    for w in &loaded.warnings {
        tracing::warn!(line = w.line, record = %w.record, "{}", w.message);
    }
    Ok(loaded.annotations)
}

fn ingest(settings: &Settings, a: IngestArgs) -> Result<()> {
    let manifest = load_manifest(settings)?;
    let out = match a.out.as_deref().or(settings.service.store_dir.as_deref()) {
        Some(p) => p.to_path_buf(),
        None => bail!("missing setting `store_dir` (or --out)"),
    };
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    if a.vectors.is_some() && a.region_sets.len() != 1 {
        bail!("--vectors takes exactly one --region-set");
    }
    let embedder = if a.vectors.is_none() {
        Some(settings.service.embedder.build(settings.service.crop_cache.as_deref())?)
    } else {
        None
    };
    let mut written = Vec::new();
    for rs in &a.region_sets {
        let region_set: RegionSet = rs.parse()?;
        let store = match (&a.vectors, &embedder) {
            (Some(v), _) => EmbeddingStore::ingest(&manifest, v, region_set)?,
            (None, Some(e)) => EmbeddingStore::from_embedder(&manifest, region_set, e.as_ref())?,
            (None, None) => unreachable!(),
        };
        let path = out.join(store_file_name(store.region_set_id()));
        store.save(&path)?;
        written.push(json!({
            "region_set_id": store.region_set_id(),
            "images": store.n_images(),
            "rows": store.n_rows(),
            "dim": store.dim(),
            "path": path,
        }));
    }
    print_json(&written)
}

fn validate(settings: &Settings) -> Result<()> {
    let manifest = load_manifest(settings)?;
    let path = settings.require(&settings.annotations, "annotations")?;
    let loaded = load_annotations(path, &manifest)?;
    let skippable = loaded.annotations.iter().filter(|a| a.skippable).count();
    print_json(&json!({
        "annotations": loaded.annotations.len(),
        "skippable": skippable,
        "non_skippable": loaded.annotations.len() - skippable,
        "images": manifest.len(),
        "warnings": loaded.warnings,
    }))
}

fn query(settings: &Settings, a: QueryArgs) -> Result<()> {
    let engine = settings.service.load_engine()?;
    let req = QueryRequest {
        text: a.text,
        bbox: a.bbox.map(|b| b.as_array()),
        model: a.model,
        selection_mode: a.selection,
        enlargement: a.enlargement,
        top_k: a.top_k,
    };
    let resp = api::execute_query(&engine, &req, &settings.service.thumbnail_prefix)?;
    print_json(&resp)
}

fn write_report(dir: Option<&Path>, report: &EvalReport) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.json", report.id()));
        serde_json::to_writer_pretty(BufWriter::new(File::create(&path)?), report)?;
    }
    Ok(())
}

fn eval(settings: &Settings, a: EvalArgs) -> Result<()> {
    let engine = settings.service.load_engine()?;
    let annotations = load_annotation_set(settings, engine.manifest())?;
    let perturbed = a.sigma_shift != 0.0 || a.sigma_area != 0.0;
    let n_seeds = a.seeds.unwrap_or(if perturbed { 5 } else { 0 });
    let first = settings.seed.unwrap_or(0);
    let mut cell = EvalCell::new(a.model, a.length, a.subset)
        .with_selection(a.selection)
        .with_enlargement(a.enlargement)
        .with_perturbation(a.sigma_shift, a.sigma_area, (first..first + n_seeds).collect());
    cell.aggregation = a.aggregation;
    cell.select_on_base = a.select_on_base;
    let report = run_eval(&annotations, &cell, &engine)?;
    write_report(settings.service.reports_dir.as_deref(), &report)?;
    match a.format {
        Format::Json => print_json(&report),
        Format::Csv => {
            write_sweep_csv(io::stdout().lock(), std::slice::from_ref(&report))?;
            Ok(())
        }
    }
}

fn run_sweep(settings: &Settings, a: SweepArgs) -> Result<()> {
    let mut config = settings
        .sweep
        .clone()
        .ok_or_else(|| anyhow!("config has no [sweep] table"))?;
    if let Some(seed) = settings.seed {
        config.seed = seed;
    }
    let engine = settings.service.load_engine()?;
    let annotations = load_annotation_set(settings, engine.manifest())?;
    let reports = sweep(&annotations, &config, &engine, settings.jobs.unwrap_or(0))?;
    for r in &reports {
        write_report(settings.service.reports_dir.as_deref(), r)?;
    }
    match a.out {
        Some(path) => write_sweep_csv(BufWriter::new(File::create(&path)?), &reports)?,
        None => write_sweep_csv(io::stdout().lock(), &reports)?,
    }
    Ok(())
}

fn analyze(settings: &Settings, a: AnalyzeArgs) -> Result<()> {
    let engine = settings.service.load_engine()?;
    let annotations: Vec<_> = load_annotation_set(settings, engine.manifest())?
        .into_iter()
        .filter(|x| a.subset.matches(x))
        .collect();
    if annotations.is_empty() {
        bail!("no annotations in subset {}", a.subset);
    }
    let grid = GridLayout::build_enlarged(a.layout, a.enlargement)?;
    let whole = engine.store("whole").ok_or_else(|| anyhow!("no `whole` store loaded"))?;
    let grid_store = engine
        .store(&grid.region_set_id())
        .ok_or_else(|| anyhow!("no `{}` store loaded", grid.region_set_id()))?;
    let delta = similarity_delta_analysis(&annotations, a.length, whole, grid_store, &grid, engine.embedder().as_ref())?;
    let grids: Vec<GridLayout> = LayoutKind::ALL.iter().map(|&k| GridLayout::build(k)).collect();
    print_json(&json!({
        "similarity_delta": delta,
        "mean_iou": mean_iou_report(&annotations, &grids),
    }))
}

fn serve(mut settings: Settings, a: ServeArgs) -> Result<()> {
    if let Some(listen) = a.listen {
        settings.service.listen = listen;
    }
    if let Some(root) = a.thumbnail_root {
        settings.service.thumbnail_root = Some(root);
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(gridsearch_service::serve(settings.service))?;
    Ok(())
}

fn stats(settings: &Settings, a: StatsArgs) -> Result<()> {
    let manifest = load_manifest(settings)?;
    let annotations = load_annotation_set(settings, &manifest)?;
    let stats = summarize(&annotations)?;
    if let Some(path) = a.heatmap_out {
        write_heatmap_csv(BufWriter::new(File::create(&path)?), &stats)?;
    }
    print_json(&stats)
}
