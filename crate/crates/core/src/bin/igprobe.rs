//! Command-line surface of the toolkit.
//!
//! Two-stage design: compute commands write versioned JSON result files;
//! `plot` renders archived results without touching a model. Layer indices
//! and prompt indices in files, names, and flags are 1-based.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use igprobe::analysis::{layer_overlap, layer_stats, overlap_curve, suppression_experiment};
use igprobe::attribution::{attribute_prompt, AttributionConfig, AttributionMap, LayerSelection};
use igprobe::error::{Error, Result};
use igprobe::grammar::{
    attribute_pair, common_distinct, convert_agreement_tsv, load_agreement_dataset,
    stratify_stats, GrammarRecord,
};
use igprobe::model::{load_model, MaskedLm, Model};
use igprobe::prompts::{self, PromptSet};
use igprobe::results::{
    self, AttributionMapFile, GrammarNeuronsFile, GrammarStatsFile, InputDigest, LayerOverlapFile,
    LayerStatsFile, Manifest, NeuronSetFile, OverlapCurveFile, PromptMeta, StratumNeurons,
    SuppressionFile, ToyVerifyFile,
};
use igprobe::selection::{adaptive_select, coarse_select, refine};
use igprobe::{plot, verify};

#[derive(Parser)]
#[command(name = "igprobe", version, about = "Attribute masked-LM predictions to feed-forward neurons and analyze them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PlotStyle {
    Line,
    Bar,
}

#[derive(Subcommand)]
enum Command {
    /// Compute one attribution map per prompt of a prompt set
    Attribute(AttributeArgs),
    /// Layer-wise mean/std/max statistics over attribution map files
    Stats(StatsArgs),
    /// Threshold one attribution map into a neuron set
    Select(SelectArgs),
    /// Keep neurons supported by at least P% of the given sets
    Refine(RefineArgs),
    /// Overlap-vs-threshold sweep between two facts
    Overlap(OverlapArgs),
    /// Per-layer histogram of neurons common to two sets
    LayerOverlap(LayerOverlapArgs),
    /// Zero a neuron set and compare against size-matched random ablations
    Suppress(SuppressArgs),
    /// Number-agreement probe
    #[command(subcommand)]
    Grammar(GrammarCommand),
    /// Oracle-agreement suite on randomized planted toys
    ToyVerify(ToyVerifyArgs),
    /// Render a result file to an SVG chart
    Plot(PlotArgs),
}

#[derive(Args)]
struct AttributeArgs {
    /// Checkpoint directory or toy spec file
    #[arg(long)]
    model: PathBuf,
    /// Bundled set name, prompt file path, or a comma-separated list
    #[arg(long)]
    prompts: String,
    /// Riemann steps of the discrete integral
    #[arg(long, default_value_t = 20)]
    steps: usize,
    /// 1-based layer list (e.g. 7,8,9); all layers when omitted
    #[arg(long)]
    layers: Option<String>,
    /// Divide scores by the per-prompt maximum
    #[arg(long)]
    normalize: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Output directory for the map files
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    /// Attribution map files or directories containing them
    #[arg(long, required = true, num_args = 1..)]
    maps: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("threshold").required(true)))]
struct SelectArgs {
    /// Attribution map file
    #[arg(long)]
    map: PathBuf,
    /// Absolute threshold: keep scores strictly greater than t
    #[arg(long, group = "threshold")]
    t: Option<f64>,
    /// Adaptive fraction of the map maximum (inclusive)
    #[arg(long, group = "threshold")]
    adaptive: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RefineArgs {
    /// Neuron set files, one per prompt
    #[arg(long, required = true, num_args = 1..)]
    sets: Vec<PathBuf>,
    /// Support percentage P in [0, 100]
    #[arg(long)]
    p: f64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OverlapArgs {
    #[arg(long)]
    model: PathBuf,
    /// First fact: bundled names/paths, comma-separated lists combine prompts
    #[arg(long)]
    a: String,
    /// Second fact
    #[arg(long)]
    b: String,
    /// Threshold grid start:stop:step, or a single value
    #[arg(long, default_value = "0:0.5:0.05")]
    t: String,
    /// Support percentage P
    #[arg(long, default_value_t = 50.0)]
    p: f64,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long)]
    normalize: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LayerOverlapArgs {
    /// First neuron set file
    #[arg(long)]
    a: PathBuf,
    /// Second neuron set file
    #[arg(long)]
    b: PathBuf,
    /// Threshold label recorded in the output
    #[arg(long)]
    t: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SuppressArgs {
    #[arg(long)]
    model: PathBuf,
    /// Masked prompt text; alternative to --prompts/--index
    #[arg(long, conflicts_with_all = ["prompts", "index"])]
    prompt: Option<String>,
    /// Target word (defaults to the prompt set's object)
    #[arg(long)]
    target: Option<String>,
    /// Bundled set name or prompt file
    #[arg(long)]
    prompts: Option<String>,
    /// 1-based prompt index within the set
    #[arg(long, default_value_t = 1)]
    index: usize,
    /// Neuron set file to suppress
    #[arg(long)]
    set: PathBuf,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum GrammarCommand {
    /// Convert the public tab-separated agreement corpus to the ingestion format
    Convert(GrammarConvertArgs),
    /// Attribute good/bad verb forms over an agreement dataset
    Run(GrammarRunArgs),
}

#[derive(Args)]
struct GrammarConvertArgs {
    /// Tab-separated corpus: n_attractors, tag, sentence with ***mask***, good, bad
    #[arg(long)]
    input: PathBuf,
    /// Output JSONL path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GrammarRunArgs {
    #[arg(long)]
    model: PathBuf,
    /// Agreement dataset in the ingestion format
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    /// Adaptive selection fraction for decided/undecided counting
    #[arg(long, default_value_t = 0.5)]
    adaptive: f64,
    /// Restrict to these attractor counts (comma-separated)
    #[arg(long)]
    strata: Option<String>,
    /// Use only the first N examples
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Output directory (grammar-stats.json, grammar-neurons.json)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ToyVerifyArgs {
    #[arg(long, default_value_t = 100)]
    seeds: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// A result JSON file produced by a compute command
    #[arg(long)]
    input: PathBuf,
    /// Output SVG path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    style: Option<PlotStyle>,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({
                    "error": { "category": e.category(), "message": e.to_string() }
                })
            );
            std::process::exit(1);
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Attribute(args) => cmd_attribute(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Select(args) => cmd_select(args),
        Command::Refine(args) => cmd_refine(args),
        Command::Overlap(args) => cmd_overlap(args),
        Command::LayerOverlap(args) => cmd_layer_overlap(args),
        Command::Suppress(args) => cmd_suppress(args),
        Command::Grammar(GrammarCommand::Convert(args)) => cmd_grammar_convert(args),
        Command::Grammar(GrammarCommand::Run(args)) => cmd_grammar_run(args),
        Command::ToyVerify(args) => cmd_toy_verify(args),
        Command::Plot(args) => cmd_plot(args),
    }
}

// -- shared helpers ----------------------------------------------------------

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))?
        .install(f)
}

/// Digests identifying a model source.
fn model_inputs(path: &Path) -> Result<Vec<InputDigest>> {
    let mut digests = Vec::new();
    let mut push = |p: &Path| -> Result<()> {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        digests.push(InputDigest {
            path: p.display().to_string(),
            sha256: results::sha256_hex(&bytes),
        });
        Ok(())
    };
    if path.is_dir() {
        for name in ["config.json", "vocab.txt", "model.safetensors"] {
            let p = path.join(name);
            if p.is_file() {
                push(&p)?;
            }
        }
    } else if path.is_file() {
        push(path)?;
    }
    Ok(digests)
}

/// Resolve a comma-separated list of bundled names and file paths.
fn resolve_prompt_sets(spec: &str) -> Result<(Vec<PromptSet>, Vec<InputDigest>)> {
    let mut sets = Vec::new();
    let mut digests = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some(set) = prompts::builtin(part) {
            let raw = prompts::builtin_raw(part).unwrap();
            digests.push(InputDigest {
                path: format!("builtin:{part}"),
                sha256: results::sha256_hex(raw.as_bytes()),
            });
            sets.push(set);
            continue;
        }
        let path = Path::new(part);
        let load = prompts::load_prompts(path)?;
        if load.sets.is_empty() {
            return Err(Error::Load(format!("{part} contains no valid prompt sets")));
        }
        for reject in &load.rejected {
            eprintln!("note: {part} line {}: {}", reject.line, reject.reason);
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        digests.push(InputDigest {
            path: part.to_string(),
            sha256: results::sha256_hex(&bytes),
        });
        sets.extend(load.sets);
    }
    if sets.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no prompt sets resolved from {spec:?}"
        )));
    }
    Ok((sets, digests))
}

fn parse_layers(spec: Option<&str>, layer_count: usize) -> Result<LayerSelection> {
    match spec {
        None => Ok(LayerSelection::All),
        Some(s) if s.eq_ignore_ascii_case("all") => Ok(LayerSelection::All),
        Some(s) => {
            let mut layers = BTreeSet::new();
            for part in s.split(',') {
                let one: usize = part.trim().parse().map_err(|_| {
                    Error::InvalidArgument(format!("bad layer index {part:?}"))
                })?;
                if one < 1 || one > layer_count {
                    return Err(Error::LayerOutOfRange {
                        layer: one.saturating_sub(1),
                        layer_count,
                    });
                }
                layers.insert(one - 1);
            }
            Ok(LayerSelection::Subset(layers))
        }
    }
}

fn parse_t_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = |s: &str| Error::InvalidArgument(format!("bad threshold grid {s:?}"));
    match parts.len() {
        1 => Ok(vec![parts[0].parse().map_err(|_| bad(spec))?]),
        3 => {
            let start: f64 = parts[0].parse().map_err(|_| bad(spec))?;
            let stop: f64 = parts[1].parse().map_err(|_| bad(spec))?;
            let step: f64 = parts[2].parse().map_err(|_| bad(spec))?;
            if !step.is_finite() || step <= 0.0 || stop < start {
                return Err(bad(spec));
            }
            let mut grid = Vec::new();
            let mut k = 0usize;
            loop {
                let v = start + step * k as f64;
                if v > stop + 1e-12 {
                    break;
                }
                grid.push(v);
                k += 1;
            }
            Ok(grid)
        }
        _ => Err(bad(spec)),
    }
}

/// All (set_id, 1-based index, text, target) prompts of the given sets.
fn flatten_prompts(sets: &[PromptSet]) -> Vec<(String, usize, String, String)> {
    let mut out = Vec::new();
    for set in sets {
        for (i, text) in set.prompts.iter().enumerate() {
            out.push((
                set.set_id.clone(),
                i + 1,
                text.clone(),
                set.fact.object.clone(),
            ));
        }
    }
    out
}

fn compute_maps(
    model: &Model,
    prompts: &[(String, usize, String, String)],
    config: &AttributionConfig,
) -> Result<Vec<AttributionMap>> {
    prompts
        .par_iter()
        .map(|(set_id, index, text, target)| {
            let tokenized = model.tokenize(text, target)?;
            attribute_prompt(model, &tokenized, &format!("{set_id}/{index}"), config)
        })
        .collect()
}

// -- commands ----------------------------------------------------------------

fn cmd_attribute(args: AttributeArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let info = model.info().clone();
    let (sets, prompt_digests) = resolve_prompt_sets(&args.prompts)?;
    let config = AttributionConfig {
        steps: args.steps,
        layers: parse_layers(args.layers.as_deref(), info.layer_count)?,
        normalize: args.normalize,
    };

    let flat = flatten_prompts(&sets);
    let maps = with_pool(args.jobs, || compute_maps(&model, &flat, &config))?;

    let file_names: Vec<String> = flat
        .iter()
        .map(|(set_id, index, _, _)| format!("{set_id}-p{index:02}.attribution.json"))
        .collect();
    let mut manifest = Manifest::new("attribute")
        .model(&info.identifier)
        .parameter("model", args.model.display())
        .parameter("prompts", &args.prompts)
        .parameter("steps", args.steps)
        .parameter("normalize", args.normalize)
        .parameter(
            "layers",
            args.layers.clone().unwrap_or_else(|| "all".into()),
        );
    manifest.inputs = model_inputs(&args.model)?
        .into_iter()
        .chain(prompt_digests)
        .collect();
    manifest.outputs = file_names
        .iter()
        .map(|n| args.out.join(n).display().to_string())
        .collect();

    for (((set_id, index, text, target), map), name) in
        flat.iter().zip(&maps).zip(&file_names)
    {
        let tokenized = model.tokenize(text, target)?;
        let file = AttributionMapFile::build(
            manifest.clone(),
            &info,
            PromptMeta {
                set_id: Some(set_id.clone()),
                index: Some(*index),
                text: text.clone(),
                target: target.clone(),
                target_id: tokenized.target_id,
            },
            map,
        );
        results::write_json(&file, &args.out.join(name))?;
    }
    println!("wrote {} attribution maps to {}", maps.len(), args.out.display());
    Ok(())
}

fn collect_map_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|e| Error::io(input, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.ends_with(".attribution.json"))
                })
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::InvalidArgument("no attribution map files found".into()));
    }
    Ok(files)
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    let files = collect_map_files(&args.maps)?;
    let mut maps = Vec::new();
    let mut manifest = Manifest::new("stats");
    for path in &files {
        let file: AttributionMapFile = results::read_json(path)?;
        results::expect_schema(&file.schema, results::SCHEMA_ATTRIBUTION)?;
        manifest = manifest.input_file(path)?;
        if manifest.model.is_empty() {
            manifest.model = file.model.identifier.clone();
        }
        maps.push(file.to_map()?);
    }
    let refs: Vec<&AttributionMap> = maps.iter().collect();
    let stats = layer_stats(&refs)?;
    manifest = manifest
        .parameter("n_maps", files.len())
        .output(&args.out.display().to_string());
    results::write_json(&LayerStatsFile::build(manifest, &stats), &args.out)?;
    println!(
        "layer stats over {} maps -> {}",
        files.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_select(args: SelectArgs) -> Result<()> {
    let file: AttributionMapFile = results::read_json(&args.map)?;
    results::expect_schema(&file.schema, results::SCHEMA_ATTRIBUTION)?;
    let map = file.to_map()?;
    let (set, label) = match (args.t, args.adaptive) {
        (Some(t), None) => (coarse_select(&map, t)?, format!("t={t}")),
        (None, Some(f)) => (adaptive_select(&map, f)?, format!("adaptive={f}")),
        _ => unreachable!("clap enforces the threshold group"),
    };
    let manifest = Manifest::new("select")
        .model(&file.model.identifier)
        .parameter("threshold", &label)
        .input_file(&args.map)?
        .output(&args.out.display().to_string());
    let out = NeuronSetFile::build(manifest, &set, map.layer_count());
    results::write_json(&out, &args.out)?;
    println!("{label}: {} neurons -> {}", set.len(), args.out.display());
    Ok(())
}

fn cmd_refine(args: RefineArgs) -> Result<()> {
    let mut sets = Vec::new();
    let mut layer_count = 0usize;
    let mut manifest = Manifest::new("refine").parameter("p", args.p);
    for path in &args.sets {
        let file: NeuronSetFile = results::read_json(path)?;
        results::expect_schema(&file.schema, results::SCHEMA_NEURON_SET)?;
        manifest = manifest.input_file(path)?;
        if manifest.model.is_empty() {
            manifest.model = file.manifest.model.clone();
        }
        layer_count = layer_count.max(file.layer_count);
        sets.push(file.to_set()?);
    }
    let refined = refine(&sets, args.p)?;
    manifest = manifest.output(&args.out.display().to_string());
    results::write_json(
        &NeuronSetFile::build(manifest, &refined, layer_count),
        &args.out,
    )?;
    println!(
        "refined {} sets at P={} -> {} neurons",
        sets.len(),
        args.p,
        refined.len()
    );
    Ok(())
}

fn cmd_overlap(args: OverlapArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let info = model.info().clone();
    let (sets_a, digests_a) = resolve_prompt_sets(&args.a)?;
    let (sets_b, digests_b) = resolve_prompt_sets(&args.b)?;
    let t_grid = parse_t_grid(&args.t)?;
    let config = AttributionConfig {
        steps: args.steps,
        layers: LayerSelection::All,
        normalize: args.normalize,
    };

    let flat_a = flatten_prompts(&sets_a);
    let flat_b = flatten_prompts(&sets_b);
    let (maps_a, maps_b) = with_pool(args.jobs, || {
        let a = compute_maps(&model, &flat_a, &config)?;
        let b = compute_maps(&model, &flat_b, &config)?;
        Ok((a, b))
    })?;
    let refs_a: Vec<&AttributionMap> = maps_a.iter().collect();
    let refs_b: Vec<&AttributionMap> = maps_b.iter().collect();
    let curve = overlap_curve(&refs_a, &refs_b, &t_grid, args.p)?;

    let mut manifest = Manifest::new("overlap")
        .model(&info.identifier)
        .parameter("a", &args.a)
        .parameter("b", &args.b)
        .parameter("t", &args.t)
        .parameter("p", args.p)
        .parameter("steps", args.steps)
        .parameter("normalize", args.normalize)
        .output(&args.out.display().to_string());
    manifest.inputs = model_inputs(&args.model)?
        .into_iter()
        .chain(digests_a)
        .chain(digests_b)
        .collect();
    results::write_json(&OverlapCurveFile::build(manifest, args.p, &curve), &args.out)?;
    println!(
        "overlap sweep over {} thresholds -> {}",
        t_grid.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_layer_overlap(args: LayerOverlapArgs) -> Result<()> {
    let file_a: NeuronSetFile = results::read_json(&args.a)?;
    let file_b: NeuronSetFile = results::read_json(&args.b)?;
    results::expect_schema(&file_a.schema, results::SCHEMA_NEURON_SET)?;
    results::expect_schema(&file_b.schema, results::SCHEMA_NEURON_SET)?;
    if file_a.layer_count != file_b.layer_count {
        return Err(Error::ShapeMismatch(format!(
            "sets disagree on layer count: {} vs {}",
            file_a.layer_count, file_b.layer_count
        )));
    }
    let a = file_a.to_set()?;
    let b = file_b.to_set()?;
    let mut hist = layer_overlap(&a, &b, file_a.layer_count)?;
    hist.t = args.t;
    let manifest = Manifest::new("layer-overlap")
        .model(&file_a.manifest.model)
        .input_file(&args.a)?
        .input_file(&args.b)?
        .output(&args.out.display().to_string());
    let out = LayerOverlapFile {
        schema: results::SCHEMA_LAYER_OVERLAP.to_string(),
        layer_base: results::LAYER_BASE,
        manifest,
        t: hist.t,
        counts: hist.counts.clone(),
    };
    results::write_json(&out, &args.out)?;
    println!(
        "{} common neurons -> {}",
        hist.counts.iter().sum::<usize>(),
        args.out.display()
    );
    Ok(())
}

fn cmd_suppress(args: SuppressArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let info = model.info().clone();

    let mut manifest = Manifest::new("suppress")
        .model(&info.identifier)
        .seed(args.seed)
        .parameter("trials", args.trials);
    manifest.inputs = model_inputs(&args.model)?;

    let (text, target) = match (&args.prompt, &args.prompts) {
        (Some(text), None) => {
            let target = args.target.clone().ok_or_else(|| {
                Error::InvalidArgument("--prompt requires --target".into())
            })?;
            (text.clone(), target)
        }
        (None, Some(spec)) => {
            let (sets, digests) = resolve_prompt_sets(spec)?;
            manifest.inputs.extend(digests);
            let flat = flatten_prompts(&sets);
            let (_, _, text, object) = flat
                .get(args.index.saturating_sub(1))
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "prompt index {} out of range ({} prompts)",
                        args.index,
                        flat.len()
                    ))
                })?
                .clone();
            (text, args.target.clone().unwrap_or(object))
        }
        _ => {
            return Err(Error::InvalidArgument(
                "give either --prompt/--target or --prompts [--index]".into(),
            ))
        }
    };

    let set_file: NeuronSetFile = results::read_json(&args.set)?;
    results::expect_schema(&set_file.schema, results::SCHEMA_NEURON_SET)?;
    let set = set_file.to_set()?;

    let prompt = model.tokenize(&text, &target)?;
    let report = suppression_experiment(&model, &prompt, &set, args.trials, args.seed)?;

    manifest = manifest
        .parameter("prompt", &text)
        .parameter("target", &target)
        .input_file(&args.set)?
        .output(&args.out.display().to_string());
    results::write_json(&SuppressionFile::build(manifest, &report), &args.out)?;
    println!(
        "attributed drop {:.6} vs random mean {:.6} ({} trials) -> {}",
        report.attributed_delta,
        report.random_mean(),
        report.trials,
        args.out.display()
    );
    Ok(())
}

fn cmd_grammar_convert(args: GrammarConvertArgs) -> Result<()> {
    let (converted, skipped) = convert_agreement_tsv(&args.input, &args.out)?;
    for skip in &skipped {
        eprintln!("note: line {}: {}", skip.line, skip.reason);
    }
    println!(
        "converted {converted} rows ({} skipped) -> {}",
        skipped.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_grammar_run(args: GrammarRunArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let info = model.info().clone();
    let load = load_agreement_dataset(&args.data, Some(&model))?;
    let mut examples = load.examples;
    examples.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    if let Some(limit) = args.limit {
        examples.truncate(limit);
    }
    if examples.is_empty() {
        return Err(Error::InvalidArgument(
            "no usable agreement examples after filtering".into(),
        ));
    }

    let strata: Option<Vec<u32>> = match &args.strata {
        None => None,
        Some(spec) => Some(
            spec.split(',')
                .map(|s| {
                    s.trim().parse::<u32>().map_err(|_| {
                        Error::InvalidArgument(format!("bad stratum {s:?}"))
                    })
                })
                .collect::<Result<_>>()?,
        ),
    };

    let config = AttributionConfig {
        steps: args.steps,
        layers: LayerSelection::All,
        normalize: false,
    };
    let records: Vec<GrammarRecord> = with_pool(args.jobs, || {
        examples
            .par_iter()
            .map(|ex| attribute_pair(&model, ex, &config))
            .collect()
    })?;

    let stats = stratify_stats(&records, strata.as_deref())?;

    // Decided/undecided counts per stratum, averaged over examples.
    let wanted: Vec<u32> = stats.keys().copied().collect();
    let mut neuron_strata = Vec::new();
    for stratum in wanted {
        let mut common_sum = vec![0.0f64; info.layer_count];
        let mut distinct_sum = vec![0.0f64; info.layer_count];
        let mut used = 0usize;
        for record in records.iter().filter(|r| r.n_attractors == stratum) {
            let good = match adaptive_select(&record.good_map, args.adaptive) {
                Ok(s) => s,
                Err(Error::DegenerateMap(_)) => continue,
                Err(e) => return Err(e),
            };
            let bad = match adaptive_select(&record.bad_map, args.adaptive) {
                Ok(s) => s,
                Err(Error::DegenerateMap(_)) => continue,
                Err(e) => return Err(e),
            };
            let counts = common_distinct(&good, &bad, info.layer_count)?;
            for l in 0..info.layer_count {
                common_sum[l] += counts.common[l] as f64;
                distinct_sum[l] += counts.distinct[l] as f64;
            }
            used += 1;
        }
        if used > 0 {
            for l in 0..info.layer_count {
                common_sum[l] /= used as f64;
                distinct_sum[l] /= used as f64;
            }
        }
        neuron_strata.push(StratumNeurons {
            n_attractors: stratum,
            n_examples: used,
            common_mean: common_sum,
            distinct_mean: distinct_sum,
        });
    }

    let stats_path = args.out.join("grammar-stats.json");
    let neurons_path = args.out.join("grammar-neurons.json");
    let mut manifest = Manifest::new("grammar-run")
        .model(&info.identifier)
        .parameter("data", args.data.display())
        .parameter("steps", args.steps)
        .parameter("adaptive", args.adaptive)
        .parameter(
            "strata",
            args.strata.clone().unwrap_or_else(|| "all".into()),
        )
        .parameter(
            "limit",
            args.limit.map_or("none".into(), |l| l.to_string()),
        )
        .input_file(&args.data)?
        .output(&stats_path.display().to_string())
        .output(&neurons_path.display().to_string());
    manifest.inputs = model_inputs(&args.model)?
        .into_iter()
        .chain(manifest.inputs)
        .collect();

    results::write_json(
        &GrammarStatsFile::build(
            manifest.clone(),
            args.steps,
            examples.len(),
            load.skipped.len(),
            &stats,
        ),
        &stats_path,
    )?;
    results::write_json(
        &GrammarNeuronsFile {
            schema: results::SCHEMA_GRAMMAR_NEURONS.to_string(),
            layer_base: results::LAYER_BASE,
            manifest,
            adaptive_fraction: args.adaptive,
            strata: neuron_strata,
        },
        &neurons_path,
    )?;
    println!(
        "{} examples ({} skipped) across {} strata -> {}",
        examples.len(),
        load.skipped.len(),
        stats.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_toy_verify(args: ToyVerifyArgs) -> Result<()> {
    let (checks, passed) = verify::run_all(args.seeds)?;
    for check in &checks {
        println!(
            "{} {}: {}",
            if check.passed { "PASS" } else { "FAIL" },
            check.name,
            check.detail
        );
    }
    if let Some(out) = &args.out {
        let manifest = Manifest::new("toy-verify")
            .model("randomized-planted-toys")
            .parameter("seeds", args.seeds)
            .output(&out.display().to_string());
        results::write_json(
            &ToyVerifyFile {
                schema: results::SCHEMA_TOY_VERIFY.to_string(),
                manifest,
                seeds: args.seeds,
                checks: checks.clone(),
                passed,
            },
            out,
        )?;
    }
    if !passed {
        return Err(Error::InvalidArgument(
            "oracle-agreement suite failed; see the check lines above".into(),
        ));
    }
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    let style = args.style.map(|s| match s {
        PlotStyle::Line => plot::Style::Line,
        PlotStyle::Bar => plot::Style::Bar,
    });
    let svg = plot::render_result_file(&args.input, style)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(&args.out, svg).map_err(|e| Error::io(&args.out, e))?;
    println!("rendered {} -> {}", args.input.display(), args.out.display());
    Ok(())
}
