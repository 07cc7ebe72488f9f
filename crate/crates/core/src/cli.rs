//! Command-line front end.
//!
//! Every subcommand resolves its settings as defaults, then flags, then the
//! optional `--config` TOML file, and writes the resolved settings to
//! `run_config.toml` in its output directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{PgceError, Result};
use crate::experiments::{
    run_benchmark, run_gridsearch, sample_instances, train_pipeline, BenchmarkConfig, BenchmarkFailure,
    GridSearchConfig, TrainConfig, BASELINE_METHOD, CONSTRAINED_METHOD,
};
use crate::forest::ForestModel;
use crate::genetic::{evolve, CounterfactualSet, GaConfig, ObjectiveWeights};
use crate::ingest::{
    catalog_summary, generate_synthetic, load_flux_csv, write_flux_csv, Dataset, EventCatalog, NonSepMode,
    SyntheticConfig,
};
use crate::metrics::{fidelity, InstanceMetrics, MetricsReport};
use crate::physics::PhysicsSpec;
use crate::reconstruction::{reconstruct_all, verify_reconstruction, write_long_csv, ReconstructionReport};
use crate::rng;

pub const RUN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Parser)]
#[command(
    name = "pgce",
    version,
    about = "Physics-guided counterfactual explanations for flux time-series classifiers"
)]
pub struct Cli {
    /// Worker threads for parallel stages (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic flux series and event catalog.
    Synth(SynthArgs),
    /// Train the forest classifier and fit the physics spec.
    Train(TrainArgs),
    /// Generate counterfactual sets for dataset instances.
    Explain(ExplainArgs),
    /// Sweep objective weights and report counterfactual quality per point.
    Gridsearch(GridsearchArgs),
    /// Compare constrained and baseline generation on sampled test instances.
    Benchmark(BenchmarkArgs),
    /// Re-classify stored counterfactual sets with a model.
    Fidelity(FidelityArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_sep: Option<usize>,
    #[arg(long)]
    pub n_non_sep: Option<usize>,
    /// `quiet` or `pre-event`.
    #[arg(long, value_parser = parse_non_sep_mode)]
    pub non_sep_mode: Option<NonSepMode>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub flux: Option<PathBuf>,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub window_samples: Option<usize>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

/// Model, spec and dataset produced by `train`.
#[derive(Debug, Args)]
pub struct ModelInputs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub inputs: ModelInputs,
    /// Flux CSV the dataset was built from; needed by `--reconstruct`.
    #[arg(long)]
    pub flux: Option<PathBuf>,
    /// Dataset instance index; repeatable. Defaults to the whole test split.
    #[arg(long = "instance")]
    pub instances: Vec<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_counterfactuals: Option<usize>,
    /// Unconstrained comparison run with baseline weights.
    #[arg(long)]
    pub baseline: bool,
    /// Exit with status 1 when any set has no valid candidate.
    #[arg(long)]
    pub strict: bool,
    /// Write per-candidate, per-channel time-series reconstructions.
    #[arg(long)]
    pub reconstruct: bool,
}

#[derive(Debug, Args)]
pub struct GridsearchArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub instances: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub n_counterfactuals: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FidelityArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory of counterfactual set JSON files.
    #[arg(long)]
    pub sets: Option<PathBuf>,
}

fn parse_non_sep_mode(s: &str) -> std::result::Result<NonSepMode, String> {
    match s {
        "quiet" => Ok(NonSepMode::Quiet),
        "pre-event" => Ok(NonSepMode::PreEvent),
        other => Err(format!("unknown non-SEP mode `{other}` (expected quiet or pre-event)")),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthRun {
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub flux: PathBuf,
    pub catalog: PathBuf,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputPaths {
    pub model: PathBuf,
    pub spec: PathBuf,
    pub dataset: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainRun {
    pub inputs: InputPaths,
    pub flux: Option<PathBuf>,
    /// Empty means every test instance.
    pub instances: Vec<usize>,
    pub baseline: bool,
    pub strict: bool,
    pub reconstruct: bool,
    pub weights: ObjectiveWeights,
    pub ga: GaConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridsearchRun {
    pub inputs: InputPaths,
    pub gridsearch: GridSearchConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkRun {
    pub inputs: InputPaths,
    pub benchmark: BenchmarkConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FidelityRun {
    pub model: PathBuf,
    pub sets: PathBuf,
}

/// Parses `args`, runs the command and maps the outcome to an exit status:
/// 0 success, 1 runtime failure, 2 usage or schema error.
pub fn run_from_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage_error() { 2 } else { 1 })
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(PgceError::InvalidConfig("--jobs must be at least 1".into()));
        }
        builder = builder.num_threads(jobs);
    }
    let pool = builder
        .build()
        .map_err(|e| PgceError::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Explain(a) => cmd_explain(&a),
        Command::Gridsearch(a) => cmd_gridsearch(&a),
        Command::Benchmark(a) => cmd_benchmark(&a),
        Command::Fidelity(a) => cmd_fidelity(&a),
    })
}

fn read_config_table(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| PgceError::io(path, e))?;
    toml::from_str(&text).map_err(|e| PgceError::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

/// Overlays the config file, if any, on `base`.
pub fn resolve<T: Serialize + DeserializeOwned>(base: T, config: Option<&Path>) -> Result<T> {
    match config {
        None => Ok(base),
        Some(path) => overlay(base, read_config_table(path)?, path),
    }
}

/// Overlays TOML `text` on `base`; `origin` names the source in errors.
pub fn resolve_text<T: Serialize + DeserializeOwned>(base: T, text: &str, origin: &Path) -> Result<T> {
    let over: toml::Table = toml::from_str(text).map_err(|e| PgceError::Schema {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })?;
    overlay(base, over, origin)
}

fn overlay<T: Serialize + DeserializeOwned>(base: T, over: toml::Table, origin: &Path) -> Result<T> {
    let mut table = toml::Table::try_from(&base)?;
    merge(&mut table, over);
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| PgceError::Schema {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
}

fn prepare_out(out: &Path, run: &impl Serialize) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| PgceError::io(out, e))?;
    let path = out.join(RUN_CONFIG_FILE);
    fs::write(&path, toml::to_string(run)?).map_err(|e| PgceError::io(&path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| PgceError::io(path, e))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| PgceError::io(path, e))
}

fn required<'a>(path: &'a Path, what: &str) -> Result<&'a Path> {
    if path.as_os_str().is_empty() {
        Err(PgceError::InvalidConfig(format!("missing required input `{what}`")))
    } else {
        Ok(path)
    }
}

fn set_path(slot: &mut PathBuf, flag: &Option<PathBuf>) {
    if let Some(p) = flag {
        *slot = p.clone();
    }
}

fn input_paths(flags: &ModelInputs) -> InputPaths {
    let mut p = InputPaths::default();
    set_path(&mut p.model, &flags.model);
    set_path(&mut p.spec, &flags.spec);
    set_path(&mut p.dataset, &flags.dataset);
    p
}

struct Loaded {
    model: ForestModel,
    spec: PhysicsSpec,
    dataset: Dataset,
}

fn load_inputs(p: &InputPaths) -> Result<Loaded> {
    let model = ForestModel::load(required(&p.model, "model")?)?;
    let spec = PhysicsSpec::load(required(&p.spec, "spec")?)?;
    let dataset = Dataset::load(required(&p.dataset, "dataset")?)?;
    let d = dataset.layout.dim();
    if model.n_features != d {
        return Err(PgceError::dims(d, model.n_features));
    }
    if spec.dim() != d {
        return Err(PgceError::dims(d, spec.dim()));
    }
    Ok(Loaded { model, spec, dataset })
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut run = SynthRun::default();
    let s = &mut run.synthetic;
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.n_sep {
        s.n_sep = v;
    }
    if let Some(v) = args.n_non_sep {
        s.n_non_sep = v;
    }
    if let Some(v) = args.non_sep_mode {
        s.non_sep_mode = v;
    }
    let run = resolve(run, args.config.as_deref())?;
    let (series, catalog) = generate_synthetic(&run.synthetic)?;
    prepare_out(&args.out, &run)?;
    write_flux_csv(create(&args.out.join("flux.csv"))?, &series)?;
    catalog.write(create(&args.out.join("catalog.csv"))?)?;
    write_json(&args.out.join("summary.json"), &catalog_summary(&catalog))?;
    eprintln!(
        "synth: {} samples, {} events -> {}",
        series.len(),
        catalog.events.len(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut run = TrainRun::default();
    set_path(&mut run.flux, &args.flux);
    set_path(&mut run.catalog, &args.catalog);
    if let Some(v) = args.seed {
        run.train.seed = v;
        run.train.dataset.seed = v;
    }
    if let Some(v) = args.folds {
        run.train.folds = v;
    }
    if let Some(v) = args.window_samples {
        run.train.dataset.window_samples = v;
    }
    if let Some(v) = args.test_fraction {
        run.train.dataset.test_fraction = v;
    }
    let run = resolve(run, args.config.as_deref())?;
    let (series, quality) = load_flux_csv(required(&run.flux, "flux")?)?;
    let catalog = EventCatalog::load(required(&run.catalog, "catalog")?)?;
    let outcome = train_pipeline(&series, &catalog, &run.train)?;
    prepare_out(&args.out, &run)?;
    outcome.model.save(&args.out.join("model.json"))?;
    outcome.spec.save(&args.out.join("spec.toml"))?;
    outcome.dataset.save(&args.out.join("dataset.json"))?;
    write_json(&args.out.join("skill_report.json"), &outcome.report)?;
    write_json(&args.out.join("data_quality.json"), &quality)?;
    let h = &outcome.report.held_out;
    eprintln!(
        "train: {} train / {} test instances, held-out accuracy {:?}, TSS {:?}",
        outcome.report.train_instances, outcome.report.test_instances, h.accuracy, h.tss
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct ExplainEntry {
    instance: usize,
    file: String,
    query_label: u8,
    target_class: u8,
    valid: Vec<bool>,
    smoothing_reverted: Vec<bool>,
}

pub fn cmd_explain(args: &ExplainArgs) -> Result<()> {
    let file = args.config.as_deref().map(read_config_table).transpose()?;
    let file_baseline = file
        .as_ref()
        .and_then(|t| t.get("baseline"))
        .and_then(|v| v.as_bool())
        .unwrap_or(false);
    let baseline = args.baseline || file_baseline;
    let mut run = ExplainRun {
        baseline,
        weights: if baseline {
            ObjectiveWeights::baseline()
        } else {
            ObjectiveWeights::default()
        },
        ga: if baseline {
            GaConfig::default().baseline()
        } else {
            GaConfig::default()
        },
        ..ExplainRun::default()
    };
    run.inputs = input_paths(&args.inputs);
    if args.flux.is_some() {
        run.flux = args.flux.clone();
    }
    if !args.instances.is_empty() {
        run.instances = args.instances.clone();
    }
    run.strict |= args.strict;
    run.reconstruct |= args.reconstruct;
    if let Some(v) = args.seed {
        run.ga.seed = v;
    }
    if let Some(v) = args.n_counterfactuals {
        run.ga.n_counterfactuals = v;
    }
    let run = resolve(run, args.config.as_deref())?;
    let inputs = load_inputs(&run.inputs)?;
    let ids: Vec<usize> = if run.instances.is_empty() {
        inputs.dataset.test.clone()
    } else {
        run.instances.clone()
    };
    if let Some(&bad) = ids.iter().find(|&&i| i >= inputs.dataset.instances.len()) {
        return Err(PgceError::InvalidConfig(format!(
            "instance {bad} out of range ({} instances)",
            inputs.dataset.instances.len()
        )));
    }
    let series = match (&run.flux, run.reconstruct) {
        (Some(path), true) => Some(load_flux_csv(path)?.0),
        (None, true) => return Err(PgceError::InvalidConfig("--reconstruct needs --flux".into())),
        _ => None,
    };
    prepare_out(&args.out, &run)?;
    let sets_dir = args.out.join("sets");
    fs::create_dir_all(&sets_dir).map_err(|e| PgceError::io(&sets_dir, e))?;

    let mut entries = Vec::new();
    let mut any_invalid = false;
    for &id in &ids {
        let ga = GaConfig {
            seed: rng::derive_seed(run.ga.seed, id as u64),
            ..run.ga
        };
        let set = evolve(
            &inputs.dataset.instances[id],
            &inputs.model,
            &inputs.spec,
            &run.weights,
            &ga,
        )?;
        let name = format!("instance_{id}.json");
        set.save(&sets_dir.join(&name))?;
        if !set.any_valid() {
            any_invalid = true;
        }
        if let Some(series) = &series {
            write_reconstructions(&args.out, id, series, &set, &inputs.dataset)?;
        }
        entries.push(ExplainEntry {
            instance: id,
            file: format!("sets/{name}"),
            query_label: set.query_label,
            target_class: set.target_class,
            valid: set.candidates.iter().map(|c| c.valid).collect(),
            smoothing_reverted: set.candidates.iter().map(|c| c.smoothing_reverted).collect(),
        });
    }
    write_json(&args.out.join("explain_summary.json"), &entries)?;
    let valid = entries.iter().filter(|e| e.valid.iter().any(|v| *v)).count();
    eprintln!(
        "explain: {valid}/{} instances with a valid counterfactual",
        entries.len()
    );
    if run.strict && any_invalid {
        return Err(PgceError::NoValidCandidate);
    }
    Ok(())
}

fn write_reconstructions(
    out: &Path,
    id: usize,
    series: &crate::series::FluxSeries,
    set: &CounterfactualSet,
    dataset: &Dataset,
) -> Result<()> {
    let dir = out.join("reconstruction");
    fs::create_dir_all(&dir).map_err(|e| PgceError::io(&dir, e))?;
    let mut reports: Vec<(usize, ReconstructionReport)> = Vec::new();
    for item in reconstruct_all(series, set, &dataset.grid, dataset.offsets[id]) {
        let result = item.result?;
        let cfe = set.candidate_vector(item.candidate);
        reports.push((item.candidate, verify_reconstruction(&result, &cfe, &dataset.grid)));
        let path = dir.join(format!("instance_{id}_c{}_{}.csv", item.candidate, result.channel));
        write_long_csv(create(&path)?, &[(item.candidate, &result)])?;
    }
    #[derive(Serialize)]
    struct Entry<'a> {
        candidate: usize,
        report: &'a ReconstructionReport,
    }
    let rows: Vec<Entry> = reports
        .iter()
        .map(|(c, r)| Entry {
            candidate: *c,
            report: r,
        })
        .collect();
    write_json(&dir.join(format!("instance_{id}_report.json")), &rows)
}

pub fn cmd_gridsearch(args: &GridsearchArgs) -> Result<()> {
    let mut run = GridsearchRun {
        inputs: input_paths(&args.inputs),
        ..GridsearchRun::default()
    };
    if let Some(v) = args.seed {
        run.gridsearch.seed = v;
    }
    if let Some(v) = args.seeds {
        run.gridsearch.seeds = v;
    }
    if let Some(v) = args.instances {
        run.gridsearch.instances = v;
    }
    let run = resolve(run, args.config.as_deref())?;
    let inputs = load_inputs(&run.inputs)?;
    let cfg = &run.gridsearch;
    let ids = sample_instances(&inputs.dataset, &inputs.dataset.test, cfg.instances, cfg.seed);
    let instances: Vec<_> = ids.iter().map(|&i| inputs.dataset.instances[i].clone()).collect();
    let report = run_gridsearch(&instances, &inputs.model, &inputs.spec, cfg)?;
    prepare_out(&args.out, &run)?;

    let mut w = csv::Writer::from_writer(create(&args.out.join("gridsearch.csv"))?);
    w.write_record([
        "config",
        "proximity_weight",
        "sparsity_weight",
        "diversity_weight",
        "ordering_penalty_weight",
        "metric",
        "value",
    ])?;
    for (index, wts, metric, value) in report.tidy_rows() {
        w.write_record([
            index.to_string(),
            wts.proximity_weight.to_string(),
            wts.sparsity_weight.to_string(),
            wts.diversity_weight.to_string(),
            wts.ordering_penalty_weight.to_string(),
            metric.to_string(),
            value.to_string(),
        ])?;
    }
    w.flush()
        .map_err(|e| PgceError::io(args.out.join("gridsearch.csv"), e))?;

    #[derive(Serialize)]
    struct Out<'a> {
        instances: &'a [usize],
        best: Option<&'a ObjectiveWeights>,
        report: &'a crate::experiments::GridSearchReport,
    }
    let best = report.best_index.map(|i| &report.points[i].weights);
    write_json(
        &args.out.join("gridsearch_report.json"),
        &Out {
            instances: &ids,
            best,
            report: &report,
        },
    )?;
    match best {
        Some(b) => {
            eprintln!(
                "gridsearch: {} points, best proximity={} sparsity={} diversity={} ordering={}",
                report.points.len(),
                b.proximity_weight,
                b.sparsity_weight,
                b.diversity_weight,
                b.ordering_penalty_weight
            );
            Ok(())
        }
        None => Err(PgceError::NoValidCandidate),
    }
}

#[derive(Debug, Serialize)]
struct BenchmarkFile<'a> {
    instances: &'a [usize],
    excluded: usize,
    failures: &'a [BenchmarkFailure],
    report: &'a MetricsReport,
}

pub fn cmd_benchmark(args: &BenchmarkArgs) -> Result<()> {
    let mut run = BenchmarkRun {
        inputs: input_paths(&args.inputs),
        ..BenchmarkRun::default()
    };
    if let Some(v) = args.seed {
        run.benchmark.seed = v;
    }
    if let Some(v) = args.instances {
        run.benchmark.instances = v;
    }
    if let Some(v) = args.n_counterfactuals {
        run.benchmark.ga.n_counterfactuals = v;
    }
    let run = resolve(run, args.config.as_deref())?;
    let inputs = load_inputs(&run.inputs)?;
    let cfg = &run.benchmark;
    let ids = sample_instances(&inputs.dataset, &inputs.dataset.test, cfg.instances, cfg.seed);
    let instances: Vec<_> = ids.iter().map(|&i| inputs.dataset.instances[i].clone()).collect();
    let outcome = run_benchmark(&instances, &ids, &inputs.model, &inputs.spec, cfg)?;
    prepare_out(&args.out, &run)?;

    let sets_dir = args.out.join("sets");
    for method in [CONSTRAINED_METHOD, BASELINE_METHOD] {
        let dir = sets_dir.join(method);
        fs::create_dir_all(&dir).map_err(|e| PgceError::io(&dir, e))?;
    }
    for (k, &id) in outcome.instances.iter().enumerate() {
        outcome.constrained_sets[k].save(&sets_dir.join(CONSTRAINED_METHOD).join(format!("instance_{id}.json")))?;
        outcome.baseline_sets[k].save(&sets_dir.join(BASELINE_METHOD).join(format!("instance_{id}.json")))?;
    }

    let excluded = outcome.instances.len() - outcome.constrained.len();
    write_json(
        &args.out.join("benchmark_report.json"),
        &BenchmarkFile {
            instances: &outcome.instances,
            excluded,
            failures: &outcome.failures,
            report: &outcome.report,
        },
    )?;

    let table_path = args.out.join("benchmark_table.csv");
    let mut w = csv::Writer::from_writer(create(&table_path)?);
    w.write_record(["method", "instances", "metric", "mean", "std"])?;
    for m in &outcome.report.methods {
        for (metric, v) in [
            ("dtw", m.dtw),
            ("sparsity", m.sparsity),
            ("diversity", m.diversity),
            ("runtime_seconds", m.runtime_seconds),
        ] {
            w.write_record([
                m.method.clone(),
                m.instances.to_string(),
                metric.to_string(),
                v.mean.to_string(),
                v.std.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| PgceError::io(&table_path, e))?;

    let radar_path = args.out.join("radar.csv");
    let mut w = csv::Writer::from_writer(create(&radar_path)?);
    w.write_record(["metric", "method", "normalized", "higher_is_better"])?;
    for axis in &outcome.report.radar {
        for (m, v) in outcome.report.methods.iter().zip(&axis.normalized) {
            w.write_record([
                axis.metric.clone(),
                m.method.clone(),
                v.to_string(),
                axis.higher_is_better.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| PgceError::io(&radar_path, e))?;

    let per_path = args.out.join("per_instance.csv");
    let mut w = csv::Writer::from_writer(create(&per_path)?);
    w.write_record([
        "method",
        "instance",
        "dtw",
        "sparsity",
        "changed_features",
        "diversity",
        "ordering_violations",
        "range_violations",
        "valid_fraction",
        "runtime_seconds",
    ])?;
    let rows = |method: &str, rows: &[InstanceMetrics], w: &mut csv::Writer<fs::File>| -> Result<()> {
        for r in rows {
            w.write_record([
                method.to_string(),
                r.instance.to_string(),
                r.dtw.to_string(),
                r.sparsity_fraction.to_string(),
                r.changed_features.to_string(),
                r.diversity.to_string(),
                r.ordering_violations.to_string(),
                r.range_violations.to_string(),
                r.valid_fraction.to_string(),
                r.runtime_seconds.to_string(),
            ])?;
        }
        Ok(())
    };
    rows(CONSTRAINED_METHOD, &outcome.constrained, &mut w)?;
    rows(BASELINE_METHOD, &outcome.baseline, &mut w)?;
    w.flush().map_err(|e| PgceError::io(&per_path, e))?;

    for m in &outcome.report.methods {
        eprintln!(
            "benchmark: {:<11} dtw {:.3} ± {:.3}  sparsity {:.3} ± {:.3}  diversity {:.3}  runtime {:.3}s",
            m.method, m.dtw.mean, m.dtw.std, m.sparsity.mean, m.sparsity.std, m.diversity.mean, m.runtime_seconds.mean
        );
    }
    if excluded > 0 {
        eprintln!("benchmark: {excluded} instance(s) excluded, see benchmark_report.json");
    }
    Ok(())
}

/// Loads every `*.json` file directly inside `dir`, in name order.
pub fn load_sets(dir: &Path) -> Result<Vec<CounterfactualSet>> {
    let entries = fs::read_dir(dir).map_err(|e| PgceError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| PgceError::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "json") {
            paths.push(path);
        }
    }
    paths.sort();
    paths.iter().map(|p| CounterfactualSet::load(p)).collect()
}

pub fn cmd_fidelity(args: &FidelityArgs) -> Result<()> {
    let mut run = FidelityRun::default();
    set_path(&mut run.model, &args.model);
    set_path(&mut run.sets, &args.sets);
    let run = resolve(run, args.config.as_deref())?;
    let model = ForestModel::load(required(&run.model, "model")?)?;
    let sets = load_sets(required(&run.sets, "sets")?)?;
    if let Some(bad) = sets.iter().find(|s| s.query.dim() != model.n_features) {
        return Err(PgceError::dims(model.n_features, bad.query.dim()));
    }
    let report = fidelity(&sets, &model)?;
    prepare_out(&args.out, &run)?;
    write_json(&args.out.join("fidelity_report.json"), &report)?;
    eprintln!(
        "fidelity: {} candidates from {} sets, accuracy {}",
        report.candidates,
        sets.len(),
        report.accuracy
    );
    Ok(())
}
