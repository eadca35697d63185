mod config;
mod manifest;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use pin_core::data::{load_csv, split, write_csv};
use pin_core::importance::{forward_select, write_tables_csv};
use pin_core::model::{parameter_count, predict_grid};
use pin_core::persist::{load_model, save_model};
use pin_core::shap::{
    export_waterfall, mean_abs_psi, sample_rows, write_importance_csv, write_waterfall_csv, BackgroundSet, Explainer,
    ShapReport,
};
use pin_core::synth::{generate, GeneratorSpec};
use pin_core::training::{Ensemble, InterceptModel, Predictor};
use pin_core::{evaluate, train, Dataset, FeatureSchema, PinModel, ScalerSet, STREAM_INSTANCES};

use config::{feature_index, parse_seeds, RunConfig};
use manifest::RunManifest;

/// Losses are reported in units of 10⁻².
const LOSS_UNITS: f64 = 100.0;

#[derive(Clone, Debug)]
struct SeedList(Vec<u64>);

fn parse_seed_list(text: &str) -> Result<SeedList, String> {
    parse_seeds(text).map(SeedList)
}

#[derive(Parser, Debug)]
#[command(name = "pin", version, about = "Pairwise interaction networks for claim frequency data")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model per seed.
    Train(TrainArgs),
    /// Out-of-sample Poisson deviance of one or more models.
    Evaluate(EvaluateArgs),
    /// Frequency predictions (ensemble mean when several models are given).
    Predict(PredictArgs),
    /// Pairwise interaction importance table of a single round.
    Importance(SelectArgs),
    /// Greedy forward selection of interaction pairs.
    Select(SelectArgs),
    /// Exact Shapley decompositions of sampled instances.
    Shap(ShapArgs),
    /// Two-feature marginal prediction grid.
    Grid(GridArgs),
    /// Draw a synthetic dataset from a generator spec.
    Synth(SynthArgs),
    /// Parameter accounting of a config or model.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run config or bare schema (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Model file; with several seeds `-seed<N>` is inserted before the extension.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Overrides `--seed`: `1..10`, `1,4,7`, ...
    #[arg(long, value_parser = parse_seed_list)]
    seeds: Option<SeedList>,
    /// Parallel training runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Restrict the model to the diagonal terms.
    #[arg(long)]
    diagonal: bool,
    /// Per-epoch loss history CSV (suffixed like `--out`).
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Also report the intercept-only model fitted on this data.
    #[arg(long)]
    intercept_from: Option<PathBuf>,
    /// JSON summary.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    config: PathBuf,
    /// Learning data.
    #[arg(long)]
    data: PathBuf,
    /// Held-out data; a seeded split of `--data` when absent.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Selection rounds (`select` only).
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ShapArgs {
    #[arg(long)]
    model: PathBuf,
    /// Rows to sample background and instances from.
    #[arg(long)]
    data: PathBuf,
    /// Background size.
    #[arg(long, default_value_t = 2000)]
    background: usize,
    /// Number of explained instances.
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory.
    #[arg(long, default_value = "shap")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// First feature (name or 1-based index).
    #[arg(long)]
    a: String,
    #[arg(long)]
    b: String,
    #[arg(long, default_value_t = 21)]
    resolution: usize,
    /// Background rows averaged per cell.
    #[arg(long, default_value_t = 2000)]
    background: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct InspectArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Importance(a) => cmd_select(a, "importance", 1),
        Command::Select(a) => {
            let rounds = a.rounds;
            cmd_select(a, "select", rounds)
        }
        Command::Shap(a) => cmd_shap(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn load_data(path: &Path, schema: &FeatureSchema) -> Result<Dataset> {
    load_csv(path, schema).with_context(|| format!("loading {}", path.display()))
}

/// Raw rows mapped into the scaled space of `model`.
fn load_for_model(path: &Path, model: &PinModel) -> Result<Dataset> {
    Ok(model.scalers.apply(&load_data(path, &model.schema)?))
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<PinModel>> {
    paths
        .iter()
        .map(|p| load_model(p).with_context(|| format!("loading model {}", p.display())))
        .collect()
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        bail!("--jobs must be positive");
    }
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?)
}

/// `m.json` → `m-seed3.json` when several seeds share one output name.
fn seeded_path(path: &Path, seed: u64, many: bool) -> PathBuf {
    if !many {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}-seed{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}-seed{seed}"),
    };
    path.with_file_name(name)
}

fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut manifest = RunManifest::new("train");
    let config = RunConfig::load(&args.config)?;
    let raw = load_data(&args.data, &config.schema)?;
    let scalers = ScalerSet::fit(&config.schema, &raw)?;
    let data = scalers.apply(&raw);
    let seeds = args.seeds.clone().map_or_else(|| vec![args.seed], |s| s.0);
    let many = seeds.len() > 1;
    eprintln!("training {} seed(s) on {} rows", seeds.len(), data.len());

    let fit = |seed: u64| -> Result<(u64, PinModel, pin_core::TrainHistory)> {
        let mut model = PinModel::new(config.schema.clone(), scalers.clone(), config.model, seed)?;
        if args.diagonal {
            model = model.diagonal_only();
        }
        let (model, history) = train(&data, model, &config.training, seed)?;
        Ok((seed, model, history))
    };
    let results: Vec<_> = thread_pool(args.jobs)?.install(|| seeds.par_iter().map(|&s| fit(s)).collect());

    for result in results {
        let (seed, model, history) = result?;
        let path = seeded_path(&args.out, seed, many);
        save_model(&model, &path)?;
        eprintln!(
            "seed {seed}: {} epochs, best epoch {}, validation deviance {:.4} x1e-2 -> {}",
            history.epochs.len(),
            history.best_epoch.map_or("-".to_string(), |e| e.to_string()),
            history.best_validation_loss().unwrap_or(f64::NAN) * LOSS_UNITS,
            path.display()
        );
        manifest.output_paths.push(path);
        if let Some(h) = &args.history {
            let hp = seeded_path(h, seed, many);
            history.write_csv(create_writer(&hp)?)?;
            manifest.output_paths.push(hp);
        }
    }
    manifest.config_paths.push(args.config);
    manifest.input_paths.push(args.data);
    manifest.seeds = seeds;
    manifest.finish(&args.out)?;
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let mut manifest = RunManifest::new("evaluate");
    let models = load_models(&args.models)?;
    let data = load_for_model(&args.data, &models[0])?;
    let mut summary = serde_json::Map::new();
    let mut losses = Vec::with_capacity(models.len());
    for (path, model) in args.models.iter().zip(&models) {
        model.check_schema(&models[0].schema)?;
        let loss = evaluate(model, &data)?;
        println!("{}\t{:.4}", path.display(), loss * LOSS_UNITS);
        losses.push(loss);
    }
    summary.insert("losses".into(), serde_json::json!(losses));
    if models.len() > 1 {
        let n = losses.len() as f64;
        let mean = losses.iter().sum::<f64>() / n;
        let sd = (losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let ensemble = evaluate(&Ensemble::new(models.clone())?, &data)?;
        println!("mean\t{:.4} (sd {:.4})", mean * LOSS_UNITS, sd * LOSS_UNITS);
        println!("ensemble\t{:.4}", ensemble * LOSS_UNITS);
        summary.insert("mean".into(), serde_json::json!(mean));
        summary.insert("sd".into(), serde_json::json!(sd));
        summary.insert("ensemble".into(), serde_json::json!(ensemble));
    }
    if let Some(learn) = &args.intercept_from {
        let learn = load_for_model(learn, &models[0])?;
        let loss = evaluate(&InterceptModel::fit(&learn), &data)?;
        println!("intercept\t{:.4}", loss * LOSS_UNITS);
        summary.insert("intercept".into(), serde_json::json!(loss));
        manifest.input_paths.push(args.intercept_from.clone().unwrap_or_default());
    }
    manifest.input_paths.extend(args.models.iter().cloned());
    manifest.input_paths.push(args.data);
    manifest.seeds = models.iter().flat_map(|m| m.seeds.clone()).collect();
    if let Some(out) = &args.out {
        pin_core::persist::write_atomic(out, serde_json::to_string_pretty(&summary)?.as_bytes())?;
        manifest.output_paths.push(out.clone());
        manifest.finish(out)?;
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let mut manifest = RunManifest::new("predict");
    let models = load_models(&args.models)?;
    let data = load_for_model(&args.data, &models[0])?;
    let ensemble = Ensemble::new(models)?;
    let predictions = ensemble.predict_frequencies(&data);
    let sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(create_writer(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let mut wtr = csv::Writer::from_writer(sink);
    wtr.write_record(["row", "frequency", "expected_count"])?;
    for (i, (p, v)) in predictions.iter().zip(data.exposure()).enumerate() {
        wtr.write_record([i.to_string(), format!("{p:.12e}"), format!("{:.12e}", p * v)])?;
    }
    wtr.flush()?;
    if let Some(out) = &args.out {
        manifest.input_paths.extend(args.models.iter().cloned());
        manifest.input_paths.push(args.data.clone());
        manifest.seeds = ensemble.members().iter().flat_map(|m| m.seeds.clone()).collect();
        manifest.output_paths.push(out.clone());
        manifest.finish(out)?;
    }
    Ok(())
}

fn cmd_select(args: SelectArgs, command: &str, rounds: usize) -> Result<()> {
    let mut manifest = RunManifest::new(command);
    let config = RunConfig::load(&args.config)?;
    let raw = load_data(&args.data, &config.schema)?;
    let scalers = ScalerSet::fit(&config.schema, &raw)?;
    let (learn, test) = match &args.test {
        Some(p) => (scalers.apply(&raw), scalers.apply(&load_data(p, &config.schema)?)),
        None => split(&scalers.apply(&raw), args.test_fraction, args.seed)?,
    };
    let template = PinModel::new(config.schema.clone(), scalers, config.model, args.seed)?;
    let start = Instant::now();
    let selection = forward_select(&learn, &test, rounds, &template, &config.training, args.seed)?;
    let names: Vec<String> = config.schema.features.iter().map(|f| f.name.clone()).collect();
    for table in &selection.tables {
        let top = &table.rows[0];
        eprintln!(
            "round {}: {}:{} baseline {:.4} augmented {:.4} delta {:.4} x1e-2",
            table.round,
            names[top.pair.0],
            names[top.pair.1],
            top.baseline_loss * LOSS_UNITS,
            top.augmented_loss * LOSS_UNITS,
            top.delta * LOSS_UNITS
        );
    }
    eprintln!("{command} finished in {:.1}s", start.elapsed().as_secs_f64());
    write_tables_csv(create_writer(&args.out)?, &selection.tables, &names, LOSS_UNITS)?;
    manifest.config_paths.push(args.config);
    manifest.input_paths.push(args.data);
    manifest.input_paths.extend(args.test);
    manifest.seeds = vec![args.seed];
    manifest.output_paths.push(args.out.clone());
    manifest.finish(&args.out)?;
    Ok(())
}

fn cmd_shap(args: ShapArgs) -> Result<()> {
    let mut manifest = RunManifest::new("shap");
    let model = load_model(&args.model)?;
    let data = load_for_model(&args.data, &model)?;
    if args.instances == 0 || args.instances > data.len() {
        bail!("--instances must lie in 1..={}", data.len());
    }
    let background = BackgroundSet::sample(&data, args.background.min(data.len()), args.seed)?;
    let rows = sample_rows(data.len(), args.instances, args.seed, STREAM_INSTANCES);
    let start = Instant::now();
    let explainer = Explainer::new(&model, &background)?;
    let reports: Vec<ShapReport> = thread_pool(args.jobs)?.install(|| {
        rows.par_iter()
            .map(|&i| explainer.explain(data.row(i), i))
            .collect::<pin_core::Result<_>>()
    })?;
    let secs = start.elapsed().as_secs_f64();
    eprintln!(
        "explained {} instances with |B|={} in {secs:.2}s",
        reports.len(),
        background.len()
    );

    fs::create_dir_all(&args.out)?;
    let names: Vec<String> = model.schema.features.iter().map(|f| f.name.clone()).collect();
    for report in &reports {
        let path = args.out.join(format!("instance-{}.csv", report.instance));
        report.write_csv(create_writer(&path)?, &names)?;
        let wpath = args.out.join(format!("waterfall-{}.csv", report.instance));
        write_waterfall_csv(create_writer(&wpath)?, &export_waterfall(report), &names)?;
        manifest.output_paths.push(path);
        manifest.output_paths.push(wpath);
    }
    let ipath = args.out.join("importance.csv");
    write_importance_csv(create_writer(&ipath)?, &names, &mean_abs_psi(&reports)?)?;
    manifest.output_paths.push(ipath);
    manifest.input_paths.push(args.model);
    manifest.input_paths.push(args.data);
    manifest.seeds = vec![args.seed];
    manifest.finish(&args.out)?;
    Ok(())
}

fn cmd_grid(args: GridArgs) -> Result<()> {
    let mut manifest = RunManifest::new("grid");
    let model = load_model(&args.model)?;
    let data = load_for_model(&args.data, &model)?;
    let (a, b) = (feature_index(&model.schema, &args.a)?, feature_index(&model.schema, &args.b)?);
    let background = BackgroundSet::sample(&data, args.background.min(data.len()), args.seed)?;
    let cells = predict_grid(&model, a, b, args.resolution, background.data())?;
    let label = |j: usize, v: f64| -> String {
        match &model.scalers.scalers[j] {
            Some(s) => format!("{}", s.invert(v)),
            None => model.schema.features[j].levels[v as usize - 1].clone(),
        }
    };
    let mut wtr = csv::Writer::from_writer(create_writer(&args.out)?);
    let (na, nb) = (&model.schema.features[a].name, &model.schema.features[b].name);
    wtr.write_record([na.as_str(), nb.as_str(), "mean_frequency"])?;
    for c in &cells {
        wtr.write_record([label(a, c.a), label(b, c.b), format!("{:.12e}", c.mean_prediction)])?;
    }
    wtr.flush()?;
    manifest.input_paths.push(args.model);
    manifest.input_paths.push(args.data);
    manifest.seeds = vec![args.seed];
    manifest.output_paths.push(args.out.clone());
    manifest.finish(&args.out)?;
    Ok(())
}

/// `d.csv` → `d.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut manifest = RunManifest::new("synth");
    let text = fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let mut spec = GeneratorSpec::from_json_str(&text)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let (data, schema, oracle) = generate(&spec)?;
    write_csv(create_writer(&args.out)?, &schema, &data)?;
    let schema_path = sibling(&args.out, "schema.json");
    pin_core::persist::write_atomic(&schema_path, serde_json::to_string_pretty(&schema)?.as_bytes())?;
    let oracle_path = sibling(&args.out, "oracle.json");
    pin_core::persist::write_atomic(&oracle_path, serde_json::to_string(&oracle)?.as_bytes())?;
    eprintln!(
        "{} rows, {} claims; true deviance {:.4}, additive deviance {:.4} x1e-2",
        data.len(),
        data.counts().iter().sum::<f64>(),
        oracle.true_deviance * LOSS_UNITS,
        oracle.additive_deviance * LOSS_UNITS
    );
    manifest.config_paths.push(args.spec);
    manifest.seeds = vec![spec.seed];
    manifest.output_paths = vec![args.out.clone(), schema_path, oracle_path];
    manifest.finish(&args.out)?;
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let (config, schema) = match (&args.config, &args.model) {
        (Some(p), _) => {
            let c = RunConfig::load(p)?;
            (c.model, c.schema)
        }
        (None, Some(p)) => {
            let m = load_model(p)?;
            println!("features {}", m.num_features());
            println!("active pairs {}/{}", m.active_pairs().len(), m.num_pairs());
            println!("seeds {:?}", m.seeds);
            (m.config, m.schema)
        }
        (None, None) => unreachable!("clap requires one of --config or --model"),
    };
    let c = parameter_count(&config, &schema);
    let rows = [
        ("continuous embeddings", c.continuous_embeddings),
        ("categorical embeddings", c.categorical_embeddings),
        ("interaction tokens", c.interaction_tokens),
        ("first layer", c.first_layer),
        ("second layer", c.second_layer),
        ("output layer", c.output_layer),
        ("output weights", c.output_weights),
    ];
    let mut out = io::stdout().lock();
    for (name, n) in rows {
        writeln!(out, "{name:<24}{n:>8}")?;
    }
    writeln!(out, "total {}", c.total)?;
    Ok(())
}
