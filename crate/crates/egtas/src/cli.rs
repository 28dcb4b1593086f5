//! Operator-facing command surface: dataset generation, sampling,
//! surrogate fitting, search, reporting, plus the run manifest and the
//! newline-delimited-JSON external-evaluator protocol.

use crate::datasets::{
    generate_graph_set, generate_sbm, load_graph_json, load_graph_set, save_graph_json,
    save_graph_set, DatasetError, GraphSetConfig, SbmConfig,
};
use crate::evo_search::{retrain_best, run_search, SearchConfig, SurrogateScorer};
use crate::gt_model::{DropoutRates, EncodingConfig, ModelScale};
use crate::search_space::{decode, sample_uniform, ArchitectureEncoding, OperationTable};
use crate::surrogate::{
    ktau, load_surrogate, save_surrogate, select_best, SavedSurrogate, SurrogateError,
    SURROGATE_FILE_VERSION, TrainingArchive,
};
use crate::trainer::{
    fitness, Dataset, FitnessConfig, FitnessRecord, Metric, TrainConfig, TrainerError,
};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_EVAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("evaluation error: {0}")]
    Eval(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Eval(_) => EXIT_EVAL,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SurrogateError> for CliError {
    fn from(e: SurrogateError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        CliError::Eval(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn now_epoch_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Everything needed to bit-reproduce a run, minus wall times.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub created_epoch_secs: u64,
    pub operation_table: OperationTable,
    pub config: serde_json::Value,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, seed: u64, config: serde_json::Value, artifacts: Vec<String>) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            created_epoch_secs: now_epoch_secs(),
            operation_table: OperationTable::default(),
            config,
            artifacts,
        }
    }

    fn write_next_to(&self, artifact: &Path) -> Result<(), CliError> {
        let path = artifact.with_extension("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self).unwrap())
            .map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
    }
}

/// One evaluation job sent to a worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorRequest {
    pub id: u64,
    pub encoding: [usize; 6],
    pub budget: EvaluatorBudget,
    pub dataset_path: String,
    pub task: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorBudget {
    pub max_steps: usize,
    pub seed: u64,
}

/// One worker answer; unknown extra fields are ignored on parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorResponse {
    pub id: u64,
    pub value: f64,
    pub metric_name: String,
    pub minimize: bool,
    pub diverged: bool,
    pub wall_time: f64,
}

/// Stream requests to a worker subprocess and reassemble responses by
/// id. Timeouts and worker death mark the unanswered requests diverged.
pub fn external_evaluate(
    worker_command: &[String],
    requests: &[EvaluatorRequest],
    metric: Metric,
) -> Result<Vec<EvaluatorResponse>, CliError> {
    if worker_command.is_empty() {
        return Err(CliError::Usage("empty evaluator command".into()));
    }
    let mut child: Child = Command::new(&worker_command[0])
        .args(&worker_command[1..])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| CliError::Eval(format!("spawning worker: {e}")))?;

    let mut stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");

    let request_lines: Vec<String> =
        requests.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    let writer = std::thread::spawn(move || {
        for line in request_lines {
            if writeln!(stdin, "{line}").is_err() {
                break;
            }
        }
        // dropping stdin closes the stream so line-at-a-time workers stop
    });

    let (tx, rx) = mpsc::channel::<Result<EvaluatorResponse, String>>();
    let reader = std::thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<EvaluatorResponse>(&line)
                .map_err(|_| line.clone());
            if tx.send(parsed).is_err() {
                break;
            }
        }
    });

    let mut by_id: std::collections::HashMap<u64, EvaluatorResponse> =
        std::collections::HashMap::new();
    let mut completed_times: Vec<f64> = Vec::new();
    let mut protocol_error: Option<String> = None;
    let mut last_answer = Instant::now();
    while by_id.len() < requests.len() {
        // default 10x the median completed request, floored at 60 s
        let timeout = if completed_times.is_empty() {
            Duration::from_secs(60)
        } else {
            let mut t = completed_times.clone();
            t.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = t[t.len() / 2];
            Duration::from_secs_f64((10.0 * median).max(60.0))
        };
        match rx.recv_timeout(timeout) {
            Ok(Ok(resp)) => {
                // measure our own wall clock; workers may under-report
                completed_times.push(resp.wall_time.max(last_answer.elapsed().as_secs_f64()));
                last_answer = Instant::now();
                by_id.insert(resp.id, resp);
            }
            Ok(Err(bad_line)) => {
                protocol_error = Some(bad_line);
                break;
            }
            Err(_) => break, // timeout or worker gone: rest is diverged
        }
    }
    let _ = child.kill();
    let _ = child.wait();
    let _ = writer.join();
    let _ = reader.join();

    if let Some(line) = protocol_error {
        return Err(CliError::Eval(format!("malformed worker response line: {line}")));
    }

    Ok(requests
        .iter()
        .map(|req| {
            by_id.get(&req.id).cloned().unwrap_or(EvaluatorResponse {
                id: req.id,
                value: metric.worst(),
                metric_name: metric.name().to_string(),
                minimize: metric.minimize(),
                diverged: true,
                wall_time: 0.0,
            })
        })
        .collect())
}

#[derive(Debug, Parser)]
#[command(name = "egtas", version, about = "Evolutionary graph-Transformer architecture search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CommandKind,
}

#[derive(Debug, Subcommand)]
pub enum CommandKind {
    /// Generate a synthetic dataset file.
    GenDataset(GenDatasetArgs),
    /// Sample architectures and record their real fitness.
    Sample(SampleArgs),
    /// Cross-validate the surrogate menu and save the winner.
    FitSurrogate(FitSurrogateArgs),
    /// Run the surrogate-scored genetic search and retrain the winner.
    Search(SearchArgs),
    /// Summarize a finished run.
    Report(ReportArgs),
    /// Serve evaluation requests on stdin (the subprocess protocol).
    Worker(WorkerArgs),
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    /// sbm (node classification) or graphs (graph classification)
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file overriding the generator config
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// nc or gc
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value = "acc")]
    pub metric: String,
    #[arg(long, default_value_t = 30)]
    pub num_samples: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 300)]
    pub max_steps: usize,
    /// concurrent in-process evaluations
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// external worker command; in-process evaluation when absent
    #[arg(long)]
    pub evaluator_cmd: Option<String>,
    /// force a model scale regardless of the sampled gene
    #[arg(long, default_value = "Desk")]
    pub scale: String,
}

#[derive(Debug, Args)]
pub struct FitSurrogateArgs {
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_model: PathBuf,
    #[arg(long)]
    pub out_report: PathBuf,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub surrogate: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// nc or gc
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub population: usize,
    #[arg(long, default_value_t = 30)]
    pub generations: usize,
    #[arg(long, default_value_t = 0.7)]
    pub crossover_prob: f64,
    #[arg(long)]
    pub mutation_prob: Option<f64>,
    #[arg(long, default_value_t = 600)]
    pub retrain_steps: usize,
    #[arg(long, default_value = "Desk")]
    pub scale: String,
    #[arg(long)]
    pub out_history: PathBuf,
    #[arg(long)]
    pub out_result: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub history: PathBuf,
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WorkerArgs {
    /// answer with the analytic value sum(genes)/30 instead of training
    #[arg(long, default_value_t = false)]
    pub echo: bool,
    #[arg(long, default_value = "acc")]
    pub metric: String,
    /// echo mode only: exit silently after this many answers
    #[arg(long)]
    pub die_after: Option<usize>,
}

fn parse_metric(name: &str) -> Result<Metric, CliError> {
    Metric::parse(name).ok_or_else(|| CliError::Usage(format!("unknown metric `{name}`")))
}

fn parse_scale(name: &str) -> Result<ModelScale, CliError> {
    ModelScale::preset(name).ok_or_else(|| CliError::Usage(format!("unknown scale `{name}`")))
}

fn load_dataset(path: &Path, task: &str) -> Result<Dataset, CliError> {
    match task {
        "nc" => Ok(Dataset::Node(load_graph_json(path)?)),
        "gc" => Ok(Dataset::Graphs(load_graph_set(path)?)),
        other => Err(CliError::Usage(format!("unknown task `{other}` (want nc or gc)"))),
    }
}

fn read_archive_records(path: &Path) -> Result<Vec<FitnessRecord>, CliError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Data(format!("bad archive line: {e}: {l}")))
        })
        .collect()
}

pub fn cmd_gen_dataset(args: &GenDatasetArgs) -> Result<(), CliError> {
    match args.kind.as_str() {
        "sbm" => {
            let mut cfg: SbmConfig = match &args.config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
                    .map_err(|e| CliError::Data(format!("bad config: {e}")))?,
                None => SbmConfig::default(),
            };
            cfg.seed = args.seed;
            let g = generate_sbm(&cfg)?;
            save_graph_json(&g, &args.out)?;
            RunManifest::new(
                "gen-dataset",
                args.seed,
                serde_json::to_value(&cfg).unwrap(),
                vec![args.out.display().to_string()],
            )
            .write_next_to(&args.out)?;
        }
        "graphs" => {
            let mut cfg: GraphSetConfig = match &args.config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
                    .map_err(|e| CliError::Data(format!("bad config: {e}")))?,
                None => GraphSetConfig::default(),
            };
            cfg.seed = args.seed;
            let graphs = generate_graph_set(&cfg)?;
            save_graph_set(&graphs, &args.out)?;
            RunManifest::new(
                "gen-dataset",
                args.seed,
                serde_json::to_value(&cfg).unwrap(),
                vec![args.out.display().to_string()],
            )
            .write_next_to(&args.out)?;
        }
        other => return Err(CliError::Usage(format!("unknown dataset kind `{other}`"))),
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn sample_fitness_config(args: &SampleArgs, metric: Metric, id: u64) -> Result<FitnessConfig, CliError> {
    Ok(FitnessConfig {
        train: TrainConfig {
            max_steps: args.max_steps,
            warmup_steps: (args.max_steps / 10).max(1),
            learning_rate: 0.02,
            weight_decay: 1e-5,
            batch_size: 8,
            dropout: DropoutRates { attention: 0.1, ffn: 0.1, gnn: 0.1 },
            seed: args.seed.wrapping_add(id),
        },
        metric,
        scale_override: Some(parse_scale(&args.scale)?),
        encoding_config: EncodingConfig::default(),
        seed: args.seed.wrapping_add(id),
    })
}

pub fn cmd_sample(args: &SampleArgs) -> Result<(), CliError> {
    let metric = parse_metric(&args.metric)?;
    let dataset = load_dataset(&args.dataset, &args.task)?;
    let table = OperationTable::default();

    // the full id -> encoding sequence is fixed by the seed, so a resumed
    // run evaluates exactly the ids the first run did not finish
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let planned: Vec<ArchitectureEncoding> =
        (0..args.num_samples).map(|_| sample_uniform(&table, &mut rng)).collect();

    let existing = read_archive_records(&args.out)?;
    if existing.len() > args.num_samples {
        return Err(CliError::Data(format!(
            "archive already has {} lines, more than num_samples {}",
            existing.len(),
            args.num_samples
        )));
    }
    for (i, rec) in existing.iter().enumerate() {
        if rec.encoding != planned[i] {
            return Err(CliError::Data(format!(
                "archive line {i} does not match the planned sequence for seed {}",
                args.seed
            )));
        }
    }
    let todo: Vec<u64> = (existing.len() as u64..args.num_samples as u64).collect();

    let new_records: Vec<FitnessRecord> = if let Some(cmd) = &args.evaluator_cmd {
        let worker: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
        let requests: Vec<EvaluatorRequest> = todo
            .iter()
            .map(|&id| EvaluatorRequest {
                id,
                encoding: planned[id as usize].genes,
                budget: EvaluatorBudget {
                    max_steps: args.max_steps,
                    seed: args.seed.wrapping_add(id),
                },
                dataset_path: args.dataset.display().to_string(),
                task: args.task.clone(),
            })
            .collect();
        let responses = external_evaluate(&worker, &requests, metric)?;
        requests
            .iter()
            .zip(responses)
            .map(|(req, resp)| FitnessRecord {
                encoding: ArchitectureEncoding { genes: req.encoding },
                metric_name: resp.metric_name,
                value: resp.value,
                minimize: resp.minimize,
                wall_time: resp.wall_time,
                seed: req.budget.seed,
                diverged: resp.diverged,
            })
            .collect()
    } else {
        let workers = args.workers.max(1);
        let mut results: Vec<(u64, FitnessRecord)> = Vec::with_capacity(todo.len());
        std::thread::scope(|scope| -> Result<(), CliError> {
            let mut handles = Vec::new();
            for chunk in todo.chunks(todo.len().div_ceil(workers).max(1)) {
                let dataset = &dataset;
                let table = &table;
                let planned = &planned;
                handles.push(scope.spawn(move || -> Result<Vec<(u64, FitnessRecord)>, CliError> {
                    let mut out = Vec::new();
                    for &id in chunk {
                        let cfg = sample_fitness_config(args, metric, id)?;
                        let rec = fitness(&planned[id as usize], table, dataset, &cfg)?;
                        out.push((id, rec));
                    }
                    Ok(out)
                }));
            }
            for h in handles {
                results.extend(h.join().expect("sampler thread panicked")?);
            }
            Ok(())
        })?;
        results.sort_by_key(|(id, _)| *id);
        results.into_iter().map(|(_, r)| r).collect()
    };

    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(&args.out)?;
    for rec in &new_records {
        writeln!(file, "{}", serde_json::to_string(rec).unwrap())?;
    }
    RunManifest::new(
        "sample",
        args.seed,
        serde_json::json!({
            "dataset": args.dataset.display().to_string(),
            "task": args.task,
            "metric": metric.name(),
            "num_samples": args.num_samples,
            "max_steps": args.max_steps,
            "scale": args.scale,
        }),
        vec![args.out.display().to_string()],
    )
    .write_next_to(&args.out)?;
    println!("archive {} now has {} records ({} new)",
        args.out.display(), existing.len() + new_records.len(), new_records.len());
    Ok(())
}

pub fn cmd_fit_surrogate(args: &FitSurrogateArgs) -> Result<(), CliError> {
    let records = read_archive_records(&args.archive)?;
    if records.is_empty() {
        return Err(CliError::Data(format!("empty archive {}", args.archive.display())));
    }
    let archive = TrainingArchive::from_records(&records);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (model, report) = select_best(&archive, args.folds, &mut rng)?;
    save_surrogate(
        &SavedSurrogate {
            version: SURROGATE_FILE_VERSION,
            metric_name: archive.metric_name.clone(),
            minimize: archive.minimize,
            model,
            report: Some(report.clone()),
        },
        &args.out_model,
    )?;
    std::fs::write(&args.out_report, serde_json::to_string_pretty(&report).unwrap())?;
    RunManifest::new(
        "fit-surrogate",
        args.seed,
        serde_json::json!({
            "archive": args.archive.display().to_string(),
            "folds": args.folds,
        }),
        vec![args.out_model.display().to_string(), args.out_report.display().to_string()],
    )
    .write_next_to(&args.out_model)?;
    println!("selected {} (holdout ktau {:.3})", report.selected, report.holdout_ktau);
    Ok(())
}

/// The final result document of a search run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResult {
    pub encoding: ArchitectureEncoding,
    pub spec: crate::search_space::ArchitectureSpec,
    pub predicted: f64,
    pub retrained: FitnessRecord,
}

pub fn cmd_search(args: &SearchArgs) -> Result<(), CliError> {
    let saved = load_surrogate(&args.surrogate)?;
    let metric = parse_metric(&saved.metric_name)
        .map_err(|_| CliError::Data(format!("surrogate file has unknown metric `{}`", saved.metric_name)))?;
    let dataset = load_dataset(&args.dataset, &args.task)?;
    let table = OperationTable::default();

    let cfg = SearchConfig {
        population_size: args.population,
        generations: args.generations,
        crossover_prob: args.crossover_prob,
        mutation_prob: args.mutation_prob.unwrap_or(1.0 / 6.0),
        seed: args.seed,
        ..Default::default()
    };
    let scorer = SurrogateScorer { model: &saved.model, minimize: saved.minimize };
    let (best, state, history) =
        run_search(&cfg, &table, &scorer).map_err(|e| CliError::Usage(e.to_string()))?;

    let mut hist_file = std::fs::File::create(&args.out_history)?;
    // one line per generation; the pre-search population is not a generation
    for h in history.iter().skip(1) {
        writeln!(hist_file, "{}", serde_json::to_string(h).unwrap())?;
    }

    let retrain_cfg = FitnessConfig {
        train: TrainConfig {
            max_steps: args.retrain_steps,
            warmup_steps: (args.retrain_steps / 10).max(1),
            learning_rate: 0.02,
            weight_decay: 1e-5,
            batch_size: 8,
            dropout: DropoutRates { attention: 0.1, ffn: 0.1, gnn: 0.1 },
            seed: args.seed,
        },
        metric,
        scale_override: Some(parse_scale(&args.scale)?),
        encoding_config: EncodingConfig::default(),
        seed: args.seed,
    };
    let retrained = retrain_best(&best, &table, &dataset, &retrain_cfg)?;

    let spec = decode(&best, &table).map_err(|e| CliError::Data(e.to_string()))?;
    let result = SearchResult {
        encoding: best,
        spec: spec.clone(),
        predicted: state.best_of_population().predicted,
        retrained,
    };
    std::fs::write(&args.out_result, serde_json::to_string_pretty(&result).unwrap())?;
    RunManifest::new(
        "search",
        args.seed,
        serde_json::json!({
            "surrogate": args.surrogate.display().to_string(),
            "dataset": args.dataset.display().to_string(),
            "task": args.task,
            "search": cfg,
            "retrain_steps": args.retrain_steps,
            "scale": args.scale,
        }),
        vec![args.out_history.display().to_string(), args.out_result.display().to_string()],
    )
    .write_next_to(&args.out_result)?;
    println!(
        "best architecture: topology={} combination={} gnn={} pe={:?} am={:?} scale={}",
        spec.topology, spec.combination, spec.gnn_block, spec.pe_set, spec.am_set, spec.scale
    );
    println!(
        "predicted {} = {:.4}, retrained {} = {:.4}",
        metric.name(),
        result.predicted,
        result.retrained.metric_name,
        result.retrained.value
    );
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let history_text = std::fs::read_to_string(&args.history)?;
    let history: Vec<crate::evo_search::GenerationStats> = history_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| CliError::Data(format!("bad history line: {e}")))
        })
        .collect::<Result<_, _>>()?;
    let records = read_archive_records(&args.archive)?;

    let mut out = String::new();
    out.push_str("# convergence\n");
    if history.is_empty() {
        out.push_str("no generations\n");
    } else {
        out.push_str("generation,best_pred,mean_pred\n");
        for h in &history {
            out.push_str(&format!("{},{},{}\n", h.generation, h.best_pred, h.mean_pred));
        }
    }

    out.push_str("\n# surrogate holdout\n");
    let holdout_len = records.len() / 5;
    if holdout_len < 2 || records.len() - holdout_len < 5 {
        out.push_str("archive too small for a 20% holdout\n");
    } else {
        let split = records.len() - holdout_len;
        let train = TrainingArchive::from_records(&records[..split]);
        let holdout = &records[split..];
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let (model, report) = select_best(&train, 5.min(split), &mut rng)?;
        let preds: Vec<f64> = holdout.iter().map(|r| model.predict(&r.encoding)).collect();
        let truths: Vec<f64> = holdout.iter().map(|r| r.value).collect();
        let tau = ktau(&preds, &truths)?;
        let mse = preds.iter().zip(&truths).map(|(p, t)| (p - t) * (p - t)).sum::<f64>()
            / preds.len() as f64;
        out.push_str(&format!("selected,{}\n", report.selected));
        out.push_str(&format!("holdout_ktau,{tau}\n"));
        out.push_str(&format!("holdout_mse,{mse}\n"));
    }

    if let Some(last) = history.last() {
        let table = OperationTable::default();
        if let Ok(spec) = decode(&last.best_encoding, &table) {
            out.push_str("\n# best architecture\n");
            out.push_str(&format!("topology,{}\n", spec.topology));
            out.push_str(&format!("combination,{}\n", spec.combination));
            out.push_str(&format!("gnn_block,{}\n", spec.gnn_block));
            out.push_str(&format!("pe_set,{}\n", spec.pe_set.join("+")));
            out.push_str(&format!("am_set,{}\n", spec.am_set.join("+")));
            out.push_str(&format!("scale,{}\n", spec.scale));
        }
    }

    std::fs::write(&args.out, &out)?;
    print!("{out}");
    Ok(())
}

/// Serve requests from stdin: one request line in, one response line out.
pub fn cmd_worker(args: &WorkerArgs) -> Result<(), CliError> {
    let metric = parse_metric(&args.metric)?;
    let stdin = std::io::stdin();
    let mut answered = 0usize;
    let mut dataset_cache: Option<(String, String, Dataset)> = None;
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: EvaluatorRequest = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("bad request line: {e}")))?;
        if let Some(n) = args.die_after {
            if answered >= n {
                return Ok(()); // simulate a crashed worker
            }
        }
        let resp = if args.echo {
            EvaluatorResponse {
                id: req.id,
                value: req.encoding.iter().sum::<usize>() as f64 / 30.0,
                metric_name: metric.name().to_string(),
                minimize: metric.minimize(),
                diverged: false,
                wall_time: 1e-6,
            }
        } else {
            let needs_load = dataset_cache
                .as_ref()
                .map(|(p, t, _)| *p != req.dataset_path || *t != req.task)
                .unwrap_or(true);
            if needs_load {
                let ds = load_dataset(Path::new(&req.dataset_path), &req.task)?;
                dataset_cache = Some((req.dataset_path.clone(), req.task.clone(), ds));
            }
            let (_, _, dataset) = dataset_cache.as_ref().unwrap();
            let cfg = FitnessConfig {
                train: TrainConfig {
                    max_steps: req.budget.max_steps,
                    warmup_steps: (req.budget.max_steps / 10).max(1),
                    learning_rate: 0.02,
                    weight_decay: 1e-5,
                    batch_size: 8,
                    dropout: DropoutRates { attention: 0.1, ffn: 0.1, gnn: 0.1 },
                    seed: req.budget.seed,
                },
                metric,
                scale_override: Some(ModelScale::preset("Desk").unwrap()),
                encoding_config: EncodingConfig::default(),
                seed: req.budget.seed,
            };
            let enc = ArchitectureEncoding { genes: req.encoding };
            let rec = fitness(&enc, &OperationTable::default(), dataset, &cfg)?;
            EvaluatorResponse {
                id: req.id,
                value: rec.value,
                metric_name: rec.metric_name,
                minimize: rec.minimize,
                diverged: rec.diverged,
                wall_time: rec.wall_time,
            }
        };
        println!("{}", serde_json::to_string(&resp).unwrap());
        answered += 1;
    }
    Ok(())
}

/// Dispatch; returns a process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        CommandKind::GenDataset(a) => cmd_gen_dataset(a),
        CommandKind::Sample(a) => cmd_sample(a),
        CommandKind::FitSurrogate(a) => cmd_fit_surrogate(a),
        CommandKind::Search(a) => cmd_search(a),
        CommandKind::Report(a) => cmd_report(a),
        CommandKind::Worker(a) => cmd_worker(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
