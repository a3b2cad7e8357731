//! `ecapnet`: batch commands for dataset generation, ECAP computation,
//! training, prediction and evaluation.

mod config;

use std::fmt::Display;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::{ModelChoice, RunConfig};
use ecapnet::graph::{FeatureGraph, GraphBatch};
use ecapnet::hemo::{compute_indices, WssSeries, DEFAULT_FLOOR, DEFAULT_THRESHOLD};
use ecapnet::mesh::{load_mesh, MeshError, MeshFormat, VertexAttributes};
use ecapnet::model::{
    load_checkpoint, save_checkpoint, Checkpoint, EcapNet, FcnBaseline, FcnConfig, FeatureNorm, ModelError, PreparedBatch,
    Surrogate,
};
use ecapnet::spline::SplineKernelSpec;
use ecapnet::synth::{build_dataset, Dataset, SynthError};
use ecapnet::train::{evaluate, train, GraphSample, TrainError};

#[derive(Debug, Parser)]
#[command(name = "ecapnet", version, about = "ECAP surrogate on triangle meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (meshes, WSS series, ECAP fields, manifest).
    GenData {
        /// Run configuration (JSON, schema run-v1); its `dataset` section is used.
        #[arg(long)]
        config: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the dataset seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; output is identical for any value.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compute TAWSS, OSI and ECAP from a wss-v1 series.
    ComputeEcap {
        /// Input wall shear stress series (wss-v1).
        #[arg(long)]
        wss: PathBuf,
        /// Output CSV (vertex,tawss,osi,ecap).
        #[arg(long)]
        out: PathBuf,
        /// TAWSS floor in Pa below which OSI is set to 0.
        #[arg(long, default_value_t = DEFAULT_FLOOR)]
        floor: f64,
    },
    /// Train a model on the training split of a dataset.
    Train {
        /// Run configuration (JSON, schema run-v1); `model` and `train` sections are used.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint (ckpt-v1).
        #[arg(long)]
        out: PathBuf,
        /// Optional loss history CSV (epoch,loss).
        #[arg(long)]
        history: Option<PathBuf>,
        /// Overrides the training seed (also the initialization seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict per-vertex ECAP on a mesh.
    Predict {
        /// Checkpoint (ckpt-v1).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input mesh (.off or .ply).
        #[arg(long)]
        mesh: PathBuf,
        /// Output CSV (vertex,ecap).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Evaluate {
        /// Checkpoint (ckpt-v1).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for metrics.csv and summary.json.
        #[arg(long)]
        out: PathBuf,
        /// Which samples to score.
        #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
        split: SplitChoice,
        /// ECAP threshold (Pa⁻¹) for the confusion counts.
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SplitChoice {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum Category {
    Usage,
    Validation,
    Runtime,
}

impl Category {
    fn exit_code(self) -> u8 {
        match self {
            Self::Usage => 2,
            Self::Validation => 3,
            Self::Runtime => 4,
        }
    }
}

#[derive(Debug)]
struct CliError {
    category: Category,
    message: String,
}

fn validation(e: impl Display) -> CliError {
    CliError {
        category: Category::Validation,
        message: e.to_string(),
    }
}

fn runtime(e: impl Display) -> CliError {
    CliError {
        category: Category::Runtime,
        message: e.to_string(),
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io { .. } => runtime(e),
            _ => validation(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::Io(_) | TrainError::Csv(_) => runtime(e),
            _ => validation(e),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => runtime(e),
            _ => validation(e),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| validation(format!("cannot read {}: {e}", path.display())))
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("serializable summary"));
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = read_input(path)?;
    RunConfig::parse(&text).map_err(validation)
}

fn kernel_of(ckpt: &Checkpoint) -> SplineKernelSpec {
    match ckpt {
        Checkpoint::EcapNet { net, .. } => net.config.kernel,
        Checkpoint::Fcn { .. } => SplineKernelSpec::default(),
    }
}

fn graph_samples(dataset: &Dataset, indices: &[usize]) -> Result<Vec<GraphSample>> {
    indices
        .iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            GraphSample::from_mesh(&s.mesh, &s.ecap).map_err(|e| validation(format!("sample {i}: {e}")))
        })
        .collect()
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).map_err(|e| validation(format!("dataset {}: {e}", dir.display())))
}

fn cmd_gen_data(config: &Path, out: &Path, seed: Option<u64>, jobs: usize) -> Result<()> {
    let cfg = load_config(config)?;
    let mut spec = cfg.dataset;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if jobs == 0 {
        return Err(validation("--jobs must be at least 1"));
    }
    fs::create_dir_all(out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;
    let manifest = build_dataset(&spec, out, jobs)?;
    #[derive(Serialize)]
    struct Summary {
        n_samples: usize,
        n_train: usize,
        n_test: usize,
        content_hash: String,
    }
    print_json(&Summary {
        n_samples: manifest.samples.len(),
        n_train: manifest.split.train.len(),
        n_test: manifest.split.test.len(),
        content_hash: format!("{:016x}", manifest.content_hash()),
    });
    Ok(())
}

fn cmd_compute_ecap(wss: &Path, out: &Path, floor: f64) -> Result<()> {
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(validation("--floor must be positive"));
    }
    let bytes = read_input(wss)?;
    let series = WssSeries::read_from(BufReader::new(&bytes[..])).map_err(validation)?;
    let report = compute_indices(&series, floor);
    let mut csv = Vec::new();
    report.field.write_csv(&mut csv).map_err(runtime)?;
    write_output(out, &csv)?;
    #[derive(Serialize)]
    struct Summary {
        n_vertices: usize,
        n_floored: usize,
    }
    print_json(&Summary {
        n_vertices: report.field.len(),
        n_floored: report.n_floored,
    });
    Ok(())
}

fn cmd_train(config: &Path, data: &Path, out: &Path, history: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    let mut train_cfg = cfg.train;
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    train_cfg.validate()?;
    let dataset = load_dataset(data)?;
    let samples = graph_samples(&dataset, &dataset.manifest.split.train)?;
    let mut ckpt = match cfg.model {
        ModelChoice::Ecapnet { mut config, fit_input_norm } => {
            if fit_input_norm {
                config.input_norm = Some(FeatureNorm::fit(samples.iter().map(|s| &s.graph))?);
            }
            Checkpoint::EcapNet {
                net: EcapNet::new(config, train_cfg.seed)?,
                seed: train_cfg.seed,
            }
        }
        ModelChoice::Fcn { hidden } => {
            let n = samples.first().map_or(0, |s| s.graph.n_nodes);
            if samples.iter().any(|s| s.graph.n_nodes != n) {
                return Err(validation("the FCN baseline needs meshes with a shared vertex count"));
            }
            Checkpoint::Fcn {
                net: FcnBaseline::new(FcnConfig { n_vertices: n, hidden }, train_cfg.seed)?,
                seed: train_cfg.seed,
            }
        }
    };
    let kernel = kernel_of(&ckpt);
    let report = train(&mut ckpt, &samples, &kernel, &train_cfg)?;
    save_checkpoint(&ckpt, out).map_err(runtime)?;
    if let Some(path) = history {
        let mut csv = Vec::new();
        report.write_loss_csv(&mut csv)?;
        write_output(path, &csv)?;
    }
    #[derive(Serialize)]
    struct Summary {
        epochs: usize,
        n_samples: usize,
        batch_size: usize,
        final_loss: f64,
        n_parameters: usize,
    }
    print_json(&Summary {
        epochs: report.loss_history.len(),
        n_samples: samples.len(),
        batch_size: report.effective_batch_size,
        final_loss: *report.loss_history.last().expect("at least one epoch"),
        n_parameters: ckpt.store().count(),
    });
    Ok(())
}

fn cmd_predict(checkpoint: &Path, mesh: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint).map_err(|e| validation(format!("{}: {e}", checkpoint.display())))?;
    let format = MeshFormat::from_path(mesh)
        .ok_or_else(|| validation(format!("{}: unknown mesh extension (expected .off or .ply)", mesh.display())))?;
    let m = load_mesh(mesh, format).map_err(|e| match e {
        MeshError::Io(io) => validation(format!("cannot read {}: {io}", mesh.display())),
        other => validation(format!("{}: {other}", mesh.display())),
    })?;
    let attrs = VertexAttributes::compute(&m).map_err(validation)?;
    let graph = FeatureGraph::build(&m, &attrs).map_err(validation)?;
    let input = PreparedBatch::new(GraphBatch::single(&graph), &kernel_of(&ckpt))?;
    let pred = ckpt.predict(&input)?;
    let mut text = String::from("vertex,ecap\n");
    for (i, v) in pred.iter().enumerate() {
        text.push_str(&format!("{i},{v}\n"));
    }
    write_output(out, text.as_bytes())?;
    #[derive(Serialize)]
    struct Summary {
        n_vertices: usize,
    }
    print_json(&Summary { n_vertices: pred.len() });
    Ok(())
}

fn cmd_evaluate(checkpoint: &Path, data: &Path, out: &Path, split: SplitChoice, threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(validation("--threshold must be positive"));
    }
    let ckpt = load_checkpoint(checkpoint).map_err(|e| validation(format!("{}: {e}", checkpoint.display())))?;
    let dataset = load_dataset(data)?;
    let indices: Vec<usize> = match split {
        SplitChoice::Train => dataset.manifest.split.train.clone(),
        SplitChoice::Test => dataset.manifest.split.test.clone(),
        SplitChoice::All => (0..dataset.samples.len()).collect(),
    };
    let samples = graph_samples(&dataset, &indices)?;
    let report = evaluate(&ckpt, &samples, &indices, 0, &kernel_of(&ckpt), threshold)?;
    fs::create_dir_all(out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;
    write_output(&out.join("metrics.csv"), &report.metrics_csv())?;
    #[derive(Serialize)]
    struct Summary<'a> {
        schema: &'static str,
        split: SplitChoice,
        n_samples: usize,
        n_vertices: usize,
        #[serde(flatten)]
        report: &'a ecapnet::train::EvalReport,
    }
    let summary = Summary {
        schema: "eval-v1",
        split,
        n_samples: report.samples.len(),
        n_vertices: report.n_vertices(),
        report: &report,
    };
    let mut json = serde_json::to_vec_pretty(&summary).map_err(runtime)?;
    json.push(b'\n');
    write_output(&out.join("summary.json"), &json)?;
    print_json(&serde_json::json!({ "mae": report.mae, "tpr": report.tpr }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed, jobs } => cmd_gen_data(&config, &out, seed, jobs),
        Command::ComputeEcap { wss, out, floor } => cmd_compute_ecap(&wss, &out, floor),
        Command::Train {
            config,
            data,
            out,
            history,
            seed,
        } => cmd_train(&config, &data, &out, history.as_deref(), seed),
        Command::Predict { checkpoint, mesh, out } => cmd_predict(&checkpoint, &mesh, &out),
        Command::Evaluate {
            checkpoint,
            data,
            out,
            split,
            threshold,
        } => cmd_evaluate(&checkpoint, &data, &out, split, threshold),
    }
}

fn fail(err: CliError) -> ExitCode {
    eprintln!(
        "{}",
        serde_json::json!({ "error": err.category, "message": err.message })
    );
    ExitCode::from(err.category.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            return fail(CliError {
                category: Category::Usage,
                message: e.to_string().trim_end().to_string(),
            })
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
