//! Training loop, evaluation metrics, cross-validation and the transfer
//! experiment.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::geom;
use crate::graph::{FeatureGraph, GraphBatch, GraphError};
use crate::hemo::{EcapField, DEFAULT_THRESHOLD};
use crate::mesh::{MeshError, TriMesh, VertexAttributes};
use crate::model::{ForwardCtx, ModelError, PreparedBatch, Surrogate};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::spline::SplineKernelSpec;
use crate::synth::kfold;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "fold,sample,mae,tp,fp,tn,fn";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("{n} samples cannot fill {folds} folds")]
    TooFewSamples { n: usize, folds: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub folds: usize,
    /// Positive condition for the confusion counts: `ecap > threshold`.
    pub threshold: f64,
    pub lr_schedule: LrSchedule,
    /// Rotate every training graph by a fresh uniform random rotation each
    /// time it is batched.
    pub augment_rotations: bool,
}

/// Learning rate as a function of training progress.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` at the first step to 0 after the last.
    Cosine,
}

impl LrSchedule {
    /// Rate for optimizer step `step` of `total`.
    pub fn rate(self, lr: f64, step: usize, total: usize) -> f64 {
        match self {
            Self::Constant => lr,
            Self::Cosine => 0.5 * lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::synthetic_only()
    }
}

impl TrainConfig {
    /// Profile for synthetic-only training (weight decay 0.05).
    pub fn synthetic_only() -> Self {
        Self {
            epochs: 300,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.05,
            seed: 0,
            folds: 10,
            threshold: DEFAULT_THRESHOLD,
            lr_schedule: LrSchedule::Constant,
            augment_rotations: false,
        }
    }

    /// Profile for mixed real/synthetic training (no weight decay).
    pub fn mixed() -> Self {
        Self {
            weight_decay: 0.0,
            ..Self::synthetic_only()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 || self.folds == 0 {
            return bad("epochs, batch_size and folds must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative");
        }
        if !(self.threshold > 0.0) {
            return bad("threshold must be positive");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// A feature graph with its per-vertex ECAP targets.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    pub graph: FeatureGraph,
    pub target: Vec<f64>,
}

impl GraphSample {
    pub fn from_mesh(mesh: &TriMesh, ecap: &EcapField) -> Result<Self, TrainError> {
        let attrs = VertexAttributes::compute(mesh)?;
        let graph = FeatureGraph::build(mesh, &attrs)?;
        if ecap.len() != graph.n_nodes {
            return Err(GraphError::LengthMismatch {
                graph: 0,
                targets: ecap.len(),
                nodes: graph.n_nodes,
            }
            .into());
        }
        Ok(Self {
            graph,
            target: ecap.ecap.clone(),
        })
    }
}

fn prepare(samples: &[&GraphSample], kernel: &SplineKernelSpec) -> Result<PreparedBatch, TrainError> {
    let graphs: Vec<&FeatureGraph> = samples.iter().map(|s| &s.graph).collect();
    let targets: Vec<&[f64]> = samples.iter().map(|s| &s.target[..]).collect();
    Ok(PreparedBatch::new(GraphBatch::new(&graphs, &targets)?, kernel)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainReport {
    /// Vertex-weighted mean training L1 per epoch.
    pub loss_history: Vec<f64>,
    /// Batch size actually used (`min(batch_size, n_samples)`).
    pub effective_batch_size: usize,
}

impl TrainReport {
    /// CSV with header `epoch,loss`.
    pub fn write_loss_csv<W: Write>(&self, w: W) -> Result<(), TrainError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["epoch", "loss"])?;
        for (e, l) in self.loss_history.iter().enumerate() {
            wr.write_record([(e + 1).to_string(), l.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Trains in place. One seeded RNG drives the epoch shuffles and the dropout
/// masks, so equal seeds give bit-identical runs.
pub fn train<M: Surrogate + ?Sized>(
    model: &mut M,
    samples: &[GraphSample],
    kernel: &SplineKernelSpec,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let batch_size = cfg.batch_size.min(samples.len());
    let mut adam_cfg = cfg.adam();
    let total_steps = cfg.epochs * samples.len().div_ceil(batch_size);
    let mut step = 0;
    let mut adam = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut nodes) = (0.0, 0usize);
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let mut batch: Vec<&GraphSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let rotated: Vec<GraphSample>;
            if cfg.augment_rotations {
                rotated = batch
                    .iter()
                    .map(|s| {
                        Ok(GraphSample {
                            graph: s.graph.rotated(&geom::random_rotation(&mut rng))?,
                            target: s.target.clone(),
                        })
                    })
                    .collect::<Result<_, GraphError>>()?;
                batch = rotated.iter().collect();
            }
            let input = prepare(&batch, kernel)?;
            let mut tape = Tape::new();
            let params = tape.bind_params(model.store());
            let mut ctx = ForwardCtx::train(&mut rng);
            let y = model.forward(&mut tape, &params, &input, &mut ctx)?;
            let updates = std::mem::take(&mut ctx.bn_updates);
            let target = tape.constant(input.targets.clone());
            let loss = tape.l1_loss(y, target).map_err(ModelError::from)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            let grads = tape.backward(loss).map_err(ModelError::from)?;
            for (p, v) in model.store_mut().params_mut().iter_mut().zip(&params) {
                let g = grads.get_or_zeros(*v, p.tensor.numel());
                p.tensor.set_grad(g).map_err(ModelError::from)?;
            }
            adam_cfg.lr = cfg.lr_schedule.rate(cfg.lr, step, total_steps);
            step += 1;
            adam_step(model.store_mut().params_mut(), &mut adam, &adam_cfg);
            model.store_mut().zero_grads();
            model.apply_bn_updates(&updates);
            total += value * input.n_nodes() as f64;
            nodes += input.n_nodes();
        }
        history.push(total / nodes as f64);
    }
    Ok(TrainReport {
        loss_history: history,
        effective_batch_size: batch_size,
    })
}

/// Confusion counts of `pred > θ` against `truth > θ`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(pred: &[f64], truth: &[f64], threshold: f64) -> Self {
        let mut c = Self::default();
        for (p, t) in pred.iter().zip(truth) {
            match (*p > threshold, *t > threshold) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn add(&mut self, o: &Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `TP / (TP + FN)`, or `None` without positives.
    pub fn tpr(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMetrics {
    pub fold: usize,
    /// Index into the dataset.
    pub sample: usize,
    pub n_vertices: usize,
    pub mae: f64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
    /// Mean absolute error over all vertices of all samples.
    pub mae: f64,
    pub confusion: Confusion,
    pub tpr: Option<f64>,
    pub threshold: f64,
    pub weighting: String,
}

impl EvalReport {
    fn from_samples(samples: Vec<SampleMetrics>, threshold: f64) -> Result<Self, TrainError> {
        let n: usize = samples.iter().map(|s| s.n_vertices).sum();
        if n == 0 {
            return Err(TrainError::EmptyEvalSet);
        }
        let mae = samples.iter().map(|s| s.mae * s.n_vertices as f64).sum::<f64>() / n as f64;
        let mut confusion = Confusion::default();
        for s in &samples {
            confusion.add(&s.confusion);
        }
        Ok(Self {
            samples,
            mae,
            tpr: confusion.tpr(),
            confusion,
            threshold,
            weighting: "vertex".into(),
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.samples.iter().map(|s| s.n_vertices).sum()
    }

    /// Checks the report's internal consistency (e.g. after deserializing).
    pub fn validate(&self) -> Result<(), String> {
        let n = self.n_vertices();
        if self.samples.is_empty() || n == 0 {
            return Err("empty report".into());
        }
        if self.weighting != "vertex" {
            return Err(format!("unknown weighting `{}`", self.weighting));
        }
        let mut total = Confusion::default();
        for s in &self.samples {
            if s.confusion.total() != s.n_vertices {
                return Err(format!("sample {}: confusion counts do not cover its vertices", s.sample));
            }
            if !(s.mae >= 0.0 && s.mae.is_finite()) {
                return Err(format!("sample {}: invalid mae {}", s.sample, s.mae));
            }
            total.add(&s.confusion);
        }
        if total != self.confusion || self.tpr != total.tpr() {
            return Err("aggregate confusion disagrees with the samples".into());
        }
        let mae = self.samples.iter().map(|s| s.mae * s.n_vertices as f64).sum::<f64>() / n as f64;
        if (mae - self.mae).abs() > 1e-12 * mae.max(1.0) {
            return Err(format!("aggregate mae {} disagrees with the samples ({mae})", self.mae));
        }
        Ok(())
    }

    /// Concatenates reports (e.g. folds) with vertex-weighted aggregation.
    pub fn merge(reports: &[EvalReport]) -> Result<Self, TrainError> {
        let threshold = reports.first().ok_or(TrainError::EmptyEvalSet)?.threshold;
        Self::from_samples(reports.iter().flat_map(|r| r.samples.clone()).collect(), threshold)
    }

    /// CSV rows `fold,sample,mae,tp,fp,tn,fn`.
    pub fn write_metrics_csv<W: Write>(&self, w: W) -> Result<(), TrainError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(METRICS_HEADER.split(','))?;
        for s in &self.samples {
            let c = s.confusion;
            wr.write_record([
                s.fold.to_string(),
                s.sample.to_string(),
                s.mae.to_string(),
                c.tp.to_string(),
                c.fp.to_string(),
                c.tn.to_string(),
                c.fn_.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn metrics_csv(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_metrics_csv(&mut v).expect("writing to memory");
        v
    }
}

fn metrics(fold: usize, sample: usize, pred: &[f64], truth: &[f64], threshold: f64) -> SampleMetrics {
    let mae = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / truth.len().max(1) as f64;
    SampleMetrics {
        fold,
        sample,
        n_vertices: truth.len(),
        mae,
        confusion: Confusion::from_predictions(pred, truth, threshold),
    }
}

/// Eval-mode metrics over `samples`, labelled with `indices` and `fold`.
pub fn evaluate<M: Surrogate + ?Sized>(
    model: &M,
    samples: &[GraphSample],
    indices: &[usize],
    fold: usize,
    kernel: &SplineKernelSpec,
    threshold: f64,
) -> Result<EvalReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    let rows = samples
        .iter()
        .zip(indices)
        .map(|(s, &i)| {
            let pred = model.predict(&prepare(&[s], kernel)?)?;
            Ok(metrics(fold, i, &pred, &s.target, threshold))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    EvalReport::from_samples(rows, threshold)
}

/// Metrics of fixed per-vertex predictions (e.g. a baseline).
pub fn evaluate_predictions(
    predictions: &[Vec<f64>],
    samples: &[GraphSample],
    indices: &[usize],
    fold: usize,
    threshold: f64,
) -> Result<EvalReport, TrainError> {
    let rows = predictions
        .iter()
        .zip(samples)
        .zip(indices)
        .map(|((p, s), &i)| metrics(fold, i, p, &s.target, threshold))
        .collect();
    EvalReport::from_samples(rows, threshold)
}

/// Predicts the mean training target at every vertex.
pub fn constant_mean_baseline(
    train: &[GraphSample],
    test: &[GraphSample],
    indices: &[usize],
    fold: usize,
    threshold: f64,
) -> Result<EvalReport, TrainError> {
    let n: usize = train.iter().map(|s| s.target.len()).sum();
    if n == 0 {
        return Err(TrainError::EmptyTrainSet);
    }
    let mean = train.iter().flat_map(|s| &s.target).sum::<f64>() / n as f64;
    let preds: Vec<Vec<f64>> = test.iter().map(|s| vec![mean; s.target.len()]).collect();
    evaluate_predictions(&preds, test, indices, fold, threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvReport {
    pub folds: Vec<EvalReport>,
    pub baseline_folds: Vec<EvalReport>,
    pub aggregate: EvalReport,
    pub baseline: EvalReport,
    pub loss_histories: Vec<Vec<f64>>,
}

/// Seeded k-fold cross-validation. Fold membership depends only on
/// `cfg.seed` and `dataset_hash`; fold `k` trains a fresh model from
/// `make_model(k, training_samples)`. The constant-mean baseline is scored on the same folds.
pub fn cross_validate<M, F>(
    samples: &[GraphSample],
    dataset_hash: u64,
    kernel: &SplineKernelSpec,
    cfg: &TrainConfig,
    make_model: F,
) -> Result<CvReport, TrainError>
where
    M: Surrogate,
    F: Fn(usize, &[GraphSample]) -> Result<M, TrainError>,
{
    cfg.validate()?;
    if cfg.folds < 2 || samples.len() < cfg.folds {
        return Err(TrainError::TooFewSamples {
            n: samples.len(),
            folds: cfg.folds,
        });
    }
    let folds = kfold(samples.len(), cfg.folds, cfg.seed ^ dataset_hash);
    let mut reports = Vec::new();
    let mut baselines = Vec::new();
    let mut histories = Vec::new();
    for (k, test_idx) in folds.iter().enumerate() {
        let train_idx: Vec<usize> = (0..samples.len()).filter(|i| !test_idx.contains(i)).collect();
        let train_set: Vec<GraphSample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
        let test_set: Vec<GraphSample> = test_idx.iter().map(|&i| samples[i].clone()).collect();
        let mut model = make_model(k, &train_set)?;
        let fold_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(k as u64),
            ..cfg.clone()
        };
        let report = train(&mut model, &train_set, kernel, &fold_cfg)?;
        histories.push(report.loss_history);
        reports.push(evaluate(&model, &test_set, test_idx, k, kernel, cfg.threshold)?);
        baselines.push(constant_mean_baseline(&train_set, &test_set, test_idx, k, cfg.threshold)?);
    }
    Ok(CvReport {
        aggregate: EvalReport::merge(&reports)?,
        baseline: EvalReport::merge(&baselines)?,
        folds: reports,
        baseline_folds: baselines,
        loss_histories: histories,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferReport {
    pub in_distribution: EvalReport,
    pub out_of_distribution: EvalReport,
    /// Out-of-distribution MAE over in-distribution MAE.
    pub ratio: f64,
    pub loss_history: Vec<f64>,
}

impl TransferReport {
    pub fn validate(&self) -> Result<(), String> {
        self.in_distribution.validate().map_err(|e| format!("in-distribution: {e}"))?;
        self.out_of_distribution.validate().map_err(|e| format!("out-of-distribution: {e}"))?;
        let ratio = self.out_of_distribution.mae / self.in_distribution.mae.max(f64::MIN_POSITIVE);
        if !(self.ratio.is_finite() && (ratio - self.ratio).abs() <= 1e-12 * ratio.abs().max(1.0)) {
            return Err(format!("ratio {} disagrees with the reports ({ratio})", self.ratio));
        }
        if self.loss_history.is_empty() || self.loss_history.iter().any(|l| !l.is_finite()) {
            return Err("loss history empty or non-finite".into());
        }
        Ok(())
    }
}

/// Trains on `train_set`, then evaluates on held-out samples from the
/// training regime (`id_test`) and from a shifted regime (`ood_test`).
pub fn transfer_experiment<M: Surrogate>(
    model: &mut M,
    train_set: &[GraphSample],
    id_test: &[GraphSample],
    ood_test: &[GraphSample],
    kernel: &SplineKernelSpec,
    cfg: &TrainConfig,
) -> Result<TransferReport, TrainError> {
    let history = train(model, train_set, kernel, cfg)?.loss_history;
    let id_idx: Vec<usize> = (0..id_test.len()).collect();
    let ood_idx: Vec<usize> = (0..ood_test.len()).collect();
    let in_distribution = evaluate(model, id_test, &id_idx, 0, kernel, cfg.threshold)?;
    let out_of_distribution = evaluate(model, ood_test, &ood_idx, 1, kernel, cfg.threshold)?;
    let ratio = out_of_distribution.mae / in_distribution.mae.max(f64::MIN_POSITIVE);
    Ok(TransferReport {
        in_distribution,
        out_of_distribution,
        ratio,
        loss_history: history,
    })
}

/// Transfer report as CSV rows `fold,sample,...`: fold 0 is in-distribution,
/// fold 1 out-of-distribution.
pub fn transfer_metrics_csv(report: &TransferReport) -> Result<Vec<u8>, TrainError> {
    Ok(EvalReport {
        samples: [&report.in_distribution, &report.out_of_distribution]
            .iter()
            .flat_map(|r| r.samples.clone())
            .collect(),
        ..report.in_distribution.clone()
    }
    .metrics_csv())
}

/// Copies every parameter value of a model (for null-update checks).
pub fn snapshot<M: Surrogate + ?Sized>(model: &M) -> Vec<Tensor> {
    model.store().params().iter().map(|p| p.tensor.clone()).collect()
}
