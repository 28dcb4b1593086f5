//! Lower-level optimization: Adam with linear warm-up and decoupled
//! weight decay, validation metrics, and the fitness evaluation used by
//! both surrogate sampling and final retraining.

use crate::graph_core::GraphInstance;
use crate::gt_model::{
    build_model, forward_output, loss_and_gradients_with, precompute, DropoutRates,
    EncodingConfig, GraphPrecomp, GraphTransformerModel, ModelError, ModelScale, ParameterSet,
    Targets,
};
use crate::search_space::{decode, ArchitectureEncoding, OperationTable, SearchSpaceError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("dataset is missing {0}")]
    MissingData(&'static str),
    #[error("metric {metric} is not defined for this task")]
    MetricTaskMismatch { metric: &'static str },
    #[error("auc requires binary labels")]
    AucNeedsBinary,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encoding(#[from] SearchSpaceError),
}

/// Evaluation data: one node-classification graph or a set of
/// graph-classification instances.
#[derive(Debug, Clone)]
pub enum Dataset {
    Node(GraphInstance),
    Graphs(Vec<GraphInstance>),
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        match self {
            Dataset::Node(g) => g.features.cols,
            Dataset::Graphs(gs) => gs.first().map_or(0, |g| g.features.cols),
        }
    }

    /// Class count for NC, 1 for GC.
    pub fn output_dim(&self) -> Result<usize, TrainerError> {
        match self {
            Dataset::Node(g) => {
                let labels =
                    g.node_labels.as_ref().ok_or(TrainerError::MissingData("node labels"))?;
                Ok(labels.iter().max().map_or(0, |&m| m + 1))
            }
            Dataset::Graphs(_) => Ok(1),
        }
    }
}

/// 60/20/20 split over a graph set by index position.
pub fn graph_set_split(len: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..len {
        match i % 5 {
            0 | 1 | 2 => train.push(i),
            3 => val.push(i),
            _ => test.push(i),
        }
    }
    (train, val, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Acc,
    Auc,
    Mae,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Acc => "acc",
            Metric::Auc => "auc",
            Metric::Mae => "mae",
        }
    }

    pub fn minimize(&self) -> bool {
        matches!(self, Metric::Mae)
    }

    /// The sentinel stored for diverged runs: the worst possible value.
    pub fn worst(&self) -> f64 {
        if self.minimize() {
            1e30
        } else {
            0.0
        }
    }

    pub fn parse(name: &str) -> Option<Metric> {
        match name {
            "acc" => Some(Metric::Acc),
            "auc" => Some(Metric::Auc),
            "mae" => Some(Metric::Mae),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub warmup_steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub dropout: DropoutRates,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 10_000,
            warmup_steps: 4_000,
            learning_rate: 2e-4,
            weight_decay: 1e-5,
            batch_size: 8,
            dropout: DropoutRates { attention: 0.5, ffn: 0.1, gnn: 0.5 },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        if self.warmup_steps > self.max_steps {
            return Err(TrainerError::BadConfig(format!(
                "warmup_steps {} exceeds max_steps {}",
                self.warmup_steps, self.max_steps
            )));
        }
        for (name, r) in [
            ("attention", self.dropout.attention),
            ("ffn", self.dropout.ffn),
            ("gnn", self.dropout.gnn),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(TrainerError::BadConfig(format!(
                    "{name} dropout {r} outside [0, 1)"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(TrainerError::BadConfig("batch_size = 0".into()));
        }
        Ok(())
    }

    /// Piecewise-linear warm-up: lr·step/warmup up to the peak, then flat.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        }
    }
}

/// One validation result; the archive line format of the sampling phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessRecord {
    pub encoding: ArchitectureEncoding,
    pub metric_name: String,
    pub value: f64,
    pub minimize: bool,
    pub wall_time: f64,
    pub seed: u64,
    #[serde(default)]
    pub diverged: bool,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Adam {
    m: ParameterSet,
    v: ParameterSet,
    t: usize,
}

impl Adam {
    fn new(params: &ParameterSet) -> Adam {
        Adam { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet, lr: f64, wd: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..params.entries.len() {
            let g = &grads.entries[i].1.data;
            let m = &mut self.m.entries[i].1.data;
            let v = &mut self.v.entries[i].1.data;
            let p = &mut params.entries[i].1.data;
            for k in 0..p.len() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + wd * p[k]);
            }
        }
    }
}

fn step_dropout(cfg: &TrainConfig, step: usize) -> Option<(DropoutRates, u64)> {
    let d = cfg.dropout;
    if d.attention <= 0.0 && d.ffn <= 0.0 && d.gnn <= 0.0 {
        return None;
    }
    Some((d, cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Train in place; deterministic per (model, dataset, cfg).
pub fn train(
    model: &mut GraphTransformerModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(), TrainerError> {
    cfg.validate()?;
    match dataset {
        Dataset::Node(g) => {
            let labels =
                g.node_labels.clone().ok_or(TrainerError::MissingData("node labels"))?;
            let masks =
                g.split_masks.clone().ok_or(TrainerError::MissingData("split masks"))?;
            let precomp = precompute(g, model)?;
            let targets = Targets::Node { labels: &labels, mask: &masks.train };
            let mut adam = Adam::new(&model.params);
            for step in 1..=cfg.max_steps {
                let (_, grads) = loss_and_gradients_with(
                    model,
                    g,
                    &precomp,
                    &targets,
                    step_dropout(cfg, step),
                )
                .map_err(|e| match e {
                    ModelError::NonFinite => TrainerError::Diverged { step },
                    other => TrainerError::Model(other),
                })?;
                adam.step(&mut model.params, &grads, cfg.lr_at(step), cfg.weight_decay);
                if !model.params.all_finite() {
                    return Err(TrainerError::Diverged { step });
                }
            }
            Ok(())
        }
        Dataset::Graphs(graphs) => {
            if graphs.is_empty() {
                return Err(TrainerError::MissingData("graphs"));
            }
            if graphs.iter().any(|g| g.graph_label.is_none()) {
                return Err(TrainerError::MissingData("graph labels"));
            }
            let (train_idx, _, _) = graph_set_split(graphs.len());
            let precomps: Vec<GraphPrecomp> = graphs
                .iter()
                .map(|g| precompute(g, model))
                .collect::<Result<_, _>>()?;
            // fixed shuffled order per seed, cycled in batches
            let mut order = train_idx;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let mut adam = Adam::new(&model.params);
            let mut cursor = 0usize;
            for step in 1..=cfg.max_steps {
                let mut acc = model.params.zeros_like();
                let batch = cfg.batch_size.min(order.len());
                for b in 0..batch {
                    let gi = order[(cursor + b) % order.len()];
                    let g = &graphs[gi];
                    let targets = Targets::Graph { target: g.graph_label.unwrap() };
                    let (_, grads) = loss_and_gradients_with(
                        model,
                        g,
                        &precomps[gi],
                        &targets,
                        step_dropout(cfg, step).map(|(d, s)| (d, s ^ gi as u64)),
                    )
                    .map_err(|e| match e {
                        ModelError::NonFinite => TrainerError::Diverged { step },
                        other => TrainerError::Model(other),
                    })?;
                    for (a, (_, gm)) in acc.entries.iter_mut().zip(grads.entries.iter()) {
                        for (x, y) in a.1.data.iter_mut().zip(gm.data.iter()) {
                            *x += y / batch as f64;
                        }
                    }
                }
                cursor = (cursor + batch) % order.len();
                adam.step(&mut model.params, &acc, cfg.lr_at(step), cfg.weight_decay);
                if !model.params.all_finite() {
                    return Err(TrainerError::Diverged { step });
                }
            }
            Ok(())
        }
    }
}

/// Evaluation-mode training loss, for oracle checks.
pub fn training_loss(
    model: &GraphTransformerModel,
    dataset: &Dataset,
) -> Result<f64, TrainerError> {
    match dataset {
        Dataset::Node(g) => {
            let labels =
                g.node_labels.as_ref().ok_or(TrainerError::MissingData("node labels"))?;
            let masks =
                g.split_masks.as_ref().ok_or(TrainerError::MissingData("split masks"))?;
            let precomp = precompute(g, model)?;
            let targets = Targets::Node { labels, mask: &masks.train };
            let (loss, _) = loss_and_gradients_with(model, g, &precomp, &targets, None)?;
            Ok(loss)
        }
        Dataset::Graphs(graphs) => {
            let (train_idx, _, _) = graph_set_split(graphs.len());
            let mut total = 0.0;
            for &gi in &train_idx {
                let g = &graphs[gi];
                let precomp = precompute(g, model)?;
                let target =
                    g.graph_label.ok_or(TrainerError::MissingData("graph labels"))?;
                let (loss, _) =
                    loss_and_gradients_with(model, g, &precomp, &Targets::Graph { target }, None)?;
                total += loss;
            }
            Ok(total / train_idx.len() as f64)
        }
    }
}

/// Fraction of correct argmax predictions.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(predicted.len(), labels.len());
    if predicted.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / predicted.len() as f64
}

/// Rank-based AUC with half credit for score ties; labels must be 0/1.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, TrainerError> {
    assert_eq!(scores.len(), labels.len());
    if labels.iter().any(|&l| l > 1) {
        return Err(TrainerError::AucNeedsBinary);
    }
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(TrainerError::AucNeedsBinary);
    }
    let mut num = 0.0;
    for &p in &pos {
        for &n in &neg {
            num += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(num / (pos.len() * neg.len()) as f64)
}

fn node_eval(
    model: &GraphTransformerModel,
    g: &GraphInstance,
    metric: Metric,
) -> Result<f64, TrainerError> {
    let labels = g.node_labels.as_ref().ok_or(TrainerError::MissingData("node labels"))?;
    let masks = g.split_masks.as_ref().ok_or(TrainerError::MissingData("split masks"))?;
    let precomp = precompute(g, model)?;
    let logits = forward_output(model, g, &precomp)?;
    let sel: Vec<usize> = (0..g.n).filter(|&i| masks.val[i]).collect();
    match metric {
        Metric::Acc => {
            let predicted: Vec<usize> = sel
                .iter()
                .map(|&i| {
                    logits
                        .row(i)
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0
                })
                .collect();
            let truth: Vec<usize> = sel.iter().map(|&i| labels[i]).collect();
            Ok(accuracy(&predicted, &truth))
        }
        Metric::Auc => {
            if model.output_dim != 2 {
                return Err(TrainerError::AucNeedsBinary);
            }
            let scores: Vec<f64> =
                sel.iter().map(|&i| logits.get(i, 1) - logits.get(i, 0)).collect();
            let truth: Vec<u8> = sel.iter().map(|&i| labels[i] as u8).collect();
            auc(&scores, &truth)
        }
        Metric::Mae => Err(TrainerError::MetricTaskMismatch { metric: "mae" }),
    }
}

fn graph_eval(
    model: &GraphTransformerModel,
    graphs: &[GraphInstance],
    metric: Metric,
) -> Result<f64, TrainerError> {
    let (_, val_idx, _) = graph_set_split(graphs.len());
    if val_idx.is_empty() {
        return Err(TrainerError::MissingData("validation graphs"));
    }
    let mut scores = Vec::new();
    let mut targets = Vec::new();
    for &gi in &val_idx {
        let g = &graphs[gi];
        let precomp = precompute(g, model)?;
        let out = forward_output(model, g, &precomp)?;
        scores.push(out.data.iter().sum::<f64>() / out.data.len() as f64);
        targets.push(g.graph_label.ok_or(TrainerError::MissingData("graph labels"))?);
    }
    match metric {
        Metric::Acc => {
            let predicted: Vec<usize> =
                scores.iter().map(|&s| usize::from(s > 0.5)).collect();
            let truth: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
            Ok(accuracy(&predicted, &truth))
        }
        Metric::Auc => {
            if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
                return Err(TrainerError::AucNeedsBinary);
            }
            let labels: Vec<u8> = targets.iter().map(|&t| t as u8).collect();
            auc(&scores, &labels)
        }
        Metric::Mae => {
            let total: f64 =
                scores.iter().zip(&targets).map(|(s, t)| (s - t).abs()).sum();
            Ok(total / scores.len() as f64)
        }
    }
}

/// Validation metric of a trained model.
pub fn evaluate(
    model: &GraphTransformerModel,
    dataset: &Dataset,
    metric: Metric,
    seed: u64,
) -> Result<FitnessRecord, TrainerError> {
    let started = Instant::now();
    let value = match dataset {
        Dataset::Node(g) => node_eval(model, g, metric)?,
        Dataset::Graphs(gs) => graph_eval(model, gs, metric)?,
    };
    Ok(FitnessRecord {
        encoding: crate::search_space::encode(&model.spec, &OperationTable::default())
            .unwrap_or(ArchitectureEncoding { genes: [0; 6] }),
        metric_name: metric.name().to_string(),
        value,
        minimize: metric.minimize(),
        wall_time: started.elapsed().as_secs_f64(),
        seed,
        diverged: false,
    })
}

/// Everything fitness() needs besides the encoding and the dataset.
#[derive(Debug, Clone)]
pub struct FitnessConfig {
    pub train: TrainConfig,
    pub metric: Metric,
    pub scale_override: Option<ModelScale>,
    pub encoding_config: EncodingConfig,
    pub seed: u64,
}

impl FitnessConfig {
    pub fn desk(metric: Metric, seed: u64) -> FitnessConfig {
        FitnessConfig {
            train: TrainConfig {
                max_steps: 60,
                warmup_steps: 10,
                learning_rate: 0.02,
                weight_decay: 1e-5,
                batch_size: 8,
                dropout: DropoutRates { attention: 0.1, ffn: 0.1, gnn: 0.1 },
                seed,
            },
            metric,
            scale_override: Some(ModelScale::preset("Desk").unwrap()),
            encoding_config: EncodingConfig::default(),
            seed,
        }
    }
}

/// decode -> build -> train -> evaluate; divergence maps to the worst
/// fitness with a flag so the search keeps a total order.
pub fn fitness(
    encoding: &ArchitectureEncoding,
    table: &OperationTable,
    dataset: &Dataset,
    cfg: &FitnessConfig,
) -> Result<FitnessRecord, TrainerError> {
    let started = Instant::now();
    let spec = decode(encoding, table)?;
    let scale = match cfg.scale_override {
        Some(s) => s,
        None => ModelScale::preset(&spec.scale).ok_or_else(|| {
            TrainerError::BadConfig(format!("unknown scale preset {}", spec.scale))
        })?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = build_model(
        &spec,
        scale,
        cfg.encoding_config,
        dataset.input_dim(),
        dataset.output_dim()?,
        &mut rng,
    )?;
    let mut train_cfg = cfg.train;
    train_cfg.seed = cfg.seed;
    let diverged = match train(&mut model, dataset, &train_cfg) {
        Ok(()) => false,
        Err(TrainerError::Diverged { .. }) => true,
        Err(other) => return Err(other),
    };
    let value = if diverged {
        cfg.metric.worst()
    } else {
        match dataset {
            Dataset::Node(g) => node_eval(&model, g, cfg.metric)?,
            Dataset::Graphs(gs) => graph_eval(&model, gs, cfg.metric)?,
        }
    };
    Ok(FitnessRecord {
        encoding: *encoding,
        metric_name: cfg.metric.name().to_string(),
        value,
        minimize: cfg.metric.minimize(),
        wall_time: started.elapsed().as_secs_f64(),
        seed: cfg.seed,
        diverged,
    })
}
