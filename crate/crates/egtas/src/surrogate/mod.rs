//! Performance predictors over 6-gene encodings: decision tree, random
//! forest, and Gaussian process, plus k-fold model selection and rank
//! quality metrics.

mod gp;
mod tree;

pub use gp::{GpConfig, GpModel};
pub use tree::{Tree, TreeConfig};

use crate::search_space::{ArchitectureEncoding, OperationTable, ENCODING_DIM};
use crate::trainer::FitnessRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("archive too small: {found} points, need at least {need}")]
    ArchiveTooSmall { found: usize, need: usize },
    #[error("archive needs at least 2 distinct encodings")]
    DegenerateArchive,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("unknown surrogate kind `{0}`")]
    UnknownKind(String),
    #[error("unsupported model file version {0}")]
    BadVersion(u32),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// One-hot feature width: sum of the gene bounds.
pub const FEATURE_DIM: usize = 33;

/// One-hot expansion of the 6 genes; offsets are prefix sums of the
/// gene bounds.
pub fn featurize(enc: &ArchitectureEncoding) -> Vec<f64> {
    let bounds = OperationTable::default().bounds();
    let mut out = vec![0.0; bounds.iter().sum()];
    let mut offset = 0;
    for i in 0..ENCODING_DIM {
        out[offset + enc.genes[i]] = 1.0;
        offset += bounds[i];
    }
    out
}

/// The (encoding, observed value) pairs a surrogate is fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingArchive {
    pub pairs: Vec<(ArchitectureEncoding, f64)>,
    pub metric_name: String,
    pub minimize: bool,
}

impl TrainingArchive {
    pub fn from_records(records: &[FitnessRecord]) -> TrainingArchive {
        TrainingArchive {
            pairs: records.iter().map(|r| (r.encoding, r.value)).collect(),
            metric_name: records.first().map_or_else(String::new, |r| r.metric_name.clone()),
            minimize: records.first().is_some_and(|r| r.minimize),
        }
    }

    pub fn features_and_targets(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let x = self.pairs.iter().map(|(e, _)| featurize(e)).collect();
        let y = self.pairs.iter().map(|(_, v)| *v).collect();
        (x, y)
    }

    fn check_fittable(&self) -> Result<(), SurrogateError> {
        if self.pairs.len() < 2 {
            return Err(SurrogateError::ArchiveTooSmall { found: self.pairs.len(), need: 2 });
        }
        let first = self.pairs[0].0;
        if self.pairs.iter().all(|(e, _)| *e == first) {
            return Err(SurrogateError::DegenerateArchive);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    DecisionTree,
    GaussianProcess,
    RandomForest,
}

/// Alphabetical by name; this is also the CV tie-break order.
pub const ALL_KINDS: [SurrogateKind; 3] =
    [SurrogateKind::DecisionTree, SurrogateKind::GaussianProcess, SurrogateKind::RandomForest];

impl SurrogateKind {
    pub fn name(&self) -> &'static str {
        match self {
            SurrogateKind::DecisionTree => "decision_tree",
            SurrogateKind::GaussianProcess => "gaussian_process",
            SurrogateKind::RandomForest => "random_forest",
        }
    }

    pub fn parse(name: &str) -> Result<SurrogateKind, SurrogateError> {
        ALL_KINDS
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| SurrogateError::UnknownKind(name.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SurrogateModel {
    DecisionTree(Tree),
    RandomForest(Vec<Tree>),
    GaussianProcess(GpModel),
}

pub const RF_TREES: usize = 100;

impl SurrogateModel {
    pub fn kind(&self) -> SurrogateKind {
        match self {
            SurrogateModel::DecisionTree(_) => SurrogateKind::DecisionTree,
            SurrogateModel::RandomForest(_) => SurrogateKind::RandomForest,
            SurrogateModel::GaussianProcess(_) => SurrogateKind::GaussianProcess,
        }
    }

    pub fn predict(&self, enc: &ArchitectureEncoding) -> f64 {
        self.predict_features(&featurize(enc))
    }

    pub fn predict_features(&self, x: &[f64]) -> f64 {
        match self {
            SurrogateModel::DecisionTree(t) => t.predict(x),
            SurrogateModel::RandomForest(ts) => {
                ts.iter().map(|t| t.predict(x)).sum::<f64>() / ts.len() as f64
            }
            SurrogateModel::GaussianProcess(g) => g.predict(x),
        }
    }
}

/// Fit one surrogate kind at its default configuration.
pub fn fit(
    kind: SurrogateKind,
    archive: &TrainingArchive,
    rng: &mut ChaCha8Rng,
) -> Result<SurrogateModel, SurrogateError> {
    archive.check_fittable()?;
    let (x, y) = archive.features_and_targets();
    Ok(match kind {
        SurrogateKind::DecisionTree => {
            SurrogateModel::DecisionTree(Tree::fit(&x, &y, &TreeConfig::cart_default(), rng))
        }
        SurrogateKind::RandomForest => {
            let cfg = TreeConfig::forest_default(FEATURE_DIM);
            let n = x.len();
            let trees = (0..RF_TREES)
                .map(|_| {
                    let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                    let bx: Vec<Vec<f64>> = idx.iter().map(|&i| x[i].clone()).collect();
                    let by: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
                    Tree::fit(&bx, &by, &cfg, rng)
                })
                .collect();
            SurrogateModel::RandomForest(trees)
        }
        SurrogateKind::GaussianProcess => {
            SurrogateModel::GaussianProcess(GpModel::fit(&x, &y, &GpConfig::default()))
        }
    })
}

/// Per-kind CV quality plus the winner and its pooled out-of-fold stats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    /// (kind name, mean CV MSE, MSE standard deviation over folds)
    pub cv_mse: Vec<(String, f64, f64)>,
    pub selected: String,
    pub folds: usize,
    /// Out-of-fold predictions of the selected kind vs observed values.
    pub holdout_ktau: f64,
    pub holdout_mse: f64,
}

fn fold_assignments(n: usize, folds: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut fold = vec![0usize; n];
    for (pos, &idx) in order.iter().enumerate() {
        fold[idx] = pos % folds;
    }
    fold
}

/// k-fold CV over the three kinds, minimum mean MSE wins (ties broken by
/// kind-name order), winner refit on the full archive.
pub fn select_best(
    archive: &TrainingArchive,
    folds: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(SurrogateModel, SurrogateReport), SurrogateError> {
    if folds < 2 {
        return Err(SurrogateError::TooFewFolds(folds));
    }
    archive.check_fittable()?;
    let n = archive.pairs.len();
    if n < folds {
        return Err(SurrogateError::ArchiveTooSmall { found: n, need: folds });
    }
    let assignment = fold_assignments(n, folds, rng);

    let mut cv_mse = Vec::new();
    let mut oof: Vec<Vec<f64>> = Vec::new();
    for kind in ALL_KINDS {
        let mut fold_mse = Vec::new();
        let mut preds = vec![0.0; n];
        for f in 0..folds {
            let train = TrainingArchive {
                pairs: archive
                    .pairs
                    .iter()
                    .zip(&assignment)
                    .filter(|(_, &a)| a != f)
                    .map(|(p, _)| *p)
                    .collect(),
                metric_name: archive.metric_name.clone(),
                minimize: archive.minimize,
            };
            let mut fit_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let model = fit(kind, &train, &mut fit_rng)?;
            let mut se = 0.0;
            let mut count = 0usize;
            for (i, (enc, truth)) in archive.pairs.iter().enumerate() {
                if assignment[i] == f {
                    let p = model.predict(enc);
                    preds[i] = p;
                    se += (p - truth) * (p - truth);
                    count += 1;
                }
            }
            fold_mse.push(se / count as f64);
        }
        let mean = fold_mse.iter().sum::<f64>() / folds as f64;
        let var =
            fold_mse.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / folds as f64;
        cv_mse.push((kind.name().to_string(), mean, var.sqrt()));
        oof.push(preds);
    }

    // minimum mean MSE; Vec order is already the alphabetical tie-break
    let best = cv_mse
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let selected = ALL_KINDS[best];

    let truths: Vec<f64> = archive.pairs.iter().map(|(_, v)| *v).collect();
    let holdout_ktau = ktau(&oof[best], &truths)?;
    let holdout_mse = oof[best]
        .iter()
        .zip(&truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n as f64;

    let mut refit_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let model = fit(selected, archive, &mut refit_rng)?;
    let report = SurrogateReport {
        cv_mse,
        selected: selected.name().to_string(),
        folds,
        holdout_ktau,
        holdout_mse,
    };
    Ok((model, report))
}

/// Kendall rank correlation, tie-adjusted (tau-b).
pub fn ktau(pred: &[f64], truth: &[f64]) -> Result<f64, SurrogateError> {
    if pred.len() != truth.len() {
        return Err(SurrogateError::LengthMismatch(pred.len(), truth.len()));
    }
    let n = pred.len();
    if n < 2 {
        return Err(SurrogateError::ArchiveTooSmall { found: n, need: 2 });
    }
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut ties_pred = 0i64;
    let mut ties_truth = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dp = pred[i] - pred[j];
            let dt = truth[i] - truth[j];
            if dp == 0.0 && dt == 0.0 {
                ties_pred += 1;
                ties_truth += 1;
            } else if dp == 0.0 {
                ties_pred += 1;
            } else if dt == 0.0 {
                ties_truth += 1;
            } else if dp * dt > 0.0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as f64;
    let denom = ((n0 - ties_pred as f64) * (n0 - ties_truth as f64)).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((concordant - discordant) as f64 / denom)
}

/// On-disk container with a format version.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedSurrogate {
    pub version: u32,
    pub metric_name: String,
    pub minimize: bool,
    pub model: SurrogateModel,
    pub report: Option<SurrogateReport>,
}

pub const SURROGATE_FILE_VERSION: u32 = 1;

pub fn save_surrogate(saved: &SavedSurrogate, path: &Path) -> Result<(), SurrogateError> {
    std::fs::write(path, serde_json::to_string_pretty(saved)?)?;
    Ok(())
}

pub fn load_surrogate(path: &Path) -> Result<SavedSurrogate, SurrogateError> {
    let saved: SavedSurrogate = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if saved.version != SURROGATE_FILE_VERSION {
        return Err(SurrogateError::BadVersion(saved.version));
    }
    Ok(saved)
}
