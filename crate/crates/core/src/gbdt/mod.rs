//! Histogram-based gradient-boosted trees with a softmax multiclass
//! objective and leaf-wise growth. One forest is trained per target
//! (diagnosis, density); base scores are log class priors and each round
//! adds K learning-rate-scaled trees.

mod bins;
mod objective;
mod tree;

pub use bins::{build_bins, BinMapper, BinnedMatrix};
pub use objective::{multiclass_log_loss, softmax_objective, softmax_rows};
pub use tree::{best_split, grow_tree, node_histogram, HistogramBin, Node, SplitCandidate, Tree};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GbdtError {
    #[error("invalid gbdt config: {0}")]
    Config(String),
    #[error("non-finite feature value at row {row}, column {col}")]
    Data { row: usize, col: usize },
    #[error("class index {value} out of range for {classes} classes")]
    ClassIndex { value: usize, classes: usize },
    #[error("training labels contain {0} distinct class(es); need at least 2")]
    SingleClass(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("model format version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt model document: {0}")]
    Corrupt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("model serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// Row-major dense matrix of training features.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, GbdtError> {
        let n_rows = rows.len();
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n_rows * cols);
        for row in &rows {
            if row.len() != cols {
                return Err(GbdtError::Dimension(format!(
                    "ragged matrix: row has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(DenseMatrix { rows: n_rows, cols, data })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtConfig {
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub max_leaves: usize,
    pub min_samples_leaf: usize,
    /// L2 regularizer on leaf values.
    pub lambda: f64,
    /// Flat penalty subtracted from every split gain.
    pub gamma: f64,
    pub max_bins: usize,
    /// Rounds without validation-loss improvement before stopping; applies
    /// only when a validation set is supplied.
    pub early_stop_rounds: Option<usize>,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig {
            n_rounds: 100,
            learning_rate: 0.1,
            max_leaves: 31,
            min_samples_leaf: 5,
            lambda: 1.0,
            gamma: 0.0,
            max_bins: 255,
            early_stop_rounds: Some(10),
            seed: 0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<(), GbdtError> {
        if self.n_rounds == 0 {
            return Err(GbdtError::Config("n_rounds must be >= 1".into()));
        }
        if self.max_leaves < 2 {
            return Err(GbdtError::Config(format!("max_leaves {} below 2", self.max_leaves)));
        }
        if !(2..=255).contains(&self.max_bins) {
            return Err(GbdtError::Config(format!("max_bins {} outside [2, 255]", self.max_bins)));
        }
        if self.learning_rate <= 0.0 {
            return Err(GbdtError::Config("learning_rate must be positive".into()));
        }
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(GbdtError::Config("lambda and gamma must be non-negative".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(GbdtError::Config("min_samples_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

/// A trained boosted forest: per round, one tree per class, plus the bin
/// mapper and log-prior base scores. Prediction is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub n_classes: usize,
    pub n_features: usize,
    pub base_score: Vec<f64>,
    pub rounds: Vec<Vec<Tree>>,
    pub bins: BinMapper,
    pub config: GbdtConfig,
}

/// Per-round losses recorded during training.
#[derive(Debug, Clone, PartialEq)]
pub struct GbdtTrainReport {
    /// Training log-loss of the base scores, before any round.
    pub initial_loss: f64,
    /// Training log-loss after each kept-or-discarded round.
    pub train_loss: Vec<f64>,
    /// Validation log-loss after each round, when a validation set was given.
    pub val_loss: Vec<f64>,
    /// Rounds kept in the returned forest.
    pub best_rounds: usize,
}

fn class_priors(y: &[usize], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for &label in y {
        counts[label] += 1;
    }
    let total = y.len() as f64;
    counts
        .iter()
        .map(|&c| ((c as f64 / total).max(1e-12)).ln())
        .collect()
}

/// Train one multiclass forest. Base scores are log class priors; each
/// round computes (g, h) from the current scores, grows K trees, and adds
/// their leaf values. With a validation set, training stops after
/// `early_stop_rounds` rounds without validation log-loss improvement and
/// the forest is truncated to the best round count.
pub fn train(
    x: &DenseMatrix,
    y: &[usize],
    n_classes: usize,
    cfg: &GbdtConfig,
    validation: Option<(&DenseMatrix, &[usize])>,
) -> Result<(Forest, GbdtTrainReport), GbdtError> {
    cfg.validate()?;
    if x.rows != y.len() {
        return Err(GbdtError::Dimension(format!(
            "{} rows vs {} labels",
            x.rows,
            y.len()
        )));
    }
    if x.rows == 0 {
        return Err(GbdtError::Config("empty training set".into()));
    }
    let mut seen = vec![false; n_classes];
    for &label in y {
        if label >= n_classes {
            return Err(GbdtError::ClassIndex { value: label, classes: n_classes });
        }
        seen[label] = true;
    }
    let distinct = seen.iter().filter(|&&s| s).count();
    if distinct < 2 {
        return Err(GbdtError::SingleClass(distinct));
    }

    let bins = build_bins(x, cfg.max_bins)?;
    let binned = bins.bin_matrix(x)?;
    let bins_per_feature: Vec<usize> = (0..x.cols).map(|f| bins.n_bins(f)).collect();
    let val = match validation {
        Some((vx, vy)) => {
            if vx.cols != x.cols {
                return Err(GbdtError::Dimension(format!(
                    "validation has {} features, training has {}",
                    vx.cols, x.cols
                )));
            }
            for &label in vy {
                if label >= n_classes {
                    return Err(GbdtError::ClassIndex { value: label, classes: n_classes });
                }
            }
            Some((bins.bin_matrix(vx)?, vy))
        }
        None => None,
    };

    let base_score = class_priors(y, n_classes);
    let mut scores: Vec<f64> = Vec::with_capacity(x.rows * n_classes);
    for _ in 0..x.rows {
        scores.extend_from_slice(&base_score);
    }
    let mut val_scores: Vec<f64> = match &val {
        Some((vb, _)) => {
            let mut s = Vec::with_capacity(vb.rows * n_classes);
            for _ in 0..vb.rows {
                s.extend_from_slice(&base_score);
            }
            s
        }
        None => Vec::new(),
    };

    let initial_loss = multiclass_log_loss(&scores, y, n_classes);
    let samples: Vec<usize> = (0..x.rows).collect();
    let mut rounds: Vec<Vec<Tree>> = Vec::new();
    let mut train_loss = Vec::new();
    let mut val_loss = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_rounds = 0usize;

    for round in 1..=cfg.n_rounds {
        let (g, h) = softmax_objective(&scores, y, n_classes)?;
        let mut round_trees = Vec::with_capacity(n_classes);
        for class in 0..n_classes {
            let grad: Vec<f64> = (0..x.rows).map(|i| g[i * n_classes + class]).collect();
            let hess: Vec<f64> = (0..x.rows).map(|i| h[i * n_classes + class]).collect();
            let tree = grow_tree(&binned, &grad, &hess, &samples, &bins_per_feature, cfg);
            for i in 0..x.rows {
                scores[i * n_classes + class] += tree.predict_binned(binned.row(i));
            }
            if let Some((vb, _)) = &val {
                for i in 0..vb.rows {
                    val_scores[i * n_classes + class] += tree.predict_binned(vb.row(i));
                }
            }
            round_trees.push(tree);
        }
        rounds.push(round_trees);
        train_loss.push(multiclass_log_loss(&scores, y, n_classes));

        if let Some((_, vy)) = &val {
            let loss = multiclass_log_loss(&val_scores, vy, n_classes);
            val_loss.push(loss);
            if loss < best_val {
                best_val = loss;
                best_rounds = round;
            }
            if let Some(patience) = cfg.early_stop_rounds {
                if round - best_rounds >= patience {
                    break;
                }
            }
        } else {
            best_rounds = round;
        }
    }
    rounds.truncate(best_rounds);

    Ok((
        Forest {
            n_classes,
            n_features: x.cols,
            base_score,
            rounds,
            bins,
            config: cfg.clone(),
        },
        GbdtTrainReport { initial_loss, train_loss, val_loss, best_rounds },
    ))
}

/// Raw additive scores for one input row: base score plus every kept
/// tree's leaf value.
pub fn predict_scores(forest: &Forest, features: &[f64]) -> Result<Vec<f64>, GbdtError> {
    if features.len() != forest.n_features {
        return Err(GbdtError::Dimension(format!(
            "input has {} features, forest expects {}",
            features.len(),
            forest.n_features
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(GbdtError::Dimension("non-finite input feature".into()));
    }
    let binned: Vec<u8> = features
        .iter()
        .enumerate()
        .map(|(f, &v)| forest.bins.bin(f, v) as u8)
        .collect();
    let mut scores = forest.base_score.clone();
    for round in &forest.rounds {
        for (class, tree) in round.iter().enumerate() {
            scores[class] += tree.predict_binned(&binned);
        }
    }
    Ok(scores)
}

/// Class probabilities: softmax of the additive scores.
pub fn predict_proba(forest: &Forest, features: &[f64]) -> Result<Vec<f64>, GbdtError> {
    let scores = predict_scores(forest, features)?;
    Ok(softmax_rows(&scores, forest.n_classes))
}

/// Argmax class prediction.
pub fn predict_class(forest: &Forest, features: &[f64]) -> Result<usize, GbdtError> {
    let probs = predict_proba(forest, features)?;
    let mut best = 0;
    for (class, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = class;
        }
    }
    Ok(best)
}

pub const FOREST_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ForestDocument {
    format_version: u32,
    forest: Forest,
}

/// Persist a forest as a JSON document with a format-version field.
/// Loading reproduces predictions bit-identically (floats round-trip via
/// shortest-representation encoding).
pub fn save_forest(forest: &Forest, path: impl AsRef<Path>) -> Result<(), GbdtError> {
    let doc = ForestDocument { format_version: FOREST_FORMAT_VERSION, forest: forest.clone() };
    let json = serde_json::to_string_pretty(&doc)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_forest(path: impl AsRef<Path>) -> Result<Forest, GbdtError> {
    let text = std::fs::read_to_string(path)?;
    let doc: ForestDocument =
        serde_json::from_str(&text).map_err(|e| GbdtError::Corrupt(e.to_string()))?;
    if doc.format_version != FOREST_FORMAT_VERSION {
        return Err(GbdtError::Version {
            found: doc.format_version,
            expected: FOREST_FORMAT_VERSION,
        });
    }
    Ok(doc.forest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Three well-separated Gaussian-ish blobs in two features.
    fn separable_fixture(rng: &mut ChaCha8Rng, m: usize) -> (DenseMatrix, Vec<usize>) {
        let mut rows = Vec::with_capacity(m);
        let mut labels = Vec::with_capacity(m);
        for i in 0..m {
            let class = i % 3;
            let cx = class as f64 * 2.0;
            let cy = -(class as f64) * 1.5;
            rows.push(vec![cx + rng.gen_range(-0.3..0.3), cy + rng.gen_range(-0.3..0.3)]);
            labels.push(class);
        }
        (DenseMatrix::from_rows(rows).unwrap(), labels)
    }

    fn accuracy(forest: &Forest, x: &DenseMatrix, y: &[usize]) -> f64 {
        let mut correct = 0;
        for i in 0..x.rows {
            if predict_class(forest, x.row(i)).unwrap() == y[i] {
                correct += 1;
            }
        }
        correct as f64 / x.rows as f64
    }

    #[test]
    fn separable_three_class_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let (x, y) = separable_fixture(&mut rng, 300);
        let cfg = GbdtConfig { n_rounds: 50, early_stop_rounds: None, ..Default::default() };
        let (forest, report) = train(&x, &y, 3, &cfg, None).unwrap();
        assert!(accuracy(&forest, &x, &y) >= 0.99);
        // Per-round training log-loss never increases.
        let mut prev = report.initial_loss;
        for &loss in &report.train_loss {
            assert!(loss <= prev + 1e-12, "loss rose from {prev} to {loss}");
            prev = loss;
        }
    }

    #[test]
    fn noise_feature_does_not_hurt_training_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let (x, y) = separable_fixture(&mut rng, 300);
        let cfg = GbdtConfig { n_rounds: 30, early_stop_rounds: None, ..Default::default() };
        let (base_forest, _) = train(&x, &y, 3, &cfg, None).unwrap();
        let base_acc = accuracy(&base_forest, &x, &y);

        let noisy_rows: Vec<Vec<f64>> = (0..x.rows)
            .map(|i| {
                let mut row = x.row(i).to_vec();
                row.push(rng.gen_range(-1.0..1.0));
                row
            })
            .collect();
        let noisy = DenseMatrix::from_rows(noisy_rows).unwrap();
        let (noisy_forest, _) = train(&noisy, &y, 3, &cfg, None).unwrap();
        let noisy_acc = accuracy(&noisy_forest, &noisy, &y);
        assert!(noisy_acc >= base_acc - 0.01, "{noisy_acc} vs {base_acc}");
    }

    #[test]
    fn empty_rounds_forest_predicts_priors() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let (x, y) = separable_fixture(&mut rng, 30);
        let cfg = GbdtConfig::default();
        let bins = build_bins(&x, cfg.max_bins).unwrap();
        let forest = Forest {
            n_classes: 3,
            n_features: 2,
            base_score: class_priors(&y, 3),
            rounds: vec![],
            bins,
            config: cfg,
        };
        let probs = predict_proba(&forest, x.row(0)).unwrap();
        // 30 samples cycling through 3 classes: priors are exactly 1/3.
        for &p in &probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_round_and_zero_rounds_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let (x, y) = separable_fixture(&mut rng, 60);
        let bad = GbdtConfig { n_rounds: 0, ..Default::default() };
        assert!(matches!(train(&x, &y, 3, &bad, None), Err(GbdtError::Config(_))));
        let cfg = GbdtConfig { n_rounds: 1, early_stop_rounds: None, ..Default::default() };
        let (forest, _) = train(&x, &y, 3, &cfg, None).unwrap();
        assert_eq!(forest.rounds.len(), 1);
        assert_eq!(forest.rounds[0].len(), 3);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let (x, y) = separable_fixture(&mut rng, 90);
        let cfg = GbdtConfig { n_rounds: 10, early_stop_rounds: None, ..Default::default() };
        let (forest, _) = train(&x, &y, 3, &cfg, None).unwrap();
        for _ in 0..1000 {
            let input = [rng.gen_range(-3.0..5.0), rng.gen_range(-4.0..2.0)];
            let probs = predict_proba(&forest, &input).unwrap();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_leaf_trees_sum_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let (x, y) = separable_fixture(&mut rng, 30);
        let cfg = GbdtConfig::default();
        let bins = build_bins(&x, cfg.max_bins).unwrap();
        // Two rounds of single-leaf trees with hand-picked values.
        let leaf = |v: f64| Tree { nodes: vec![Node::Leaf { value: v }] };
        let forest = Forest {
            n_classes: 3,
            n_features: 2,
            base_score: class_priors(&y, 3),
            rounds: vec![
                vec![leaf(0.1), leaf(-0.2), leaf(0.3)],
                vec![leaf(0.05), leaf(0.0), leaf(-0.15)],
            ],
            bins,
            config: cfg,
        };
        let scores = predict_scores(&forest, x.row(0)).unwrap();
        let prior = class_priors(&y, 3);
        assert!((scores[0] - (prior[0] + 0.15)).abs() < 1e-15);
        assert!((scores[1] - (prior[1] - 0.2)).abs() < 1e-15);
        assert!((scores[2] - (prior[2] + 0.15)).abs() < 1e-15);
    }

    #[test]
    fn deterministic_same_config_same_forest() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let (x, y) = separable_fixture(&mut rng, 120);
        let cfg = GbdtConfig { n_rounds: 8, early_stop_rounds: None, ..Default::default() };
        let (a, _) = train(&x, &y, 3, &cfg, None).unwrap();
        let (b, _) = train(&x, &y, 3, &cfg, None).unwrap();
        assert_eq!(a, b);
        let json_a = serde_json::to_string(&a).unwrap();
        let json_b = serde_json::to_string(&b).unwrap();
        assert_eq!(json_a, json_b);
    }

    #[test]
    fn two_targets_trained_independently() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let (x, y_diag) = separable_fixture(&mut rng, 90);
        let y_dens: Vec<usize> = (0..90).map(|i| (i / 45) % 2).collect();
        let cfg = GbdtConfig { n_rounds: 5, early_stop_rounds: None, ..Default::default() };
        let (diag_first, _) = train(&x, &y_diag, 3, &cfg, None).unwrap();
        // Interleave an unrelated density training run; the diagnosis
        // forest must come out bitwise identical.
        let (_dens, _) = train(&x, &y_dens, 2, &cfg, None).unwrap();
        let (diag_second, _) = train(&x, &y_diag, 3, &cfg, None).unwrap();
        assert_eq!(
            serde_json::to_string(&diag_first).unwrap(),
            serde_json::to_string(&diag_second).unwrap()
        );
    }

    #[test]
    fn early_stopping_truncates_to_best_round() {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let (x, y) = separable_fixture(&mut rng, 150);
        let (vx, vy) = separable_fixture(&mut rng, 60);
        let cfg = GbdtConfig {
            n_rounds: 100,
            early_stop_rounds: Some(5),
            ..Default::default()
        };
        let (forest, report) = train(&x, &y, 3, &cfg, Some((&vx, &vy))).unwrap();
        assert_eq!(forest.rounds.len(), report.best_rounds);
        assert!(report.best_rounds <= report.val_loss.len());
        // The best round attains the minimum validation loss.
        let min = report.val_loss.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(report.val_loss[report.best_rounds - 1], min);
    }

    #[test]
    fn save_load_bit_identical_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        let (x, y) = separable_fixture(&mut rng, 90);
        let cfg = GbdtConfig { n_rounds: 6, early_stop_rounds: None, ..Default::default() };
        let (forest, _) = train(&x, &y, 3, &cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forest.json");
        save_forest(&forest, &path).unwrap();
        let loaded = load_forest(&path).unwrap();
        assert_eq!(loaded, forest);
        for i in 0..x.rows {
            let a = predict_scores(&forest, x.row(i)).unwrap();
            let b = predict_scores(&loaded, x.row(i)).unwrap();
            let bits = |v: &[f64]| -> Vec<u64> { v.iter().map(|s| s.to_bits()).collect() };
            assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(113);
        let (x, y) = separable_fixture(&mut rng, 30);
        let cfg = GbdtConfig { n_rounds: 1, early_stop_rounds: None, ..Default::default() };
        let (forest, _) = train(&x, &y, 3, &cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forest.json");
        save_forest(&forest, &path).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 2");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            load_forest(&path),
            Err(GbdtError::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn refuses_single_class_and_bad_labels() {
        let x = DenseMatrix::from_rows(vec![vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let cfg = GbdtConfig::default();
        assert!(matches!(
            train(&x, &[1, 1, 1], 3, &cfg, None),
            Err(GbdtError::SingleClass(1))
        ));
        assert!(matches!(
            train(&x, &[0, 1, 3], 3, &cfg, None),
            Err(GbdtError::ClassIndex { value: 3, classes: 3 })
        ));
    }
}
