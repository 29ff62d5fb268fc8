//! Design matrices, fold splitting, resampling and the logistic-regression
//! baseline.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timeseries::SampleTensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("no samples")]
    Empty,
    #[error("sample {index} has shape {found} but the first sample has {expected}")]
    MixedGrid {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("cannot split {n} samples into {k} folds (need 2 <= k <= n)")]
    FoldCount { n: usize, k: usize },
    #[error("only one class present among {n} samples")]
    SingleClass { n: usize },
    #[error("{rows} matrix rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("matrix has {found} columns, model expects {expected}")]
    Width { expected: usize, found: usize },
    #[error("non-finite value in design matrix at row {row}, column {col}")]
    NonFiniteInput { row: usize, col: usize },
    #[error("training diverged at epoch {epoch}: loss {loss}, max |w| {max_weight}")]
    NonFiniteLoss { epoch: usize, loss: f64, max_weight: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shaping {
    /// Time-major flatten of the whole grid.
    Concat,
    /// Mean of each dynamic feature over time.
    Aggregate,
}

impl Shaping {
    pub fn as_str(self) -> &'static str {
        match self {
            Shaping::Concat => "concat",
            Shaping::Aggregate => "aggregate",
        }
    }
}

impl std::str::FromStr for Shaping {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "concat" => Ok(Shaping::Concat),
            "aggregate" => Ok(Shaping::Aggregate),
            _ => Err(format!("unknown shaping {s:?} (expected concat or aggregate)")),
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub data: Vec<f64>,
}

impl DesignMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n_cols = rows.first().map_or(0, Vec::len);
        let n_rows = rows.len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        assert_eq!(data.len(), n_rows * n_cols, "ragged rows");
        DesignMatrix { n_rows, n_cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn gather(&self, rows: &[usize]) -> DesignMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.n_cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        DesignMatrix {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            data,
        }
    }

    fn check_finite(&self) -> Result<(), ModelError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(p) => Err(ModelError::NonFiniteInput {
                row: p / self.n_cols.max(1),
                col: p % self.n_cols.max(1),
            }),
            None => Ok(()),
        }
    }
}

fn shape_key(t: &SampleTensor) -> (usize, usize, usize, usize) {
    (t.n_bins, t.n_dynamic, t.static_features.len(), t.demographic.len())
}

/// Static and demographic columns follow the dynamic block.
pub fn shape(samples: &[SampleTensor], shaping: Shaping) -> Result<DesignMatrix, ModelError> {
    let first = samples.first().ok_or(ModelError::Empty)?;
    let key = shape_key(first);
    if let Some((index, t)) = samples.iter().enumerate().find(|(_, t)| shape_key(t) != key) {
        return Err(ModelError::MixedGrid {
            index,
            expected: format!("{key:?}"),
            found: format!("{:?}", shape_key(t)),
        });
    }
    let (n_bins, n_dyn, n_static, n_demo) = key;
    let dyn_width = match shaping {
        Shaping::Concat => n_bins * n_dyn,
        Shaping::Aggregate => n_dyn,
    };
    let n_cols = dyn_width + n_static + n_demo;
    let mut data = Vec::with_capacity(samples.len() * n_cols);
    for t in samples {
        match shaping {
            Shaping::Concat => data.extend_from_slice(&t.dynamic),
            Shaping::Aggregate => {
                for c in 0..n_dyn {
                    let sum: f64 = (0..n_bins).map(|b| t.dynamic[b * n_dyn + c]).sum();
                    data.push(if n_bins == 0 { 0.0 } else { sum / n_bins as f64 });
                }
            }
        }
        data.extend(t.static_features.iter().map(|&v| f64::from(v)));
        data.extend_from_slice(&t.demographic);
    }
    Ok(DesignMatrix {
        n_rows: samples.len(),
        n_cols,
        data,
    })
}

/// Shuffled partition of `0..n` into `k` folds whose sizes differ by at most
/// one. Each fold is returned sorted.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, ModelError> {
    if k < 2 || k > n {
        return Err(ModelError::FoldCount { n, k });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold = idx[at..at + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        at += size;
    }
    Ok(folds)
}

/// Appends minority-class indices drawn with replacement until both classes
/// are equally represented. `labels` is indexed by the values in `indices`.
pub fn oversample_minority(indices: &[usize], labels: &[u8], seed: u64) -> Result<Vec<usize>, ModelError> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = indices.iter().partition(|&&i| labels[i] == 1);
    if pos.is_empty() || neg.is_empty() {
        return Err(ModelError::SingleClass { n: indices.len() });
    }
    let (minority, deficit) = if pos.len() < neg.len() {
        (&pos, neg.len() - pos.len())
    } else {
        (&neg, pos.len() - neg.len())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = indices.to_vec();
    out.extend((0..deficit).map(|_| minority[rng.gen_range(0..minority.len())]));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        LogisticParams {
            learning_rate: 0.1,
            epochs: 300,
            l2: 1e-3,
            patience: 20,
            validation_fraction: 0.1,
        }
    }
}

/// Per-column z-score. Constant columns get unit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DesignMatrix) -> Self {
        let n = x.n_rows.max(1) as f64;
        let mut mean = vec![0.0; x.n_cols];
        for r in 0..x.n_rows {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; x.n_cols];
        for r in 0..x.n_rows {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn transform(&self, x: &DesignMatrix) -> DesignMatrix {
        let mut out = x.clone();
        for r in 0..x.n_rows {
            let row = &mut out.data[r * x.n_cols..(r + 1) * x.n_cols];
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn linear(row: &[f64], w: &[f64]) -> f64 {
    let (bias, coef) = w.split_last().expect("weights include bias");
    row.iter().zip(coef).map(|(a, b)| a * b).sum::<f64>() + bias
}

/// Mean binary cross-entropy plus `l2/2 · |w|²` (bias unpenalized) and its
/// gradient. `w` holds one weight per column followed by the bias.
pub fn loss_and_gradient(x: &DesignMatrix, y: &[u8], w: &[f64], l2: f64) -> (f64, Vec<f64>) {
    assert_eq!(w.len(), x.n_cols + 1);
    assert_eq!(y.len(), x.n_rows);
    let n = x.n_rows.max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; w.len()];
    for (r, &label) in y.iter().enumerate() {
        let row = x.row(r);
        let z = linear(row, w);
        let t = f64::from(label);
        loss += softplus(z) - t * z;
        let err = sigmoid(z) - t;
        for (g, v) in grad.iter_mut().zip(row) {
            *g += err * v;
        }
        grad[x.n_cols] += err;
    }
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    let coef = &w[..x.n_cols];
    loss += 0.5 * l2 * coef.iter().map(|c| c * c).sum::<f64>();
    for (g, c) in grad.iter_mut().zip(coef) {
        *g += l2 * c;
    }
    (loss, grad)
}

pub trait Predictor: Send + Sync {
    /// Probabilities strictly inside (0, 1).
    fn predict_proba(&self, x: &DesignMatrix) -> Result<Vec<f64>, ModelError>;
}

pub trait Classifier: Sync {
    type Fitted: Predictor;
    fn fit(&self, x: &DesignMatrix, y: &[u8], seed: u64) -> Result<Self::Fitted, ModelError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub standardizer: Standardizer,
    pub params: LogisticParams,
    pub epochs_run: usize,
}

impl LogisticModel {
    pub fn zeros(n_cols: usize) -> Self {
        LogisticModel {
            weights: vec![0.0; n_cols + 1],
            standardizer: Standardizer {
                mean: vec![0.0; n_cols],
                scale: vec![1.0; n_cols],
            },
            params: LogisticParams::default(),
            epochs_run: 0,
        }
    }
}

impl Predictor for LogisticModel {
    fn predict_proba(&self, x: &DesignMatrix) -> Result<Vec<f64>, ModelError> {
        if x.n_cols + 1 != self.weights.len() {
            return Err(ModelError::Width {
                expected: self.weights.len() - 1,
                found: x.n_cols,
            });
        }
        let xs = self.standardizer.transform(x);
        Ok((0..xs.n_rows)
            .map(|r| sigmoid(linear(xs.row(r), &self.weights)).clamp(f64::EPSILON, 1.0 - f64::EPSILON))
            .collect())
    }
}

impl Classifier for LogisticParams {
    type Fitted = LogisticModel;

    fn fit(&self, x: &DesignMatrix, y: &[u8], seed: u64) -> Result<LogisticModel, ModelError> {
        train_logistic(x, y, *self, seed)
    }
}

/// Full-batch gradient descent on standardized features. A shuffled
/// `validation_fraction` of rows is held out for early stopping when there are
/// enough rows to spare; the best-validation weights are kept.
pub fn train_logistic(
    x: &DesignMatrix,
    y: &[u8],
    params: LogisticParams,
    seed: u64,
) -> Result<LogisticModel, ModelError> {
    if x.n_rows != y.len() {
        return Err(ModelError::LengthMismatch {
            rows: x.n_rows,
            labels: y.len(),
        });
    }
    if x.n_rows == 0 {
        return Err(ModelError::Empty);
    }
    x.check_finite()?;

    let mut order: Vec<usize> = (0..x.n_rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (x.n_rows as f64 * params.validation_fraction).floor() as usize;
    let n_val = if n_val == 0 || n_val >= x.n_rows { 0 } else { n_val };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let mut val_idx = val_idx.to_vec();
    val_idx.sort_unstable();

    let train_raw = x.gather(&train_idx);
    let standardizer = Standardizer::fit(&train_raw);
    let xt = standardizer.transform(&train_raw);
    let yt: Vec<u8> = train_idx.iter().map(|&i| y[i]).collect();
    let xv = standardizer.transform(&x.gather(&val_idx));
    let yv: Vec<u8> = val_idx.iter().map(|&i| y[i]).collect();

    let mut w = vec![0.0; x.n_cols + 1];
    let mut best = (f64::INFINITY, w.clone(), 0usize);
    let mut stale = 0;
    let mut epochs_run = 0;
    for epoch in 0..params.epochs {
        let (loss, grad) = loss_and_gradient(&xt, &yt, &w, params.l2);
        if !loss.is_finite() {
            let max_weight = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            return Err(ModelError::NonFiniteLoss {
                epoch,
                loss,
                max_weight,
            });
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= params.learning_rate * g;
        }
        epochs_run = epoch + 1;
        if n_val > 0 {
            let (vloss, _) = loss_and_gradient(&xv, &yv, &w, 0.0);
            if vloss < best.0 {
                best = (vloss, w.clone(), epochs_run);
                stale = 0;
            } else {
                stale += 1;
                if stale >= params.patience.max(1) {
                    break;
                }
            }
        }
    }
    if n_val > 0 && best.0.is_finite() {
        w = best.1;
        epochs_run = best.2;
    }
    Ok(LogisticModel {
        weights: w,
        standardizer,
        params,
        epochs_run,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub folds: Vec<Vec<usize>>,
    /// Out-of-fold probability for every sample.
    pub scores: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Trains one model per fold in parallel and scores the held-out fold.
/// Oversampling touches only training indices.
pub fn cross_validate<C: Classifier>(
    clf: &C,
    x: &DesignMatrix,
    y: &[u8],
    k: usize,
    oversample: bool,
    seed: u64,
) -> Result<CrossValidation, ModelError> {
    if x.n_rows != y.len() {
        return Err(ModelError::LengthMismatch {
            rows: x.n_rows,
            labels: y.len(),
        });
    }
    let folds = kfold_split(x.n_rows, k, seed)?;
    type FoldResult = Result<(Vec<f64>, Option<String>), ModelError>;
    let results: Vec<FoldResult> = folds
        .par_iter()
        .enumerate()
        .map(|(f, test)| {
            let fold_seed = seed.wrapping_add(1 + f as u64);
            let mut in_test = vec![false; x.n_rows];
            test.iter().for_each(|&i| in_test[i] = true);
            let train: Vec<usize> = (0..x.n_rows).filter(|&i| !in_test[i]).collect();
            let mut warning = None;
            let train = if oversample {
                match oversample_minority(&train, y, fold_seed) {
                    Ok(t) => t,
                    Err(_) => {
                        warning = Some(format!("fold {f}: training data has one class, oversampling skipped"));
                        train
                    }
                }
            } else {
                train
            };
            let yt: Vec<u8> = train.iter().map(|&i| y[i]).collect();
            let model = clf.fit(&x.gather(&train), &yt, fold_seed)?;
            Ok((model.predict_proba(&x.gather(test))?, warning))
        })
        .collect();
    let mut scores = vec![0.0; x.n_rows];
    let mut warnings = Vec::new();
    for (test, r) in folds.iter().zip(results) {
        let (s, w) = r?;
        for (&i, v) in test.iter().zip(s) {
            scores[i] = v;
        }
        warnings.extend(w);
    }
    Ok(CrossValidation {
        folds,
        scores,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(n_bins: usize, n_dyn: usize, fill: f64) -> SampleTensor {
        SampleTensor {
            n_bins,
            n_dynamic: n_dyn,
            dynamic: vec![fill; n_bins * n_dyn],
            presence: vec![0; n_bins * n_dyn],
            static_features: vec![1; 4],
            demographic: vec![0.5; 4],
        }
    }

    #[test]
    fn shaping_widths() {
        let s: Vec<_> = (0..5).map(|i| tensor(24, 3, i as f64)).collect();
        let c = shape(&s, Shaping::Concat).unwrap();
        assert_eq!((c.n_rows, c.n_cols), (5, 80));
        let a = shape(&s, Shaping::Aggregate).unwrap();
        assert_eq!((a.n_rows, a.n_cols), (5, 11));
        assert_eq!(&a.row(3)[..3], &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn mixed_grids_rejected() {
        let s = vec![tensor(24, 3, 0.0), tensor(12, 3, 0.0)];
        assert!(matches!(
            shape(&s, Shaping::Concat),
            Err(ModelError::MixedGrid { index: 1, .. })
        ));
    }

    #[test]
    fn fold_sizes() {
        let f = kfold_split(100, 5, 1).unwrap();
        assert!(f.iter().all(|x| x.len() == 20));
        let mut all: Vec<usize> = f.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());

        let mut sizes: Vec<usize> = kfold_split(7, 3, 1).unwrap().iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 3]);

        assert_eq!(kfold_split(50, 4, 9).unwrap(), kfold_split(50, 4, 9).unwrap());
        assert_eq!(kfold_split(2, 3, 0), Err(ModelError::FoldCount { n: 2, k: 3 }));
    }

    #[test]
    fn oversampling_balances() {
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i < 10)).collect();
        let idx: Vec<usize> = (0..100).collect();
        let out = oversample_minority(&idx, &labels, 3).unwrap();
        let pos = out.iter().filter(|&&i| labels[i] == 1).count();
        assert_eq!((pos, out.len() - pos), (90, 90));
        assert!(out.iter().all(|i| idx.contains(i)));

        let balanced = [0u8, 1, 0, 1];
        assert_eq!(
            oversample_minority(&[0, 1, 2, 3], &balanced, 3).unwrap(),
            vec![0, 1, 2, 3]
        );
        assert!(oversample_minority(&[0, 2], &balanced, 3).is_err());
    }

    #[test]
    fn zero_weights_predict_half() {
        let x = DesignMatrix::from_rows(vec![vec![1.0, -2.0], vec![3.0, 0.5]]);
        let p = LogisticModel::zeros(2).predict_proba(&x).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn separable_pair_is_fit() {
        let x = DesignMatrix::from_rows(vec![vec![0.0], vec![1.0]]);
        let y = [0u8, 1];
        let m = train_logistic(&x, &y, LogisticParams::default(), 0).unwrap();
        let p = m.predict_proba(&x).unwrap();
        assert!(p[0] < 0.5 && p[1] > 0.5, "{p:?}");
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn non_finite_input_rejected() {
        let x = DesignMatrix::from_rows(vec![vec![0.0], vec![f64::NAN]]);
        assert!(matches!(
            train_logistic(&x, &[0, 1], LogisticParams::default(), 0),
            Err(ModelError::NonFiniteInput { row: 1, col: 0 })
        ));
    }

    #[test]
    fn divergence_reported() {
        let x = DesignMatrix::from_rows(vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
        let params = LogisticParams {
            learning_rate: 1e308,
            epochs: 50,
            l2: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            train_logistic(&x, &[0, 1, 0, 1], params, 0),
            Err(ModelError::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn test_fold_never_moves_training_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let y: Vec<u8> = (0..30).map(|i| (i % 2) as u8).collect();
        let x = DesignMatrix::from_rows(rows);
        let folds = kfold_split(30, 3, 1).unwrap();
        let train: Vec<usize> = folds[1].iter().chain(&folds[2]).copied().collect();
        let before = Standardizer::fit(&x.gather(&train));
        let mut mutated = x.clone();
        for &i in &folds[0] {
            mutated.data[i * 3] = 1e6;
        }
        assert_eq!(before, Standardizer::fit(&mutated.gather(&train)));

        let yt: Vec<u8> = train.iter().map(|&i| y[i]).collect();
        let m1 = train_logistic(&x.gather(&train), &yt, LogisticParams::default(), 2).unwrap();
        let m2 = train_logistic(&mutated.gather(&train), &yt, LogisticParams::default(), 2).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn oversampling_leaves_test_folds_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.gen_range(0.0..1.0)]).collect();
        let y: Vec<u8> = (0..40).map(|i| u8::from(i % 5 == 0)).collect();
        let x = DesignMatrix::from_rows(rows);
        let p = LogisticParams {
            epochs: 20,
            ..Default::default()
        };
        let a = cross_validate(&p, &x, &y, 4, true, 3).unwrap();
        let b = cross_validate(&p, &x, &y, 4, false, 3).unwrap();
        assert_eq!(a.folds, b.folds);
        assert!(a.scores.iter().all(|&s| s > 0.0 && s < 1.0));
    }
}
