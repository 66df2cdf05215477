use log::{debug, error};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{binary_f1, macro_f1, EvalError, LabeledDataset, MetricsReport, Result, Split};
use crate::simsearch::dot;
use crate::store::ConceptEmbeddingTable;

pub const DEFAULT_C_GRID: [f64; 4] = [0.1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SvmOptions {
    /// Reweight each label by n / (2 * n_label).
    pub balanced: bool,
    pub tol: f64,
    pub max_passes: usize,
    pub seed: u64,
}

impl Default for SvmOptions {
    fn default() -> Self {
        Self {
            balanced: false,
            tol: 1e-4,
            max_passes: 1000,
            seed: 0,
        }
    }
}

/// Hinge-loss linear classifier; the bias is learned as the weight of a
/// constant feature and is regularised with the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub passes: usize,
    pub converged: bool,
}

impl LinearClassifier {
    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.decision(x) > 0.0
    }
}

fn label_weights(ys: &[bool], balanced: bool) -> (f64, f64) {
    if !balanced {
        return (1.0, 1.0);
    }
    let pos = ys.iter().filter(|&&y| y).count().max(1) as f64;
    let neg = ys.iter().filter(|&&y| !y).count().max(1) as f64;
    let n = ys.len() as f64;
    (n / (2.0 * pos), n / (2.0 * neg))
}

/// `0.5 * (|w|^2 + b^2) + sum_i C_i * max(0, 1 - y_i * f(x_i))`.
pub fn primal_objective(
    clf: &LinearClassifier,
    xs: &[Vec<f64>],
    ys: &[bool],
    balanced: bool,
) -> f64 {
    let (wp, wn) = label_weights(ys, balanced);
    let reg = 0.5 * (dot(&clf.weights, &clf.weights) + clf.bias * clf.bias);
    let loss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| {
            let s = if y { 1.0 } else { -1.0 };
            let ci = clf.c * if y { wp } else { wn };
            ci * (1.0 - s * clf.decision(x)).max(0.0)
        })
        .sum();
    reg + loss
}

/// Dual coordinate descent on the hinge-loss SVM. Stops when the spread of
/// projected gradients over a pass drops below `tol`.
pub fn fit_svm(
    xs: &[Vec<f64>],
    ys: &[bool],
    c: f64,
    opts: &SvmOptions,
) -> Result<LinearClassifier> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(EvalError::EmptySplit);
    }
    if c.is_nan() || c <= 0.0 {
        return Err(EvalError::Config("C must be positive".into()));
    }
    let dim = xs[0].len();
    if let Some(x) = xs.iter().find(|x| x.len() != dim) {
        return Err(EvalError::DimMismatch {
            expected: dim,
            found: x.len(),
        });
    }
    let (wp, wn) = label_weights(ys, opts.balanced);
    let n = xs.len();
    let sign: Vec<f64> = ys.iter().map(|&y| if y { 1.0 } else { -1.0 }).collect();
    let upper: Vec<f64> = ys.iter().map(|&y| c * if y { wp } else { wn }).collect();
    let qii: Vec<f64> = xs.iter().map(|x| dot(x, x) + 1.0).collect();
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut passes = 0;
    let mut converged = false;

    while passes < opts.max_passes {
        passes += 1;
        order.shuffle(&mut rng);
        let mut max_pg = f64::NEG_INFINITY;
        let mut min_pg = f64::INFINITY;
        for &i in &order {
            let g = sign[i] * (dot(&w, &xs[i]) + b) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == upper[i] {
                g.max(0.0)
            } else {
                g
            };
            max_pg = max_pg.max(pg);
            min_pg = min_pg.min(pg);
            if pg.abs() > 1e-12 {
                let old = alpha[i];
                alpha[i] = (old - g / qii[i]).clamp(0.0, upper[i]);
                let step = (alpha[i] - old) * sign[i];
                for (wj, xj) in w.iter_mut().zip(&xs[i]) {
                    *wj += step * xj;
                }
                b += step;
            }
        }
        if max_pg - min_pg < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        debug!("dual coordinate descent hit {passes} passes without converging (C={c})");
    }
    Ok(LinearClassifier {
        weights: w,
        bias: b,
        c,
        passes,
        converged,
    })
}

/// Fits one classifier per C and keeps the best dev F1; ties go to the
/// smaller C.
pub fn train_linear(
    train: (&[Vec<f64>], &[bool]),
    dev: (&[Vec<f64>], &[bool]),
    grid: &[f64],
    opts: &SvmOptions,
) -> Result<LinearClassifier> {
    let (xs, ys) = train;
    if !ys.iter().any(|&y| y) || ys.iter().all(|&y| y) {
        return Err(EvalError::SingleLabel);
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut best: Option<(f64, LinearClassifier)> = None;
    for c in grid {
        let clf = fit_svm(xs, ys, c, opts)?;
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (x, &y) in dev.0.iter().zip(dev.1) {
            match (y, clf.predict(x)) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        let f1 = binary_f1(tp, fp, fn_);
        if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
            best = Some((f1, clf));
        }
    }
    best.map(|b| b.1)
        .ok_or_else(|| EvalError::Config("empty C grid".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearEvalConfig {
    pub grid: Vec<f64>,
    pub svm: SvmOptions,
}

impl Default for LinearEvalConfig {
    fn default() -> Self {
        Self {
            grid: DEFAULT_C_GRID.to_vec(),
            svm: SvmOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearEvalOutcome {
    pub report: MetricsReport,
    pub chosen_c: Vec<f64>,
    /// Aligned with the test items of the evaluated dataset.
    pub predictions: Vec<bool>,
    pub dataset: LabeledDataset,
    /// Concepts dropped because the table has no embedding for them.
    pub excluded: usize,
}

/// Trains a classifier per class on the table's embeddings and scores the
/// test split.
pub fn evaluate_linear(
    dataset: &LabeledDataset,
    table: &ConceptEmbeddingTable,
    cfg: &LinearEvalConfig,
) -> Result<LinearEvalOutcome> {
    let mut ds = dataset.clone();
    let excluded = ds.retain_concepts(|c| table.get(c).is_some());
    let feature = |c| -> Vec<f64> { table.get(c).unwrap().iter().map(|&v| v as f64).collect() };
    let collect = |class: u32, split: Split| -> (Vec<Vec<f64>>, Vec<bool>) {
        ds.class_items(class, split)
            .map(|i| (feature(i.concept), i.positive))
            .unzip()
    };
    let per_class: Vec<LinearClassifier> = (0..ds.classes.len() as u32)
        .into_par_iter()
        .map(|class| {
            let (tx, ty) = collect(class, Split::Train);
            let (dx, dy) = collect(class, Split::Dev);
            train_linear((&tx, &ty), (&dx, &dy), &cfg.grid, &cfg.svm).inspect_err(|e| {
                error!("class {:?}: {e}", ds.classes[class as usize]);
            })
        })
        .collect::<Result<_>>()?;
    let predictions: Vec<bool> = ds
        .items_in(Split::Test)
        .map(|i| per_class[i.class as usize].predict(&feature(i.concept)))
        .collect();
    let report = macro_f1(&ds, Split::Test, &predictions)?;
    Ok(LinearEvalOutcome {
        report,
        chosen_c: per_class.iter().map(|c| c.c).collect(),
        predictions,
        dataset: ds,
        excluded,
    })
}
