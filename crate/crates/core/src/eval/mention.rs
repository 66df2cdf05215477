use log::{debug, error};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{binary_f1, macro_f1, EvalError, LabeledDataset, MetricsReport, Result, Split};
use crate::simsearch::dot;
use crate::store::{ConceptId, MentionStore};

#[derive(Debug, Clone, PartialEq)]
pub struct MentionClassifierConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for MentionClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

/// Shared per-mention dense layer with a rectifier, coordinatewise max over
/// the concept's mentions, then an affine map to a logit.
///
/// Parameters are stored flat: `w1` (hidden x dim, row-major), `b1`, `w2`,
/// `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MentionSetClassifier {
    dim: usize,
    hidden: usize,
    params: Vec<f64>,
}

/// A concept's mentions as a dense row-major matrix.
#[derive(Debug, Clone)]
struct MentionSet {
    rows: usize,
    data: Vec<f64>,
}

impl MentionSetClassifier {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let a = 1.0 / (dim as f64).sqrt();
        let b = 1.0 / (hidden as f64).sqrt();
        let mut params = Vec::with_capacity(hidden * dim + 2 * hidden + 1);
        params.extend((0..hidden * dim + hidden).map(|_| rng.random_range(-a..a)));
        params.extend((0..hidden + 1).map(|_| rng.random_range(-b..b)));
        Self {
            dim,
            hidden,
            params,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], f64) {
        let (h, d) = (self.hidden, self.dim);
        let (w1, rest) = self.params.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h);
        (w1, b1, w2, b2[0])
    }

    /// Pooled hidden activations and, per unit, the mention that attains
    /// the max (first one on ties).
    fn pool(&self, mentions: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let (w1, b1, _, _) = self.split();
        let mut pooled = vec![f64::NEG_INFINITY; self.hidden];
        let mut arg = vec![0usize; self.hidden];
        for (m, x) in mentions.chunks_exact(self.dim).enumerate() {
            for u in 0..self.hidden {
                let a = (dot(&w1[u * self.dim..(u + 1) * self.dim], x) + b1[u]).max(0.0);
                if a > pooled[u] {
                    pooled[u] = a;
                    arg[u] = m;
                }
            }
        }
        (pooled, arg)
    }

    /// Logit for a concept given its mention vectors (flat, `dim` each).
    pub fn logit(&self, mentions: &[f64]) -> f64 {
        let (pooled, _) = self.pool(mentions);
        let (_, _, w2, b2) = self.split();
        dot(w2, &pooled) + b2
    }

    pub fn probability(&self, mentions: &[f64]) -> f64 {
        sigmoid(self.logit(mentions))
    }

    pub fn predict(&self, mentions: &[f64]) -> bool {
        self.logit(mentions) > 0.0
    }

    /// Binary cross-entropy and its gradient with respect to the flat
    /// parameters.
    pub fn loss_and_gradient(&self, mentions: &[f64], label: bool) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.accumulate(mentions, label, 1.0, &mut grad);
        (loss, grad)
    }

    fn accumulate(&self, mentions: &[f64], label: bool, scale: f64, grad: &mut [f64]) -> f64 {
        let (h, d) = (self.hidden, self.dim);
        let (pooled, arg) = self.pool(mentions);
        let (_, _, w2, b2) = self.split();
        let z = dot(w2, &pooled) + b2;
        let y = if label { 1.0 } else { 0.0 };
        // log(1 + e^z) - y z, stable in both tails
        let loss = z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
        let delta = (sigmoid(z) - y) * scale;
        let (gw1, rest) = grad.split_at_mut(h * d);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(h);
        gb2[0] += delta;
        for u in 0..h {
            gw2[u] += delta * pooled[u];
            if pooled[u] > 0.0 {
                let back = delta * w2[u];
                let x = &mentions[arg[u] * d..(arg[u] + 1) * d];
                for (g, xv) in gw1[u * d..(u + 1) * d].iter_mut().zip(x) {
                    *g += back * xv;
                }
                gb1[u] += back;
            }
        }
        loss
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

fn mention_set(store: &MentionStore, concept: ConceptId) -> Result<MentionSet> {
    let ids = store
        .mentions_of(concept)
        .map_err(|_| EvalError::NoMentions(concept))?;
    if ids.is_empty() {
        return Err(EvalError::NoMentions(concept));
    }
    let mut data = Vec::with_capacity(ids.len() * store.dim());
    for &r in ids {
        data.extend(store.vector(r).iter().map(|&v| v as f64));
    }
    Ok(MentionSet {
        rows: ids.len(),
        data,
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g[i] * g[i];
            w[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// F1 and mean cross-entropy over a monitored set.
fn score(model: &MentionSetClassifier, data: &[(MentionSet, bool)]) -> (f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut loss = 0.0;
    for (m, y) in data {
        let z = model.logit(&m.data);
        let t = if *y { 1.0 } else { 0.0 };
        loss += z.max(0.0) - t * z + (-z.abs()).exp().ln_1p();
        match (*y, z > 0.0) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    (binary_f1(tp, fp, fn_), loss / data.len().max(1) as f64)
}

/// Trains one binary classifier and returns it with its best dev F1. With
/// no dev items the training set is monitored instead. Training stops once
/// neither the monitored F1 nor the monitored loss has improved for
/// `patience` epochs; the kept model has the best F1, lower loss on ties.
pub fn train_mention_classifier(
    train: &[(ConceptId, bool)],
    dev: &[(ConceptId, bool)],
    store: &MentionStore,
    cfg: &MentionClassifierConfig,
) -> Result<(MentionSetClassifier, f64)> {
    if cfg.hidden == 0
        || cfg.batch_size == 0
        || cfg.patience == 0
        || cfg.lr.is_nan()
        || cfg.lr <= 0.0
    {
        return Err(EvalError::Config(
            "hidden, batch size, patience and lr must be positive".into(),
        ));
    }
    if !train.iter().any(|t| t.1) || train.iter().all(|t| t.1) {
        return Err(EvalError::SingleLabel);
    }
    let load = |items: &[(ConceptId, bool)]| -> Result<Vec<(MentionSet, bool)>> {
        items
            .iter()
            .map(|&(c, y)| Ok((mention_set(store, c)?, y)))
            .collect()
    };
    let train_sets = load(train)?;
    let dev_sets = load(dev)?;
    let monitor = if dev_sets.is_empty() {
        &train_sets
    } else {
        &dev_sets
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MentionSetClassifier::new(store.dim(), cfg.hidden, &mut rng);
    let mut opt = Adam::new(model.params.len());
    let mut best = model.clone();
    let (mut best_f1, mut best_loss) = score(&model, monitor);
    let mut lowest_loss = best_loss;
    let mut wait = 0;
    let mut order: Vec<usize> = (0..train_sets.len()).collect();
    let mut grad = vec![0.0; model.params.len()];

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (m, y) = &train_sets[i];
                debug_assert_eq!(m.data.len(), m.rows * store.dim());
                epoch_loss += model.accumulate(&m.data, *y, scale, &mut grad);
            }
            opt.step(&mut model.params, &grad, cfg.lr);
        }
        if !epoch_loss.is_finite() {
            return Err(EvalError::Diverged);
        }
        let (f1, loss) = score(&model, monitor);
        debug!(
            "epoch {epoch}: loss {:.5} monitored F1 {f1:.4}",
            epoch_loss / train_sets.len() as f64
        );
        let better_loss = loss < lowest_loss;
        if better_loss {
            lowest_loss = loss;
        }
        if f1 > best_f1 || (f1 == best_f1 && loss < best_loss) {
            best_f1 = f1;
            best_loss = loss;
            best = model.clone();
            wait = 0;
        } else if better_loss {
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                break;
            }
        }
    }
    Ok((best, best_f1))
}

#[derive(Debug, Clone)]
pub struct MentionEvalOutcome {
    pub report: MetricsReport,
    pub predictions: Vec<bool>,
    pub dataset: LabeledDataset,
    /// Concepts dropped because the store has no mentions for them.
    pub excluded: usize,
}

/// One mention classifier per class, scored on the test split.
pub fn evaluate_mention_classifier(
    dataset: &LabeledDataset,
    store: &MentionStore,
    cfg: &MentionClassifierConfig,
) -> Result<MentionEvalOutcome> {
    let mut ds = dataset.clone();
    let excluded = ds.retain_concepts(|c| store.mentions_of(c).is_ok_and(|m| !m.is_empty()));
    let models: Vec<MentionSetClassifier> = (0..ds.classes.len() as u32)
        .into_par_iter()
        .map(|class| {
            let pick = |s| -> Vec<(ConceptId, bool)> {
                ds.class_items(class, s)
                    .map(|i| (i.concept, i.positive))
                    .collect()
            };
            let class_cfg = MentionClassifierConfig {
                seed: cfg.seed.wrapping_add(u64::from(class)),
                ..cfg.clone()
            };
            train_mention_classifier(&pick(Split::Train), &pick(Split::Dev), store, &class_cfg)
                .map(|m| m.0)
                .inspect_err(|e| error!("class {:?}: {e}", ds.classes[class as usize]))
        })
        .collect::<Result<_>>()?;
    let predictions = ds
        .items_in(Split::Test)
        .map(|i| Ok(models[i.class as usize].predict(&mention_set(store, i.concept)?.data)))
        .collect::<Result<Vec<bool>>>()?;
    let report = macro_f1(&ds, Split::Test, &predictions)?;
    Ok(MentionEvalOutcome {
        report,
        predictions,
        dataset: ds,
        excluded,
    })
}
