use std::f64::consts::PI;
use std::fmt;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    loss_and_gradient, Batch, ContrastiveError, GroupSampler, PairSampler, ProjectionModel, Result,
};
use crate::mining::PairSet;
use crate::store::MentionStore;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub out_dim: usize,
    pub tau: f64,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub batch_pairs: usize,
    pub group_sample: usize,
    pub group_batch: usize,
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            out_dim: 256,
            tau: 0.05,
            lr: 2e-4,
            warmup_epochs: 2,
            patience: 10,
            min_delta: 1e-10,
            batch_pairs: 1024,
            group_sample: 50,
            group_batch: 1024,
            max_epochs: 100,
            weight_decay: 0.01,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ContrastiveError::Config(m.into()));
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(ContrastiveError::BadTemperature);
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return bad("learning rate must be non-negative");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.out_dim == 0 {
            return bad("output dimension must be positive");
        }
        if self.batch_pairs == 0 || self.group_sample == 0 || self.group_batch < 2 {
            return bad("batch sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        if self.min_delta.is_nan()
            || self.min_delta < 0.0
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return bad("min_delta and weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// Positive pairs, or property groups given as record indices.
#[derive(Debug, Clone, Copy)]
pub enum TrainingData<'a> {
    Pairs(&'a PairSet),
    Groups(&'a [Vec<u32>]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub improved: bool,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let val = self
            .val_loss
            .map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "{}\t{:.6}\t{}\t{:.3e}\t{}",
            self.epoch,
            self.train_loss,
            val,
            self.lr,
            if self.improved { "*" } else { "" }
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ProjectionModel,
    /// 0 means the initialisation was never beaten.
    pub best_epoch: usize,
    pub best_loss: f64,
    pub history: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Linear warm-up to `base` over `warmup` steps, then cosine decay to zero
/// at `total`.
pub fn lr_at_step(step: usize, warmup: usize, total: usize, base: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * progress).cos())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stable held-out membership; independent of the training seed.
pub(crate) fn held_out(key: u64, fraction: f64) -> bool {
    ((splitmix64(key) >> 11) as f64 / (1u64 << 53) as f64) < fraction
}

enum Source {
    Pairs {
        train: PairSampler,
        val: Vec<Batch>,
    },
    Groups {
        train: GroupSampler,
        val: Vec<Batch>,
    },
}

impl Source {
    fn build(store: &MentionStore, data: TrainingData<'_>, cfg: &TrainConfig) -> Result<Self> {
        match data {
            TrainingData::Pairs(pairs) => {
                let (mut train, mut val) = (Vec::new(), Vec::new());
                for p in pairs.pairs() {
                    if p.a as usize >= store.len() || p.b as usize >= store.len() {
                        return Err(ContrastiveError::InvalidBatch(format!(
                            "pair ({}, {}) is out of range",
                            p.a, p.b
                        )));
                    }
                    let key = (u64::from(p.a) << 32) | u64::from(p.b);
                    if held_out(key, cfg.val_fraction) {
                        val.push((p.a, p.b));
                    } else {
                        train.push((p.a, p.b));
                    }
                }
                if train.is_empty() {
                    return Err(ContrastiveError::Empty);
                }
                let val = PairSampler::from_pairs(val).sequential(cfg.batch_pairs)?;
                Ok(Source::Pairs {
                    train: PairSampler::from_pairs(train),
                    val,
                })
            }
            TrainingData::Groups(groups) => {
                let split = |want_val: bool| -> Vec<Vec<u32>> {
                    groups
                        .iter()
                        .map(|g| {
                            g.iter()
                                .copied()
                                .filter(|&r| held_out(u64::from(r), cfg.val_fraction) == want_val)
                                .collect()
                        })
                        .collect()
                };
                let train = GroupSampler::new(&split(false), store)?;
                if train.is_empty() {
                    return Err(ContrastiveError::Empty);
                }
                let val = GroupSampler::new(&split(true), store)?
                    .sequential(cfg.group_sample, cfg.group_batch)?;
                Ok(Source::Groups { train, val })
            }
        }
    }

    fn steps_per_epoch(&self, cfg: &TrainConfig) -> usize {
        match self {
            Source::Pairs { train, .. } => train.len().div_ceil(cfg.batch_pairs),
            Source::Groups { train, .. } => train
                .records_per_pass(cfg.group_sample)
                .div_ceil(cfg.group_batch),
        }
        .max(1)
    }

    fn epoch(&self, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Batch>> {
        match self {
            Source::Pairs { train, .. } => train.epoch(cfg.batch_pairs, rng),
            Source::Groups { train, .. } => train.epoch(cfg.group_sample, cfg.group_batch, rng),
        }
    }

    fn validation(&self) -> &[Batch] {
        match self {
            Source::Pairs { val, .. } | Source::Groups { val, .. } => val,
        }
    }
}

fn anchors(batch: &Batch) -> usize {
    batch.positives().iter().filter(|p| !p.is_empty()).count()
}

/// Mean per-anchor loss over a fixed set of batches.
fn mean_loss(
    store: &MentionStore,
    batches: &[Batch],
    model: &ProjectionModel,
    tau: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in batches.iter().filter(|b| b.has_anchor()) {
        total += loss_and_gradient(store, b, model, tau)?.0;
        count += anchors(b);
    }
    Ok(if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    })
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    weight_decay: f64,
}

impl AdamW {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            weight_decay,
        }
    }

    fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
            let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
            w[i] -= lr * (update + self.weight_decay * w[i]);
        }
    }
}

/// Trains the projection and returns the checkpoint with the lowest
/// monitored loss: held-out loss when a validation split exists, training
/// loss otherwise.
pub fn train_projection(
    store: &MentionStore,
    data: TrainingData<'_>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let source = Source::build(store, data, cfg)?;
    let mut model = ProjectionModel::init(cfg.out_dim, store.dim(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut opt = AdamW::new(model.weights().len(), cfg.weight_decay);

    let steps_per_epoch = source.steps_per_epoch(cfg);
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let total = cfg.max_epochs * steps_per_epoch;
    let val = source.validation();
    let has_val = val.iter().any(Batch::has_anchor);
    info!(
        "training {}x{} projection: {} steps/epoch, {} validation batches",
        cfg.out_dim,
        store.dim(),
        steps_per_epoch,
        val.len()
    );

    let mut best = model.clone();
    let mut best_loss = if has_val {
        mean_loss(store, val, &model, cfg.tau)?
    } else {
        f64::INFINITY
    };
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut step = 0usize;
    let mut wait = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_anchors = 0usize;
        let mut lr = 0.0;
        for batch in source.epoch(cfg, &mut rng)? {
            if !batch.has_anchor() {
                continue;
            }
            let (loss, mut grad) = loss_and_gradient(store, &batch, &model, cfg.tau)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(ContrastiveError::Diverged { epoch });
            }
            let a = anchors(&batch);
            let scale = 1.0 / a as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            lr = lr_at_step(step, warmup, total, cfg.lr);
            opt.step(model.weights_mut(), &grad, lr);
            step += 1;
            epoch_loss += loss;
            epoch_anchors += a;
        }
        let train_loss = epoch_loss / epoch_anchors.max(1) as f64;
        let val_loss = if has_val {
            Some(mean_loss(store, val, &model, cfg.tau)?)
        } else {
            None
        };
        let monitored = val_loss.unwrap_or(train_loss);
        if !monitored.is_finite() {
            return Err(ContrastiveError::Diverged { epoch });
        }
        let improved = monitored < best_loss - cfg.min_delta;
        if improved {
            best_loss = monitored;
            best = model.clone();
            best_epoch = epoch;
            wait = 0;
        } else {
            wait += 1;
        }
        let log = EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
            improved,
        };
        debug!("{log}");
        history.push(log);
        if wait >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    info!("best epoch {best_epoch}, monitored loss {best_loss:.6}");
    Ok(TrainOutcome {
        model: best,
        best_epoch,
        best_loss,
        history,
        stopped_early,
    })
}
