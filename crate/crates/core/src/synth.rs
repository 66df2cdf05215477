//! Seeded synthetic stores used by tests, the acceptance suite, and the demo
//! pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::mining::{Pair, PairSet, PairSource};
use crate::store::{ConceptId, MentionStore, StoreBuilder, Vocabulary};

/// `n` records with uniform coordinates in [-1, 1], random concepts among
/// `concepts`, and sentence ids drawn from `0..n` (so some collide).
pub fn random_store(n: usize, dim: usize, concepts: usize, seed: u64) -> MentionStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocabulary::from_words((0..concepts.max(1)).map(|i| format!("c{i}"))).unwrap();
    let mut b = StoreBuilder::new(dim, vocab).unwrap();
    let mut v = vec![0f32; dim];
    for _ in 0..n {
        let c = rng.random_range(0..concepts.max(1)) as u32;
        let s = rng.random_range(0..n.max(1)) as u32;
        for x in v.iter_mut() {
            *x = rng.random_range(-1.0f32..=1.0);
        }
        b.push(ConceptId(c), s, &v).unwrap();
    }
    b.build()
}

/// Mentions whose semantic content is one of `properties` orthogonal
/// directions, buried under a shared offset and isotropic nuisance noise.
#[derive(Debug, Clone)]
pub struct PropertyFixtureConfig {
    pub properties: usize,
    pub concepts_per_property: usize,
    pub mentions_per_concept: usize,
    pub dim: usize,
    pub signal: f32,
    pub offset: f32,
    pub noise: f32,
    pub seed: u64,
}

impl Default for PropertyFixtureConfig {
    fn default() -> Self {
        Self {
            properties: 4,
            concepts_per_property: 6,
            mentions_per_concept: 8,
            dim: 32,
            signal: 1.0,
            offset: 2.0,
            noise: 0.6,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PropertyFixture {
    pub store: MentionStore,
    /// Latent property of every record.
    pub record_property: Vec<u32>,
}

impl PropertyFixture {
    /// All same-property record pairs from different sentences.
    pub fn positive_pairs(&self) -> PairSet {
        let n = self.store.len() as u32;
        let mut pairs = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if self.record_property[a as usize] == self.record_property[b as usize]
                    && self.store.sentence(a) != self.store.sentence(b)
                {
                    pairs.push(Pair { a, b, group: None });
                }
            }
        }
        PairSet::from_pairs(pairs, PairSource { k: 0, theta: None })
    }
}

pub fn property_fixture(cfg: &PropertyFixtureConfig) -> PropertyFixture {
    assert!(cfg.dim > cfg.properties + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0f32, cfg.noise).unwrap();
    let concepts = cfg.properties * cfg.concepts_per_property;
    let vocab = Vocabulary::from_words((0..concepts).map(|i| format!("concept{i}"))).unwrap();
    let mut b = StoreBuilder::new(cfg.dim, vocab).unwrap();

    // shared offset lives in the nuisance subspace
    let nuisance = cfg.dim - cfg.properties;
    let offset_dir: Vec<f32> = {
        let raw: Vec<f32> = (0..nuisance)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        let norm = raw.iter().map(|x| x * x).sum::<f32>().sqrt();
        raw.iter().map(|x| x / norm).collect()
    };

    let mut record_property = Vec::new();
    let mut sentence = 0u32;
    for c in 0..concepts {
        let p = c % cfg.properties;
        for _ in 0..cfg.mentions_per_concept {
            let mut v = vec![0f32; cfg.dim];
            v[p] = cfg.signal;
            for (i, x) in v[cfg.properties..].iter_mut().enumerate() {
                *x = cfg.offset * offset_dir[i] + normal.sample(&mut rng);
            }
            b.push(ConceptId(c as u32), sentence, &v).unwrap();
            record_property.push(p as u32);
            sentence += 1;
        }
    }
    PropertyFixture {
        store: b.build(),
        record_property,
    }
}

/// A binary classification task where the class signal lives in a single
/// mention per positive concept.
///
/// Every concept has `mentions` vectors of Gaussian noise. Coordinate 0 is a
/// dedicated signal coordinate that is near zero by default. A positive
/// concept has exactly one mention with coordinate 0 set to `spike`; a
/// negative concept has three mentions at `spike / 3`. The two kinds have the
/// same expected mean, so averaging erases the signal while a max over
/// mentions keeps it.
#[derive(Debug, Clone)]
pub struct RareSignalConfig {
    pub concepts: usize,
    pub positive_fraction: f64,
    pub mentions: usize,
    pub dim: usize,
    pub spike: f32,
    pub seed: u64,
}

impl Default for RareSignalConfig {
    fn default() -> Self {
        Self {
            concepts: 300,
            positive_fraction: 1.0 / 3.0,
            mentions: 20,
            dim: 16,
            spike: 6.0,
            seed: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RareSignalTask {
    pub store: MentionStore,
    pub labels: Vec<(ConceptId, bool)>,
}

pub fn rare_signal_task(cfg: &RareSignalConfig) -> RareSignalTask {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0f32, 1.0).unwrap();
    let quiet = Normal::new(0.0f32, 0.1).unwrap();
    let vocab = Vocabulary::from_words((0..cfg.concepts).map(|i| format!("w{i}"))).unwrap();
    let mut b = StoreBuilder::new(cfg.dim, vocab).unwrap();
    let mut labels = Vec::new();
    let mut sentence = 0u32;
    for c in 0..cfg.concepts {
        let positive = rng.random_bool(cfg.positive_fraction);
        let spikes: Vec<usize> = if positive {
            vec![rng.random_range(0..cfg.mentions)]
        } else {
            rand::seq::index::sample(&mut rng, cfg.mentions, 3).into_vec()
        };
        let height = if positive { cfg.spike } else { cfg.spike / 3.0 };
        for m in 0..cfg.mentions {
            let mut v: Vec<f32> = (0..cfg.dim).map(|_| noise.sample(&mut rng)).collect();
            v[0] = quiet.sample(&mut rng);
            if spikes.contains(&m) {
                v[0] += height;
            }
            b.push(ConceptId(c as u32), sentence, &v).unwrap();
            sentence += 1;
        }
        labels.push((ConceptId(c as u32), positive));
    }
    RareSignalTask {
        store: b.build(),
        labels,
    }
}

/// Toy store with three well separated groups of concepts, used as the
/// bundled CLI fixture.
pub fn toy_store(seed: u64) -> MentionStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = [
        "shark",
        "whale",
        "coral",
        "submarine",
        "diver",
        "lemon",
        "orange",
        "lime",
        "apple",
        "hammer",
        "saw",
        "drill",
    ];
    let vocab = Vocabulary::from_words(words).unwrap();
    let centers = [
        [1.0f32, 0.2, 0.1, 0.0],
        [0.1, 1.0, 0.2, 0.1],
        [0.0, 0.1, 0.3, 1.0],
    ];
    let normal = Normal::new(0.0f32, 0.35).unwrap();
    let mut b = StoreBuilder::new(4, vocab).unwrap();
    for (c, _) in words.iter().enumerate() {
        let group = if c < 5 {
            0
        } else if c < 9 {
            1
        } else {
            2
        };
        for _ in 0..6 {
            let v: Vec<f32> = centers[group]
                .iter()
                .map(|x| x + normal.sample(&mut rng))
                .collect();
            // sentences are shared between some mentions
            let sentence = rng.random_range(0..48u32);
            b.push(ConceptId(c as u32), sentence, &v).unwrap();
        }
    }
    b.build()
}
