use rand::seq::SliceRandom;
use rand::Rng;

use super::{Batch, ContrastiveError, Result};
use crate::mining::PairSet;
use crate::store::MentionStore;

/// Draws batches of positive pairs and closes positives over the full pair
/// set restricted to the batch.
#[derive(Debug, Clone)]
pub struct PairSampler {
    pairs: Vec<(u32, u32)>,
    offsets: Vec<usize>,
    adjacency: Vec<u32>,
}

impl PairSampler {
    pub fn new(pairs: &PairSet) -> Self {
        Self::from_pairs(pairs.pairs().iter().map(|p| (p.a, p.b)).collect())
    }

    pub(crate) fn from_pairs(pairs: Vec<(u32, u32)>) -> Self {
        let n = pairs
            .iter()
            .map(|&(a, b)| a.max(b) as usize + 1)
            .max()
            .unwrap_or(0);
        let mut degree = vec![0usize; n + 1];
        for &(a, b) in &pairs {
            degree[a as usize + 1] += 1;
            degree[b as usize + 1] += 1;
        }
        for i in 0..n {
            degree[i + 1] += degree[i];
        }
        let offsets = degree;
        let mut fill = offsets.clone();
        let mut adjacency = vec![0u32; offsets[n]];
        for &(a, b) in &pairs {
            adjacency[fill[a as usize]] = b;
            fill[a as usize] += 1;
            adjacency[fill[b as usize]] = a;
            fill[b as usize] += 1;
        }
        for i in 0..n {
            adjacency[offsets[i]..offsets[i + 1]].sort_unstable();
        }
        Self {
            pairs,
            offsets,
            adjacency,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn partners(&self, r: u32) -> &[u32] {
        let r = r as usize;
        if r + 1 >= self.offsets.len() {
            return &[];
        }
        &self.adjacency[self.offsets[r]..self.offsets[r + 1]]
    }

    /// Batch over the endpoints of the given pairs (by position).
    pub(crate) fn batch_of(&self, chosen: impl IntoIterator<Item = usize>) -> Result<Batch> {
        let mut elements: Vec<u32> = chosen
            .into_iter()
            .flat_map(|i| {
                let (a, b) = self.pairs[i];
                [a, b]
            })
            .collect();
        elements.sort_unstable();
        elements.dedup();
        let positives = elements
            .iter()
            .map(|&r| {
                self.partners(r)
                    .iter()
                    .filter_map(|p| elements.binary_search(p).ok())
                    .collect()
            })
            .collect();
        Batch::new(elements, positives)
    }

    /// `batch_pairs` pairs without replacement, or all of them if fewer.
    pub fn sample<R: Rng + ?Sized>(&self, batch_pairs: usize, rng: &mut R) -> Result<Batch> {
        if self.pairs.is_empty() {
            return Err(ContrastiveError::Empty);
        }
        let amount = batch_pairs.min(self.pairs.len());
        let mut idx = rand::seq::index::sample(rng, self.pairs.len(), amount).into_vec();
        idx.sort_unstable();
        self.batch_of(idx)
    }

    /// One pass: ceil(|pairs| / batch_pairs) independently sampled batches.
    pub fn epoch<R: Rng + ?Sized>(&self, batch_pairs: usize, rng: &mut R) -> Result<Vec<Batch>> {
        let steps = self.pairs.len().div_ceil(batch_pairs.max(1));
        (0..steps).map(|_| self.sample(batch_pairs, rng)).collect()
    }

    /// Deterministic batches over consecutive chunks of the pair list.
    pub fn sequential(&self, batch_pairs: usize) -> Result<Vec<Batch>> {
        let bp = batch_pairs.max(1);
        (0..self.pairs.len().div_ceil(bp))
            .map(|c| self.batch_of(c * bp..((c + 1) * bp).min(self.pairs.len())))
            .collect()
    }
}

pub fn sample_batch_pairs<R: Rng + ?Sized>(
    pairs: &PairSet,
    batch_pairs: usize,
    rng: &mut R,
) -> Result<Batch> {
    PairSampler::new(pairs).sample(batch_pairs, rng)
}

/// Builds batches by visiting properties in a shuffled order and adding up
/// to `group_sample` of each property's mentions.
#[derive(Debug, Clone)]
pub struct GroupSampler {
    groups: Vec<Vec<u32>>,
    sentences: Vec<u32>,
}

impl GroupSampler {
    pub fn new(groups: &[Vec<u32>], store: &MentionStore) -> Result<Self> {
        for g in groups {
            if let Some(&r) = g.iter().find(|&&r| r as usize >= store.len()) {
                return Err(ContrastiveError::InvalidBatch(format!(
                    "group member {r} is not a record of the store"
                )));
            }
        }
        Ok(Self {
            groups: groups.iter().filter(|g| !g.is_empty()).cloned().collect(),
            sentences: store.sentences().to_vec(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Records contributed per pass, before deduplication.
    pub fn records_per_pass(&self, group_sample: usize) -> usize {
        self.groups.iter().map(|g| g.len().min(group_sample)).sum()
    }

    fn assemble(&self, members: &[(u32, usize)]) -> Result<Batch> {
        let elements: Vec<u32> = members.iter().map(|m| m.0).collect();
        let positives = members
            .iter()
            .enumerate()
            .map(|(i, &(r, g))| {
                members
                    .iter()
                    .enumerate()
                    .filter(|&(j, &(s, h))| {
                        j != i && h == g && self.sentences[s as usize] != self.sentences[r as usize]
                    })
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        Batch::new(elements, positives)
    }

    fn pass<F>(&self, order: &[usize], target: usize, mut pick: F) -> Result<Vec<Batch>>
    where
        F: FnMut(&[u32]) -> Vec<u32>,
    {
        let target = target.max(2);
        let mut out = Vec::new();
        let mut current: Vec<(u32, usize)> = Vec::new();
        for &g in order {
            for r in pick(&self.groups[g]) {
                // a record shared by two properties keeps its first label
                if current.iter().any(|m| m.0 == r) {
                    continue;
                }
                current.push((r, g));
                if current.len() == target {
                    out.push(self.assemble(&current)?);
                    current.clear();
                }
            }
        }
        if current.len() >= 2 {
            out.push(self.assemble(&current)?);
        }
        Ok(out.into_iter().filter(Batch::has_anchor).collect())
    }

    /// One pass over all properties in a fresh random order.
    pub fn epoch<R: Rng + ?Sized>(
        &self,
        group_sample: usize,
        target_size: usize,
        rng: &mut R,
    ) -> Result<Vec<Batch>> {
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        order.shuffle(rng);
        self.pass(&order, target_size, |g| {
            let amount = group_sample.min(g.len());
            rand::seq::index::sample(rng, g.len(), amount)
                .into_iter()
                .map(|i| g[i])
                .collect()
        })
    }

    /// Properties in stored order, first `group_sample` members each.
    pub fn sequential(&self, group_sample: usize, target_size: usize) -> Result<Vec<Batch>> {
        let order: Vec<usize> = (0..self.groups.len()).collect();
        self.pass(&order, target_size, |g| {
            g[..group_sample.min(g.len())].to_vec()
        })
    }
}

/// First batch of a fresh pass; shorter than `target_size` if the groups run
/// out.
pub fn sample_batch_groups<R: Rng + ?Sized>(
    sampler: &GroupSampler,
    group_sample: usize,
    target_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    sampler
        .epoch(group_sample, target_size, rng)?
        .into_iter()
        .next()
        .ok_or(ContrastiveError::NoPositives)
}
