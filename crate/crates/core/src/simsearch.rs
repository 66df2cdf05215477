//! Exact cosine k-nearest-neighbour search over a [`MentionStore`].
//!
//! Every path (single query, batch, parallel) scores pairs with the same dot
//! kernel and selects with the same total order: similarity descending, then
//! record index ascending. Results are therefore bit-identical regardless of
//! tiling or thread count.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::binfmt::{Decoder, Encoder, FormatError};
use crate::store::MentionStore;

pub const CACHE_MAGIC: &[u8; 4] = b"CKNN";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("non-finite input")]
    NonFinite,
    #[error("record index {0} out of range")]
    InvalidIndex(u32),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("need at least 2 records, store has {0}")]
    TooFewRecords(usize),
    #[error(transparent)]
    Format(#[from] FormatError),
}

impl From<std::io::Error> for SearchError {
    fn from(e: std::io::Error) -> Self {
        SearchError::Format(FormatError::Io(e))
    }
}

pub type Result<T> = std::result::Result<T, SearchError>;

/// Four-lane dot product in 64-bit. All similarity code funnels through here.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    if norm_a == 0.0 || norm_b == 0.0 {
        return 0.0;
    }
    (dot / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

/// Cosine similarity accumulated in 64-bit; 0 when either vector is zero.
pub fn cosine<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SearchError::DimMismatch(a.len(), b.len()));
    }
    let a: Vec<f64> = a.iter().map(|&x| x.into()).collect();
    let b: Vec<f64> = b.iter().map(|&x| x.into()).collect();
    if a.iter().chain(&b).any(|x| !x.is_finite()) {
        return Err(SearchError::NonFinite);
    }
    Ok(cosine_from_parts(
        dot(&a, &b),
        dot(&a, &a).sqrt(),
        dot(&b, &b).sqrt(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: u32,
    pub similarity: f64,
}

/// The `k` nearest other records of `query`, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub query: u32,
    pub neighbors: Vec<Neighbor>,
}

impl NeighborList {
    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.neighbors.iter().map(|n| n.index)
    }
}

/// Heap entry ordered so that the *worst* candidate is the maximum.
#[derive(Clone, Copy)]
struct Candidate(Neighbor);

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // better = higher similarity, then lower index; max-heap keeps the worst on top
        other
            .0
            .similarity
            .total_cmp(&self.0.similarity)
            .then(self.0.index.cmp(&other.0.index))
    }
}

struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn offer(&mut self, n: Neighbor) {
        let c = Candidate(n);
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(worst) = self.heap.peek() {
            if c < *worst {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    fn into_sorted(self) -> Vec<Neighbor> {
        // ascending by Candidate order == best first
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| c.0)
            .collect()
    }
}

const QUERY_BLOCK: usize = 16;
const RECORD_TILE: usize = 256;

/// Store vectors widened to 64-bit with precomputed norms.
pub struct SimIndex {
    dim: usize,
    data: Vec<f64>,
    norms: Vec<f64>,
}

impl SimIndex {
    pub fn new(store: &MentionStore) -> Self {
        let dim = store.dim();
        let data: Vec<f64> = store.raw_vectors().iter().map(|&x| x as f64).collect();
        let norms = data.chunks_exact(dim).map(|v| dot(v, v).sqrt()).collect();
        Self { dim, data, norms }
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn similarity(&self, a: u32, b: u32) -> f64 {
        let (a, b) = (a as usize, b as usize);
        cosine_from_parts(dot(self.row(a), self.row(b)), self.norms[a], self.norms[b])
    }

    fn effective_k(&self, k: usize) -> Result<usize> {
        if k == 0 {
            return Err(SearchError::ZeroK);
        }
        if self.len() < 2 {
            return Err(SearchError::TooFewRecords(self.len()));
        }
        Ok(k.min(self.len() - 1))
    }

    pub fn knn(&self, query: u32, k: usize) -> Result<NeighborList> {
        let k = self.effective_k(k)?;
        if query as usize >= self.len() {
            return Err(SearchError::InvalidIndex(query));
        }
        Ok(self.search_block(&[query], k).pop().unwrap())
    }

    /// Scores a block of queries tile by tile against the whole store.
    fn search_block(&self, queries: &[u32], k: usize) -> Vec<NeighborList> {
        let mut tops: Vec<TopK> = queries.iter().map(|_| TopK::new(k)).collect();
        let n = self.len();
        let mut start = 0;
        while start < n {
            let end = (start + RECORD_TILE).min(n);
            for (top, &q) in tops.iter_mut().zip(queries) {
                let qi = q as usize;
                let qv = self.row(qi);
                let qn = self.norms[qi];
                for j in start..end {
                    if j == qi {
                        continue;
                    }
                    let s = cosine_from_parts(dot(qv, self.row(j)), qn, self.norms[j]);
                    top.offer(Neighbor {
                        index: j as u32,
                        similarity: s,
                    });
                }
            }
            start = end;
        }
        tops.into_iter()
            .zip(queries)
            .map(|(t, &q)| NeighborList {
                query: q,
                neighbors: t.into_sorted(),
            })
            .collect()
    }

    /// Neighbour lists for every record, in record order. Parallel over query
    /// blocks on the current rayon pool.
    pub fn knn_all(&self, k: usize) -> Result<Vec<NeighborList>> {
        let k = self.effective_k(k)?;
        let queries: Vec<u32> = (0..self.len() as u32).collect();
        Ok(queries
            .par_chunks(QUERY_BLOCK)
            .flat_map_iter(|block| self.search_block(block, k))
            .collect())
    }
}

/// `k` nearest neighbours of record `query` (excluding itself).
pub fn knn(store: &MentionStore, query: u32, k: usize) -> Result<NeighborList> {
    SimIndex::new(store).knn(query, k)
}

/// [`knn`] for every record.
pub fn knn_all(store: &MentionStore, k: usize) -> Result<Vec<NeighborList>> {
    SimIndex::new(store).knn_all(k)
}

/// Neighbour lists with a uniform `k`, as persisted in the `CKNN` cache.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborCache {
    pub k: usize,
    pub lists: Vec<NeighborList>,
}

impl NeighborCache {
    pub fn new(lists: Vec<NeighborList>) -> Self {
        let k = lists.first().map_or(0, |l| l.neighbors.len());
        Self { k, lists }
    }

    pub fn encode<W: Write>(&self, out: W) -> Result<W> {
        let mut enc = Encoder::new(out);
        enc.raw(CACHE_MAGIC)?;
        enc.u32(CACHE_VERSION)?;
        enc.u32(self.k as u32)?;
        enc.u64(self.lists.len() as u64)?;
        for list in &self.lists {
            if list.neighbors.len() != self.k {
                return Err(FormatError::Invalid(format!(
                    "list for record {} has {} neighbours, cache k is {}",
                    list.query,
                    list.neighbors.len(),
                    self.k
                ))
                .into());
            }
            for n in &list.neighbors {
                enc.u32(n.index)?;
                enc.f32(n.similarity as f32)?;
            }
        }
        Ok(enc.finish()?)
    }

    pub fn decode<R: Read>(input: R) -> Result<Self> {
        let mut dec = Decoder::new(input);
        dec.magic(CACHE_MAGIC)?;
        dec.version(CACHE_VERSION)?;
        let k = dec.u32()? as usize;
        let count = dec.u64()?;
        let mut lists = Vec::new();
        for q in 0..count {
            let mut neighbors = Vec::with_capacity(k);
            for _ in 0..k {
                let index = dec.u32()?;
                let similarity = dec.f32()?;
                if !similarity.is_finite() {
                    return Err(FormatError::NonFinite { entry: q, coord: 0 }.into());
                }
                if index as u64 >= count {
                    return Err(SearchError::InvalidIndex(index));
                }
                neighbors.push(Neighbor {
                    index,
                    similarity: similarity as f64,
                });
            }
            lists.push(NeighborList {
                query: q as u32,
                neighbors,
            });
        }
        dec.finish()?;
        Ok(Self { k, lists })
    }
}

pub fn write_cache(cache: &NeighborCache, path: impl AsRef<Path>) -> Result<()> {
    cache.encode(BufWriter::new(File::create(path)?))?;
    Ok(())
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<NeighborCache> {
    NeighborCache::decode(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{ConceptId, StoreBuilder, Vocabulary};
    use crate::synth::random_store;
    use proptest::prelude::*;

    fn naive(store: &MentionStore, q: u32, k: usize) -> Vec<(u32, f64)> {
        let mut all: Vec<(u32, f64)> = (0..store.len() as u32)
            .filter(|&j| j != q)
            .map(|j| (j, cosine(store.vector(q), store.vector(j)).unwrap()))
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    fn flat(list: &NeighborList) -> Vec<(u32, f64)> {
        list.neighbors
            .iter()
            .map(|n| (n.index, n.similarity))
            .collect()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0f64, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 32 / sqrt(14 * 77)
        let expected = 32.0 / (14.0f64 * 77.0).sqrt();
        let got = cosine(&[1.0f32, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((got - expected).abs() < 1e-9);
        assert!((got - 0.974631846).abs() < 1e-9);
        assert_eq!(cosine(&[0.0f64, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine(&[1.0f64], &[1.0, 2.0]),
            Err(SearchError::DimMismatch(1, 2))
        ));
        assert!(matches!(
            cosine(&[f64::NAN], &[1.0]),
            Err(SearchError::NonFinite)
        ));
    }

    #[test]
    fn identical_vectors_are_mutual_nearest() {
        let vocab = Vocabulary::from_words(["a", "b"]).unwrap();
        let mut b = StoreBuilder::new(2, vocab).unwrap();
        b.push(ConceptId(0), 0, &[0.3, 0.7]).unwrap();
        b.push(ConceptId(1), 1, &[-1.0, 0.2]).unwrap();
        b.push(ConceptId(1), 2, &[0.3, 0.7]).unwrap();
        let store = b.build();
        let l = knn(&store, 0, 1).unwrap();
        assert_eq!(l.neighbors[0].index, 2);
        assert_eq!(l.neighbors[0].similarity, 1.0);
    }

    #[test]
    fn k_larger_than_store_degrades() {
        let store = random_store(5, 3, 2, 1);
        let l = knn(&store, 4, 50).unwrap();
        assert_eq!(l.neighbors.len(), 4);
        assert!(matches!(
            knn(&store, 5, 1),
            Err(SearchError::InvalidIndex(5))
        ));
        assert!(matches!(knn(&store, 0, 0), Err(SearchError::ZeroK)));
    }

    #[test]
    fn three_record_batch() {
        let vocab = Vocabulary::from_words(["a"]).unwrap();
        let mut b = StoreBuilder::new(2, vocab).unwrap();
        b.push(ConceptId(0), 0, &[1.0, 0.0]).unwrap();
        b.push(ConceptId(0), 1, &[1.0, 0.1]).unwrap();
        b.push(ConceptId(0), 2, &[0.0, 1.0]).unwrap();
        let lists = knn_all(&b.build(), 1).unwrap();
        let nearest: Vec<u32> = lists.iter().map(|l| l.neighbors[0].index).collect();
        assert_eq!(nearest, vec![1, 0, 1]);
    }

    #[test]
    fn random_store_matches_naive() {
        let store = random_store(50, 6, 5, 7);
        let index = SimIndex::new(&store);
        for q in 0..50 {
            assert_eq!(flat(&index.knn(q, 7).unwrap()), naive(&store, q, 7));
        }
    }

    #[test]
    fn zero_vectors_score_zero() {
        let vocab = Vocabulary::from_words(["a"]).unwrap();
        let mut b = StoreBuilder::new(2, vocab).unwrap();
        b.push(ConceptId(0), 0, &[0.0, 0.0]).unwrap();
        b.push(ConceptId(0), 1, &[1.0, 0.0]).unwrap();
        b.push(ConceptId(0), 2, &[-1.0, 0.0]).unwrap();
        let store = b.build();
        let l = knn(&store, 1, 2).unwrap();
        assert_eq!(flat(&l), vec![(0, 0.0), (2, -1.0)]);
    }

    #[test]
    fn cache_round_trip() {
        let store = random_store(30, 4, 3, 3);
        let cache = NeighborCache::new(knn_all(&store, 4).unwrap());
        let bytes = cache.encode(Vec::new()).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 30 * 4 * 8);
        let back = NeighborCache::decode(bytes.as_slice()).unwrap();
        assert_eq!(back.encode(Vec::new()).unwrap(), bytes);
        assert_eq!(
            back.lists[3].neighbors[1].index,
            cache.lists[3].neighbors[1].index
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn batch_equals_pointwise_and_naive(n in 2usize..60, dim in 1usize..9, k in 1usize..8, seed in any::<u64>()) {
            let store = random_store(n, dim, 4, seed);
            let all = knn_all(&store, k).unwrap();
            prop_assert_eq!(all.len(), n);
            for (q, list) in all.iter().enumerate() {
                prop_assert_eq!(list.query, q as u32);
                prop_assert!(list.indices().all(|j| j != q as u32));
                prop_assert_eq!(list.neighbors.len(), k.min(n - 1));
                prop_assert!(list.neighbors.windows(2).all(|w| w[0].similarity >= w[1].similarity));
                prop_assert_eq!(flat(list), naive(&store, q as u32, k));
            }
        }

        #[test]
        fn positive_scaling_keeps_order(n in 2usize..40, dim in 1usize..6, k in 1usize..6, seed in any::<u64>(), exp in -6i32..7) {
            // power-of-two scales are exact in floating point, so the index
            // sequences must agree bit for bit
            let store = random_store(n, dim, 3, seed);
            let scale = 2f32.powi(exp);
            let scaled: Vec<f32> = store.raw_vectors().iter().map(|v| v * scale).collect();
            let scaled = store.with_vectors(dim, scaled).unwrap();
            let a = knn_all(&store, k).unwrap();
            let b = knn_all(&scaled, k).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.indices().collect::<Vec<_>>(), y.indices().collect::<Vec<_>>());
            }
        }
    }
}
