//! Concept embeddings as mention averages, plus the geometric analyses run
//! on them: cosine histograms, neighbour listings and neighbour shifts
//! between two mention spaces.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::simsearch::{cosine_from_parts, dot, SearchError, SimIndex};
use crate::store::{ConceptEmbeddingTable, ConceptId, MentionStore, StoreError, Vocabulary};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("store has no records")]
    EmptyStore,
    #[error("need at least 2 concepts, table has {0}")]
    TooFewConcepts(usize),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("stores do not describe the same records")]
    IdentityMismatch,
    #[error("kept index {0} out of range")]
    InvalidKept(u32),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DistillError>;

#[derive(Debug, Clone)]
pub struct Aggregation {
    pub table: ConceptEmbeddingTable,
    /// Concepts whose kept set was empty and that got the unfiltered mean.
    pub fallbacks: Vec<ConceptId>,
}

fn mean_of(store: &MentionStore, records: impl Iterator<Item = u32>) -> Vec<f32> {
    let mut acc = vec![0f64; store.dim()];
    let mut count = 0usize;
    for r in records {
        for (a, &v) in acc.iter_mut().zip(store.vector(r)) {
            *a += v as f64;
        }
        count += 1;
    }
    acc.iter().map(|a| (a / count as f64) as f32).collect()
}

/// Mean mention vector per concept, restricted to `kept` when given.
/// Rows follow concept id order; concepts without any mention get no row.
pub fn aggregate(store: &MentionStore, kept: Option<&[u32]>) -> Result<Aggregation> {
    if store.is_empty() {
        return Err(DistillError::EmptyStore);
    }
    let mask = match kept {
        Some(kept) => {
            let mut mask = vec![false; store.len()];
            for &r in kept {
                *mask
                    .get_mut(r as usize)
                    .ok_or(DistillError::InvalidKept(r))? = true;
            }
            Some(mask)
        }
        None => None,
    };
    let mut table = ConceptEmbeddingTable::new(store.dim(), store.vocab().clone())?;
    let mut fallbacks = Vec::new();
    for c in store.vocab().ids() {
        let mentions = store.mentions_of(c)?;
        if mentions.is_empty() {
            continue;
        }
        let selected: Vec<u32> = match &mask {
            Some(m) => mentions
                .iter()
                .copied()
                .filter(|&r| m[r as usize])
                .collect(),
            None => mentions.to_vec(),
        };
        let v = if selected.is_empty() {
            fallbacks.push(c);
            mean_of(store, mentions.iter().copied())
        } else {
            mean_of(store, selected.into_iter())
        };
        table.insert(c, &v)?;
    }
    if !fallbacks.is_empty() {
        warn!(
            "{} concepts lost every mention to filtering; used their unfiltered mean",
            fallbacks.len()
        );
    }
    Ok(Aggregation { table, fallbacks })
}

/// Cosine histogram over [-1, 1] with equal-width bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub mean: f64,
    pub std: f64,
    pub samples: u64,
}

impl Histogram {
    pub fn bin_of(cosine: f64, bins: usize) -> usize {
        let b = ((cosine + 1.0) / 2.0 * bins as f64).floor();
        (b.max(0.0) as usize).min(bins - 1)
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let w = 2.0 / self.counts.len() as f64;
        (-1.0 + bin as f64 * w, -1.0 + (bin + 1) as f64 * w)
    }

    pub fn from_values(values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let mut counts = vec![0u64; bins];
        for &v in values {
            counts[Self::bin_of(v, bins)] += 1;
        }
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            counts,
            mean,
            std: var.sqrt(),
            samples: values.len() as u64,
        }
    }

    /// `bin_left<TAB>bin_right<TAB>count` rows preceded by summary comments.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "# samples={} mean={:.6} std={:.6}",
            self.samples, self.mean, self.std
        )
        .unwrap();
        for (i, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.edges(i);
            writeln!(s, "{lo:.4}\t{hi:.4}\t{c}").unwrap();
        }
        s
    }
}

/// Unordered pair `(i, j)`, `i < j`, at position `t` of the row-major upper
/// triangle of an `n x n` matrix.
fn triangle_pair(t: usize, n: usize) -> (usize, usize) {
    // rows before i hold i*n - i*(i+1)/2 entries
    let before = |i: usize| i * n - i * (i + 1) / 2;
    let tf = t as f64;
    let nf = n as f64;
    let mut i = ((2.0 * nf - 1.0 - ((2.0 * nf - 1.0).powi(2) - 8.0 * tf).max(0.0).sqrt()) / 2.0)
        .floor()
        .max(0.0) as usize;
    i = i.min(n - 2);
    while i > 0 && before(i) > t {
        i -= 1;
    }
    while i + 1 < n - 1 && before(i + 1) <= t {
        i += 1;
    }
    (i, i + 1 + t - before(i))
}

fn row_cosine(rows: &[Vec<f64>], norms: &[f64], i: usize, j: usize) -> f64 {
    cosine_from_parts(dot(&rows[i], &rows[j]), norms[i], norms[j])
}

/// Cosines of `samples` distinct concept pairs drawn without replacement;
/// every pair is used when `samples` covers them all.
pub fn anisotropy_histogram<R: Rng + ?Sized>(
    table: &ConceptEmbeddingTable,
    samples: usize,
    bins: usize,
    rng: &mut R,
) -> Result<Histogram> {
    let n = table.len();
    if n < 2 {
        return Err(DistillError::TooFewConcepts(n));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|r| table.row(r).iter().map(|&v| v as f64).collect())
        .collect();
    let norms: Vec<f64> = rows.iter().map(|r| dot(r, r).sqrt()).collect();
    let total = n * (n - 1) / 2;
    let picks: Vec<usize> = if samples >= total {
        (0..total).collect()
    } else {
        let mut p = rand::seq::index::sample(rng, total, samples).into_vec();
        p.sort_unstable();
        p
    };
    let values: Vec<f64> = picks
        .par_iter()
        .map(|&t| {
            let (i, j) = triangle_pair(t, n);
            row_cosine(&rows, &norms, i, j)
        })
        .collect();
    Ok(Histogram::from_values(&values, bins))
}

/// Mention pairs `(i, j)` where `j` is among the `top_in` nearest neighbours
/// of `i` in `tuned` but not among its `top_out` nearest in `base`.
pub fn neighbor_shift(
    base: &MentionStore,
    tuned: &MentionStore,
    top_in: usize,
    top_out: usize,
) -> Result<Vec<(u32, u32)>> {
    if !base.same_identities(tuned) {
        return Err(DistillError::IdentityMismatch);
    }
    let near = SimIndex::new(tuned).knn_all(top_in)?;
    let far = SimIndex::new(base).knn_all(top_out)?;
    Ok(near
        .par_iter()
        .zip(far.par_iter())
        .flat_map_iter(|(n, f)| {
            let mut outside: Vec<u32> = f.indices().collect();
            outside.sort_unstable();
            n.indices()
                .filter(move |j| outside.binary_search(j).is_err())
                .map(|j| (n.query, j))
                .collect::<Vec<_>>()
        })
        .collect())
}

/// Top `k` other concepts by cosine, ties by ascending concept id.
pub fn concept_neighbors(
    table: &ConceptEmbeddingTable,
    word: &str,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let query = table
        .vocab()
        .id(word)
        .and_then(|c| table.row_of(c))
        .ok_or_else(|| DistillError::UnknownWord(word.to_string()))?;
    let q: Vec<f64> = table.row(query).iter().map(|&v| v as f64).collect();
    let qn = dot(&q, &q).sqrt();
    let mut scored: Vec<(ConceptId, f64)> = table
        .iter()
        .enumerate()
        .filter(|&(r, _)| r != query)
        .map(|(_, (c, v))| {
            let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            (c, cosine_from_parts(dot(&q, &v), qn, dot(&v, &v).sqrt()))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .map(|(c, s)| (table.vocab().word(c).unwrap_or_default().to_string(), s))
        .collect())
}

/// `word v1 v2 ... vm`, one concept per line in row order.
pub fn write_text<W: Write>(table: &ConceptEmbeddingTable, mut out: W) -> Result<()> {
    for (c, v) in table.iter() {
        let word = table.vocab().word(c).unwrap_or_default();
        write!(out, "{word}")?;
        for x in v {
            write!(out, " {x}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Parses the text format; the vocabulary is the file's words in order.
pub fn read_text<R: BufRead>(input: R) -> Result<ConceptEmbeddingTable> {
    let mut words = Vec::new();
    let mut vectors: Vec<Vec<f32>> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().unwrap().to_string();
        let v = parts
            .map(|p| p.parse::<f32>())
            .collect::<std::result::Result<Vec<f32>, _>>()
            .map_err(|e| DistillError::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
        if v.is_empty() || vectors.first().is_some_and(|f| f.len() != v.len()) {
            return Err(DistillError::Parse {
                line: line_no,
                msg: "inconsistent vector length".into(),
            });
        }
        words.push(word);
        vectors.push(v);
    }
    let dim = vectors.first().map_or(1, Vec::len);
    let vocab = Vocabulary::from_words(words)?;
    let mut table = ConceptEmbeddingTable::new(dim, vocab)?;
    for (i, v) in vectors.iter().enumerate() {
        table.insert(ConceptId(i as u32), v)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::StoreBuilder;
    use crate::synth::random_store;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table_from(rows: &[&[f32]]) -> ConceptEmbeddingTable {
        let vocab = Vocabulary::from_words((0..rows.len()).map(|i| format!("w{i}"))).unwrap();
        let mut t = ConceptEmbeddingTable::new(rows[0].len(), vocab).unwrap();
        for (i, r) in rows.iter().enumerate() {
            t.insert(ConceptId(i as u32), r).unwrap();
        }
        t
    }

    #[test]
    fn two_mentions_average() {
        let vocab = Vocabulary::from_words(["a"]).unwrap();
        let mut b = StoreBuilder::new(2, vocab).unwrap();
        b.push(ConceptId(0), 0, &[1.0, 0.0]).unwrap();
        b.push(ConceptId(0), 1, &[0.0, 1.0]).unwrap();
        let agg = aggregate(&b.build(), None).unwrap();
        assert_eq!(agg.table.get(ConceptId(0)).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn single_mentions_are_copied() {
        let vocab = Vocabulary::from_words(["a", "b"]).unwrap();
        let mut b = StoreBuilder::new(3, vocab).unwrap();
        b.push(ConceptId(1), 0, &[0.1, 0.2, 0.3]).unwrap();
        b.push(ConceptId(0), 0, &[-4.0, 5.5, 1e-7]).unwrap();
        let agg = aggregate(&b.build(), None).unwrap();
        assert_eq!(agg.table.get(ConceptId(0)).unwrap(), &[-4.0, 5.5, 1e-7]);
        assert_eq!(agg.table.get(ConceptId(1)).unwrap(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn filtered_out_concept_falls_back() {
        let vocab = Vocabulary::from_words(["a", "b"]).unwrap();
        let mut b = StoreBuilder::new(1, vocab).unwrap();
        b.push(ConceptId(0), 0, &[1.0]).unwrap();
        b.push(ConceptId(0), 1, &[3.0]).unwrap();
        b.push(ConceptId(1), 2, &[5.0]).unwrap();
        b.push(ConceptId(1), 3, &[7.0]).unwrap();
        let agg = aggregate(&b.build(), Some(&[2])).unwrap();
        assert_eq!(agg.fallbacks, vec![ConceptId(0)]);
        assert_eq!(agg.table.get(ConceptId(0)).unwrap(), &[2.0]);
        assert_eq!(agg.table.get(ConceptId(1)).unwrap(), &[5.0]);
    }

    #[test]
    fn orthogonal_and_identical_histograms() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ortho = table_from(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let h = anisotropy_histogram(&ortho, 100, 50, &mut rng).unwrap();
        assert_eq!(h.samples, 3);
        assert_eq!(h.counts[25], 3);
        assert_eq!(h.mean, 0.0);
        let same = table_from(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        let h = anisotropy_histogram(&same, 6, 50, &mut rng).unwrap();
        assert_eq!(h.counts[49], 6);
        assert!((h.mean - 1.0).abs() < 1e-12);
        assert!(h.to_text().lines().count() == 51);
    }

    #[test]
    fn triangle_indexing_covers_all_pairs() {
        for n in 2..30 {
            let mut t = 0;
            for i in 0..n {
                for j in i + 1..n {
                    assert_eq!(triangle_pair(t, n), (i, j));
                    t += 1;
                }
            }
        }
    }

    #[test]
    fn sampled_histogram_uses_requested_count() {
        let store = random_store(60, 5, 40, 2);
        let table = aggregate(&store, None).unwrap().table;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = anisotropy_histogram(&table, 100, 20, &mut rng).unwrap();
        assert_eq!(h.samples, 100);
        assert_eq!(h.counts.iter().sum::<u64>(), 100);
        assert!(matches!(
            anisotropy_histogram(&table_from(&[&[1.0]]), 10, 10, &mut rng),
            Err(DistillError::TooFewConcepts(1))
        ));
    }

    #[test]
    fn identical_stores_have_no_shift() {
        let store = random_store(40, 6, 5, 1);
        assert!(neighbor_shift(&store, &store, 5, 10).unwrap().is_empty());
        let other = random_store(41, 6, 5, 1);
        assert!(matches!(
            neighbor_shift(&store, &other, 5, 10),
            Err(DistillError::IdentityMismatch)
        ));
    }

    #[test]
    fn concept_neighbors_excludes_query_and_finds_duplicate() {
        let t = table_from(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[1.0, 1.0]]);
        let n = concept_neighbors(&t, "w0", 1).unwrap();
        assert_eq!(n, vec![("w2".to_string(), 1.0)]);
        let all = concept_neighbors(&t, "w0", 10).unwrap();
        assert_eq!(all.len(), 3);
        assert!(all.iter().all(|(w, _)| w != "w0"));
        assert!(matches!(
            concept_neighbors(&t, "zzz", 1),
            Err(DistillError::UnknownWord(_))
        ));
    }

    #[test]
    fn text_round_trip_is_exact() {
        let t = table_from(&[&[0.1, -2.5e-8, 3.0], &[f32::MAX, f32::MIN_POSITIVE, -0.0]]);
        let mut buf = Vec::new();
        write_text(&t, &mut buf).unwrap();
        let back = read_text(buf.as_slice()).unwrap();
        for r in 0..2 {
            let a: Vec<u32> = t.row(r).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.row(r).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert!(read_text("a 1 2\nb 1\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn mean_is_contained_and_order_free(seed in any::<u64>(), n in 1usize..60) {
            let store = random_store(n, 4, 6, seed);
            let table = aggregate(&store, None).unwrap().table;
            for (c, v) in table.iter() {
                let ms = store.mentions_of(c).unwrap();
                for (d, &vd) in v.iter().enumerate() {
                    let lo = ms.iter().map(|&r| store.vector(r)[d]).fold(f32::INFINITY, f32::min);
                    let hi = ms.iter().map(|&r| store.vector(r)[d]).fold(f32::NEG_INFINITY, f32::max);
                    prop_assert!(lo <= vd && vd <= hi);
                }
            }
            let mut rev = StoreBuilder::new(4, store.vocab().clone()).unwrap();
            for i in (0..n as u32).rev() {
                rev.push(store.concept(i), store.sentence(i), store.vector(i)).unwrap();
            }
            let table2 = aggregate(&rev.build(), None).unwrap().table;
            for (c, v) in table.iter() {
                let w = table2.get(c).unwrap();
                for d in 0..4 {
                    prop_assert!((v[d] - w[d]).abs() <= 1e-6);
                }
            }
        }
    }
}
