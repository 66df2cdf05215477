use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{EvalError, Result};
use crate::store::{ConceptEmbeddingTable, ConceptId};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub restarts: usize,
    pub max_iter: usize,
    /// Relative inertia improvement below which iteration stops.
    pub tol: f64,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iter: 300,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansRun {
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
}

impl KMeansRun {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seed of restart `r`; restarts are independent of each other.
pub fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed.wrapping_add((restart as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Greedy distance-weighted seeding: the first center is uniform, each next
/// one is drawn with probability proportional to its squared distance from
/// the nearest chosen center.
pub fn kmeans_pp_init<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if k == 0 || k > points.len() {
        return Err(EvalError::BadK {
            k,
            points: points.len(),
        });
    }
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = points.len() - 1;
            for (i, d) in nearest.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    Ok(centers)
}

/// Lloyd iterations from the given centers. Ties go to the lowest center
/// index; a center that loses all points stays where it was.
pub fn kmeans_from_centers(
    points: &[Vec<f64>],
    mut centers: Vec<Vec<f64>>,
    max_iter: usize,
    tol: f64,
) -> KMeansRun {
    let k = centers.len();
    let dim = centers.first().map_or(0, Vec::len);
    let mut assignments: Vec<usize> = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut inertia = 0.0;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (best, d) = centers
                .iter()
                .enumerate()
                .map(|(j, c)| (j, sq_dist(p, c)))
                .fold(
                    (0, f64::INFINITY),
                    |acc, x| if x.1 < acc.1 { x } else { acc },
                );
            if *a != best {
                *a = best;
                changed = true;
            }
            inertia += d;
        }
        let prev = history.last().copied();
        history.push(inertia);
        if !changed {
            break;
        }
        if let Some(prev) = prev {
            if prev - inertia <= tol * prev {
                break;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    KMeansRun {
        assignments,
        centers,
        inertia_history: history,
    }
}

/// Fraction of points whose cluster's majority category is their own.
pub fn purity(assignments: &[usize], gold: &[u32]) -> f64 {
    if assignments.is_empty() {
        return 0.0;
    }
    let mut table: BTreeMap<(usize, u32), usize> = BTreeMap::new();
    for (&a, &g) in assignments.iter().zip(gold) {
        *table.entry((a, g)).or_default() += 1;
    }
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for ((a, _), n) in table {
        let b = best.entry(a).or_default();
        *b = (*b).max(n);
    }
    best.values().sum::<usize>() as f64 / assignments.len() as f64
}

#[derive(Debug, Clone)]
pub struct ClusterReport {
    pub purities: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub runs: Vec<KMeansRun>,
    /// Gold concepts missing from the table.
    pub excluded: usize,
    pub points: usize,
}

impl ClusterReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("restart\tpurity\tinertia\n");
        for (i, (p, r)) in self.purities.iter().zip(&self.runs).enumerate() {
            writeln!(s, "{i}\t{p:.4}\t{:.6}", r.inertia()).unwrap();
        }
        writeln!(s, "MEAN\t{:.4}\t\nSTD\t{:.4}\t", self.mean, self.std).unwrap();
        s
    }
}

/// k-means over the embeddings of the gold concepts, repeated with seeded
/// restarts; reports purity per restart and its mean.
pub fn kmeans_purity(
    table: &ConceptEmbeddingTable,
    gold: &[(ConceptId, u32)],
    k: usize,
    cfg: &ClusterConfig,
) -> Result<ClusterReport> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut excluded = 0;
    for &(c, g) in gold {
        match table.get(c) {
            Some(v) => {
                points.push(v.iter().map(|&x| x as f64).collect::<Vec<f64>>());
                labels.push(g);
            }
            None => excluded += 1,
        }
    }
    if points.is_empty() {
        return Err(EvalError::EmptyTable);
    }
    if k == 0 || k > points.len() {
        return Err(EvalError::BadK {
            k,
            points: points.len(),
        });
    }
    let runs: Vec<KMeansRun> = (0..cfg.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(cfg.seed, r));
            let init = kmeans_pp_init(&points, k, &mut rng)?;
            Ok(kmeans_from_centers(&points, init, cfg.max_iter, cfg.tol))
        })
        .collect::<Result<_>>()?;
    let purities: Vec<f64> = runs
        .iter()
        .map(|r| purity(&r.assignments, &labels))
        .collect();
    let n = purities.len() as f64;
    let mean = purities.iter().sum::<f64>() / n;
    let std = (purities
        .iter()
        .map(|p| (p - mean) * (p - mean))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(ClusterReport {
        purities,
        mean,
        std,
        runs,
        excluded,
        points: points.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Vocabulary;
    use proptest::prelude::*;
    use rand::Rng;

    fn table(rows: &[Vec<f32>]) -> ConceptEmbeddingTable {
        let vocab = Vocabulary::from_words((0..rows.len()).map(|i| format!("c{i}"))).unwrap();
        let mut t = ConceptEmbeddingTable::new(rows[0].len(), vocab).unwrap();
        for (i, r) in rows.iter().enumerate() {
            t.insert(ConceptId(i as u32), r).unwrap();
        }
        t
    }

    #[test]
    fn identical_clusters_give_perfect_purity() {
        let mut rows = Vec::new();
        let mut gold = Vec::new();
        for (g, center) in [[0.0f32, 0.0], [10.0, 0.0], [0.0, 10.0]].iter().enumerate() {
            for _ in 0..5 {
                gold.push((ConceptId(rows.len() as u32), g as u32));
                rows.push(center.to_vec());
            }
        }
        let report = kmeans_purity(&table(&rows), &gold, 3, &ClusterConfig::default()).unwrap();
        assert_eq!(report.purities, vec![1.0; 10]);
        assert_eq!(report.mean, 1.0);
    }

    #[test]
    fn single_cluster_purity_is_majority_share() {
        let rows: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32, 1.0]).collect();
        let gold: Vec<(ConceptId, u32)> = (0..10)
            .map(|i| (ConceptId(i), if i < 7 { 0 } else { 1 }))
            .collect();
        let report = kmeans_purity(&table(&rows), &gold, 1, &ClusterConfig::default()).unwrap();
        assert!(report.purities.iter().all(|&p| (p - 0.7).abs() < 1e-12));
        assert!(matches!(
            kmeans_purity(&table(&rows), &gold, 11, &ClusterConfig::default()),
            Err(EvalError::BadK { .. })
        ));
    }

    #[test]
    fn purity_ignores_label_names() {
        let a = [0, 0, 1, 1, 2, 2];
        let b = [2, 2, 0, 0, 1, 1];
        let gold = [5, 5, 6, 7, 7, 7];
        assert_eq!(purity(&a, &gold), purity(&b, &gold));
        assert!((purity(&a, &gold) - 5.0 / 6.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn inertia_never_increases(seed in any::<u64>(), n in 2usize..60, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let points: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
            let k = k.min(n);
            let init = kmeans_pp_init(&points, k, &mut rng).unwrap();
            let run = kmeans_from_centers(&points, init, 300, 0.0);
            for w in run.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }
    }
}
