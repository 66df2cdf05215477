use super::{ContrastiveError, ProjectionModel, Result};
use crate::simsearch::{cosine_from_parts, dot};
use crate::store::MentionStore;

/// Batch members (record indices) with their in-batch positive positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    elements: Vec<u32>,
    positives: Vec<Vec<usize>>,
}

impl Batch {
    /// Checks that positive sets are symmetric, in range and never contain
    /// the element itself. Positive lists are sorted.
    pub fn new(elements: Vec<u32>, mut positives: Vec<Vec<usize>>) -> Result<Self> {
        if elements.len() != positives.len() {
            return Err(ContrastiveError::InvalidBatch(
                "one positive set per element required".into(),
            ));
        }
        let n = elements.len();
        for (i, ps) in positives.iter_mut().enumerate() {
            ps.sort_unstable();
            ps.dedup();
            if ps.iter().any(|&j| j >= n || j == i) {
                return Err(ContrastiveError::InvalidBatch(format!(
                    "bad positive set for element {i}"
                )));
            }
        }
        for (i, ps) in positives.iter().enumerate() {
            for &j in ps {
                if positives[j].binary_search(&i).is_err() {
                    return Err(ContrastiveError::InvalidBatch(format!(
                        "positives not symmetric between {i} and {j}"
                    )));
                }
            }
        }
        Ok(Self {
            elements,
            positives,
        })
    }

    pub fn elements(&self) -> &[u32] {
        &self.elements
    }

    pub fn positives(&self) -> &[Vec<usize>] {
        &self.positives
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn has_anchor(&self) -> bool {
        self.positives.iter().any(|p| !p.is_empty())
    }
}

/// Loss and its derivative with respect to the similarity matrix.
///
/// `sims` is `n x n` row-major and symmetric. Row `i` of the returned
/// gradient holds dL/ds_ij as seen from anchor `i` only; the caller
/// symmetrises.
fn loss_from_similarities(
    sims: &[f64],
    batch: &Batch,
    tau: f64,
    want_grad: bool,
) -> (f64, Vec<f64>) {
    let n = batch.len();
    let mut loss = 0.0;
    let mut grad = if want_grad {
        vec![0.0; n * n]
    } else {
        Vec::new()
    };
    let mut logits = vec![0.0; n];
    for (i, pos) in batch.positives.iter().enumerate() {
        if pos.is_empty() {
            continue;
        }
        let row = &sims[i * n..(i + 1) * n];
        let mut max = f64::NEG_INFINITY;
        for j in (0..n).filter(|&j| j != i) {
            logits[j] = row[j] / tau;
            max = max.max(logits[j]);
        }
        let sum: f64 = (0..n)
            .filter(|&j| j != i)
            .map(|j| (logits[j] - max).exp())
            .sum();
        let lse = max + sum.ln();
        let inv = 1.0 / pos.len() as f64;
        loss -= inv * pos.iter().map(|&p| logits[p] - lse).sum::<f64>();
        if want_grad {
            let g = &mut grad[i * n..(i + 1) * n];
            for j in (0..n).filter(|&j| j != i) {
                g[j] = (logits[j] - lse).exp() / tau;
            }
            for &p in pos {
                g[p] -= inv / tau;
            }
        }
    }
    (loss, grad)
}

fn check(batch: &Batch, tau: f64) -> Result<()> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(ContrastiveError::BadTemperature);
    }
    if batch.len() < 2 {
        return Err(ContrastiveError::BatchTooSmall(batch.len()));
    }
    if !batch.has_anchor() {
        return Err(ContrastiveError::NoPositives);
    }
    Ok(())
}

/// Supervised contrastive loss over cosine similarities.
///
/// For every anchor `i` with a non-empty positive set `P(i)`:
/// `-1/|P(i)| * sum_{p in P(i)} log(exp(cos_ip / tau) / sum_{j != i} exp(cos_ij / tau))`.
/// Anchors without positives contribute nothing. `embeddings[i]` belongs to
/// `batch.elements()[i]`.
pub fn sup_con_loss(embeddings: &[Vec<f64>], batch: &Batch, tau: f64) -> Result<f64> {
    check(batch, tau)?;
    if embeddings.len() != batch.len() {
        return Err(ContrastiveError::DimMismatch {
            expected: batch.len(),
            found: embeddings.len(),
        });
    }
    let n = batch.len();
    let norms: Vec<f64> = embeddings.iter().map(|e| dot(e, e).sqrt()).collect();
    let mut sims = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s = cosine_from_parts(dot(&embeddings[i], &embeddings[j]), norms[i], norms[j]);
            sims[i * n + j] = s;
            sims[j * n + i] = s;
        }
    }
    Ok(loss_from_similarities(&sims, batch, tau, false).0)
}

/// Loss of the projected batch and its exact gradient with respect to the
/// projection matrix (row-major `m x n`).
pub fn loss_and_gradient(
    store: &MentionStore,
    batch: &Batch,
    model: &ProjectionModel,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    check(batch, tau)?;
    if model.input_dim() != store.dim() {
        return Err(ContrastiveError::DimMismatch {
            expected: store.dim(),
            found: model.input_dim(),
        });
    }
    let (m, dim) = (model.output_dim(), model.input_dim());
    let b = batch.len();

    let inputs: Vec<Vec<f64>> = batch
        .elements
        .iter()
        .map(|&r| store.vector(r).iter().map(|&x| x as f64).collect())
        .collect();
    let mut units = Vec::with_capacity(b);
    let mut norms = Vec::with_capacity(b);
    for (x, &r) in inputs.iter().zip(&batch.elements) {
        let z = model.apply(x);
        let norm = dot(&z, &z).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(ContrastiveError::ZeroNorm { record: r });
        }
        units.push(z.iter().map(|v| v / norm).collect::<Vec<f64>>());
        norms.push(norm);
    }

    let mut sims = vec![0.0; b * b];
    for i in 0..b {
        sims[i * b + i] = 1.0;
        for j in i + 1..b {
            let s = dot(&units[i], &units[j]);
            sims[i * b + j] = s;
            sims[j * b + i] = s;
        }
    }
    let (loss, g) = loss_from_similarities(&sims, batch, tau, true);

    let mut grad = vec![0.0; m * dim];
    let mut gu = vec![0.0; m];
    for i in 0..b {
        // dL/du_i = sum_j (G_ij + G_ji) u_j
        gu.iter_mut().for_each(|v| *v = 0.0);
        for j in (0..b).filter(|&j| j != i) {
            let w = g[i * b + j] + g[j * b + i];
            if w != 0.0 {
                for (acc, u) in gu.iter_mut().zip(&units[j]) {
                    *acc += w * u;
                }
            }
        }
        // through the normalisation: (I - u u^T) / |z|
        let along = dot(&gu, &units[i]);
        let x = &inputs[i];
        for r in 0..m {
            let gz = (gu[r] - along * units[i][r]) / norms[i];
            if gz != 0.0 {
                let row = &mut grad[r * dim..(r + 1) * dim];
                for (acc, xv) in row.iter_mut().zip(x) {
                    *acc += gz * xv;
                }
            }
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{ConceptId, StoreBuilder, Vocabulary};
    use crate::synth::random_store;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight transcription without the log-sum-exp shift.
    fn naive_loss(e: &[Vec<f64>], batch: &Batch, tau: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let n = e.len();
        let mut total = 0.0;
        for i in 0..n {
            let pos = &batch.positives()[i];
            if pos.is_empty() {
                continue;
            }
            let denom: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| (cos(&e[i], &e[j]) / tau).exp())
                .sum();
            let mut s = 0.0;
            for &p in pos {
                s += ((cos(&e[i], &e[p]) / tau).exp() / denom).ln();
            }
            total += -s / pos.len() as f64;
        }
        total
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Batch {
        let mut positives = vec![Vec::new(); n];
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(0.3) {
                    positives[i].push(j);
                    positives[j].push(i);
                }
            }
        }
        if positives.iter().all(|p| p.is_empty()) {
            positives[0].push(1);
            positives[1].push(0);
        }
        Batch::new((0..n as u32).collect(), positives).unwrap()
    }

    #[test]
    fn two_mutual_positives_have_zero_loss() {
        let batch = Batch::new(vec![0, 1], vec![vec![1], vec![0]]).unwrap();
        let e = vec![vec![1.0, 2.0], vec![-3.0, 0.5]];
        assert_eq!(sup_con_loss(&e, &batch, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_triple_closed_form() {
        let batch = Batch::new(vec![0, 1, 2], vec![vec![1], vec![0], vec![]]).unwrap();
        let e = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let loss = sup_con_loss(&e, &batch, 1.0).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn random_batch_matches_naive_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = random_batch(&mut rng, 8);
        let e: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let fast = sup_con_loss(&e, &batch, 0.05).unwrap();
        let slow = naive_loss(&e, &batch, 0.05);
        assert!(((fast - slow) / slow).abs() < 1e-10, "{fast} vs {slow}");
    }

    #[test]
    fn identical_embeddings_give_log_of_negatives() {
        let b = 5;
        let positives: Vec<Vec<usize>> =
            (0..b).map(|i| vec![(i + 1) % b, (i + b - 1) % b]).collect();
        let batch = Batch::new((0..b as u32).collect(), positives).unwrap();
        let e = vec![vec![0.3, -0.2, 0.9]; b];
        let loss = sup_con_loss(&e, &batch, 0.05).unwrap();
        let expected = b as f64 * ((b - 1) as f64).ln();
        assert!((loss - expected).abs() < 1e-9);
        assert!((naive_loss(&e, &batch, 0.05) - expected).abs() < 1e-9);
    }

    #[test]
    fn invalid_batches() {
        assert!(Batch::new(vec![0, 1], vec![vec![1], vec![]]).is_err());
        assert!(Batch::new(vec![0, 1], vec![vec![0], vec![]]).is_err());
        let lonely = Batch::new(vec![0, 1], vec![vec![], vec![]]).unwrap();
        assert!(matches!(
            sup_con_loss(&[vec![1.0], vec![1.0]], &lonely, 1.0),
            Err(ContrastiveError::NoPositives)
        ));
        let single = Batch::new(vec![0], vec![vec![]]).unwrap();
        assert!(matches!(
            sup_con_loss(&[vec![1.0]], &single, 1.0),
            Err(ContrastiveError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn zero_projection_aborts() {
        let store = random_store(4, 3, 2, 1);
        let model = ProjectionModel::zeros(2, 3).unwrap();
        let batch = Batch::new(vec![0, 1], vec![vec![1], vec![0]]).unwrap();
        assert!(matches!(
            loss_and_gradient(&store, &batch, &model, 0.1),
            Err(ContrastiveError::ZeroNorm { record: 0 })
        ));
    }

    #[test]
    fn scaling_projection_scales_gradient_inversely() {
        let store = random_store(6, 4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = random_batch(&mut rng, 6);
        let model = ProjectionModel::init(3, 4, 1).unwrap();
        let scaled = model.scaled(4.0);
        let (l1, g1) = loss_and_gradient(&store, &batch, &model, 0.1).unwrap();
        let (l2, g2) = loss_and_gradient(&store, &batch, &scaled, 0.1).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a / 4.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn numerator_appears_in_denominator() {
        let vocab = Vocabulary::from_words(["a"]).unwrap();
        let mut b = StoreBuilder::new(2, vocab).unwrap();
        b.push(ConceptId(0), 0, &[1.0, 0.0]).unwrap();
        b.push(ConceptId(0), 1, &[1.0, 0.0]).unwrap();
        b.push(ConceptId(0), 2, &[-1.0, 0.0]).unwrap();
        let store = b.build();
        let batch = Batch::new(vec![0, 1, 2], vec![vec![1], vec![0], vec![]]).unwrap();
        let id = ProjectionModel::identity(2).unwrap();
        let (loss, _) = loss_and_gradient(&store, &batch, &id, 1.0).unwrap();
        assert!(loss > 0.0);
        let expected = 2.0 * (1.0 + (-2.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn loss_is_scale_invariant_and_non_negative(seed in any::<u64>(), n in 2usize..10, gamma in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = random_batch(&mut rng, n);
            let e: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let scaled: Vec<Vec<f64>> = e.iter().map(|v| v.iter().map(|x| x * gamma).collect()).collect();
            let a = sup_con_loss(&e, &batch, 0.1).unwrap();
            let b = sup_con_loss(&scaled, &batch, 0.1).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }
    }
}
