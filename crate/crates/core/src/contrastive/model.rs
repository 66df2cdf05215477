use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ContrastiveError, Result};
use crate::binfmt::{Decoder, Encoder, FormatError};
use crate::store::MentionStore;

pub const MODEL_MAGIC: &[u8; 4] = b"CPRJ";
pub const MODEL_VERSION: u32 = 1;

/// Linear map from `n`-dimensional mention vectors to `m` dimensions.
/// Weights are row-major `m x n`, kept in 64-bit; files store 32-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    m: usize,
    n: usize,
    weights: Vec<f64>,
}

impl ProjectionModel {
    pub fn from_weights(m: usize, n: usize, weights: Vec<f64>) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(ContrastiveError::Config(
                "projection dimensions must be positive".into(),
            ));
        }
        if weights.len() != m * n {
            return Err(ContrastiveError::DimMismatch {
                expected: m * n,
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(ContrastiveError::Config(
                "non-finite projection weight".into(),
            ));
        }
        Ok(Self { m, n, weights })
    }

    /// Uniform in +-sqrt(6 / (m + n)).
    pub fn init(m: usize, n: usize, seed: u64) -> Result<Self> {
        let bound = (6.0 / (m + n) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..m * n)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self::from_weights(m, n, weights)
    }

    pub fn zeros(m: usize, n: usize) -> Result<Self> {
        Self::from_weights(m, n, vec![0.0; m * n])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        Self::from_weights(n, n, w)
    }

    pub fn scaled(&self, gamma: f64) -> Self {
        Self {
            m: self.m,
            n: self.n,
            weights: self.weights.iter().map(|w| w * gamma).collect(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.m
    }

    pub fn input_dim(&self) -> usize {
        self.n
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.n)
            .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
            .collect()
    }

    pub fn apply_f32(&self, x: &[f32]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.n)
            .map(|row| row.iter().zip(x).map(|(w, &v)| w * v as f64).sum())
            .collect()
    }

    pub fn encode<W: Write>(&self, out: W) -> Result<W> {
        let mut enc = Encoder::new(out);
        enc.raw(MODEL_MAGIC)?;
        enc.u32(MODEL_VERSION)?;
        enc.u32(self.m as u32)?;
        enc.u32(self.n as u32)?;
        for &w in &self.weights {
            enc.f32(w as f32)?;
        }
        Ok(enc.finish()?)
    }

    pub fn decode<R: Read>(input: R) -> Result<Self> {
        let mut dec = Decoder::new(input);
        dec.magic(MODEL_MAGIC)?;
        dec.version(MODEL_VERSION)?;
        let m = dec.u32()? as usize;
        let n = dec.u32()? as usize;
        if m == 0 || n == 0 {
            return Err(FormatError::Invalid("zero projection dimension".into()).into());
        }
        let mut buf = vec![0f32; n];
        let mut weights = Vec::with_capacity(m * n);
        for r in 0..m {
            dec.finite_f32s(&mut buf, r as u64)?;
            weights.extend(buf.iter().map(|&v| v as f64));
        }
        dec.finish()?;
        Self::from_weights(m, n, weights)
    }
}

pub fn write_model(model: &ProjectionModel, path: impl AsRef<Path>) -> Result<()> {
    model.encode(BufWriter::new(File::create(path)?))?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ProjectionModel> {
    ProjectionModel::decode(BufReader::new(File::open(path)?))
}

/// Replaces every record's vector by its projection; identities are kept.
pub fn project_store(store: &MentionStore, model: &ProjectionModel) -> Result<MentionStore> {
    if model.input_dim() != store.dim() {
        return Err(ContrastiveError::DimMismatch {
            expected: store.dim(),
            found: model.input_dim(),
        });
    }
    let mut out = Vec::with_capacity(store.len() * model.output_dim());
    for i in 0..store.len() as u32 {
        out.extend(
            model
                .apply_f32(store.vector(i))
                .into_iter()
                .map(|v| v as f32),
        );
    }
    Ok(store.with_vectors(model.output_dim(), out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::random_store;
    use proptest::prelude::*;

    #[test]
    fn identity_leaves_store_unchanged() {
        let store = random_store(12, 5, 3, 4);
        let id = ProjectionModel::identity(5).unwrap();
        assert_eq!(project_store(&store, &id).unwrap(), store);
    }

    #[test]
    fn zero_projection_gives_zero_vectors() {
        let store = random_store(6, 5, 3, 4);
        let z = ProjectionModel::zeros(3, 5).unwrap();
        let p = project_store(&store, &z).unwrap();
        assert_eq!(p.dim(), 3);
        assert!(p.raw_vectors().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_projection_matches_matvec() {
        let store = random_store(20, 7, 3, 8);
        let model = ProjectionModel::init(4, 7, 11).unwrap();
        let p = project_store(&store, &model).unwrap();
        for i in 0..20u32 {
            let x = store.vector(i);
            for r in 0..4 {
                let mut acc = 0.0f64;
                for (c, &xc) in x.iter().enumerate() {
                    acc += model.weights()[r * 7 + c] * xc as f64;
                }
                assert!((p.vector(i)[r] as f64 - acc).abs() < 1e-6);
            }
        }
        assert!(matches!(
            project_store(&random_store(3, 6, 1, 1), &model),
            Err(ContrastiveError::DimMismatch { .. })
        ));
    }

    #[test]
    fn init_respects_bound_and_seed() {
        let a = ProjectionModel::init(8, 24, 3).unwrap();
        let bound = (6.0f64 / 32.0).sqrt();
        assert!(a.weights().iter().all(|w| w.abs() <= bound));
        assert_eq!(a, ProjectionModel::init(8, 24, 3).unwrap());
        assert_ne!(a, ProjectionModel::init(8, 24, 4).unwrap());
    }

    #[test]
    fn file_round_trip() {
        let model =
            ProjectionModel::from_weights(2, 3, vec![0.5, -1.25, 3.0, 0.0, 1e-3f32 as f64, 7.0])
                .unwrap();
        let bytes = model.encode(Vec::new()).unwrap();
        assert_eq!(bytes.len(), 16 + 6 * 4);
        let back = ProjectionModel::decode(bytes.as_slice()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.encode(Vec::new()).unwrap(), bytes);
    }

    proptest! {
        #[test]
        fn projection_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0) {
            let model = ProjectionModel::init(3, 4, seed).unwrap();
            let v = [0.3, -1.2, 0.7, 2.0];
            let w = [1.1, 0.4, -0.6, 0.05];
            let mix: Vec<f64> = v.iter().zip(&w).map(|(a, b)| alpha * a + b).collect();
            let lhs = model.apply(&mix);
            let pv = model.apply(&v);
            let pw = model.apply(&w);
            for r in 0..3 {
                prop_assert!((lhs[r] - (alpha * pv[r] + pw[r])).abs() < 1e-6);
            }
        }
    }
}
