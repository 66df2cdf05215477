//! Regenerates `tests/data/toy.cmvs` and the brute-force golden pair file
//! `tests/data/toy_k5_theta0.5.pairs` used by the CLI tests.
//!
//! Run with `cargo run -p condist-cli --example make_golden`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use condist::mining::{write_pairs, Pair, PairSet, PairSource, Threshold};
use condist::store::{write_store, MentionStore};
use condist::synth::toy_store;

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn neighbour_concepts(store: &MentionStore, q: u32, k: usize) -> BTreeMap<u32, u32> {
    let mut all: Vec<(u32, f64)> = (0..store.len() as u32)
        .filter(|&j| j != q)
        .map(|j| (j, cosine(store.vector(q), store.vector(j))))
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut counts = BTreeMap::new();
    for &(j, _) in &all[..k] {
        *counts.entry(store.concept(j).0).or_insert(0) += 1;
    }
    counts
}

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let store = toy_store(7);
    write_store(&store, dir.join("toy.cmvs")).unwrap();

    let (k, num, den) = (5, 1u32, 2u32);
    let profiles: Vec<_> = (0..store.len() as u32)
        .map(|q| neighbour_concepts(&store, q, k))
        .collect();
    let mut pairs = Vec::new();
    for x in 0..store.len() as u32 {
        for y in x + 1..store.len() as u32 {
            if store.sentence(x) == store.sentence(y) {
                continue;
            }
            let (px, py) = (&profiles[x as usize], &profiles[y as usize]);
            let (mut shared, mut union) = (0, 0);
            let concepts: BTreeSet<&u32> = px.keys().chain(py.keys()).collect();
            for c in concepts {
                let a = px.get(c).copied().unwrap_or(0);
                let b = py.get(c).copied().unwrap_or(0);
                shared += a.min(b);
                union += a.max(b);
            }
            if shared * den >= num * union {
                pairs.push(Pair {
                    a: x,
                    b: y,
                    group: None,
                });
            }
        }
    }
    let set = PairSet::from_pairs(
        pairs,
        PairSource {
            k: k as u32,
            theta: Some(Threshold::new(num, den).unwrap()),
        },
    );
    write_pairs(&set, dir.join("toy_k5_theta0.5.pairs")).unwrap();
    println!("{} mentions, {} pairs", store.len(), set.len());
}
