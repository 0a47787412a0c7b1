//! Independent reference implementations used by the integration tests.
//! Nothing here calls the code paths it is used to check.

#![allow(dead_code)]

use std::collections::BTreeSet;

use nemb::evaluation::{EmbeddingMatrix, GroupedDataset};
use nemb::model::{backward, forward_mlm, mlm_loss, LayerSelection, ModelConfig, ParameterStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Literal transcription of the input-construction pseudocode: for each
/// blueprint, for each shift, copy the tokens and mask every position whose
/// offset `(j - s) % P` (Python modulo) is at least `k`.
pub fn masking_pseudocode(
    blueprints: &[(usize, usize)],
    tokens: &[u32],
    mask: u32,
) -> Vec<(Vec<u32>, Vec<Option<u32>>)> {
    let mut inputs_and_labels = Vec::new();
    for &(k, m) in blueprints {
        let p = k + m;
        let s_max = p.min(tokens.len());
        for s in 0..s_max {
            let mut input = tokens.to_vec();
            let mut labels = vec![None; tokens.len()];
            for j in 0..tokens.len() {
                let r = ((j as i64 - s as i64) % p as i64 + p as i64) % p as i64;
                if r >= k as i64 {
                    labels[j] = Some(input[j]);
                    input[j] = mask;
                }
            }
            inputs_and_labels.push((input, labels));
        }
    }
    inputs_and_labels
}

/// Mean MLM loss of one sequence, evaluated through the public forward pass.
pub fn loss_at(params: &ParameterStore, ids: &[u32], labels: &[Option<u32>]) -> f64 {
    mlm_loss(&forward_mlm(params, ids).unwrap(), labels).unwrap()
}

/// Central finite difference of the loss with respect to one coordinate.
pub fn central_difference(
    params: &mut ParameterStore,
    name: &str,
    index: usize,
    h: f64,
    ids: &[u32],
    labels: &[Option<u32>],
) -> f64 {
    let original = params.get(name).unwrap().as_slice().unwrap()[index];
    params.get_mut(name).unwrap().as_slice_mut().unwrap()[index] = original + h;
    let plus = loss_at(params, ids, labels);
    params.get_mut(name).unwrap().as_slice_mut().unwrap()[index] = original - h;
    let minus = loss_at(params, ids, labels);
    params.get_mut(name).unwrap().as_slice_mut().unwrap()[index] = original;
    (plus - minus) / (2.0 * h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub total: u64,
    pub broken: u64,
    pub same_avg: f64,
    pub diff_avg: f64,
    pub error_global: f64,
    pub error_per_anchor_avg: f64,
    pub broken_set: BTreeSet<(String, String, String)>,
}

fn sim(e: &EmbeddingMatrix, a: &str, b: &str) -> f64 {
    let (x, y) = (e.get(a).unwrap(), e.get(b).unwrap());
    let mut s = 0.0;
    for i in 0..x.len() {
        s += x[i] * y[i];
    }
    s
}

/// O(n^3) enumeration of every (A, B, C) triplet.
pub fn brute_force(e: &EmbeddingMatrix, ds: &GroupedDataset) -> OracleReport {
    let items = ds.items();
    let mut total = 0u64;
    let mut broken = 0u64;
    let mut same_sum = 0.0;
    let mut diff_sum = 0.0;
    let mut per_anchor = Vec::new();
    let mut set = BTreeSet::new();
    for a in items.iter().filter(|i| i.role.is_anchor()) {
        let (mut at, mut ab) = (0u64, 0u64);
        for b in items.iter().filter(|i| i.role.is_candidate()) {
            if b.id == a.id || b.group != a.group {
                continue;
            }
            for c in items.iter().filter(|i| i.role.is_candidate()) {
                if c.group == a.group {
                    continue;
                }
                let sab = sim(e, &a.id, &b.id);
                let sac = sim(e, &a.id, &c.id);
                at += 1;
                same_sum += sab;
                diff_sum += sac;
                if sab <= sac {
                    ab += 1;
                    set.insert((a.id.clone(), b.id.clone(), c.id.clone()));
                }
            }
        }
        total += at;
        broken += ab;
        if at > 0 {
            per_anchor.push(ab as f64 / at as f64);
        }
    }
    let div = |x: f64, n: f64| if n == 0.0 { 0.0 } else { x / n };
    OracleReport {
        total,
        broken,
        same_avg: div(same_sum, total as f64),
        diff_avg: div(diff_sum, total as f64),
        error_global: div(broken as f64, total as f64),
        error_per_anchor_avg: div(per_anchor.iter().sum(), per_anchor.len() as f64),
        broken_set: set,
    }
}

/// Gaussian vectors, normalized.
pub fn random_unit_matrix(ids: &[String], dim: usize, rng: &mut impl Rng) -> EmbeddingMatrix {
    let rows = ids
        .iter()
        .map(|_| (0..dim).map(|_| gaussian(rng)).collect())
        .collect();
    EmbeddingMatrix::from_rows(ids.to_vec(), rows).unwrap()
}

pub fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Initialized store with every value jittered, so biases and LayerNorm
/// parameters are away from their special initial values.
pub fn jittered_store(config: ModelConfig, seed: u64) -> ParameterStore {
    let mut params = ParameterStore::init(config, seed).unwrap();
    let mut r = rng(seed + 100);
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        for v in params.get_mut(&name).unwrap().iter_mut() {
            *v += 0.05 * gaussian(&mut r);
        }
    }
    params
}

/// Below this magnitude gradient comparisons are absolute; central
/// differences at h = 1e-5 carry about 1e-11 of rounding noise.
pub const GRADIENT_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRADIENT_FLOOR)
}

pub fn gradient_sequence() -> (Vec<u32>, Vec<Option<u32>>) {
    let ids = vec![3, 7, 1, 12, 9, 1, 20, 1, 5, 4];
    let labels = vec![
        None,
        None,
        Some(8),
        None,
        None,
        Some(11),
        None,
        Some(25),
        None,
        None,
    ];
    (ids, labels)
}

/// Worst relative error between analytic and central-difference gradients
/// over `samples` coordinates of `selection` (parameter uniformly, then
/// index uniformly).
pub fn worst_gradient_error(
    params: &mut ParameterStore,
    selection: &LayerSelection,
    h: f64,
    samples: usize,
    seed: u64,
) -> f64 {
    let (ids, labels) = gradient_sequence();
    let grads = backward(params, &ids, &labels, selection).unwrap();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let name = &selection.names()[r.random_range(0..selection.len())];
        let index = r.random_range(0..params.get(name).unwrap().len());
        let analytic = grads.get(name).unwrap().as_slice().unwrap()[index];
        let numeric = central_difference(params, name, index, h, &ids, &labels);
        let err = relative_error(analytic, numeric);
        worst = if err.is_nan() {
            f64::INFINITY
        } else {
            worst.max(err)
        };
    }
    worst
}
