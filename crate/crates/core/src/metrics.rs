//! Sample-quality metrics: label-refinement hashing, validity / uniqueness /
//! novelty, and a kernel two-sample distance.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::dataset::ValenceRules;
use crate::graph::{Graph, GraphSpec, NO_EDGE};
use crate::matching::histogram_blocks;

/// Refinement rounds used by [`canonical_hash`].
pub const WL_ROUNDS: usize = 3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fold(words: impl IntoIterator<Item = u64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        h ^= splitmix(w);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(h)
}

/// 64-bit Weisfeiler-Lehman hash with edge classes: node colors start from
/// node classes and are refined [`WL_ROUNDS`] times from the sorted multiset
/// of `(edge class, neighbor color)`; the hash folds `n` and the sorted color
/// multiset of every round. Isomorphic graphs always collide; some
/// non-isomorphic ones do too (two triangles vs. a hexagon, for example).
pub fn canonical_hash(g: &Graph) -> u64 {
    let n = g.n();
    let mut colors: Vec<u64> = g.active_nodes().iter().map(|&c| fold([1, c as u64])).collect();
    let mut summary = vec![n as u64];
    let push_round = |summary: &mut Vec<u64>, colors: &[u64]| {
        let mut sorted = colors.to_vec();
        sorted.sort_unstable();
        summary.push(fold(sorted));
    };
    push_round(&mut summary, &colors);
    for _ in 0..WL_ROUNDS {
        let next: Vec<u64> = (0..n)
            .map(|i| {
                let mut nb: Vec<u64> = (0..n)
                    .filter(|&k| k != i && g.edge(i, k) != NO_EDGE)
                    .map(|k| fold([g.edge(i, k) as u64, colors[k]]))
                    .collect();
                nb.sort_unstable();
                fold(std::iter::once(colors[i]).chain(nb))
            })
            .collect();
        colors = next;
        push_round(&mut summary, &colors);
    }
    fold(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vun {
    /// Valid fraction of all samples.
    pub validity: f64,
    /// Distinct hashes among valid samples, as a fraction of valid samples.
    pub uniqueness: f64,
    /// Fraction of valid unique samples absent from the training set.
    pub novelty: f64,
    /// Valid and unique, as a fraction of all samples.
    pub vu: f64,
    /// Valid, unique and novel, as a fraction of all samples.
    pub vun: f64,
}

pub fn vun_metrics(samples: &[Graph], train: &[Graph], rules: &ValenceRules) -> Vun {
    if samples.is_empty() {
        return Vun { validity: 0.0, uniqueness: 0.0, novelty: 0.0, vu: 0.0, vun: 0.0 };
    }
    let train_hashes: HashSet<u64> = train.iter().map(canonical_hash).collect();
    let valid: Vec<&Graph> = samples.iter().filter(|g| rules.is_valid(g)).collect();
    let unique: HashSet<u64> = valid.iter().map(|g| canonical_hash(g)).collect();
    let novel = unique.iter().filter(|h| !train_hashes.contains(h)).count();
    let total = samples.len() as f64;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Vun {
        validity: valid.len() as f64 / total,
        uniqueness: ratio(unique.len(), valid.len()),
        novelty: ratio(novel, unique.len()),
        vu: unique.len() as f64 / total,
        vun: novel as f64 / total,
    }
}

/// Feature map for [`stat_distance`]: degree histogram over `0..n_max`,
/// node-class histogram and edge-class histogram, each normalized.
pub fn graph_features(g: &Graph, spec: &GraphSpec) -> Vec<f64> {
    let mut deg = vec![0.0; spec.n_max.max(1)];
    let n = g.n();
    for d in g.degrees() {
        deg[d] += 1.0;
    }
    if n > 0 {
        deg.iter_mut().for_each(|v| *v /= n as f64);
    }
    let [hv, he, _] = histogram_blocks(g, spec);
    deg.into_iter().chain(hv).chain(he).collect()
}

fn rbf(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Biased maximum mean discrepancy `sqrt(max(0, MMD²))` with an RBF kernel of
/// width `sigma` over [`graph_features`]. Zero when both samples have the
/// same empirical distribution.
pub fn stat_distance(samples: &[Graph], reference: &[Graph], spec: &GraphSpec, sigma: f64) -> f64 {
    if samples.is_empty() || reference.is_empty() {
        return f64::NAN;
    }
    let xs: Vec<_> = samples.iter().map(|g| graph_features(g, spec)).collect();
    let ys: Vec<_> = reference.iter().map(|g| graph_features(g, spec)).collect();
    let mean_k = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for x in a {
            for y in b {
                s += rbf(x, y, sigma);
            }
        }
        s / (a.len() * b.len()) as f64
    };
    let mmd2 = mean_k(&xs, &xs) + mean_k(&ys, &ys) - 2.0 * mean_k(&xs, &ys);
    mmd2.max(0.0).sqrt()
}
