//! Permutation-invariant pairing of graphs.
//!
//! Histogram signatures give a cheap size-aware distance between graphs;
//! a linear assignment solver pairs batches under that distance and aligns
//! node orders before comparing two graphs with the local cost.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};
use crate::graph::{local_cost, pairs, permute, Graph, GraphSpec, Permutation};

/// `[α₁·h_V, α₂·h_E, α₃·h_VE]` where `h_V` counts node classes, `h_E` counts
/// edge classes over all active pairs (absent included) and `h_VE` counts
/// (unordered node-class pair, edge class) triples. Each block is normalized
/// to sum to one before weighting; a single-node graph has empty pair blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature(pub Vec<f64>);

impl Signature {
    pub fn l1(&self, other: &Signature) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }
}

fn class_pair_index(a: usize, b: usize, l: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    a * (2 * l - a + 1) / 2 + (b - a)
}

/// The three normalized histogram blocks, unweighted.
pub fn histogram_blocks(x: &Graph, spec: &GraphSpec) -> [Vec<f64>; 3] {
    let n = x.n();
    let mut hv = vec![0.0; spec.l_node];
    for &c in x.active_nodes() {
        hv[c] += 1.0;
    }
    let mut he = vec![0.0; spec.l_edge];
    let mut hve = vec![0.0; spec.l_node * (spec.l_node + 1) / 2 * spec.l_edge];
    for (i, j) in pairs(n) {
        let c = x.edge(i, j);
        he[c] += 1.0;
        hve[class_pair_index(x.node(i), x.node(j), spec.l_node) * spec.l_edge + c] += 1.0;
    }
    let m = (n * n.saturating_sub(1) / 2) as f64;
    if n > 0 {
        hv.iter_mut().for_each(|v| *v /= n as f64);
    }
    if m > 0.0 {
        he.iter_mut().for_each(|v| *v /= m);
        hve.iter_mut().for_each(|v| *v /= m);
    }
    [hv, he, hve]
}

pub fn histogram_signature(x: &Graph, spec: &GraphSpec, alpha: [f64; 3]) -> Signature {
    let blocks = histogram_blocks(x, spec);
    let mut out = Vec::with_capacity(blocks.iter().map(Vec::len).sum());
    for (b, a) in blocks.iter().zip(alpha) {
        out.extend(b.iter().map(|v| a * v));
    }
    Signature(out)
}

/// Block weights inversely proportional to each block's mean L1 distance
/// between consecutive graphs of `data`, scaled to sum to 3. Blocks that
/// never vary get weight 1 before rescaling.
pub fn balanced_alpha(data: &[Graph], spec: &GraphSpec) -> [f64; 3] {
    let blocks: Vec<[Vec<f64>; 3]> = data.iter().map(|g| histogram_blocks(g, spec)).collect();
    let mut mean = [0.0; 3];
    let mut count = 0usize;
    for w in blocks.windows(2) {
        for k in 0..3 {
            mean[k] += w[0][k].iter().zip(&w[1][k]).map(|(a, b)| (a - b).abs()).sum::<f64>();
        }
        count += 1;
    }
    let mut alpha = [1.0; 3];
    if count > 0 {
        for k in 0..3 {
            let m = mean[k] / count as f64;
            if m > 1e-12 {
                alpha[k] = 1.0 / m;
            }
        }
    }
    let s: f64 = alpha.iter().sum();
    alpha.map(|a| 3.0 * a / s)
}

/// Minimum-cost perfect assignment of rows to columns. Returns `perm` with
/// row `i` assigned to column `perm[i]`, and the total cost. Among optimal
/// assignments the lexicographically smallest `perm` is returned.
pub fn linear_assignment(cost: &Array2<f64>) -> Result<(Vec<usize>, f64)> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(GemError::SizeMismatch(format!("assignment cost matrix is {n}x{m}, must be square")));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(GemError::InvalidArgument("assignment cost has non-finite entries".into()));
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let (assign, u, v) = hungarian(cost);
    let scale = cost.iter().fold(1.0f64, |a, c| a.max(c.abs()));
    let tol = 1e-9 * scale * n as f64;
    let eq = Array2::from_shape_fn((n, n), |(i, j)| cost[[i, j]] - u[i] - v[j] <= tol);
    let perm = lexicographic_matching(&eq, assign);
    let total = perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok((perm, total))
}

/// Shortest augmenting path Hungarian method with potentials. Returns the
/// assignment and optimal duals `u`, `v` with `cost[i,j] - u[i] - v[j] ≥ 0`.
fn hungarian(cost: &Array2<f64>) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.nrows();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    (assign, u[1..].to_vec(), v[1..].to_vec())
}

/// Every optimal assignment is a perfect matching of the tight-edge graph
/// `eq`, so fixing rows in order to their smallest feasible column yields
/// the lexicographically smallest optimum. `start` is any perfect matching
/// of `eq`.
fn lexicographic_matching(eq: &Array2<bool>, start: Vec<usize>) -> Vec<usize> {
    let n = start.len();
    let mut row_to = start;
    let mut col_to = vec![0; n];
    for (i, &j) in row_to.iter().enumerate() {
        col_to[j] = i;
    }
    let mut col_fixed = vec![false; n];
    for i in 0..n {
        for j in 0..n {
            if !eq[[i, j]] || col_fixed[j] {
                continue;
            }
            if row_to[i] == j {
                break;
            }
            // Move row i to column j, then rematch the displaced row into
            // the column row i vacated via an alternating path.
            let mut rt = row_to.clone();
            let mut ct: Vec<Option<usize>> = col_to.iter().map(|&r| Some(r)).collect();
            let displaced = col_to[j];
            let vacated = rt[i];
            rt[i] = j;
            ct[j] = Some(i);
            ct[vacated] = None;
            let mut blocked = col_fixed.clone();
            blocked[j] = true;
            let mut seen = vec![false; n];
            if augment(displaced, eq, &blocked, &mut seen, &mut rt, &mut ct) {
                row_to = rt;
                for (c, r) in ct.into_iter().enumerate() {
                    col_to[c] = r.expect("perfect matching restored");
                }
                break;
            }
        }
        col_fixed[row_to[i]] = true;
    }
    row_to
}

fn augment(
    r: usize,
    eq: &Array2<bool>,
    blocked: &[bool],
    seen: &mut [bool],
    rt: &mut [usize],
    ct: &mut [Option<usize>],
) -> bool {
    for c in 0..blocked.len() {
        if !eq[[r, c]] || blocked[c] || seen[c] {
            continue;
        }
        seen[c] = true;
        let free = match ct[c] {
            None => true,
            Some(owner) => augment(owner, eq, blocked, seen, rt, ct),
        };
        if free {
            rt[r] = c;
            ct[c] = Some(r);
            return true;
        }
    }
    false
}

fn check_same_size(x: &Graph, y: &Graph) -> Result<()> {
    if x.n() != y.n() {
        return Err(GemError::SizeMismatch(format!("graphs have {} and {} active nodes", x.n(), y.n())));
    }
    Ok(())
}

fn align_with(n: usize, dist: impl Fn(usize, usize) -> f64) -> Result<Permutation> {
    let cost = Array2::from_shape_fn((n, n), |(i, k)| dist(i, k));
    let (perm, _) = linear_assignment(&cost)?;
    Permutation::new(perm)
}

/// Permutation `σ` with `y_i` matched to `x_{σ(i)}`, minimizing node-label
/// disagreement. `permute(y, σ⁻¹)` is `y` in `x`'s node order.
pub fn node_matching_align(x: &Graph, y: &Graph) -> Result<Permutation> {
    check_same_size(x, y)?;
    align_with(x.n(), |i, k| if y.node(i) == x.node(k) { 0.0 } else { 2.0 })
}

fn incident_histogram(g: &Graph, i: usize, l_edge: usize) -> Vec<f64> {
    let mut h = vec![0.0; l_edge];
    for k in 0..g.n() {
        if k != i {
            h[g.edge(i.min(k), i.max(k))] += 1.0;
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FgwMode {
    /// Nodes matched by label plus incident edge-class histograms.
    Histogram,
    /// Nodes matched by label only.
    NodeMatching,
}

/// Local cost after aligning `y` to `x` with the chosen node matching, and
/// the alignment. An upper bound on the minimum over all relabelings.
pub fn fgw_cost_approx(
    x: &Graph,
    y: &Graph,
    spec: &GraphSpec,
    mode: FgwMode,
    lambda_v: f64,
    lambda_e: f64,
) -> Result<(f64, Permutation)> {
    check_same_size(x, y)?;
    let sigma = match mode {
        FgwMode::NodeMatching => node_matching_align(x, y)?,
        FgwMode::Histogram => {
            let hx: Vec<_> = (0..x.n()).map(|i| incident_histogram(x, i, spec.l_edge)).collect();
            let hy: Vec<_> = (0..y.n()).map(|i| incident_histogram(y, i, spec.l_edge)).collect();
            align_with(x.n(), |i, k| {
                let label = if y.node(i) == x.node(k) { 0.0 } else { 2.0 * lambda_v };
                let edges: f64 = hy[i].iter().zip(&hx[k]).map(|(a, b)| (a - b).abs()).sum();
                label + lambda_e * edges
            })?
        }
    };
    let aligned = permute(y, &sigma.inverse())?;
    Ok((local_cost(x, &aligned, lambda_v, lambda_e)?, sigma))
}

/// Exact minimum of the local cost over all relabelings of `y`; factorial
/// time, for small graphs only.
pub fn fgw_cost_exact(x: &Graph, y: &Graph, lambda_v: f64, lambda_e: f64) -> Result<f64> {
    check_same_size(x, y)?;
    if x.n() > 9 {
        return Err(GemError::InvalidArgument("exact relabeling search limited to 9 nodes".into()));
    }
    let mut best = f64::INFINITY;
    let mut perm: Vec<usize> = (0..x.n()).collect();
    loop {
        let p = Permutation::new(perm.clone())?;
        best = best.min(local_cost(x, &permute(y, &p)?, lambda_v, lambda_e)?);
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(best)
}

/// Advances to the next lexicographic permutation; false after the last.
pub fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// A bijection between a source batch and a data batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    /// `(source index, data index)`, sorted by source index.
    pub pairs: Vec<(usize, usize)>,
    pub costs: Vec<f64>,
}

impl Coupling {
    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }
}

/// Pairs each source graph with a data graph of the same size, minimizing the
/// summed L1 signature distance within every size group.
pub fn minibatch_coupling(
    source: &[Graph],
    data: &[Graph],
    spec: &GraphSpec,
    alpha: [f64; 3],
) -> Result<Coupling> {
    if source.len() != data.len() {
        return Err(GemError::SizeMismatch(format!(
            "source batch has {} graphs, data batch {}",
            source.len(),
            data.len()
        )));
    }
    let ss: Vec<_> = source.iter().map(|g| histogram_signature(g, spec, alpha)).collect();
    let ds: Vec<_> = data.iter().map(|g| histogram_signature(g, spec, alpha)).collect();
    let mut sizes: Vec<usize> = source.iter().map(Graph::n).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut out = vec![(0, 0, 0.0); source.len()];
    for n in sizes {
        let si: Vec<usize> = (0..source.len()).filter(|&i| source[i].n() == n).collect();
        let di: Vec<usize> = (0..data.len()).filter(|&i| data[i].n() == n).collect();
        if si.len() != di.len() {
            return Err(GemError::SizeMismatch(format!(
                "size group n={n} has {} source and {} data graphs",
                si.len(),
                di.len()
            )));
        }
        let cost = Array2::from_shape_fn((si.len(), di.len()), |(a, b)| ss[si[a]].l1(&ds[di[b]]));
        let (perm, _) = linear_assignment(&cost)?;
        for (a, &b) in perm.iter().enumerate() {
            out[si[a]] = (si[a], di[b], cost[[a, b]]);
        }
    }
    if data.iter().any(|g| !source.iter().any(|s| s.n() == g.n())) {
        return Err(GemError::SizeMismatch("data batch has a size absent from the source batch".into()));
    }
    Ok(Coupling {
        pairs: out.iter().map(|&(s, d, _)| (s, d)).collect(),
        costs: out.iter().map(|&(_, _, c)| c).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn assignment_small_cases() {
        let (p, c) = linear_assignment(&array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!((p, c), (vec![0, 1], 0.0));
        let (p, c) = linear_assignment(&array![[5.0, 4.0], [4.0, 5.0]]).unwrap();
        assert_eq!((p, c), (vec![1, 0], 8.0));
        assert!(linear_assignment(&Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let (p, _) = linear_assignment(&Array2::from_elem((4, 4), 1.0)).unwrap();
        assert_eq!(p, vec![0, 1, 2, 3]);
        let cost = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(linear_assignment(&cost).unwrap().0, vec![1, 2, 0]);
    }

    #[test]
    fn path_graph_pair_histogram() {
        let spec = GraphSpec::new(3, 2, 2).unwrap();
        let g = Graph::from_parts(&spec, &[0, 1, 0], &[(0, 1, 1), (1, 2, 1)]).unwrap();
        let [hv, he, hve] = histogram_blocks(&g, &spec);
        assert_eq!(hv, vec![2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(he, vec![1.0 / 3.0, 2.0 / 3.0]);
        // class pairs (0,0), (0,1), (1,1), each with edge classes 0 and 1
        assert_eq!(hve, vec![1.0 / 3.0, 0.0, 0.0, 2.0 / 3.0, 0.0, 0.0]);
    }

    #[test]
    fn alignment_recovers_permutation_of_distinct_labels() {
        let spec = GraphSpec::new(5, 5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut x = Graph::uniform(&spec, 5, &mut rng).unwrap();
            for i in 0..5 {
                x.set_node(i, i);
            }
            let s = Permutation::random(5, &mut rng);
            let y = permute(&x, &s).unwrap();
            assert_eq!(node_matching_align(&x, &y).unwrap(), s);
            for mode in [FgwMode::NodeMatching, FgwMode::Histogram] {
                assert_eq!(fgw_cost_approx(&x, &y, &spec, mode, 0.3, 0.7).unwrap().0, 0.0);
            }
        }
    }

    #[test]
    fn coupling_rejects_unbalanced_groups() {
        let spec = GraphSpec::new(3, 2, 2).unwrap();
        let a = Graph::empty(&spec, 2).unwrap();
        let b = Graph::empty(&spec, 3).unwrap();
        assert!(minibatch_coupling(&[a.clone(), a.clone()], &[a.clone(), b.clone()], &spec, [1.0; 3]).is_err());
        let c = minibatch_coupling(&[a.clone(), b.clone()], &[b, a], &spec, [1.0; 3]).unwrap();
        assert_eq!(c.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(c.total_cost(), 0.0);
    }

    #[test]
    fn balanced_alpha_sums_to_three() {
        let spec = GraphSpec::new(6, 3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<_> = (0..30).map(|_| Graph::uniform(&spec, rng.gen_range(2..=6), &mut rng).unwrap()).collect();
        let a = balanced_alpha(&data, &spec);
        assert!((a.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        assert!(a.iter().all(|&x| x > 0.0));
    }
}
