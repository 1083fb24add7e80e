//! Energy-weighted paths between graphs in the relaxed embedding space.
//!
//! A path is a clamped cubic B-spline whose first and last control points
//! are the one-hot endpoints and whose six interior control points are
//! per-block softmaxes of learnable logits, so every point on the curve lies
//! in the product of simplices. Optimization minimizes
//! `λ_L (L / L_lin - 1) + λ_ME · mean V` where `L = ∫ exp(βV(γ)) ‖γ'‖_loc`
//! is discretized over `K` segments and `L_lin` is the same length for the
//! straight chord.

use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ValenceRules;
use crate::energy::Potential;
use crate::error::{GemError, Result};
use crate::graph::{active_indices, embed, local_cost, pairs, permute, Embedding, Graph, GraphSpec};
use crate::matching::node_matching_align;

pub const CONTROL_POINTS: usize = 8;
pub const KNOTS: [f64; 12] = [0.0, 0.0, 0.0, 0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.0, 1.0, 1.0];
const DEGREE: usize = 3;

/// Values of the eight cubic basis functions at `t`; they sum to one.
pub fn basis(t: f64) -> [f64; CONTROL_POINTS] {
    let mut out = [0.0; CONTROL_POINTS];
    if t >= 1.0 {
        out[CONTROL_POINTS - 1] = 1.0;
        return out;
    }
    // degree-0 functions on the 11 knot spans, then Cox-de Boor upward
    let mut b = [0.0; 11];
    for (i, v) in b.iter_mut().enumerate() {
        if KNOTS[i] <= t && t < KNOTS[i + 1] {
            *v = 1.0;
        }
    }
    for p in 1..=DEGREE {
        for i in 0..11 - p {
            let left = {
                let d = KNOTS[i + p] - KNOTS[i];
                if d > 0.0 { (t - KNOTS[i]) / d * b[i] } else { 0.0 }
            };
            let right = {
                let d = KNOTS[i + p + 1] - KNOTS[i + 1];
                if d > 0.0 { (KNOTS[i + p + 1] - t) / d * b[i + 1] } else { 0.0 }
            };
            b[i] = left + right;
        }
    }
    out.copy_from_slice(&b[..CONTROL_POINTS]);
    out
}

/// Knot averages; control points placed at these fractions of the chord
/// reproduce the straight line exactly.
pub fn greville() -> [f64; CONTROL_POINTS] {
    let mut g = [0.0; CONTROL_POINTS];
    for (i, v) in g.iter_mut().enumerate() {
        *v = (KNOTS[i + 1] + KNOTS[i + 2] + KNOTS[i + 3]) / 3.0;
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeodesicConfig {
    /// Energy weight inside the length integrand.
    pub beta: f64,
    pub lambda_l: f64,
    pub lambda_me: f64,
    pub iterations: usize,
    pub step_size: f64,
    /// Segments `K` of the length discretization.
    pub points: usize,
    /// Arc-length-uniform locations sampled per path.
    pub locations: usize,
    pub samples_per_location: usize,
    /// Node and pair weights of the local norm.
    pub lambda_v: f64,
    pub lambda_e: f64,
    /// Probability floor mixed into the initial control points so classes
    /// absent from both endpoints can gain mass; 0 keeps them at zero.
    pub support_floor: f64,
    /// Upper edges of the endpoint-distance bins; the last bin is open.
    pub bin_edges: Vec<f64>,
}

impl Default for GeodesicConfig {
    fn default() -> Self {
        GeodesicConfig {
            beta: 0.1,
            lambda_l: 0.1,
            lambda_me: 1.0,
            iterations: 2000,
            step_size: 1e-3,
            points: 32,
            locations: 16,
            samples_per_location: 16,
            lambda_v: 0.23,
            lambda_e: 1.88,
            support_floor: 1e-3,
            bin_edges: vec![15.0, 30.0],
        }
    }
}

impl GeodesicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points == 0 || self.locations == 0 || self.samples_per_location == 0 {
            return Err(GemError::Config("points, locations and samples_per_location must be positive".into()));
        }
        if !(self.lambda_v > 0.0 && self.lambda_e > 0.0 && self.step_size > 0.0) {
            return Err(GemError::Config("local-norm weights and step size must be positive".into()));
        }
        if !(self.support_floor >= 0.0 && self.lambda_l >= 0.0 && self.lambda_me >= 0.0) || !self.beta.is_finite() {
            return Err(GemError::Config("geodesic weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// The cost-only baseline: same machinery without energy weighting or
    /// the mean-energy term.
    pub fn cost_only(&self) -> Self {
        GeodesicConfig { beta: 0.0, lambda_me: 0.0, ..self.clone() }
    }

    fn uses_energy(&self) -> bool {
        self.beta != 0.0 || self.lambda_me != 0.0
    }

    pub fn bin(&self, distance: f64) -> usize {
        self.bin_edges.iter().take_while(|&&e| distance >= e).count()
    }
}

/// Spline between two graphs with the same node count. Coordinates are
/// stored over the active region only, in embedding layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct SplinePath {
    spec: GraphSpec,
    n: usize,
    index: Vec<usize>,
    /// `(start, len)` of every block in active coordinates.
    blocks: Vec<(usize, usize)>,
    start: Vec<f64>,
    end: Vec<f64>,
    /// Logits of the six interior control points.
    pub logits: Vec<Vec<f64>>,
}

fn softmax_blocks(logits: &[f64], blocks: &[(usize, usize)]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for &(s, l) in blocks {
        let m = logits[s..s + l].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in s..s + l {
            out[k] = (logits[k] - m).exp();
            z += out[k];
        }
        for v in &mut out[s..s + l] {
            *v /= z;
        }
    }
    out
}

fn ln_or_neg_inf(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

impl SplinePath {
    /// Path whose control points sit on the chord between `a` and `b`, with
    /// `floor` probability mass spread over every class.
    pub fn linear(a: &Graph, b: &Graph, spec: &GraphSpec, floor: f64) -> Result<Self> {
        let n = a.n();
        if b.n() != n {
            return Err(GemError::SizeMismatch(format!("endpoints have {n} and {} nodes", b.n())));
        }
        if n == 0 {
            return Err(GemError::Empty("geodesic endpoints have no nodes".into()));
        }
        let index = active_indices(spec, n);
        let ea = embed(a, spec)?;
        let eb = embed(b, spec)?;
        let start: Vec<f64> = index.iter().map(|&k| ea.0[k]).collect();
        let end: Vec<f64> = index.iter().map(|&k| eb.0[k]).collect();
        let mut blocks = Vec::new();
        let mut pos = 0;
        let mut sizes = vec![spec.l_node; n];
        sizes.extend(std::iter::repeat_n(spec.l_edge, pairs(n).count()));
        // active_indices is sorted, and node blocks precede pair blocks
        for s in sizes {
            blocks.push((pos, s));
            pos += s;
        }
        let floor = if a == b { 0.0 } else { floor };
        let g = greville();
        let logits = (1..CONTROL_POINTS - 1)
            .map(|c| {
                start
                    .iter()
                    .zip(&end)
                    .map(|(x, y)| ln_or_neg_inf((1.0 - g[c]) * x + g[c] * y + floor))
                    .collect()
            })
            .collect();
        Ok(SplinePath { spec: *spec, n, index, blocks, start, end, logits })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn control_points(&self) -> Vec<Vec<f64>> {
        let mut out = vec![self.start.clone()];
        out.extend(self.logits.iter().map(|l| softmax_blocks(l, &self.blocks)));
        out.push(self.end.clone());
        out
    }

    fn combine(points: &[Vec<f64>], t: f64) -> Vec<f64> {
        let w = basis(t);
        let mut out = vec![0.0; points[0].len()];
        for (p, &wc) in points.iter().zip(&w) {
            if wc != 0.0 {
                for (o, v) in out.iter_mut().zip(p) {
                    *o += wc * v;
                }
            }
        }
        out
    }

    /// Point of the path at `t`, active coordinates only.
    pub fn eval_active(&self, t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(GemError::InvalidArgument(format!("path parameter {t} outside [0, 1]")));
        }
        if t == 0.0 {
            return Ok(self.start.clone());
        }
        if t == 1.0 {
            return Ok(self.end.clone());
        }
        Ok(Self::combine(&self.control_points(), t))
    }

    /// Soft embedding of the path at `t`.
    pub fn eval(&self, t: f64) -> Result<Embedding> {
        Ok(self.to_embedding(&self.eval_active(t)?))
    }

    fn to_embedding(&self, active: &[f64]) -> Embedding {
        let mut e = Embedding::zeros(&self.spec);
        for (&k, &v) in self.index.iter().zip(active) {
            e.0[k] = v;
        }
        e
    }

    fn local_weights(&self, cfg: &GeodesicConfig) -> Vec<f64> {
        let node_len = self.n * self.spec.l_node;
        (0..self.start.len()).map(|k| if k < node_len { cfg.lambda_v } else { cfg.lambda_e }).collect()
    }

    fn chord(&self) -> Vec<Vec<f64>> {
        let g = greville();
        g.iter()
            .map(|&s| self.start.iter().zip(&self.end).map(|(a, b)| (1.0 - s) * a + s * b).collect())
            .collect()
    }
}

/// Discretized length of a path and the energy along it.
#[derive(Debug, Clone, PartialEq)]
pub struct PathStats {
    /// `Σ exp(β V(midpoint)) ‖Δ‖_loc` over the `K` segments.
    pub length: f64,
    /// Mean energy over segment midpoints; zero when energy is not used.
    pub mean_energy: f64,
    /// Unweighted local-norm length of each segment.
    pub segments: Vec<f64>,
}

struct Eval {
    stats: PathStats,
    /// Gradient of `(length, mean_energy)` in each control point.
    grad: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

fn evaluate_points<P: Potential + ?Sized>(
    potential: Option<&P>,
    path: &SplinePath,
    points: &[Vec<f64>],
    cfg: &GeodesicConfig,
    want_grad: bool,
) -> Result<Eval> {
    let k = cfg.points;
    let w = path.local_weights(cfg);
    let ts: Vec<f64> = (0..=k).map(|i| i as f64 / k as f64).collect();
    let nodes: Vec<Vec<f64>> = ts.iter().map(|&t| SplinePath::combine(points, t)).collect();
    let d = points[0].len();
    let mut length = 0.0;
    let mut mean_energy = 0.0;
    let mut segments = Vec::with_capacity(k);
    let mut g_len = vec![vec![0.0; d]; CONTROL_POINTS];
    let mut g_me = vec![vec![0.0; d]; CONTROL_POINTS];
    for s in 0..k {
        let delta: Vec<f64> = nodes[s + 1].iter().zip(&nodes[s]).map(|(a, b)| a - b).collect();
        let seg = delta.iter().zip(&w).map(|(x, w)| w * x * x).sum::<f64>().sqrt();
        segments.push(seg);
        let mid_t = 0.5 * (ts[s] + ts[s + 1]);
        let (weight, vgrad) = match potential {
            Some(p) if cfg.uses_energy() => {
                let mid = path.to_embedding(&SplinePath::combine(points, mid_t));
                let eg = p.evaluate(&mid, path.n)?;
                mean_energy += eg.value / k as f64;
                let g: Vec<f64> = path.index.iter().map(|&i| eg.grad[i]).collect();
                ((cfg.beta * eg.value).exp(), Some(g))
            }
            _ => (1.0, None),
        };
        length += weight * seg;
        if !want_grad {
            continue;
        }
        let (b0, b1, bm) = (basis(ts[s]), basis(ts[s + 1]), basis(mid_t));
        for c in 0..CONTROL_POINTS {
            let db = b1[c] - b0[c];
            if seg > 0.0 && db != 0.0 {
                for ((g, x), wk) in g_len[c].iter_mut().zip(&delta).zip(&w) {
                    *g += weight * wk * x / seg * db;
                }
            }
            if let Some(vg) = &vgrad {
                if bm[c] != 0.0 {
                    for (i, v) in vg.iter().enumerate() {
                        g_len[c][i] += weight * cfg.beta * seg * bm[c] * v;
                        g_me[c][i] += bm[c] * v / k as f64;
                    }
                }
            }
        }
    }
    if !(length.is_finite() && mean_energy.is_finite()) {
        return Err(GemError::Numeric { stage: "path length", layer: 0 });
    }
    Ok(Eval { stats: PathStats { length, mean_energy, segments }, grad: want_grad.then_some((g_len, g_me)) })
}

/// Energy-weighted length of `path` (see module docs).
pub fn path_length<P: Potential + ?Sized>(potential: &P, path: &SplinePath, cfg: &GeodesicConfig) -> Result<PathStats> {
    cfg.validate()?;
    Ok(evaluate_points(Some(potential), path, &path.control_points(), cfg, false)?.stats)
}

fn objective(stats: &PathStats, linear: f64, cfg: &GeodesicConfig) -> f64 {
    let ratio = if linear > 0.0 { stats.length / linear - 1.0 } else { 0.0 };
    cfg.lambda_l * ratio + cfg.lambda_me * stats.mean_energy
}

/// Objective value and its gradient in the interior logits.
fn objective_grad<P: Potential + ?Sized>(
    potential: &P,
    path: &SplinePath,
    linear: f64,
    cfg: &GeodesicConfig,
) -> Result<(f64, PathStats, Vec<Vec<f64>>)> {
    let points = path.control_points();
    let ev = evaluate_points(Some(potential), path, &points, cfg, true)?;
    let (g_len, g_me) = ev.grad.expect("requested");
    let a = if linear > 0.0 { cfg.lambda_l / linear } else { 0.0 };
    let grads = (1..CONTROL_POINTS - 1)
        .map(|c| {
            let gp: Vec<f64> = g_len[c].iter().zip(&g_me[c]).map(|(l, m)| a * l + cfg.lambda_me * m).collect();
            let p = &points[c];
            let mut out = vec![0.0; gp.len()];
            for &(s, l) in &path.blocks {
                let dot: f64 = (s..s + l).map(|k| p[k] * gp[k]).sum();
                for k in s..s + l {
                    out[k] = p[k] * (gp[k] - dot);
                }
            }
            out
        })
        .collect();
    Ok((objective(&ev.stats, linear, cfg), ev.stats, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicResult {
    pub path: SplinePath,
    pub objective: f64,
    pub initial_objective: f64,
    pub stats: PathStats,
    /// Energy-weighted length of the straight chord.
    pub linear_length: f64,
}

/// Adam on the interior logits, keeping the best path seen. Identical
/// endpoints short-circuit to the constant path with objective 0.
pub fn optimize_geodesic<P: Potential + ?Sized>(
    potential: &P,
    path: SplinePath,
    cfg: &GeodesicConfig,
) -> Result<GeodesicResult> {
    cfg.validate()?;
    let chord = path.chord();
    let linear = evaluate_points(Some(potential), &path, &chord, cfg, false)?.stats.length;
    if path.start == path.end {
        let stats = evaluate_points(Some(potential), &path, &path.control_points(), cfg, false)?.stats;
        return Ok(GeodesicResult { path, objective: 0.0, initial_objective: 0.0, stats, linear_length: linear });
    }
    let (f0, s0, mut grads) = objective_grad(potential, &path, linear, cfg)?;
    let mut best = (f0, s0.clone(), path.logits.clone());
    let mut cur = path;
    let d = cur.start.len();
    let mut m = vec![vec![0.0; d]; CONTROL_POINTS - 2];
    let mut v = vec![vec![0.0; d]; CONTROL_POINTS - 2];
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for it in 1..=cfg.iterations {
        let (c1, c2) = (1.0 - b1.powi(it as i32), 1.0 - b2.powi(it as i32));
        for c in 0..CONTROL_POINTS - 2 {
            for k in 0..d {
                let g = grads[c][k];
                m[c][k] = b1 * m[c][k] + (1.0 - b1) * g;
                v[c][k] = b2 * v[c][k] + (1.0 - b2) * g * g;
                if cur.logits[c][k].is_finite() {
                    cur.logits[c][k] -= cfg.step_size * (m[c][k] / c1) / ((v[c][k] / c2).sqrt() + eps);
                }
            }
        }
        let (f, s, g) = objective_grad(potential, &cur, linear, cfg)?;
        if !f.is_finite() {
            return Err(GemError::Numeric { stage: "geodesic objective", layer: it });
        }
        if f < best.0 {
            best = (f, s, cur.logits.clone());
        }
        grads = g;
    }
    cur.logits = best.2;
    Ok(GeodesicResult { path: cur, objective: best.0, initial_objective: f0, stats: best.1, linear_length: linear })
}

/// Second endpoint relabeled so its nodes line up with the first.
pub fn align_endpoints(a: &Graph, b: &Graph) -> Result<Graph> {
    let sigma = node_matching_align(a, b)?;
    permute(b, &sigma.inverse())
}

/// `count` parameters spaced uniformly in unweighted arc length, from the
/// piecewise-linear inverse of the cumulative segment lengths.
pub fn arc_length_positions(path: &SplinePath, cfg: &GeodesicConfig, count: usize) -> Result<Vec<f64>> {
    let segs = evaluate_points::<dyn Potential>(None, path, &path.control_points(), cfg, false)?.stats.segments;
    let k = segs.len();
    let total: f64 = segs.iter().sum();
    let mut cum = vec![0.0];
    for s in &segs {
        cum.push(cum.last().unwrap() + s);
    }
    let targets: Vec<f64> = (0..count)
        .map(|j| if count == 1 { 0.5 } else { j as f64 / (count - 1) as f64 })
        .collect();
    Ok(targets
        .into_iter()
        .map(|u| {
            if total == 0.0 {
                return u;
            }
            let goal = u * total;
            let i = cum.partition_point(|&c| c < goal).clamp(1, k);
            let (lo, hi) = (cum[i - 1], cum[i]);
            let frac = if hi > lo { (goal - lo) / (hi - lo) } else { 0.0 };
            (((i - 1) as f64 + frac) / k as f64).clamp(0.0, 1.0)
        })
        .collect())
}

/// `samples` categorical draws per block at each parameter.
pub fn sample_along_path<R: Rng + ?Sized>(
    path: &SplinePath,
    positions: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<Vec<Vec<Graph>>> {
    let spec = path.spec;
    let n = path.n;
    positions
        .iter()
        .map(|&t| {
            let e = path.eval(t)?;
            let node_d = (0..n)
                .map(|i| WeightedIndex::new(e.node_block(&spec, i)))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| GemError::InvalidArgument(e.to_string()))?;
            let pair_d = pairs(n)
                .map(|(i, j)| WeightedIndex::new(e.pair_block(&spec, i, j)))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| GemError::InvalidArgument(e.to_string()))?;
            (0..samples)
                .map(|_| {
                    let mut g = Graph::empty(&spec, n)?;
                    for (i, d) in node_d.iter().enumerate() {
                        g.set_node(i, d.sample(rng));
                    }
                    for ((i, j), d) in pairs(n).zip(&pair_d) {
                        g.set_edge(i, j, d.sample(rng));
                    }
                    Ok(g)
                })
                .collect()
        })
        .collect()
}

/// Valid fraction at each location, averaged over locations.
pub fn path_validity(grid: &[Vec<Graph>], rules: &ValenceRules) -> f64 {
    let per: Vec<f64> = grid
        .iter()
        .filter(|row| !row.is_empty())
        .map(|row| row.iter().filter(|g| rules.is_valid(g)).count() as f64 / row.len() as f64)
        .collect();
    if per.is_empty() {
        0.0
    } else {
        per.iter().sum::<f64>() / per.len() as f64
    }
}

/// Exact one-sided sign test: probability of at least as many positive
/// differences under a fair coin, ties dropped.
pub fn sign_test_greater(diffs: &[f64]) -> f64 {
    let pos = diffs.iter().filter(|&&d| d > 0.0).count();
    let m = pos + diffs.iter().filter(|&&d| d < 0.0).count();
    if m == 0 {
        return 1.0;
    }
    // log C(m, k) accumulated to stay finite for large m
    let mut log_c = 0.0;
    let mut tail = 0.0;
    for k in 0..=m {
        if k > 0 {
            log_c += ((m - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= pos {
            tail += (log_c - m as f64 * std::f64::consts::LN_2).exp();
        }
    }
    tail.min(1.0)
}

/// Up to `count` distinct index pairs of graphs with equal node counts, drawn
/// without replacement.
pub fn endpoint_pairs<R: Rng + ?Sized>(graphs: &[Graph], count: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = (0..graphs.len())
        .flat_map(|i| (i + 1..graphs.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| graphs[i].n() == graphs[j].n() && graphs[i] != graphs[j])
        .collect();
    all.shuffle(rng);
    all.truncate(count);
    all
}

/// Energy-weighted and cost-only paths between one pair, each scored by the
/// validity and mean energy of graphs sampled along it.
#[allow(clippy::too_many_arguments)]
pub fn compare_pair<P: Potential + ?Sized>(
    potential: &P,
    a: &Graph,
    b: &Graph,
    cfg: &GeodesicConfig,
    rules: &ValenceRules,
    pair: usize,
    seed: u64,
) -> Result<[PathRecord; 2]> {
    let spec = *potential.spec();
    let b = align_endpoints(a, b)?;
    let distance = local_cost(a, &b, cfg.lambda_v, cfg.lambda_e)?;
    let bin = cfg.bin(distance);
    let mut out = Vec::with_capacity(2);
    for (k, (method, c)) in [("energy", cfg.clone()), ("cost", cfg.cost_only())].into_iter().enumerate() {
        let path = SplinePath::linear(a, &b, &spec, c.support_floor)?;
        let r = optimize_geodesic(potential, path, &c)?;
        let pos = arc_length_positions(&r.path, &c, c.locations)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pair as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ k as u64);
        let grid = sample_along_path(&r.path, &pos, c.samples_per_location, &mut rng)?;
        let flat: Vec<&Graph> = grid.iter().flatten().collect();
        let energy = flat.iter().map(|g| potential.value_graph(g)).sum::<Result<f64>>()? / flat.len() as f64;
        out.push(PathRecord {
            pair,
            method: method.to_string(),
            bin,
            distance,
            validity: path_validity(&grid, rules),
            energy,
        });
    }
    Ok([out.remove(0), out.remove(0)])
}

/// Runs [`compare_pair`] on every pair in parallel; output order follows
/// `pairs` regardless of scheduling.
pub fn compare_pairs<P: Potential + ?Sized>(
    potential: &P,
    graphs: &[Graph],
    pairs: &[(usize, usize)],
    cfg: &GeodesicConfig,
    rules: &ValenceRules,
    seed: u64,
) -> Result<Vec<PathRecord>> {
    let rows = pairs
        .par_iter()
        .enumerate()
        .map(|(k, &(i, j))| compare_pair(potential, &graphs[i], &graphs[j], cfg, rules, k, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// Per-bin comparison of the two methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub bin: usize,
    pub pairs: usize,
    pub energy_validity: f64,
    pub cost_validity: f64,
    /// One-sided sign-test p-value for energy-weighted paths being more valid.
    pub p_value: f64,
}

pub fn summarize_bins(records: &[PathRecord]) -> Vec<BinSummary> {
    let mut bins: Vec<usize> = records.iter().map(|r| r.bin).collect();
    bins.sort_unstable();
    bins.dedup();
    bins.into_iter()
        .map(|bin| {
            let find = |pair: usize, m: &str| records.iter().find(|r| r.pair == pair && r.method == m);
            let paired: Vec<(f64, f64)> = records
                .iter()
                .filter(|r| r.bin == bin && r.method == "energy")
                .filter_map(|r| find(r.pair, "cost").map(|c| (r.validity, c.validity)))
                .collect();
            let n = paired.len().max(1) as f64;
            let diffs: Vec<f64> = paired.iter().map(|(e, c)| e - c).collect();
            BinSummary {
                bin,
                pairs: paired.len(),
                energy_validity: paired.iter().map(|p| p.0).sum::<f64>() / n,
                cost_validity: paired.iter().map(|p| p.1).sum::<f64>() / n,
                p_value: sign_test_greater(&diffs),
            }
        })
        .collect()
}

/// One row of the geodesic report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub pair: usize,
    pub method: String,
    pub bin: usize,
    pub distance: f64,
    pub validity: f64,
    pub energy: f64,
}

/// Columns `pair, method, bin, distance, validity, energy`.
pub fn write_path_csv<W: Write>(w: W, rows: &[PathRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["pair", "method", "bin", "distance", "validity", "energy"])?;
    for r in rows {
        out.write_record([
            r.pair.to_string(),
            r.method.clone(),
            r.bin.to_string(),
            r.distance.to_string(),
            r.validity.to_string(),
            r.energy.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::EnergyModel;

    fn setup() -> (EnergyModel, Graph, Graph) {
        let spec = GraphSpec::new(4, 3, 3).unwrap();
        let m = EnergyModel::new(spec, 6, 1, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Graph::uniform(&spec, 4, &mut rng).unwrap();
        let b = Graph::uniform(&spec, 4, &mut rng).unwrap();
        (m, a, b)
    }

    #[test]
    fn basis_is_a_partition_of_unity() {
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            let b = basis(t);
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{t}");
            assert!(b.iter().all(|&x| x >= 0.0));
        }
        assert_eq!(basis(0.0)[0], 1.0);
        assert_eq!(basis(1.0)[7], 1.0);
    }

    #[test]
    fn endpoints_are_exact_and_points_stay_on_simplices() {
        let (m, a, b) = setup();
        let spec = *m.spec();
        let p = SplinePath::linear(&a, &b, &spec, 1e-3).unwrap();
        assert_eq!(p.eval(0.0).unwrap(), embed(&a, &spec).unwrap());
        assert_eq!(p.eval(1.0).unwrap(), embed(&b, &spec).unwrap());
        for i in 1..20 {
            let e = p.eval(i as f64 / 20.0).unwrap();
            for k in 0..4 {
                let s: f64 = e.node_block(&spec, k).iter().sum();
                assert!((s - 1.0).abs() < 1e-12 && e.node_block(&spec, k).iter().all(|&x| x >= 0.0));
            }
        }
        assert!(p.eval(1.5).is_err());
    }

    #[test]
    fn zero_floor_initialization_is_the_chord() {
        let (m, a, b) = setup();
        let spec = *m.spec();
        let p = SplinePath::linear(&a, &b, &spec, 0.0).unwrap();
        let (ea, eb) = (embed(&a, &spec).unwrap(), embed(&b, &spec).unwrap());
        for i in 0..=10 {
            let t = i as f64 / 10.0;
            let e = p.eval(t).unwrap();
            for k in 0..e.len() {
                assert!((e.0[k] - ((1.0 - t) * ea.0[k] + t * eb.0[k])).abs() < 1e-12);
            }
        }
        let cfg = GeodesicConfig { beta: 0.0, points: 16, ..Default::default() };
        let expect = local_cost(&a, &b, cfg.lambda_v, cfg.lambda_e).unwrap().sqrt();
        let len = path_length(&m, &p, &cfg).unwrap().length;
        assert!((len - expect).abs() < 1e-9, "{len} vs {expect}");
    }

    #[test]
    fn constant_path_has_zero_length() {
        let (m, a, _) = setup();
        let p = SplinePath::linear(&a, &a, m.spec(), 1e-3).unwrap();
        assert!(path_length(&m, &p, &GeodesicConfig::default()).unwrap().length < 1e-12);
        let r = optimize_geodesic(&m, p, &GeodesicConfig { iterations: 5, ..Default::default() }).unwrap();
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let (m, a, b) = setup();
        let cfg = GeodesicConfig { beta: 0.7, lambda_l: 0.4, lambda_me: 0.9, points: 8, ..Default::default() };
        let mut p = SplinePath::linear(&a, &b, m.spec(), 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for l in p.logits.iter_mut() {
            for x in l.iter_mut() {
                *x += 0.3 * rng.gen::<f64>();
            }
        }
        let linear = 2.5;
        let (_, _, g) = objective_grad(&m, &p, linear, &cfg).unwrap();
        let h = 1e-6;
        for (c, k) in [(0, 0), (2, 5), (5, 13), (3, 20)] {
            let base = p.logits[c][k];
            p.logits[c][k] = base + h;
            let fp = objective_grad(&m, &p, linear, &cfg).unwrap().0;
            p.logits[c][k] = base - h;
            let fm = objective_grad(&m, &p, linear, &cfg).unwrap().0;
            p.logits[c][k] = base;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[c][k]).abs() < 1e-6 * (1.0 + fd.abs()), "{c} {k}: {fd} vs {}", g[c][k]);
        }
    }

    #[test]
    fn optimization_never_worsens_the_objective() {
        let (m, a, b) = setup();
        let p = SplinePath::linear(&a, &b, m.spec(), 1e-3).unwrap();
        let cfg = GeodesicConfig { iterations: 30, step_size: 0.05, points: 8, ..Default::default() };
        let r = optimize_geodesic(&m, p.clone(), &cfg).unwrap();
        assert!(r.objective <= r.initial_objective);
        let z = optimize_geodesic(&m, p.clone(), &GeodesicConfig { iterations: 0, ..cfg }).unwrap();
        assert_eq!(z.path, p);
    }

    #[test]
    fn samples_follow_the_path() {
        let (m, a, b) = setup();
        let p = SplinePath::linear(&a, &b, m.spec(), 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = sample_along_path(&p, &[0.0, 1.0], 5, &mut rng).unwrap();
        assert!(grid[0].iter().all(|g| *g == a) && grid[1].iter().all(|g| *g == b));
        let pos = arc_length_positions(&p, &GeodesicConfig::default(), 16).unwrap();
        assert_eq!((pos[0], pos[15]), (0.0, 1.0));
        assert!(pos.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn validity_averages_by_location() {
        let spec = GraphSpec::new(3, 3, 3).unwrap();
        let ok = Graph::from_parts(&spec, &[0, 0], &[(0, 1, 1)]).unwrap();
        let bad = Graph::from_parts(&spec, &[0, 0], &[]).unwrap();
        let rules = ValenceRules::default();
        assert_eq!(path_validity(&[vec![ok.clone(), bad.clone()], vec![bad.clone(), ok.clone()]], &rules), 0.5);
        assert_eq!(path_validity(&[vec![ok.clone(); 3]], &rules), 1.0);
        assert_eq!(path_validity(&[vec![bad; 3]], &rules), 0.0);
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test_greater(&[1.0, 1.0, 1.0]) - 0.125).abs() < 1e-12);
        assert!((sign_test_greater(&[1.0, -1.0, 0.0]) - 0.75).abs() < 1e-12);
        assert_eq!(sign_test_greater(&[0.0, 0.0]), 1.0);
        let many = vec![1.0; 200];
        assert!(sign_test_greater(&many) < 1e-50);
    }

    #[test]
    fn bins_pair_methods_by_pair_index() {
        let rec = |pair, method: &str, bin, validity| PathRecord {
            pair,
            method: method.into(),
            bin,
            distance: 0.0,
            validity,
            energy: 0.0,
        };
        let rows = vec![
            rec(0, "energy", 0, 1.0),
            rec(0, "cost", 0, 0.5),
            rec(1, "cost", 0, 0.0),
            rec(1, "energy", 0, 0.5),
            rec(2, "energy", 0, 0.75),
            rec(2, "cost", 0, 0.25),
            rec(3, "energy", 1, 0.0),
            rec(3, "cost", 1, 0.5),
            // unpaired rows are ignored
            rec(4, "energy", 1, 1.0),
        ];
        let s = summarize_bins(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].bin, s[0].pairs), (0, 3));
        assert!((s[0].energy_validity - 0.75).abs() < 1e-12);
        assert!((s[0].cost_validity - 0.25).abs() < 1e-12);
        assert!((s[0].p_value - 0.125).abs() < 1e-12);
        assert_eq!(s[1].pairs, 1);
        assert_eq!(s[1].p_value, 1.0);
    }
}
