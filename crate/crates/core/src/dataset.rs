//! Toy valence-rule graph family and JSON-lines persistence.
//!
//! One graph per line: `{"n": 3, "node_labels": [0, 1, 0], "edges": [[0, 1, 1], [1, 2, 2]]}`.
//! Only non-absent edges are stored, with `i < j`, sorted lexicographically.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};
use crate::graph::{pairs, Graph, GraphSpec, NO_EDGE};
use crate::sampler::NodeCountHistogram;

/// Per node class, the maximum weighted degree (edge class `k` weighs `k`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValenceRules {
    pub caps: Vec<usize>,
    #[serde(default = "yes")]
    pub connectivity_required: bool,
}

fn yes() -> bool {
    true
}

impl Default for ValenceRules {
    /// Three atom-like classes with caps 4, 3 and 2.
    fn default() -> Self {
        ValenceRules { caps: vec![4, 3, 2], connectivity_required: true }
    }
}

impl ValenceRules {
    pub fn check(&self, spec: &GraphSpec) -> Result<()> {
        if self.caps.len() != spec.l_node {
            return Err(GemError::Config(format!(
                "valence rules give {} caps for {} node classes",
                self.caps.len(),
                spec.l_node
            )));
        }
        Ok(())
    }

    pub fn weighted_degrees(&self, g: &Graph) -> Vec<usize> {
        let mut deg = vec![0; g.n()];
        for (i, j, c) in g.edges() {
            deg[i] += c;
            deg[j] += c;
        }
        deg
    }

    pub fn is_valid(&self, g: &Graph) -> bool {
        let caps_ok = self
            .weighted_degrees(g)
            .iter()
            .zip(g.active_nodes())
            .all(|(&d, &c)| self.caps.get(c).is_some_and(|&cap| d <= cap));
        caps_ok && (!self.connectivity_required || is_connected(g))
    }
}

/// Whether the non-absent edges connect all active nodes. The empty graph and
/// a single node count as connected.
pub fn is_connected(g: &Graph) -> bool {
    let n = g.n();
    if n <= 1 {
        return true;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for k in 0..n {
            if k != i && !seen[k] && g.edge(i, k) != NO_EDGE {
                seen[k] = true;
                stack.push(k);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

pub fn validity(g: &Graph, rules: &ValenceRules) -> bool {
    rules.is_valid(g)
}

/// Settings for the constructive toy generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub n_min: usize,
    pub n_max: usize,
    /// Relative frequency of each node class.
    pub class_weights: Vec<f64>,
    /// Probability of trying each extra edge or bond upgrade after the
    /// spanning tree is built.
    pub extra_edge_prob: f64,
    pub max_attempts: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { n_min: 4, n_max: 8, class_weights: vec![0.6, 0.2, 0.2], extra_edge_prob: 0.25, max_attempts: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: GraphSpec,
    pub graphs: Vec<Graph>,
}

impl Dataset {
    pub fn new(spec: GraphSpec, graphs: Vec<Graph>) -> Result<Self> {
        for g in &graphs {
            g.validate(&spec)?;
        }
        Ok(Dataset { spec, graphs })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn node_count_histogram(&self) -> NodeCountHistogram {
        NodeCountHistogram::from_graphs(&self.graphs)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_graphs(&mut w, &self.graphs)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path, spec: GraphSpec) -> Result<Self> {
        let f = File::open(path)
            .map_err(|e| GemError::InvalidArgument(format!("cannot open dataset {}: {e}", path.display())))?;
        let graphs = read_graphs(BufReader::new(f), &spec)?;
        Ok(Dataset { spec, graphs })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub n: usize,
    pub node_labels: Vec<usize>,
    pub edges: Vec<[usize; 3]>,
}

impl GraphRecord {
    pub fn from_graph(g: &Graph) -> Self {
        GraphRecord {
            n: g.n(),
            node_labels: g.active_nodes().to_vec(),
            edges: g.edges().into_iter().map(|(i, j, c)| [i, j, c]).collect(),
        }
    }

    pub fn to_graph(&self, spec: &GraphSpec) -> Result<Graph> {
        if self.node_labels.len() != self.n {
            return Err(GemError::MalformedGraph(format!(
                "n = {} but {} node labels given",
                self.n,
                self.node_labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for &[i, j, c] in &self.edges {
            if i >= j {
                return Err(GemError::MalformedGraph(format!("edge [{i}, {j}, {c}] must have i < j")));
            }
            if c == NO_EDGE {
                return Err(GemError::MalformedGraph(format!("edge [{i}, {j}] lists the absent class")));
            }
            if !seen.insert((i, j)) {
                return Err(GemError::MalformedGraph(format!("edge [{i}, {j}] listed twice")));
            }
        }
        let edges: Vec<_> = self.edges.iter().map(|&[i, j, c]| (i, j, c)).collect();
        Graph::from_parts(spec, &self.node_labels, &edges)
    }
}

pub fn write_graphs<W: Write>(w: &mut W, graphs: &[Graph]) -> Result<()> {
    for g in graphs {
        serde_json::to_writer(&mut *w, &GraphRecord::from_graph(g))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_graphs<R: BufRead>(r: R, spec: &GraphSpec) -> Result<Vec<Graph>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphRecord = serde_json::from_str(&line)
            .map_err(|e| GemError::MalformedGraph(format!("line {}: {e}", lineno + 1)))?;
        let g = rec
            .to_graph(spec)
            .map_err(|e| GemError::MalformedGraph(format!("line {}: {e}", lineno + 1)))?;
        out.push(g);
    }
    Ok(out)
}

pub fn write_graphs_file(path: &Path, graphs: &[Graph]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_graphs(&mut w, graphs)?;
    w.flush()?;
    Ok(())
}

/// One valid graph: random classes, a random spanning tree of single bonds
/// through nodes with spare capacity, then random extra bonds and upgrades.
pub fn generate_toy_graph<R: Rng + ?Sized>(
    spec: &GraphSpec,
    rules: &ValenceRules,
    cfg: &ToyConfig,
    rng: &mut R,
) -> Result<Graph> {
    rules.check(spec)?;
    if cfg.n_min < 1 || cfg.n_min > cfg.n_max || cfg.n_max > spec.n_max {
        return Err(GemError::Config(format!(
            "toy node range {}..={} must lie within 1..={}",
            cfg.n_min, cfg.n_max, spec.n_max
        )));
    }
    if cfg.class_weights.len() != spec.l_node {
        return Err(GemError::Config("class_weights must have one entry per node class".into()));
    }
    let classes = WeightedIndex::new(&cfg.class_weights).map_err(|e| GemError::Config(e.to_string()))?;
    let max_bond = spec.l_edge - 1;
    for _ in 0..cfg.max_attempts.max(1) {
        let n = rng.gen_range(cfg.n_min..=cfg.n_max);
        let labels: Vec<usize> = (0..n).map(|_| classes.sample(rng)).collect();
        let mut g = Graph::from_parts(spec, &labels, &[])?;
        let mut load = vec![0usize; n];
        let cap = |i: usize| rules.caps[labels[i]];
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut ok = true;
        for k in 1..n {
            let v = order[k];
            let open: Vec<usize> = order[..k].iter().copied().filter(|&u| load[u] < cap(u)).collect();
            if open.is_empty() || cap(v) == 0 {
                ok = false;
                break;
            }
            let u = *open.choose(rng).expect("non-empty");
            g.set_edge(u, v, 1);
            load[u] += 1;
            load[v] += 1;
        }
        if !ok {
            continue;
        }
        let mut sites: Vec<(usize, usize)> = pairs(n).collect();
        sites.shuffle(rng);
        for (i, j) in sites {
            if !rng.gen_bool(cfg.extra_edge_prob.clamp(0.0, 1.0)) {
                continue;
            }
            let cur = g.edge(i, j);
            if cur < max_bond && load[i] < cap(i) && load[j] < cap(j) {
                g.set_edge(i, j, cur + 1);
                load[i] += 1;
                load[j] += 1;
            }
        }
        debug_assert!(rules.is_valid(&g));
        return Ok(g);
    }
    Err(GemError::Unsatisfiable(format!("no valid graph after {} attempts", cfg.max_attempts)))
}

pub fn generate_toy_dataset<R: Rng + ?Sized>(
    spec: &GraphSpec,
    rules: &ValenceRules,
    cfg: &ToyConfig,
    size: usize,
    rng: &mut R,
) -> Result<Dataset> {
    let graphs = (0..size).map(|_| generate_toy_graph(spec, rules, cfg, rng)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { spec: *spec, graphs })
}

/// Fraction of non-absent pairs among the `C(n, 2)` active pairs.
pub fn edge_density(g: &Graph) -> f64 {
    let m = g.n() * g.n().saturating_sub(1) / 2;
    if m == 0 {
        0.0
    } else {
        g.edge_count() as f64 / m as f64
    }
}
