//! Graph data model and its one-hot embedding.
//!
//! A graph lives in a padded container of `n_max` nodes. Only the first `n`
//! nodes are active; labels outside the active region hold [`PAD`] and never
//! enter costs, energies, or proposals. Edges are categorical labels on every
//! unordered node pair, stored once for `i < j`, with class 0 meaning "no edge".
//!
//! The embedding layout is fixed: `n_max` node blocks of width `l_node` in node
//! order, followed by `C(n_max, 2)` pair blocks of width `l_edge` in
//! lexicographic `(i, j)` order. Every gradient in the crate uses this layout.

use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};

/// Label stored in padded (inactive) node and pair slots.
pub const PAD: usize = 0;

/// Edge class reserved for "no edge".
pub const NO_EDGE: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GraphSpec {
    pub n_max: usize,
    pub l_node: usize,
    pub l_edge: usize,
}

impl GraphSpec {
    pub fn new(n_max: usize, l_node: usize, l_edge: usize) -> Result<Self> {
        let spec = GraphSpec { n_max, l_node, l_edge };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if self.n_max < 1 {
            return Err(GemError::InvalidSpec("n_max must be at least 1".into()));
        }
        if self.l_node < 1 {
            return Err(GemError::InvalidSpec("l_node must be at least 1".into()));
        }
        if self.l_edge < 2 {
            return Err(GemError::InvalidSpec(
                "l_edge must be at least 2 (class 0 is the absent edge)".into(),
            ));
        }
        Ok(())
    }

    pub fn pair_slots(&self) -> usize {
        pair_count(self.n_max)
    }

    /// Length of the flat embedding vector.
    pub fn embedding_dim(&self) -> usize {
        self.n_max * self.l_node + self.pair_slots() * self.l_edge
    }

    pub fn node_offset(&self, i: usize) -> usize {
        i * self.l_node
    }

    pub fn pair_offset(&self, i: usize, j: usize) -> usize {
        self.n_max * self.l_node + pair_index(i, j, self.n_max) * self.l_edge
    }

    /// Number of single-site edits available on a graph with `n` active nodes.
    pub fn single_edit_count(&self, n: usize) -> usize {
        n * (self.l_node - 1) + pair_count(n) * (self.l_edge - 1)
    }
}

/// `C(n, 2)`.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Lexicographic index of the unordered pair `(i, j)`, `i < j < n`.
pub fn pair_index(i: usize, j: usize, n: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

/// All pairs `i < j < n` in lexicographic order.
pub fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Graph {
    n: usize,
    node_labels: Vec<usize>,
    edge_labels: Vec<usize>,
}

impl Graph {
    /// All active nodes at class 0, no edges.
    pub fn empty(spec: &GraphSpec, n: usize) -> Result<Self> {
        if n > spec.n_max {
            return Err(GemError::MalformedGraph(format!(
                "active node count {n} exceeds n_max {}",
                spec.n_max
            )));
        }
        Ok(Graph {
            n,
            node_labels: vec![PAD; spec.n_max],
            edge_labels: vec![NO_EDGE; spec.pair_slots()],
        })
    }

    /// Builds a graph from active node labels and a list of `(i, j, class)`
    /// edges. Pairs not listed are absent; `(i, j)` and `(j, i)` are the same pair.
    pub fn from_parts(
        spec: &GraphSpec,
        node_labels: &[usize],
        edges: &[(usize, usize, usize)],
    ) -> Result<Self> {
        let n = node_labels.len();
        let mut g = Graph::empty(spec, n)?;
        g.node_labels[..n].copy_from_slice(node_labels);
        for &(a, b, class) in edges {
            if a == b || a >= n || b >= n {
                return Err(GemError::MalformedGraph(format!(
                    "edge ({a}, {b}) outside active nodes 0..{n}"
                )));
            }
            let (i, j) = (a.min(b), a.max(b));
            g.edge_labels[pair_index(i, j, spec.n_max)] = class;
        }
        g.validate(spec)?;
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_max(&self) -> usize {
        self.node_labels.len()
    }

    pub fn node(&self, i: usize) -> usize {
        self.node_labels[i]
    }

    /// Edge class of the unordered pair `{a, b}`.
    pub fn edge(&self, a: usize, b: usize) -> usize {
        let (i, j) = (a.min(b), a.max(b));
        self.edge_labels[pair_index(i, j, self.n_max())]
    }

    pub fn set_node(&mut self, i: usize, class: usize) {
        self.node_labels[i] = class;
    }

    pub fn set_edge(&mut self, a: usize, b: usize, class: usize) {
        let (i, j) = (a.min(b), a.max(b));
        let n_max = self.n_max();
        self.edge_labels[pair_index(i, j, n_max)] = class;
    }

    pub fn active_nodes(&self) -> &[usize] {
        &self.node_labels[..self.n]
    }

    /// Non-absent edges `(i, j, class)` with `i < j`, lexicographic.
    pub fn edges(&self) -> Vec<(usize, usize, usize)> {
        pairs(self.n)
            .filter_map(|(i, j)| {
                let c = self.edge(i, j);
                (c != NO_EDGE).then_some((i, j, c))
            })
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        pairs(self.n).filter(|&(i, j)| self.edge(i, j) != NO_EDGE).count()
    }

    /// Number of non-absent edges incident to each active node.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for (i, j, _) in self.edges() {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn validate(&self, spec: &GraphSpec) -> Result<()> {
        if self.node_labels.len() != spec.n_max || self.edge_labels.len() != spec.pair_slots() {
            return Err(GemError::MalformedGraph(format!(
                "container sized for n_max {} but spec has n_max {}",
                self.node_labels.len(),
                spec.n_max
            )));
        }
        if self.n > spec.n_max {
            return Err(GemError::MalformedGraph(format!(
                "active node count {} exceeds n_max {}",
                self.n, spec.n_max
            )));
        }
        for (i, &c) in self.node_labels.iter().enumerate() {
            if i < self.n && c >= spec.l_node {
                return Err(GemError::MalformedGraph(format!(
                    "node {i} has class {c} but l_node = {}",
                    spec.l_node
                )));
            }
            if i >= self.n && c != PAD {
                return Err(GemError::MalformedGraph(format!("padded node {i} is not PAD")));
            }
        }
        for (i, j) in pairs(spec.n_max) {
            let c = self.edge_labels[pair_index(i, j, spec.n_max)];
            let active = j < self.n;
            if active && c >= spec.l_edge {
                return Err(GemError::MalformedGraph(format!(
                    "pair ({i}, {j}) has class {c} but l_edge = {}",
                    spec.l_edge
                )));
            }
            if !active && c != NO_EDGE {
                return Err(GemError::MalformedGraph(format!(
                    "padded pair ({i}, {j}) carries an edge"
                )));
            }
        }
        Ok(())
    }

    /// Uniform labels on every active node and pair.
    pub fn uniform<R: rand::Rng + ?Sized>(spec: &GraphSpec, n: usize, rng: &mut R) -> Result<Self> {
        let mut g = Graph::empty(spec, n)?;
        for i in 0..n {
            g.set_node(i, rng.gen_range(0..spec.l_node));
        }
        for (i, j) in pairs(n) {
            g.set_edge(i, j, rng.gen_range(0..spec.l_edge));
        }
        Ok(g)
    }

    /// Number of sites (nodes plus pairs) whose labels differ.
    pub fn site_distance(&self, other: &Graph) -> usize {
        let nodes = (0..self.n).filter(|&i| self.node(i) != other.node(i)).count();
        let pairs = pairs(self.n).filter(|&(i, j)| self.edge(i, j) != other.edge(i, j)).count();
        nodes + pairs
    }
}

/// Flat real-valued vector in the fixed embedding layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn zeros(spec: &GraphSpec) -> Self {
        Embedding(vec![0.0; spec.embedding_dim()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn node_block(&self, spec: &GraphSpec, i: usize) -> &[f64] {
        let o = spec.node_offset(i);
        &self.0[o..o + spec.l_node]
    }

    pub fn pair_block(&self, spec: &GraphSpec, i: usize, j: usize) -> &[f64] {
        let o = spec.pair_offset(i, j);
        &self.0[o..o + spec.l_edge]
    }

    pub fn node_block_mut(&mut self, spec: &GraphSpec, i: usize) -> &mut [f64] {
        let o = spec.node_offset(i);
        &mut self.0[o..o + spec.l_node]
    }

    pub fn pair_block_mut(&mut self, spec: &GraphSpec, i: usize, j: usize) -> &mut [f64] {
        let o = spec.pair_offset(i, j);
        &mut self.0[o..o + spec.l_edge]
    }
}

/// Embedding coordinates of the blocks belonging to the first `n` nodes, in
/// layout order.
pub fn active_indices(spec: &GraphSpec, n: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..n * spec.l_node).collect();
    for (i, j) in pairs(n) {
        let o = spec.pair_offset(i, j);
        out.extend(o..o + spec.l_edge);
    }
    out.sort_unstable();
    out
}

/// One-hot embedding; padded blocks stay zero.
pub fn embed(g: &Graph, spec: &GraphSpec) -> Result<Embedding> {
    g.validate(spec)?;
    let mut e = Embedding::zeros(spec);
    for i in 0..g.n() {
        e.0[spec.node_offset(i) + g.node(i)] = 1.0;
    }
    for (i, j) in pairs(g.n()) {
        e.0[spec.pair_offset(i, j) + g.edge(i, j)] = 1.0;
    }
    Ok(e)
}

/// Argmax per active block, ties to the lowest class index.
pub fn decode(e: &Embedding, spec: &GraphSpec, n: usize) -> Result<Graph> {
    if e.len() != spec.embedding_dim() {
        return Err(GemError::SizeMismatch(format!(
            "embedding has length {} but spec needs {}",
            e.len(),
            spec.embedding_dim()
        )));
    }
    let mut g = Graph::empty(spec, n)?;
    for i in 0..n {
        g.set_node(i, argmax(e.node_block(spec, i)));
    }
    for (i, j) in pairs(n) {
        g.set_edge(i, j, argmax(e.pair_block(spec, i, j)));
    }
    Ok(g)
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = k;
        }
    }
    best
}

/// A bijection on `{0, .., n-1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &k in &map {
            if k >= map.len() || seen[k] {
                return Err(GemError::InvalidPermutation(format!("{map:?}")));
            }
            seen[k] = true;
        }
        Ok(Permutation(map))
    }

    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn apply(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &k) in self.0.iter().enumerate() {
            inv[k] = i;
        }
        Permutation(inv)
    }

    /// `(self ∘ other)(i) = self(other(i))`.
    pub fn compose(&self, other: &Permutation) -> Self {
        Permutation(other.0.iter().map(|&k| self.0[k]).collect())
    }

    pub fn random<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        use rand::seq::SliceRandom;
        let mut map: Vec<usize> = (0..n).collect();
        map.shuffle(rng);
        Permutation(map)
    }
}

/// Relabels nodes: `(σ·x)_i = x_{σ(i)}` and `(σ·x)_{ij} = x_{σ(i)σ(j)}`.
pub fn permute(g: &Graph, sigma: &Permutation) -> Result<Graph> {
    if sigma.len() != g.n() {
        return Err(GemError::InvalidPermutation(format!(
            "permutation acts on {} nodes but graph has {} active",
            sigma.len(),
            g.n()
        )));
    }
    let mut out = g.clone();
    for i in 0..g.n() {
        out.set_node(i, g.node(sigma.apply(i)));
    }
    for (i, j) in pairs(g.n()) {
        out.set_edge(i, j, g.edge(sigma.apply(i), sigma.apply(j)));
    }
    Ok(out)
}

/// `λ_V‖x̂_V − ŷ_V‖² + λ_E‖x̂_E − ŷ_E‖²` for hard graphs: each differing site
/// contributes the squared distance 2 between two distinct one-hots.
pub fn local_cost(x: &Graph, y: &Graph, lambda_v: f64, lambda_e: f64) -> Result<f64> {
    if x.n() != y.n() || x.n_max() != y.n_max() {
        return Err(GemError::SizeMismatch(format!(
            "local cost between graphs with {} and {} active nodes",
            x.n(),
            y.n()
        )));
    }
    let nodes = (0..x.n()).filter(|&i| x.node(i) != y.node(i)).count();
    let edges = pairs(x.n()).filter(|&(i, j)| x.edge(i, j) != y.edge(i, j)).count();
    Ok(2.0 * (lambda_v * nodes as f64 + lambda_e * edges as f64))
}

/// Weighted squared distance between two (possibly soft) embeddings over the
/// active blocks of an `n`-node graph.
pub fn local_cost_embeddings(
    a: &Embedding,
    b: &Embedding,
    spec: &GraphSpec,
    n: usize,
    lambda_v: f64,
    lambda_e: f64,
) -> f64 {
    let sq = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    let nodes: f64 = (0..n).map(|i| sq(a.node_block(spec, i), b.node_block(spec, i))).sum();
    let edges: f64 = pairs(n).map(|(i, j)| sq(a.pair_block(spec, i, j), b.pair_block(spec, i, j))).sum();
    lambda_v * nodes + lambda_e * edges
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Site {
    Node(usize),
    Pair(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edit {
    pub site: Site,
    pub new_class: usize,
}

impl Graph {
    pub fn label_at(&self, site: Site) -> usize {
        match site {
            Site::Node(i) => self.node(i),
            Site::Pair(i, j) => self.edge(i, j),
        }
    }

    /// Active sites: nodes by index, then pairs lexicographically.
    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        (0..self.n)
            .map(Site::Node)
            .chain(pairs(self.n).map(|(i, j)| Site::Pair(i, j)))
    }
}

/// Every single-site edit of `x`, nodes first (by index, then class), then
/// pairs (lexicographic, then class).
pub fn enumerate_edits(x: &Graph, spec: &GraphSpec) -> Vec<Edit> {
    let mut out = Vec::with_capacity(spec.single_edit_count(x.n()));
    for site in x.sites() {
        let classes = match site {
            Site::Node(_) => spec.l_node,
            Site::Pair(..) => spec.l_edge,
        };
        let cur = x.label_at(site);
        out.extend((0..classes).filter(|&c| c != cur).map(|new_class| Edit { site, new_class }));
    }
    out
}

pub fn apply_edit(x: &Graph, e: &Edit, spec: &GraphSpec) -> Result<Graph> {
    let mut y = x.clone();
    match e.site {
        Site::Node(i) => {
            if i >= x.n() || e.new_class >= spec.l_node {
                return Err(GemError::InvalidEdit(format!("{e:?} on a graph with {} nodes", x.n())));
            }
            y.set_node(i, e.new_class);
        }
        Site::Pair(i, j) => {
            if i >= j || j >= x.n() || e.new_class >= spec.l_edge {
                return Err(GemError::InvalidEdit(format!("{e:?} on a graph with {} nodes", x.n())));
            }
            y.set_edge(i, j, e.new_class);
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(spec: &GraphSpec, n: usize, rng: &mut impl Rng) -> Graph {
        Graph::uniform(spec, n, rng).unwrap()
    }

    #[test]
    fn single_node_embedding() {
        let spec = GraphSpec::new(1, 3, 2).unwrap();
        let g = Graph::from_parts(&spec, &[1], &[]).unwrap();
        assert_eq!(embed(&g, &spec).unwrap().0, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn absent_edge_is_one_hot_at_zero() {
        let spec = GraphSpec::new(2, 2, 3).unwrap();
        let g = Graph::from_parts(&spec, &[0, 1], &[]).unwrap();
        let e = embed(&g, &spec).unwrap();
        assert_eq!(e.pair_block(&spec, 0, 1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn embed_rejects_bad_labels() {
        let spec = GraphSpec::new(2, 2, 2).unwrap();
        let mut g = Graph::empty(&spec, 2).unwrap();
        g.set_node(1, 5);
        assert!(matches!(embed(&g, &spec), Err(GemError::MalformedGraph(_))));
        assert!(Graph::from_parts(&spec, &[0, 1], &[(0, 1, 2)]).is_err());
    }

    #[test]
    fn padded_blocks_are_zero() {
        let spec = GraphSpec::new(4, 2, 2).unwrap();
        let g = Graph::from_parts(&spec, &[1, 0], &[(0, 1, 1)]).unwrap();
        let e = embed(&g, &spec).unwrap();
        for i in 2..4 {
            assert!(e.node_block(&spec, i).iter().all(|&v| v == 0.0));
        }
        for (i, j) in pairs(4).filter(|&(_, j)| j >= 2) {
            assert!(e.pair_block(&spec, i, j).iter().all(|&v| v == 0.0));
        }
        assert_eq!(e.0.iter().sum::<f64>(), 3.0);
    }

    #[test]
    fn decode_argmax_and_ties() {
        let spec = GraphSpec::new(1, 3, 2).unwrap();
        let d = |v: Vec<f64>| decode(&Embedding(v), &spec, 1).unwrap().node(0);
        assert_eq!(d(vec![0.0, 1.0, 0.0]), 1);
        assert_eq!(d(vec![0.2, 0.5, 0.3]), 1);
        assert_eq!(d(vec![0.5, 0.5, 0.0]), 0);
    }

    #[test]
    fn round_trip_exhaustive_tiny() {
        let spec = GraphSpec::new(3, 2, 2).unwrap();
        for n in 0..=3usize {
            let sites = n + pair_count(n);
            for code in 0..(1u32 << sites) {
                let mut g = Graph::empty(&spec, n).unwrap();
                let mut bit = 0;
                for i in 0..n {
                    g.set_node(i, ((code >> bit) & 1) as usize);
                    bit += 1;
                }
                for (i, j) in pairs(n) {
                    g.set_edge(i, j, ((code >> bit) & 1) as usize);
                    bit += 1;
                }
                let back = decode(&embed(&g, &spec).unwrap(), &spec, n).unwrap();
                assert_eq!(back, g);
            }
        }
    }

    #[test]
    fn round_trip_random() {
        let spec = GraphSpec::new(7, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = rng.gen_range(0..=7);
            let g = random_graph(&spec, n, &mut rng);
            assert_eq!(decode(&embed(&g, &spec).unwrap(), &spec, n).unwrap(), g);
        }
    }

    #[test]
    fn permutation_identity_and_swap() {
        let spec = GraphSpec::new(2, 3, 2).unwrap();
        let g = Graph::from_parts(&spec, &[0, 2], &[(0, 1, 1)]).unwrap();
        assert_eq!(permute(&g, &Permutation::identity(2)).unwrap(), g);
        let s = permute(&g, &Permutation::new(vec![1, 0]).unwrap()).unwrap();
        assert_eq!(s.active_nodes(), &[2, 0]);
        assert_eq!(s.edge(0, 1), 1);
    }

    #[test]
    fn permutation_rejects_non_bijection() {
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(Permutation::new(vec![0, 2]).is_err());
        let spec = GraphSpec::new(3, 2, 2).unwrap();
        let g = Graph::empty(&spec, 3).unwrap();
        assert!(permute(&g, &Permutation::identity(2)).is_err());
    }

    #[test]
    fn permutation_group_action() {
        let spec = GraphSpec::new(6, 3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.gen_range(1..=6);
            let g = random_graph(&spec, n, &mut rng);
            let s = Permutation::random(n, &mut rng);
            let t = Permutation::random(n, &mut rng);
            let back = permute(&permute(&g, &s).unwrap(), &s.inverse()).unwrap();
            assert_eq!(back, g);
            let two = permute(&permute(&g, &s).unwrap(), &t).unwrap();
            assert_eq!(two, permute(&g, &s.compose(&t)).unwrap());
        }
    }

    #[test]
    fn local_cost_values() {
        let spec = GraphSpec::new(3, 3, 2).unwrap();
        let x = Graph::from_parts(&spec, &[0, 1, 2], &[(0, 1, 1)]).unwrap();
        assert_eq!(local_cost(&x, &x, 0.3, 0.7).unwrap(), 0.0);
        let mut y = x.clone();
        y.set_node(2, 0);
        assert!((local_cost(&x, &y, 0.3, 0.7).unwrap() - 0.6).abs() < 1e-12);
        y.set_edge(1, 2, 1);
        assert!((local_cost(&x, &y, 0.3, 0.7).unwrap() - (0.6 + 1.4)).abs() < 1e-12);
        let short = Graph::empty(&spec, 2).unwrap();
        assert!(local_cost(&x, &short, 1.0, 1.0).is_err());
    }

    #[test]
    fn local_cost_matches_embedding_form() {
        let spec = GraphSpec::new(5, 3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..=5);
            let x = random_graph(&spec, n, &mut rng);
            let y = random_graph(&spec, n, &mut rng);
            let (lv, le) = (rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0));
            let direct = local_cost(&x, &y, lv, le).unwrap();
            let (ex, ey) = (embed(&x, &spec).unwrap(), embed(&y, &spec).unwrap());
            let via = local_cost_embeddings(&ex, &ey, &spec, n, lv, le);
            assert!((direct - via).abs() < 1e-12);
            assert_eq!(direct, local_cost(&y, &x, lv, le).unwrap());
            assert!(direct >= 0.0);
            assert_eq!(direct == 0.0, x == y);
        }
    }

    #[test]
    fn edit_counts() {
        let s1 = GraphSpec::new(1, 3, 2).unwrap();
        assert_eq!(enumerate_edits(&Graph::empty(&s1, 1).unwrap(), &s1).len(), 2);
        let s3 = GraphSpec::new(3, 2, 2).unwrap();
        assert_eq!(enumerate_edits(&Graph::empty(&s3, 3).unwrap(), &s3).len(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (n_max, ln, le) in [(4, 2, 2), (5, 3, 4), (8, 4, 3), (2, 1, 2)] {
            let spec = GraphSpec::new(n_max, ln, le).unwrap();
            for n in 0..=n_max {
                let g = random_graph(&spec, n, &mut rng);
                assert_eq!(enumerate_edits(&g, &spec).len(), spec.single_edit_count(n));
            }
        }
    }

    #[test]
    fn edits_are_single_site() {
        let spec = GraphSpec::new(4, 3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_graph(&spec, 4, &mut rng);
        for e in enumerate_edits(&x, &spec) {
            let y = apply_edit(&x, &e, &spec).unwrap();
            assert_eq!(x.site_distance(&y), 1);
            let c = local_cost(&x, &y, 0.25, 0.75).unwrap();
            let expected = match e.site {
                Site::Node(_) => 0.5,
                Site::Pair(..) => 1.5,
            };
            assert!((c - expected).abs() < 1e-12);
            let undo = Edit { site: e.site, new_class: x.label_at(e.site) };
            assert_eq!(apply_edit(&y, &undo, &spec).unwrap(), x);
        }
    }

    #[test]
    fn node_edit_touches_one_block() {
        let spec = GraphSpec::new(3, 3, 2).unwrap();
        let x = Graph::from_parts(&spec, &[0, 1, 1], &[(0, 2, 1)]).unwrap();
        let y = apply_edit(&x, &Edit { site: Site::Node(0), new_class: 2 }, &spec).unwrap();
        let (ex, ey) = (embed(&x, &spec).unwrap(), embed(&y, &spec).unwrap());
        let changed: Vec<usize> = (0..ex.len()).filter(|&k| ex.0[k] != ey.0[k]).collect();
        assert_eq!(changed, vec![0, 2]);
    }

    #[test]
    fn apply_edit_out_of_range() {
        let spec = GraphSpec::new(4, 2, 2).unwrap();
        let x = Graph::empty(&spec, 2).unwrap();
        let bad = [
            Edit { site: Site::Node(3), new_class: 1 },
            Edit { site: Site::Pair(0, 3), new_class: 1 },
            Edit { site: Site::Pair(1, 0), new_class: 1 },
            Edit { site: Site::Node(0), new_class: 2 },
        ];
        for e in bad {
            assert!(apply_edit(&x, &e, &spec).is_err());
        }
    }
}
