//! Python bindings. Configuration crosses the boundary as the same JSON
//! document the command-line tool reads.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gem_core::config::GemConfig;
use gem_core::dataset::{generate_toy_dataset, Dataset};
use gem_core::energy::Potential;
use gem_core::geodesics::{compare_pair, GeodesicConfig};
use gem_core::metrics::{canonical_hash, vun_metrics};
use gem_core::oracle::mixing_tv;
use gem_core::proposals::ProposalConfig;
use gem_core::sampler::{sample, NodeCountHistogram};
use gem_core::training::train;
use gem_core::GemError;

fn py_err(e: GemError) -> PyErr {
    if e.is_user_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn config(json: Option<&str>) -> PyResult<GemConfig> {
    match json {
        Some(text) => GemConfig::from_json(text).map_err(py_err),
        None => Ok(GemConfig::default()),
    }
}

#[pyclass(frozen, eq, from_py_object, module = "gem")]
#[derive(Clone, Copy, PartialEq)]
pub struct GraphSpec {
    inner: gem_core::GraphSpec,
}

#[pymethods]
impl GraphSpec {
    #[new]
    fn new(n_max: usize, l_node: usize, l_edge: usize) -> PyResult<Self> {
        Ok(GraphSpec { inner: gem_core::GraphSpec::new(n_max, l_node, l_edge).map_err(py_err)? })
    }

    #[getter]
    fn n_max(&self) -> usize {
        self.inner.n_max
    }

    #[getter]
    fn l_node(&self) -> usize {
        self.inner.l_node
    }

    #[getter]
    fn l_edge(&self) -> usize {
        self.inner.l_edge
    }

    fn __repr__(&self) -> String {
        format!("GraphSpec(n_max={}, l_node={}, l_edge={})", self.inner.n_max, self.inner.l_node, self.inner.l_edge)
    }
}

/// A graph with node labels and `(i, j, class)` edges, `i < j`.
#[pyclass(frozen, eq, from_py_object, module = "gem")]
#[derive(Clone, PartialEq)]
pub struct Graph {
    inner: gem_core::Graph,
}

#[pymethods]
impl Graph {
    #[new]
    fn new(spec: &GraphSpec, node_labels: Vec<usize>, edges: Vec<(usize, usize, usize)>) -> PyResult<Self> {
        Ok(Graph { inner: gem_core::Graph::from_parts(&spec.inner, &node_labels, &edges).map_err(py_err)? })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn node_labels(&self) -> Vec<usize> {
        self.inner.active_nodes().to_vec()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize, usize)> {
        self.inner.edges()
    }

    /// Hash that is equal for isomorphic graphs.
    fn canonical_hash(&self) -> u64 {
        canonical_hash(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Graph(n={}, edges={})", self.inner.n(), self.inner.edge_count())
    }
}

fn unwrap_graphs(graphs: &[Graph]) -> Vec<gem_core::Graph> {
    graphs.iter().map(|g| g.inner.clone()).collect()
}

fn wrap_graphs(graphs: Vec<gem_core::Graph>) -> Vec<Graph> {
    graphs.into_iter().map(|inner| Graph { inner }).collect()
}

#[pyclass(skip_from_py_object, module = "gem")]
#[derive(Clone)]
pub struct EnergyModel {
    inner: gem_core::EnergyModel,
}

#[pymethods]
impl EnergyModel {
    #[new]
    #[pyo3(signature = (spec, hidden=16, layers=2, seed=0))]
    fn new(spec: &GraphSpec, hidden: usize, layers: usize, seed: u64) -> PyResult<Self> {
        Ok(EnergyModel { inner: gem_core::EnergyModel::new(spec.inner, hidden, layers, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(EnergyModel { inner: gem_core::EnergyModel::load(path.as_ref()).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref(), 0).map_err(py_err)
    }

    #[getter]
    fn spec(&self) -> GraphSpec {
        GraphSpec { inner: *self.inner.spec() }
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Calibration recorded after training, as JSON.
    #[getter]
    fn calibration(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.calibration).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn energy(&self, graph: &Graph) -> PyResult<f64> {
        self.inner.energy(&graph.inner).map_err(py_err)
    }

    /// Gradient of the energy in the padded one-hot embedding layout.
    fn gradient(&self, graph: &Graph) -> PyResult<Vec<f64>> {
        Ok(self.inner.evaluate_graph(&graph.inner).map_err(py_err)?.grad)
    }

    /// Trains in place with the `training` section of `config`. Returns the
    /// history as `(step, flow_loss, cl_loss, v_threshold, mean_neg_energy)`.
    #[pyo3(signature = (graphs, config=None))]
    #[allow(clippy::type_complexity)]
    fn train(
        &mut self,
        py: Python<'_>,
        graphs: Vec<Graph>,
        config: Option<&str>,
    ) -> PyResult<Vec<(usize, f64, Option<f64>, f64, Option<f64>)>> {
        let cfg = self::config(config)?;
        let data = Dataset::new(*self.inner.spec(), unwrap_graphs(&graphs)).map_err(py_err)?;
        let model = &mut self.inner;
        let report = py.detach(|| train(model, &data, &cfg.training, None, |_| {})).map_err(py_err)?;
        Ok(report
            .history
            .rows
            .into_iter()
            .map(|r| (r.step, r.flow_loss, r.cl_loss, r.v_threshold, r.mean_neg_energy))
            .collect())
    }

    /// Noise-started samples using the `sampler` section of `config`; node
    /// counts follow `reference`.
    #[pyo3(signature = (reference, chains=None, steps=None, seed=None, config=None))]
    fn sample(
        &self,
        py: Python<'_>,
        reference: Vec<Graph>,
        chains: Option<usize>,
        steps: Option<usize>,
        seed: Option<u64>,
        config: Option<&str>,
    ) -> PyResult<Vec<Graph>> {
        let cfg = self::config(config)?;
        let sc = cfg.sampler;
        let mut s = sc.sampler;
        if sc.use_model_threshold && s.v_threshold == f64::NEG_INFINITY {
            if let Some(t) = self.inner.calibration.v_threshold {
                s.v_threshold = t;
            }
        }
        let refs = unwrap_graphs(&reference);
        let hist = NodeCountHistogram::from_graphs(&refs);
        let model = &self.inner;
        let r = py
            .detach(|| {
                sample(
                    model,
                    sc.init,
                    &hist,
                    &refs,
                    &s,
                    chains.unwrap_or(sc.chains),
                    steps.unwrap_or(sc.steps),
                    seed.unwrap_or(sc.seed),
                    false,
                    sc.threads,
                )
            })
            .map_err(py_err)?;
        Ok(wrap_graphs(r.final_graphs()))
    }

    /// Validity and mean energy of energy-weighted and cost-only paths
    /// between two graphs with equal node counts.
    #[pyo3(signature = (a, b, config=None, seed=0))]
    fn compare_paths(&self, a: &Graph, b: &Graph, config: Option<&str>, seed: u64) -> PyResult<Vec<(String, f64, f64)>> {
        let cfg = self::config(config)?;
        let g: GeodesicConfig = cfg.geodesic.geodesic;
        let rows = compare_pair(&self.inner, &a.inner, &b.inner, &g, &cfg.rules, 0, seed).map_err(py_err)?;
        Ok(rows.into_iter().map(|r| (r.method, r.validity, r.energy)).collect())
    }
}

/// Valid toy graphs from the `data` section of `config`.
#[pyfunction]
#[pyo3(signature = (size=None, seed=None, config=None))]
fn toy_dataset(size: Option<usize>, seed: Option<u64>, config: Option<&str>) -> PyResult<Vec<Graph>> {
    let cfg = self::config(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(cfg.data.seed));
    let d = generate_toy_dataset(&cfg.spec, &cfg.rules, &cfg.data.toy, size.unwrap_or(cfg.data.size), &mut rng)
        .map_err(py_err)?;
    Ok(wrap_graphs(d.graphs))
}

#[pyfunction]
#[pyo3(signature = (graph, config=None))]
fn is_valid(graph: &Graph, config: Option<&str>) -> PyResult<bool> {
    Ok(self::config(config)?.rules.is_valid(&graph.inner))
}

/// `(validity, uniqueness, novelty, vu, vun)` of `samples` against `train`.
#[pyfunction]
#[pyo3(signature = (samples, train, config=None))]
fn vun(samples: Vec<Graph>, train: Vec<Graph>, config: Option<&str>) -> PyResult<(f64, f64, f64, f64, f64)> {
    let rules = self::config(config)?.rules;
    let v = vun_metrics(&unwrap_graphs(&samples), &unwrap_graphs(&train), &rules);
    Ok((v.validity, v.uniqueness, v.novelty, v.vu, v.vun))
}

/// Total variation of a mixing chain against the exact Gibbs law on the
/// 64-state three-node space.
#[pyfunction]
#[pyo3(signature = (steps=1_000_000, seed=7))]
fn oracle_check_tiny(py: Python<'_>, steps: usize, seed: u64) -> PyResult<f64> {
    let spec = gem_core::GraphSpec::new(3, 2, 2).map_err(py_err)?;
    let model = gem_core::EnergyModel::new(spec, 8, 1, 2024).map_err(py_err)?;
    let cfg = ProposalConfig::fixed(1.0, 0.5, 0.5, 1.0);
    py.detach(|| mixing_tv(&model, 3, &cfg, steps, seed)).map_err(py_err)
}

#[pymodule]
fn gem(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<GraphSpec>()?;
    m.add_class::<Graph>()?;
    m.add_class::<EnergyModel>()?;
    m.add_function(wrap_pyfunction!(toy_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(is_valid, m)?)?;
    m.add_function(wrap_pyfunction!(vun, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_check_tiny, m)?)?;
    Ok(())
}
