//! Learned scalar energies over graph embeddings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::checkpoint::{self, Checkpoint, ModelKind};
use crate::error::{GemError, Result};
use crate::graph::{embed, Embedding, Graph, GraphSpec};
use crate::network::{ActiveBlocks, InvariantNet, NetShape};

/// Energy value and its gradient in the embedding layout. Padded blocks of
/// the gradient are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyGradient {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Anything the samplers can descend: a scalar energy with an exact gradient
/// at any point of the embedding space, active region given by `n`.
pub trait Potential: Sync {
    fn spec(&self) -> &GraphSpec;

    fn evaluate(&self, e: &Embedding, n: usize) -> Result<EnergyGradient>;

    fn value(&self, e: &Embedding, n: usize) -> Result<f64> {
        Ok(self.evaluate(e, n)?.value)
    }

    fn evaluate_graph(&self, g: &Graph) -> Result<EnergyGradient> {
        self.evaluate(&embed(g, self.spec())?, g.n())
    }

    fn value_graph(&self, g: &Graph) -> Result<f64> {
        self.value(&embed(g, self.spec())?, g.n())
    }
}

/// Summary energies recorded after training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Calibration {
    /// Running average of training-data energies; the transport-to-mixing
    /// switch threshold.
    pub v_threshold: Option<f64>,
    pub data_mean: Option<f64>,
    pub data_std: Option<f64>,
    pub noise_mean: Option<f64>,
    pub noise_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModel {
    spec: GraphSpec,
    net: InvariantNet,
    pub calibration: Calibration,
}

impl EnergyModel {
    pub fn new(spec: GraphSpec, hidden: usize, layers: usize, seed: u64) -> Result<Self> {
        spec.check()?;
        if hidden == 0 {
            return Err(GemError::InvalidArgument("hidden width must be positive".into()));
        }
        let shape = NetShape { l_node: spec.l_node, l_edge: spec.l_edge, hidden, layers, time_input: false };
        Ok(EnergyModel { spec, net: InvariantNet::init(shape, seed), calibration: Calibration::default() })
    }

    pub fn from_net(spec: GraphSpec, net: InvariantNet) -> Result<Self> {
        let s = net.shape();
        if s.l_node != spec.l_node || s.l_edge != spec.l_edge || s.time_input {
            return Err(GemError::SizeMismatch("network shape does not match graph spec".into()));
        }
        Ok(EnergyModel { spec, net, calibration: Calibration::default() })
    }

    pub fn net(&self) -> &InvariantNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut InvariantNet {
        &mut self.net
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn energy(&self, g: &Graph) -> Result<f64> {
        self.value_graph(g)
    }

    /// Energy and its gradient with respect to every parameter.
    pub fn param_grad(&self, e: &Embedding, n: usize) -> Result<(f64, Vec<Mat>)> {
        let blocks = ActiveBlocks::from_embedding(e, &self.spec, n)?;
        let g = self.net.dense_grad(&blocks, None, false, true)?;
        Ok((g.value, g.params.expect("requested")))
    }

    /// `‖∇V(x_t) + v‖²` over the active region, and its parameter gradient.
    pub fn flow_loss(&self, x_t: &Embedding, n: usize, v: &Embedding) -> Result<(f64, Vec<Mat>)> {
        let blocks = ActiveBlocks::from_embedding(x_t, &self.spec, n)?;
        let target = ActiveBlocks::from_embedding(v, &self.spec, n)?;
        self.net.flow_loss(&blocks, &target.nodes, &target.pairs)
    }

    pub fn save(&self, path: &Path, step: usize) -> Result<()> {
        let ck = Checkpoint::new(ModelKind::Energy, self.spec, &self.net, self.calibration, None, step);
        checkpoint::write(path, &ck)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::read(path)?;
        if ck.kind != ModelKind::Energy {
            return Err(GemError::Config(format!("{} holds a {:?} model, not an energy", path.display(), ck.kind)));
        }
        let net = ck.network()?;
        let mut model = EnergyModel::from_net(ck.spec, net)?;
        model.calibration = ck.calibration;
        Ok(model)
    }
}

impl Potential for EnergyModel {
    fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    fn evaluate(&self, e: &Embedding, n: usize) -> Result<EnergyGradient> {
        let blocks = ActiveBlocks::from_embedding(e, &self.spec, n)?;
        let g = self.net.dense_grad(&blocks, None, true, false)?;
        let (nodes, pairs) = (g.nodes.expect("requested"), g.pairs.expect("requested"));
        Ok(EnergyGradient { value: g.value, grad: ActiveBlocks::scatter(&nodes, &pairs, &self.spec, n) })
    }

    fn value(&self, e: &Embedding, n: usize) -> Result<f64> {
        let blocks = ActiveBlocks::from_embedding(e, &self.spec, n)?;
        self.net.dense_eval(&blocks, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{permute, Permutation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(n_max: usize) -> EnergyModel {
        EnergyModel::new(GraphSpec::new(n_max, 3, 3).unwrap(), 8, 2, 11).unwrap()
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for (l_node, l_edge, h, layers, t) in [(3, 3, 8, 2, false), (2, 4, 5, 0, true), (1, 2, 16, 4, false)] {
            let shape = NetShape { l_node, l_edge, hidden: h, layers, time_input: t };
            let g = 1 + l_node + l_edge + usize::from(t);
            let expect = (l_node + 1) * h
                + (l_edge + 1) * h
                + (g + 1) * h
                + layers * (9 * h * h + 3 * h)
                + 3 * h * h
                + 2 * h
                + 1;
            assert_eq!(InvariantNet::init(shape, 0).param_count(), expect);
            assert_eq!(shape.param_count(), expect);
        }
    }

    #[test]
    fn energy_is_permutation_invariant() {
        let m = model(6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 1..=6 {
            let g = Graph::uniform(m.spec(), n, &mut rng).unwrap();
            let v = m.energy(&g).unwrap();
            for _ in 0..5 {
                let p = Permutation::random(n, &mut rng);
                let w = m.energy(&permute(&g, &p).unwrap()).unwrap();
                assert!((v - w).abs() < 1e-10, "{v} vs {w}");
            }
        }
    }

    #[test]
    fn padding_does_not_change_energy() {
        let small = model(4);
        let big = EnergyModel::from_net(GraphSpec::new(9, 3, 3).unwrap(), small.net().clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Graph::uniform(small.spec(), 4, &mut rng).unwrap();
        let g_big = Graph::from_parts(big.spec(), g.active_nodes(), &g.edges()).unwrap();
        let a = small.energy(&g).unwrap();
        let b = big.energy(&g_big).unwrap();
        assert!((a - b).abs() < 1e-12);
        let grad = big.evaluate_graph(&g_big).unwrap().grad;
        let spec = big.spec();
        for i in 4..9 {
            assert!(Embedding(grad.clone()).node_block(spec, i).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = Graph::uniform(m.spec(), 4, &mut rng).unwrap();
        let mut e = embed(&g, m.spec()).unwrap();
        for x in e.0.iter_mut() {
            if *x != 0.0 {
                *x = 0.7;
            }
        }
        let eg = m.evaluate(&e, 4).unwrap();
        let h = 1e-5;
        let active: Vec<usize> = {
            let spec = m.spec();
            let mut v: Vec<usize> = (0..4 * spec.l_node).collect();
            for (i, j) in crate::graph::pairs(4) {
                let o = spec.pair_offset(i, j);
                v.extend(o..o + spec.l_edge);
            }
            v
        };
        for k in active {
            let mut p = e.clone();
            let mut q = e.clone();
            p.0[k] += h;
            q.0[k] -= h;
            let fd = (m.value(&p, 4).unwrap() - m.value(&q, 4).unwrap()) / (2.0 * h);
            assert!((fd - eg.grad[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{k}: {fd} vs {}", eg.grad[k]);
        }
    }

    #[test]
    fn flow_loss_parameter_gradient_matches_finite_differences() {
        let mut m = EnergyModel::new(GraphSpec::new(4, 2, 3).unwrap(), 4, 1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Graph::uniform(m.spec(), 3, &mut rng).unwrap();
        let x = embed(&g, m.spec()).unwrap();
        let v = Embedding(x.0.iter().map(|a| 0.3 * a - 0.1).collect());
        let (_, grads) = m.flow_loss(&x, 3, &v).unwrap();
        let h = 1e-5;
        for t in [0, 4, 7, 12, m.net().params().len() - 4] {
            let dim = m.net().params()[t].dim();
            for idx in [(0, 0), (dim.0 - 1, dim.1 - 1)] {
                let base = m.net().params()[t][idx];
                m.net_mut().params_mut()[t][idx] = base + h;
                let fp = m.flow_loss(&x, 3, &v).unwrap().0;
                m.net_mut().params_mut()[t][idx] = base - h;
                let fm = m.flow_loss(&x, 3, &v).unwrap().0;
                m.net_mut().params_mut()[t][idx] = base;
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - grads[t][idx]).abs() < 1e-6 * (1.0 + fd.abs()), "{t} {idx:?}: {fd} vs {}", grads[t][idx]);
            }
        }
    }

    #[test]
    fn empty_graph_is_rejected() {
        let m = model(3);
        let e = Embedding::zeros(m.spec());
        assert!(m.evaluate(&e, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = model(5);
        m.calibration.v_threshold = Some(-1.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path, 17).unwrap();
        let back = EnergyModel::load(&path).unwrap();
        assert_eq!(back, m);
    }
}
