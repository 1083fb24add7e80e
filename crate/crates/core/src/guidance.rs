//! Property-guided sampling: a differentiable property regressor, the
//! energy-band time proxy and the composite potential
//! `V(x) + λ (f(x) - ζ)²`.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::checkpoint::{self, Checkpoint, ModelKind, PropertyMeta};
use crate::dataset::ValenceRules;
use crate::energy::{Calibration, EnergyGradient, Potential};
use crate::error::{GemError, Result};
use crate::graph::{embed, Embedding, Graph, GraphSpec};
#[cfg(test)]
use crate::graph::active_indices;
use crate::metrics::{canonical_hash, vun_metrics, Vun};
use crate::network::{ActiveBlocks, InvariantNet, NetShape};
use crate::training::{sample_interpolant, Adam};

/// The toy property: number of non-absent edges.
pub fn edge_count_property(g: &Graph) -> f64 {
    g.edge_count() as f64
}

/// Graph-to-scalar predictor. The network works on a standardized target;
/// [`PropertyMeta`] maps its output back to property units.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyRegressor {
    spec: GraphSpec,
    net: InvariantNet,
    meta: PropertyMeta,
}

/// Prediction with its input gradient and, for time-conditioned regressors,
/// its derivative in `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub value: f64,
    pub grad: Vec<f64>,
    pub dt: f64,
}

impl PropertyRegressor {
    pub fn new(spec: GraphSpec, net: InvariantNet, meta: PropertyMeta) -> Result<Self> {
        let s = net.shape();
        if s.l_node != spec.l_node || s.l_edge != spec.l_edge {
            return Err(GemError::SizeMismatch("regressor shape does not match graph spec".into()));
        }
        Ok(PropertyRegressor { spec, net, meta })
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn net(&self) -> &InvariantNet {
        &self.net
    }

    pub fn meta(&self) -> &PropertyMeta {
        &self.meta
    }

    pub fn time_conditioned(&self) -> bool {
        self.net.shape().time_input
    }

    fn time_arg(&self, t: f64) -> Option<f64> {
        self.time_conditioned().then_some(t)
    }

    /// Prediction in property units; `t` is ignored by clean regressors.
    pub fn predict(&self, e: &Embedding, n: usize, t: f64) -> Result<f64> {
        let blocks = ActiveBlocks::from_embedding(e, &self.spec, n)?;
        let out = self.net.dense_eval(&blocks, self.time_arg(t))?;
        Ok(self.meta.offset + self.meta.scale * out)
    }

    pub fn predict_graph(&self, g: &Graph, t: f64) -> Result<f64> {
        self.predict(&embed(g, &self.spec)?, g.n(), t)
    }

    pub fn predict_grad(&self, e: &Embedding, n: usize, t: f64) -> Result<Prediction> {
        let blocks = ActiveBlocks::from_embedding(e, &self.spec, n)?;
        let d = self.net.dense_grad(&blocks, self.time_arg(t), true, false)?;
        let s = self.meta.scale;
        let nodes = d.nodes.expect("requested") * s;
        let pairs = d.pairs.expect("requested") * s;
        Ok(Prediction {
            value: self.meta.offset + s * d.value,
            grad: ActiveBlocks::scatter(&nodes, &pairs, &self.spec, n),
            dt: d.time.unwrap_or(0.0) * s,
        })
    }

    pub fn save(&self, path: &Path, step: usize) -> Result<()> {
        let ck = Checkpoint::new(
            ModelKind::Regressor,
            self.spec,
            &self.net,
            Calibration::default(),
            Some(self.meta.clone()),
            step,
        );
        checkpoint::write(path, &ck)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::read(path)?;
        if ck.kind != ModelKind::Regressor {
            return Err(GemError::Config(format!("{} holds a {:?} model, not a regressor", path.display(), ck.kind)));
        }
        let meta = ck
            .property
            .clone()
            .ok_or_else(|| GemError::Config(format!("{} has no property metadata", path.display())))?;
        PropertyRegressor::new(ck.spec, ck.network()?, meta)
    }
}

/// Linear position of `v_x` between the noise band (`t = 0`) and the data
/// band (`t = 1`), clamped to `[0, 1]`.
pub fn time_proxy(v_x: f64, noise_mean: f64, data_mean: f64) -> Result<f64> {
    if !(noise_mean > data_mean) {
        return Err(GemError::InvalidArgument(format!(
            "noise band mean {noise_mean} must exceed data band mean {data_mean}"
        )));
    }
    Ok(((noise_mean - v_x) / (noise_mean - data_mean)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "threshold", rename_all = "lowercase")]
pub enum Constraint {
    Le(f64),
    Ge(f64),
}

impl Constraint {
    pub fn holds(&self, value: f64) -> bool {
        match *self {
            Constraint::Le(k) => value <= k,
            Constraint::Ge(k) => value >= k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Target property value.
    pub zeta: f64,
    pub lambda_prop: f64,
    /// Success criterion used when scoring guided samples.
    pub constraint: Constraint,
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_prop >= 0.0 && self.lambda_prop.is_finite()) {
            return Err(GemError::Config("lambda_prop must be non-negative".into()));
        }
        if !self.zeta.is_finite() {
            return Err(GemError::Config("zeta must be finite".into()));
        }
        Ok(())
    }
}

/// Energy bands for the time proxy, taken from a trained model's calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bands {
    pub noise_mean: f64,
    pub data_mean: f64,
}

impl Bands {
    pub fn from_calibration(c: &Calibration) -> Result<Self> {
        match (c.noise_mean, c.data_mean) {
            (Some(noise_mean), Some(data_mean)) if noise_mean > data_mean => Ok(Bands { noise_mean, data_mean }),
            _ => Err(GemError::Config("model calibration lacks ordered noise and data energy bands".into())),
        }
    }
}

/// `V(x) + λ (f(x, t(x)) - ζ)²`. Time-conditioned regressors see the energy
/// time proxy, whose dependence on `x` is included in the gradient.
pub struct ConditionalPotential<'a, P: Potential + ?Sized> {
    pub base: &'a P,
    pub regressor: &'a PropertyRegressor,
    pub guidance: GuidanceConfig,
    /// Required when the regressor is time-conditioned.
    pub bands: Option<Bands>,
}

impl<'a, P: Potential + ?Sized> ConditionalPotential<'a, P> {
    pub fn new(
        base: &'a P,
        regressor: &'a PropertyRegressor,
        guidance: GuidanceConfig,
        bands: Option<Bands>,
    ) -> Result<Self> {
        guidance.validate()?;
        if base.spec() != regressor.spec() {
            return Err(GemError::SizeMismatch("regressor and energy use different graph specs".into()));
        }
        if regressor.time_conditioned() && bands.is_none() {
            return Err(GemError::Config("a time-conditioned regressor needs energy bands".into()));
        }
        Ok(ConditionalPotential { base, regressor, guidance, bands })
    }
}

impl<P: Potential + ?Sized> Potential for ConditionalPotential<'_, P> {
    fn spec(&self) -> &GraphSpec {
        self.base.spec()
    }

    fn evaluate(&self, e: &Embedding, n: usize) -> Result<EnergyGradient> {
        let base = self.base.evaluate(e, n)?;
        let lambda = self.guidance.lambda_prop;
        if lambda == 0.0 {
            return Ok(base);
        }
        let (t, dt_dv) = match self.bands {
            Some(b) if self.regressor.time_conditioned() => {
                let width = b.noise_mean - b.data_mean;
                let raw = (b.noise_mean - base.value) / width;
                let slope = if raw > 0.0 && raw < 1.0 { -1.0 / width } else { 0.0 };
                (raw.clamp(0.0, 1.0), slope)
            }
            _ => (1.0, 0.0),
        };
        let p = self.regressor.predict_grad(e, n, t)?;
        let r = p.value - self.guidance.zeta;
        let w = 2.0 * lambda * r;
        let grad = base
            .grad
            .iter()
            .zip(&p.grad)
            .map(|(gv, gf)| gv + w * (gf + p.dt * dt_dv * gv))
            .collect();
        Ok(EnergyGradient { value: base.value + lambda * r * r, grad })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorConfig {
    pub hidden: usize,
    pub layers: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Train on noise interpolants with the time as an extra input.
    pub noise_conditioned: bool,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig { hidden: 16, layers: 2, steps: 2000, batch_size: 32, lr: 1e-3, noise_conditioned: false, seed: 0 }
    }
}

/// A regressor input: the graph fed to the network, its time and the clean
/// label.
fn corrupt<R: Rng + ?Sized>(g: &Graph, spec: &GraphSpec, t: f64, rng: &mut R) -> Result<Graph> {
    let x0 = Graph::uniform(spec, g.n(), rng)?;
    Ok(sample_interpolant(&x0, g, t, spec, rng)?.x_t)
}

/// Fits `f` to `labels` by squared error on the standardized target. The
/// noise-conditioned variant trains on `(x_t, t)` with `x_t` drawn between
/// uniform noise and the clean graph and `t ~ U[0, 1]`; labels stay clean.
pub fn train_regressor(
    spec: &GraphSpec,
    graphs: &[Graph],
    labels: &[f64],
    name: &str,
    cfg: &RegressorConfig,
) -> Result<PropertyRegressor> {
    if graphs.is_empty() || graphs.len() != labels.len() {
        return Err(GemError::InvalidArgument("need one label per training graph".into()));
    }
    if cfg.batch_size == 0 || cfg.hidden == 0 || !(cfg.lr > 0.0) {
        return Err(GemError::Config("regressor batch size, width and learning rate must be positive".into()));
    }
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let var = labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / labels.len() as f64;
    // constant labels give a constant predictor: scale 0 pins the output
    let scale = var.sqrt();
    let meta = PropertyMeta { name: name.to_string(), offset: mean, scale };
    let standardize = |y: f64| if scale > 0.0 { (y - mean) / scale } else { 0.0 };
    let shape = NetShape {
        l_node: spec.l_node,
        l_edge: spec.l_edge,
        hidden: cfg.hidden,
        layers: cfg.layers,
        time_input: cfg.noise_conditioned,
    };
    let mut net = InvariantNet::init(shape, cfg.seed);
    let mut opt = Adam::new(net.params(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = cfg.batch_size.min(graphs.len());
    for _ in 0..cfg.steps {
        let picks = index::sample(&mut rng, graphs.len(), batch).into_vec();
        let inputs = picks
            .iter()
            .map(|&i| {
                if cfg.noise_conditioned {
                    let t = rng.gen::<f64>();
                    Ok((corrupt(&graphs[i], spec, t, &mut rng)?, Some(t), standardize(labels[i])))
                } else {
                    Ok((graphs[i].clone(), None, standardize(labels[i])))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let terms = inputs
            .par_iter()
            .map(|(g, t, y)| {
                let blocks = ActiveBlocks::from_embedding(&embed(g, spec)?, spec, g.n())?;
                let d = net.dense_grad(&blocks, *t, false, true)?;
                Ok((d.value - y, d.params.expect("requested")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads: Vec<Mat> = net.params().iter().map(|p| Mat::zeros(p.dim())).collect();
        let w = 2.0 / terms.len() as f64;
        for (r, g) in &terms {
            for (acc, g) in grads.iter_mut().zip(g) {
                acc.scaled_add(w * r, g);
            }
        }
        if !grads.iter().all(|g| g.iter().all(|x| x.is_finite())) {
            return Err(GemError::Numeric { stage: "regressor training", layer: 0 });
        }
        opt.step(net.params_mut(), &grads);
    }
    PropertyRegressor::new(*spec, net, meta)
}

/// Mean squared error in property units on graphs corrupted to time `t`
/// (`t = 1` is clean). Clean regressors ignore the time input.
pub fn regressor_error(reg: &PropertyRegressor, graphs: &[Graph], labels: &[f64], t: f64, seed: u64) -> Result<f64> {
    if graphs.is_empty() || graphs.len() != labels.len() {
        return Err(GemError::InvalidArgument("need one label per graph".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = graphs.iter().map(|g| corrupt(g, reg.spec(), t, &mut rng)).collect::<Result<Vec<_>>>()?;
    let errs = inputs
        .par_iter()
        .zip(labels)
        .map(|(g, y)| Ok((reg.predict_graph(g, t)? - y).powi(2)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Scores of one guided run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidedScore {
    pub lambda_prop: f64,
    /// Fraction of samples meeting the constraint.
    pub satisfaction: f64,
    pub vun: Vun,
    /// Distinct valid samples that meet the constraint, over all samples.
    pub satisfied_vu: f64,
}

pub fn score_guided(
    samples: &[Graph],
    train: &[Graph],
    rules: &ValenceRules,
    constraint: Constraint,
    property: impl Fn(&Graph) -> f64,
    lambda_prop: f64,
) -> GuidedScore {
    let total = samples.len().max(1) as f64;
    let ok: Vec<bool> = samples.iter().map(|g| constraint.holds(property(g))).collect();
    let hashes: HashSet<u64> = samples
        .iter()
        .zip(&ok)
        .filter(|(g, &ok)| ok && rules.is_valid(g))
        .map(|(g, _)| canonical_hash(g))
        .collect();
    GuidedScore {
        lambda_prop,
        satisfaction: ok.iter().filter(|&&b| b).count() as f64 / total,
        vun: vun_metrics(samples, train, rules),
        satisfied_vu: hashes.len() as f64 / total,
    }
}

/// Columns `lambda_prop, satisfaction, validity, uniqueness, novelty, vu,
/// vun, satisfied_vu`.
pub fn write_guided_csv<W: Write>(w: W, rows: &[GuidedScore]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["lambda_prop", "satisfaction", "validity", "uniqueness", "novelty", "vu", "vun", "satisfied_vu"])?;
    for r in rows {
        out.write_record([
            r.lambda_prop.to_string(),
            r.satisfaction.to_string(),
            r.vun.validity.to_string(),
            r.vun.uniqueness.to_string(),
            r.vun.novelty.to_string(),
            r.vun.vu.to_string(),
            r.vun.vun.to_string(),
            r.satisfied_vu.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::EnergyModel;

    fn setup(time_input: bool) -> (EnergyModel, PropertyRegressor) {
        let spec = GraphSpec::new(5, 3, 3).unwrap();
        let m = EnergyModel::new(spec, 6, 1, 3).unwrap();
        let shape = NetShape { l_node: 3, l_edge: 3, hidden: 5, layers: 1, time_input };
        let meta = PropertyMeta { name: "edges".into(), offset: 2.0, scale: 1.5 };
        (m, PropertyRegressor::new(spec, InvariantNet::init(shape, 4), meta).unwrap())
    }

    fn soft_point(spec: &GraphSpec, n: usize, seed: u64) -> Embedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Graph::uniform(spec, n, &mut rng).unwrap();
        let mut e = embed(&g, spec).unwrap();
        for k in active_indices(spec, n) {
            e.0[k] = 0.2 + 0.6 * e.0[k] + 0.1 * rng.gen::<f64>();
        }
        e
    }

    #[test]
    fn time_proxy_endpoints_and_clamp() {
        assert_eq!(time_proxy(3.0, 3.0, -1.0).unwrap(), 0.0);
        assert_eq!(time_proxy(-1.0, 3.0, -1.0).unwrap(), 1.0);
        assert_eq!(time_proxy(-7.0, 3.0, -1.0).unwrap(), 1.0);
        assert_eq!(time_proxy(9.0, 3.0, -1.0).unwrap(), 0.0);
        assert_eq!(time_proxy(1.0, 3.0, -1.0).unwrap(), 0.5);
        assert!(time_proxy(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn zero_weight_is_the_base_energy() {
        let (m, reg) = setup(false);
        let g = GuidanceConfig { zeta: 1.0, lambda_prop: 0.0, constraint: Constraint::Le(1.0) };
        let c = ConditionalPotential::new(&m, &reg, g, None).unwrap();
        let e = soft_point(m.spec(), 4, 1);
        assert_eq!(c.evaluate(&e, 4).unwrap(), m.evaluate(&e, 4).unwrap());
    }

    #[test]
    fn on_target_prediction_adds_nothing() {
        let (m, reg) = setup(false);
        let e = soft_point(m.spec(), 4, 2);
        let zeta = reg.predict(&e, 4, 1.0).unwrap();
        let g = GuidanceConfig { zeta, lambda_prop: 3.0, constraint: Constraint::Le(1.0) };
        let c = ConditionalPotential::new(&m, &reg, g, None).unwrap();
        assert_eq!(c.value(&e, 4).unwrap(), m.value(&e, 4).unwrap());
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        for time_input in [false, true] {
            let (m, reg) = setup(time_input);
            let e = soft_point(m.spec(), 4, 3);
            let v = m.value(&e, 4).unwrap();
            // bands chosen so the proxy is strictly inside (0, 1)
            let bands = Some(Bands { noise_mean: v + 0.5, data_mean: v - 0.5 });
            let g = GuidanceConfig { zeta: 0.3, lambda_prop: 2.0, constraint: Constraint::Le(1.0) };
            let c = ConditionalPotential::new(&m, &reg, g, bands).unwrap();
            let eg = c.evaluate(&e, 4).unwrap();
            let h = 1e-6;
            for k in active_indices(m.spec(), 4) {
                let mut p = e.clone();
                let mut q = e.clone();
                p.0[k] += h;
                q.0[k] -= h;
                let fd = (c.value(&p, 4).unwrap() - c.value(&q, 4).unwrap()) / (2.0 * h);
                assert!((fd - eg.grad[k]).abs() <= 1e-4 * (1.0 + fd.abs()), "{time_input} {k}: {fd} vs {}", eg.grad[k]);
            }
        }
    }

    #[test]
    fn time_conditioned_regressor_needs_bands() {
        let (m, reg) = setup(true);
        let g = GuidanceConfig { zeta: 0.0, lambda_prop: 1.0, constraint: Constraint::Ge(0.0) };
        assert!(ConditionalPotential::new(&m, &reg, g, None).is_err());
    }

    #[test]
    fn constant_property_is_learned() {
        let spec = GraphSpec::new(5, 3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gs: Vec<_> = (0..40).map(|_| Graph::uniform(&spec, rng.gen_range(2..=5), &mut rng).unwrap()).collect();
        let ys = vec![4.0; gs.len()];
        let cfg = RegressorConfig { hidden: 4, layers: 1, steps: 20, ..Default::default() };
        let reg = train_regressor(&spec, &gs, &ys, "const", &cfg).unwrap();
        assert!(regressor_error(&reg, &gs, &ys, 1.0, 0).unwrap() < 1e-20);
    }

    #[test]
    fn regressor_checkpoint_round_trip() {
        let (_, reg) = setup(true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.json");
        reg.save(&path, 3).unwrap();
        assert_eq!(PropertyRegressor::load(&path).unwrap(), reg);
    }

    #[test]
    fn guided_scores_by_hand() {
        let spec = GraphSpec::new(4, 3, 3).unwrap();
        let rules = ValenceRules::default();
        let a = Graph::from_parts(&spec, &[0, 0], &[(0, 1, 1)]).unwrap();
        let b = Graph::from_parts(&spec, &[0, 0, 0], &[(0, 1, 1), (1, 2, 1)]).unwrap();
        let bad = Graph::from_parts(&spec, &[0, 0, 0], &[(0, 1, 1)]).unwrap();
        let s = score_guided(&[a.clone(), a, b, bad], &[], &rules, Constraint::Le(1.0), edge_count_property, 0.5);
        assert_eq!(s.satisfaction, 0.75);
        assert_eq!(s.satisfied_vu, 0.25);
        assert_eq!(s.vun.validity, 0.75);
    }
}
