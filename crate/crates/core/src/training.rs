//! Training: minibatch coupling, discrete interpolants, the flow loss, the
//! contrastive loss against sampler negatives, and sampler calibration.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::dataset::Dataset;
use crate::energy::{Calibration, EnergyModel, Potential};
use crate::error::{GemError, Result};
use crate::graph::{embed, pairs, permute, Embedding, Graph, GraphSpec};
use crate::matching::{balanced_alpha, minibatch_coupling, node_matching_align};
use crate::proposals::{ProposalConfig, Regime};
use crate::sampler::{init_chain, init_noise, run_batch, ChainState, InitMode, NodeCountHistogram, SamplerConfig};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &[Mat], lr: f64) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|p| Mat::zeros(p.dim())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
        }
    }
}

/// One coupled pair, a site-wise mixture of the two and the displacement
/// `embed(x_data) - embed(x0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolantSample {
    pub x0: Graph,
    pub x_data: Graph,
    pub t: f64,
    pub x_t: Graph,
    pub v: Embedding,
}

/// Each node and each pair independently takes its `x_data` label with
/// probability `t`, otherwise its `x0` label.
pub fn sample_interpolant<R: Rng + ?Sized>(
    x0: &Graph,
    x_data: &Graph,
    t: f64,
    spec: &GraphSpec,
    rng: &mut R,
) -> Result<InterpolantSample> {
    let n = x0.n();
    if x_data.n() != n {
        return Err(GemError::SizeMismatch(format!("endpoints have {n} and {} nodes", x_data.n())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(GemError::InvalidArgument(format!("interpolation time {t} outside [0, 1]")));
    }
    let mut x_t = x0.clone();
    for i in 0..n {
        if rng.gen::<f64>() < t {
            x_t.set_node(i, x_data.node(i));
        }
    }
    for (i, j) in pairs(n) {
        if rng.gen::<f64>() < t {
            x_t.set_edge(i, j, x_data.edge(i, j));
        }
    }
    let a = embed(x0, spec)?;
    let b = embed(x_data, spec)?;
    let v = Embedding(b.0.iter().zip(&a.0).map(|(b, a)| b - a).collect());
    Ok(InterpolantSample { x0: x0.clone(), x_data: x_data.clone(), t, x_t, v })
}

fn zero_like(model: &EnergyModel) -> Vec<Mat> {
    model.net().params().iter().map(|p| Mat::zeros(p.dim())).collect()
}

fn add_scaled(acc: &mut [Mat], g: &[Mat], s: f64) {
    for (a, g) in acc.iter_mut().zip(g) {
        a.scaled_add(s, g);
    }
}

/// Batch mean of `‖∇V(x_t) + v‖²` and its parameter gradient. Per-sample
/// terms are computed in parallel and summed in batch order.
pub fn flow_loss(model: &EnergyModel, batch: &[InterpolantSample]) -> Result<(f64, Vec<Mat>)> {
    if batch.is_empty() {
        return Err(GemError::Empty("flow-loss batch is empty".into()));
    }
    let spec = *model.spec();
    let terms = batch
        .par_iter()
        .map(|s| model.flow_loss(&embed(&s.x_t, &spec)?, s.x_t.n(), &s.v))
        .collect::<Result<Vec<_>>>()?;
    let w = 1.0 / batch.len() as f64;
    let mut grads = zero_like(model);
    let mut loss = 0.0;
    for (l, g) in &terms {
        loss += w * l;
        add_scaled(&mut grads, g, w);
    }
    Ok((loss, grads))
}

/// `mean V(positives) - mean V(negatives)` and its parameter gradient.
/// Negatives are plain graphs, so nothing flows back into the sampler.
pub fn cl_loss(model: &EnergyModel, positives: &[Graph], negatives: &[Graph]) -> Result<(f64, Vec<Mat>)> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(GemError::Empty("contrastive loss needs positives and negatives".into()));
    }
    let spec = *model.spec();
    let eval = |gs: &[Graph]| {
        gs.par_iter()
            .map(|g| model.param_grad(&embed(g, &spec)?, g.n()))
            .collect::<Result<Vec<_>>>()
    };
    let pos = eval(positives)?;
    let neg = eval(negatives)?;
    let mut grads = zero_like(model);
    let mut loss = 0.0;
    let (wp, wn) = (1.0 / pos.len() as f64, 1.0 / neg.len() as f64);
    for (v, g) in &pos {
        loss += wp * v;
        add_scaled(&mut grads, g, wp);
    }
    for (v, g) in &neg {
        loss -= wn * v;
        add_scaled(&mut grads, g, -wn);
    }
    Ok((loss, grads))
}

/// Where contrastive negatives start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeInit {
    /// Half from noise, half from training graphs.
    HalfNoise,
    DataOnly,
    NoiseOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Total optimizer steps.
    pub steps: usize,
    /// Flow-only steps before the contrastive term switches on.
    pub n_warmup: usize,
    pub lambda_cl: f64,
    /// Sampler steps per contrastive negative.
    pub n_cl: usize,
    pub batch_size: usize,
    /// Negatives per joint step; 0 means `batch_size`.
    pub negatives: usize,
    pub lr_warmup: f64,
    pub lr_joint: f64,
    pub negative_init: NegativeInit,
    /// Continue negative chains across steps instead of restarting them.
    pub persistent: bool,
    /// Decay of the running mean of data energies used as `V_th`.
    pub ema_decay: f64,
    /// Rescale the combined gradient to at most this norm; 0 disables.
    pub max_grad_norm: f64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Graphs per band when measuring data and noise energies after training.
    pub calibration_samples: usize,
    /// Sampler for noise-started negatives; its threshold tracks `V_th`.
    pub noise_sampler: SamplerConfig,
    /// Mixing kernel for data-started negatives.
    pub data_proposal: ProposalConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 40_000,
            n_warmup: 20_000,
            lambda_cl: 0.1,
            n_cl: 500,
            batch_size: 32,
            negatives: 0,
            lr_warmup: 1e-4,
            lr_joint: 1e-5,
            negative_init: NegativeInit::HalfNoise,
            persistent: false,
            ema_decay: 0.99,
            max_grad_norm: 0.0,
            checkpoint_every: 0,
            calibration_samples: 256,
            noise_sampler: SamplerConfig::default(),
            data_proposal: ProposalConfig::annealed(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(GemError::Config("batch_size must be positive".into()));
        }
        if !(self.lambda_cl >= 0.0 && self.lambda_cl.is_finite()) {
            return Err(GemError::Config("lambda_cl must be non-negative".into()));
        }
        for (name, lr) in [("lr_warmup", self.lr_warmup), ("lr_joint", self.lr_joint)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(GemError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.ema_decay >= 0.0 && self.ema_decay < 1.0) {
            return Err(GemError::Config("ema_decay must lie in [0, 1)".into()));
        }
        if !(self.max_grad_norm >= 0.0) {
            return Err(GemError::Config("max_grad_norm must be non-negative".into()));
        }
        self.noise_sampler.validate()?;
        self.data_proposal.validate()
    }

    fn negative_count(&self) -> usize {
        if self.negatives == 0 {
            self.batch_size
        } else {
            self.negatives
        }
    }

    fn contrastive(&self, step: usize) -> bool {
        step >= self.n_warmup && self.lambda_cl > 0.0 && self.n_cl > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub flow_loss: f64,
    pub cl_loss: Option<f64>,
    pub v_threshold: f64,
    pub mean_neg_energy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    /// Columns `step, flow_loss, cl_loss, V_th, mean_neg_energy`; steps without
    /// a contrastive term leave the last two blank.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "flow_loss", "cl_loss", "V_th", "mean_neg_energy"])?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.write_record([
                r.step.to_string(),
                r.flow_loss.to_string(),
                opt(r.cl_loss),
                r.v_threshold.to_string(),
                opt(r.mean_neg_energy),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn derive_seed(seed: u64, step: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A coupled flow-loss minibatch: noise graphs sized like the data batch,
/// paired by signature assignment, node-aligned, then interpolated.
pub fn flow_batch<R: Rng + ?Sized>(
    data: &[Graph],
    spec: &GraphSpec,
    alpha: [f64; 3],
    rng: &mut R,
) -> Result<Vec<InterpolantSample>> {
    let source = data.iter().map(|g| Graph::uniform(spec, g.n(), rng)).collect::<Result<Vec<_>>>()?;
    let coupling = minibatch_coupling(&source, data, spec, alpha)?;
    coupling
        .pairs
        .iter()
        .map(|&(s, d)| {
            let x0 = &source[s];
            let sigma = node_matching_align(x0, &data[d])?;
            let xd = permute(&data[d], &sigma.inverse())?;
            let t = rng.gen::<f64>();
            sample_interpolant(x0, &xd, t, spec, rng)
        })
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Energy mean and spread over data graphs and fresh noise graphs.
pub fn energy_bands(
    model: &EnergyModel,
    data: &[Graph],
    hist: &NodeCountHistogram,
    samples: usize,
    seed: u64,
) -> Result<((f64, f64), (f64, f64))> {
    if data.is_empty() || samples == 0 {
        return Err(GemError::Empty("energy bands need data and a positive sample count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if samples >= data.len() {
        (0..data.len()).collect()
    } else {
        index::sample(&mut rng, data.len(), samples).into_vec()
    };
    let noise = (0..samples).map(|_| init_noise(model.spec(), hist, &mut rng)).collect::<Result<Vec<_>>>()?;
    let dv = picks.par_iter().map(|&i| model.energy(&data[i])).collect::<Result<Vec<_>>>()?;
    let nv = noise.par_iter().map(|g| model.energy(g)).collect::<Result<Vec<_>>>()?;
    Ok((mean_std(&dv), mean_std(&nv)))
}

struct Negatives {
    graphs: Vec<Graph>,
    energies: Vec<f64>,
}

fn draw_negatives(
    model: &EnergyModel,
    data: &[Graph],
    hist: &NodeCountHistogram,
    cfg: &TrainConfig,
    v_th: f64,
    step: usize,
    persistent: Option<&[Graph]>,
) -> Result<Negatives> {
    let seed = derive_seed(cfg.seed ^ 0x6e65_6761_7469_7665, step);
    let count = cfg.negative_count();
    let noise_cfg = SamplerConfig { v_threshold: v_th, ..cfg.noise_sampler };
    let data_cfg = SamplerConfig { proposal: cfg.data_proposal, v_threshold: v_th, ..cfg.noise_sampler };
    let mut graphs = Vec::with_capacity(count);
    let mut energies = Vec::with_capacity(count);
    if let Some(prev) = persistent {
        let inits = prev
            .iter()
            .enumerate()
            .map(|(c, g)| ChainState::new(model, g.clone(), Regime::Mixing, seed, c))
            .collect::<Result<Vec<_>>>()?;
        let r = run_batch(model, inits, &noise_cfg, cfg.n_cl, false, None)?;
        graphs.extend(r.final_graphs());
        energies.extend(r.final_energies());
        return Ok(Negatives { graphs, energies });
    }
    let n_noise = match cfg.negative_init {
        NegativeInit::HalfNoise => count / 2,
        NegativeInit::DataOnly => 0,
        NegativeInit::NoiseOnly => count,
    };
    let noise_inits = (0..n_noise)
        .into_par_iter()
        .map(|c| init_chain(model, InitMode::Noise, hist, data, seed, c))
        .collect::<Result<Vec<_>>>()?;
    let data_inits = (n_noise..count)
        .into_par_iter()
        .map(|c| init_chain(model, InitMode::Data, hist, data, seed, c))
        .collect::<Result<Vec<_>>>()?;
    for (inits, scfg) in [(noise_inits, &noise_cfg), (data_inits, &data_cfg)] {
        if inits.is_empty() {
            continue;
        }
        let r = run_batch(model, inits, scfg, cfg.n_cl, false, None)?;
        graphs.extend(r.final_graphs());
        energies.extend(r.final_energies());
    }
    Ok(Negatives { graphs, energies })
}

fn grad_norm(grads: &[Mat]) -> f64 {
    grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

fn all_finite(grads: &[Mat]) -> bool {
    grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
}

fn diverged(model: &EnergyModel, step: usize, mut reason: String, dir: Option<&Path>) -> GemError {
    if let Some(dir) = dir {
        let path = dir.join("last_good.json");
        match model.save(&path, step) {
            Ok(()) => reason.push_str(&format!("; last good parameters saved to {}", path.display())),
            Err(e) => reason.push_str(&format!("; could not save last good parameters: {e}")),
        }
    }
    GemError::Diverged { step, reason }
}

type StepOutcome = (HistoryRow, Vec<Mat>, Option<Vec<Graph>>);

/// Losses and combined gradient of one step, before the optimizer update.
#[allow(clippy::too_many_arguments)]
fn joint_step(
    model: &EnergyModel,
    cfg: &TrainConfig,
    graphs: &[Graph],
    hist: &NodeCountHistogram,
    positives: &[Graph],
    samples: &[InterpolantSample],
    v_th: Option<f64>,
    step: usize,
    chains: Option<&[Graph]>,
) -> Result<StepOutcome> {
    let (fl, mut grads) = flow_loss(model, samples)?;
    let pos_energy = positives.par_iter().map(|g| model.energy(g)).collect::<Result<Vec<_>>>()?;
    let batch_mean = pos_energy.iter().sum::<f64>() / pos_energy.len() as f64;
    let th = match v_th {
        Some(prev) => cfg.ema_decay * prev + (1.0 - cfg.ema_decay) * batch_mean,
        None => batch_mean,
    };
    let mut row = HistoryRow { step, flow_loss: fl, cl_loss: None, v_threshold: th, mean_neg_energy: None };
    let mut negs = None;
    if cfg.contrastive(step) {
        let persistent = if cfg.persistent { chains } else { None };
        let neg = draw_negatives(model, graphs, hist, cfg, th, step, persistent)?;
        let (cl, cg) = cl_loss(model, positives, &neg.graphs)?;
        add_scaled(&mut grads, &cg, cfg.lambda_cl);
        row.cl_loss = Some(cl);
        row.mean_neg_energy = Some(neg.energies.iter().sum::<f64>() / neg.energies.len() as f64);
        negs = Some(neg.graphs);
    }
    Ok((row, grads, negs))
}

/// Output of [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: TrainHistory,
    /// Periodic checkpoints written during the run.
    pub checkpoints: Vec<PathBuf>,
}

/// Trains `model` in place. With `checkpoint_dir` set, writes
/// `step_XXXXXXX.json` every `checkpoint_every` steps and, if the loss turns
/// non-finite, `last_good.json` before returning [`GemError::Diverged`].
/// `on_step` sees every history row as it is produced.
pub fn train(
    model: &mut EnergyModel,
    data: &Dataset,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_step: impl FnMut(&HistoryRow),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(GemError::Empty("training set is empty".into()));
    }
    if data.spec != *model.spec() {
        return Err(GemError::SizeMismatch("dataset spec differs from model spec".into()));
    }
    let spec = data.spec;
    let graphs = &data.graphs;
    let hist = data.node_count_histogram();
    let alpha = balanced_alpha(graphs, &spec);
    let batch = cfg.batch_size.min(graphs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.net().params(), cfg.lr_warmup);
    let mut v_th: Option<f64> = model.calibration.v_threshold;
    let mut history = TrainHistory::default();
    let mut checkpoints = Vec::new();
    let mut chains: Option<Vec<Graph>> = None;

    for step in 0..cfg.steps {
        let picks = index::sample(&mut rng, graphs.len(), batch).into_vec();
        let positives: Vec<Graph> = picks.iter().map(|&i| graphs[i].clone()).collect();
        let samples = flow_batch(&positives, &spec, alpha, &mut rng)?;
        if cfg.contrastive(step) && (step == cfg.n_warmup || cfg.n_warmup == 0 && step == 0) {
            opt.lr = cfg.lr_joint;
        }
        let outcome = joint_step(model, cfg, graphs, &hist, &positives, &samples, v_th, step, chains.as_deref());
        let (row, mut grads, negs) = match outcome {
            Ok(o) => o,
            Err(e @ GemError::Numeric { .. }) => return Err(diverged(model, step, e.to_string(), checkpoint_dir)),
            Err(e) => return Err(e),
        };
        let total = row.flow_loss + cfg.lambda_cl * row.cl_loss.unwrap_or(0.0);
        if !total.is_finite() || !all_finite(&grads) {
            return Err(diverged(model, step, format!("non-finite loss {total}"), checkpoint_dir));
        }
        if cfg.persistent && negs.is_some() {
            chains = negs;
        }
        if cfg.max_grad_norm > 0.0 {
            let norm = grad_norm(&grads);
            if norm > cfg.max_grad_norm {
                let s = cfg.max_grad_norm / norm;
                grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * s));
            }
        }
        opt.step(model.net_mut().params_mut(), &grads);
        v_th = Some(row.v_threshold);
        model.calibration.v_threshold = v_th;
        on_step(&row);
        history.rows.push(row);

        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("step_{:07}.json", step + 1));
                model.save(&path, step + 1)?;
                checkpoints.push(path);
            }
        }
    }

    if cfg.calibration_samples > 0 {
        let ((dm, ds), (nm, ns)) =
            energy_bands(model, graphs, &hist, cfg.calibration_samples, derive_seed(cfg.seed, usize::MAX))?;
        model.calibration = Calibration {
            v_threshold: v_th,
            data_mean: Some(dm),
            data_std: Some(ds),
            noise_mean: Some(nm),
            noise_std: Some(ns),
        };
    }
    Ok(TrainReport { history, checkpoints })
}

/// Candidate values for [`calibrate_sampler`]; the search is their product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub beta_mh: Vec<f64>,
    pub beta_l: Vec<f64>,
    pub lambda_v: Vec<f64>,
    pub lambda_e: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            beta_mh: vec![1.0, 4.0, 9.55],
            beta_l: vec![2.0, 9.55],
            lambda_v: vec![0.23, 1.0],
            lambda_e: vec![0.5, 1.88],
        }
    }
}

impl SearchSpace {
    pub fn configs(&self, base: &ProposalConfig) -> Vec<ProposalConfig> {
        let mut out = Vec::new();
        for &bmh in &self.beta_mh {
            for &bl in &self.beta_l {
                for &lv in &self.lambda_v {
                    for &le in &self.lambda_e {
                        out.push(ProposalConfig {
                            beta_l: bl,
                            lambda_v: lv,
                            lambda_e: le,
                            beta_mh_init: bmh,
                            beta_mh_final: bmh,
                            s_anneal: 0,
                            ..*base
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub best: ProposalConfig,
    /// Every evaluated configuration with its mean final-sample energy.
    pub table: Vec<(ProposalConfig, f64)>,
}

impl CalibrationResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["beta_mh", "beta_l", "lambda_v", "lambda_e", "mean_energy"])?;
        for (c, e) in &self.table {
            out.write_record([
                c.beta_mh_final.to_string(),
                c.beta_l.to_string(),
                c.lambda_v.to_string(),
                c.lambda_e.to_string(),
                e.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Grid search over mixing hyperparameters with a frozen potential. Every
/// configuration samples `chains` noise-started chains of `steps` steps from
/// the same seed; the lowest mean final energy wins, earliest on ties.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_sampler<P: Potential + ?Sized>(
    potential: &P,
    hist: &NodeCountHistogram,
    base: &SamplerConfig,
    space: &SearchSpace,
    chains: usize,
    steps: usize,
    seed: u64,
    threads: Option<usize>,
) -> Result<CalibrationResult> {
    let configs = space.configs(&base.proposal);
    if configs.is_empty() {
        return Err(GemError::Config("calibration search space is empty".into()));
    }
    if chains == 0 {
        return Err(GemError::InvalidArgument("calibration needs at least one chain".into()));
    }
    let mut table = Vec::with_capacity(configs.len());
    for c in configs {
        let cfg = SamplerConfig { proposal: c, ..*base };
        let r = crate::sampler::sample(potential, InitMode::Noise, hist, &[], &cfg, chains, steps, seed, false, threads)?;
        let e = r.final_energies();
        table.push((c, e.iter().sum::<f64>() / e.len() as f64));
    }
    let mut best = 0;
    for (i, (_, e)) in table.iter().enumerate() {
        if *e < table[best].1 {
            best = i;
        }
    }
    Ok(CalibrationResult { best: table[best].0, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_toy_dataset, ToyConfig, ValenceRules};

    fn spec() -> GraphSpec {
        GraphSpec::new(5, 3, 3).unwrap()
    }

    #[test]
    fn interpolant_endpoints_are_exact() {
        let spec = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = Graph::uniform(&spec, 5, &mut rng).unwrap();
            let b = Graph::uniform(&spec, 5, &mut rng).unwrap();
            assert_eq!(sample_interpolant(&a, &b, 0.0, &spec, &mut rng).unwrap().x_t, a);
            assert_eq!(sample_interpolant(&a, &b, 1.0, &spec, &mut rng).unwrap().x_t, b);
        }
        let c = Graph::uniform(&spec, 4, &mut rng).unwrap();
        let a = Graph::uniform(&spec, 5, &mut rng).unwrap();
        assert!(sample_interpolant(&a, &c, 0.5, &spec, &mut rng).is_err());
    }

    #[test]
    fn interpolant_sites_come_from_endpoints() {
        let spec = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a = Graph::uniform(&spec, 5, &mut rng).unwrap();
            let b = Graph::uniform(&spec, 5, &mut rng).unwrap();
            let s = sample_interpolant(&a, &b, rng.gen(), &spec, &mut rng).unwrap();
            for i in 0..5 {
                assert!(s.x_t.node(i) == a.node(i) || s.x_t.node(i) == b.node(i));
            }
            for (i, j) in pairs(5) {
                assert!(s.x_t.edge(i, j) == a.edge(i, j) || s.x_t.edge(i, j) == b.edge(i, j));
            }
            let ea = embed(&a, &spec).unwrap();
            let eb = embed(&b, &spec).unwrap();
            for k in 0..ea.len() {
                assert_eq!(s.v.0[k], eb.0[k] - ea.0[k]);
            }
        }
    }

    #[test]
    fn cl_loss_of_identical_batches_is_zero() {
        let spec = spec();
        let m = EnergyModel::new(spec, 6, 1, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gs: Vec<_> = (0..4).map(|_| Graph::uniform(&spec, 4, &mut rng).unwrap()).collect();
        let mut rev = gs.clone();
        rev.reverse();
        let (l, g) = cl_loss(&m, &gs, &rev).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(grad_norm(&g) < 1e-12);
        let (l, _) = cl_loss(&m, &gs[..1], &gs[1..2]).unwrap();
        assert!((l - (m.energy(&gs[0]).unwrap() - m.energy(&gs[1]).unwrap())).abs() < 1e-12);
        assert!(cl_loss(&m, &[], &gs).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Mat::from_elem((1, 2), 1.0)];
        let g = vec![Mat::from_shape_vec((1, 2), vec![3.0, -0.5]).unwrap()];
        let mut opt = Adam::new(&p, 0.1);
        opt.step(&mut p, &g);
        assert!((p[0][[0, 0]] - 0.9).abs() < 1e-6 && (p[0][[0, 1]] - 1.1).abs() < 1e-6);
    }

    fn toy(n: usize) -> Dataset {
        let spec = GraphSpec::new(6, 3, 3).unwrap();
        let cfg = ToyConfig { n_min: 3, n_max: 6, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        generate_toy_dataset(&spec, &ValenceRules::default(), &cfg, n, &mut rng).unwrap()
    }

    fn short_cfg() -> TrainConfig {
        TrainConfig {
            steps: 6,
            n_warmup: 3,
            n_cl: 4,
            batch_size: 8,
            negatives: 4,
            lr_warmup: 1e-3,
            lr_joint: 1e-3,
            calibration_samples: 16,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_contrastive_weight_matches_flow_only() {
        let data = toy(40);
        let base = EnergyModel::new(data.spec, 6, 1, 1).unwrap();
        let mut a = base.clone();
        let mut b = base.clone();
        train(&mut a, &data, &TrainConfig { lambda_cl: 0.0, ..short_cfg() }, None, |_| {}).unwrap();
        train(&mut b, &data, &TrainConfig { n_warmup: usize::MAX, ..short_cfg() }, None, |_| {}).unwrap();
        assert_eq!(a.net(), b.net());
    }

    #[test]
    fn history_and_calibration_are_filled() {
        let data = toy(40);
        let mut m = EnergyModel::new(data.spec, 6, 1, 1).unwrap();
        let r = train(&mut m, &data, &short_cfg(), None, |_| {}).unwrap();
        assert_eq!(r.history.rows.len(), 6);
        assert!(r.history.rows[..3].iter().all(|r| r.cl_loss.is_none()));
        assert!(r.history.rows[3..].iter().all(|r| r.cl_loss.is_some() && r.mean_neg_energy.is_some()));
        let c = m.calibration;
        assert!(c.v_threshold.is_some() && c.data_mean.is_some() && c.noise_std.is_some());
        let mut buf = Vec::new();
        r.history.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,flow_loss,cl_loss,V_th,mean_neg_energy\n0,"));
        assert_eq!(text.lines().count(), 7);
    }

    #[test]
    fn persistent_chains_run() {
        let data = toy(30);
        let mut m = EnergyModel::new(data.spec, 6, 1, 1).unwrap();
        let r = train(&mut m, &data, &TrainConfig { persistent: true, ..short_cfg() }, None, |_| {}).unwrap();
        assert!(r.history.rows.iter().all(|r| r.flow_loss.is_finite()));
    }

    #[test]
    fn divergence_saves_last_good() {
        let data = toy(20);
        let mut m = EnergyModel::new(data.spec, 6, 1, 1).unwrap();
        let w2 = m.net().params().len() - 2;
        m.net_mut().params_mut()[w2].fill(1e300);
        let dir = tempfile::tempdir().unwrap();
        let err = train(&mut m, &data, &short_cfg(), Some(dir.path()), |_| {}).unwrap_err();
        assert!(matches!(err, GemError::Diverged { step: 0, .. }));
        assert!(dir.path().join("last_good.json").exists());
    }

    #[test]
    fn calibration_returns_argmin() {
        let spec = spec();
        let m = EnergyModel::new(spec, 6, 1, 2).unwrap();
        let hist = NodeCountHistogram { counts: vec![0, 0, 0, 1, 1] };
        let space = SearchSpace { beta_mh: vec![1.0, 5.0], beta_l: vec![2.0], lambda_v: vec![0.5], lambda_e: vec![0.5, 2.0] };
        let r = calibrate_sampler(&m, &hist, &SamplerConfig::default(), &space, 4, 10, 3, None).unwrap();
        assert_eq!(r.table.len(), 4);
        assert!(r.table.iter().all(|(_, e)| r.table.iter().any(|(c, b)| *c == r.best && b <= e)));
        let one = SearchSpace { beta_mh: vec![2.0], beta_l: vec![3.0], lambda_v: vec![0.1], lambda_e: vec![0.2] };
        let r = calibrate_sampler(&m, &hist, &SamplerConfig::default(), &one, 2, 5, 3, None).unwrap();
        assert_eq!((r.best.beta_mh_final, r.best.beta_l), (2.0, 3.0));
    }
}
