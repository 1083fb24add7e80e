//! Chain orchestration: initialization, greedy transport, the regime switch
//! and Metropolis-Hastings mixing.
//!
//! Every chain owns a ChaCha8 stream derived from `(seed, chain index)` and
//! results are collected in chain order, so output does not depend on the
//! number of worker threads.

use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::Potential;
use crate::error::{GemError, Result};
use crate::graph::{embed, Graph, GraphSpec};
use crate::proposals::{greedy_step, mh_accept, MixingKernel, ProposalConfig, Regime};

/// Empirical distribution of active node counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCountHistogram {
    /// `counts[n]` is the number of graphs with `n` active nodes.
    pub counts: Vec<u64>,
}

impl NodeCountHistogram {
    pub fn from_graphs(graphs: &[Graph]) -> Self {
        let max = graphs.iter().map(Graph::n).max().unwrap_or(0);
        let mut counts = vec![0; max + 1];
        for g in graphs {
            counts[g.n()] += 1;
        }
        NodeCountHistogram { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        if self.counts.iter().skip(1).all(|&c| c == 0) {
            return Err(GemError::Empty("node-count histogram has no mass on n >= 1".into()));
        }
        let mut w = self.counts.clone();
        w[0] = 0;
        let dist = WeightedIndex::new(&w).map_err(|e| GemError::InvalidArgument(e.to_string()))?;
        Ok(dist.sample(rng))
    }
}

/// Node count from the histogram, then uniform node and edge classes.
pub fn init_noise<R: Rng + ?Sized>(spec: &GraphSpec, hist: &NodeCountHistogram, rng: &mut R) -> Result<Graph> {
    let n = hist.sample(rng)?;
    if n > spec.n_max {
        return Err(GemError::InvalidArgument(format!("histogram node count {n} exceeds n_max {}", spec.n_max)));
    }
    Graph::uniform(spec, n, rng)
}

pub fn init_data<R: Rng + ?Sized>(data: &[Graph], rng: &mut R) -> Result<Graph> {
    if data.is_empty() {
        return Err(GemError::Empty("dataset is empty".into()));
    }
    Ok(data[rng.gen_range(0..data.len())].clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Noise,
    Data,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub proposal: ProposalConfig,
    /// Local-cost weights of the greedy transport kernel.
    pub greedy_lambda_v: f64,
    pub greedy_lambda_e: f64,
    /// Energy at or below which transport hands over to mixing. Written as
    /// `null` in JSON when negative infinity (transport runs until stuck).
    #[serde(with = "threshold_json")]
    pub v_threshold: f64,
    /// Hard limit on transport steps per chain.
    pub transport_cap: usize,
    /// Switch all chains together once every chain has reached the threshold
    /// or is stuck; otherwise each chain switches on its own.
    pub batch_switch: bool,
}

mod threshold_json {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            proposal: ProposalConfig::standard(),
            greedy_lambda_v: 0.5,
            greedy_lambda_e: 0.5,
            v_threshold: f64::NEG_INFINITY,
            transport_cap: 2000,
            batch_switch: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.proposal.validate()?;
        if !(self.greedy_lambda_v > 0.0 && self.greedy_lambda_e > 0.0) {
            return Err(GemError::Config("greedy local-cost weights must be positive".into()));
        }
        if self.v_threshold.is_nan() {
            return Err(GemError::Config("v_threshold is NaN".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub chain: usize,
    pub step: usize,
    pub regime: Regime,
    pub energy: f64,
    pub accepted: bool,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub graph: Graph,
    pub energy: f64,
    pub grad: Vec<f64>,
    pub regime: Regime,
    pub step: usize,
    /// Mixing steps taken; drives the `β_mh` schedule.
    pub mixing_steps: usize,
    pub chain: usize,
    pub stuck: bool,
    pub rng: ChaCha8Rng,
}

impl ChainState {
    pub fn new<P: Potential + ?Sized>(potential: &P, graph: Graph, regime: Regime, seed: u64, chain: usize) -> Result<Self> {
        let eg = potential.evaluate(&embed(&graph, potential.spec())?, graph.n())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chain as u64);
        Ok(ChainState {
            graph,
            energy: eg.value,
            grad: eg.grad,
            regime,
            step: 0,
            mixing_steps: 0,
            chain,
            stuck: false,
            rng,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainReport {
    pub chain: usize,
    pub trace: Vec<TraceRow>,
    /// Step index at which the chain entered mixing.
    pub switch_step: Option<usize>,
    pub final_graph: Graph,
    pub final_energy: f64,
    pub mixing_accepts: usize,
    pub mixing_steps: usize,
}

impl ChainReport {
    pub fn acceptance_rate(&self) -> f64 {
        if self.mixing_steps == 0 {
            0.0
        } else {
            self.mixing_accepts as f64 / self.mixing_steps as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerReport {
    pub chains: Vec<ChainReport>,
}

impl SamplerReport {
    pub fn final_graphs(&self) -> Vec<Graph> {
        self.chains.iter().map(|c| c.final_graph.clone()).collect()
    }

    pub fn final_energies(&self) -> Vec<f64> {
        self.chains.iter().map(|c| c.final_energy).collect()
    }

    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["chain", "step", "regime", "energy", "accepted", "alpha"])?;
        for c in &self.chains {
            for r in &c.trace {
                out.write_record([
                    r.chain.to_string(),
                    r.step.to_string(),
                    r.regime.as_str().to_string(),
                    format!("{}", r.energy),
                    u8::from(r.accepted).to_string(),
                    format!("{}", r.alpha),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Optional per-step callback used to build trace rows; disabled when
/// `record` is false to keep long oracle runs lean.
struct Recorder {
    record: bool,
    rows: Vec<TraceRow>,
}

impl Recorder {
    fn push(&mut self, row: TraceRow) {
        if self.record {
            self.rows.push(row);
        }
    }
}

/// One greedy transport step. Returns false when the chain is stuck: either no
/// edit has a negative linearized score or the exact energy fails to drop.
fn transport_step<P: Potential + ?Sized>(
    potential: &P,
    st: &mut ChainState,
    cfg: &SamplerConfig,
    rec: &mut Recorder,
) -> Result<bool> {
    let spec = potential.spec();
    let Some(y) = greedy_step(&st.graph, &st.grad, spec, cfg.greedy_lambda_v, cfg.greedy_lambda_e, cfg.proposal.n_edits)
    else {
        return Ok(false);
    };
    let eg = potential.evaluate(&embed(&y, spec)?, y.n())?;
    if eg.value >= st.energy {
        return Ok(false);
    }
    st.graph = y;
    st.energy = eg.value;
    st.grad = eg.grad;
    rec.push(TraceRow {
        chain: st.chain,
        step: st.step,
        regime: Regime::Transport,
        energy: st.energy,
        accepted: true,
        alpha: 1.0,
    });
    st.step += 1;
    Ok(true)
}

/// One Metropolis-Hastings step with the mixing kernel; returns whether the
/// proposal was accepted.
pub fn mixing_step<P: Potential + ?Sized>(potential: &P, st: &mut ChainState, cfg: &ProposalConfig) -> Result<(bool, f64)> {
    let spec = potential.spec();
    let beta_mh = cfg.anneal_beta(st.mixing_steps);
    let fwd = MixingKernel::new(&st.graph, &st.grad, spec, cfg);
    let out = fwd.sample(&st.graph, &mut st.rng);
    st.mixing_steps += 1;
    if out.stayed {
        return Ok((true, 1.0));
    }
    let eg = potential.evaluate(&embed(&out.graph, spec)?, out.graph.n())?;
    let rev = MixingKernel::new(&out.graph, &eg.grad, spec, cfg);
    let logq_rev = rev.log_prob(&st.graph);
    let (accepted, alpha) = mh_accept(st.energy, eg.value, out.log_q_forward, logq_rev, beta_mh, &mut st.rng);
    if accepted {
        st.graph = out.graph;
        st.energy = eg.value;
        st.grad = eg.grad;
    }
    Ok((accepted, alpha))
}

fn run_mixing<P: Potential + ?Sized>(
    potential: &P,
    st: &mut ChainState,
    cfg: &SamplerConfig,
    steps: usize,
    rec: &mut Recorder,
    accepts: &mut usize,
) -> Result<()> {
    while st.step < steps {
        let (accepted, alpha) = mixing_step(potential, st, &cfg.proposal)?;
        *accepts += usize::from(accepted);
        rec.push(TraceRow {
            chain: st.chain,
            step: st.step,
            regime: Regime::Mixing,
            energy: st.energy,
            accepted,
            alpha,
        });
        st.step += 1;
    }
    Ok(())
}

fn finish(st: ChainState, rec: Recorder, switch_step: Option<usize>, accepts: usize) -> ChainReport {
    ChainReport {
        chain: st.chain,
        trace: rec.rows,
        switch_step,
        final_energy: st.energy,
        final_graph: st.graph,
        mixing_accepts: accepts,
        mixing_steps: st.mixing_steps,
    }
}

/// Runs one chain for a total budget of `steps` recorded steps (transport
/// plus mixing). A chain that starts in mixing skips transport entirely.
pub fn run_chain<P: Potential + ?Sized>(
    potential: &P,
    mut st: ChainState,
    cfg: &SamplerConfig,
    steps: usize,
    record: bool,
) -> Result<ChainReport> {
    let mut rec = Recorder { record, rows: Vec::new() };
    let mut switch_step = (st.regime == Regime::Mixing).then_some(0);
    let mut transport_steps = 0;
    while st.regime == Regime::Transport && st.step < steps {
        if st.energy <= cfg.v_threshold || transport_steps >= cfg.transport_cap {
            break;
        }
        if !transport_step(potential, &mut st, cfg, &mut rec)? {
            st.stuck = true;
            break;
        }
        transport_steps += 1;
    }
    if st.regime == Regime::Transport && st.step < steps {
        st.regime = Regime::Mixing;
        switch_step = Some(st.step);
    }
    let mut accepts = 0;
    if st.regime == Regime::Mixing {
        run_mixing(potential, &mut st, cfg, steps, &mut rec, &mut accepts)?;
    }
    Ok(finish(st, rec, switch_step, accepts))
}

/// Starting state for chain `chain` of a batch.
pub fn init_chain<P: Potential + ?Sized>(
    potential: &P,
    mode: InitMode,
    hist: &NodeCountHistogram,
    data: &[Graph],
    seed: u64,
    chain: usize,
) -> Result<ChainState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng.set_word_pos(1 << 40);
    let (graph, regime) = match mode {
        InitMode::Noise => (init_noise(potential.spec(), hist, &mut rng)?, Regime::Transport),
        InitMode::Data => (init_data(data, &mut rng)?, Regime::Mixing),
    };
    ChainState::new(potential, graph, regime, seed, chain)
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| GemError::InvalidArgument(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs every chain in parallel. Output is identical for any `threads`.
pub fn run_batch<P: Potential + ?Sized>(
    potential: &P,
    inits: Vec<ChainState>,
    cfg: &SamplerConfig,
    steps: usize,
    record: bool,
    threads: Option<usize>,
) -> Result<SamplerReport> {
    cfg.validate()?;
    in_pool(threads, || {
        if cfg.batch_switch {
            run_batch_lockstep(potential, inits, cfg, steps, record)
        } else {
            let chains = inits
                .into_par_iter()
                .map(|st| run_chain(potential, st, cfg, steps, record))
                .collect::<Result<Vec<_>>>()?;
            Ok(SamplerReport { chains })
        }
    })?
}

/// Transport advances in rounds; chains that reached the threshold keep
/// descending until every chain is at or below it or stuck, then all switch.
fn run_batch_lockstep<P: Potential + ?Sized>(
    potential: &P,
    inits: Vec<ChainState>,
    cfg: &SamplerConfig,
    steps: usize,
    record: bool,
) -> Result<SamplerReport> {
    let mut chains: Vec<(ChainState, Recorder)> =
        inits.into_iter().map(|st| (st, Recorder { record, rows: Vec::new() })).collect();
    let mut round = 0;
    loop {
        let done = chains
            .iter()
            .all(|(st, _)| st.regime == Regime::Mixing || st.stuck || st.energy <= cfg.v_threshold || st.step >= steps);
        if done || round >= cfg.transport_cap {
            break;
        }
        chains.par_iter_mut().try_for_each(|(st, rec)| -> Result<()> {
            if st.regime == Regime::Transport && !st.stuck && st.step < steps
                && !transport_step(potential, st, cfg, rec)? {
                    st.stuck = true;
                }
            Ok(())
        })?;
        round += 1;
    }
    let chains = chains
        .into_par_iter()
        .map(|(mut st, mut rec)| {
            let switch_step = if st.regime == Regime::Mixing {
                Some(0)
            } else if st.step < steps {
                st.regime = Regime::Mixing;
                Some(st.step)
            } else {
                None
            };
            let mut accepts = 0;
            if st.regime == Regime::Mixing {
                run_mixing(potential, &mut st, cfg, steps, &mut rec, &mut accepts)?;
            }
            Ok(finish(st, rec, switch_step, accepts))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SamplerReport { chains })
}

/// Initializes and runs `chains` chains from `mode`.
#[allow(clippy::too_many_arguments)]
pub fn sample<P: Potential + ?Sized>(
    potential: &P,
    mode: InitMode,
    hist: &NodeCountHistogram,
    data: &[Graph],
    cfg: &SamplerConfig,
    chains: usize,
    steps: usize,
    seed: u64,
    record: bool,
    threads: Option<usize>,
) -> Result<SamplerReport> {
    let inits = in_pool(threads, || {
        (0..chains)
            .into_par_iter()
            .map(|c| init_chain(potential, mode, hist, data, seed, c))
            .collect::<Result<Vec<_>>>()
    })??;
    run_batch(potential, inits, cfg, steps, record, threads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::EnergyModel;

    fn setup() -> (EnergyModel, NodeCountHistogram) {
        let spec = GraphSpec::new(5, 3, 3).unwrap();
        let m = EnergyModel::new(spec, 8, 1, 3).unwrap();
        (m, NodeCountHistogram { counts: vec![0, 0, 1, 2, 3, 4] })
    }

    #[test]
    fn zero_steps_returns_init() {
        let (m, hist) = setup();
        let st = init_chain(&m, InitMode::Noise, &hist, &[], 5, 0).unwrap();
        let g = st.graph.clone();
        let r = run_chain(&m, st, &SamplerConfig::default(), 0, true).unwrap();
        assert_eq!(r.final_graph, g);
        assert!(r.trace.is_empty());
    }

    #[test]
    fn transport_trace_strictly_decreases_and_never_returns() {
        let (m, hist) = setup();
        let cfg = SamplerConfig { greedy_lambda_v: 0.01, greedy_lambda_e: 0.01, ..Default::default() };
        let r = sample(&m, InitMode::Noise, &hist, &[], &cfg, 6, 60, 9, true, None).unwrap();
        for c in &r.chains {
            let t: Vec<_> = c.trace.iter().filter(|r| r.regime == Regime::Transport).collect();
            for w in t.windows(2) {
                assert!(w[1].energy < w[0].energy);
            }
            let first_mix = c.trace.iter().position(|r| r.regime == Regime::Mixing).unwrap_or(c.trace.len());
            assert!(c.trace[first_mix..].iter().all(|r| r.regime == Regime::Mixing));
            assert_eq!(c.trace.len(), 60);
        }
    }

    #[test]
    fn parallelism_does_not_change_results() {
        let (m, hist) = setup();
        for batch_switch in [false, true] {
            let cfg = SamplerConfig { batch_switch, ..Default::default() };
            let a = sample(&m, InitMode::Noise, &hist, &[], &cfg, 5, 30, 1, true, Some(1)).unwrap();
            let b = sample(&m, InitMode::Noise, &hist, &[], &cfg, 5, 30, 1, true, Some(4)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn degenerate_histogram() {
        let hist = NodeCountHistogram { counts: vec![0, 0, 0, 7] };
        let spec = GraphSpec::new(4, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(init_noise(&spec, &hist, &mut rng).unwrap().n(), 3);
        }
        assert!(NodeCountHistogram { counts: vec![5] }.sample(&mut rng).is_err());
    }
}
