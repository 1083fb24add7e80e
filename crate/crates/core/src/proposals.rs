//! Local-edit proposal kernels.
//!
//! The greedy kernel ranks single-site edits by the linearized energy change
//! plus the local cost of the edit. The mixing kernel draws every active site
//! independently from a softmax over first-order energy differences; if no
//! site moves it softens the logits and redraws a bounded number of times.
//! Its log-probability is exact for the whole cascade, so Metropolis-Hastings
//! with it targets `exp(-β_mh V)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};
use crate::graph::{Edit, Graph, GraphSpec, Site};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    /// Logit temperature `β^L`.
    pub beta_l: f64,
    pub lambda_v: f64,
    pub lambda_e: f64,
    pub beta_mh_init: f64,
    pub beta_mh_final: f64,
    /// Mixing steps over which `β_mh` ramps from init to final; 0 means fixed
    /// at `beta_mh_final`.
    pub s_anneal: usize,
    /// Softening factor applied to the logits on each all-stay retry.
    pub rho: f64,
    pub max_retries: usize,
    /// Distinct-site edits per greedy jump.
    pub n_edits: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl ProposalConfig {
    /// Fixed-temperature defaults, used from noise initialization.
    pub fn standard() -> Self {
        ProposalConfig {
            beta_l: 9.55,
            lambda_v: 0.23,
            lambda_e: 1.88,
            beta_mh_init: 9.55,
            beta_mh_final: 9.55,
            s_anneal: 0,
            rho: 0.5,
            max_retries: 3,
            n_edits: 1,
        }
    }

    /// Annealed defaults, used from data initialization.
    pub fn annealed() -> Self {
        ProposalConfig {
            beta_l: 8.12,
            lambda_v: 0.07,
            lambda_e: 2.23,
            beta_mh_init: 0.18,
            beta_mh_final: 13.56,
            s_anneal: 200,
            ..Self::standard()
        }
    }

    pub fn fixed(beta_l: f64, lambda_v: f64, lambda_e: f64, beta_mh: f64) -> Self {
        ProposalConfig {
            beta_l,
            lambda_v,
            lambda_e,
            beta_mh_init: beta_mh,
            beta_mh_final: beta_mh,
            s_anneal: 0,
            ..Self::standard()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beta_l", self.beta_l),
            ("lambda_v", self.lambda_v),
            ("lambda_e", self.lambda_e),
            ("beta_mh_final", self.beta_mh_final),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GemError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.beta_mh_init >= 0.0 && self.beta_mh_init.is_finite()) {
            return Err(GemError::Config("beta_mh_init must be non-negative".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(GemError::Config(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if self.n_edits == 0 {
            return Err(GemError::Config("n_edits must be at least 1".into()));
        }
        Ok(())
    }

    /// `β_mh` at mixing step `s`: linear from init to final over `s_anneal`
    /// steps, constant afterwards.
    pub fn anneal_beta(&self, s: usize) -> f64 {
        if self.s_anneal == 0 || s >= self.s_anneal {
            return self.beta_mh_final;
        }
        if self.s_anneal == 1 {
            return self.beta_mh_init;
        }
        let frac = s as f64 / (self.s_anneal - 1) as f64;
        self.beta_mh_init + (self.beta_mh_final - self.beta_mh_init) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Transport,
    Mixing,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Transport => "transport",
            Regime::Mixing => "mixing",
        }
    }
}

pub fn regime_switch(v_x: f64, v_th: f64, stuck: bool) -> Regime {
    if v_x <= v_th || stuck {
        Regime::Mixing
    } else {
        Regime::Transport
    }
}

fn grad_at(g: &[f64], spec: &GraphSpec, site: Site, class: usize) -> f64 {
    match site {
        Site::Node(i) => g[spec.node_offset(i) + class],
        Site::Pair(i, j) => g[spec.pair_offset(i, j) + class],
    }
}

fn classes(spec: &GraphSpec, site: Site) -> usize {
    match site {
        Site::Node(_) => spec.l_node,
        Site::Pair(..) => spec.l_edge,
    }
}

/// Linearized energy change of `e` plus its local cost,
/// `g[site, new] - g[site, cur] + 2λ_site`.
pub fn greedy_score(x: &Graph, g: &[f64], spec: &GraphSpec, e: &Edit, lambda_v: f64, lambda_e: f64) -> f64 {
    let lam = match e.site {
        Site::Node(_) => lambda_v,
        Site::Pair(..) => lambda_e,
    };
    grad_at(g, spec, e.site, e.new_class) - grad_at(g, spec, e.site, x.label_at(e.site)) + 2.0 * lam
}

/// Best `n_edits` edits at distinct sites by greedy score, or `None` when
/// fewer than `n_edits` sites have a strictly negative best score. Ties keep
/// enumeration order.
pub fn greedy_edits(
    x: &Graph,
    g: &[f64],
    spec: &GraphSpec,
    lambda_v: f64,
    lambda_e: f64,
    n_edits: usize,
) -> Option<Vec<Edit>> {
    let mut best: Vec<(f64, Edit)> = Vec::new();
    for site in x.sites() {
        let cur = x.label_at(site);
        let mut site_best: Option<(f64, Edit)> = None;
        for c in (0..classes(spec, site)).filter(|&c| c != cur) {
            let e = Edit { site, new_class: c };
            let s = greedy_score(x, g, spec, &e, lambda_v, lambda_e);
            if site_best.is_none_or(|(b, _)| s < b) {
                site_best = Some((s, e));
            }
        }
        if let Some(b) = site_best.filter(|(s, _)| *s < 0.0) {
            best.push(b);
        }
    }
    if best.len() < n_edits {
        return None;
    }
    best.sort_by(|a, b| a.0.total_cmp(&b.0));
    best.truncate(n_edits);
    Some(best.into_iter().map(|(_, e)| e).collect())
}

/// Applies the greedy edits; `None` signals the chain is stuck.
pub fn greedy_step(
    x: &Graph,
    g: &[f64],
    spec: &GraphSpec,
    lambda_v: f64,
    lambda_e: f64,
    n_edits: usize,
) -> Option<Graph> {
    let edits = greedy_edits(x, g, spec, lambda_v, lambda_e, n_edits)?;
    let mut y = x.clone();
    for e in edits {
        set_label(&mut y, e.site, e.new_class);
    }
    Some(y)
}

fn set_label(g: &mut Graph, site: Site, class: usize) {
    match site {
        Site::Node(i) => g.set_node(i, class),
        Site::Pair(i, j) => g.set_edge(i, j, class),
    }
}

/// Per-site logits over classes, in site enumeration order.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTable {
    pub sites: Vec<Site>,
    pub logits: Vec<Vec<f64>>,
}

/// `ℓ_{s,c} = β(g_{s,cur} - g_{s,c}) - λ_s·1{c ≠ cur}`; the stay logit is 0.
pub fn mixing_logits(x: &Graph, g: &[f64], spec: &GraphSpec, beta: f64, lambda_v: f64, lambda_e: f64) -> LogitTable {
    let mut sites = Vec::new();
    let mut logits = Vec::new();
    for site in x.sites() {
        let cur = x.label_at(site);
        let lam = match site {
            Site::Node(_) => lambda_v,
            Site::Pair(..) => lambda_e,
        };
        let gc = grad_at(g, spec, site, cur);
        let row = (0..classes(spec, site))
            .map(|c| if c == cur { 0.0 } else { beta * (gc - grad_at(g, spec, site, c)) - lam })
            .collect();
        sites.push(site);
        logits.push(row);
    }
    LogitTable { sites, logits }
}

fn log_softmax(row: &[f64], scale: f64) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(scale * b));
    let lse = m + row.iter().map(|&l| (scale * l - m).exp()).sum::<f64>().ln();
    row.iter().map(|&l| scale * l - lse).collect()
}

/// Log-sum-exp of a slice; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// The mixing kernel at one state, with per-stage log-probabilities for the
/// softening cascade precomputed.
#[derive(Debug, Clone)]
pub struct MixingKernel {
    sites: Vec<Site>,
    current: Vec<usize>,
    /// `stages[k][site][class]`, log-probabilities at stage `k`.
    stages: Vec<Vec<Vec<f64>>>,
    /// Log-probability that every site stays at stage `k`.
    log_stay: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalOutcome {
    pub graph: Graph,
    /// Exact log-probability of proposing `graph` from the current state,
    /// marginalized over the stage that produced it.
    pub log_q_forward: f64,
    pub retries_used: usize,
    pub stayed: bool,
}

impl MixingKernel {
    pub fn new(x: &Graph, g: &[f64], spec: &GraphSpec, cfg: &ProposalConfig) -> Self {
        let table = mixing_logits(x, g, spec, cfg.beta_l, cfg.lambda_v, cfg.lambda_e);
        let current = table.sites.iter().map(|&s| x.label_at(s)).collect::<Vec<_>>();
        let mut stages = Vec::with_capacity(cfg.max_retries + 1);
        let mut log_stay = Vec::with_capacity(cfg.max_retries + 1);
        let mut scale = 1.0;
        for _ in 0..=cfg.max_retries {
            let stage: Vec<Vec<f64>> = table.logits.iter().map(|row| log_softmax(row, scale)).collect();
            log_stay.push(stage.iter().zip(&current).map(|(lp, &c)| lp[c]).sum());
            stages.push(stage);
            scale *= cfg.rho;
        }
        MixingKernel { sites: table.sites, current, stages, log_stay }
    }

    pub fn stages(&self) -> usize {
        self.stages.len()
    }

    /// Draws a proposal: each stage samples every site independently and
    /// stops at the first stage where any site moves.
    pub fn sample<R: Rng + ?Sized>(&self, x: &Graph, rng: &mut R) -> ProposalOutcome {
        for (k, stage) in self.stages.iter().enumerate() {
            let mut y = x.clone();
            let mut moved = false;
            for ((site, lp), &cur) in self.sites.iter().zip(stage).zip(&self.current) {
                let c = draw(lp, rng);
                if c != cur {
                    set_label(&mut y, *site, c);
                    moved = true;
                }
            }
            if moved {
                let log_q = self.log_prob(&y);
                return ProposalOutcome { graph: y, log_q_forward: log_q, retries_used: k, stayed: false };
            }
        }
        ProposalOutcome {
            graph: x.clone(),
            log_q_forward: self.log_stay.iter().sum(),
            retries_used: self.stages.len() - 1,
            stayed: true,
        }
    }

    /// `log q(x → y)`. For `y ≠ x` this is
    /// `log Σ_k (Π_{j<k} S_j) P_k(y)`; for `y = x` it is `Σ_k log S_k`.
    pub fn log_prob(&self, y: &Graph) -> f64 {
        let labels: Vec<usize> = self.sites.iter().map(|&s| y.label_at(s)).collect();
        if labels == self.current {
            return self.log_stay.iter().sum();
        }
        let mut terms = Vec::with_capacity(self.stages.len());
        let mut prefix = 0.0;
        for (k, stage) in self.stages.iter().enumerate() {
            let lp: f64 = stage.iter().zip(&labels).map(|(row, &c)| row[c]).sum();
            terms.push(prefix + lp);
            prefix += self.log_stay[k];
        }
        log_sum_exp(&terms)
    }
}

fn draw<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (c, &lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return c;
        }
    }
    // rounding left `acc` just below 1: fall back to the last class with
    // nonzero mass
    log_probs.iter().rposition(|&lp| lp > f64::NEG_INFINITY).unwrap_or(0)
}

/// Exact log-probability that the mixing kernel at `x_from` (gradient `g`)
/// proposes `x_to`.
pub fn proposal_log_prob(x_from: &Graph, x_to: &Graph, g: &[f64], spec: &GraphSpec, cfg: &ProposalConfig) -> f64 {
    MixingKernel::new(x_from, g, spec, cfg).log_prob(x_to)
}

/// `Δ = -β_mh (V_y - V_x) + log q(y→x) - log q(x→y)`.
pub fn mh_log_ratio(v_x: f64, v_y: f64, logq_fwd: f64, logq_rev: f64, beta_mh: f64) -> f64 {
    -beta_mh * (v_y - v_x) + logq_rev - logq_fwd
}

/// Acceptance probability `min(1, exp(Δ))` and the accept decision.
pub fn mh_accept<R: Rng + ?Sized>(
    v_x: f64,
    v_y: f64,
    logq_fwd: f64,
    logq_rev: f64,
    beta_mh: f64,
    rng: &mut R,
) -> (bool, f64) {
    let delta = mh_log_ratio(v_x, v_y, logq_fwd, logq_rev, beta_mh);
    let alpha = if delta >= 0.0 { 1.0 } else { delta.exp() };
    let u: f64 = rng.gen();
    (u < alpha, alpha)
}
