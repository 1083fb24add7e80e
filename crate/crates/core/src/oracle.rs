//! Exhaustive state enumeration and exact Gibbs tables for tiny specs.

use crate::energy::Potential;
use crate::error::{GemError, Result};
use crate::graph::{pair_count, pairs, Graph, GraphSpec};
use crate::proposals::{log_sum_exp, ProposalConfig, Regime};
use crate::sampler::{mixing_step, ChainState};

/// Largest state space [`exact_gibbs`] will enumerate.
pub const MAX_STATES: u128 = 1_000_000;

pub fn state_count(spec: &GraphSpec, n: usize) -> u128 {
    let mut total: u128 = 1;
    for _ in 0..n {
        total = total.saturating_mul(spec.l_node as u128);
    }
    for _ in 0..pair_count(n) {
        total = total.saturating_mul(spec.l_edge as u128);
    }
    total
}

/// Mixed-radix index of `g` among all graphs with `g.n()` active nodes:
/// node labels are the low digits, then pairs in lexicographic order.
pub fn state_index(g: &Graph, spec: &GraphSpec) -> usize {
    let mut idx = 0usize;
    let mut base = 1usize;
    for &c in g.active_nodes() {
        idx += c * base;
        base *= spec.l_node;
    }
    for (i, j) in pairs(g.n()) {
        idx += g.edge(i, j) * base;
        base *= spec.l_edge;
    }
    idx
}

/// Inverse of [`state_index`].
pub fn state_at(index: usize, spec: &GraphSpec, n: usize) -> Result<Graph> {
    let mut g = Graph::empty(spec, n)?;
    let mut rest = index;
    for i in 0..n {
        g.set_node(i, rest % spec.l_node);
        rest /= spec.l_node;
    }
    for (i, j) in pairs(n) {
        g.set_edge(i, j, rest % spec.l_edge);
        rest /= spec.l_edge;
    }
    Ok(g)
}

fn guard(spec: &GraphSpec, n: usize) -> Result<usize> {
    let states = state_count(spec, n);
    if states > MAX_STATES {
        return Err(GemError::StateSpaceTooLarge { states, limit: MAX_STATES });
    }
    Ok(states as usize)
}

/// Every graph with `n` active nodes, in [`state_index`] order.
pub fn enumerate_states(spec: &GraphSpec, n: usize) -> Result<Vec<Graph>> {
    let states = guard(spec, n)?;
    (0..states).map(|k| state_at(k, spec, n)).collect()
}

/// Normalized `exp(-β V)` over every graph with `n` active nodes, indexed
/// by [`state_index`].
pub fn exact_gibbs<P: Potential + ?Sized>(potential: &P, n: usize, beta: f64) -> Result<Vec<f64>> {
    let spec = *potential.spec();
    let states = enumerate_states(&spec, n)?;
    let logits = states
        .iter()
        .map(|g| Ok(-beta * potential.value_graph(g)?))
        .collect::<Result<Vec<f64>>>()?;
    let z = log_sum_exp(&logits);
    Ok(logits.iter().map(|l| (l - z).exp()).collect())
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Total variation between the visit frequencies of one mixing-only chain
/// of `steps` steps and the exact Gibbs law at the chain's `β_MH`.
pub fn mixing_tv<P: Potential + ?Sized>(
    potential: &P,
    n: usize,
    cfg: &ProposalConfig,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    if steps == 0 {
        return Err(GemError::InvalidArgument("mixing check needs at least one step".into()));
    }
    cfg.validate()?;
    let spec = *potential.spec();
    let exact = exact_gibbs(potential, n, cfg.beta_mh_final)?;
    let mut st = ChainState::new(potential, state_at(0, &spec, n)?, Regime::Mixing, seed, 0)?;
    let mut counts = vec![0u64; exact.len()];
    for _ in 0..steps {
        mixing_step(potential, &mut st, cfg)?;
        counts[state_index(&st.graph, &spec)] += 1;
    }
    let emp: Vec<f64> = counts.iter().map(|&c| c as f64 / steps as f64).collect();
    Ok(total_variation(&emp, &exact))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::EnergyGradient;
    use crate::graph::Embedding;

    struct Table {
        spec: GraphSpec,
        values: Vec<f64>,
    }

    impl Potential for Table {
        fn spec(&self) -> &GraphSpec {
            &self.spec
        }
        fn evaluate(&self, e: &Embedding, n: usize) -> Result<EnergyGradient> {
            let g = crate::graph::decode(e, &self.spec, n)?;
            Ok(EnergyGradient { value: self.values[state_index(&g, &self.spec)], grad: vec![0.0; e.len()] })
        }
    }

    #[test]
    fn index_round_trips() {
        let spec = GraphSpec::new(4, 2, 3).unwrap();
        for k in 0..state_count(&spec, 3) as usize {
            assert_eq!(state_index(&state_at(k, &spec, 3).unwrap(), &spec), k);
        }
    }

    #[test]
    fn closed_forms() {
        let spec = GraphSpec::new(1, 2, 2).unwrap();
        let beta = 1.7;
        let t = Table { spec, values: vec![0.0, 2f64.ln() / beta] };
        let p = exact_gibbs(&t, 1, beta).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let flat = Table { spec, values: vec![3.0, 3.0] };
        assert!(exact_gibbs(&flat, 1, 2.0).unwrap().iter().all(|p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn tiny_table_sums_to_one() {
        let spec = GraphSpec::new(3, 2, 2).unwrap();
        let values: Vec<f64> = (0..64).map(|k| ((k * 37) % 11) as f64 / 5.0).collect();
        let t = Table { spec, values };
        let p = exact_gibbs(&t, 3, 1.0).unwrap();
        assert_eq!(p.len(), 64);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refuses_large_spaces() {
        let spec = GraphSpec::new(8, 3, 3).unwrap();
        assert!(matches!(enumerate_states(&spec, 8), Err(GemError::StateSpaceTooLarge { .. })));
    }
}
