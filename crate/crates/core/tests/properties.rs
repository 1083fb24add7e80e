use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gem_core::config::GemConfig;
use gem_core::dataset::{read_graphs, write_graphs};
use gem_core::energy::{EnergyModel, Potential};
use gem_core::geodesics::{basis, sign_test_greater, SplinePath};
use gem_core::graph::{decode, embed, local_cost, pairs, permute, Graph, GraphSpec, Permutation};
use gem_core::guidance::time_proxy;
use gem_core::matching::linear_assignment;
use gem_core::metrics::canonical_hash;
use gem_core::oracle::enumerate_states;
use gem_core::proposals::{greedy_step, MixingKernel, ProposalConfig};

fn spec() -> GraphSpec {
    GraphSpec::new(6, 3, 3).unwrap()
}

/// A random graph on `spec()` together with the seed that drew it.
fn graph() -> impl Strategy<Value = Graph> {
    (1usize..=6, any::<u64>()).prop_map(|(n, seed)| Graph::uniform(&spec(), n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap())
}

fn graph_and_perm() -> impl Strategy<Value = (Graph, Permutation)> {
    (graph(), any::<u64>()).prop_map(|(g, s)| {
        let p = Permutation::random(g.n(), &mut ChaCha8Rng::seed_from_u64(s));
        (g, p)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embedding_round_trips(g in graph()) {
        let e = embed(&g, &spec()).unwrap();
        prop_assert_eq!(decode(&e, &spec(), g.n()).unwrap(), g.clone());
        let ones: f64 = e.0.iter().sum();
        prop_assert_eq!(ones as usize, g.n() + pairs(g.n()).count());
    }

    #[test]
    fn permutation_then_inverse_is_identity((g, p) in graph_and_perm()) {
        let back = permute(&permute(&g, &p).unwrap(), &p.inverse()).unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn energy_and_hash_are_permutation_invariant((g, p) in graph_and_perm(), seed in 0u64..4) {
        let m = EnergyModel::new(spec(), 6, 1, seed).unwrap();
        let h = permute(&g, &p).unwrap();
        let (a, b) = (m.energy(&g).unwrap(), m.energy(&h).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        prop_assert_eq!(canonical_hash(&g), canonical_hash(&h));
    }

    #[test]
    fn local_cost_is_a_symmetric_premetric(a in graph(), s in any::<u64>()) {
        let b = Graph::uniform(&spec(), a.n(), &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        let ab = local_cost(&a, &b, 0.3, 0.7).unwrap();
        prop_assert_eq!(ab, local_cost(&b, &a, 0.3, 0.7).unwrap());
        prop_assert_eq!(ab == 0.0, a == b);
    }

    #[test]
    fn assignment_beats_every_transposition(n in 1usize..7, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Array2::from_shape_fn((n, n), |_| rng.gen::<f64>());
        let (perm, total) = linear_assignment(&c).unwrap();
        let mut seen = perm.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        for i in 0..n {
            for j in i + 1..n {
                let mut q = perm.clone();
                q.swap(i, j);
                let alt: f64 = q.iter().enumerate().map(|(r, &k)| c[[r, k]]).sum();
                prop_assert!(total <= alt + 1e-12);
            }
        }
    }

    #[test]
    fn greedy_step_changes_one_site(g in graph(), seed in 0u64..4) {
        let m = EnergyModel::new(spec(), 6, 1, seed).unwrap();
        let grad = m.evaluate_graph(&g).unwrap().grad;
        if let Some(y) = greedy_step(&g, &grad, &spec(), 0.05, 0.05, 1) {
            prop_assert_eq!(y.site_distance(&g), 1);
        }
    }

    #[test]
    fn spline_basis_sums_to_one(t in 0.0f64..=1.0) {
        let b = basis(t);
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(b.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn spline_points_lie_on_simplices(a in graph(), s in any::<u64>(), t in 0.0f64..=1.0) {
        let b = Graph::uniform(&spec(), a.n(), &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        let p = SplinePath::linear(&a, &b, &spec(), 0.01).unwrap();
        let e = p.eval(t).unwrap();
        for i in 0..a.n() {
            prop_assert!((e.node_block(&spec(), i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for (i, j) in pairs(a.n()) {
            prop_assert!((e.pair_block(&spec(), i, j).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn time_proxy_is_clamped_and_monotone(v in -10.0f64..10.0, w in -10.0f64..10.0) {
        let (a, b) = (time_proxy(v, 2.0, -1.0).unwrap(), time_proxy(w, 2.0, -1.0).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
        if v <= w {
            prop_assert!(a >= b);
        }
    }

    #[test]
    fn sign_test_is_a_probability(d in proptest::collection::vec(-1.0f64..1.0, 0..40)) {
        let p = sign_test_greater(&d);
        prop_assert!(p > 0.0 && p <= 1.0);
    }

    #[test]
    fn jsonl_round_trips(gs in proptest::collection::vec(graph(), 0..6)) {
        let mut buf = Vec::new();
        write_graphs(&mut buf, &gs).unwrap();
        prop_assert_eq!(read_graphs(&buf[..], &spec()).unwrap(), gs);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// The cascade kernel is a proper distribution over every state.
    #[test]
    fn mixing_kernel_normalizes(seed in 0u64..1000, beta_l in 0.2f64..4.0, retries in 0usize..3) {
        let spec = GraphSpec::new(3, 2, 3).unwrap();
        let m = EnergyModel::new(spec, 5, 1, seed).unwrap();
        let states = enumerate_states(&spec, 3).unwrap();
        let x = &states[(seed as usize) % states.len()];
        let g = m.evaluate_graph(x).unwrap().grad;
        let cfg = ProposalConfig { max_retries: retries, ..ProposalConfig::fixed(beta_l, 0.4, 0.6, 1.0) };
        let k = MixingKernel::new(x, &g, &spec, &cfg);
        let total: f64 = states.iter().map(|y| k.log_prob(y).exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9, "total {}", total);
    }
}

#[test]
fn config_round_trips_through_json() {
    let mut c = GemConfig::default();
    c.sampler.chains = 3;
    c.training.lambda_cl = 0.5;
    let text = serde_json::to_string_pretty(&c).unwrap();
    assert_eq!(GemConfig::from_json(&text).unwrap(), c);
}
