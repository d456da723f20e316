use std::collections::BTreeSet;

use bsac_core::agent::{ReplayBuffer, Transition};
use bsac_core::bsn::{parse_factorization, BsnGraph, BsnNode};
use bsac_core::critic::CriticSet;
use bsac_core::envs::ChainLqrEnv;
use bsac_core::ndmath::{adam_step, finite_diff_grad, max_relative_error, AdamState, Dense, Matrix, Mlp};
use bsac_core::policy::ActionValue;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn flat(layers: &[Dense]) -> Vec<f64> {
    layers.iter().flat_map(|l| l.weight.as_slice().iter().chain(&l.bias).copied()).collect()
}

/// A random DAG over `m` nodes partitioning `dim` action dimensions. Nodes
/// are created in a hidden order; parents always come earlier in it, and the
/// node list handed to the graph is shuffled.
fn random_dag(seed: u64, m: usize, dim: usize) -> (Vec<BsnNode>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims: Vec<usize> = (0..dim).collect();
    dims.shuffle(&mut rng);
    let mut owner: Vec<usize> = (0..m).collect();
    owner.extend((m..dim).map(|_| rng.random_range(0..m)));
    let mut nodes: Vec<BsnNode> = (0..m)
        .map(|i| BsnNode {
            id: format!("n{i}"),
            action_dims: Vec::new(),
            parents: (0..i).filter(|_| rng.random_bool(0.4)).map(|p| format!("n{p}")).collect(),
        })
        .collect();
    for (d, o) in dims.into_iter().zip(owner) {
        nodes[o].action_dims.push(d);
    }
    for n in &mut nodes {
        n.action_dims.sort_unstable();
    }
    nodes.shuffle(&mut rng);
    (nodes, dim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn mlp_backprop_matches_finite_differences(
        seed in any::<u64>(),
        input in 1usize..5,
        hidden in prop::collection::vec(1usize..7, 0..3),
        output in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![input];
        sizes.extend(&hidden);
        sizes.push(output);
        let net = Mlp::init(&sizes, &mut rng);
        let x: Vec<f64> = (0..input).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..output).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, cache) = net.forward(&x).unwrap();
        prop_assume!(cache.kink_margin() > 1e-3);
        let grad = net.backward(&cache, &w).unwrap();
        let loss = |params: &[f64]| {
            let mut n = net.clone();
            n.set_flat(params).unwrap();
            n.predict(&x).unwrap().iter().zip(&w).map(|(y, w)| y * w).sum::<f64>()
        };
        let fd = finite_diff_grad(loss, &net.to_flat(), 1e-6).unwrap();
        prop_assert!(max_relative_error(&flat(&grad.layers), &fd, 1e-6) < 1e-5);
        let fd_x = finite_diff_grad(|x| net.predict(x).unwrap().iter().zip(&w).map(|(y, w)| y * w).sum(), &x, 1e-6).unwrap();
        prop_assert!(max_relative_error(grad.input.as_slice(), &fd_x, 1e-6) < 1e-5);
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point(seed in any::<u64>(), steps in 1usize..20, lr in 1e-6f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::init(&[3, 5, 2], &mut rng);
        let before = net.clone();
        let mut state = AdamState::new(&net);
        let zeros: Vec<Dense> = net.layers().iter().map(|l| Dense::zeros(l.input_dim(), l.output_dim())).collect();
        for _ in 0..steps {
            adam_step(&mut net, &zeros, &mut state, lr).unwrap();
        }
        prop_assert_eq!(net, before);
    }

    #[test]
    fn random_dags_partition_order_and_render(seed in any::<u64>(), m in 1usize..7, extra in 0usize..4) {
        let (nodes, dim) = random_dag(seed, m, m + extra);
        let graph = BsnGraph::new(nodes.clone(), Some(dim)).unwrap();

        let mut covered: Vec<usize> = graph.nodes().iter().flat_map(|n| n.action_dims.iter().copied()).collect();
        covered.sort_unstable();
        prop_assert_eq!(covered, (0..dim).collect::<Vec<_>>());

        let order = graph.topological_order();
        prop_assert_eq!(order.len(), m);
        let pos = |id: &str| order.iter().position(|o| *o == id).unwrap();
        for n in &nodes {
            for p in &n.parents {
                prop_assert!(pos(p) < pos(&n.id));
            }
        }

        let parsed = parse_factorization(&graph.factorization_string()).unwrap();
        prop_assert_eq!(parsed.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>(), order.clone());
        for (id, parents) in parsed {
            let node = nodes.iter().find(|n| n.id == id).unwrap();
            let expected: BTreeSet<&str> = node.parents.iter().map(String::as_str).collect();
            prop_assert_eq!(parents.iter().map(String::as_str).collect::<BTreeSet<_>>(), expected);
        }
    }

    #[test]
    fn two_soft_updates_compose(seed in any::<u64>(), tau in 0.001f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = CriticSet::new(2, 1, &[4], 0.9, tau, &mut rng).unwrap();
        let fresh = Mlp::init(&a.v.sizes(), &mut rng);
        a.v_target = fresh;
        let mut b = a.clone();
        a.soft_update();
        a.soft_update();
        b.tau = 1.0 - (1.0 - tau).powi(2);
        b.soft_update();
        let err = a.v_target.to_flat().iter().zip(b.v_target.to_flat()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-12, "{}", err);
    }

    #[test]
    fn twin_minimum_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = CriticSet::new(3, 2, &[6], 0.9, 0.01, &mut rng).unwrap();
        let mut b = a.clone();
        std::mem::swap(&mut b.q1, &mut b.q2);
        let states = Matrix::from_vec(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let actions = Matrix::from_vec(4, 2, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (va, _) = a.min_q().value_and_action_grad(&states, &actions).unwrap();
        let (vb, _) = b.min_q().value_and_action_grad(&states, &actions).unwrap();
        prop_assert_eq!(va, vb);
    }

    #[test]
    fn chain_dynamics_are_linear(seed in any::<u64>(), carts in 1usize..7, alpha in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = ChainLqrEnv::new(carts);
        let x: Vec<f64> = (0..2 * carts).map(|_| rng.random_range(-0.3..0.3)).collect();
        let u: Vec<f64> = (0..carts).map(|_| rng.random_range(-0.3..0.3)).collect();
        let (next, r) = env.transition(&x, &u);
        let scaled = |v: &[f64]| v.iter().map(|e| alpha * e).collect::<Vec<_>>();
        let (next_a, r_a) = env.transition(&scaled(&x), &scaled(&u));
        for (p, q) in next_a.iter().zip(&next) {
            prop_assert!((p - alpha * q).abs() < 1e-12);
        }
        prop_assert!((r_a - alpha * alpha * r).abs() < 1e-12 * r.abs().max(1.0));
    }

    #[test]
    fn replay_never_exceeds_capacity(capacity in 1usize..50, pushes in 0usize..200) {
        let mut buf = ReplayBuffer::new(capacity, 2, 1);
        for k in 0..pushes {
            buf.push(&Transition {
                state: vec![k as f64; 2],
                action: vec![0.0],
                pre_squash: vec![0.0],
                reward: k as f64,
                next_state: vec![0.0; 2],
                done: false,
                truncated: false,
            }).unwrap();
            prop_assert!(buf.len() <= capacity);
        }
        prop_assert_eq!(buf.len(), pushes.min(capacity));
        // Exactly the most recent `len` rewards survive.
        let mut kept: Vec<usize> = (0..buf.len()).map(|i| buf.get(i).reward as usize).collect();
        kept.sort_unstable();
        prop_assert_eq!(kept, (pushes - buf.len()..pushes).collect::<Vec<_>>());
    }
}

