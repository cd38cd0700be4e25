#![allow(clippy::needless_range_loop)]
mod common;

use cgmcl::diffcore::{ParamStore, Tape, Tensor};
use cgmcl::encoders::{GatLayer, GcnLayer};
use cgmcl::fusion::{kl_alignment, shared_space, similarity_matrix};
use cgmcl::graphs::{default_k, gcn_normalize, knn_build, with_self_loops, ModalGraph};
use cgmcl::Error;
use common::brute_knn;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> ModalGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(p) {
                edges.push((i, j));
            }
        }
    }
    ModalGraph::from_edges(n, &edges).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_matches_brute_force(seed in 0u64..10_000, n in 2usize..13, d in 1usize..4, integer in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = points(&mut rng, n, d);
        if integer {
            // coarse grid forces distance ties
            for p in &mut pts { for v in p.iter_mut() { *v = v.round(); } }
        }
        let x = tensor(&pts);
        for k in 1..n {
            let g = knn_build(&x, k).unwrap();
            let oracle = brute_knn(&pts, k);
            for i in 0..n {
                prop_assert!(!g.has_edge(i, i));
                for j in 0..n {
                    prop_assert_eq!(g.has_edge(i, j), oracle[i][j]);
                    prop_assert_eq!(g.has_edge(i, j), g.has_edge(j, i));
                }
            }
        }
    }

    #[test]
    fn self_loops_and_normalisation(seed in 0u64..10_000, n in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, 0.4);
        let hat = with_self_loops(&g);
        let norm = gcn_normalize(&hat);
        for i in 0..n {
            prop_assert!(hat.has_edge(i, i));
            prop_assert_eq!(hat.degree()[i], g.degree(i) + 1);
            for j in 0..n {
                prop_assert_eq!(norm.get(i, j), norm.get(j, i));
                if i != j {
                    prop_assert_eq!(hat.has_edge(i, j), g.has_edge(i, j));
                }
                let expected = if hat.has_edge(i, j) {
                    1.0 / ((hat.degree()[i] * hat.degree()[j]) as f64).sqrt()
                } else {
                    0.0
                };
                prop_assert!((norm.get(i, j) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn similarity_is_symmetric_psd_and_kl_nonnegative(seed in 0u64..10_000, n in 1usize..7, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zi = tensor(&points(&mut rng, n, d));
        let zc = tensor(&points(&mut rng, n, d));
        let mut tape = Tape::new();
        let a = tape.constant(zi.clone()).unwrap();
        let b = tape.constant(zc.clone()).unwrap();
        let z = shared_space(&mut tape, a, b).unwrap();
        let s = similarity_matrix(&mut tape, z).unwrap();
        let s = tape.value(s).clone();
        for i in 0..n {
            prop_assert!(s.get(i, i) >= 0.0);
            for j in 0..n {
                prop_assert_eq!(s.get(i, j), s.get(j, i));
            }
        }
        // xᵀ S x = ‖Zᵀ x‖² ≥ 0
        for _ in 0..5 {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let q: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| x[i] * s.get(i, j) * x[j]).sum();
            prop_assert!(q >= -1e-9);
        }
        prop_assert!(kl_alignment(&zi, &zc).unwrap() >= 0.0);
        prop_assert!(kl_alignment(&zi, &zi).unwrap() < 1e-9);
    }
}

#[test]
fn knn_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let n = rng.gen_range(2..=12);
        let d = rng.gen_range(1..=3);
        let pts = points(&mut rng, n, d);
        let x = tensor(&pts);
        let k = rng.gen_range(1..n);
        let g = knn_build(&x, k).unwrap();
        let oracle = brute_knn(&pts, k);
        for i in 0..n {
            for j in 0..n {
                assert_eq!(g.has_edge(i, j), oracle[i][j]);
            }
        }
    }
}

#[test]
fn knn_rejects_bad_k_and_non_finite_input() {
    let x = tensor(&[vec![0.0], vec![1.0], vec![2.0]]);
    assert!(matches!(knn_build(&x, 0), Err(Error::Config(_))));
    assert!(matches!(knn_build(&x, 3), Err(Error::Config(_))));
    let bad = Tensor::matrix(2, 1, vec![0.0, f64::INFINITY]);
    if let Ok(bad) = bad {
        assert!(knn_build(&bad, 1).is_err());
    }
    assert_eq!(default_k(200), 10);
    assert_eq!(default_k(30), 3);
    assert_eq!(default_k(5), 2);
}

fn gat(seed: u64, d_in: usize, d_out: usize) -> (GatLayer, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = GatLayer::new("gat", d_in, d_out, &mut store, &mut rng).unwrap();
    (layer, store)
}

#[test]
fn gat_attention_rows_are_normalised_on_the_neighbourhood() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..100 {
        let n = rng.gen_range(2..=12);
        let (layer, store) = gat(trial, 3, 4);
        let x = tensor(&points(&mut rng, n, 3));
        let g = with_self_loops(&random_graph(&mut rng, n, 0.3));
        let alpha = layer.attention(&store, &x, &g).unwrap();
        for i in 0..n {
            let sum: f64 = alpha.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for j in 0..n {
                if !g.has_edge(i, j) {
                    assert_eq!(alpha.get(i, j), 0.0);
                } else {
                    assert!(alpha.get(i, j) > 0.0);
                }
            }
        }
    }
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&p| x.row(p).to_vec()).collect();
    tensor(&rows)
}

fn permute_graph(g: &ModalGraph, perm: &[usize]) -> ModalGraph {
    // node i of the new graph is node perm[i] of the old one
    let n = g.n();
    let mut inv = vec![0; n];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let edges: Vec<(usize, usize)> = g.edges().into_iter().map(|(a, b)| (inv[a], inv[b])).collect();
    ModalGraph::from_edges(n, &edges).unwrap()
}

#[test]
fn graph_layers_are_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..20 {
        let n = 7;
        let x = tensor(&points(&mut rng, n, 3));
        let g = random_graph(&mut rng, n, 0.4);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let xp = permute_rows(&x, &perm);
        let gp = permute_graph(&g, &perm);

        let (layer, store) = gat(trial, 3, 4);
        let run_gat = |x: &Tensor, g: &ModalGraph| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let a_hat = with_self_loops(g).to_tensor();
            let out = layer.forward(&mut tape, &store, xv, &a_hat).unwrap();
            tape.value(out).clone()
        };
        let mut gstore = ParamStore::new();
        let gcn = GcnLayer::new("gcn", 3, 4, &mut gstore, &mut rng).unwrap();
        let run_gcn = |x: &Tensor, g: &ModalGraph| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let norm = tape.constant(gcn_normalize(&with_self_loops(g))).unwrap();
            let out = gcn.forward(&mut tape, &gstore, xv, norm).unwrap();
            tape.value(out).clone()
        };
        for (base, permuted) in [
            (run_gat(&x, &g), run_gat(&xp, &gp)),
            (run_gcn(&x, &g), run_gcn(&xp, &gp)),
        ] {
            let expected = permute_rows(&base, &perm);
            for (a, b) in expected.data().iter().zip(permuted.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
