mod common;

use common::*;
use modgat::graph::{build_adjacency, l2_normalize_rows, modularity_matrix, neighborhoods};
use proptest::prelude::*;

#[test]
fn random_rows_normalize_to_unit_length() {
    let mut r = rng(11);
    let f = random_matrix(&mut r, 10, 5, 3.0);
    let n = l2_normalize_rows(&f).unwrap();
    for i in 0..10 {
        let norm: f64 = n.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        // direction preserved
        let scale = f.get(i, 0) / n.get(i, 0);
        for j in 0..5 {
            assert!((f.get(i, j) - scale * n.get(i, j)).abs() < 1e-9);
        }
    }
}

#[test]
fn adjacency_matches_pairwise_dot_products() {
    let mut r = rng(5);
    for _ in 0..20 {
        let f = l2_normalize_rows(&random_matrix(&mut r, 9, 3, 1.0)).unwrap();
        let Ok(g) = build_adjacency(&f, 0.3) else { continue };
        for i in 0..9 {
            for j in 0..9 {
                let dot: f64 = (0..3).map(|c| f.get(i, c) * f.get(j, c)).sum();
                let expect = if i != j && dot > 0.3 { dot } else { 0.0 };
                assert!((g.adjacency.get(i, j) - expect).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn modularity_matrix_matches_scalar_loop() {
    let mut r = rng(8);
    let (_, g) = random_graph(&mut r, 8, 0.3);
    let b = modularity_matrix(&g);
    let mut d = [0.0; 8];
    let mut two_m = 0.0;
    for i in 0..8 {
        for j in 0..8 {
            d[i] += g.adjacency.get(i, j);
            two_m += g.adjacency.get(i, j);
        }
    }
    for i in 0..8 {
        for j in 0..8 {
            let expect = g.adjacency.get(i, j) - d[i] * d[j] / two_m;
            assert!((b.b.get(i, j) - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn graph_invariants_hold() {
    let mut r = rng(21);
    for n in 2..20 {
        let (_, g) = random_graph(&mut r, n, 0.3);
        for i in 0..n {
            assert_eq!(g.adjacency.get(i, i), 0.0);
            let row: f64 = g.adjacency.row(i).iter().sum();
            assert!((row - g.degrees[i]).abs() < 1e-12);
            for j in 0..n {
                let a = g.adjacency.get(i, j);
                assert_eq!(a, g.adjacency.get(j, i));
                assert!(a == 0.0 || (a > 0.3 && a <= 1.0));
            }
        }
        let total: f64 = g.degrees.iter().sum();
        assert!((total - g.edge_mass).abs() < 1e-12 && g.edge_mass > 0.0);
        let nb = neighborhoods(&g);
        for i in 0..n {
            assert!(nb.of(i).windows(2).all(|w| w[0] < w[1]));
            assert!(nb.of(i).contains(&i));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn permutation_equivariance(seed in any::<u64>(), n in 3usize..12) {
        let mut r = rng(seed);
        let (f, g) = random_graph(&mut r, n, 0.3);
        let perm = random_perm(&mut r, n);
        let gp = build_adjacency(&permute_rows(&f, &perm), 0.3).unwrap();
        let (b, bp) = (modularity_matrix(&g), modularity_matrix(&gp));
        for i in 0..n {
            for j in 0..n {
                prop_assert!((g.adjacency.get(i, j) - gp.adjacency.get(perm[i], perm[j])).abs() < 1e-15);
                prop_assert!((b.b.get(i, j) - bp.b.get(perm[i], perm[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn b_rows_and_total_sum_to_zero(seed in any::<u64>(), n in 2usize..30) {
        let mut r = rng(seed);
        let (_, g) = random_graph(&mut r, n, 0.3);
        let b = modularity_matrix(&g);
        let mut total = 0.0;
        for i in 0..n {
            let s: f64 = b.b.row(i).iter().sum();
            prop_assert!(s.abs() < 1e-9);
            total += s;
            for j in 0..n {
                prop_assert!((b.b.get(i, j) - b.b.get(j, i)).abs() < 1e-12);
            }
        }
        prop_assert!(total.abs() < 1e-9);
    }

    #[test]
    fn raising_tau_never_adds_edges(seed in any::<u64>(), lo in 0.05f64..0.6, gap in 0.0f64..0.35) {
        let mut r = rng(seed);
        let f = l2_normalize_rows(&clustered_features(&mut r, 10, 4, 2, 0.5)).unwrap();
        let hi = lo + gap;
        if let (Ok(a), Ok(b)) = (build_adjacency(&f, lo), build_adjacency(&f, hi)) {
            for i in 0..10 {
                for j in 0..10 {
                    if b.adjacency.get(i, j) > 0.0 {
                        prop_assert!(a.adjacency.get(i, j) > 0.0);
                    }
                }
            }
        }
    }
}
