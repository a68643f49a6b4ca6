#![allow(dead_code)]

use modgat::graph::{build_adjacency, l2_normalize_rows, PatchGraph};
use modgat::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Features drawn around a few random centres, so thresholded graphs have
/// community structure; retries until the graph has at least one edge.
pub fn clustered_features(rng: &mut ChaCha8Rng, n: usize, dim: usize, groups: usize, spread: f64) -> Tensor<f64> {
    let centres: Vec<Vec<f64>> = (0..groups)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    Tensor::from_fn(n, dim, |i, j| centres[i % groups][j] + rng.random_range(-spread..spread))
}

pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, tau: f64) -> (Tensor<f64>, PatchGraph<f64>) {
    loop {
        let groups = rng.random_range(2..=3);
        let f = clustered_features(rng, n, 4, groups, 0.6);
        let Ok(f) = l2_normalize_rows(&f) else { continue };
        if let Ok(g) = build_adjacency(&f, tau) {
            return (f, g);
        }
    }
}

pub fn random_perm(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

/// Rows moved so that old row `i` lands at `perm[i]`.
pub fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let mut out = t.clone();
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(p).copy_from_slice(t.row(i));
    }
    out
}

pub fn random_stochastic(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor<f64> {
    let mut c = Tensor::from_fn(n, k, |_, _| rng.random_range(0.01..1.0));
    for i in 0..n {
        let s: f64 = c.row(i).iter().sum();
        c.row_mut(i).iter_mut().for_each(|x| *x /= s);
    }
    c
}

/// Edge-list modularity: `sum_c [ w_in(c) / m - (vol(c) / 2m)^2 ]`, with
/// `w_in` the internal edge weight.
pub fn modularity_by_communities(g: &PatchGraph<f64>, labels: &[usize]) -> f64 {
    let n = g.nodes();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut internal = vec![0.0; k];
    let mut volume = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let w = g.adjacency.get(i, j);
            total += w;
            if labels[i] == labels[j] {
                internal[labels[i]] += w;
            }
        }
    }
    for i in 0..n {
        let d: f64 = (0..n).map(|j| g.adjacency.get(i, j)).sum();
        volume[labels[i]] += d;
    }
    (0..k)
        .map(|c| internal[c] / total - (volume[c] / (2.0 * total)).powi(2))
        .sum()
}

/// Best bipartition by exhaustive search over all 2^n labelings.
pub fn brute_force_bipartition(g: &PatchGraph<f64>) -> (f64, Vec<usize>) {
    let n = g.nodes();
    let mut best = (f64::NEG_INFINITY, vec![0; n]);
    for mask in 0u32..(1 << n) {
        let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
        let q = modularity_by_communities(g, &labels);
        if q > best.0 + 1e-15 {
            best = (q, labels);
        }
    }
    best
}
