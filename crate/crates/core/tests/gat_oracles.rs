mod common;

use common::*;
use modgat::autodiff::{Activation, SELU_ALPHA, SELU_LAMBDA};
use modgat::gat::{attention_coefficients, gat_layer_forward, init_params, GatLayerParams, GatModel, HeadParams, ModelConfig};
use modgat::graph::PreparedGraph;
use modgat::train::loss_and_grads;
use modgat::Tensor;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mm(a: &Mat, b: &Tensor<f64>) -> Mat {
    a.iter()
        .map(|row| {
            (0..b.cols())
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b.get(k, j)).sum())
                .collect()
        })
        .collect()
}

fn act(x: f64, a: Activation) -> f64 {
    match a {
        Activation::Silu => x / (1.0 + (-x).exp()),
        Activation::Selu if x > 0.0 => SELU_LAMBDA * x,
        Activation::Selu => SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0),
        Activation::Relu => x.max(0.0),
    }
}

/// Neighbour lists taken directly from the adjacency, with self loops.
fn neighbour_lists(image: &PreparedGraph<f64>) -> Vec<Vec<usize>> {
    let n = image.nodes();
    (0..n)
        .map(|i| (0..n).filter(|&j| j == i || image.graph.adjacency.get(i, j) > 0.0).collect())
        .collect()
}

/// alpha[i][pos] over neighbours of i in ascending order.
fn oracle_alpha(h: &Mat, head: &HeadParams<f64>, nb: &[Vec<usize>], slope: f64) -> (Mat, Vec<Vec<f64>>) {
    let wh = mm(h, &head.weight);
    let f = head.weight.cols();
    let score = |v: &[f64], col: usize| -> f64 { (0..f).map(|c| v[c] * head.attention.get(c, col)).sum() };
    let alpha = nb
        .iter()
        .enumerate()
        .map(|(i, list)| {
            let e: Vec<f64> = list
                .iter()
                .map(|&j| {
                    let z = score(&wh[i], 0) + score(&wh[j], 1);
                    if z > 0.0 { z } else { slope * z }
                })
                .collect();
            let total: f64 = e.iter().map(|x| x.exp()).sum();
            e.iter().map(|x| x.exp() / total).collect()
        })
        .collect();
    (wh, alpha)
}

fn oracle_layer(h: &Mat, layer: &GatLayerParams<f64>, nb: &[Vec<usize>], slope: f64) -> Mat {
    let n = h.len();
    let mut out = vec![Vec::new(); n];
    for head in &layer.heads {
        let (wh, alpha) = oracle_alpha(h, head, nb, slope);
        for i in 0..n {
            for c in 0..head.weight.cols() {
                let s: f64 = nb[i].iter().zip(&alpha[i]).map(|(&j, a)| a * wh[j][c]).sum();
                out[i].push(act(s, layer.activation));
            }
        }
    }
    out
}

fn oracle_model(model: &GatModel<f64>, image: &PreparedGraph<f64>) -> Mat {
    let nb = neighbour_lists(image);
    let slope = model.config.leaky_slope;
    let x = to_mat(&image.features);
    let n = x.len();
    let mut summed = vec![vec![0.0; model.config.agg_dim]; n];
    for (layers, fc) in model.branches.iter().zip(&model.fcn1) {
        let mut h = x.clone();
        for layer in layers {
            h = oracle_layer(&h, layer, &nb, slope);
        }
        let p = mm(&h, &fc.weight);
        for i in 0..n {
            for j in 0..p[i].len() {
                summed[i][j] += p[i][j] + fc.bias.get(0, j);
            }
        }
    }
    let logits = mm(&summed, &model.fcn2.weight);
    logits
        .iter()
        .map(|row| {
            let z: Vec<f64> = row.iter().enumerate().map(|(j, x)| x + model.fcn2.bias.get(0, j)).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|x| (x - m).exp()).sum();
            z.iter().map(|x| (x - m).exp() / s).collect()
        })
        .collect()
}

fn image(seed: u64, n: usize, dim: usize) -> PreparedGraph<f64> {
    let mut r = rng(seed);
    loop {
        let f = clustered_features(&mut r, n, dim, 2, 0.7);
        if let Ok(p) = PreparedGraph::from_features(&f, 0.3) {
            return p;
        }
    }
}

fn small_layer(seed: u64, fin: usize, fh: usize, heads: usize, act: Activation) -> GatLayerParams<f64> {
    let mut r = rng(seed);
    GatLayerParams {
        heads: (0..heads)
            .map(|_| HeadParams {
                weight: random_matrix(&mut r, fin, fh, 1.0),
                attention: random_matrix(&mut r, fh, 2, 1.0),
            })
            .collect(),
        activation: act,
    }
}

#[test]
fn attention_coefficients_match_scalar_loop() {
    let img = image(1, 5, 3);
    let layer = small_layer(2, 3, 4, 2, Activation::Silu);
    let got = attention_coefficients(&img.features, &layer, &img.neighborhoods, 0.2).unwrap();
    let nb = neighbour_lists(&img);
    for (z, head) in layer.heads.iter().enumerate() {
        let (_, alpha) = oracle_alpha(&to_mat(&img.features), head, &nb, 0.2);
        let flat: Vec<f64> = alpha.into_iter().flatten().collect();
        assert_eq!(flat.len(), got[z].len());
        for (a, b) in flat.iter().zip(got[z].data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn layer_forward_matches_scalar_loop() {
    for (seed, act) in [(3, Activation::Silu), (4, Activation::Selu), (5, Activation::Relu)] {
        let img = image(seed, 6, 4);
        let layer = small_layer(seed + 10, 4, 3, 2, act);
        let got = gat_layer_forward(&img.features, &layer, &img.neighborhoods, 0.2).unwrap();
        let expect = oracle_layer(&to_mat(&img.features), &layer, &neighbour_lists(&img), 0.2);
        for i in 0..6 {
            for j in 0..6 {
                assert!((got.get(i, j) - expect[i][j]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn full_model_matches_independent_forward() {
    let img = image(6, 16, 24);
    let model = init_params::<f64>(&ModelConfig::default(), 24).unwrap();
    let c = model.forward(&img.features, &img.neighborhoods).unwrap();
    let expect = oracle_model(&model, &img);
    for i in 0..16 {
        for j in 0..2 {
            assert!((c.soft.get(i, j) - expect[i][j]).abs() < 1e-9);
        }
    }
}

#[test]
fn zeroed_second_branch_equals_single_branch() {
    let img = image(7, 12, 8);
    let cfg = ModelConfig {
        branch_dims: vec![8, 6],
        agg_dim: 5,
        ..ModelConfig::default()
    };
    let mut two = init_params::<f64>(&cfg, 8).unwrap();
    two.fcn1[1].weight.fill(0.0);
    two.fcn1[1].bias.fill(0.0);
    let mut one = two.clone();
    one.branches.truncate(1);
    one.fcn1.truncate(1);
    one.config.branches = 1;
    one.config.branch_dims.truncate(1);
    let a = two.forward(&img.features, &img.neighborhoods).unwrap();
    let b = one.forward(&img.features, &img.neighborhoods).unwrap();
    assert_eq!(a.soft.data(), b.soft.data());
}

#[test]
fn glorot_bounds_and_mean() {
    let limit = (6.0f64 / 192.0).sqrt();
    let mut sample = Vec::new();
    for seed in 0..2 {
        let cfg = ModelConfig { seed, ..ModelConfig::default() };
        let m = init_params::<f64>(&cfg, 32).unwrap();
        assert_eq!(m.fcn1[0].weight.shape(), &[128, 64]);
        sample.extend_from_slice(m.fcn1[0].weight.data());
    }
    sample.truncate(10_000);
    assert!(sample.iter().all(|w| w.abs() <= limit));
    let mean = sample.iter().sum::<f64>() / sample.len() as f64;
    let sigma = limit / 3f64.sqrt() / (sample.len() as f64).sqrt();
    assert!(mean.abs() < 3.0 * sigma, "mean {mean} sigma {sigma}");
    let var = sample.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / sample.len() as f64;
    assert!((var - limit * limit / 3.0).abs() < 0.05 * limit * limit);
}

#[test]
fn assignment_is_permutation_equivariant_and_stochastic() {
    let mut r = rng(8);
    let cfg = ModelConfig {
        branch_dims: vec![8, 6],
        agg_dim: 5,
        clusters: 3,
        ..ModelConfig::default()
    };
    for _ in 0..5 {
        let raw = clustered_features(&mut r, 14, 6, 3, 0.7);
        let Ok(img) = PreparedGraph::from_features(&raw, 0.3) else { continue };
        let perm = random_perm(&mut r, 14);
        let imgp = PreparedGraph::from_features(&permute_rows(&raw, &perm), 0.3).unwrap();
        let model = init_params::<f64>(&cfg, 6).unwrap();
        let c = model.forward(&img.features, &img.neighborhoods).unwrap().soft;
        let cp = model.forward(&imgp.features, &imgp.neighborhoods).unwrap().soft;
        for i in 0..14 {
            let s: f64 = c.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for j in 0..3 {
                assert!(c.get(i, j) > 0.0 && c.get(i, j) < 1.0);
                assert!((c.get(i, j) - cp.get(perm[i], j)).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let img = image(9, 20, 10);
    let model = init_params::<f64>(&ModelConfig::default(), 10).unwrap();
    let (_, grads) = loss_and_grads(&model, &img).unwrap();
    for (name, g) in model.parameter_names().iter().zip(&grads) {
        assert!(g.max_abs() > 0.0, "{name} has zero gradient");
    }
}

#[test]
fn single_precision_forward() {
    let img = image(10, 16, 12);
    let f32_features = img.features.cast::<f32>();
    let model = init_params::<f32>(&ModelConfig::default(), 12).unwrap();
    let c = model.forward(&f32_features, &img.neighborhoods).unwrap();
    for i in 0..16 {
        let s: f32 = c.soft.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
    let c64 = init_params::<f64>(&ModelConfig::default(), 12)
        .unwrap()
        .forward(&img.features, &img.neighborhoods)
        .unwrap();
    for (a, b) in c.soft.data().iter().zip(c64.soft.data()) {
        assert!((*a as f64 - b).abs() < 1e-4);
    }
}
