//! Planted-partition feature generator.
//!
//! Each block gets a unit centre (orthonormal when `blocks <= dim`); a node's
//! feature is its block centre plus isotropic Gaussian noise of expected norm
//! `noise`, then normalized. Blocks are laid out as concentric regions of the
//! patch grid, with the highest block id in the middle.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_feature_matrix, write_tensor, Dtype, FeatureMatrix, GridMeta};
use crate::scalar::Scalar;
use crate::segment::{upsample_mask, BinaryMask};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub nodes: usize,
    pub blocks: usize,
    pub noise: f64,
    pub dim: usize,
    pub seed: u64,
    pub patch: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nodes: 64,
            blocks: 2,
            noise: 0.1,
            dim: 32,
            seed: 0,
            patch: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlantedPartition<T> {
    pub features: FeatureMatrix<T>,
    /// Planted block of every node, in node (row-major grid) order.
    pub labels: Vec<usize>,
    pub blocks: usize,
}

/// Most-square factorisation `rows x cols = nodes` with `rows <= cols`.
pub fn grid_shape(nodes: usize) -> (usize, usize) {
    let mut rows = (nodes as f64).sqrt() as usize;
    while rows > 1 && nodes % rows != 0 {
        rows -= 1;
    }
    let rows = rows.max(1);
    (rows, nodes / rows)
}

fn block_layout(rows: usize, cols: usize, blocks: usize) -> Vec<usize> {
    let n = rows * cols;
    let (cy, cx) = (rows as f64 / 2.0, cols as f64 / 2.0);
    let dist = |i: usize| {
        let (r, c) = ((i / cols) as f64 + 0.5, (i % cols) as f64 + 0.5);
        (r - cy).powi(2) + (c - cx).powi(2)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dist(b).total_cmp(&dist(a)).then(a.cmp(&b)));
    let mut labels = vec![0; n];
    for (rank, &node) in order.iter().enumerate() {
        labels[node] = rank * blocks / n;
    }
    labels
}

pub fn generate<T: Scalar>(cfg: &SynthConfig) -> Result<PlantedPartition<T>> {
    if cfg.blocks == 0 || cfg.blocks > cfg.nodes {
        return Err(Error::Config(format!(
            "need 1 <= blocks <= nodes, got {} blocks for {} nodes",
            cfg.blocks, cfg.nodes
        )));
    }
    if cfg.dim == 0 || cfg.patch == 0 {
        return Err(Error::Config("dim and patch must be positive".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Config("noise must be a non-negative number".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gauss = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let mut v = gauss(cfg.dim);
        if b < cfg.dim {
            for c in &centers {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        centers.push(v.iter().map(|x| x / norm).collect());
    }

    let (rows, cols) = grid_shape(cfg.nodes);
    let labels = block_layout(rows, cols, cfg.blocks);
    let scale = cfg.noise / (cfg.dim as f64).sqrt();
    let mut data = Vec::with_capacity(cfg.nodes * cfg.dim);
    for &block in &labels {
        let noise = gauss(cfg.dim);
        let v: Vec<f64> = centers[block].iter().zip(&noise).map(|(c, e)| c + scale * e).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| T::lit(x / norm)));
    }
    let meta = GridMeta {
        grid_rows: rows,
        grid_cols: cols,
        image_h: rows * cfg.patch,
        image_w: cols * cfg.patch,
        patch: cfg.patch,
    };
    let features = FeatureMatrix::new(Tensor::new(vec![cfg.nodes, cfg.dim], data)?, meta)?;
    Ok(PlantedPartition {
        features,
        labels,
        blocks: cfg.blocks,
    })
}

impl<T: Scalar> PlantedPartition<T> {
    /// Pixel mask of the innermost block.
    pub fn ground_truth_mask(&self) -> Result<BinaryMask> {
        let m = &self.features.meta;
        let target = self.blocks - 1;
        let grid = BinaryMask::new(m.grid_rows, m.grid_cols, self.labels.iter().map(|&l| l == target).collect())?;
        upsample_mask(&grid, m.patch, m.image_h, m.image_w)
    }

    /// Writes `<stem>.mgt`, `<stem>.meta`, `<stem>.labels.mgt` and
    /// `gt/<stem>.pgm` under `dir`; returns the feature path.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let gt_dir = dir.join("gt");
        fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;
        let fpath = dir.join(format!("{stem}.mgt"));
        write_feature_matrix(&self.features, &fpath, dir.join(format!("{stem}.meta")))?;
        let m = &self.features.meta;
        let labels = Tensor::<f64>::new(
            vec![m.grid_rows, m.grid_cols],
            self.labels.iter().map(|&l| l as f64).collect(),
        )?;
        write_tensor(dir.join(format!("{stem}.labels.mgt")), &labels, Dtype::U8)?;
        self.ground_truth_mask()?.write_pgm(gt_dir.join(format!("{stem}.pgm")))?;
        Ok(fpath)
    }
}

/// Fraction of nodes on which `pred` matches `truth` under the best relabelling
/// of `pred` (exhaustive over permutations, so keep `k` small).
pub fn label_agreement(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0usize;
    permutations(&mut perm, 0, &mut |p| {
        let hits = pred.iter().zip(truth).filter(|(&a, &b)| a < k && p[a] == b).count();
        best = best.max(hits);
    });
    best as f64 / pred.len().max(1) as f64
}

fn permutations(p: &mut Vec<usize>, start: usize, f: &mut impl FnMut(&[usize])) {
    if start == p.len() {
        f(p);
        return;
    }
    for i in start..p.len() {
        p.swap(start, i);
        permutations(p, start + 1, f);
        p.swap(start, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_adjacency, l2_normalize_rows};

    #[test]
    fn grid_shapes() {
        assert_eq!(grid_shape(64), (8, 8));
        assert_eq!(grid_shape(12), (3, 4));
        assert_eq!(grid_shape(7), (1, 7));
        assert_eq!(grid_shape(784), (28, 28));
    }

    #[test]
    fn too_many_blocks() {
        let cfg = SynthConfig {
            nodes: 3,
            blocks: 4,
            ..SynthConfig::default()
        };
        assert!(generate::<f64>(&cfg).is_err());
    }

    #[test]
    fn noiseless_graph_is_union_of_cliques() {
        let cfg = SynthConfig {
            nodes: 16,
            blocks: 2,
            noise: 0.0,
            dim: 8,
            seed: 3,
            patch: 8,
        };
        let p = generate::<f64>(&cfg).unwrap();
        let f = l2_normalize_rows(&p.features.features).unwrap();
        let g = build_adjacency(&f, 0.3).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let a = g.adjacency.get(i, j);
                if i == j {
                    assert_eq!(a, 0.0);
                } else if p.labels[i] == p.labels[j] {
                    assert!((a - 1.0).abs() < 1e-12);
                } else {
                    assert_eq!(a, 0.0);
                }
            }
        }
    }

    #[test]
    fn balanced_concentric_blocks() {
        let p = generate::<f64>(&SynthConfig::default()).unwrap();
        let ones = p.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(ones, 32);
        // the centre cell belongs to the inner block, the corner to the outer one
        assert_eq!(p.labels[4 * 8 + 4], 1);
        assert_eq!(p.labels[0], 0);
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate::<f64>(&SynthConfig::default()).unwrap();
        let b = generate::<f64>(&SynthConfig::default()).unwrap();
        assert_eq!(a.features, b.features);
        let c = generate::<f64>(&SynthConfig { seed: 9, ..SynthConfig::default() }).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn agreement_is_label_swap_invariant() {
        assert_eq!(label_agreement(&[1, 1, 0, 0], &[0, 0, 1, 1], 2), 1.0);
        assert_eq!(label_agreement(&[0, 1, 0, 0], &[0, 0, 1, 1], 2), 0.75);
        assert_eq!(label_agreement(&[2, 0, 1], &[0, 1, 2], 3), 1.0);
    }
}
