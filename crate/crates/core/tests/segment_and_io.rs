mod common;

use common::*;
use modgat::io::{decode_tensor, encode_tensor, read_feature_matrix, read_tensor, write_feature_matrix, write_tensor, Dtype, FeatureMatrix, GridMeta};
use modgat::objective::Assignment;
use modgat::segment::{
    decode_mask, downsample_mask, iou_dice, labels_to_grid, select_foreground, upsample_mask, BinaryMask, LabelGrid,
};
use modgat::Tensor;
use proptest::prelude::*;
use rand::Rng;
use std::path::Path;

#[test]
fn large_feature_tensor_round_trips_bitwise() {
    let mut r = rng(12);
    let t = Tensor::<f32>::from_fn(784, 384, |_, _| r.random_range(-4.0f32..4.0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.mgt");
    write_tensor(&path, &t, Dtype::F32).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 4 + 1 + 1 + 4 * 2 + 784 * 384 * 4);
    let back: Tensor<f32> = read_tensor(&path).unwrap();
    assert_eq!(back.shape(), t.shape());
    assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn feature_matrix_with_sidecar_round_trips() {
    let meta = GridMeta { grid_rows: 28, grid_cols: 28, image_h: 224, image_w: 224, patch: 8 };
    let mut r = rng(13);
    let fm = FeatureMatrix::new(Tensor::<f64>::from_fn(784, 6, |_, _| r.random_range(-1.0..1.0)), meta.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (f, m) = (dir.path().join("a.mgt"), dir.path().join("a.meta"));
    write_feature_matrix(&fm, &f, &m).unwrap();
    let back = read_feature_matrix::<f64>(&f, &m).unwrap();
    assert_eq!(back.meta, meta);
    for (a, b) in back.features.data().iter().zip(fm.features.data()) {
        assert_eq!(*a as f32, *b as f32);
    }
}

#[test]
fn sidecar_node_mismatch_is_reported() {
    let meta = GridMeta { grid_rows: 3, grid_cols: 3, image_h: 24, image_w: 24, patch: 8 };
    let err = FeatureMatrix::new(Tensor::<f64>::zeros(&[8, 2]), meta).unwrap_err().to_string();
    assert!(err.contains('8') && err.contains('9'), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_decode_f32(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let t = Tensor::<f32>::from_fn(rows, cols, |_, _| r.random_range(-1e6f32..1e6));
        let bytes = encode_tensor(&t, Dtype::F32).unwrap();
        let (back, dtype) = decode_tensor::<f32>(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(dtype, Dtype::F32);
        prop_assert_eq!(back, t);
    }

    #[test]
    fn encode_decode_u8(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let t = Tensor::<f64>::from_fn(rows, cols, |_, _| r.random_range(0..=255u8) as f64);
        let bytes = encode_tensor(&t, Dtype::U8).unwrap();
        prop_assert_eq!(bytes.len(), 4 + 1 + 1 + 8 + rows * cols);
        let (back, _) = decode_tensor::<f64>(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn truncated_streams_are_rejected(cut in 0usize..30) {
        let t = Tensor::<f32>::zeros(&[2, 2]);
        let bytes = encode_tensor(&t, Dtype::F32).unwrap();
        prop_assert!(decode_tensor::<f32>(&bytes[..cut.min(bytes.len() - 1)], Path::new("mem")).is_err());
    }
}

/// Counts border cells and totals per label with a float fraction.
fn brute_foreground(grid: &LabelGrid, k: usize) -> usize {
    let mut stats: Vec<(f64, usize, usize)> = Vec::new();
    for l in 0..k {
        let cells: Vec<(usize, usize)> = (0..grid.rows)
            .flat_map(|r| (0..grid.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| grid.get(r, c) == l)
            .collect();
        if cells.is_empty() {
            continue;
        }
        let on_border = cells
            .iter()
            .filter(|&&(r, c)| r == 0 || c == 0 || r == grid.rows - 1 || c == grid.cols - 1)
            .count();
        stats.push((on_border as f64 / cells.len() as f64, cells.len(), l));
    }
    stats.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    stats[0].2
}

#[test]
fn foreground_matches_brute_force_recount() {
    let mut r = rng(14);
    for _ in 0..100 {
        let (rows, cols, k) = (r.random_range(2..9), r.random_range(2..9), r.random_range(2..5));
        let labels: Vec<usize> = (0..rows * cols).map(|_| r.random_range(0..k)).collect();
        let grid = LabelGrid::new(rows, cols, labels).unwrap();
        assert_eq!(select_foreground(&grid, k), brute_foreground(&grid, k));
    }
}

#[test]
fn up_then_down_sampling_is_identity() {
    let mut r = rng(15);
    let grid = BinaryMask::new(5, 7, (0..35).map(|_| r.random_bool(0.5)).collect()).unwrap();
    let up = upsample_mask(&grid, 8, 40, 56).unwrap();
    assert_eq!(downsample_mask(&up, 8).unwrap(), grid);
    for y in 0..40 {
        for x in 0..56 {
            assert_eq!(up.get(y, x), grid.get(y / 8, x / 8));
        }
    }
}

#[test]
fn labels_reshape_row_major() {
    let mut r = rng(16);
    let hard: Vec<usize> = (0..20).map(|_| r.random_range(0..3)).collect();
    let soft = Tensor::from_fn(20, 3, |i, j| if hard[i] == j { 0.9 } else { 0.05 });
    let a = Assignment::from_soft(soft);
    assert_eq!(a.hard, hard);
    let meta = GridMeta { grid_rows: 4, grid_cols: 5, image_h: 16, image_w: 20, patch: 4 };
    let grid = labels_to_grid(&a, &meta).unwrap();
    for i in 0..20 {
        assert_eq!(grid.get(i / 5, i % 5), hard[i]);
    }
    assert_eq!(grid.flatten(), hard);
    let seg = decode_mask(&a, &meta).unwrap();
    assert_eq!((seg.pixel_mask.height, seg.pixel_mask.width), (16, 20));
    assert_eq!(seg.pixel_mask.count(), grid.select(seg.fg_cluster).count() * 16);
}

fn random_mask(r: &mut rand_chacha::ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| r.random_bool(p)).collect()).unwrap()
}

#[test]
fn metric_properties() {
    let mut r = rng(17);
    for _ in 0..500 {
        let (h, w) = (r.random_range(1..12), r.random_range(1..12));
        let (pa, pb) = (r.random_range(0.0..1.0), r.random_range(0.0..1.0));
        let a = random_mask(&mut r, h, w, pa);
        let b = random_mask(&mut r, h, w, pb);
        let ab = iou_dice(&a, &b).unwrap();
        let ba = iou_dice(&b, &a).unwrap();
        assert_eq!(ab, ba);
        assert!(ab.iou <= ab.dice + 1e-15);
        assert!((ab.dice - 2.0 * ab.iou / (1.0 + ab.iou)).abs() < 1e-12);
        // adding a true-positive pixel never lowers either score
        if let Some(i) = (0..h * w).find(|&i| b.data[i] && !a.data[i]) {
            let mut a2 = a.clone();
            a2.data[i] = true;
            let m2 = iou_dice(&a2, &b).unwrap();
            assert!(m2.iou >= ab.iou && m2.dice >= ab.dice);
        }
    }
}
