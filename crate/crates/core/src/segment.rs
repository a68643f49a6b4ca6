//! Cluster-to-mask decoding, PGM masks, and IoU/Dice evaluation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_tensor_with_dtype, GridMeta};
use crate::objective::Assignment;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-major integer label image over the patch grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<usize>,
}

impl LabelGrid {
    pub fn new(rows: usize, cols: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != rows * cols {
            return Err(Error::Invariant(format!(
                "{} labels cannot fill a {rows}x{cols} grid",
                labels.len()
            )));
        }
        Ok(Self { rows, cols, labels })
    }

    pub fn get(&self, r: usize, c: usize) -> usize {
        self.labels[r * self.cols + c]
    }

    pub fn flatten(&self) -> Vec<usize> {
        self.labels.clone()
    }

    pub fn is_border(&self, r: usize, c: usize) -> bool {
        r == 0 || c == 0 || r + 1 == self.rows || c + 1 == self.cols
    }

    /// Binary grid marking cells equal to `label`.
    pub fn select(&self, label: usize) -> BinaryMask {
        BinaryMask {
            height: self.rows,
            width: self.cols,
            data: self.labels.iter().map(|&l| l == label).collect(),
        }
    }
}

/// Row-major boolean image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Invariant(format!(
                "{} pixels cannot fill a {height}x{width} mask",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Every nonzero value is foreground.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Shape {
                shape: t.shape().to_vec(),
                reason: "masks are 2-D".into(),
            });
        }
        Ok(Self {
            height: t.rows(),
            width: t.cols(),
            data: t.data().iter().map(|&x| x != T::zero()).collect(),
        })
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.data.iter().map(|&b| if b { 255u8 } else { 0 }));
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_pgm(&bytes).map_err(|reason| Error::Pgm {
            path: path.to_path_buf(),
            reason,
        })
    }

    /// Reads a PGM (`.pgm`) or MGT1 tensor mask; nonzero is foreground.
    pub fn read_any(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "pgm") {
            Self::read_pgm(path)
        } else {
            let (t, _) = read_tensor_with_dtype::<f64>(path)?;
            Self::from_tensor(&t)
        }
    }
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<BinaryMask, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("only binary P5 graymaps are supported".into());
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates header and raster
    let start = pos + 1;
    let end = start + width * height;
    if bytes.len() < end {
        return Err(format!("raster truncated: need {} bytes, have {}", width * height, bytes.len().saturating_sub(start)));
    }
    Ok(BinaryMask {
        height,
        width,
        data: bytes[start..end].iter().map(|&b| b != 0).collect(),
    })
}

/// `grid[r][c] = hard[r * grid_cols + c]`.
pub fn labels_to_grid<T: Scalar>(a: &Assignment<T>, meta: &GridMeta) -> Result<LabelGrid> {
    LabelGrid::new(meta.grid_rows, meta.grid_cols, a.hard.clone())
}

/// Foreground cluster: the smallest fraction of its patches on the grid border,
/// then the smaller cluster, then the lower label.
pub fn select_foreground(grid: &LabelGrid, k: usize) -> usize {
    let mut count = vec![0usize; k];
    let mut border = vec![0usize; k];
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let l = grid.get(r, c);
            if l >= k {
                continue;
            }
            count[l] += 1;
            if grid.is_border(r, c) {
                border[l] += 1;
            }
        }
    }
    let mut best: Option<usize> = None;
    for l in (0..k).filter(|&l| count[l] > 0) {
        best = Some(match best {
            None => l,
            Some(b) => {
                // compare border[l]/count[l] with border[b]/count[b] exactly
                let lhs = border[l] * count[b];
                let rhs = border[b] * count[l];
                if lhs < rhs || (lhs == rhs && count[l] < count[b]) {
                    l
                } else {
                    b
                }
            }
        });
    }
    best.unwrap_or(0)
}

/// Nearest-neighbour upsampling: each cell becomes a `patch x patch` block.
pub fn upsample_mask(grid: &BinaryMask, patch: usize, image_h: usize, image_w: usize) -> Result<BinaryMask> {
    if grid.height * patch != image_h || grid.width * patch != image_w {
        return Err(Error::Invariant(format!(
            "{}x{} grid at patch {patch} does not cover a {image_h}x{image_w} image",
            grid.height, grid.width
        )));
    }
    let mut data = Vec::with_capacity(image_h * image_w);
    for y in 0..image_h {
        for x in 0..image_w {
            data.push(grid.get(y / patch, x / patch));
        }
    }
    Ok(BinaryMask {
        height: image_h,
        width: image_w,
        data,
    })
}

/// Samples the top-left pixel of every `patch x patch` block.
pub fn downsample_mask(mask: &BinaryMask, patch: usize) -> Result<BinaryMask> {
    if patch == 0 || mask.height % patch != 0 || mask.width % patch != 0 {
        return Err(Error::Invariant(format!(
            "{}x{} mask is not divisible into {patch}-pixel blocks",
            mask.height, mask.width
        )));
    }
    let (h, w) = (mask.height / patch, mask.width / patch);
    let data = (0..h * w).map(|i| mask.get((i / w) * patch, (i % w) * patch)).collect();
    Ok(BinaryMask { height: h, width: w, data })
}

/// Decoded segmentation of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMask {
    pub patch_labels: LabelGrid,
    pub fg_cluster: usize,
    pub pixel_mask: BinaryMask,
}

/// Hard labels to grid, foreground choice, and pixel upsampling. Clusters
/// other than the foreground all become background.
pub fn decode_mask<T: Scalar>(a: &Assignment<T>, meta: &GridMeta) -> Result<SegMask> {
    let patch_labels = labels_to_grid(a, meta)?;
    let fg_cluster = select_foreground(&patch_labels, a.clusters());
    let pixel_mask = upsample_mask(&patch_labels.select(fg_cluster), meta.patch, meta.image_h, meta.image_w)?;
    Ok(SegMask {
        patch_labels,
        fg_cluster,
        pixel_mask,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub iou: f64,
    pub dice: f64,
}

/// IoU and Dice; two empty masks score 1 on both.
pub fn iou_dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<MetricResult> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::ShapeMismatch {
            op: "iou_dice",
            lhs: vec![pred.height, pred.width],
            rhs: vec![gt.height, gt.width],
        });
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        inter += usize::from(a && b);
        p += usize::from(a);
        g += usize::from(b);
    }
    if p + g == 0 {
        return Ok(MetricResult { iou: 1.0, dice: 1.0 });
    }
    let union = p + g - inter;
    Ok(MetricResult {
        iou: inter as f64 / union as f64,
        dice: 2.0 * inter as f64 / (p + g) as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub images: usize,
    pub mean_iou: f64,
    pub mean_dice: f64,
}

/// Per-image averages.
pub fn dataset_report(results: &[MetricResult]) -> Result<DatasetSummary> {
    if results.is_empty() {
        return Err(Error::Empty("dataset report needs at least one image"));
    }
    let n = results.len() as f64;
    Ok(DatasetSummary {
        images: results.len(),
        mean_iou: results.iter().map(|r| r.iou).sum::<f64>() / n,
        mean_dice: results.iter().map(|r| r.dice).sum::<f64>() / n,
    })
}
