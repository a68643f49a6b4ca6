//! MGT1 tensor files and the `key=value` patch-grid sidecar.
//!
//! Layout: `b"MGT1"`, `u8` ndim, `ndim` little-endian `u32` dims, `u8` dtype
//! code (1 = f32 LE, 2 = u8), then the row-major payload with no padding.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MGT1";

/// On-disk element encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::U8),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

/// Serializes a tensor to MGT1 bytes.
pub fn encode_tensor<T: Scalar>(t: &Tensor<T>, dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(6 + 4 * t.shape().len() + dtype.width() * t.len());
    out.extend_from_slice(&MAGIC);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Shape {
            shape: t.shape().to_vec(),
            reason: "dimension exceeds u32".into(),
        })?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(dtype.code());
    for (index, &x) in t.data().iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite { index });
        }
        match dtype {
            Dtype::F32 => out.extend_from_slice(&x.as_f32().to_le_bytes()),
            Dtype::U8 => {
                let v = x.as_f64();
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    return Err(Error::OutOfRangeU8 { index, value: v });
                }
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

/// Parses MGT1 bytes. `origin` is only used in error messages.
pub fn decode_tensor<T: Scalar>(bytes: &[u8], origin: &Path) -> Result<(Tensor<T>, Dtype)> {
    let truncated = |expected: usize| Error::Truncated {
        path: origin.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    if bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(Error::BadMagic {
            path: origin.to_path_buf(),
            found,
        });
    }
    let ndim = *bytes.get(4).ok_or_else(|| truncated(5))? as usize;
    if !(1..=3).contains(&ndim) {
        return Err(Error::Shape {
            shape: vec![],
            reason: format!("header declares {ndim} dimensions"),
        });
    }
    let header = 5 + 4 * ndim + 1;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let shape: Vec<usize> = bytes[5..5 + 4 * ndim]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let dtype = Dtype::from_code(bytes[header - 1])?;
    let count: usize = shape.iter().product();
    let expected = header + count * dtype.width();
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    let payload = &bytes[header..expected];
    let data: Vec<T> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect(),
        Dtype::U8 => payload.iter().map(|&b| T::lit(b as f64)).collect(),
    };
    if let Some(index) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok((Tensor::new(shape, data)?, dtype))
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read_tensor_with_dtype(path).map(|(t, _)| t)
}

pub fn read_tensor_with_dtype<T: Scalar>(path: impl AsRef<Path>) -> Result<(Tensor<T>, Dtype)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// Patch-grid geometry of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridMeta {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
}

impl GridMeta {
    pub fn nodes(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields: [Option<usize>; 5] = [None; 5];
        const KEYS: [&str; 5] = ["grid_rows", "grid_cols", "image_h", "image_w", "patch"];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Meta(format!("line {}: expected key=value", lineno + 1)))?;
            let key = key.trim();
            let value: usize = value
                .trim()
                .parse()
                .map_err(|_| Error::Meta(format!("line {}: {key} is not an integer", lineno + 1)))?;
            if let Some(slot) = KEYS.iter().position(|k| *k == key) {
                fields[slot] = Some(value);
            }
        }
        let get = |slot: usize| fields[slot].ok_or_else(|| Error::Meta(format!("missing key {}", KEYS[slot])));
        Ok(Self {
            grid_rows: get(0)?,
            grid_cols: get(1)?,
            image_h: get(2)?,
            image_w: get(3)?,
            patch: get(4)?,
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "grid_rows={}\ngrid_cols={}\nimage_h={}\nimage_w={}\npatch={}\n",
            self.grid_rows, self.grid_cols, self.image_h, self.image_w, self.patch
        )
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// An `n x C_in` patch-feature matrix together with its patch-grid geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<T> {
    pub features: Tensor<T>,
    pub meta: GridMeta,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(features: Tensor<T>, meta: GridMeta) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Invariant(format!(
                "features must be 2-D, got shape {:?}",
                features.shape()
            )));
        }
        let (n, c_in) = (features.rows(), features.cols());
        if n != meta.nodes() {
            return Err(Error::Invariant(format!(
                "feature rows n = {n} but grid_rows x grid_cols = {} x {} = {}",
                meta.grid_rows,
                meta.grid_cols,
                meta.nodes()
            )));
        }
        if meta.grid_rows * meta.patch != meta.image_h {
            return Err(Error::Invariant(format!(
                "grid_rows x patch = {} but image_h = {}",
                meta.grid_rows * meta.patch,
                meta.image_h
            )));
        }
        if meta.grid_cols * meta.patch != meta.image_w {
            return Err(Error::Invariant(format!(
                "grid_cols x patch = {} but image_w = {}",
                meta.grid_cols * meta.patch,
                meta.image_w
            )));
        }
        if c_in == 0 {
            return Err(Error::Invariant("feature dimension C_in must be at least 1".into()));
        }
        Ok(Self { features, meta })
    }

    pub fn nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }
}

pub fn read_feature_matrix<T: Scalar>(
    feature_path: impl AsRef<Path>,
    meta_path: impl AsRef<Path>,
) -> Result<FeatureMatrix<T>> {
    let features = read_tensor(feature_path)?;
    let meta = GridMeta::read(meta_path)?;
    FeatureMatrix::new(features, meta)
}

pub fn write_feature_matrix<T: Scalar>(
    fm: &FeatureMatrix<T>,
    feature_path: impl AsRef<Path>,
    meta_path: impl AsRef<Path>,
) -> Result<()> {
    write_tensor(feature_path, &fm.features, Dtype::F32)?;
    fm.meta.write(meta_path)
}
