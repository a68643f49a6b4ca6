//! Thresholded-correlation patch graphs and their modularity matrices.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weighted undirected patch graph with zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGraph<T> {
    pub adjacency: Tensor<T>,
    pub degrees: Vec<T>,
    /// Total edge weight `2m = sum_i d_i`.
    pub edge_mass: T,
    pub tau: T,
}

impl<T: Scalar> PatchGraph<T> {
    pub fn nodes(&self) -> usize {
        self.degrees.len()
    }

    /// Builds a graph from an explicit symmetric adjacency (zero diagonal).
    pub fn from_adjacency(adjacency: Tensor<T>, tau: T) -> Result<Self> {
        let n = adjacency.rows();
        if adjacency.cols() != n {
            return Err(Error::Shape {
                shape: adjacency.shape().to_vec(),
                reason: "adjacency must be square".into(),
            });
        }
        let degrees: Vec<T> = (0..n).map(|i| adjacency.row(i).iter().copied().sum()).collect();
        let edge_mass: T = degrees.iter().copied().sum();
        if edge_mass <= T::zero() {
            return Err(Error::EmptyGraph { tau: tau.as_f64() });
        }
        Ok(Self {
            adjacency,
            degrees,
            edge_mass,
            tau,
        })
    }

    /// Unordered edge list `(i, j, weight)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize, T)> {
        let n = self.nodes();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let w = self.adjacency.get(i, j);
                if w > T::zero() {
                    out.push((i, j, w));
                }
            }
        }
        out
    }
}

/// `B = A - d d^T / 2m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModularityMatrix<T> {
    pub b: Arc<Tensor<T>>,
    pub edge_mass: T,
}

/// Scales each row to unit Euclidean norm.
pub fn l2_normalize_rows<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = f.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm == T::zero() || !norm.is_finite() {
            return Err(Error::ZeroRow { row: i });
        }
        row.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(out)
}

/// Keeps cosine similarities strictly above `tau` as edge weights.
pub fn build_adjacency<T: Scalar>(f_normalized: &Tensor<T>, tau: T) -> Result<PatchGraph<T>> {
    if !(tau > T::zero() && tau < T::one()) {
        return Err(Error::Config(format!("tau must lie in (0, 1), got {tau}")));
    }
    let n = f_normalized.rows();
    if n < 2 {
        return Err(Error::Invariant(format!("a patch graph needs at least 2 nodes, got {n}")));
    }
    let tol = T::lit(1e-6);
    for i in 0..n {
        let norm2: T = f_normalized.row(i).iter().map(|&x| x * x).sum();
        if (norm2 - T::one()).abs() > tol {
            return Err(Error::Invariant(format!(
                "row {i} is not unit-norm (squared norm {norm2})"
            )));
        }
    }
    let mut adjacency = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let fi = f_normalized.row(i);
        for j in i + 1..n {
            let dot: T = fi.iter().zip(f_normalized.row(j)).map(|(&a, &b)| a * b).sum();
            if dot > tau {
                let w = dot.min(T::one());
                adjacency.set(i, j, w);
                adjacency.set(j, i, w);
            }
        }
    }
    PatchGraph::from_adjacency(adjacency, tau)
}

pub fn modularity_matrix<T: Scalar>(g: &PatchGraph<T>) -> ModularityMatrix<T> {
    let n = g.nodes();
    let two_m = g.edge_mass;
    let b = Tensor::from_fn(n, n, |i, j| {
        g.adjacency.get(i, j) - g.degrees[i] * g.degrees[j] / two_m
    });
    ModularityMatrix {
        b: Arc::new(b),
        edge_mass: two_m,
    }
}

/// GAT neighbourhoods in CSR form: `N(i) = {j : A_ij > 0} ∪ {i}`, ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhoods {
    offsets: Arc<Vec<usize>>,
    targets: Vec<usize>,
    sources: Vec<usize>,
}

impl Neighborhoods {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut targets = Vec::new();
        let mut sources = Vec::new();
        offsets.push(0);
        for (i, l) in lists.iter().enumerate() {
            targets.extend_from_slice(l);
            sources.extend(std::iter::repeat_n(i, l.len()));
            offsets.push(targets.len());
        }
        Self {
            offsets: Arc::new(offsets),
            targets,
            sources,
        }
    }

    pub fn nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.targets.len()
    }

    pub fn of(&self, i: usize) -> &[usize] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Edge-index range owned by node `i`.
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Segment boundaries: node `i` owns edges `offsets[i]..offsets[i + 1]`.
    pub fn offsets(&self) -> &Arc<Vec<usize>> {
        &self.offsets
    }

    /// Source node of every directed edge, aligned with [`Self::targets`].
    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Applies the node relabelling `perm[old] = new`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.nodes();
        let mut lists = vec![Vec::new(); n];
        for i in 0..n {
            let mut l: Vec<usize> = self.of(i).iter().map(|&j| perm[j]).collect();
            l.sort_unstable();
            lists[perm[i]] = l;
        }
        Self::from_lists(&lists)
    }
}

pub fn neighborhoods<T: Scalar>(g: &PatchGraph<T>) -> Arc<Neighborhoods> {
    let n = g.nodes();
    let lists: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j == i || g.adjacency.get(i, j) > T::zero())
                .collect()
        })
        .collect();
    Arc::new(Neighborhoods::from_lists(&lists))
}

/// Everything the model and loss need for one image.
#[derive(Clone, Debug)]
pub struct PreparedGraph<T> {
    pub features: Tensor<T>,
    pub graph: PatchGraph<T>,
    pub modularity: Arc<ModularityMatrix<T>>,
    pub neighborhoods: Arc<Neighborhoods>,
}

impl<T: Scalar> PreparedGraph<T> {
    /// Normalizes raw features and builds graph, `B`, and neighbourhoods.
    pub fn from_features(raw: &Tensor<T>, tau: T) -> Result<Self> {
        let features = l2_normalize_rows(raw)?;
        let graph = build_adjacency(&features, tau)?;
        Ok(Self::from_parts(features, graph))
    }

    pub fn from_parts(features: Tensor<T>, graph: PatchGraph<T>) -> Self {
        let modularity = Arc::new(modularity_matrix(&graph));
        let neighborhoods = neighborhoods(&graph);
        Self {
            features,
            graph,
            modularity,
            neighborhoods,
        }
    }

    pub fn nodes(&self) -> usize {
        self.graph.nodes()
    }
}
