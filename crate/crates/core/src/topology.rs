//! Zero-dimensional persistent homology of point clouds and the topological
//! densification loss built on it.
//!
//! For a finite Euclidean point set the death times of the Vietoris–Rips
//! filtration are the edge lengths of a minimum spanning tree, so everything
//! here reduces to Kruskal's algorithm on the complete distance graph.

use crate::error::{Error, Result};
use crate::geometry::LatentBatch;
use crate::linalg::Matrix;

/// MST edges shorter than this have no usable gradient direction.
pub const MIN_EDGE: f64 = 1e-12;

/// Disjoint-set forest with path compression and union by rank.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
    components: usize,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
            components: n,
        }
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    /// Merge the sets of `a` and `b`; false if they were already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        self.components -= 1;
        true
    }

    pub fn components(&self) -> usize {
        self.components
    }

    /// Partition of `0..n`, each group ascending, groups ordered by first element.
    pub fn groups(&mut self) -> Vec<Vec<usize>> {
        let n = self.parent.len();
        let mut slot = vec![usize::MAX; n];
        let mut out: Vec<Vec<usize>> = Vec::new();
        for i in 0..n {
            let r = self.find(i);
            if slot[r] == usize::MAX {
                slot[r] = out.len();
                out.push(Vec::new());
            }
            out[slot[r]].push(i);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEdge {
    pub i: usize,
    pub j: usize,
    pub length: f64,
}

/// Sorted multiset of death times; one fewer than the number of points.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceDiagram0 {
    deaths: Vec<f64>,
}

impl PersistenceDiagram0 {
    pub fn deaths(&self) -> &[f64] {
        &self.deaths
    }

    pub fn len(&self) -> usize {
        self.deaths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deaths.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.deaths.iter().sum()
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn distance_matrix(points: &Matrix) -> Matrix {
    let n = points.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = distance(points.row(i), points.row(j));
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

pub fn pairwise_distances(points: &LatentBatch) -> Matrix {
    distance_matrix(points.matrix())
}

fn check_epsilon(eps: f64) -> Result<()> {
    if eps > 0.0 {
        Ok(())
    } else {
        Err(Error::NonPositiveEpsilon(eps))
    }
}

/// Adjacency lists of the graph with an edge wherever `d(x, y) < ε`.
pub fn truncation_graph(points: &LatentBatch, eps: f64) -> Result<Vec<Vec<usize>>> {
    check_epsilon(eps)?;
    let d = pairwise_distances(points);
    let n = points.len();
    Ok((0..n)
        .map(|i| (0..n).filter(|&j| j != i && d[(i, j)] < eps).collect())
        .collect())
}

pub fn connected_components_at(points: &LatentBatch, eps: f64) -> Result<Vec<Vec<usize>>> {
    let graph = truncation_graph(points, eps)?;
    let mut uf = UnionFind::new(points.len());
    for (i, nbrs) in graph.iter().enumerate() {
        for &j in nbrs {
            uf.union(i, j);
        }
    }
    Ok(uf.groups())
}

/// Kruskal on the complete graph. Equal lengths are ordered by `(i, j)`.
fn kruskal(points: &Matrix) -> Vec<MstEdge> {
    let n = points.rows();
    let d = distance_matrix(points);
    let mut edges = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            edges.push(MstEdge {
                i,
                j,
                length: d[(i, j)],
            });
        }
    }
    edges.sort_by(|a, b| {
        a.length
            .total_cmp(&b.length)
            .then(a.i.cmp(&b.i))
            .then(a.j.cmp(&b.j))
    });
    let mut uf = UnionFind::new(n);
    let mut tree = Vec::with_capacity(n.saturating_sub(1));
    for e in edges {
        if uf.union(e.i, e.j) {
            tree.push(e);
            if tree.len() + 1 == n {
                break;
            }
        }
    }
    tree
}

pub fn minimum_spanning_tree(points: &LatentBatch) -> Result<Vec<MstEdge>> {
    if points.len() < 2 {
        return Err(Error::TooFewPoints(points.len()));
    }
    Ok(kruskal(points.matrix()))
}

pub fn death_times(points: &LatentBatch) -> Result<PersistenceDiagram0> {
    let tree = minimum_spanning_tree(points)?;
    Ok(PersistenceDiagram0 {
        deaths: tree.into_iter().map(|e| e.length).collect(),
    })
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::BadConfig(format!("beta must be positive, got {beta}")))
    }
}

fn check_class(class: usize, points: &Matrix) -> Result<()> {
    if points.rows() < 2 {
        Err(Error::ClassTooSmall {
            class,
            size: points.rows(),
        })
    } else {
        Ok(())
    }
}

/// Loss and per-point gradient on raw matrices, one per class.
pub(crate) fn densification_on(classes: &[&Matrix], beta: f64, with_grad: bool) -> Result<(f64, Vec<Matrix>)> {
    check_beta(beta)?;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(if with_grad { classes.len() } else { 0 });
    for (c, points) in classes.iter().enumerate() {
        check_class(c, points)?;
        let tree = kruskal(points);
        let mut g = Matrix::zeros(if with_grad { points.rows() } else { 0 }, points.cols());
        for e in &tree {
            loss += (e.length - beta).abs();
            if !with_grad {
                continue;
            }
            if e.length < MIN_EDGE {
                return Err(Error::DegenerateEdge {
                    class: c,
                    i: e.i,
                    j: e.j,
                    length: e.length,
                });
            }
            let sign = (e.length - beta).signum() * ((e.length != beta) as u8 as f64);
            if sign == 0.0 {
                continue;
            }
            let coef = sign / e.length;
            for k in 0..points.cols() {
                let diff = coef * (points[(e.i, k)] - points[(e.j, k)]);
                g[(e.i, k)] += diff;
                g[(e.j, k)] -= diff;
            }
        }
        if with_grad {
            grads.push(g);
        }
    }
    Ok((loss, grads))
}

pub fn densification_loss(points_by_class: &[LatentBatch], beta: f64) -> Result<f64> {
    let classes: Vec<&Matrix> = points_by_class.iter().map(|b| b.matrix()).collect();
    Ok(densification_on(&classes, beta, false)?.0)
}

/// Gradient of [`densification_loss`] w.r.t. every point, one matrix per class.
pub fn densification_loss_gradient(points_by_class: &[LatentBatch], beta: f64) -> Result<Vec<Matrix>> {
    let classes: Vec<&Matrix> = points_by_class.iter().map(|b| b.matrix()).collect();
    Ok(densification_on(&classes, beta, true)?.1)
}

/// Piecewise-linear strictly increasing function given by breakpoints;
/// extrapolated linearly beyond the first and last segments.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneTable {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl MonotoneTable {
    pub fn new(points: &[(f64, f64)]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::NonMonotoneTable(points.len()));
        }
        for (i, w) in points.windows(2).enumerate() {
            if !(w[1].0 > w[0].0 && w[1].1 > w[0].1) {
                return Err(Error::NonMonotoneTable(i + 1));
            }
        }
        Ok(Self {
            xs: points.iter().map(|p| p.0).collect(),
            ys: points.iter().map(|p| p.1).collect(),
        })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let last = self.xs.len() - 1;
        let seg = match self.xs.iter().position(|&b| b > x) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => last - 1,
        };
        let (x0, x1, y0, y1) = (self.xs[seg], self.xs[seg + 1], self.ys[seg], self.ys[seg + 1]);
        y0 + (x - x0) * (y1 - y0) / (x1 - x0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LifespanWeight {
    /// `ℓ(a, b) = b − a`.
    Length,
    /// `ℓ(a, b) = F(b) − F(a)`.
    Monotone(MonotoneTable),
}

impl LifespanWeight {
    /// Weight of a bar born at 0 and dying at `death`.
    pub fn weigh(&self, death: f64) -> f64 {
        match self {
            LifespanWeight::Length => death - 0.0,
            LifespanWeight::Monotone(f) => f.eval(death) - f.eval(0.0),
        }
    }
}

/// `Σ |ℓ(0, d) − β|` over all death times `d` of every class.
pub fn generalized_loss(points_by_class: &[LatentBatch], beta: f64, weight: &LifespanWeight) -> Result<f64> {
    check_beta(beta)?;
    let mut loss = 0.0;
    for (c, class) in points_by_class.iter().enumerate() {
        check_class(c, class.matrix())?;
        for e in kruskal(class.matrix()) {
            loss += (weight.weigh(e.length) - beta).abs();
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Population mean/std/min/max; `None` for an empty slice.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(Summary {
        count: values.len(),
        mean,
        std: var.sqrt(),
        min: values.iter().cloned().fold(f64::INFINITY, f64::min),
        max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

/// Equal-width bins over `[lo, hi]`; the last bin is closed on the right and
/// values outside the range are clamped into the end bins.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<HistogramBin> {
    let bins = bins.max(1);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            left: lo + b as f64 * width,
            right: lo + (b + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for &v in values {
        let idx = ((v - lo) / width).floor();
        let idx = if idx.is_nan() { 0 } else { (idx.max(0.0) as usize).min(bins - 1) };
        out[idx].count += 1;
    }
    out
}
