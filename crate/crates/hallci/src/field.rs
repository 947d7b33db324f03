//! Sampled fields on the periodic square `[0, 2pi)^2` with a uniform time grid on `[0, 1]`.
//!
//! Every component depends on `(x1, x2, t)` only. Planes are stored row-major with `x1`
//! fastest, so sample `(i1, i2)` sits at `i1 + n * i2`. A component that is identically
//! zero is stored as `None`, and the two off-diagonal entries of a symmetric tensor share
//! one allocation.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Snapshot format version written by [`serialize`].
pub const SNAPSHOT_VERSION: u32 = 1;
const LAYOUT: &str = "t-major/component-major/row-major-x1-fastest";
const DTYPE: &str = "f64-le";

pub type Plane = Arc<Vec<f64>>;

/// Per-sample accessor for fields that are produced on demand.
pub type Sampler<'a> = &'a (dyn Fn(usize) -> crate::error::Result<Slice> + Sync + 'a);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub n: usize,
    pub n_t: usize,
}

impl Grid {
    pub fn new(n: usize, n_t: usize) -> Result<Self> {
        if n < 16 || !n.is_power_of_two() {
            return Err(Error::GridSize(n));
        }
        if n_t == 0 {
            return Err(Error::TimeGrid);
        }
        Ok(Grid { n, n_t })
    }

    /// A grid with a single time sample.
    pub fn stationary(n: usize) -> Result<Self> {
        Grid::new(n, 1)
    }

    pub fn h(&self) -> f64 {
        TWO_PI / self.n as f64
    }

    pub fn dt(&self) -> f64 {
        if self.n_t > 1 {
            1.0 / (self.n_t - 1) as f64
        } else {
            0.0
        }
    }

    pub fn t(&self, j: usize) -> f64 {
        j as f64 * self.dt()
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.h()
    }

    pub fn points(&self) -> usize {
        self.n * self.n
    }

    pub fn cell_area(&self) -> f64 {
        self.h() * self.h()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rank {
    Scalar,
    Vector,
    Tensor,
}

impl Rank {
    pub fn components(self) -> usize {
        match self {
            Rank::Scalar => 1,
            Rank::Vector => 3,
            Rank::Tensor => 9,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Rank::Scalar => "scalar",
            Rank::Vector => "vector",
            Rank::Tensor => "tensor",
        }
    }

    fn from_tag(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(Rank::Scalar),
            "vector" => Ok(Rank::Vector),
            "tensor" => Ok(Rank::Tensor),
            _ => Err(Error::RankMismatch(format!("unknown rank tag {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Symmetry {
    None,
    Symmetric,
    Skew,
    SymmetricTraceless,
}

impl Symmetry {
    pub fn tag(self) -> &'static str {
        match self {
            Symmetry::None => "none",
            Symmetry::Symmetric => "symmetric",
            Symmetry::Skew => "skew",
            Symmetry::SymmetricTraceless => "symmetric-traceless",
        }
    }

    pub fn from_tag(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Symmetry::None),
            "symmetric" => Ok(Symmetry::Symmetric),
            "skew" => Ok(Symmetry::Skew),
            "symmetric-traceless" => Ok(Symmetry::SymmetricTraceless),
            _ => Err(Error::Symmetry(format!("unknown symmetry tag {s}"))),
        }
    }
}

/// Component index of tensor entry `(i, j)`, zero-based.
#[inline]
pub const fn tidx(i: usize, j: usize) -> usize {
    3 * i + j
}

/// The six independent entries of a symmetric tensor, ordered 11, 22, 33, 12, 13, 23.
pub const SYM_ENTRIES: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];

/// Wraps a plane, dropping it when every sample is exactly zero.
pub fn plane_or_none(v: Vec<f64>) -> Option<Plane> {
    if v.iter().all(|&x| x == 0.0) {
        None
    } else {
        Some(Arc::new(v))
    }
}

/// Sum in a fixed pairwise order, independent of thread count.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if xs.len() <= BLOCK {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// One time sample of a multi-component field.
#[derive(Clone, Debug)]
pub struct Slice {
    n: usize,
    rank: Rank,
    comps: Vec<Option<Plane>>,
}

impl Slice {
    pub fn zeros(n: usize, rank: Rank) -> Self {
        Slice { n, rank, comps: vec![None; rank.components()] }
    }

    pub fn from_planes(n: usize, rank: Rank, comps: Vec<Option<Plane>>) -> Self {
        assert_eq!(comps.len(), rank.components(), "component count");
        for p in comps.iter().flatten() {
            assert_eq!(p.len(), n * n, "plane length");
        }
        Slice { n, rank, comps }
    }

    pub fn from_vecs(n: usize, rank: Rank, comps: Vec<Vec<f64>>) -> Self {
        Slice::from_planes(n, rank, comps.into_iter().map(plane_or_none).collect())
    }

    pub fn scalar(n: usize, v: Vec<f64>) -> Self {
        Slice::from_vecs(n, Rank::Scalar, vec![v])
    }

    pub fn vector(n: usize, comps: [Option<Plane>; 3]) -> Self {
        Slice::from_planes(n, Rank::Vector, comps.to_vec())
    }

    /// Builds a symmetric tensor from its six independent entries (see [`SYM_ENTRIES`]).
    pub fn symmetric(n: usize, six: [Option<Plane>; 6]) -> Self {
        let mut comps = vec![None; 9];
        for (e, &(i, j)) in SYM_ENTRIES.iter().enumerate() {
            comps[tidx(i, j)] = six[e].clone();
            comps[tidx(j, i)] = six[e].clone();
        }
        Slice { n, rank: Rank::Tensor, comps }
    }

    /// Builds a skew tensor from the entries 12, 13, 23.
    pub fn skew(n: usize, upper: [Option<Plane>; 3]) -> Self {
        let mut comps = vec![None; 9];
        for (e, &(i, j)) in [(0, 1), (0, 2), (1, 2)].iter().enumerate() {
            if let Some(p) = &upper[e] {
                comps[tidx(j, i)] = Some(Arc::new(p.iter().map(|v| -v).collect()));
                comps[tidx(i, j)] = Some(p.clone());
            }
        }
        Slice { n, rank: Rank::Tensor, comps }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn comp(&self, c: usize) -> Option<&[f64]> {
        self.comps[c].as_deref().map(|v| v.as_slice())
    }

    pub fn plane(&self, c: usize) -> Option<&Plane> {
        self.comps[c].as_ref()
    }

    pub fn planes(&self) -> &[Option<Plane>] {
        &self.comps
    }

    pub fn value(&self, c: usize, p: usize) -> f64 {
        self.comps[c].as_ref().map_or(0.0, |v| v[p])
    }

    /// A dense copy of component `c`.
    pub fn comp_vec(&self, c: usize) -> Vec<f64> {
        match &self.comps[c] {
            Some(p) => p.as_ref().clone(),
            None => vec![0.0; self.n * self.n],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.comps.iter().all(|c| c.is_none())
    }

    pub fn max_abs(&self) -> f64 {
        self.comps
            .iter()
            .flatten()
            .map(|p| p.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .fold(0.0, f64::max)
    }

    /// For each component, the component it shares storage with (if any, and lower-indexed).
    fn sharing(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.comps.len()];
        if self.rank == Rank::Tensor {
            for i in 0..3 {
                for j in 0..i {
                    let (a, b) = (tidx(i, j), tidx(j, i));
                    if let (Some(x), Some(y)) = (&self.comps[a], &self.comps[b]) {
                        if Arc::ptr_eq(x, y) {
                            out[a] = Some(b);
                        }
                    }
                }
            }
        }
        out
    }

    /// `sum_i coef_i * slice_i`. Storage sharing is kept when every input shares it.
    pub fn lincomb(terms: &[(f64, &Slice)]) -> Slice {
        let first = terms.first().expect("empty linear combination").1;
        let (n, rank) = (first.n, first.rank);
        for (_, s) in terms {
            assert_eq!((s.n, s.rank), (n, rank), "lincomb shape");
        }
        let share: Vec<Option<usize>> = {
            let pats: Vec<_> = terms.iter().map(|(_, s)| s.sharing()).collect();
            (0..rank.components())
                .map(|c| {
                    let src = if rank == Rank::Tensor { tidx(c % 3, c / 3) } else { c };
                    let all = terms.iter().zip(&pats).all(|((_, s), p)| {
                        p[c] == Some(src) || (s.comps[c].is_none() && s.comps[src].is_none())
                    });
                    (src < c && all).then_some(src)
                })
                .collect()
        };
        let mut comps: Vec<Option<Plane>> = vec![None; rank.components()];
        for c in 0..rank.components() {
            if let Some(src) = share[c] {
                comps[c] = comps[src].clone();
                continue;
            }
            let active: Vec<(f64, &Plane)> = terms
                .iter()
                .filter_map(|(a, s)| s.comps[c].as_ref().map(|p| (*a, p)))
                .filter(|(a, _)| *a != 0.0)
                .collect();
            comps[c] = match active.len() {
                0 => None,
                1 if active[0].0 == 1.0 => Some(active[0].1.clone()),
                _ => {
                    let mut out = vec![0.0; n * n];
                    for (a, p) in active {
                        for (o, v) in out.iter_mut().zip(p.iter()) {
                            *o += a * v;
                        }
                    }
                    plane_or_none(out)
                }
            };
        }
        Slice { n, rank, comps }
    }

    pub fn add(&self, other: &Slice) -> Slice {
        Slice::lincomb(&[(1.0, self), (1.0, other)])
    }

    pub fn sub(&self, other: &Slice) -> Slice {
        Slice::lincomb(&[(1.0, self), (-1.0, other)])
    }

    pub fn scale(&self, a: f64) -> Slice {
        Slice::lincomb(&[(a, self)])
    }

    /// Pointwise product of every component with a scalar plane.
    pub fn mul_plane(&self, s: &[f64]) -> Slice {
        let sharing = self.sharing();
        let mut comps: Vec<Option<Plane>> = vec![None; self.comps.len()];
        for c in 0..self.comps.len() {
            if let Some(src) = sharing[c] {
                comps[c] = comps[src].clone();
            } else if let Some(p) = &self.comps[c] {
                comps[c] = plane_or_none(p.iter().zip(s).map(|(a, b)| a * b).collect());
            }
        }
        Slice { n: self.n, rank: self.rank, comps }
    }

    /// Vector outer product `a (x) b` with entries `a_i b_j`.
    pub fn outer(a: &Slice, b: &Slice) -> Slice {
        assert!(a.rank == Rank::Vector && b.rank == Rank::Vector);
        let mut comps = vec![None; 9];
        for i in 0..3 {
            for j in 0..3 {
                if let (Some(x), Some(y)) = (&a.comps[i], &b.comps[j]) {
                    comps[tidx(i, j)] = plane_or_none(x.iter().zip(y.iter()).map(|(p, q)| p * q).collect());
                }
            }
        }
        Slice { n: a.n, rank: Rank::Tensor, comps }
    }

    /// `a (x) b + b (x) a`, stored with shared off-diagonal entries.
    pub fn sym_outer(a: &Slice, b: &Slice) -> Slice {
        assert!(a.rank == Rank::Vector && b.rank == Rank::Vector);
        let six = SYM_ENTRIES.map(|(i, j)| {
            let mut out = vec![0.0; a.n * a.n];
            let mut any = false;
            for (x, y) in [(i, j), (j, i)] {
                if let (Some(p), Some(q)) = (&a.comps[x], &b.comps[y]) {
                    any = true;
                    for ((o, u), v) in out.iter_mut().zip(p.iter()).zip(q.iter()) {
                        *o += u * v;
                    }
                }
            }
            if any {
                plane_or_none(out)
            } else {
                None
            }
        });
        Slice::symmetric(a.n, six)
    }

    /// `a (x) a`, stored with shared off-diagonal entries.
    pub fn self_outer(a: &Slice) -> Slice {
        assert_eq!(a.rank, Rank::Vector);
        let six = SYM_ENTRIES.map(|(i, j)| match (&a.comps[i], &a.comps[j]) {
            (Some(p), Some(q)) => plane_or_none(p.iter().zip(q.iter()).map(|(u, v)| u * v).collect()),
            _ => None,
        });
        Slice::symmetric(a.n, six)
    }

    /// `a (x) b - b (x) a`.
    pub fn skew_outer(a: &Slice, b: &Slice) -> Slice {
        let upper = [(0, 1), (0, 2), (1, 2)].map(|(i, j)| {
            let mut out = vec![0.0; a.n * a.n];
            let mut any = false;
            if let (Some(p), Some(q)) = (&a.comps[i], &b.comps[j]) {
                any = true;
                for ((o, u), v) in out.iter_mut().zip(p.iter()).zip(q.iter()) {
                    *o += u * v;
                }
            }
            if let (Some(p), Some(q)) = (&b.comps[i], &a.comps[j]) {
                any = true;
                for ((o, u), v) in out.iter_mut().zip(p.iter()).zip(q.iter()) {
                    *o -= u * v;
                }
            }
            if any {
                plane_or_none(out)
            } else {
                None
            }
        });
        Slice::skew(a.n, upper)
    }

    pub fn trace(&self) -> Slice {
        assert_eq!(self.rank, Rank::Tensor);
        let diag = [0, 4, 8].map(|c| self.comps[c].clone());
        let mut out = vec![0.0; self.n * self.n];
        for p in diag.iter().flatten() {
            for (o, v) in out.iter_mut().zip(p.iter()) {
                *o += v;
            }
        }
        Slice::from_planes(self.n, Rank::Scalar, vec![plane_or_none(out)])
    }

    /// `M - tr(M)/3 Id`.
    pub fn traceless(&self) -> Slice {
        let tr = self.trace();
        let Some(t) = tr.comps[0].clone() else {
            return self.clone();
        };
        let mut comps = self.comps.clone();
        for c in [0, 4, 8] {
            let base = self.comp_vec(c);
            comps[c] = plane_or_none(base.iter().zip(t.iter()).map(|(m, tv)| m - tv / 3.0).collect());
        }
        Slice { n: self.n, rank: self.rank, comps }
    }

    pub fn transpose(&self) -> Slice {
        assert_eq!(self.rank, Rank::Tensor);
        let mut comps = vec![None; 9];
        for i in 0..3 {
            for j in 0..3 {
                comps[tidx(j, i)] = self.comps[tidx(i, j)].clone();
            }
        }
        Slice { n: self.n, rank: self.rank, comps }
    }

    pub fn dot(a: &Slice, b: &Slice) -> Slice {
        assert!(a.rank == b.rank);
        let mut out = vec![0.0; a.n * a.n];
        for c in 0..a.comps.len() {
            if let (Some(p), Some(q)) = (&a.comps[c], &b.comps[c]) {
                for ((o, u), v) in out.iter_mut().zip(p.iter()).zip(q.iter()) {
                    *o += u * v;
                }
            }
        }
        Slice::scalar(a.n, out)
    }

    /// Grid average of component `c`.
    pub fn mean(&self, c: usize) -> f64 {
        match &self.comps[c] {
            Some(p) => pairwise_sum(p) / p.len() as f64,
            None => 0.0,
        }
    }

    /// Checks the symmetry class to an absolute tolerance.
    pub fn check_symmetry(&self, sym: Symmetry, tol: f64) -> Result<()> {
        if sym == Symmetry::None {
            return Ok(());
        }
        if self.rank != Rank::Tensor {
            return Err(Error::Symmetry("symmetry tag on a non-tensor".into()));
        }
        let sign = if sym == Symmetry::Skew { -1.0 } else { 1.0 };
        for i in 0..3 {
            for j in 0..3 {
                let (a, b) = (tidx(i, j), tidx(j, i));
                for p in 0..self.n * self.n {
                    let d = self.value(a, p) - sign * self.value(b, p);
                    if d.abs() > tol {
                        return Err(Error::Symmetry(format!("entry ({},{}) differs by {d:e}", i + 1, j + 1)));
                    }
                }
            }
        }
        if sym == Symmetry::SymmetricTraceless {
            for p in 0..self.n * self.n {
                let tr = self.value(0, p) + self.value(4, p) + self.value(8, p);
                if tr.abs() > tol {
                    return Err(Error::Symmetry(format!("trace {tr:e}")));
                }
            }
        }
        Ok(())
    }

    /// Bitwise equality of values; `None` equals an all-zero plane.
    pub fn bits_eq(&self, other: &Slice) -> bool {
        if self.n != other.n || self.rank != other.rank {
            return false;
        }
        (0..self.comps.len()).all(|c| match (&self.comps[c], &other.comps[c]) {
            (Some(a), Some(b)) => a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
            (Some(a), None) | (None, Some(a)) => a.iter().all(|&x| x == 0.0),
            (None, None) => true,
        })
    }
}

/// A sampled field over all time samples of a grid.
#[derive(Clone, Debug)]
pub struct TorusField {
    pub grid: Grid,
    pub rank: Rank,
    pub sym: Symmetry,
    pub slices: Vec<Slice>,
}

impl TorusField {
    pub fn zeros(grid: Grid, rank: Rank, sym: Symmetry) -> Self {
        TorusField { grid, rank, sym, slices: vec![Slice::zeros(grid.n, rank); grid.n_t] }
    }

    pub fn from_slices(grid: Grid, rank: Rank, sym: Symmetry, slices: Vec<Slice>) -> Result<Self> {
        if slices.len() != grid.n_t {
            return Err(Error::GridMismatch(format!("{} slices for n_t = {}", slices.len(), grid.n_t)));
        }
        for s in &slices {
            if s.n != grid.n {
                return Err(Error::GridMismatch(format!("slice n = {} for grid n = {}", s.n, grid.n)));
            }
            if s.rank != rank {
                return Err(Error::RankMismatch(format!("{:?} slice in {:?} field", s.rank, rank)));
            }
        }
        Ok(TorusField { grid, rank, sym, slices })
    }

    /// Samples `f(t, x1, x2, out)` at every grid point. Symmetric tensors are symmetrized
    /// storage-wise from the upper triangle.
    pub fn from_fn<F>(grid: Grid, rank: Rank, sym: Symmetry, f: F) -> Result<Self>
    where
        F: Fn(f64, f64, f64, &mut [f64]) + Sync,
    {
        let nc = rank.components();
        let n = grid.n;
        let slices: Vec<Slice> = (0..grid.n_t)
            .into_par_iter()
            .map(|j| {
                let t = grid.t(j);
                let mut planes = vec![vec![0.0; n * n]; nc];
                let mut buf = vec![0.0; nc];
                for i2 in 0..n {
                    for i1 in 0..n {
                        buf.iter_mut().for_each(|b| *b = 0.0);
                        f(t, grid.x(i1), grid.x(i2), &mut buf);
                        for c in 0..nc {
                            planes[c][i1 + n * i2] = buf[c];
                        }
                    }
                }
                let s = Slice::from_vecs(n, rank, planes);
                if matches!(sym, Symmetry::Symmetric | Symmetry::SymmetricTraceless) {
                    let six = SYM_ENTRIES.map(|(i, j)| s.comps[tidx(i, j)].clone());
                    Slice::symmetric(n, six)
                } else {
                    s
                }
            })
            .collect();
        let out = TorusField { grid, rank, sym, slices };
        out.check_symmetry(1e-12 * out.max_abs().max(1.0))?;
        Ok(out)
    }

    pub fn check_symmetry(&self, tol: f64) -> Result<()> {
        for s in &self.slices {
            s.check_symmetry(self.sym, tol)?;
        }
        Ok(())
    }

    pub fn slice(&self, j: usize) -> &Slice {
        &self.slices[j]
    }

    pub fn max_abs(&self) -> f64 {
        self.slices.iter().map(Slice::max_abs).fold(0.0, f64::max)
    }

    /// Applies `op` to every slice in parallel; results are collected in time order.
    pub fn map<F>(&self, rank: Rank, sym: Symmetry, op: F) -> Result<TorusField>
    where
        F: Fn(&Slice) -> Result<Slice> + Sync,
    {
        let slices = self.slices.par_iter().map(&op).collect::<Result<Vec<_>>>()?;
        TorusField::from_slices(self.grid, rank, sym, slices)
    }

    pub fn lincomb(terms: &[(f64, &TorusField)]) -> Result<TorusField> {
        let first = terms[0].1;
        for (_, f) in terms {
            if f.grid != first.grid {
                return Err(Error::GridMismatch("lincomb of fields on different grids".into()));
            }
            if f.rank != first.rank {
                return Err(Error::RankMismatch("lincomb of fields of different rank".into()));
            }
        }
        let sym = if terms.iter().all(|(_, f)| f.sym == first.sym) { first.sym } else { Symmetry::None };
        let slices = (0..first.grid.n_t)
            .into_par_iter()
            .map(|j| {
                let ts: Vec<(f64, &Slice)> = terms.iter().map(|(a, f)| (*a, &f.slices[j])).collect();
                Slice::lincomb(&ts)
            })
            .collect();
        Ok(TorusField { grid: first.grid, rank: first.rank, sym, slices })
    }

    pub fn sub(&self, other: &TorusField) -> Result<TorusField> {
        TorusField::lincomb(&[(1.0, self), (-1.0, other)])
    }

    /// Dense samples in snapshot order.
    pub fn to_dense(&self) -> Vec<f64> {
        let np = self.grid.points();
        let mut out = Vec::with_capacity(np * self.rank.components() * self.grid.n_t);
        for s in &self.slices {
            for c in 0..self.rank.components() {
                match &s.comps[c] {
                    Some(p) => out.extend_from_slice(p),
                    None => out.extend(std::iter::repeat(0.0).take(np)),
                }
            }
        }
        out
    }

    pub fn bits_eq(&self, other: &TorusField) -> bool {
        self.grid == other.grid
            && self.rank == other.rank
            && self.sym == other.sym
            && self.slices.iter().zip(&other.slices).all(|(a, b)| a.bits_eq(b))
    }
}

/// Sidecar metadata for a serialized field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub version: u32,
    pub n_x: usize,
    pub n_t: usize,
    pub rank: String,
    pub symmetry_tag: String,
    pub layout: String,
    pub dtype: String,
}

pub fn serialize(f: &TorusField) -> (SnapshotHeader, Vec<u8>) {
    let header = SnapshotHeader {
        version: SNAPSHOT_VERSION,
        n_x: f.grid.n,
        n_t: f.grid.n_t,
        rank: f.rank.tag().into(),
        symmetry_tag: f.sym.tag().into(),
        layout: LAYOUT.into(),
        dtype: DTYPE.into(),
    };
    let dense = f.to_dense();
    let mut bytes = Vec::with_capacity(dense.len() * 8);
    for v in dense {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    (header, bytes)
}

pub fn deserialize(header: &SnapshotHeader, bytes: &[u8]) -> Result<TorusField> {
    if header.version != SNAPSHOT_VERSION {
        return Err(Error::Version(header.version));
    }
    if header.layout != LAYOUT || header.dtype != DTYPE {
        return Err(Error::Param(format!("unsupported layout {} / {}", header.layout, header.dtype)));
    }
    let grid = Grid::new(header.n_x, header.n_t)?;
    let rank = Rank::from_tag(&header.rank)?;
    let sym = Symmetry::from_tag(&header.symmetry_tag)?;
    let np = grid.points();
    let nc = rank.components();
    let expected = np * nc * grid.n_t * 8;
    if bytes.len() != expected {
        return Err(Error::PayloadSize { expected, got: bytes.len() });
    }
    let values: Vec<f64> =
        bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8"))).collect();
    let slices = values
        .chunks_exact(np * nc)
        .map(|block| Slice::from_vecs(grid.n, rank, block.chunks_exact(np).map(|p| p.to_vec()).collect()))
        .collect();
    let f = TorusField::from_slices(grid, rank, sym, slices)?;
    f.check_symmetry(0.0)?;
    Ok(f)
}

fn snapshot_paths(base: &Path) -> (PathBuf, PathBuf) {
    let b = base.as_os_str().to_string_lossy();
    (PathBuf::from(format!("{b}.tfd")), PathBuf::from(format!("{b}.tfd.json")))
}

/// Writes `<base>.tfd` and `<base>.tfd.json`.
pub fn save_snapshot(f: &TorusField, base: &Path) -> Result<()> {
    let (header, bytes) = serialize(f);
    let (data, meta) = snapshot_paths(base);
    std::fs::write(data, bytes)?;
    std::fs::write(meta, serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn load_snapshot(base: &Path) -> Result<TorusField> {
    let (data, meta) = snapshot_paths(base);
    let header: SnapshotHeader = serde_json::from_slice(&std::fs::read(meta)?)?;
    deserialize(&header, &std::fs::read(data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_non_power_of_two() {
        assert!(matches!(Grid::new(100, 3), Err(Error::GridSize(100))));
        assert_eq!(Grid::new(100, 3).unwrap_err().to_string(), "n_x must be power of two (got 100)");
        assert!(Grid::new(8, 1).is_err());
        let g = Grid::new(64, 5).unwrap();
        assert_eq!(g.dt(), 0.25);
        assert_eq!(g.h(), TWO_PI / 64.0);
    }

    #[test]
    fn zero_scalar_payload_size() {
        let f = TorusField::zeros(Grid::stationary(16).unwrap(), Rank::Scalar, Symmetry::None);
        let (h, bytes) = serialize(&f);
        assert_eq!(bytes.len(), 16 * 16 * 8);
        assert_eq!(h.version, SNAPSHOT_VERSION);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let f = TorusField::zeros(Grid::stationary(16).unwrap(), Rank::Vector, Symmetry::None);
        let (h, bytes) = serialize(&f);
        let err = deserialize(&h, &bytes[..bytes.len() - 8]).unwrap_err();
        assert!(err.to_string().starts_with("payload size mismatch"));
        let mut h2 = h.clone();
        h2.version = 7;
        assert!(matches!(deserialize(&h2, &bytes), Err(Error::Version(7))));
    }

    #[test]
    fn symmetric_entries_share_storage() {
        let g = Grid::stationary(16).unwrap();
        let f = TorusField::from_fn(g, Rank::Tensor, Symmetry::Symmetric, |_, x, y, out| {
            out[tidx(0, 1)] = x.sin() * y.cos();
            out[tidx(1, 0)] = x.sin() * y.cos();
            out[tidx(2, 2)] = 1.0;
        })
        .unwrap();
        let s = f.slice(0);
        assert!(Arc::ptr_eq(s.plane(tidx(0, 1)).unwrap(), s.plane(tidx(1, 0)).unwrap()));
        assert!(s.plane(tidx(0, 2)).is_none());
        let sum = s.add(s);
        assert!(Arc::ptr_eq(sum.plane(tidx(0, 1)).unwrap(), sum.plane(tidx(1, 0)).unwrap()));
    }

    #[test]
    fn snapshot_files_round_trip() {
        let g = Grid::new(16, 3).unwrap();
        let f = TorusField::from_fn(g, Rank::Tensor, Symmetry::Skew, |t, x, _, out| {
            out[tidx(0, 2)] = t + x.sin();
            out[tidx(2, 0)] = -(t + x.sin());
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("omega");
        save_snapshot(&f, &base).unwrap();
        assert!(dir.path().join("omega.tfd.json").exists());
        let back = load_snapshot(&base).unwrap();
        assert!(back.bits_eq(&f));
    }

    #[test]
    fn pairwise_sum_matches_exact_integer_sum() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499500.0);
    }
}
