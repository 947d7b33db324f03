//! Fourier-multiplier calculus on the periodic square.
//!
//! Spectra are stored column-major: entry `k1 * n + r` holds the coefficient with
//! `x1`-wavenumber `k1` in `0..=n/2` and `x2`-wavenumber `r` (wrapped to `-n/2..n/2`).
//! The forward transform is unnormalized and the inverse divides by `n^2`.
//!
//! First-order symbols use the reduced wavenumber: the component of `i k` along a
//! coordinate is set to zero at that coordinate's Nyquist index. Second-order symbols are
//! built from the same reduced wavenumber, so `div grad = Laplacian` holds exactly and every
//! inverse vanishes where the reduced wavenumber does.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::field::{plane_or_none, tidx, Grid, Plane, Rank, Slice, Symmetry, TorusField, SYM_ENTRIES};

/// Relative divergence above which [`inverse_curl`] rejects its input.
pub const DIVERGENCE_TOLERANCE: f64 = 1e-8;

/// Cached transforms and wavenumber tables for one grid size.
pub struct Fft2 {
    n: usize,
    nh: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// Reduced wavenumbers per spectral entry.
    xi1: Vec<f64>,
    xi2: Vec<f64>,
    /// `|xi|^2` with the reduced wavenumber.
    xi_sq: Vec<f64>,
    /// Parseval weight of each stored entry (2 for interior half-spectrum columns).
    weight: Vec<f64>,
}

static PLANS: OnceLock<Mutex<HashMap<usize, Arc<Fft2>>>> = OnceLock::new();

/// Shared transform for grid size `n`.
pub fn plan(n: usize) -> Arc<Fft2> {
    let cache = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().expect("plan cache poisoned");
    map.entry(n).or_insert_with(|| Arc::new(Fft2::new(n))).clone()
}

impl Fft2 {
    fn new(n: usize) -> Self {
        let nh = n / 2 + 1;
        let mut rp = RealFftPlanner::<f64>::new();
        let mut cp = FftPlanner::<f64>::new();
        let mut xi1 = vec![0.0; n * nh];
        let mut xi2 = vec![0.0; n * nh];
        let mut xi_sq = vec![0.0; n * nh];
        let mut weight = vec![0.0; n * nh];
        for k1 in 0..nh {
            for r in 0..n {
                let idx = k1 * n + r;
                let a = if k1 == n / 2 { 0.0 } else { k1 as f64 };
                let b = if r == n / 2 {
                    0.0
                } else if r < n / 2 {
                    r as f64
                } else {
                    r as f64 - n as f64
                };
                xi1[idx] = a;
                xi2[idx] = b;
                xi_sq[idx] = a * a + b * b;
                weight[idx] = if k1 == 0 || k1 == n / 2 { 1.0 } else { 2.0 };
            }
        }
        Fft2 {
            n,
            nh,
            r2c: rp.plan_fft_forward(n),
            c2r: rp.plan_fft_inverse(n),
            fwd: cp.plan_fft_forward(n),
            inv: cp.plan_fft_inverse(n),
            xi1,
            xi2,
            xi_sq,
            weight,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n * self.nh
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn xi(&self, axis: usize) -> &[f64] {
        if axis == 0 {
            &self.xi1
        } else {
            &self.xi2
        }
    }

    pub fn xi_sq(&self) -> &[f64] {
        &self.xi_sq
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    /// Unsigned `(k1, k2)` integer wavenumbers of entry `idx` (no Nyquist reduction).
    pub fn wavenumber(&self, idx: usize) -> (i64, i64) {
        let k1 = (idx / self.n) as i64;
        let r = idx % self.n;
        let k2 = if r <= self.n / 2 { r as i64 } else { r as i64 - self.n as i64 };
        (k1, k2)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<Complex64> {
        let (n, nh) = (self.n, self.nh);
        assert_eq!(x.len(), n * n);
        let mut cols = vec![Complex64::new(0.0, 0.0); n * nh];
        let mut row_in = vec![0.0; n];
        let mut row_out = vec![Complex64::new(0.0, 0.0); nh];
        for i2 in 0..n {
            row_in.copy_from_slice(&x[i2 * n..(i2 + 1) * n]);
            self.r2c.process(&mut row_in, &mut row_out).expect("r2c length");
            for (k1, v) in row_out.iter().enumerate() {
                cols[k1 * n + i2] = *v;
            }
        }
        self.fwd.process(&mut cols);
        cols
    }

    pub fn inverse(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        let (n, nh) = (self.n, self.nh);
        assert_eq!(spec.len(), n * nh);
        self.inv.process(&mut spec);
        let scale = 1.0 / (n * n) as f64;
        let mut out = vec![0.0; n * n];
        let mut row_in = vec![Complex64::new(0.0, 0.0); nh];
        let mut row_out = vec![0.0; n];
        for i2 in 0..n {
            for k1 in 0..nh {
                row_in[k1] = spec[k1 * n + i2];
            }
            row_in[0].im = 0.0;
            row_in[nh - 1].im = 0.0;
            self.c2r.process(&mut row_in, &mut row_out).expect("c2r length");
            for (o, v) in out[i2 * n..(i2 + 1) * n].iter_mut().zip(&row_out) {
                *o = v * scale;
            }
        }
        out
    }
}

pub type Coeffs = Arc<Vec<Complex64>>;

/// A multi-component spectrum; `None` marks an identically zero component.
#[derive(Clone)]
pub struct SpecSlice {
    pub n: usize,
    pub rank: Rank,
    pub comps: Vec<Option<Coeffs>>,
}

impl SpecSlice {
    pub fn zeros(n: usize, rank: Rank) -> Self {
        SpecSlice { n, rank, comps: vec![None; rank.components()] }
    }

    pub fn get(&self, c: usize) -> Option<&[Complex64]> {
        self.comps[c].as_deref().map(|v| v.as_slice())
    }

    /// `sum coef * spectrum`, componentwise.
    pub fn lincomb(terms: &[(f64, &SpecSlice)]) -> SpecSlice {
        let (n, rank) = (terms[0].1.n, terms[0].1.rank);
        let len = plan(n).len();
        let shared_with = |c: usize| -> Option<usize> {
            if rank != Rank::Tensor || c % 3 >= c / 3 {
                return None;
            }
            let t = tidx(c % 3, c / 3);
            terms
                .iter()
                .all(|(_, s)| match (&s.comps[c], &s.comps[t]) {
                    (Some(a), Some(b)) => Arc::ptr_eq(a, b),
                    (None, None) => true,
                    _ => false,
                })
                .then_some(t)
        };
        let mut comps: Vec<Option<Coeffs>> = (0..rank.components())
            .map(|c| {
                if shared_with(c).is_some() {
                    return None;
                }
                let active: Vec<(f64, &Coeffs)> =
                    terms.iter().filter_map(|(a, s)| s.comps[c].as_ref().map(|p| (*a, p))).collect();
                if active.is_empty() {
                    return None;
                }
                let mut out = vec![Complex64::new(0.0, 0.0); len];
                for (a, p) in active {
                    for (o, v) in out.iter_mut().zip(p.iter()) {
                        *o += v * a;
                    }
                }
                Some(Arc::new(out))
            })
            .collect();
        for c in 0..comps.len() {
            if let Some(t) = shared_with(c) {
                comps[c] = comps[t].clone();
            }
        }
        SpecSlice { n, rank, comps }
    }

    pub fn add(&self, other: &SpecSlice) -> SpecSlice {
        SpecSlice::lincomb(&[(1.0, self), (1.0, other)])
    }
}

/// Transforms every nonzero component, reusing shared storage.
pub fn fwd(s: &Slice) -> SpecSlice {
    let p = plan(s.n());
    let planes = s.planes();
    let firsts: Vec<Option<usize>> = (0..planes.len())
        .map(|c| {
            let pc = planes[c].as_ref()?;
            (0..c).find(|&d| planes[d].as_ref().is_some_and(|pd| Arc::ptr_eq(pc, pd)))
        })
        .collect();
    let computed: Vec<Option<Coeffs>> = (0..planes.len())
        .into_par_iter()
        .map(|c| match (&planes[c], firsts[c]) {
            (Some(pl), None) => Some(Arc::new(p.forward(pl))),
            _ => None,
        })
        .collect();
    let mut comps = computed.clone();
    for c in 0..planes.len() {
        if let Some(d) = firsts[c] {
            comps[c] = computed[d].clone();
        }
    }
    SpecSlice { n: s.n(), rank: s.rank(), comps }
}

/// Inverse transform; components sharing a spectrum share the resulting plane.
pub fn inv(s: &SpecSlice) -> Slice {
    let p = plan(s.n);
    let firsts: Vec<Option<usize>> = (0..s.comps.len())
        .map(|c| {
            let pc = s.comps[c].as_ref()?;
            (0..c).find(|&d| s.comps[d].as_ref().is_some_and(|pd| Arc::ptr_eq(pc, pd)))
        })
        .collect();
    let computed: Vec<Option<Plane>> = (0..s.comps.len())
        .into_par_iter()
        .map(|c| match (&s.comps[c], firsts[c]) {
            (Some(sp), None) => plane_or_none(p.inverse(sp.as_ref().clone())),
            _ => None,
        })
        .collect();
    let mut comps = computed.clone();
    for c in 0..s.comps.len() {
        if let Some(d) = firsts[c] {
            comps[c] = computed[d].clone();
        }
    }
    Slice::from_planes(s.n, s.rank, comps)
}

fn zero_spec(len: usize) -> Vec<Complex64> {
    vec![Complex64::new(0.0, 0.0); len]
}

/// Elementwise `out += factor(idx) * input`.
fn accumulate(out: &mut Vec<Complex64>, input: &[Complex64], factor: impl Fn(usize) -> Complex64) {
    for (idx, (o, v)) in out.iter_mut().zip(input).enumerate() {
        *o += factor(idx) * v;
    }
}

fn i_times(x: f64) -> Complex64 {
    Complex64::new(0.0, x)
}

/// Spectral partial derivative along axis 0 or 1 (the third coordinate is inert).
pub fn d_hat(x: &[Complex64], axis: usize, p: &Fft2) -> Vec<Complex64> {
    let xi = p.xi(axis);
    x.iter().zip(xi).map(|(v, k)| i_times(*k) * v).collect()
}

pub fn grad_hat(s: &SpecSlice) -> SpecSlice {
    let p = plan(s.n);
    let comps = match &s.comps[0] {
        Some(c) => vec![Some(Arc::new(d_hat(c, 0, &p))), Some(Arc::new(d_hat(c, 1, &p))), None],
        None => vec![None; 3],
    };
    SpecSlice { n: s.n, rank: Rank::Vector, comps }
}

pub fn div_hat(v: &SpecSlice) -> SpecSlice {
    let p = plan(v.n);
    let mut out: Option<Vec<Complex64>> = None;
    for axis in 0..2 {
        if let Some(c) = &v.comps[axis] {
            let o = out.get_or_insert_with(|| zero_spec(p.len()));
            let xi = p.xi(axis);
            accumulate(o, c, |i| i_times(xi[i]));
        }
    }
    SpecSlice { n: v.n, rank: Rank::Scalar, comps: vec![out.map(Arc::new)] }
}

/// `curl v = (d2 v3, -d1 v3, d1 v2 - d2 v1)`.
pub fn curl_hat(v: &SpecSlice) -> SpecSlice {
    let p = plan(v.n);
    let (xi1, xi2) = (p.xi(0), p.xi(1));
    let c1 = v.comps[2].as_ref().map(|c| Arc::new(d_hat(c, 1, &p)));
    let c2 = v.comps[2].as_ref().map(|c| Arc::new(d_hat(c, 0, &p).into_iter().map(|z| -z).collect()));
    let c3 = if v.comps[0].is_none() && v.comps[1].is_none() {
        None
    } else {
        let mut o = zero_spec(p.len());
        if let Some(c) = &v.comps[1] {
            accumulate(&mut o, c, |i| i_times(xi1[i]));
        }
        if let Some(c) = &v.comps[0] {
            accumulate(&mut o, c, |i| i_times(-xi2[i]));
        }
        Some(Arc::new(o))
    };
    SpecSlice { n: v.n, rank: Rank::Vector, comps: vec![c1, c2, c3] }
}

/// Row divergence of a tensor: `(div M)_i = sum_j d_j M_ij`.
pub fn tdiv_hat(m: &SpecSlice) -> SpecSlice {
    assert_eq!(m.rank, Rank::Tensor);
    let p = plan(m.n);
    let comps = (0..3)
        .map(|i| {
            let mut out: Option<Vec<Complex64>> = None;
            for axis in 0..2 {
                if let Some(c) = &m.comps[tidx(i, axis)] {
                    let o = out.get_or_insert_with(|| zero_spec(p.len()));
                    let xi = p.xi(axis);
                    accumulate(o, c, |k| i_times(xi[k]));
                }
            }
            out.map(Arc::new)
        })
        .collect();
    SpecSlice { n: m.n, rank: Rank::Vector, comps }
}

/// Multiplies every component by a real symbol.
pub fn multiply_hat(s: &SpecSlice, symbol: &[f64]) -> SpecSlice {
    let comps = s
        .comps
        .iter()
        .map(|c| c.as_ref().map(|c| Arc::new(c.iter().zip(symbol).map(|(v, m)| v * m).collect())))
        .collect();
    SpecSlice { n: s.n, rank: s.rank, comps }
}

/// Symbol of `(-Laplacian)^alpha`; zero at the zero reduced wavenumber for `alpha > 0`.
pub fn frac_lap_symbol(n: usize, alpha: f64) -> Vec<f64> {
    let p = plan(n);
    p.xi_sq().iter().map(|&k2| if k2 == 0.0 { if alpha == 0.0 { 1.0 } else { 0.0 } } else { k2.powf(alpha) }).collect()
}

pub fn frac_lap_hat(s: &SpecSlice, alpha: f64) -> SpecSlice {
    multiply_hat(s, &frac_lap_symbol(s.n, alpha))
}

/// Leray projection `f - xi (xi . f) / |xi|^2` on the planar components.
pub fn helmholtz_hat(v: &SpecSlice) -> SpecSlice {
    let p = plan(v.n);
    if v.comps[0].is_none() && v.comps[1].is_none() {
        return v.clone();
    }
    let (xi1, xi2, xs) = (p.xi(0), p.xi(1), p.xi_sq());
    let zero = zero_spec(p.len());
    let a = v.get(0).unwrap_or(&zero);
    let b = v.get(1).unwrap_or(&zero);
    let mut o1 = a.to_vec();
    let mut o2 = b.to_vec();
    for i in 0..p.len() {
        if xs[i] == 0.0 {
            continue;
        }
        let proj = (a[i] * xi1[i] + b[i] * xi2[i]) / xs[i];
        o1[i] -= proj * xi1[i];
        o2[i] -= proj * xi2[i];
    }
    SpecSlice { n: v.n, rank: Rank::Vector, comps: vec![Some(Arc::new(o1)), Some(Arc::new(o2)), v.comps[2].clone()] }
}

/// Symmetric traceless inverse divergence of a vector field.
pub fn r_hat(v: &SpecSlice) -> SpecSlice {
    let p = plan(v.n);
    if v.comps.iter().all(|c| c.is_none()) {
        return SpecSlice::zeros(v.n, Rank::Tensor);
    }
    let (xi1, xi2, xs) = (p.xi(0), p.xi(1), p.xi_sq());
    let zero = zero_spec(p.len());
    let u = [v.get(0).unwrap_or(&zero), v.get(1).unwrap_or(&zero), v.get(2).unwrap_or(&zero)];
    let mut six: Vec<Vec<Complex64>> = (0..6).map(|_| zero_spec(p.len())).collect();
    for idx in 0..p.len() {
        let k2 = xs[idx];
        if k2 == 0.0 {
            continue;
        }
        let xi = [xi1[idx], xi2[idx], 0.0];
        let uu = [u[0][idx], u[1][idx], u[2][idx]];
        let xdotu = uu[0] * xi[0] + uu[1] * xi[1];
        for (e, &(k, l)) in SYM_ENTRIES.iter().enumerate() {
            let delta = if k == l { 1.0 } else { 0.0 };
            let first = -i_times(1.0) * (uu[l] * xi[k] + uu[k] * xi[l]) / k2;
            let second = i_times(0.5) * (delta + xi[k] * xi[l] / k2) * xdotu / k2;
            six[e][idx] = first + second;
        }
    }
    let six: Vec<Option<Coeffs>> = six
        .into_iter()
        .map(|c| if c.iter().all(|z| z.re == 0.0 && z.im == 0.0) { None } else { Some(Arc::new(c)) })
        .collect();
    let mut comps = vec![None; 9];
    for (e, &(k, l)) in SYM_ENTRIES.iter().enumerate() {
        comps[tidx(k, l)] = six[e].clone();
        comps[tidx(l, k)] = six[e].clone();
    }
    SpecSlice { n: v.n, rank: Rank::Tensor, comps }
}

/// Relative size of `div v` against `|xi| |v|`, both in the Parseval norm.
pub fn relative_divergence_hat(v: &SpecSlice) -> f64 {
    let p = plan(v.n);
    let (xi1, xi2, xs, w) = (p.xi(0), p.xi(1), p.xi_sq(), p.weight());
    let zero = zero_spec(p.len());
    let a = v.get(0).unwrap_or(&zero);
    let b = v.get(1).unwrap_or(&zero);
    let c = v.get(2).unwrap_or(&zero);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..p.len() {
        num += w[i] * (a[i] * xi1[i] + b[i] * xi2[i]).norm_sqr();
        den += w[i] * xs[i] * (a[i].norm_sqr() + b[i].norm_sqr() + c[i].norm_sqr());
    }
    if den == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

/// `(-Laplacian)^{-1} curl f`; rejects inputs that are not divergence-free.
pub fn curl_inv_hat(v: &SpecSlice) -> Result<SpecSlice> {
    let rel = relative_divergence_hat(v);
    if rel > DIVERGENCE_TOLERANCE {
        return Err(Error::NotDivergenceFree(rel));
    }
    let p = plan(v.n);
    let c = curl_hat(v);
    let inv_sym: Vec<f64> = p.xi_sq().iter().map(|&k| if k == 0.0 { 0.0 } else { 1.0 / k }).collect();
    Ok(multiply_hat(&c, &inv_sym))
}

/// Drops the mean of every component.
pub fn remove_mean_hat(s: &SpecSlice) -> SpecSlice {
    let comps = s
        .comps
        .iter()
        .map(|c| {
            c.as_ref().map(|c| {
                let mut v = c.as_ref().clone();
                v[0] = Complex64::new(0.0, 0.0);
                Arc::new(v)
            })
        })
        .collect();
    SpecSlice { n: s.n, rank: s.rank, comps }
}

// Slice-level operators.

pub fn derivative(s: &Slice, axis: usize) -> Slice {
    let p = plan(s.n());
    let h = fwd(s);
    let comps = h.comps.iter().map(|c| c.as_ref().map(|c| Arc::new(d_hat(c, axis, &p)))).collect();
    inv(&SpecSlice { n: s.n(), rank: s.rank(), comps })
}

pub fn gradient(s: &Slice) -> Slice {
    assert_eq!(s.rank(), Rank::Scalar);
    inv(&grad_hat(&fwd(s)))
}

pub fn divergence(v: &Slice) -> Slice {
    assert_eq!(v.rank(), Rank::Vector);
    inv(&div_hat(&fwd(v)))
}

pub fn curl(v: &Slice) -> Slice {
    assert_eq!(v.rank(), Rank::Vector);
    inv(&curl_hat(&fwd(v)))
}

pub fn tensor_divergence(m: &Slice) -> Slice {
    inv(&tdiv_hat(&fwd(m)))
}

pub fn laplacian(s: &Slice) -> Slice {
    let neg: Vec<f64> = plan(s.n()).xi_sq().iter().map(|k| -k).collect();
    inv(&multiply_hat(&fwd(s), &neg))
}

pub fn frac_laplacian(s: &Slice, alpha: f64) -> Slice {
    inv(&frac_lap_hat(&fwd(s), alpha))
}

pub fn helmholtz(v: &Slice) -> Slice {
    inv(&helmholtz_hat(&fwd(v)))
}

/// Symmetric traceless `R v` with `div R v = v - mean(v)` for divergence-type inputs.
pub fn inverse_divergence(v: &Slice) -> Slice {
    inv(&r_hat(&fwd(v)))
}

pub fn inverse_curl(v: &Slice) -> Result<Slice> {
    Ok(inv(&curl_inv_hat(&fwd(v))?))
}

pub fn remove_mean(s: &Slice) -> Slice {
    inv(&remove_mean_hat(&fwd(s)))
}

// Mollifiers.

/// The standard bump `exp(-1/(1-r^2))` on `|r| < 1`.
pub fn bump(r: f64) -> f64 {
    if r.abs() < 1.0 {
        (-1.0 / (1.0 - r * r)).exp()
    } else {
        0.0
    }
}

static KERNELS: OnceLock<Mutex<HashMap<(usize, u64), Arc<Vec<f64>>>>> = OnceLock::new();

/// Real spectrum of the unit-mass sampled radial bump of radius `l`.
pub fn space_kernel_symbol(n: usize, l: f64) -> Result<Arc<Vec<f64>>> {
    let h = crate::field::TWO_PI / n as f64;
    if !(l >= h) {
        return Err(Error::KernelUnderResolved { l, h });
    }
    if l >= std::f64::consts::PI {
        return Err(Error::Param(format!("mollification scale {l} exceeds half the period")));
    }
    let cache = KERNELS.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(k) = cache.lock().expect("kernel cache").get(&(n, l.to_bits())) {
        return Ok(k.clone());
    }
    let mut plane = vec![0.0; n * n];
    for i2 in 0..n {
        let d2 = i2.min(n - i2) as f64 * h;
        for i1 in 0..n {
            let d1 = i1.min(n - i1) as f64 * h;
            plane[i1 + n * i2] = bump((d1 * d1 + d2 * d2).sqrt() / l);
        }
    }
    let mass = crate::field::pairwise_sum(&plane);
    plane.iter_mut().for_each(|v| *v /= mass);
    let spec = plan(n).forward(&plane);
    let symbol: Arc<Vec<f64>> = Arc::new(spec.iter().map(|z| z.re).collect());
    cache.lock().expect("kernel cache").insert((n, l.to_bits()), symbol.clone());
    Ok(symbol)
}

pub fn mollify_space(s: &Slice, l: f64) -> Result<Slice> {
    let k = space_kernel_symbol(s.n(), l)?;
    Ok(inv(&multiply_hat(&fwd(s), &k)))
}

/// Normalized weights of the time mollifier, indexed by offset `-m..=m`.
pub fn time_kernel(grid: &Grid, l: f64) -> Result<Vec<(isize, f64)>> {
    if grid.n_t == 1 {
        return Ok(vec![(0, 1.0)]);
    }
    let dt = grid.dt();
    if !(l > dt) {
        return Err(Error::KernelUnderResolved { l, h: dt });
    }
    let m = (l / dt).ceil() as isize;
    let raw: Vec<(isize, f64)> = (-m..=m).map(|o| (o, bump(o as f64 * dt / l))).filter(|(_, w)| *w > 0.0).collect();
    let mass: f64 = raw.iter().map(|(_, w)| w).sum();
    Ok(raw.into_iter().map(|(o, w)| (o, w / mass)).collect())
}

/// Time-convolution weights for sample `j`, with constant extension past the ends.
pub fn time_stencil(grid: &Grid, l: f64, j: usize) -> Result<Vec<(usize, f64)>> {
    let last = grid.n_t as isize - 1;
    let mut out: Vec<(usize, f64)> = Vec::new();
    for (o, w) in time_kernel(grid, l)? {
        let k = (j as isize + o).clamp(0, last) as usize;
        match out.iter_mut().find(|(i, _)| *i == k) {
            Some(e) => e.1 += w,
            None => out.push((k, w)),
        }
    }
    Ok(out)
}

/// Space-time mollification of one time sample.
pub fn mollify_at(f: &TorusField, l: f64, j: usize) -> Result<Slice> {
    let st = time_stencil(&f.grid, l, j)?;
    let terms: Vec<(f64, &Slice)> = st.iter().map(|(k, w)| (*w, &f.slices[*k])).collect();
    mollify_space(&Slice::lincomb(&terms), l)
}

pub fn mollify(f: &TorusField, l: f64) -> Result<TorusField> {
    let slices = (0..f.grid.n_t).into_par_iter().map(|j| mollify_at(f, l, j)).collect::<Result<Vec<_>>>()?;
    TorusField::from_slices(f.grid, f.rank, f.sym, slices)
}

/// Weights of the fourth-order time derivative at sample `j`, already divided by `dt`.
pub fn time_derivative_stencil(grid: &Grid, j: usize) -> Vec<(usize, f64)> {
    let nt = grid.n_t;
    if nt == 1 {
        return Vec::new();
    }
    let dt = grid.dt();
    if nt < 5 {
        let (a, b) = if j == 0 { (0, 1) } else if j == nt - 1 { (nt - 2, nt - 1) } else { (j - 1, j + 1) };
        let span = (b - a) as f64 * dt;
        return vec![(a, -1.0 / span), (b, 1.0 / span)];
    }
    let c = 1.0 / (12.0 * dt);
    let taps: Vec<(usize, f64)> = if j >= 2 && j + 2 < nt {
        vec![(j - 2, 1.0), (j - 1, -8.0), (j + 1, 8.0), (j + 2, -1.0)]
    } else if j == 0 {
        vec![(0, -25.0), (1, 48.0), (2, -36.0), (3, 16.0), (4, -3.0)]
    } else if j == 1 {
        vec![(0, -3.0), (1, -10.0), (2, 18.0), (3, -6.0), (4, 1.0)]
    } else if j == nt - 1 {
        vec![(nt - 1, 25.0), (nt - 2, -48.0), (nt - 3, 36.0), (nt - 4, -16.0), (nt - 5, 3.0)]
    } else {
        vec![(nt - 1, 3.0), (nt - 2, 10.0), (nt - 3, -18.0), (nt - 4, 6.0), (nt - 5, -1.0)]
    };
    taps.into_iter().map(|(k, w)| (k, w * c)).collect()
}

/// Time derivative of a field at sample `j`, given a per-sample accessor.
pub fn time_derivative_with<F>(grid: &Grid, j: usize, rank: Rank, n: usize, get: F) -> Result<Slice>
where
    F: Fn(usize) -> Result<Slice>,
{
    let st = time_derivative_stencil(grid, j);
    if st.is_empty() {
        return Ok(Slice::zeros(n, rank));
    }
    let slices: Vec<Slice> = st.iter().map(|(k, _)| get(*k)).collect::<Result<_>>()?;
    let terms: Vec<(f64, &Slice)> = st.iter().zip(&slices).map(|((_, w), s)| (*w, s)).collect();
    Ok(Slice::lincomb(&terms))
}

pub fn time_derivative(f: &TorusField) -> Result<TorusField> {
    let slices = (0..f.grid.n_t)
        .into_par_iter()
        .map(|j| time_derivative_with(&f.grid, j, f.rank, f.grid.n, |k| Ok(f.slices[k].clone())))
        .collect::<Result<Vec<_>>>()?;
    let sym = f.sym;
    TorusField::from_slices(f.grid, f.rank, sym, slices)
}

/// Applies a slice operator to every time sample.
pub fn map_field<F>(f: &TorusField, rank: Rank, sym: Symmetry, op: F) -> Result<TorusField>
where
    F: Fn(&Slice) -> Result<Slice> + Sync,
{
    f.map(rank, sym, op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Grid, Symmetry, TorusField};

    fn sample(n: usize, f: impl Fn(f64, f64) -> [f64; 3] + Sync) -> Slice {
        let g = Grid::stationary(n).unwrap();
        TorusField::from_fn(g, Rank::Vector, Symmetry::None, |_, x, y, out| out.copy_from_slice(&f(x, y)))
            .unwrap()
            .slices
            .remove(0)
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn round_trip_is_identity() {
        let n = 32;
        let x: Vec<f64> = (0..n * n).map(|i| ((i * 7919) % 113) as f64 / 113.0 - 0.5).collect();
        let p = plan(n);
        let back = p.inverse(p.forward(&x));
        assert!(max_diff(&x, &back) < 1e-14);
    }

    #[test]
    fn inverse_divergence_of_vertical_sine() {
        let n = 64;
        let v = sample(n, |x, _| [0.0, 0.0, x.sin()]);
        let r = inverse_divergence(&v);
        let h = crate::field::TWO_PI / n as f64;
        for i1 in 0..n {
            let expect = -(i1 as f64 * h).cos();
            assert!((r.value(tidx(0, 2), i1) - expect).abs() < 1e-13);
            assert!((r.value(tidx(2, 0), i1) - expect).abs() < 1e-13);
        }
        assert!(r.plane(tidx(0, 0)).is_none());
        let back = tensor_divergence(&r);
        assert!(max_diff(&back.comp_vec(2), &v.comp_vec(2)) < 1e-13);
    }

    #[test]
    fn curl_of_inverse_curl_recovers_field() {
        let n = 32;
        let v = sample(n, |x, y| [(2.0 * y).cos(), x.sin(), (x + y).cos()]);
        let w = inverse_curl(&v).unwrap();
        let back = curl(&w);
        for c in 0..3 {
            assert!(max_diff(&back.comp_vec(c), &v.comp_vec(c)) < 1e-12);
        }
        let bad = sample(n, |x, _| [x.sin(), 0.0, 0.0]);
        assert!(matches!(inverse_curl(&bad), Err(Error::NotDivergenceFree(_))));
    }

    #[test]
    fn time_stencil_is_exact_on_quartics() {
        let g = Grid::new(16, 17).unwrap();
        for j in 0..g.n_t {
            let d: f64 = time_derivative_stencil(&g, j).iter().map(|(k, w)| w * g.t(*k).powi(4)).sum();
            assert!((d - 4.0 * g.t(j).powi(3)).abs() < 1e-10, "j = {j}");
        }
    }

    #[test]
    fn mollifier_has_unit_mass_and_rejects_tiny_scales() {
        let k = space_kernel_symbol(64, 0.3).unwrap();
        assert!((k[0] - 1.0).abs() < 1e-14);
        assert!(matches!(space_kernel_symbol(64, 0.05), Err(Error::KernelUnderResolved { .. })));
        let g = Grid::new(16, 33).unwrap();
        let w: f64 = time_kernel(&g, 0.2).unwrap().iter().map(|(_, w)| w).sum();
        assert!((w - 1.0).abs() < 1e-15);
    }
}
