//! Norms of sampled fields.
//!
//! Tensor and vector norms are entrywise: `|f|_p^p = sum_c integral |f_c|^p` over the
//! unnormalized measure of `[0, 2pi)^2`. Sobolev seminorms are homogeneous and built from
//! the reduced wavenumber of [`crate::spectral`]. Time aggregation defaults to the supremum
//! over samples.

use rayon::prelude::*;
use realfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{pairwise_sum, Slice, TorusField, TWO_PI};
use crate::spectral::{self, plan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NormKind {
    /// Entrywise `L^p`, `1 <= p < inf`.
    Lp(f64),
    /// Entrywise supremum.
    Sup,
    /// `sum_{m <= N} max_{|a| = m} |d^a f|_inf` in space.
    C(u32),
    /// Homogeneous `|| |grad|^s f ||_{L^2}`.
    H(f64),
    /// Homogeneous `|| |grad|^s f ||_{L^p}`.
    W { s: f64, p: f64 },
}

impl NormKind {
    pub fn label(&self) -> String {
        match self {
            NormKind::Lp(p) => format!("L{p}"),
            NormKind::Sup => "Linf".into(),
            NormKind::C(k) => format!("C{k}"),
            NormKind::H(s) => format!("H{s}"),
            NormKind::W { s, p } => format!("W{s},{p}"),
        }
    }
}

/// Spatial quadrature for integral norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quadrature {
    Rectangle,
    /// Rectangle rule on the trigonometric interpolant sampled `r` times finer per axis.
    Refined(usize),
}

/// Trigonometric interpolation of a plane onto an `(n r) x (n r)` grid.
pub fn refine(plane: &[f64], n: usize, r: usize) -> Vec<f64> {
    if r == 1 {
        return plane.to_vec();
    }
    let coarse = plan(n);
    let m = n * r;
    let fine = plan(m);
    let spec = coarse.forward(plane);
    let mh = m / 2 + 1;
    let mut out = vec![Complex64::new(0.0, 0.0); m * mh];
    let scale = (r * r) as f64;
    let half = n / 2;
    for k1 in 0..=half {
        for row in 0..n {
            let k2 = if row <= half { row as i64 } else { row as i64 - n as i64 };
            let mut c = spec[k1 * n + row] * scale;
            if k1 == half {
                c *= 0.5;
            }
            let targets: Vec<i64> = if row == half {
                c *= 0.5;
                vec![half as i64, -(half as i64)]
            } else {
                vec![k2]
            };
            for t in targets {
                let fr = t.rem_euclid(m as i64) as usize;
                out[k1 * m + fr] += c;
            }
        }
    }
    debug_assert_eq!(out.len(), m * mh);
    fine.inverse(out)
}

fn lp_plane(values: &[f64], p: f64, cell: f64) -> f64 {
    let powered: Vec<f64> = values.iter().map(|v| v.abs().powf(p)).collect();
    pairwise_sum(&powered) * cell
}

/// Entrywise `L^p` of one time sample.
pub fn lp_slice(s: &Slice, p: f64, quad: Quadrature) -> f64 {
    let n = s.n();
    let mut acc = Vec::new();
    for c in 0..s.rank().components() {
        if let Some(pl) = s.comp(c) {
            acc.push(match quad {
                Quadrature::Rectangle => lp_plane(pl, p, (TWO_PI / n as f64).powi(2)),
                Quadrature::Refined(r) => lp_plane(&refine(pl, n, r), p, (TWO_PI / (n * r) as f64).powi(2)),
            });
        }
    }
    pairwise_sum(&acc).powf(1.0 / p)
}

fn partial(s: &Slice, a1: u32, a2: u32) -> Slice {
    let p = plan(s.n());
    let h = spectral::fwd(s);
    let comps = h
        .comps
        .iter()
        .map(|c| {
            c.as_ref().map(|c| {
                let mut v = c.as_ref().clone();
                for _ in 0..a1 {
                    v = spectral::d_hat(&v, 0, &p);
                }
                for _ in 0..a2 {
                    v = spectral::d_hat(&v, 1, &p);
                }
                std::sync::Arc::new(v)
            })
        })
        .collect();
    spectral::inv(&spectral::SpecSlice { n: s.n(), rank: s.rank(), comps })
}

/// `|| |grad|^s f ||_{L^2}` through Parseval.
fn h_slice(s: &Slice, sobolev: f64) -> f64 {
    let n = s.n();
    let p = plan(n);
    let h = spectral::fwd(s);
    let (xs, w) = (p.xi_sq(), p.weight());
    let mut acc = Vec::new();
    for c in h.comps.iter().flatten() {
        let terms: Vec<f64> = c
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let m = if sobolev == 0.0 { 1.0 } else if xs[i] == 0.0 { 0.0 } else { xs[i].powf(sobolev) };
                w[i] * m * z.norm_sqr()
            })
            .collect();
        acc.push(pairwise_sum(&terms));
    }
    let nn = (n * n) as f64;
    (pairwise_sum(&acc) * TWO_PI * TWO_PI / (nn * nn)).sqrt()
}

/// `L^2` norm of a field given by its spectrum (Parseval).
pub fn spec_l2(h: &spectral::SpecSlice) -> f64 {
    let n = h.n;
    let w = plan(n).weight().to_vec();
    let acc: Vec<f64> = h
        .comps
        .iter()
        .flatten()
        .map(|c| pairwise_sum(&c.iter().zip(&w).map(|(z, w)| w * z.norm_sqr()).collect::<Vec<_>>()))
        .collect();
    let nn = (n * n) as f64;
    (pairwise_sum(&acc) * TWO_PI * TWO_PI / (nn * nn)).sqrt()
}

pub fn slice_norm(s: &Slice, kind: NormKind, quad: Quadrature) -> Result<f64> {
    Ok(match kind {
        NormKind::Lp(p) if p.is_infinite() => s.max_abs(),
        NormKind::Lp(p) if p >= 1.0 => lp_slice(s, p, quad),
        NormKind::Lp(p) => return Err(Error::NormKind(format!("L^{p}"))),
        NormKind::Sup => s.max_abs(),
        NormKind::C(order) => {
            let mut total = 0.0;
            for m in 0..=order {
                let best = (0..=m).map(|a1| partial(s, a1, m - a1).max_abs()).fold(0.0, f64::max);
                total += best;
            }
            total
        }
        NormKind::H(sob) => h_slice(s, sob),
        NormKind::W { s: sob, p } => {
            let g = spectral::inv(&spectral::frac_lap_hat(&spectral::fwd(s), sob / 2.0));
            slice_norm(&g, NormKind::Lp(p), quad)?
        }
    })
}

/// Per-sample spatial norms.
pub fn norm_series(f: &TorusField, kind: NormKind, quad: Quadrature) -> Result<Vec<f64>> {
    f.slices.par_iter().map(|s| slice_norm(s, kind, quad)).collect()
}

/// Supremum over time of the spatial norm.
pub fn norm_with(f: &TorusField, kind: NormKind, quad: Quadrature) -> Result<f64> {
    Ok(norm_series(f, kind, quad)?.into_iter().fold(0.0, f64::max))
}

pub fn norm(f: &TorusField, kind: NormKind) -> Result<f64> {
    norm_with(f, kind, Quadrature::Rectangle)
}

/// Trapezoid weights on the time grid.
pub fn time_weights(n_t: usize) -> Vec<f64> {
    if n_t == 1 {
        return vec![1.0];
    }
    let dt = 1.0 / (n_t - 1) as f64;
    (0..n_t).map(|j| if j == 0 || j == n_t - 1 { dt / 2.0 } else { dt }).collect()
}

/// `( integral_0^1 |f(t)|_{L^2}^2 dt )^{1/2}`.
pub fn l2t_l2x(f: &TorusField) -> Result<f64> {
    let series = norm_series(f, NormKind::Lp(2.0), Quadrature::Rectangle)?;
    Ok(l2_in_time(&series))
}

pub fn l2_in_time(series: &[f64]) -> f64 {
    let w = time_weights(series.len());
    let terms: Vec<f64> = series.iter().zip(&w).map(|(v, w)| v * v * w).collect();
    pairwise_sum(&terms).sqrt()
}

/// Space-time `C^N`: `sum_{m <= N} max_{a + |b| = m} sup |d_t^a d_x^b f|`.
pub fn ctx_norm(f: &TorusField, order: u32) -> Result<f64> {
    let mut dts = vec![f.clone()];
    for a in 1..=order {
        let prev = &dts[a as usize - 1];
        dts.push(spectral::time_derivative(prev)?);
    }
    let mut total = 0.0;
    for m in 0..=order {
        let mut best = 0.0f64;
        for a in 0..=m {
            let g = &dts[a as usize];
            let spatial = m - a;
            for b1 in 0..=spatial {
                let v = g.slices.par_iter().map(|s| partial(s, b1, spatial - b1).max_abs()).reduce(|| 0.0, f64::max);
                best = best.max(v);
            }
        }
        total += best;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Grid, Rank, Symmetry};

    fn scalar(n: usize, f: impl Fn(f64, f64) -> f64 + Sync) -> TorusField {
        TorusField::from_fn(Grid::stationary(n).unwrap(), Rank::Scalar, Symmetry::None, |_, x, y, o| o[0] = f(x, y))
            .unwrap()
    }

    #[test]
    fn lp_of_sine_matches_closed_form() {
        let f = scalar(64, |x, _| x.sin());
        // integral over the square of sin^2 is 2 pi^2; of |sin| is 8 pi.
        let l2 = norm(&f, NormKind::Lp(2.0)).unwrap();
        assert!((l2 - (2.0 * std::f64::consts::PI.powi(2)).sqrt()).abs() < 1e-12);
        let l1 = norm_with(&f, NormKind::Lp(1.0), Quadrature::Refined(16)).unwrap();
        assert!((l1 - 8.0 * std::f64::consts::PI).abs() / (8.0 * std::f64::consts::PI) < 1e-4);
    }

    #[test]
    fn refinement_preserves_trig_polynomials() {
        let n = 16;
        let f = scalar(n, |x, y| (3.0 * x).cos() * (2.0 * y).sin() + (8.0 * x).cos());
        let fine = refine(f.slice(0).comp(0).unwrap(), n, 4);
        let m = 4 * n;
        let h = TWO_PI / m as f64;
        for i2 in 0..m {
            for i1 in 0..m {
                let (x, y) = (i1 as f64 * h, i2 as f64 * h);
                let exact = (3.0 * x).cos() * (2.0 * y).sin() + (8.0 * x).cos();
                assert!((fine[i1 + m * i2] - exact).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn h_seminorm_matches_parseval() {
        // |grad (cos 2x sin 3y)|_2^2 = 13 * pi^2.
        let f = scalar(32, |x, y| (2.0 * x).cos() * (3.0 * y).sin());
        let h1 = norm(&f, NormKind::H(1.0)).unwrap();
        assert!((h1 * h1 - 13.0 * std::f64::consts::PI.powi(2)).abs() < 1e-10);
        let c1 = norm(&f, NormKind::C(1)).unwrap();
        assert!((c1 - 4.0).abs() < 1e-12);
    }
}
