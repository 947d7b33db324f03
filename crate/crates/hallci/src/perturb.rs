//! Amplitudes, time cutoffs and the assembled perturbations.
//!
//! Amplitude coefficients are computed one time sample at a time so the pipeline can
//! stream; the field-level wrappers collect them over the whole grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::MikadoBlock;
use crate::error::{Error, Result};
use crate::field::{plane_or_none, tidx, Grid, Plane, Rank, Slice, Symmetry, TorusField, SYM_ENTRIES, TWO_PI};
use crate::geometry::{smoothstep, Amplitude, Family, GammaSolver, Sym3, IDENTITY};
use crate::norms::{lp_slice, Quadrature};
use crate::spectral;

/// Relative level below which a time sample counts as outside the support.
pub const SUPPORT_THRESHOLD: f64 = 1e-12;

/// Closed time intervals where `series` exceeds [`SUPPORT_THRESHOLD`] times its maximum.
pub fn support_intervals(series: &[f64], grid: &Grid) -> Vec<(f64, f64)> {
    let max = series.iter().fold(0.0f64, |m, v| m.max(*v));
    if max == 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (j, v) in series.iter().enumerate() {
        let on = *v > SUPPORT_THRESHOLD * max;
        match (on, start) {
            (true, None) => start = Some(j),
            (false, Some(a)) => {
                out.push((grid.t(a), grid.t(j - 1)));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(a) = start {
        out.push((grid.t(a), grid.t(series.len() - 1)));
    }
    out
}

/// Equal to one on a union of intervals and zero beyond a collar of width `l`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemporalCutoff {
    pub intervals: Vec<(f64, f64)>,
    pub l: f64,
}

impl TemporalCutoff {
    pub fn new(intervals: Vec<(f64, f64)>, l: f64, grid: &Grid) -> Result<Self> {
        if grid.n_t > 1 && !(l > grid.dt()) {
            return Err(Error::KernelUnderResolved { l, h: grid.dt() });
        }
        Ok(TemporalCutoff { intervals, l })
    }

    pub fn union(&self, other: &TemporalCutoff) -> TemporalCutoff {
        let mut intervals = self.intervals.clone();
        intervals.extend(other.intervals.iter().copied());
        TemporalCutoff { intervals, l: self.l }
    }

    pub fn value(&self, t: f64) -> f64 {
        let dist = self
            .intervals
            .iter()
            .map(|&(a, b)| if t < a { a - t } else if t > b { t - b } else { 0.0 })
            .fold(f64::INFINITY, f64::min);
        if dist == 0.0 {
            1.0
        } else if dist >= self.l {
            0.0
        } else {
            smoothstep(1.0 - dist / self.l)
        }
    }
}

/// Coefficients of one family at one time sample.
#[derive(Debug, Clone)]
pub struct CoefficientSlice {
    pub family: Family,
    pub theta: f64,
    pub rho: Option<Plane>,
    /// One amplitude per direction; `None` when identically zero.
    pub a: Vec<Option<Plane>>,
}

impl CoefficientSlice {
    pub fn zeros(family: Family) -> Self {
        CoefficientSlice { family, theta: 0.0, rho: None, a: vec![None; 6] }
    }

    pub fn is_zero(&self) -> bool {
        self.a.iter().all(|a| a.is_none())
    }
}

fn sym_at(s: &Slice, p: usize) -> Sym3 {
    SYM_ENTRIES.map(|(i, j)| s.value(tidx(i, j), p))
}

/// Amplitudes `theta sqrt(rho) gamma_k(Id - stress / rho)` with `rho = chi(|stress|)`.
pub fn coefficients_slice(
    stress: &Slice,
    theta: f64,
    amplitude: &Amplitude,
    solver: &GammaSolver,
) -> Result<CoefficientSlice> {
    let family = solver.family;
    if theta == 0.0 {
        return Ok(CoefficientSlice { family, theta, rho: None, a: vec![None; 6] });
    }
    if amplitude.r0 == 0.0 {
        if !stress.is_zero() {
            return Err(Error::ZeroAmplitude);
        }
        return Ok(CoefficientSlice { family, theta, rho: None, a: vec![None; 6] });
    }
    let n = stress.n();
    let np = n * n;
    let rows: Vec<Result<(f64, [f64; 6])>> = (0..np)
        .into_par_iter()
        .map(|p| {
            let r = sym_at(stress, p);
            let rho = amplitude.chi(crate::geometry::frobenius(&r));
            let m: Sym3 = std::array::from_fn(|i| IDENTITY[i] - r[i] / rho);
            let g = solver.gamma(&m, amplitude.delta)?;
            let s = theta * rho.sqrt();
            Ok((rho, g.map(|v| s * v)))
        })
        .collect();
    let mut rho = vec![0.0; np];
    let mut a = vec![vec![0.0; np]; 6];
    for (p, r) in rows.into_iter().enumerate() {
        let (rv, av) = r?;
        rho[p] = rv;
        for k in 0..6 {
            a[k][p] = av[k];
        }
    }
    Ok(CoefficientSlice { family, theta, rho: plane_or_none(rho), a: a.into_iter().map(plane_or_none).collect() })
}

/// `sum_k a_k^2 k (x) k`.
pub fn interaction_slice(c: &CoefficientSlice, solver: &GammaSolver, n: usize) -> Slice {
    if c.is_zero() {
        return Slice::zeros(n, Rank::Tensor);
    }
    let six = SYM_ENTRIES.map(|(i, j)| {
        let mut out = vec![0.0; n * n];
        for (d, a) in solver.dirs.iter().zip(&c.a) {
            let w = d.k[i] * d.k[j];
            if w == 0.0 {
                continue;
            }
            if let Some(a) = a {
                out.iter_mut().zip(a.iter()).for_each(|(o, v)| *o += w * v * v);
            }
        }
        plane_or_none(out)
    });
    Slice::symmetric(n, six)
}

/// Perturbation of one family at one time sample.
#[derive(Debug, Clone)]
pub struct PerturbationSlice {
    /// `sum_k a_k W_k`.
    pub principal: Slice,
    /// `total - principal`.
    pub corrector: Slice,
    /// Row divergence of `potential`.
    pub total: Slice,
    /// `sum_k a_k Omega_k`.
    pub potential: Slice,
}

pub fn assemble_slice(c: &CoefficientSlice, blocks: &[MikadoBlock], n: usize) -> PerturbationSlice {
    if c.is_zero() {
        let z = Slice::zeros(n, Rank::Vector);
        return PerturbationSlice {
            principal: z.clone(),
            corrector: z.clone(),
            total: z,
            potential: Slice::zeros(n, Rank::Tensor),
        };
    }
    let mut potential_terms = Vec::new();
    let mut principal_terms = Vec::new();
    for (b, a) in blocks.iter().zip(&c.a) {
        if let Some(a) = a {
            potential_terms.push(b.omega_weighted(Some(a)));
            principal_terms.push(b.w().mul_plane(a));
        }
    }
    let potential = Slice::lincomb(&potential_terms.iter().map(|s| (1.0, s)).collect::<Vec<_>>());
    let principal = Slice::lincomb(&principal_terms.iter().map(|s| (1.0, s)).collect::<Vec<_>>());
    let total = spectral::tensor_divergence(&potential);
    let corrector = total.sub(&principal);
    PerturbationSlice { principal, corrector, total, potential }
}

/// The product-rule corrector `sum_k Omega_k grad a_k`, with `(Omega g)_i = Omega_ij g_j`.
pub fn product_rule_corrector(c: &CoefficientSlice, blocks: &[MikadoBlock], n: usize) -> Slice {
    let mut out = [vec![0.0; n * n], vec![0.0; n * n], vec![0.0; n * n]];
    for (b, a) in blocks.iter().zip(&c.a) {
        let Some(a) = a else { continue };
        let grad = spectral::gradient(&Slice::from_planes(n, Rank::Scalar, vec![Some(a.clone())]));
        let omega = b.omega();
        for (i, o) in out.iter_mut().enumerate() {
            for j in 0..2 {
                if let (Some(om), Some(g)) = (omega.comp(tidx(i, j)), grad.comp(j)) {
                    o.iter_mut().zip(om).zip(g).for_each(|((o, x), y)| *o += x * y);
                }
            }
        }
    }
    let [x, y, z] = out;
    Slice::vector(n, [plane_or_none(x), plane_or_none(y), plane_or_none(z)])
}

/// Coefficients of one family over every time sample.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub family: Family,
    pub cutoff: TemporalCutoff,
    pub amplitude: Amplitude,
    pub slices: Vec<CoefficientSlice>,
}

impl CoefficientSet {
    /// Amplitude of direction `k` as a field.
    pub fn amplitude_field(&self, grid: Grid, k: usize) -> TorusField {
        let slices = self
            .slices
            .iter()
            .map(|c| Slice::from_planes(grid.n, Rank::Scalar, vec![c.a[k].clone()]))
            .collect();
        TorusField { grid, rank: Rank::Scalar, sym: Symmetry::None, slices }
    }
}

fn l1_series(f: &TorusField) -> Vec<f64> {
    f.slices.par_iter().map(|s| lp_slice(s, 1.0, Quadrature::Rectangle)).collect()
}

/// Magnetic amplitudes from the mollified magnetic stress.
pub fn magnetic_coefficients(r_b: &TorusField, delta: f64, r0: f64, l: f64) -> Result<CoefficientSet> {
    let grid = r_b.grid;
    let cutoff = TemporalCutoff::new(support_intervals(&l1_series(r_b), &grid), l, &grid)?;
    coefficient_set(r_b, Family::Magnetic, cutoff, Amplitude::new(r0, delta)?)
}

/// Velocity amplitudes from the mollified Reynolds stress minus the magnetic interaction.
pub fn velocity_coefficients(
    r_u: &TorusField,
    magnetic: &CoefficientSet,
    delta: f64,
    r0: f64,
    l: f64,
) -> Result<CoefficientSet> {
    let grid = r_u.grid;
    let solver_b = GammaSolver::new(Family::Magnetic);
    let g_b: Vec<Slice> = magnetic.slices.iter().map(|c| interaction_slice(c, &solver_b, grid.n)).collect();
    let g_field = TorusField { grid, rank: Rank::Tensor, sym: Symmetry::Symmetric, slices: g_b };
    let mut intervals = support_intervals(&l1_series(r_u), &grid);
    intervals.extend(support_intervals(&l1_series(&g_field), &grid));
    let cutoff = TemporalCutoff::new(intervals, l, &grid)?;
    let diff = r_u.sub(&g_field)?;
    coefficient_set(&diff, Family::Velocity, cutoff, Amplitude::new(r0, delta)?)
}

fn coefficient_set(stress: &TorusField, family: Family, cutoff: TemporalCutoff, amp: Amplitude) -> Result<CoefficientSet> {
    let solver = GammaSolver::new(family);
    let slices = (0..stress.grid.n_t)
        .map(|j| coefficients_slice(&stress.slices[j], cutoff.value(stress.grid.t(j)), &amp, &solver))
        .collect::<Result<Vec<_>>>()?;
    Ok(CoefficientSet { family, cutoff, amplitude: amp, slices })
}

/// Perturbation fields of one family over every time sample.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub principal: TorusField,
    pub corrector: TorusField,
    pub total: TorusField,
    pub potential: TorusField,
}

pub fn assemble(c: &CoefficientSet, blocks: &[MikadoBlock], grid: Grid) -> Result<Perturbation> {
    let parts: Vec<PerturbationSlice> = c.slices.iter().map(|s| assemble_slice(s, blocks, grid.n)).collect();
    let collect = |f: fn(&PerturbationSlice) -> &Slice, rank, sym| {
        TorusField::from_slices(grid, rank, sym, parts.iter().map(|p| f(p).clone()).collect())
    };
    Ok(Perturbation {
        principal: collect(|p| &p.principal, Rank::Vector, Symmetry::None)?,
        corrector: collect(|p| &p.corrector, Rank::Vector, Symmetry::None)?,
        total: collect(|p| &p.total, Rank::Vector, Symmetry::None)?,
        potential: collect(|p| &p.potential, Rank::Tensor, Symmetry::Skew)?,
    })
}

/// `| |f g_sigma|_p - |f|_p |g_sigma|_p / |T^2|^{1/p} |` over a range of `sigma`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecorrelationReport {
    pub p: f64,
    pub sigmas: Vec<i64>,
    pub differences: Vec<f64>,
    /// Noise floor under which a difference counts as zero.
    pub floor: f64,
    /// Least-squares slope of `log difference` against `log sigma`; `None` when every
    /// difference is below the floor (exact decorrelation).
    pub exponent: Option<f64>,
}

pub fn decorrelation_check<G>(f: &Slice, g: G, sigmas: &[i64], p: f64) -> Result<DecorrelationReport>
where
    G: Fn(f64) -> f64 + Sync,
{
    if sigmas.len() < 3 {
        return Err(Error::TooFewSigmas(sigmas.len()));
    }
    let n = f.n();
    let h = TWO_PI / n as f64;
    let area = TWO_PI * TWO_PI;
    let f_norm = lp_slice(f, p, Quadrature::Rectangle);
    let mut differences = Vec::new();
    let mut scale = 0.0f64;
    for &sigma in sigmas {
        let gs: Vec<f64> = (0..n * n).map(|q| g(sigma as f64 * (q % n) as f64 * h)).collect();
        let g_slice = Slice::scalar(n, gs.clone());
        let prod = f.mul_plane(&gs);
        let g_norm = lp_slice(&g_slice, p, Quadrature::Rectangle);
        let reference = f_norm * g_norm / area.powf(1.0 / p);
        scale = scale.max(reference);
        differences.push((lp_slice(&prod, p, Quadrature::Rectangle) - reference).abs());
    }
    let floor = 1e-12 * scale;
    let pts: Vec<(f64, f64)> = sigmas
        .iter()
        .zip(&differences)
        .filter(|(_, d)| **d > floor)
        .map(|(s, d)| ((*s as f64).ln(), d.ln()))
        .collect();
    let exponent = if pts.len() < 2 { None } else { Some(slope(&pts)) };
    Ok(DecorrelationReport { p, sigmas: sigmas.to_vec(), differences, floor, exponent })
}

/// Least-squares slope through `(x, y)` points.
pub fn slope(pts: &[(f64, f64)]) -> f64 {
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{build_blocks, ResolutionPolicy};
    use crate::geometry::ScalePolicy;
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn zero_stress_gives_identity_weights() {
        let n = 16;
        let solver = GammaSolver::new(Family::Magnetic);
        let amp = Amplitude::new(1.0, 0.3).unwrap();
        let c = coefficients_slice(&Slice::zeros(n, Rank::Tensor), 1.0, &amp, &solver).unwrap();
        // rho = 2 r0 / delta and gamma_k^2 = 1/2.
        let expect = (2.0 / 0.3f64 * 0.5).sqrt();
        for a in &c.a {
            assert!((a.as_ref().unwrap()[5] - expect).abs() < 1e-14);
        }
        let g = interaction_slice(&c, &solver, n);
        assert!((g.value(0, 3) - 2.0 / 0.3).abs() < 1e-12);
        assert!(g.value(1, 3).abs() < 1e-14);
    }

    #[test]
    fn zero_amplitude_is_inconsistent_with_nonzero_stress() {
        let n = 16;
        let solver = GammaSolver::new(Family::Velocity);
        let amp = Amplitude::new(0.0, 0.3).unwrap();
        let z = coefficients_slice(&Slice::zeros(n, Rank::Tensor), 1.0, &amp, &solver).unwrap();
        assert!(z.is_zero());
        let mut six: [Option<Plane>; 6] = Default::default();
        six[3] = Some(Arc::new(vec![1.0; n * n]));
        let r = Slice::symmetric(n, six);
        assert!(matches!(coefficients_slice(&r, 1.0, &amp, &solver), Err(Error::ZeroAmplitude)));
    }

    #[test]
    fn cutoff_ramps_over_one_collar() {
        let g = Grid::new(16, 65).unwrap();
        let c = TemporalCutoff::new(vec![(0.25, 0.5)], 0.1, &g).unwrap();
        assert_eq!(c.value(0.3), 1.0);
        assert_eq!(c.value(0.1), 0.0);
        assert_eq!(c.value(0.7), 0.0);
        assert!((c.value(0.55) - 0.5).abs() < 1e-12);
        assert!(TemporalCutoff::new(vec![], 0.01, &g).is_err());
    }

    #[test]
    fn decorrelation_needs_three_sigmas() {
        let f = Slice::scalar(16, vec![1.0; 256]);
        assert!(matches!(decorrelation_check(&f, |x| x.sin(), &[2, 3], 2.0), Err(Error::TooFewSigmas(2))));
        // A constant f decorrelates exactly.
        let r = decorrelation_check(&f, |x| x.sin(), &[2, 3, 4], 2.0).unwrap();
        assert!(r.exponent.is_none());
    }

    #[test]
    fn perturbation_splits_into_principal_and_corrector() {
        let n = 64;
        let set = build_blocks(n, 8.0, 1, ScalePolicy::PerFamily, ResolutionPolicy::Warn).unwrap();
        let solver = GammaSolver::new(Family::Magnetic);
        let amp = Amplitude::new(1.0, 0.3).unwrap();
        let c = coefficients_slice(&Slice::zeros(n, Rank::Tensor), 1.0, &amp, &solver).unwrap();
        let p = assemble_slice(&c, &set.magnetic, n);
        let back = p.principal.add(&p.corrector);
        for comp in 0..3 {
            for q in 0..n * n {
                assert!((back.value(comp, q) - p.total.value(comp, q)).abs() < 1e-12);
            }
        }
        let div = spectral::divergence(&p.total);
        assert!(div.max_abs() < 1e-10 * p.total.max_abs().max(1.0));
    }

    proptest! {
        #[test]
        fn cutoff_is_bounded_and_one_on_support(t in 0.0f64..1.0, a in 0.0f64..0.5, w in 0.0f64..0.5) {
            let g = Grid::new(16, 65).unwrap();
            let c = TemporalCutoff::new(vec![(a, a + w)], 0.05, &g).unwrap();
            let v = c.value(t);
            prop_assert!((0.0..=1.0).contains(&v));
            if t >= a && t <= a + w {
                prop_assert_eq!(v, 1.0);
            }
            if t < a - 0.05 || t > a + w + 0.05 {
                prop_assert_eq!(v, 0.0);
            }
        }
    }
}
