//! Stresses of the relaxed system and the bookkeeping around them.
//!
//! The relaxed equations are
//!
//! ```text
//! d_t u + nu1 (-Lap)^a1 u + div(u (x) u - B (x) B) + grad p = div R_u
//! d_t B + nu2 (-Lap)^a2 B + div(B (x) u - u (x) B) + curl div(B (x) B) = curl div R_B
//! ```
//!
//! with the row divergence `(div M)_i = d_j M_ij`. Pressure never appears: the velocity
//! equation is always checked under the Leray projection.
//!
//! Everything here works on one time sample at a time. Time derivatives reach neighbouring
//! samples through a [`Sampler`], so callers can stream fields they never hold in full.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::MikadoBlock;
use crate::error::{Error, Result};
use crate::field::{pairwise_sum, tidx, Grid, Plane, Rank, Sampler, Slice, Symmetry, TorusField, SYM_ENTRIES};
use crate::norms::{self, l2_in_time, lp_slice, spec_l2, time_weights, Quadrature};
use crate::perturb::{support_intervals, CoefficientSlice, PerturbationSlice};
use crate::spectral::{self, fwd, inv, SpecSlice};

/// Viscosities and dissipation orders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdeParams {
    pub nu1: f64,
    pub nu2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl PdeParams {
    /// Requires `alpha1` in `(0, 3/4)`, `alpha2` in `(0, 5/4)` and non-negative viscosities.
    pub fn new(nu1: f64, nu2: f64, alpha1: f64, alpha2: f64) -> Result<Self> {
        if !(alpha1 > 0.0 && alpha1 < 0.75) {
            return Err(Error::Constraint(format!("0 < alpha1 < 3/4 (alpha1 = {alpha1})")));
        }
        if !(alpha2 > 0.0 && alpha2 < 1.25) {
            return Err(Error::Constraint(format!("0 < alpha2 < 5/4 (alpha2 = {alpha2})")));
        }
        if !(nu1 >= 0.0 && nu2 >= 0.0) {
            return Err(Error::Constraint(format!("nu >= 0 (nu1 = {nu1}, nu2 = {nu2})")));
        }
        Ok(PdeParams { nu1, nu2, alpha1, alpha2 })
    }
}

impl Default for PdeParams {
    fn default() -> Self {
        PdeParams { nu1: 1.0, nu2: 1.0, alpha1: 0.5, alpha2: 1.0 }
    }
}

/// The four named parts of a new stress.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Part {
    Lin,
    Cor,
    Osc,
    Com,
}

impl Part {
    pub fn all() -> [Part; 4] {
        [Part::Lin, Part::Cor, Part::Osc, Part::Com]
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Lin => "lin",
            Part::Cor => "cor",
            Part::Osc => "osc",
            Part::Com => "com",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Initial,
    Mollified,
    Iterated,
    Component(Part),
}

/// Reynolds and magnetic stress over a time grid.
#[derive(Debug, Clone)]
pub struct StressPair {
    pub r_u: TorusField,
    pub r_b: TorusField,
    pub support: Vec<(f64, f64)>,
    pub provenance: Provenance,
}

/// Relative tolerance for symmetry and tracelessness of stored stresses.
pub const STRESS_SYMMETRY_TOL: f64 = 1e-12;

impl StressPair {
    pub fn new(r_u: TorusField, r_b: TorusField, provenance: Provenance) -> Result<Self> {
        if r_u.grid != r_b.grid {
            return Err(Error::GridMismatch("stress pair".into()));
        }
        for r in [&r_u, &r_b] {
            let tol = STRESS_SYMMETRY_TOL * r.max_abs().max(f64::MIN_POSITIVE);
            for s in &r.slices {
                s.check_symmetry(Symmetry::SymmetricTraceless, tol)?;
            }
        }
        let series: Vec<f64> = r_u
            .slices
            .par_iter()
            .zip(&r_b.slices)
            .map(|(a, b)| lp_slice(a, 1.0, Quadrature::Rectangle) + lp_slice(b, 1.0, Quadrature::Rectangle))
            .collect();
        let support = support_intervals(&series, &r_u.grid);
        Ok(StressPair { r_u, r_b, support, provenance })
    }
}

// Composite operators.

/// `s Id` for a scalar plane.
pub fn isotropic(n: usize, s: Option<&Plane>) -> Slice {
    let d = s.cloned();
    Slice::symmetric(n, [d.clone(), d.clone(), d, None, None, None])
}

/// Symmetric part with the trace removed; used to clean roundoff from assembled stresses.
pub fn sym_traceless(m: &Slice) -> Slice {
    let six = SYM_ENTRIES.map(|(i, j)| {
        if i == j {
            m.plane(tidx(i, i)).cloned()
        } else {
            match (m.comp(tidx(i, j)), m.comp(tidx(j, i))) {
                (Some(a), Some(b)) => crate::field::plane_or_none(a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()),
                (Some(a), None) | (None, Some(a)) => crate::field::plane_or_none(a.iter().map(|x| 0.5 * x).collect()),
                (None, None) => None,
            }
        }
    });
    Slice::symmetric(m.n(), six).traceless()
}

fn r_of_hat(v: &SpecSlice) -> Slice {
    inv(&spectral::r_hat(v))
}

/// `R v`.
pub fn r_vec(v: &Slice) -> Slice {
    r_of_hat(&fwd(v))
}

/// `R P_H div M`.
pub fn r_ph_div(m: &Slice) -> Slice {
    r_of_hat(&spectral::helmholtz_hat(&spectral::tdiv_hat(&fwd(m))))
}

/// `R div M`.
pub fn r_div(m: &Slice) -> Slice {
    r_of_hat(&spectral::tdiv_hat(&fwd(m)))
}

/// `R curl^{-1} v`, rejecting inputs that are not divergence-free.
pub fn r_curl_inv(v: &Slice) -> Result<Slice> {
    Ok(r_of_hat(&spectral::curl_inv_hat(&fwd(v))?))
}

/// `R curl^{-1} div M`.
pub fn r_curl_inv_div(m: &Slice) -> Result<Slice> {
    Ok(r_of_hat(&spectral::curl_inv_hat(&spectral::tdiv_hat(&fwd(m)))?))
}

/// Traceless outer product `a (x) a - |a|^2/3 Id`.
pub fn traceless_square(a: &Slice) -> Slice {
    Slice::self_outer(a).traceless()
}

/// `max |R P_H div R_u - R_u| / max |R_u|`.
pub fn idempotence_defect(r_u: &Slice) -> f64 {
    let scale = r_u.max_abs();
    if scale == 0.0 {
        return 0.0;
    }
    r_ph_div(r_u).sub(r_u).max_abs() / scale
}

/// Largest deviation from symmetric-traceless form, relative to the largest entry.
pub fn sym_traceless_defect(m: &Slice) -> f64 {
    let scale = m.max_abs();
    if scale == 0.0 {
        return 0.0;
    }
    let mut worst = 0.0f64;
    let n2 = m.n() * m.n();
    for p in 0..n2 {
        for i in 0..3 {
            for j in 0..i {
                worst = worst.max((m.value(tidx(i, j), p) - m.value(tidx(j, i), p)).abs());
            }
        }
        worst = worst.max((m.value(0, p) + m.value(4, p) + m.value(8, p)).abs());
    }
    worst / scale
}

fn check_solenoidal(v: &Slice, what: &'static str) -> Result<()> {
    let rel = spectral::relative_divergence_hat(&fwd(v));
    if rel > spectral::DIVERGENCE_TOLERANCE {
        return Err(Error::Stage { stage: what, source: Box::new(Error::NotDivergenceFree(rel)) });
    }
    let scale = v.max_abs().max(1.0);
    for c in 0..3 {
        let m = v.mean(c);
        if m.abs() > 1e-12 * scale {
            return Err(Error::Stage { stage: what, source: Box::new(Error::NotMeanFree(m)) });
        }
    }
    Ok(())
}

// Initial stresses.

/// Stresses and pressure of one time sample of the initial state.
#[derive(Debug, Clone)]
pub struct InitialSlice {
    pub r_u: Slice,
    pub r_b: Slice,
    pub pressure: Slice,
}

/// Initial stresses at sample `j`:
/// `R_u = R(d_t u + nu1 (-Lap)^a1 u) + u o u - B o B`,
/// `R_B = R curl^{-1}(d_t B + nu2 (-Lap)^a2 B + div(B (x) u - u (x) B)) + B o B`,
/// `p = (|u|^2 - |B|^2) / 3`.
pub fn initial_stresses_at(grid: &Grid, j: usize, u: Sampler, b: Sampler, pde: &PdeParams) -> Result<InitialSlice> {
    let n = grid.n;
    let (u0, b0) = (u(j)?, b(j)?);
    check_solenoidal(&u0, "u")?;
    check_solenoidal(&b0, "B")?;
    let dt_u = spectral::time_derivative_with(grid, j, Rank::Vector, n, u)?;
    let dt_b = spectral::time_derivative_with(grid, j, Rank::Vector, n, b)?;

    let u_hat = fwd(&u0);
    let lin_u = SpecSlice::lincomb(&[(1.0, &fwd(&dt_u)), (pde.nu1, &spectral::frac_lap_hat(&u_hat, pde.alpha1))]);
    let r_u = r_of_hat(&lin_u).add(&traceless_square(&u0)).sub(&traceless_square(&b0));

    let b_hat = fwd(&b0);
    let transport = spectral::tdiv_hat(&fwd(&Slice::skew_outer(&b0, &u0)));
    let lin_b = SpecSlice::lincomb(&[
        (1.0, &fwd(&dt_b)),
        (pde.nu2, &spectral::frac_lap_hat(&b_hat, pde.alpha2)),
        (1.0, &transport),
    ]);
    let r_b = r_of_hat(&spectral::curl_inv_hat(&lin_b)?).add(&traceless_square(&b0));

    let p = Slice::dot(&u0, &u0).sub(&Slice::dot(&b0, &b0)).scale(1.0 / 3.0);
    Ok(InitialSlice { r_u: sym_traceless(&r_u), r_b: sym_traceless(&r_b), pressure: p })
}

/// Initial stresses over the whole grid, plus the pressure.
pub fn initial_stresses(u0: &TorusField, b0: &TorusField, pde: &PdeParams) -> Result<(StressPair, TorusField)> {
    if u0.grid != b0.grid {
        return Err(Error::GridMismatch("initial fields".into()));
    }
    let grid = u0.grid;
    let us = |k: usize| Ok(u0.slices[k].clone());
    let bs = |k: usize| Ok(b0.slices[k].clone());
    let out: Vec<InitialSlice> =
        (0..grid.n_t).into_par_iter().map(|j| initial_stresses_at(&grid, j, &us, &bs, pde)).collect::<Result<_>>()?;
    let mut r_u = Vec::with_capacity(out.len());
    let mut r_b = Vec::with_capacity(out.len());
    let mut p = Vec::with_capacity(out.len());
    for s in out {
        r_u.push(s.r_u);
        r_b.push(s.r_b);
        p.push(s.pressure);
    }
    let pair = StressPair::new(
        TorusField::from_slices(grid, Rank::Tensor, Symmetry::SymmetricTraceless, r_u)?,
        TorusField::from_slices(grid, Rank::Tensor, Symmetry::SymmetricTraceless, r_b)?,
        Provenance::Initial,
    )?;
    Ok((pair, TorusField::from_slices(grid, Rank::Scalar, Symmetry::None, p)?))
}

// Mollification commutators.

/// The three commutator stresses of one time sample.
#[derive(Debug, Clone)]
pub struct Commutators {
    /// `u_l o u_l - B_l o B_l - K(u o u - B o B)`.
    pub r_u: Slice,
    /// `B_l o B_l - K(B o B)`.
    pub r_b1: Slice,
    /// `B_l (x) u_l - u_l (x) B_l - K(B (x) u - u (x) B)`, skew.
    pub r_b2: Slice,
}

/// Commutators at sample `j`, where `u_l`, `b_l` are the mollified fields at `j`.
pub fn commutators_at(
    grid: &Grid,
    l: f64,
    j: usize,
    u: Sampler,
    b: Sampler,
    u_l: &Slice,
    b_l: &Slice,
) -> Result<Commutators> {
    let stencil = spectral::time_stencil(grid, l, j)?;
    let mut sym_terms = Vec::with_capacity(stencil.len());
    let mut bb_terms = Vec::with_capacity(stencil.len());
    let mut skew_terms = Vec::with_capacity(stencil.len());
    for (k, _) in &stencil {
        let (uk, bk) = (u(*k)?, b(*k)?);
        let bb = traceless_square(&bk);
        sym_terms.push(traceless_square(&uk).sub(&bb));
        bb_terms.push(bb);
        skew_terms.push(Slice::skew_outer(&bk, &uk));
    }
    let avg = |terms: &[Slice]| -> Result<Slice> {
        let wt: Vec<(f64, &Slice)> = stencil.iter().zip(terms).map(|((_, w), s)| (*w, s)).collect();
        spectral::mollify_space(&Slice::lincomb(&wt), l)
    };
    let bb_l = traceless_square(b_l);
    let r_u = traceless_square(u_l).sub(&bb_l).sub(&avg(&sym_terms)?);
    let r_b1 = bb_l.sub(&avg(&bb_terms)?);
    let r_b2 = Slice::skew_outer(b_l, u_l).sub(&avg(&skew_terms)?);
    Ok(Commutators { r_u: sym_traceless(&r_u), r_b1: sym_traceless(&r_b1), r_b2 })
}

/// Commutator stresses of a pair of fields at mollification scale `l`.
pub fn commutator_stresses(u: &TorusField, b: &TorusField, l: f64) -> Result<(TorusField, TorusField, TorusField)> {
    if u.grid != b.grid {
        return Err(Error::GridMismatch("commutator inputs".into()));
    }
    let grid = u.grid;
    let u_l = spectral::mollify(u, l)?;
    let b_l = spectral::mollify(b, l)?;
    let us = |k: usize| Ok(u.slices[k].clone());
    let bs = |k: usize| Ok(b.slices[k].clone());
    let out: Vec<Commutators> = (0..grid.n_t)
        .into_par_iter()
        .map(|j| commutators_at(&grid, l, j, &us, &bs, &u_l.slices[j], &b_l.slices[j]))
        .collect::<Result<_>>()?;
    let pick = |f: fn(&Commutators) -> &Slice, sym| {
        TorusField::from_slices(grid, Rank::Tensor, sym, out.iter().map(|c| f(c).clone()).collect())
    };
    Ok((
        pick(|c| &c.r_u, Symmetry::SymmetricTraceless)?,
        pick(|c| &c.r_b1, Symmetry::SymmetricTraceless)?,
        pick(|c| &c.r_b2, Symmetry::Skew)?,
    ))
}

/// Magnetic commutator stress `R_com,1 + R curl^{-1} div R_com,2`.
pub fn magnetic_commutator(c: &Commutators) -> Result<Slice> {
    Ok(c.r_b1.add(&r_curl_inv_div(&c.r_b2)?))
}

// Vanishing-viscosity mollification.

/// One time sample of the mollified pair and its stresses.
#[derive(Debug, Clone)]
pub struct MollifiedSlice {
    pub u_n: Slice,
    pub b_n: Slice,
    pub r_u: Slice,
    pub r_b: Slice,
}

/// Viscosities `lambda^{-2 alpha1}`, `lambda^{-2 alpha2}` attached to mollification at `1/lambda`.
pub fn vanishing_viscosities(lambda: f64, alpha1: f64, alpha2: f64) -> (f64, f64) {
    (lambda.powf(-2.0 * alpha1), lambda.powf(-2.0 * alpha2))
}

pub fn mollification_stresses_at(
    grid: &Grid,
    lambda: f64,
    j: usize,
    u: Sampler,
    b: Sampler,
    alpha1: f64,
    alpha2: f64,
) -> Result<MollifiedSlice> {
    let l = 1.0 / lambda;
    let (nu1, nu2) = vanishing_viscosities(lambda, alpha1, alpha2);
    let mollify = |get: Sampler| -> Result<Slice> {
        let st = spectral::time_stencil(grid, l, j)?;
        let slices: Vec<Slice> = st.iter().map(|(k, _)| get(*k)).collect::<Result<_>>()?;
        let terms: Vec<(f64, &Slice)> = st.iter().zip(&slices).map(|((_, w), s)| (*w, s)).collect();
        spectral::mollify_space(&Slice::lincomb(&terms), l)
    };
    let u_n = mollify(u)?;
    let b_n = mollify(b)?;
    let com = commutators_at(grid, l, j, u, b, &u_n, &b_n)?;
    let diss_u = r_of_hat(&spectral::frac_lap_hat(&fwd(&u_n), alpha1)).scale(nu1);
    let diss_b = r_of_hat(&spectral::curl_inv_hat(&spectral::frac_lap_hat(&fwd(&b_n), alpha2))?).scale(nu2);
    let r_u = com.r_u.add(&diss_u);
    let r_b = com.r_b1.add(&diss_b).add(&r_curl_inv_div(&com.r_b2)?);
    Ok(MollifiedSlice { u_n, b_n, r_u: sym_traceless(&r_u), r_b: sym_traceless(&r_b) })
}

/// Stresses of the mollified pair at `lambda`, with the attached viscosities.
pub fn mollification_stresses(
    u: &TorusField,
    b: &TorusField,
    lambda: f64,
    alpha1: f64,
    alpha2: f64,
) -> Result<(StressPair, f64, f64)> {
    if u.grid != b.grid {
        return Err(Error::GridMismatch("mollification inputs".into()));
    }
    let grid = u.grid;
    let us = |k: usize| Ok(u.slices[k].clone());
    let bs = |k: usize| Ok(b.slices[k].clone());
    let out: Vec<MollifiedSlice> = (0..grid.n_t)
        .into_par_iter()
        .map(|j| mollification_stresses_at(&grid, lambda, j, &us, &bs, alpha1, alpha2))
        .collect::<Result<_>>()?;
    let (mut r_u, mut r_b) = (Vec::new(), Vec::new());
    for s in out {
        r_u.push(s.r_u);
        r_b.push(s.r_b);
    }
    let pair = StressPair::new(
        TorusField::from_slices(grid, Rank::Tensor, Symmetry::SymmetricTraceless, r_u)?,
        TorusField::from_slices(grid, Rank::Tensor, Symmetry::SymmetricTraceless, r_b)?,
        Provenance::Mollified,
    )?;
    let (nu1, nu2) = vanishing_viscosities(lambda, alpha1, alpha2);
    Ok((pair, nu1, nu2))
}

// New stresses after one perturbation step.

/// One family's share of a time sample: amplitudes, blocks, perturbation and its time derivative.
pub struct FamilyInput<'a> {
    pub coeffs: &'a CoefficientSlice,
    pub blocks: &'a [MikadoBlock],
    pub pert: &'a PerturbationSlice,
    pub dt_total: &'a Slice,
}

/// Everything needed to split the new stresses at one time sample.
pub struct StepInput<'a> {
    pub u_l: &'a Slice,
    pub b_l: &'a Slice,
    pub r_u_l: &'a Slice,
    pub r_b_l: &'a Slice,
    pub velocity: FamilyInput<'a>,
    pub magnetic: FamilyInput<'a>,
    pub com: &'a Commutators,
    pub pde: PdeParams,
}

/// Largest pointwise mismatch of an identity together with the largest of its terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Closure {
    pub diff: f64,
    pub scale: f64,
}

impl Closure {
    pub fn relative(&self) -> f64 {
        if self.scale == 0.0 {
            self.diff
        } else {
            self.diff / self.scale
        }
    }

    /// Worst case over two samples: the largest mismatch against the largest term.
    pub fn merge(&self, other: &Closure) -> Closure {
        Closure { diff: self.diff.max(other.diff), scale: self.scale.max(other.scale) }
    }
}

/// Mismatches of the cancellation identities.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CancellationCheck {
    /// `sum_{Lambda_2} a^2 mean(W (x) W) = theta_B^2 rho_B Id - R_B,l`.
    pub magnetic_reconstruction: Closure,
    /// `sum_{Lambda_1} a^2 mean(W (x) W) = theta_u^2 rho_u Id - R_u,l + G_B`.
    pub velocity_reconstruction: Closure,
    /// Expansion of `d_p (x) d_p + R_B,l` into mean, self and pair terms.
    pub magnetic_expansion: Closure,
    /// Expansion of `w_p (x) w_p - d_p (x) d_p + R_u,l`.
    pub velocity_expansion: Closure,
    /// Cross-family pair sum against `d_p (x) w_p - w_p (x) d_p`.
    pub cross_expansion: Closure,
}

impl CancellationCheck {
    fn all(&self) -> [Closure; 5] {
        [
            self.magnetic_reconstruction,
            self.velocity_reconstruction,
            self.magnetic_expansion,
            self.velocity_expansion,
            self.cross_expansion,
        ]
    }

    pub fn worst(&self) -> f64 {
        self.all().iter().map(Closure::relative).fold(0.0, f64::max)
    }

    pub fn merge(&self, o: &CancellationCheck) -> CancellationCheck {
        CancellationCheck {
            magnetic_reconstruction: self.magnetic_reconstruction.merge(&o.magnetic_reconstruction),
            velocity_reconstruction: self.velocity_reconstruction.merge(&o.velocity_reconstruction),
            magnetic_expansion: self.magnetic_expansion.merge(&o.magnetic_expansion),
            velocity_expansion: self.velocity_expansion.merge(&o.velocity_expansion),
            cross_expansion: self.cross_expansion.merge(&o.cross_expansion),
        }
    }
}

/// The split of both new stresses at one time sample.
#[derive(Debug, Clone)]
pub struct ErrorParts {
    pub lin_u: Slice,
    pub lin_b: Slice,
    pub cor_u: Slice,
    pub cor_b: Slice,
    pub osc_u: Slice,
    pub osc_b: Slice,
    pub com_u: Slice,
    pub com_b: Slice,
    /// Self-interaction, `R P_H div sum a^2 P(W (x) W)` over both families.
    pub osc_u_x: Slice,
    /// Interaction of distinct directions within a family.
    pub osc_u_far: Slice,
    /// What the cancellation identities leave over (roundoff if they hold).
    pub osc_u_defect: Slice,
    pub osc_b_x: Slice,
    pub osc_b_far: Slice,
    /// Cross-family interaction through `curl^{-1}`.
    pub osc_b_cross: Slice,
    pub osc_b_defect: Slice,
    /// Self-interaction in the gradient form `R P_H P(P(W (x) W) grad a^2)`.
    pub osc_u_x_gradient_form: Slice,
    pub osc_b_x_gradient_form: Slice,
    pub cancellation: CancellationCheck,
}

impl ErrorParts {
    /// `(part, R_u, R_B)` for the four named parts.
    pub fn named(&self) -> [(Part, &Slice, &Slice); 4] {
        [
            (Part::Lin, &self.lin_u, &self.lin_b),
            (Part::Cor, &self.cor_u, &self.cor_b),
            (Part::Osc, &self.osc_u, &self.osc_b),
            (Part::Com, &self.com_u, &self.com_b),
        ]
    }
}

/// `R(d_t w + nu1 (-Lap)^a1 w) + R P_H div(u_l (x) w + w (x) u_l - B_l (x) d - d (x) B_l)` and
/// `R curl^{-1}(d_t d + nu2 (-Lap)^a2 d + div(B_l (x) w + d (x) u_l - u_l (x) d - w (x) B_l))
///  + R div(B_l (x) d + d (x) B_l)`.
pub fn linear_errors_at(s: &StepInput) -> Result<(Slice, Slice)> {
    let (w, d) = (&s.velocity.pert.total, &s.magnetic.pert.total);
    let (u_l, b_l) = (s.u_l, s.b_l);
    let sym = Slice::sym_outer(u_l, w).sub(&Slice::sym_outer(b_l, d));
    let vel = SpecSlice::lincomb(&[
        (1.0, &fwd(s.velocity.dt_total)),
        (s.pde.nu1, &spectral::frac_lap_hat(&fwd(w), s.pde.alpha1)),
        (1.0, &spectral::helmholtz_hat(&spectral::tdiv_hat(&fwd(&sym)))),
    ]);
    let lin_u = r_of_hat(&vel);

    let skew = Slice::skew_outer(b_l, w).add(&Slice::skew_outer(d, u_l));
    let mag = SpecSlice::lincomb(&[
        (1.0, &fwd(s.magnetic.dt_total)),
        (s.pde.nu2, &spectral::frac_lap_hat(&fwd(d), s.pde.alpha2)),
        (1.0, &spectral::tdiv_hat(&fwd(&skew))),
    ]);
    let lin_b = r_of_hat(&spectral::curl_inv_hat(&mag)?).add(&r_div(&Slice::sym_outer(b_l, d)));
    Ok((lin_u, lin_b))
}

/// `R P_H div(w_p (x) w_c + w_c (x) w - d_p (x) d_c - d_c (x) d)` and
/// `R curl^{-1} div(d_p (x) w_c + d_c (x) w - w (x) d_c - w_c (x) d_p) + R div(d_p (x) d_c + d_c (x) d)`.
pub fn corrector_errors_at(s: &StepInput) -> Result<(Slice, Slice)> {
    let (wp, wc, w) = (&s.velocity.pert.principal, &s.velocity.pert.corrector, &s.velocity.pert.total);
    let (dp, dc, d) = (&s.magnetic.pert.principal, &s.magnetic.pert.corrector, &s.magnetic.pert.total);
    let outer = Slice::outer;
    let vel = Slice::lincomb(&[(1.0, &outer(wp, wc)), (1.0, &outer(wc, w)), (-1.0, &outer(dp, dc)), (-1.0, &outer(dc, d))]);
    let cor_u = r_ph_div(&vel);
    let cross = Slice::lincomb(&[(1.0, &outer(dp, wc)), (1.0, &outer(dc, w)), (-1.0, &outer(w, dc)), (-1.0, &outer(wc, dp))]);
    let sym = outer(dp, dc).add(&outer(dc, d));
    let cor_b = r_curl_inv_div(&cross)?.add(&r_div(&sym));
    Ok((cor_u, cor_b))
}

/// Commutator parts: `R P_H div R_com` and `R_com,1 + R curl^{-1} div R_com,2`.
pub fn commutator_errors_at(c: &Commutators) -> Result<(Slice, Slice)> {
    Ok((r_ph_div(&c.r_u), magnetic_commutator(c)?))
}

fn block_mean_sq(b: &MikadoBlock) -> f64 {
    let sq: Vec<f64> = b.phi.iter().map(|v| v * v).collect();
    pairwise_sum(&sq) / sq.len() as f64
}

/// Pointwise pieces of `w_p (x) w_p` for one family.
struct FamilyProducts {
    /// `sum_k a_k^2 mean(W_k (x) W_k)`.
    mean: Slice,
    /// `sum_k a_k^2 P(W_k (x) W_k)`.
    x: Slice,
    /// `sum_{k != k'} a_k a_k' W_k (x) W_k'`.
    far: Slice,
    /// `sum_k P(W_k (x) W_k) grad(a_k^2)`.
    gradient_form: Slice,
}

fn family_products(f: &FamilyInput, n: usize) -> FamilyProducts {
    let np = n * n;
    let active: Vec<(&MikadoBlock, &Plane)> =
        f.blocks.iter().zip(&f.coeffs.a).filter_map(|(b, a)| a.as_ref().map(|a| (b, a))).collect();
    let mut mean = [0; 6].map(|_| vec![0.0; np]);
    let mut x = [0; 6].map(|_| vec![0.0; np]);
    let mut far = [0; 6].map(|_| vec![0.0; np]);
    let mut grad = [vec![0.0; np], vec![0.0; np], vec![0.0; np]];
    for (b, a) in &active {
        let k = b.direction.k;
        let m = block_mean_sq(b);
        let a2: Vec<f64> = a.iter().map(|v| v * v).collect();
        let g = spectral::gradient(&Slice::scalar(n, a2.clone()));
        for (e, &(i, j)) in SYM_ENTRIES.iter().enumerate() {
            let kk = k[i] * k[j];
            if kk == 0.0 {
                continue;
            }
            for p in 0..np {
                mean[e][p] += a2[p] * m * kk;
                x[e][p] += a2[p] * (b.phi[p] * b.phi[p] - m) * kk;
            }
        }
        // (M grad a^2)_i = M_ij d_j a^2 with M = (phi^2 - m) k (x) k.
        for (i, gi) in grad.iter_mut().enumerate() {
            for jx in 0..2 {
                let kk = k[i] * k[jx];
                if kk == 0.0 {
                    continue;
                }
                if let Some(gj) = g.comp(jx) {
                    for p in 0..np {
                        gi[p] += (b.phi[p] * b.phi[p] - m) * kk * gj[p];
                    }
                }
            }
        }
    }
    for (s, (b1, a1)) in active.iter().enumerate() {
        for (b2, a2) in &active[s + 1..] {
            let (k1, k2) = (b1.direction.k, b2.direction.k);
            for (e, &(i, j)) in SYM_ENTRIES.iter().enumerate() {
                let c = k1[i] * k2[j] + k2[i] * k1[j];
                if c == 0.0 {
                    continue;
                }
                for p in 0..np {
                    far[e][p] += c * a1[p] * a2[p] * b1.phi[p] * b2.phi[p];
                }
            }
        }
    }
    let sym = |v: [Vec<f64>; 6]| Slice::symmetric(n, v.map(crate::field::plane_or_none));
    let [g0, g1, g2] = grad;
    FamilyProducts {
        mean: sym(mean),
        x: sym(x),
        far: sym(far),
        gradient_form: Slice::from_vecs(n, Rank::Vector, vec![g0, g1, g2]),
    }
}

/// `sum_{k in Lambda_2, k' in Lambda_1} a_k a_k' (W_k (x) W_k' - W_k' (x) W_k)`.
fn cross_pairs(mag: &FamilyInput, vel: &FamilyInput, n: usize) -> Slice {
    let np = n * n;
    let mut upper = [vec![0.0; np], vec![0.0; np], vec![0.0; np]];
    for (bm, am) in mag.blocks.iter().zip(&mag.coeffs.a) {
        let Some(am) = am else { continue };
        for (bv, av) in vel.blocks.iter().zip(&vel.coeffs.a) {
            let Some(av) = av else { continue };
            let (km, kv) = (bm.direction.k, bv.direction.k);
            for (e, &(i, j)) in [(0usize, 1usize), (0, 2), (1, 2)].iter().enumerate() {
                let c = km[i] * kv[j] - kv[i] * km[j];
                if c == 0.0 {
                    continue;
                }
                for p in 0..np {
                    upper[e][p] += c * am[p] * av[p] * bm.phi[p] * bv.phi[p];
                }
            }
        }
    }
    Slice::skew(n, upper.map(crate::field::plane_or_none))
}

fn theta_sq_rho(c: &CoefficientSlice) -> Option<Plane> {
    let t2 = c.theta * c.theta;
    c.rho.as_ref().map(|r| Arc::new(r.iter().map(|v| t2 * v).collect()))
}

fn closure(diff: &Slice, scale: f64) -> Closure {
    let diff = diff.max_abs();
    Closure { diff, scale: scale.max(diff) }
}

/// Oscillation parts and the cancellation checks.
#[allow(clippy::type_complexity)]
fn oscillation_parts(s: &StepInput) -> Result<([Slice; 3], [Slice; 4], [Slice; 2], CancellationCheck)> {
    let n = s.u_l.n();
    let vp = family_products(&s.velocity, n);
    let mp = family_products(&s.magnetic, n);
    let (wp, dp) = (&s.velocity.pert.principal, &s.magnetic.pert.principal);

    let mag_iso = isotropic(n, theta_sq_rho(s.magnetic.coeffs).as_ref());
    let vel_iso = isotropic(n, theta_sq_rho(s.velocity.coeffs).as_ref());
    let g_b = &mp.mean;

    let mag_target = mag_iso.sub(s.r_b_l);
    let vel_target = vel_iso.sub(s.r_u_l).add(g_b);
    let scale_b = mag_iso.max_abs().max(s.r_b_l.max_abs());
    let scale_u = vel_iso.max_abs().max(s.r_u_l.max_abs()).max(g_b.max_abs());

    let lhs_b = Slice::self_outer(dp).add(s.r_b_l);
    let rhs_b = Slice::lincomb(&[(1.0, &mag_iso), (1.0, &mp.x), (1.0, &mp.far)]);
    let defect_b = lhs_b.sub(&rhs_b);
    let lhs_u = Slice::lincomb(&[(1.0, &Slice::self_outer(wp)), (-1.0, &Slice::self_outer(dp)), (1.0, s.r_u_l)]);
    let rhs_u = Slice::lincomb(&[(1.0, &vel_iso), (1.0, &vp.x), (-1.0, &mp.x), (1.0, &vp.far), (-1.0, &mp.far)]);
    let defect_u = lhs_u.sub(&rhs_u);
    let cross = cross_pairs(&s.magnetic, &s.velocity, n);
    let cross_direct = Slice::skew_outer(dp, wp);
    let defect_cross = cross_direct.sub(&cross);

    let check = CancellationCheck {
        magnetic_reconstruction: closure(&mp.mean.sub(&mag_target), scale_b.max(mp.mean.max_abs())),
        velocity_reconstruction: closure(&vp.mean.sub(&vel_target), scale_u.max(vp.mean.max_abs())),
        magnetic_expansion: closure(&defect_b, lhs_b.max_abs().max(scale_b)),
        velocity_expansion: closure(&defect_u, lhs_u.max_abs().max(scale_u)),
        cross_expansion: closure(&defect_cross, cross_direct.max_abs().max(cross.max_abs())),
    };

    let osc_u_x = r_ph_div(&vp.x.sub(&mp.x));
    let osc_u_far = r_ph_div(&vp.far.sub(&mp.far));
    let osc_u_defect = r_ph_div(&defect_u);
    let osc_b_x = r_div(&mp.x);
    let osc_b_far = r_div(&mp.far);
    let osc_b_cross = r_curl_inv_div(&cross)?;
    let osc_b_defect = r_div(&defect_b).add(&r_curl_inv_div(&defect_cross)?);

    let grad_u = vp.gradient_form.sub(&mp.gradient_form);
    let osc_u_x_gradient_form = r_of_hat(&spectral::helmholtz_hat(&fwd(&grad_u)));
    let osc_b_x_gradient_form = r_vec(&mp.gradient_form);
    Ok((
        [osc_u_x, osc_u_far, osc_u_defect],
        [osc_b_x, osc_b_far, osc_b_cross, osc_b_defect],
        [osc_u_x_gradient_form, osc_b_x_gradient_form],
        check,
    ))
}

/// Oscillation errors `(R_u, R_B)` at one time sample, in divergence form.
pub fn oscillation_errors_at(s: &StepInput) -> Result<(Slice, Slice)> {
    let (u, b, _, _) = oscillation_parts(s)?;
    Ok((sum(&u), sum(&b)))
}

fn sum(parts: &[Slice]) -> Slice {
    Slice::lincomb(&parts.iter().map(|p| (1.0, p)).collect::<Vec<_>>())
}

/// Every part of both new stresses at one time sample.
pub fn decompose_at(s: &StepInput) -> Result<ErrorParts> {
    let (lin_u, lin_b) = linear_errors_at(s)?;
    let (cor_u, cor_b) = corrector_errors_at(s)?;
    let (com_u, com_b) = commutator_errors_at(s.com)?;
    let ([osc_u_x, osc_u_far, osc_u_defect], [osc_b_x, osc_b_far, osc_b_cross, osc_b_defect], [gu, gb], cancellation) =
        oscillation_parts(s)?;
    let osc_u = sum(&[osc_u_x.clone(), osc_u_far.clone(), osc_u_defect.clone()]);
    let osc_b = sum(&[osc_b_x.clone(), osc_b_far.clone(), osc_b_cross.clone(), osc_b_defect.clone()]);
    Ok(ErrorParts {
        lin_u,
        lin_b,
        cor_u,
        cor_b,
        osc_u,
        osc_b,
        com_u,
        com_b,
        osc_u_x,
        osc_u_far,
        osc_u_defect,
        osc_b_x,
        osc_b_far,
        osc_b_cross,
        osc_b_defect,
        osc_u_x_gradient_form: gu,
        osc_b_x_gradient_form: gb,
        cancellation,
    })
}

/// Sums the four named parts of each stress; every part must appear exactly once.
pub fn assemble_new_stresses(parts: &[(Part, &Slice, &Slice)]) -> Result<(Slice, Slice)> {
    for p in Part::all() {
        match parts.iter().filter(|(q, _, _)| *q == p).count() {
            1 => {}
            0 => return Err(Error::MissingPart(p.name().into())),
            _ => return Err(Error::Param(format!("part {} given twice", p.name()))),
        }
    }
    let r_u = Slice::lincomb(&parts.iter().map(|(_, u, _)| (1.0, *u)).collect::<Vec<_>>());
    let r_b = Slice::lincomb(&parts.iter().map(|(_, _, b)| (1.0, *b)).collect::<Vec<_>>());
    Ok((sym_traceless(&r_u), sym_traceless(&r_b)))
}

// Residual of the relaxed system.

/// `L^2` norms of each term of both equations at one time sample, plus the residuals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualSlice {
    /// `P_H d_t u`, `P_H nu1 (-Lap)^a1 u`, `P_H div(u (x) u - B (x) B)`, `P_H div R_u`.
    pub velocity_terms: [f64; 4],
    /// `d_t B`, `nu2 (-Lap)^a2 B`, `div(B (x) u - u (x) B)`, `curl div(B (x) B)`, `curl div R_B`.
    pub magnetic_terms: [f64; 5],
    pub velocity_l2: f64,
    pub velocity_l1: f64,
    pub magnetic_l2: f64,
    pub magnetic_l1: f64,
}

pub const VELOCITY_TERMS: [&str; 4] = ["dt_u", "dissipation_u", "nonlinear_u", "stress_u"];
pub const MAGNETIC_TERMS: [&str; 5] = ["dt_B", "dissipation_B", "transport_B", "hall_B", "stress_B"];

pub fn residual_at(
    grid: &Grid,
    j: usize,
    u: Sampler,
    b: Sampler,
    r_u: &Slice,
    r_b: &Slice,
    pde: &PdeParams,
) -> Result<ResidualSlice> {
    let n = grid.n;
    let (uj, bj) = (u(j)?, b(j)?);
    let dt_u = fwd(&spectral::time_derivative_with(grid, j, Rank::Vector, n, u)?);
    let dt_b = fwd(&spectral::time_derivative_with(grid, j, Rank::Vector, n, b)?);
    let ph = spectral::helmholtz_hat;
    let v_terms = [
        ph(&dt_u),
        ph(&SpecSlice::lincomb(&[(pde.nu1, &spectral::frac_lap_hat(&fwd(&uj), pde.alpha1))])),
        ph(&spectral::tdiv_hat(&fwd(&Slice::self_outer(&uj).sub(&Slice::self_outer(&bj))))),
        ph(&spectral::tdiv_hat(&fwd(r_u))),
    ];
    let v_res = SpecSlice::lincomb(&[(1.0, &v_terms[0]), (1.0, &v_terms[1]), (1.0, &v_terms[2]), (-1.0, &v_terms[3])]);
    let m_terms = [
        dt_b,
        SpecSlice::lincomb(&[(pde.nu2, &spectral::frac_lap_hat(&fwd(&bj), pde.alpha2))]),
        spectral::tdiv_hat(&fwd(&Slice::skew_outer(&bj, &uj))),
        spectral::curl_hat(&spectral::tdiv_hat(&fwd(&Slice::self_outer(&bj)))),
        spectral::curl_hat(&spectral::tdiv_hat(&fwd(r_b))),
    ];
    let m_res = SpecSlice::lincomb(&[
        (1.0, &m_terms[0]),
        (1.0, &m_terms[1]),
        (1.0, &m_terms[2]),
        (1.0, &m_terms[3]),
        (-1.0, &m_terms[4]),
    ]);
    let v_real = inv(&v_res);
    let m_real = inv(&m_res);
    Ok(ResidualSlice {
        velocity_terms: v_terms.each_ref().map(spec_l2),
        magnetic_terms: m_terms.each_ref().map(spec_l2),
        velocity_l2: spec_l2(&v_res),
        velocity_l1: lp_slice(&v_real, 1.0, Quadrature::Rectangle),
        magnetic_l2: spec_l2(&m_res),
        magnetic_l1: lp_slice(&m_real, 1.0, Quadrature::Rectangle),
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct NormPair {
    /// `L^2_t L^2_x`.
    pub l2: f64,
    /// `L^1_t L^1_x`.
    pub l1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermNorm {
    pub equation: String,
    pub term: String,
    /// `L^2_t L^2_x`.
    pub l2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualReport {
    pub velocity_residual_norms: NormPair,
    pub magnetic_residual_norms: NormPair,
    /// The velocity residual is taken under the Leray projection.
    pub pressure_free: bool,
    pub terms: Vec<TermNorm>,
    /// Velocity residual relative to its largest term.
    pub velocity_relative: f64,
    pub magnetic_relative: f64,
}

impl ResidualReport {
    pub fn worst_relative(&self) -> f64 {
        self.velocity_relative.max(self.magnetic_relative)
    }
}

/// Aggregates per-sample residuals over time with trapezoid weights.
pub fn residual_report(slices: &[ResidualSlice]) -> ResidualReport {
    let col = |f: &dyn Fn(&ResidualSlice) -> f64| -> Vec<f64> { slices.iter().map(f).collect() };
    let l1t = |v: Vec<f64>| -> f64 {
        let w = time_weights(v.len());
        pairwise_sum(&v.iter().zip(&w).map(|(a, b)| a * b).collect::<Vec<_>>())
    };
    let mut terms = Vec::new();
    let mut v_max = 0.0f64;
    for (i, name) in VELOCITY_TERMS.iter().enumerate() {
        let l2 = l2_in_time(&col(&|s| s.velocity_terms[i]));
        v_max = v_max.max(l2);
        terms.push(TermNorm { equation: "velocity".into(), term: (*name).into(), l2 });
    }
    let mut m_max = 0.0f64;
    for (i, name) in MAGNETIC_TERMS.iter().enumerate() {
        let l2 = l2_in_time(&col(&|s| s.magnetic_terms[i]));
        m_max = m_max.max(l2);
        terms.push(TermNorm { equation: "magnetic".into(), term: (*name).into(), l2 });
    }
    let v = NormPair { l2: l2_in_time(&col(&|s| s.velocity_l2)), l1: l1t(col(&|s| s.velocity_l1)) };
    let m = NormPair { l2: l2_in_time(&col(&|s| s.magnetic_l2)), l1: l1t(col(&|s| s.magnetic_l1)) };
    let rel = |r: f64, m: f64| if m == 0.0 { r } else { r / m };
    ResidualReport {
        velocity_relative: rel(v.l2, v_max),
        magnetic_relative: rel(m.l2, m_max),
        velocity_residual_norms: v,
        magnetic_residual_norms: m,
        pressure_free: true,
        terms,
    }
}

/// Residual of the relaxed system for stored fields.
pub fn residual(
    u: &TorusField,
    b: &TorusField,
    r_u: &TorusField,
    r_b: &TorusField,
    pde: &PdeParams,
) -> Result<ResidualReport> {
    let grid = u.grid;
    if b.grid != grid || r_u.grid != grid || r_b.grid != grid {
        return Err(Error::GridMismatch("residual inputs".into()));
    }
    let us = |k: usize| Ok(u.slices[k].clone());
    let bs = |k: usize| Ok(b.slices[k].clone());
    let slices: Vec<ResidualSlice> = (0..grid.n_t)
        .into_par_iter()
        .map(|j| residual_at(&grid, j, &us, &bs, &r_u.slices[j], &r_b.slices[j], pde))
        .collect::<Result<_>>()?;
    Ok(residual_report(&slices))
}

// Weak formulation.

/// Pairing defects of both equations against each test function.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeakFormReport {
    pub velocity: Vec<f64>,
    pub magnetic: Vec<f64>,
}

impl WeakFormReport {
    pub fn max_defect(&self) -> f64 {
        self.velocity.iter().chain(&self.magnetic).fold(0.0, |m, v| m.max(*v))
    }
}

/// `(grad v)_ij = d_j v_i`.
pub fn gradient_tensor(v: &Slice) -> Slice {
    let n = v.n();
    let p = spectral::plan(n);
    let h = fwd(v);
    let mut comps: Vec<Option<spectral::Coeffs>> = vec![None; 9];
    for i in 0..3 {
        if let Some(c) = &h.comps[i] {
            for jx in 0..2 {
                comps[tidx(i, jx)] = Some(Arc::new(spectral::d_hat(c, jx, &p)));
            }
        }
    }
    inv(&SpecSlice { n, rank: Rank::Tensor, comps })
}

fn pairing(a: &Slice, b: &Slice) -> f64 {
    let d = Slice::dot(a, b);
    match d.comp(0) {
        Some(p) => pairwise_sum(p) * Grid::stationary(a.n()).map(|g| g.cell_area()).unwrap_or(0.0),
        None => 0.0,
    }
}

/// Divergence-free trigonometric test functions `eta(t) (d2 g, -d1 g, h)` with `eta(1) = 0`.
pub fn trig_test_functions(grid: Grid, count: usize, seed: u64) -> Result<Vec<TorusField>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            // Every wavevector with |k1|, |k2| <= 2 and a random weight on each.
            let modes: Vec<(f64, f64, [f64; 4])> = (-2i32..=2)
                .flat_map(|k1| (0i32..=2).map(move |k2| (k1, k2)))
                .filter(|&(k1, k2)| k2 > 0 || k1 > 0)
                .map(|(k1, k2)| (k1 as f64, k2 as f64, [0; 4].map(|_| rng.gen_range(-1.0..1.0))))
                .collect();
            let speed: f64 = rng.gen_range(1.0..3.0);
            TorusField::from_fn(grid, Rank::Vector, Symmetry::None, move |t, x1, x2, o| {
                let eta = (1.0 - t).powi(2) * (speed * t).cos();
                let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
                for &(k1, k2, [gs, gc, hs, hc]) in &modes {
                    let (s, co) = (k1 * x1 + k2 * x2).sin_cos();
                    // g = gs sin + gc cos, so d_i g = k_i (gs cos - gc sin).
                    let dg = gs * co - gc * s;
                    a += k2 * dg;
                    b -= k1 * dg;
                    c += hs * s + hc * co;
                }
                o[0] = eta * a;
                o[1] = eta * b;
                o[2] = eta * c;
            })
        })
        .collect()
}

/// Pairs both equations (stresses included as forcing) with each test function.
///
/// Velocity: `int u0 phi(0) + int int u d_t phi - nu1 u (-Lap)^a1 phi + (u (x) u - B (x) B - R_u) : grad phi`.
/// Magnetic: `int B0 phi(0) + int int B d_t phi - nu2 B (-Lap)^a2 phi + (B (x) u - u (x) B) : grad phi
///            + (B (x) B - R_B) : grad curl phi`, with `M : grad phi = M_ij d_j phi_i`.
/// Time integrals use the trapezoid rule and the same difference stencil as the residual.
/// Each defect is relative to the largest of its terms.
pub fn weak_form_check(
    u: &TorusField,
    b: &TorusField,
    r_u: Option<&TorusField>,
    r_b: Option<&TorusField>,
    pde: &PdeParams,
    tests: &[TorusField],
) -> Result<WeakFormReport> {
    let grid = u.grid;
    if b.grid != grid {
        return Err(Error::GridMismatch("weak form inputs".into()));
    }
    let weights = time_weights(grid.n_t);
    let mut velocity = Vec::new();
    let mut magnetic = Vec::new();
    for phi in tests {
        if phi.grid != grid {
            return Err(Error::GridMismatch("test function".into()));
        }
        for s in &phi.slices {
            let rel = spectral::relative_divergence_hat(&fwd(s));
            if rel > spectral::DIVERGENCE_TOLERANCE {
                return Err(Error::NotDivergenceFree(rel));
            }
        }
        let last = phi.slices[grid.n_t - 1].max_abs();
        if last > 1e-12 * phi.max_abs().max(1.0) {
            return Err(Error::Param(format!("test function does not vanish at the final time ({last:e})")));
        }
        let dphi = spectral::time_derivative(phi)?;
        let per: Vec<([f64; 4], [f64; 5])> = (0..grid.n_t)
            .into_par_iter()
            .map(|j| {
                let (uj, bj, ph) = (&u.slices[j], &b.slices[j], &phi.slices[j]);
                let gphi = gradient_tensor(ph);
                let gcurl = gradient_tensor(&spectral::curl(ph));
                let mut su = Slice::self_outer(uj).sub(&Slice::self_outer(bj));
                let mut sb = Slice::self_outer(bj);
                if let Some(r) = r_u {
                    su = su.sub(&r.slices[j]);
                }
                if let Some(r) = r_b {
                    sb = sb.sub(&r.slices[j]);
                }
                let v = [
                    0.0,
                    pairing(uj, &dphi.slices[j]),
                    -pde.nu1 * pairing(uj, &spectral::frac_laplacian(ph, pde.alpha1)),
                    pairing(&su, &gphi),
                ];
                let m = [
                    0.0,
                    pairing(bj, &dphi.slices[j]),
                    -pde.nu2 * pairing(bj, &spectral::frac_laplacian(ph, pde.alpha2)),
                    pairing(&Slice::skew_outer(bj, uj), &gphi),
                    pairing(&sb, &gcurl),
                ];
                (v, m)
            })
            .collect();
        let mut v_tot = [0.0; 4];
        let mut m_tot = [0.0; 5];
        v_tot[0] = pairing(&u.slices[0], &phi.slices[0]);
        m_tot[0] = pairing(&b.slices[0], &phi.slices[0]);
        for k in 1..4 {
            v_tot[k] = pairwise_sum(&per.iter().zip(&weights).map(|((v, _), w)| v[k] * w).collect::<Vec<_>>());
        }
        for k in 1..5 {
            m_tot[k] = pairwise_sum(&per.iter().zip(&weights).map(|((_, m), w)| m[k] * w).collect::<Vec<_>>());
        }
        let rel = |t: &[f64]| {
            let s: f64 = t.iter().sum();
            let scale = t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if scale == 0.0 {
                0.0
            } else {
                s.abs() / scale
            }
        };
        velocity.push(rel(&v_tot));
        magnetic.push(rel(&m_tot));
    }
    Ok(WeakFormReport { velocity, magnetic })
}

/// `L^1` norm series of a stress field, used for support and ledger reporting.
pub fn l1_series(f: &TorusField) -> Vec<f64> {
    f.slices.par_iter().map(|s| lp_slice(s, 1.0, Quadrature::Rectangle)).collect()
}

/// Supremum in time of the `L^1` norm.
pub fn l1_sup(f: &TorusField) -> Result<f64> {
    norms::norm(f, norms::NormKind::Lp(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, nt: usize) -> Grid {
        Grid::new(n, nt).unwrap()
    }

    fn ramp(t: f64) -> f64 {
        crate::geometry::smoothstep((t - 0.25) / 0.25) * (1.0 - crate::geometry::smoothstep((t - 0.625) / 0.125))
    }

    fn background(g: Grid) -> (TorusField, TorusField) {
        let u = TorusField::from_fn(g, Rank::Vector, Symmetry::None, |t, _x1, x2, o| {
            o[0] = ramp(t) * x2.sin();
        })
        .unwrap();
        let b = TorusField::from_fn(g, Rank::Vector, Symmetry::None, |t, x1, x2, o| {
            let s = ramp(t);
            o[0] = s * x2.sin();
            o[1] = s * x1.cos();
            o[2] = -s * (x1.sin() + x2.cos());
        })
        .unwrap();
        (u, b)
    }

    #[test]
    fn r_output_is_symmetric_traceless_with_divergence_back() {
        let g = grid(32, 1);
        let v = TorusField::from_fn(g, Rank::Vector, Symmetry::None, |_, x, y, o| {
            o[0] = (2.0 * x + y).sin();
            o[1] = (x - 3.0 * y).cos() + 0.3;
            o[2] = (x + y).cos();
        })
        .unwrap();
        let r = r_vec(&v.slices[0]);
        assert!(sym_traceless_defect(&r) < 1e-14);
        let back = spectral::tensor_divergence(&r);
        let target = spectral::remove_mean(&v.slices[0]);
        assert!(back.sub(&target).max_abs() < 1e-12);
    }

    #[test]
    fn zero_inputs_give_zero_stresses() {
        let g = grid(16, 9);
        let z = TorusField::zeros(g, Rank::Vector, Symmetry::None);
        let (pair, p) = initial_stresses(&z, &z, &PdeParams::default()).unwrap();
        assert_eq!(pair.r_u.max_abs(), 0.0);
        assert_eq!(pair.r_b.max_abs(), 0.0);
        assert_eq!(p.max_abs(), 0.0);
        assert!(pair.support.is_empty());
        let rep = residual(&z, &z, &pair.r_u, &pair.r_b, &PdeParams::default()).unwrap();
        assert_eq!(rep.velocity_residual_norms.l2, 0.0);
        assert_eq!(rep.magnetic_residual_norms.l2, 0.0);
    }

    #[test]
    fn initial_stresses_solve_the_relaxed_system() {
        let g = grid(32, 33);
        let (u, b) = background(g);
        let pde = PdeParams::default();
        let (pair, _) = initial_stresses(&u, &b, &pde).unwrap();
        let rep = residual(&u, &b, &pair.r_u, &pair.r_b, &pde).unwrap();
        assert!(rep.worst_relative() < 1e-12, "{rep:?}");
        // Dropping the magnetic stress leaves an order-one magnetic residual.
        let z = TorusField::zeros(g, Rank::Tensor, Symmetry::SymmetricTraceless);
        let ablated = residual(&u, &b, &pair.r_u, &z, &pde).unwrap();
        assert!(ablated.magnetic_relative > 1e3 * rep.magnetic_relative.max(1e-16));
    }

    #[test]
    fn stated_pressure_balances_with_the_opposite_sign() {
        let g = grid(32, 33);
        let (u, b) = background(g);
        let pde = PdeParams::default();
        let (pair, p) = initial_stresses(&u, &b, &pde).unwrap();
        let dt = spectral::time_derivative(&u).unwrap();
        let j = 18;
        let (uj, bj) = (&u.slices[j], &b.slices[j]);
        let lhs = Slice::lincomb(&[
            (1.0, &dt.slices[j]),
            (pde.nu1, &spectral::frac_laplacian(uj, pde.alpha1)),
            (1.0, &spectral::tensor_divergence(&Slice::self_outer(uj).sub(&Slice::self_outer(bj)))),
            (-1.0, &spectral::tensor_divergence(&pair.r_u.slices[j])),
        ]);
        let grad_p = spectral::gradient(&p.slices[j]);
        let scale = lhs.max_abs();
        assert!(scale > 1e-3);
        assert!(lhs.sub(&grad_p).max_abs() < 1e-10 * scale);
        assert!(lhs.add(&grad_p).max_abs() > 0.5 * scale);
    }

    #[test]
    fn commutators_vanish_for_constant_and_zero_magnetic_fields() {
        let g = grid(32, 17);
        let c = TorusField::from_fn(g, Rank::Vector, Symmetry::None, |_, _, _, o| {
            o[0] = 1.5;
            o[1] = -0.5;
            o[2] = 2.0;
        })
        .unwrap();
        let (a, b1, b2) = commutator_stresses(&c, &c, 0.3).unwrap();
        assert!(a.max_abs() < 1e-13 && b1.max_abs() < 1e-13 && b2.max_abs() < 1e-13);
        let (u, _) = background(g);
        let z = TorusField::zeros(g, Rank::Vector, Symmetry::None);
        let (a, b1, b2) = commutator_stresses(&u, &z, 0.3).unwrap();
        assert!(a.max_abs() > 0.0);
        assert_eq!(b1.max_abs(), 0.0);
        assert_eq!(b2.max_abs(), 0.0);
    }

    #[test]
    fn assembly_requires_every_part() {
        let z = Slice::zeros(16, Rank::Tensor);
        let parts = [(Part::Lin, &z, &z), (Part::Cor, &z, &z), (Part::Osc, &z, &z)];
        assert!(matches!(assemble_new_stresses(&parts), Err(Error::MissingPart(p)) if p == "com"));
        let all = [(Part::Lin, &z, &z), (Part::Cor, &z, &z), (Part::Osc, &z, &z), (Part::Com, &z, &z)];
        let (u, b) = assemble_new_stresses(&all).unwrap();
        assert!(u.is_zero() && b.is_zero());
    }

    #[test]
    fn weak_form_closes_on_initial_stresses_and_not_without_them() {
        let g = grid(16, 33);
        let (u, b) = background(g);
        let pde = PdeParams::default();
        let (pair, _) = initial_stresses(&u, &b, &pde).unwrap();
        let tests = trig_test_functions(g, 3, 7).unwrap();
        let good = weak_form_check(&u, &b, Some(&pair.r_u), Some(&pair.r_b), &pde, &tests).unwrap();
        assert!(good.max_defect() < 1e-10, "{good:?}");
        let bad = weak_form_check(&u, &b, None, None, &pde, &tests).unwrap();
        assert!(bad.max_defect() > 1e-2, "{bad:?}");
        let z = TorusField::zeros(g, Rank::Vector, Symmetry::None);
        assert_eq!(weak_form_check(&z, &z, None, None, &pde, &tests).unwrap().max_defect(), 0.0);
    }
}
