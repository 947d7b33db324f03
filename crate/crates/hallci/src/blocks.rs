//! Stationary building blocks concentrated along the planar directions.
//!
//! A block for direction `k` is a profile of the single coordinate
//! `s = sigma * n_lambda * (x - x_k) . a_tilde`, so it is constant along `k_tilde`. The
//! potential `Phi_k`, its Laplacian `phi_k`, and the vector `W_k = phi_k k` are sampled
//! from closed forms. The skew potential `Omega_k = k (x) grad Phi_k - grad Phi_k (x) k`
//! has row divergence `W_k`.

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{pairwise_sum, plane_or_none, tidx, Plane, Rank, Slice, TWO_PI};
use crate::geometry::{directions, Direction, Family, ScalePolicy};
use crate::norms::{slice_norm, NormKind, Quadrature};
use crate::spectral;

/// Mask threshold relative to the peak of `|Phi|`.
pub const MASK_THRESHOLD: f64 = 1e-14;

/// Samples per axis required per unit of `mu * sigma * n_lambda`.
pub const RESOLUTION_FACTOR: usize = 8;

/// The bump `c exp(-1/(1-x^2))` and its derivatives, normalized so that the second
/// derivative has unit mean square over one period.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Profile {
    pub c: f64,
}

/// Derivatives 0..=3 of `exp(-1/(1-x^2))`.
fn raw_derivatives(x: f64) -> [f64; 4] {
    if x.abs() >= 1.0 {
        return [0.0; 4];
    }
    let u = 1.0 - x * x;
    let g = -1.0 / u;
    if g < -700.0 {
        return [0.0; 4];
    }
    let e = g.exp();
    let g1 = -2.0 * x / (u * u);
    let g2 = -2.0 / (u * u) - 8.0 * x * x / (u * u * u);
    let g3 = -24.0 * x / (u * u * u) - 48.0 * x * x * x / (u * u * u * u);
    [e, g1 * e, (g2 + g1 * g1) * e, (g3 + 3.0 * g1 * g2 + g1 * g1 * g1) * e]
}

/// Midpoint rule on `[-1, 1]`.
fn midpoint(m: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = 2.0 / m as f64;
    let vals: Vec<f64> = (0..m).map(|i| f(-1.0 + (i as f64 + 0.5) * h)).collect();
    pairwise_sum(&vals) * h
}

impl Profile {
    pub fn standard() -> Profile {
        static P: OnceLock<Profile> = OnceLock::new();
        *P.get_or_init(|| {
            let integral = midpoint(1 << 16, |x| raw_derivatives(x)[2].powi(2));
            Profile { c: (TWO_PI / integral).sqrt() }
        })
    }

    /// `Phi(x)` on `[-1, 1]`, zero outside.
    pub fn big_phi(&self, x: f64) -> f64 {
        self.c * raw_derivatives(x)[0]
    }

    pub fn d_big_phi(&self, x: f64) -> f64 {
        self.c * raw_derivatives(x)[1]
    }

    /// `phi = Phi''`.
    pub fn phi(&self, x: f64) -> f64 {
        self.c * raw_derivatives(x)[2]
    }

    pub fn d_phi(&self, x: f64) -> f64 {
        self.c * raw_derivatives(x)[3]
    }

    /// `(x, Phi, phi)` at `m` equispaced points of `[-1, 1]`.
    pub fn table(&self, m: usize) -> Vec<[f64; 3]> {
        (0..m)
            .map(|i| {
                let x = -1.0 + 2.0 * i as f64 / (m - 1) as f64;
                [x, self.big_phi(x), self.phi(x)]
            })
            .collect()
    }

    /// Concentrated profiles at scale `mu`, periodized on `[-pi, pi)`:
    /// `(Phi_mu, Phi_mu', phi_mu, phi_mu')` at `s`.
    pub fn concentrated(&self, mu: f64, s: f64) -> [f64; 4] {
        let s = wrap(s);
        let d = raw_derivatives(mu * s);
        let r = mu.sqrt();
        [self.c * d[0] / (mu * r), self.c * d[1] / r, self.c * d[2] * r, self.c * d[3] * mu * r]
    }
}

/// Reduces an angle to `[-pi, pi)`.
pub fn wrap(s: f64) -> f64 {
    let w = (s + std::f64::consts::PI).rem_euclid(TWO_PI) - std::f64::consts::PI;
    if w >= std::f64::consts::PI {
        w - TWO_PI
    } else {
        w
    }
}

/// What to do when the grid is coarser than [`RESOLUTION_FACTOR`] samples per block width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResolutionPolicy {
    Strict,
    Warn,
}

pub fn required_resolution(mu: f64, sigma: i64, n_lambda: i64) -> usize {
    (RESOLUTION_FACTOR as f64 * mu * (sigma * n_lambda) as f64).ceil() as usize
}

#[derive(Debug, Clone)]
pub struct MikadoBlock {
    pub direction: Direction,
    pub mu: f64,
    pub sigma: i64,
    pub n_lambda: i64,
    /// Offset `c` with `x_k = c * a_tilde`.
    pub shift: f64,
    pub n: usize,
    /// Factor making the grid mean of `phi^2` equal to one.
    pub discrete_scale: f64,
    pub big_phi: Plane,
    pub phi: Plane,
    /// Planar components of `grad Phi`; `None` where `a_tilde` has a zero entry.
    pub grad_big_phi: [Option<Plane>; 2],
    pub mask: Arc<Vec<bool>>,
    pub warning: Option<String>,
}

impl MikadoBlock {
    pub fn new(
        direction: &Direction,
        mu: f64,
        sigma: i64,
        n_lambda: i64,
        shift: f64,
        n: usize,
        policy: ResolutionPolicy,
    ) -> Result<Self> {
        let m = direction.lattice_vector(sigma, n_lambda).ok_or(Error::NotPeriodic)?;
        if !(mu >= 1.0) {
            return Err(Error::Param(format!("mu must be at least 1 (got {mu})")));
        }
        let need = required_resolution(mu, sigma, n_lambda);
        let warning = if n < need {
            match policy {
                ResolutionPolicy::Strict => return Err(Error::UnderResolved { n, need }),
                ResolutionPolicy::Warn => Some(format!("under-resolved block {}: n_x = {n} < {need}", direction.label)),
            }
        } else {
            None
        };
        let profile = Profile::standard();
        let scale = (sigma * n_lambda) as f64;
        let h = TWO_PI / n as f64;
        let offset = scale * shift;
        let nn = n as i64;
        // The phase only takes the values r h with r a multiple of gcd(m, n), each on the same
        // number of grid points, so one table per residue covers the grid.
        let table: Vec<[f64; 4]> = (0..n).map(|r| profile.concentrated(mu, r as f64 * h - offset)).collect();
        let step = gcd(gcd(m[0], m[1]), nn) as usize;
        let sq: Vec<f64> = table.iter().step_by(step).map(|v| v[2] * v[2]).collect();
        let discrete_scale = 1.0 / (pairwise_sum(&sq) / sq.len() as f64).sqrt();
        let f = discrete_scale;
        let residue = |q: usize| (m[0] * (q % n) as i64 + m[1] * (q / n) as i64).rem_euclid(nn) as usize;
        let plane = |g: &dyn Fn(&[f64; 4]) -> f64| -> Vec<f64> { (0..n * n).map(|q| g(&table[residue(q)])).collect() };
        let big_phi = plane(&|v| f * v[0] / (scale * scale));
        let phi = plane(&|v| f * v[2]);
        let grad_big_phi = [0, 1].map(|j| {
            let a = direction.a_tilde[j];
            if a == 0.0 {
                None
            } else {
                plane_or_none(plane(&|v| f * v[1] * a / scale))
            }
        });
        let peak = big_phi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mask: Vec<bool> = big_phi.iter().map(|v| v.abs() > MASK_THRESHOLD * peak).collect();
        Ok(MikadoBlock {
            direction: direction.clone(),
            mu,
            sigma,
            n_lambda,
            shift,
            n,
            discrete_scale,
            big_phi: Arc::new(big_phi),
            phi: Arc::new(phi),
            grad_big_phi,
            mask: Arc::new(mask),
            warning,
        })
    }

    /// `W = phi k`.
    pub fn w(&self) -> Slice {
        let comps = self.direction.k.map(|k| {
            if k == 0.0 {
                None
            } else {
                plane_or_none(self.phi.iter().map(|p| p * k).collect())
            }
        });
        Slice::vector(self.n, comps)
    }

    /// `Omega = k (x) grad Phi - grad Phi (x) k`, weighted pointwise by `weight` if given.
    pub fn omega_weighted(&self, weight: Option<&[f64]>) -> Slice {
        let k = self.direction.k;
        let np = self.n * self.n;
        let upper = [(0usize, 1usize), (0, 2), (1, 2)].map(|(i, j)| {
            let mut out = vec![0.0; np];
            let mut any = false;
            // k_i g_j - g_i k_j with g_3 = 0.
            for (coef, gi) in [(k[i], j), (-k[j], i)] {
                if coef == 0.0 || gi > 1 {
                    continue;
                }
                if let Some(g) = &self.grad_big_phi[gi] {
                    any = true;
                    match weight {
                        Some(w) => out.iter_mut().zip(g.iter()).zip(w).for_each(|((o, g), w)| *o += coef * g * w),
                        None => out.iter_mut().zip(g.iter()).for_each(|(o, g)| *o += coef * g),
                    }
                }
            }
            if any {
                plane_or_none(out)
            } else {
                None
            }
        });
        Slice::skew(self.n, upper)
    }

    pub fn omega(&self) -> Slice {
        self.omega_weighted(None)
    }

    pub fn big_phi_slice(&self) -> Slice {
        Slice::from_planes(self.n, Rank::Scalar, vec![Some(self.big_phi.clone())])
    }

    pub fn phi_slice(&self) -> Slice {
        Slice::from_planes(self.n, Rank::Scalar, vec![Some(self.phi.clone())])
    }

    pub fn support_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&b| b).count() as f64 / self.mask.len() as f64
    }
}

/// One identity checked two ways.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    /// Error with derivatives taken by Fourier multipliers on the grid samples.
    pub spectral: f64,
    /// Error with derivatives taken from the closed-form profile.
    pub closed_form: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockReport {
    pub direction: String,
    pub family: Family,
    pub mu: f64,
    pub sigma: i64,
    pub n_lambda: i64,
    pub n: usize,
    pub warning: Option<String>,
    pub checks: Vec<IdentityCheck>,
}

impl BlockReport {
    pub fn worst_spectral(&self) -> f64 {
        self.checks.iter().map(|c| c.spectral).fold(0.0, f64::max)
    }

    pub fn worst_closed_form(&self) -> f64 {
        self.checks.iter().map(|c| c.closed_form).fold(0.0, f64::max)
    }
}

fn l2(s: &Slice) -> f64 {
    slice_norm(s, NormKind::Lp(2.0), Quadrature::Rectangle).expect("L2 norm")
}

fn h1(s: &Slice) -> f64 {
    slice_norm(s, NormKind::H(1.0), Quadrature::Rectangle).expect("H1 norm")
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Checks the block identities. Relative errors use the `L^2` norm; derivative identities
/// are measured against the `H^1` seminorm of the differentiated field.
pub fn verify_block(b: &MikadoBlock) -> BlockReport {
    let n = b.n;
    let d = &b.direction;
    let k = d.k;
    let at = d.a_tilde;
    let w = b.w();
    let ww = Slice::self_outer(&w);
    let profile = Profile::standard();
    let scale = (b.sigma * b.n_lambda) as f64;

    // Closed-form derivative of phi along the block coordinate.
    let mm = d.lattice_vector(b.sigma, b.n_lambda).expect("checked at construction");
    let h = TWO_PI / n as f64;
    let dphi: Vec<f64> = (0..n * n)
        .map(|p| {
            let (i1, i2) = ((p % n) as i64, (p / n) as i64);
            let phase = (mm[0] * i1 + mm[1] * i2).rem_euclid(n as i64) as f64 * h;
            b.discrete_scale * profile.concentrated(b.mu, phase - scale * b.shift)[3] * scale
        })
        .collect();
    let k_dot_a = k[0] * at[0] + k[1] * at[1];
    let a_sq = at[0] * at[0] + at[1] * at[1];

    let mut checks = Vec::new();

    let div_w = spectral::divergence(&w);
    let cf_div_w = Slice::scalar(n, dphi.iter().map(|v| v * k_dot_a).collect());
    let ref_w = h1(&w);
    checks.push(IdentityCheck {
        name: "div W".into(),
        spectral: ratio(l2(&div_w), ref_w),
        closed_form: ratio(l2(&cf_div_w), ref_w),
    });

    let div_omega = spectral::tensor_divergence(&b.omega());
    let cf_residual = Slice::vector(
        n,
        [0, 1, 2].map(|i| {
            let ai = if i < 2 { at[i] } else { 0.0 };
            plane_or_none(b.phi.iter().map(|p| p * (k[i] * (a_sq - 1.0) - ai * k_dot_a)).collect())
        }),
    );
    let ref_wl2 = l2(&w);
    checks.push(IdentityCheck {
        name: "div Omega - W".into(),
        spectral: ratio(l2(&div_omega.sub(&w)), ref_wl2),
        closed_form: ratio(l2(&cf_residual), ref_wl2),
    });

    let div_ww = spectral::tensor_divergence(&ww);
    let cf_div_ww = Slice::vector(
        n,
        [0, 1, 2].map(|i| plane_or_none(b.phi.iter().zip(&dphi).map(|(p, q)| 2.0 * p * q * k[i] * k_dot_a).collect())),
    );
    let ref_ww = h1(&ww);
    checks.push(IdentityCheck {
        name: "div (W x W)".into(),
        spectral: ratio(l2(&div_ww), ref_ww),
        closed_form: ratio(l2(&cf_div_ww), ref_ww),
    });

    let mut mean_err = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            mean_err = mean_err.max((ww.mean(tidx(i, j)) - k[i] * k[j]).abs());
        }
    }
    checks.push(IdentityCheck { name: "mean(W x W) - k x k".into(), spectral: mean_err, closed_form: mean_err });

    let phi_sq: Vec<f64> = b.phi.iter().map(|p| p * p).collect();
    let norm_err = (pairwise_sum(&phi_sq) / (n * n) as f64 - 1.0).abs();
    checks.push(IdentityCheck { name: "mean(phi^2) - 1".into(), spectral: norm_err, closed_form: norm_err });

    let lap = spectral::laplacian(&b.big_phi_slice());
    let phi_s = b.phi_slice();
    let cf_lap = Slice::scalar(n, b.phi.iter().map(|p| p * (1.0 - a_sq)).collect());
    let ref_phi = l2(&phi_s);
    checks.push(IdentityCheck {
        name: "phi - Laplacian Phi".into(),
        spectral: ratio(l2(&phi_s.sub(&lap)), ref_phi),
        closed_form: ratio(l2(&cf_lap), ref_phi),
    });

    BlockReport {
        direction: d.label.clone(),
        family: d.family,
        mu: b.mu,
        sigma: b.sigma,
        n_lambda: b.n_lambda,
        n,
        warning: b.warning.clone(),
        checks,
    }
}

/// Overlap of two blocks and the size of `W_a (x) W_b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntersectionReport {
    pub support_measure: f64,
    pub product_l1: f64,
    pub product_l2: f64,
    pub product_linf: f64,
}

pub fn block_intersection(a: &MikadoBlock, b: &MikadoBlock) -> IntersectionReport {
    assert_eq!(a.n, b.n);
    let n = a.n;
    let cell = (TWO_PI / n as f64).powi(2);
    let count = a.mask.iter().zip(b.mask.iter()).filter(|(x, y)| **x && **y).count();
    let prod: Vec<f64> = a.phi.iter().zip(b.phi.iter()).map(|(x, y)| (x * y).abs()).collect();
    let kp = |p: f64| {
        let f = |k: [f64; 3]| k.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p);
        f(a.direction.k) * f(b.direction.k)
    };
    let kinf = a.direction.k.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        * b.direction.k.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let l1 = pairwise_sum(&prod) * cell;
    let sq: Vec<f64> = prod.iter().map(|v| v * v).collect();
    let l2 = (pairwise_sum(&sq) * cell).sqrt();
    let linf = prod.iter().fold(0.0f64, |m, v| m.max(*v));
    IntersectionReport { support_measure: count as f64 * cell, product_l1: kp(1.0) * l1, product_l2: kp(2.0) * l2, product_linf: kinf * linf }
}

/// Offsets `c_k` keeping blocks with a common `a_tilde` apart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftPlan {
    pub mu: f64,
    pub sigma: i64,
    pub scale: ScalePolicy,
    /// `(family, direction index, c)`.
    pub shifts: Vec<(Family, usize, f64)>,
    /// Smallest gap between supports of parallel blocks, in the block coordinate.
    pub min_clearance: f64,
}

impl ShiftPlan {
    pub fn shift(&self, family: Family, index: usize) -> f64 {
        self.shifts.iter().find(|(f, i, _)| *f == family && *i == index).map(|s| s.2).unwrap_or(0.0)
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: i64, b: i64) -> i64 {
    a / gcd(a, b) * b
}

/// Distance from `x` to the lattice `period * Z`.
fn lattice_distance(x: f64, period: f64) -> f64 {
    let r = x.rem_euclid(period);
    r.min(period - r)
}

/// Places parallel blocks on a grid of candidate offsets, maximizing the smallest gap.
pub fn plan_shifts(mu: f64, sigma: i64, scale: ScalePolicy) -> Result<ShiftPlan> {
    let mut groups: Vec<([i64; 2], i64, Vec<(Family, usize, i64)>)> = Vec::new();
    for fam in Family::all() {
        let nl = scale.n_lambda(fam);
        for d in directions(fam) {
            let key = d.a_tilde_num;
            match groups.iter_mut().find(|g| g.0 == key && g.1 == d.planar_den) {
                Some(g) => g.2.push((fam, d.index, nl)),
                None => groups.push((key, d.planar_den, vec![(fam, d.index, nl)])),
            }
        }
    }
    let mut shifts = Vec::new();
    let mut min_clearance = f64::INFINITY;
    for (_, _, members) in groups {
        if members.len() == 1 {
            shifts.push((members[0].0, members[0].1, 0.0));
            continue;
        }
        let big_l = members.iter().fold(1, |acc, m| lcm(acc, m.2));
        let g = members.len();
        let step = TWO_PI / (sigma * big_l) as f64 / (2 * g) as f64;
        let half: Vec<f64> = members.iter().map(|m| 1.0 / (mu * (sigma * m.2) as f64)).collect();
        let clearance = |c: &[f64]| {
            let mut worst = f64::INFINITY;
            for i in 0..g {
                for j in i + 1..g {
                    let period = TWO_PI / (sigma * lcm(members[i].2, members[j].2)) as f64;
                    worst = worst.min(lattice_distance(c[i] - c[j], period) - half[i] - half[j]);
                }
            }
            worst
        };
        // Member i repeats with period 2 pi / (sigma n_i), i.e. every `slots[i]` candidates.
        let slots: Vec<usize> = members.iter().map(|m| (2 * g) * (big_l / m.2) as usize).collect();
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut idx = vec![0usize; g];
        loop {
            let c: Vec<f64> = idx.iter().map(|&t| t as f64 * step).collect();
            let v = clearance(&c);
            if best.as_ref().map_or(true, |(b, _)| v > *b) {
                best = Some((v, idx.clone()));
            }
            // Odometer over members 1..g; member 0 stays at zero.
            let mut pos = g - 1;
            loop {
                if pos == 0 {
                    break;
                }
                idx[pos] += 1;
                if idx[pos] < slots[pos] {
                    break;
                }
                idx[pos] = 0;
                pos -= 1;
            }
            if pos == 0 {
                break;
            }
        }
        let (v, choice) = best.expect("nonempty search");
        if v <= 0.0 {
            return Err(Error::ShiftsOverlap(v));
        }
        min_clearance = min_clearance.min(v);
        for (m, t) in members.iter().zip(choice) {
            shifts.push((m.0, m.1, t as f64 * step));
        }
    }
    Ok(ShiftPlan { mu, sigma, scale, shifts, min_clearance })
}

/// The twelve blocks of both families on one grid.
#[derive(Debug, Clone)]
pub struct BlockSet {
    pub plan: ShiftPlan,
    pub velocity: Vec<MikadoBlock>,
    pub magnetic: Vec<MikadoBlock>,
    pub warnings: Vec<String>,
}

impl BlockSet {
    pub fn family(&self, f: Family) -> &[MikadoBlock] {
        match f {
            Family::Velocity => &self.velocity,
            Family::Magnetic => &self.magnetic,
        }
    }
}

pub fn build_blocks(
    n: usize,
    mu: f64,
    sigma: i64,
    scale: ScalePolicy,
    policy: ResolutionPolicy,
) -> Result<BlockSet> {
    let plan = plan_shifts(mu, sigma, scale)?;
    let mut warnings = Vec::new();
    let mut build = |fam: Family| -> Result<Vec<MikadoBlock>> {
        directions(fam)
            .iter()
            .map(|d| {
                let b = MikadoBlock::new(d, mu, sigma, scale.n_lambda(fam), plan.shift(fam, d.index), n, policy)?;
                if let Some(w) = &b.warning {
                    warnings.push(w.clone());
                }
                Ok(b)
            })
            .collect()
    };
    let velocity = build(Family::Velocity)?;
    let magnetic = build(Family::Magnetic)?;
    let all: Vec<&MikadoBlock> = velocity.iter().chain(&magnetic).collect();
    for (i, a) in all.iter().enumerate() {
        for b in &all[i + 1..] {
            if a.direction.a_tilde_num == b.direction.a_tilde_num && a.direction.planar_den == b.direction.planar_den {
                let overlap = a.mask.iter().zip(b.mask.iter()).any(|(x, y)| *x && *y);
                if overlap {
                    return Err(Error::ShiftsOverlap(0.0));
                }
            }
        }
    }
    Ok(BlockSet { plan, velocity, magnetic, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_is_normalized_by_an_independent_rule() {
        let p = Profile::standard();
        // Composite Simpson on a finer grid.
        let m = 400_000;
        let h = 2.0 / m as f64;
        let mut s = 0.0;
        for i in 0..=m {
            let w = if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * p.phi(-1.0 + i as f64 * h).powi(2);
        }
        let mean_sq = s * h / 3.0 / TWO_PI;
        assert!((mean_sq - 1.0).abs() < 1e-12, "{mean_sq}");
    }

    #[test]
    fn closed_form_derivatives_match_differences() {
        let p = Profile::standard();
        let e = 1e-5;
        for &x in &[-0.7, -0.3, 0.0, 0.2, 0.55, 0.8] {
            let fd1 = (p.big_phi(x + e) - p.big_phi(x - e)) / (2.0 * e);
            let fd2 = (p.d_big_phi(x + e) - p.d_big_phi(x - e)) / (2.0 * e);
            let fd3 = (p.phi(x + e) - p.phi(x - e)) / (2.0 * e);
            assert!((fd1 - p.d_big_phi(x)).abs() < 1e-7 * (1.0 + fd1.abs()));
            assert!((fd2 - p.phi(x)).abs() < 1e-6 * (1.0 + fd2.abs()));
            assert!((fd3 - p.d_phi(x)).abs() < 1e-5 * (1.0 + fd3.abs()));
        }
        assert_eq!(p.big_phi(1.0), 0.0);
        assert_eq!(p.d_phi(-1.0 + 1e-300), 0.0);
    }

    #[test]
    fn blocks_are_periodic_on_the_coarse_cell() {
        let d = &directions(Family::Velocity)[0];
        let (n, sigma) = (256, 2);
        let b = MikadoBlock::new(d, 4.0, sigma, 5, 0.1, n, ResolutionPolicy::Warn).unwrap();
        let step = n / sigma as usize;
        for i2 in 0..n {
            for i1 in 0..n {
                let p = i1 + n * i2;
                let q = (i1 + step) % n + n * i2;
                let r = i1 + n * ((i2 + step) % n);
                assert!((b.phi[p] - b.phi[q]).abs() < 1e-12 && (b.phi[p] - b.phi[r]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strict_policy_rejects_coarse_grids() {
        let d = &directions(Family::Magnetic)[2];
        let err = MikadoBlock::new(d, 16.0, 2, 13, 0.0, 256, ResolutionPolicy::Strict).unwrap_err();
        assert!(matches!(err, Error::UnderResolved { n: 256, need: 3328 }));
    }

    #[test]
    fn shift_search_separates_or_fails() {
        let plan = plan_shifts(16.0, 2, ScalePolicy::PerFamily).unwrap();
        assert!(plan.min_clearance > 0.0);
        assert!(matches!(plan_shifts(1.0, 2, ScalePolicy::PerFamily), Err(Error::ShiftsOverlap(_))));
        let set = build_blocks(256, 8.0, 2, ScalePolicy::PerFamily, ResolutionPolicy::Warn).unwrap();
        let a = &set.velocity[2];
        let b = &set.magnetic[2];
        assert_eq!(block_intersection(a, b).support_measure, 0.0);
        let same = block_intersection(a, a);
        let single = a.support_fraction() * TWO_PI * TWO_PI;
        assert!((same.support_measure - single).abs() < 1e-12);
    }

    #[test]
    fn closed_form_route_holds_to_roundoff() {
        let d = &directions(Family::Velocity)[0];
        let b = MikadoBlock::new(d, 2.0, 1, 5, 0.0, 128, ResolutionPolicy::Strict).unwrap();
        let r = verify_block(&b);
        assert!(r.worst_closed_form() < 1e-13, "{r:?}");
    }
}
