//! Direction families, the linear map from directions to symmetric matrices, its
//! radius of positivity, and the amplitude cutoff function.

use nalgebra::{SMatrix, SVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A symmetric 3x3 matrix stored as entries 11, 22, 33, 12, 13, 23.
pub type Sym3 = [f64; 6];

pub const IDENTITY: Sym3 = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0];

pub fn frobenius(m: &Sym3) -> f64 {
    (m[0] * m[0] + m[1] * m[1] + m[2] * m[2] + 2.0 * (m[3] * m[3] + m[4] * m[4] + m[5] * m[5])).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    /// Directions carrying the velocity perturbation.
    Velocity,
    /// Directions carrying the magnetic perturbation.
    Magnetic,
}

impl Family {
    pub fn all() -> [Family; 2] {
        [Family::Velocity, Family::Magnetic]
    }

    /// The Pythagorean triple `(p, q, d)` the family is built from.
    fn triple(self) -> (i64, i64, i64) {
        match self {
            Family::Velocity => (3, 4, 5),
            Family::Magnetic => (5, 12, 13),
        }
    }

    pub fn denominator(self) -> i64 {
        self.triple().2
    }
}

/// How the common integer scale of a family is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalePolicy {
    /// 5 for the velocity family and 13 for the magnetic family.
    PerFamily,
    /// 65 for both families.
    Global,
}

impl ScalePolicy {
    pub fn n_lambda(self, family: Family) -> i64 {
        match self {
            ScalePolicy::PerFamily => family.denominator(),
            ScalePolicy::Global => 65,
        }
    }
}

/// One direction `k` with its orthonormal frame and planar projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub family: Family,
    pub index: usize,
    pub label: String,
    /// Common denominator of `k`, `a` and `k x a`.
    pub den: i64,
    pub k_num: [i64; 3],
    pub a_num: [i64; 3],
    pub k_cross_a_num: [i64; 3],
    /// Planar unit vectors as numerators over `planar_den`.
    pub planar_den: i64,
    pub k_tilde_num: [i64; 2],
    pub a_tilde_num: [i64; 2],
    pub k: [f64; 3],
    pub a: [f64; 3],
    pub k_cross_a: [f64; 3],
    pub k_tilde: [f64; 2],
    pub a_tilde: [f64; 2],
}

fn cross(a: [i64; 3], b: [i64; 3]) -> [i64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn label(num: [i64; 3], den: i64) -> String {
    let mut s = String::new();
    for (i, &c) in num.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let sign = if c < 0 { "-" } else if s.is_empty() { "" } else { "+" };
        s.push_str(&format!("{sign}{}/{den}e{}", c.abs(), i + 1));
    }
    s
}

impl Direction {
    fn build(family: Family, index: usize, k: [i64; 3], a: [i64; 3], planar: (i64, [i64; 2], [i64; 2])) -> Self {
        let den = family.denominator();
        let kxa = cross(k, a);
        let k_cross_a_num = kxa.map(|v| v / den);
        let f = |v: [i64; 3]| v.map(|c| c as f64 / den as f64);
        let (pd, kt, at) = planar;
        Direction {
            family,
            index,
            label: label(k, den),
            den,
            k_num: k,
            a_num: a,
            k_cross_a_num,
            planar_den: pd,
            k_tilde_num: kt,
            a_tilde_num: at,
            k: f(k),
            a: f(a),
            k_cross_a: f(k_cross_a_num),
            k_tilde: kt.map(|c| c as f64 / pd as f64),
            a_tilde: at.map(|c| c as f64 / pd as f64),
        }
    }

    /// `k (x) k` as a [`Sym3`].
    pub fn kk(&self) -> Sym3 {
        let k = self.k;
        [k[0] * k[0], k[1] * k[1], k[2] * k[2], k[0] * k[1], k[0] * k[2], k[1] * k[2]]
    }

    /// Integer wave vector `sigma * n_lambda * a_tilde`, if integral.
    pub fn lattice_vector(&self, sigma: i64, n_lambda: i64) -> Option<[i64; 2]> {
        let scale = sigma * n_lambda;
        let m = self.a_tilde_num.map(|c| c * scale);
        if m.iter().all(|v| v % self.planar_den == 0) {
            Some(m.map(|v| v / self.planar_den))
        } else {
            None
        }
    }
}

/// The six directions of a family, in a fixed order.
pub fn directions(family: Family) -> Vec<Direction> {
    let (p, q, d) = family.triple();
    let one = (1, [1, 0], [0, 1]);
    let two = (1, [0, 1], [1, 0]);
    vec![
        Direction::build(family, 0, [p, q, 0], [q, -p, 0], (d, [p, q], [q, -p])),
        Direction::build(family, 1, [p, -q, 0], [q, p, 0], (d, [p, -q], [q, p])),
        Direction::build(family, 2, [q, 0, p], [0, d, 0], one),
        Direction::build(family, 3, [q, 0, -p], [0, d, 0], one),
        Direction::build(family, 4, [0, p, q], [d, 0, 0], two),
        Direction::build(family, 5, [0, p, -q], [d, 0, 0], two),
    ]
}

/// Maps weights `gamma_k^2` to `sum_k gamma_k^2 k (x) k` and back.
#[derive(Debug, Clone)]
pub struct GammaSolver {
    pub family: Family,
    pub dirs: Vec<Direction>,
    pub matrix: SMatrix<f64, 6, 6>,
    pub inverse: SMatrix<f64, 6, 6>,
}

impl GammaSolver {
    pub fn new(family: Family) -> Self {
        let dirs = directions(family);
        let mut matrix = SMatrix::<f64, 6, 6>::zeros();
        for (col, d) in dirs.iter().enumerate() {
            for (row, v) in d.kk().iter().enumerate() {
                matrix[(row, col)] = *v;
            }
        }
        let inverse = matrix.lu().try_inverse().expect("direction matrix is invertible");
        GammaSolver { family, dirs, matrix, inverse }
    }

    /// Weights `gamma_k^2` with `sum_k gamma_k^2 k (x) k = m`.
    pub fn gamma_sq(&self, m: &Sym3) -> [f64; 6] {
        let v = self.inverse * SVector::<f64, 6>::from_column_slice(m);
        [v[0], v[1], v[2], v[3], v[4], v[5]]
    }

    /// `sum_k w_k k (x) k`.
    pub fn reconstruct(&self, w: &[f64; 6]) -> Sym3 {
        let v = self.matrix * SVector::<f64, 6>::from_column_slice(w);
        [v[0], v[1], v[2], v[3], v[4], v[5]]
    }

    /// Square-root weights for a matrix inside the `delta`-ball around the identity.
    pub fn gamma(&self, m: &Sym3, delta: f64) -> Result<[f64; 6]> {
        let diff: Sym3 = std::array::from_fn(|i| m[i] - IDENTITY[i]);
        let dist = frobenius(&diff);
        if dist > delta * (1.0 + 1e-12) {
            return Err(Error::OutsideBall { dist, delta });
        }
        let g2 = self.gamma_sq(m);
        for (k, v) in g2.iter().enumerate() {
            if *v <= 0.0 {
                return Err(Error::NegativeGamma(*v, k));
            }
        }
        Ok(g2.map(f64::sqrt))
    }

    /// Largest `r` with every weight positive on the Frobenius ball of radius `r` around
    /// the identity, computed from the dual norms of the rows of the inverse map.
    pub fn exact_radius(&self) -> f64 {
        let at_identity = self.gamma_sq(&IDENTITY);
        (0..6)
            .map(|k| {
                let row = self.inverse.row(k);
                let dual = (row[0] * row[0]
                    + row[1] * row[1]
                    + row[2] * row[2]
                    + (row[3] * row[3] + row[4] * row[4] + row[5] * row[5]) / 2.0)
                    .sqrt();
                at_identity[k] / dual
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Result of the sampled radius search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaCalibration {
    pub family: Family,
    pub n_samples: usize,
    pub seed: u64,
    pub safety: f64,
    /// Largest radius found positive on every sampled direction.
    pub sampled_radius: f64,
    /// `safety * sampled_radius`.
    pub delta: f64,
    pub exact_radius: f64,
    pub matrix: Vec<Vec<f64>>,
    pub inverse: Vec<Vec<f64>>,
}

pub const DELTA_SAFETY: f64 = 0.9;
pub const MIN_DELTA_SAMPLES: usize = 10_000;

/// A Frobenius-unit symmetric direction, uniform on the sphere.
fn random_unit_sym(rng: &mut ChaCha8Rng) -> Sym3 {
    let mut m = [0.0; 6];
    for (i, v) in m.iter_mut().enumerate() {
        let g: f64 = StandardNormal.sample(rng);
        *v = if i < 3 { g } else { g / std::f64::consts::SQRT_2 };
    }
    let f = frobenius(&m);
    m.map(|v| v / f)
}

/// Bisection for the largest radius on which all sampled directions keep positive weights.
pub fn calibrate_delta(family: Family, n_samples: usize, seed: u64) -> Result<DeltaCalibration> {
    if n_samples < MIN_DELTA_SAMPLES {
        return Err(Error::InsufficientSamples(n_samples));
    }
    let solver = GammaSolver::new(family);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Sym3> = (0..n_samples).map(|_| random_unit_sym(&mut rng)).collect();
    let feasible = |r: f64| {
        samples.iter().all(|e| {
            let m: Sym3 = std::array::from_fn(|i| IDENTITY[i] + r * e[i]);
            solver.gamma_sq(&m).iter().all(|&g| g > 0.0)
        })
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while feasible(hi) {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let to_rows = |m: &SMatrix<f64, 6, 6>| (0..6).map(|r| (0..6).map(|c| m[(r, c)]).collect()).collect();
    Ok(DeltaCalibration {
        family,
        n_samples,
        seed,
        safety: DELTA_SAFETY,
        sampled_radius: lo,
        delta: DELTA_SAFETY * lo,
        exact_radius: solver.exact_radius(),
        matrix: to_rows(&solver.matrix),
        inverse: to_rows(&solver.inverse),
    })
}

/// Quintic smoothstep `6t^5 - 15t^4 + 10t^3`, clamped to `[0, 1]`.
pub fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (t * (6.0 * t - 15.0) + 10.0)
}

/// Amplitude cutoff: `2 r0 / delta` below `r0`, `4 x / delta` above `2 r0`, blended in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Amplitude {
    pub r0: f64,
    pub delta: f64,
}

impl Amplitude {
    pub fn new(r0: f64, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !(r0 >= 0.0) {
            return Err(Error::Param(format!("amplitude needs delta > 0 and r0 >= 0 (got {delta}, {r0})")));
        }
        Ok(Amplitude { r0, delta })
    }

    pub fn chi(&self, x: f64) -> f64 {
        let (r0, d) = (self.r0, self.delta);
        let x = x.abs();
        if x <= r0 {
            2.0 * r0 / d
        } else if x >= 2.0 * r0 {
            4.0 * x / d
        } else {
            let s = smoothstep((x - r0) / r0);
            (1.0 - s) * 2.0 * r0 / d + s * 4.0 * x / d
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::BigRational;
    use proptest::prelude::*;

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    /// Exact determinant by fraction-valued elimination.
    fn det_exact(mut m: Vec<Vec<BigRational>>) -> BigRational {
        let n = m.len();
        let mut det = rat(1, 1);
        for c in 0..n {
            let Some(p) = (c..n).find(|&r| m[r][c] != rat(0, 1)) else { return rat(0, 1) };
            if p != c {
                m.swap(p, c);
                det = -det;
            }
            det *= m[c][c].clone();
            for r in c + 1..n {
                let f = m[r][c].clone() / m[c][c].clone();
                for k in c..n {
                    let v = m[c][k].clone() * f.clone();
                    m[r][k] -= v;
                }
            }
        }
        det
    }

    #[test]
    fn frames_are_orthonormal_and_integral() {
        for fam in Family::all() {
            for d in directions(fam) {
                let dot = |a: [i64; 3], b: [i64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
                let dd = d.den * d.den;
                assert_eq!(dot(d.k_num, d.k_num), dd);
                assert_eq!(dot(d.a_num, d.a_num), dd);
                assert_eq!(dot(d.k_num, d.a_num), 0);
                assert_eq!(dot(d.k_cross_a_num, d.k_cross_a_num), dd);
                let pd = d.planar_den;
                assert_eq!(d.k_tilde_num[0] * d.a_tilde_num[0] + d.k_tilde_num[1] * d.a_tilde_num[1], 0);
                assert_eq!(d.a_tilde_num[0].pow(2) + d.a_tilde_num[1].pow(2), pd * pd);
                assert!(d.lattice_vector(1, fam.denominator()).is_some());
                assert!(d.lattice_vector(1, 65).is_some());
            }
        }
    }

    #[test]
    fn half_sum_of_squares_is_identity() {
        for fam in Family::all() {
            let mut s = [0.0; 6];
            for d in directions(fam) {
                for (a, b) in s.iter_mut().zip(d.kk()) {
                    *a += 0.5 * b;
                }
            }
            for (a, b) in s.iter().zip(IDENTITY) {
                assert!((a - b).abs() < 1e-15);
            }
            let g = GammaSolver::new(fam).gamma(&IDENTITY, 0.1).unwrap();
            for v in g {
                assert!((v - 0.5f64.sqrt()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn velocity_map_has_known_diagonal_block() {
        // In the variables gamma_+^2 + gamma_-^2 of each sign pair, the diagonal entries of
        // sum gamma^2 k (x) k form a 3x3 block.
        let dirs = directions(Family::Velocity);
        let block: Vec<Vec<BigRational>> = (0..3)
            .map(|row| (0..3).map(|pair| rat(dirs[2 * pair].k_num[row].pow(2), 25)).collect())
            .collect();
        assert_eq!(det_exact(block), rat(-4825, 25 * 25 * 25));
        let full: Vec<Vec<BigRational>> = (0..6)
            .map(|row| {
                let (i, j) = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)][row];
                dirs.iter().map(|d| rat(d.k_num[i] * d.k_num[j], 25)).collect()
            })
            .collect();
        let exact: f64 = {
            let d = det_exact(full);
            let (n, q) = (d.numer().to_string().parse::<f64>().unwrap(), d.denom().to_string().parse::<f64>().unwrap());
            n / q
        };
        let lu = GammaSolver::new(Family::Velocity).matrix.determinant();
        assert!((lu - exact).abs() <= 1e-12 * exact.abs());
    }

    #[test]
    fn calibration_brackets_exact_radius() {
        assert!(matches!(calibrate_delta(Family::Velocity, 500, 1), Err(Error::InsufficientSamples(500))));
        for fam in Family::all() {
            let c = calibrate_delta(fam, 20_000, 7).unwrap();
            // Sampling can only miss the worst direction, so it overestimates; the safety
            // factor must bring it back inside.
            assert!(c.sampled_radius >= c.exact_radius * (1.0 - 1e-12));
            assert!(c.sampled_radius <= 1.05 * c.exact_radius, "{c:?}");
            assert!(c.delta < c.exact_radius);
            assert!((c.delta - 0.9 * c.sampled_radius).abs() < 1e-15);
        }
    }

    #[test]
    fn chi_matches_branches() {
        let a = Amplitude::new(2.0, 0.5).unwrap();
        assert_eq!(a.chi(1.0), 8.0);
        assert_eq!(a.chi(5.0), 40.0);
        assert_eq!(a.chi(-5.0), 40.0);
    }

    proptest! {
        #[test]
        fn chi_is_monotone_and_dominates(r0 in 0.01f64..10.0, delta in 0.01f64..1.0, x in 0.0f64..40.0, dx in 0.0f64..1.0) {
            let a = Amplitude::new(r0, delta).unwrap();
            prop_assert!(a.chi(x + dx) >= a.chi(x) * (1.0 - 1e-15));
            prop_assert!(a.chi(x) >= x / delta);
        }

        #[test]
        fn reconstruction_inverts_solve(e in proptest::array::uniform6(-1.0f64..1.0)) {
            for fam in Family::all() {
                let s = GammaSolver::new(fam);
                let g = s.gamma_sq(&e);
                let back = s.reconstruct(&g);
                for (a, b) in back.iter().zip(e) {
                    prop_assert!((a - b).abs() < 1e-13);
                }
            }
        }
    }
}
