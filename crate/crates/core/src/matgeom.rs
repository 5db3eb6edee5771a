//! Small symmetric matrices (n = 2, 3) and the convex-hull geometry of the
//! constraint set K_r of the Euler inclusion.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vectors always carry three slots; components beyond `n` stay zero.
pub type Vec3 = [f64; 3];

pub const EIG_TOL: f64 = 1e-10;
pub const BOUNDARY_TOL: f64 = 1e-10;

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn vadd(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn vsub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn vscale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Symmetric n×n matrix, upper triangle stored row-major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymMat {
    n: usize,
    e: [f64; 6],
}

impl SymMat {
    pub fn zeros(n: usize) -> Self {
        assert!(n == 2 || n == 3, "dimension must be 2 or 3");
        SymMat { n, e: [0.0; 6] }
    }

    pub fn identity(n: usize) -> Self {
        Self::scalar(n, 1.0)
    }

    pub fn scalar(n: usize, s: f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, s);
        }
        m
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, &x) in d.iter().enumerate() {
            m.set(i, i, x);
        }
        m
    }

    /// Build from the stored upper triangle (3 values for n=2, 6 for n=3).
    pub fn from_upper(n: usize, upper: &[f64]) -> Result<Self> {
        if n != 2 && n != 3 {
            return Err(Error::InvalidInput(format!("dimension {n} not in {{2,3}}")));
        }
        let len = n * (n + 1) / 2;
        if upper.len() != len {
            return Err(Error::DimensionMismatch {
                expected: len,
                got: upper.len(),
            });
        }
        if upper.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite matrix entry".into()));
        }
        let mut e = [0.0; 6];
        e[..len].copy_from_slice(upper);
        Ok(SymMat { n, e })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in i..n {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    /// a ⊗ a
    pub fn outer(n: usize, a: &Vec3) -> Self {
        Self::from_fn(n, |i, j| a[i] * a[j])
    }

    /// a ⊗ b + b ⊗ a
    pub fn sym_outer(n: usize, a: &Vec3, b: &Vec3) -> Self {
        Self::from_fn(n, |i, j| a[i] * b[j] + b[i] * a[j])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn upper(&self) -> &[f64] {
        &self.e[..self.n * (self.n + 1) / 2]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.e[idx(self.n, i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.e[idx(self.n, i, j)] = v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn matvec(&self, v: &Vec3) -> Vec3 {
        let mut out = [0.0; 3];
        for i in 0..self.n {
            out[i] = (0..self.n).map(|j| self.get(i, j) * v[j]).sum();
        }
        out
    }

    /// Frobenius inner product A : B.
    pub fn ddot(&self, other: &SymMat) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                s += self.get(i, j) * other.get(i, j);
            }
        }
        s
    }

    pub fn frob(&self) -> f64 {
        self.ddot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.upper().iter().fold(0.0, |a, &x| a.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.upper().iter().all(|x| x.is_finite())
    }

    pub fn to_full(&self) -> [[f64; 3]; 3] {
        let mut a = [[0.0; 3]; 3];
        for (i, row) in a.iter_mut().enumerate().take(self.n) {
            for (j, x) in row.iter_mut().enumerate().take(self.n) {
                *x = self.get(i, j);
            }
        }
        a
    }
}

#[inline]
fn idx(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    // rows 0..i of the upper triangle hold n, n-1, ... entries
    i * n - (i * i - i) / 2 + (j - i)
}

impl Add for SymMat {
    type Output = SymMat;
    fn add(mut self, o: SymMat) -> SymMat {
        self += o;
        self
    }
}

impl AddAssign for SymMat {
    fn add_assign(&mut self, o: SymMat) {
        debug_assert_eq!(self.n, o.n);
        for k in 0..6 {
            self.e[k] += o.e[k];
        }
    }
}

impl Sub for SymMat {
    type Output = SymMat;
    fn sub(mut self, o: SymMat) -> SymMat {
        self -= o;
        self
    }
}

impl SubAssign for SymMat {
    fn sub_assign(&mut self, o: SymMat) {
        debug_assert_eq!(self.n, o.n);
        for k in 0..6 {
            self.e[k] -= o.e[k];
        }
    }
}

impl Mul<f64> for SymMat {
    type Output = SymMat;
    fn mul(mut self, s: f64) -> SymMat {
        for x in self.e.iter_mut() {
            *x *= s;
        }
        self
    }
}

impl Neg for SymMat {
    type Output = SymMat;
    fn neg(self) -> SymMat {
        self * -1.0
    }
}

/// Symmetric matrix with (numerically) zero trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracelessSymMat(SymMat);

impl TracelessSymMat {
    pub fn new(m: SymMat) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::InvalidInput("non-finite matrix entry".into()));
        }
        if m.trace().abs() > 1e-12 * (1.0 + m.max_abs()) {
            return Err(Error::InvalidInput(format!(
                "trace {:.3e} is not zero",
                m.trace()
            )));
        }
        Ok(TracelessSymMat(m))
    }

    /// Remove the trace part.
    pub fn project(m: SymMat) -> Self {
        let n = m.n();
        TracelessSymMat(m - SymMat::scalar(n, m.trace() / n as f64))
    }

    pub fn zeros(n: usize) -> Self {
        TracelessSymMat(SymMat::zeros(n))
    }

    pub fn as_sym(&self) -> &SymMat {
        &self.0
    }

    pub fn into_sym(self) -> SymMat {
        self.0
    }
}

/// A point (V, U) of the state space ℝⁿ × 𝒮₀ⁿ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVU {
    pub v: Vec3,
    pub u: TracelessSymMat,
}

impl StateVU {
    pub fn n(&self) -> usize {
        self.u.as_sym().n()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HullQuery {
    pub state: StateVU,
    pub r0: SymMat,
    pub r: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HullClass {
    Interior,
    Boundary,
    Outside,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HullMembership {
    pub class: HullClass,
    pub margin: f64,
}

/// Eigen-decomposition; `values[..n]` descending, `vectors[k]` belongs to `values[k]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eig {
    pub n: usize,
    pub values: [f64; 3],
    pub vectors: [Vec3; 3],
}

pub fn eig_sym(m: &SymMat) -> Result<Eig> {
    if !m.is_finite() {
        return Err(Error::InvalidInput("non-finite matrix entry".into()));
    }
    Ok(if m.n() == 2 { eig2(m) } else { eig3(m) })
}

fn eig2(m: &SymMat) -> Eig {
    let (a, b, c) = (m.get(0, 0), m.get(0, 1), m.get(1, 1));
    let mean = 0.5 * (a + c);
    let rad = (0.5 * (a - c)).hypot(b);
    let theta = 0.5 * (2.0 * b).atan2(a - c);
    let (s, co) = theta.sin_cos();
    Eig {
        n: 2,
        values: [mean + rad, mean - rad, 0.0],
        vectors: [[co, s, 0.0], [-s, co, 0.0], [0.0; 3]],
    }
}

// cyclic Jacobi
fn eig3(m: &SymMat) -> Eig {
    let mut a = m.to_full();
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let scale = m.frob();
    for _sweep in 0..64 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        if off <= (1e-17 * scale).powi(2) || off == 0.0 {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = a[p][q];
            if apq == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let mut values = [0.0; 3];
    let mut vectors = [[0.0; 3]; 3];
    for (k, &i) in order.iter().enumerate() {
        values[k] = a[i][i];
        vectors[k] = [v[0][i], v[1][i], v[2][i]];
    }
    Eig {
        n: 3,
        values,
        vectors,
    }
}

/// Eigenvalues only (descending); no finiteness check.
pub fn eigvals(m: &SymMat) -> [f64; 3] {
    if m.n() == 2 {
        let (a, b, c) = (m.get(0, 0), m.get(0, 1), m.get(1, 1));
        let mean = 0.5 * (a + c);
        let rad = (0.5 * (a - c)).hypot(b);
        [mean + rad, mean - rad, 0.0]
    } else {
        eig3(m).values
    }
}

pub fn lambda_max(m: &SymMat) -> f64 {
    eigvals(m)[0]
}

pub fn lambda_min(m: &SymMat) -> f64 {
    eigvals(m)[m.n() - 1]
}

impl Eig {
    pub fn reconstruct(&self) -> SymMat {
        let mut m = SymMat::zeros(self.n);
        for k in 0..self.n {
            m += SymMat::outer(self.n, &self.vectors[k]) * self.values[k];
        }
        m
    }
}

fn check_dims(n: usize, other: usize) -> Result<()> {
    if n != other {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: other,
        });
    }
    Ok(())
}

/// e(V, U) = (n/2) λ_max(V⊗V − U − R₀).
pub fn e_fn(v: &Vec3, u: &TracelessSymMat, r0: &SymMat) -> Result<f64> {
    let n = r0.n();
    check_dims(n, u.as_sym().n())?;
    if v[n..].iter().any(|&x| x != 0.0) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: 3,
        });
    }
    let m = SymMat::outer(n, v) - *u.as_sym() - *r0;
    if !m.is_finite() {
        return Err(Error::InvalidInput("non-finite state".into()));
    }
    Ok(0.5 * n as f64 * lambda_max(&m))
}

fn check_psd(r0: &SymMat) -> Result<()> {
    let lmin = eig_sym(r0)?.values[r0.n() - 1];
    if lmin < -BOUNDARY_TOL {
        return Err(Error::InvalidInput(format!(
            "R0 is not positive semidefinite (lambda_min = {lmin:.3e})"
        )));
    }
    Ok(())
}

pub fn hull_membership(q: &HullQuery) -> Result<HullMembership> {
    if !(q.r >= 0.0) || !q.r.is_finite() {
        return Err(Error::InvalidInput(format!("speed r = {} must be >= 0", q.r)));
    }
    check_psd(&q.r0)?;
    let e = e_fn(&q.state.v, &q.state.u, &q.r0)?;
    let margin = 0.5 * (q.r * q.r - q.r0.trace()) - e;
    let class = if margin.abs() <= BOUNDARY_TOL {
        HullClass::Boundary
    } else if margin > 0.0 {
        HullClass::Interior
    } else {
        HullClass::Outside
    };
    Ok(HullMembership { class, margin })
}

/// Smallest speed s for which (V, U) lies in the closed hull: s² = 2e + tr R₀.
pub fn min_speed(v: &Vec3, u: &TracelessSymMat, r0: &SymMat) -> Result<f64> {
    check_psd(r0)?;
    let e = e_fn(v, u, r0)?;
    Ok((2.0 * e + r0.trace()).max(0.0).sqrt())
}

pub fn opnorm_inf(m: &SymMat) -> f64 {
    let ev = eigvals(m);
    ev[..m.n()].iter().fold(0.0, |a, &x| a.max(x.abs()))
}

pub fn is_positive_definite(m: &SymMat, margin: f64) -> bool {
    lambda_min(m) > margin
}

/// The point of K_r above a velocity with |V| = r.
pub fn sphere_state(v: &Vec3, r0: &SymMat, r: f64) -> StateVU {
    let n = r0.n();
    let u = SymMat::outer(n, v) - *r0 - SymMat::scalar(n, (r * r - r0.trace()) / n as f64);
    StateVU {
        v: *v,
        u: TracelessSymMat::project(u),
    }
}

/// C = U + R₀ + ((r² − tr R₀)/n) I − V⊗V. The hull is {C ⪰ 0}, and the
/// hull margin equals (n/2) λ_min(C).
pub fn hull_covariance(state: &StateVU, r0: &SymMat, r: f64) -> SymMat {
    let n = r0.n();
    *state.u.as_sym() + *r0 + SymMat::scalar(n, (r * r - r0.trace()) / n as f64)
        - SymMat::outer(n, &state.v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_sym(rng: &mut ChaCha8Rng, n: usize, s: f64) -> SymMat {
        SymMat::from_fn(n, |_, _| rng.random_range(-s..s))
    }

    fn rand_psd(rng: &mut ChaCha8Rng, n: usize) -> SymMat {
        let a = rand_sym(rng, n, 1.0);
        let mut m = SymMat::zeros(n);
        for i in 0..n {
            for j in i..n {
                let s: f64 = (0..n).map(|k| a.get(i, k) * a.get(k, j)).sum();
                m.set(i, j, s);
            }
        }
        m
    }

    fn charpoly(m: &SymMat, x: f64) -> f64 {
        let a = m.to_full();
        if m.n() == 2 {
            (x - a[0][0]) * (x - a[1][1]) - a[0][1] * a[1][0]
        } else {
            let b = |i: usize, j: usize| if i == j { x - a[i][j] } else { -a[i][j] };
            b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1))
                - b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0))
                + b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0))
        }
    }

    // sign-change scan plus bisection on the characteristic polynomial
    fn poly_roots(m: &SymMat) -> Option<Vec<f64>> {
        let n = m.n();
        let bound = 1.0 + (0..n)
            .map(|i| (0..n).map(|j| m.get(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let steps = 20000;
        let mut roots = Vec::new();
        let mut x0 = bound;
        let mut f0 = charpoly(m, x0);
        for s in 1..=steps {
            let x1 = bound - 2.0 * bound * s as f64 / steps as f64;
            let f1 = charpoly(m, x1);
            if f0 == 0.0 {
                roots.push(x0);
            } else if f0 * f1 < 0.0 {
                let (mut lo, mut hi) = (x1, x0);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if charpoly(m, mid) * charpoly(m, hi) <= 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                roots.push(0.5 * (lo + hi));
            }
            x0 = x1;
            f0 = f1;
        }
        (roots.len() == n).then_some(roots)
    }

    #[test]
    fn index_layout_is_row_major_upper() {
        let m = SymMat::from_upper(3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(0, 1), 2.0);
        assert_eq!(m.get(2, 0), 3.0);
        assert_eq!(m.get(1, 1), 4.0);
        assert_eq!(m.get(2, 1), 5.0);
        assert_eq!(m.get(2, 2), 6.0);
        let m = SymMat::from_upper(2, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.get(1, 0), 2.0);
        assert_eq!(m.get(1, 1), 3.0);
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let e = eig_sym(&SymMat::identity(2)).unwrap();
        assert_eq!(&e.values[..2], &[1.0, 1.0]);
        let e = eig_sym(&SymMat::diag(&[1.0, 3.0])).unwrap();
        assert_eq!(&e.values[..2], &[3.0, 1.0]);
        let e = eig_sym(&SymMat::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(&e.values[..2], &[3.0, 1.0]);
        let e = eig_sym(&SymMat::diag(&[2.0, -1.0, 5.0])).unwrap();
        assert_eq!(&e.values, &[5.0, 2.0, -1.0]);
    }

    #[test]
    fn eig_rejects_nan() {
        let mut m = SymMat::identity(2);
        m.set(0, 1, f64::NAN);
        assert!(matches!(eig_sym(&m), Err(Error::InvalidInput(_))));
        assert!(SymMat::from_upper(2, &[1.0, f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn eig_matches_characteristic_polynomial_roots() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        for trial in 0..400 {
            let n = 2 + trial % 2;
            let m = rand_sym(&mut rng, n, 3.0);
            let Some(mut roots) = poly_roots(&m) else { continue };
            roots.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let e = eig_sym(&m).unwrap();
            for k in 0..n {
                assert!((e.values[k] - roots[k]).abs() < 1e-8, "{:?} vs {:?}", e.values, roots);
            }
            checked += 1;
        }
        assert!(checked > 350);
    }

    #[test]
    fn e_fn_examples() {
        let z = TracelessSymMat::zeros(2);
        assert_eq!(e_fn(&[0.0; 3], &z, &SymMat::zeros(2)).unwrap(), 0.0);
        assert!((e_fn(&[1.0, 0.0, 0.0], &z, &SymMat::zeros(2)).unwrap() - 1.0).abs() < 1e-15);
        assert!((e_fn(&[0.0; 3], &z, &SymMat::identity(2)).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            e_fn(&[0.0; 3], &TracelessSymMat::zeros(3), &SymMat::identity(2)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn hull_examples() {
        let q = HullQuery {
            state: StateVU {
                v: [0.0; 3],
                u: TracelessSymMat::zeros(2),
            },
            r0: SymMat::identity(2),
            r: 2.0,
        };
        let h = hull_membership(&q).unwrap();
        assert_eq!(h.class, HullClass::Interior);
        assert!((h.margin - 2.0).abs() < 1e-14);

        let r0 = SymMat::diag(&[0.7, 0.2]);
        let r = 1.3;
        let v = [r * 0.6, r * 0.8, 0.0];
        let q = HullQuery {
            state: sphere_state(&v, &r0, r),
            r0,
            r,
        };
        assert_eq!(hull_membership(&q).unwrap().class, HullClass::Boundary);

        let q = HullQuery {
            state: StateVU {
                v: [2.0, 0.0, 0.0],
                u: TracelessSymMat::zeros(2),
            },
            r0: SymMat::zeros(2),
            r: 1.0,
        };
        assert_eq!(hull_membership(&q).unwrap().class, HullClass::Outside);

        let mut q2 = q;
        q2.r0 = SymMat::diag(&[1.0, -0.5]);
        assert!(hull_membership(&q2).is_err());
        q2.r0 = SymMat::zeros(2);
        q2.r = -1.0;
        assert!(hull_membership(&q2).is_err());
    }

    #[test]
    fn min_speed_examples() {
        let z = TracelessSymMat::zeros(2);
        assert_eq!(min_speed(&[0.0; 3], &z, &SymMat::zeros(2)).unwrap(), 0.0);
        assert!(min_speed(&[0.0; 3], &z, &SymMat::identity(2)).unwrap().abs() < 1e-7);
        let s = min_speed(&[1.0, 0.0, 0.0], &z, &SymMat::zeros(2)).unwrap();
        assert!((s - 2f64.sqrt()).abs() < 1e-14);
        let q = HullQuery {
            state: StateVU {
                v: [1.0, 0.0, 0.0],
                u: z,
            },
            r0: SymMat::zeros(2),
            r: s,
        };
        assert_eq!(hull_membership(&q).unwrap().class, HullClass::Boundary);
    }

    #[test]
    fn opnorm_and_definiteness_examples() {
        assert_eq!(opnorm_inf(&SymMat::identity(3)), 1.0);
        assert_eq!(opnorm_inf(&SymMat::diag(&[2.0, -3.0])), 3.0);
        assert!(is_positive_definite(&SymMat::identity(2), 0.5));
        assert!(!is_positive_definite(&SymMat::zeros(2), 0.0));
        assert!(!is_positive_definite(&SymMat::diag(&[2.0, 1e-3]), 1e-2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = rand_sym(&mut rng, 3, 2.0);
            let e = eig_sym(&m).unwrap();
            let want = e.values.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            assert!((opnorm_inf(&m) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn traceless_checks() {
        assert!(TracelessSymMat::new(SymMat::identity(2)).is_err());
        assert!(TracelessSymMat::new(SymMat::diag(&[1.0, -1.0])).is_ok());
        let p = TracelessSymMat::project(SymMat::diag(&[3.0, 1.0, 2.0]));
        assert!(p.as_sym().trace().abs() < 1e-15);
    }

    #[test]
    fn covariance_margin_relation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..200 {
            let n = 2 + trial % 2;
            let r0 = rand_psd(&mut rng, n);
            let mut v = [0.0; 3];
            for x in v.iter_mut().take(n) {
                *x = rng.random_range(-1.0..1.0);
            }
            let u = TracelessSymMat::project(rand_sym(&mut rng, n, 1.0));
            let r = rng.random_range(0.0..3.0);
            let state = StateVU { v, u };
            let h = hull_membership(&HullQuery { state, r0, r }).unwrap();
            let c = hull_covariance(&state, &r0, r);
            assert!((h.margin - 0.5 * n as f64 * lambda_min(&c)).abs() < 1e-10);
            assert!((c.trace() - (r * r - dot(&v, &v))).abs() < 1e-12);
        }
    }

    fn arb_case() -> impl Strategy<Value = (usize, Vec<f64>)> {
        (2usize..=3, proptest::collection::vec(-2.0f64..2.0, 40))
    }

    fn build(n: usize, xs: &[f64]) -> (SymMat, StateVU, StateVU) {
        let a = SymMat::from_fn(n, |i, j| xs[i * 3 + j]);
        let mut r0 = SymMat::zeros(n);
        for i in 0..n {
            for j in i..n {
                r0.set(i, j, (0..n).map(|k| a.get(i, k) * a.get(k, j)).sum());
            }
        }
        let s1 = StateVU {
            v: [xs[10], xs[11], if n == 3 { xs[12] } else { 0.0 }],
            u: TracelessSymMat::project(SymMat::from_fn(n, |i, j| xs[13 + i * 3 + j])),
        };
        let s2 = StateVU {
            v: [xs[22], xs[23], if n == 3 { xs[24] } else { 0.0 }],
            u: TracelessSymMat::project(SymMat::from_fn(n, |i, j| xs[25 + i * 3 + j])),
        };
        (r0, s1, s2)
    }

    proptest! {
        #[test]
        fn e_is_convex((n, xs) in arb_case(), th in 0.0f64..1.0) {
            let (r0, s1, s2) = build(n, &xs);
            let mid_v = vadd(&vscale(&s1.v, th), &vscale(&s2.v, 1.0 - th));
            let mid_u = TracelessSymMat::project(*s1.u.as_sym() * th + *s2.u.as_sym() * (1.0 - th));
            let lhs = e_fn(&mid_v, &mid_u, &r0).unwrap();
            let rhs = th * e_fn(&s1.v, &s1.u, &r0).unwrap() + (1.0 - th) * e_fn(&s2.v, &s2.u, &r0).unwrap();
            prop_assert!(lhs <= rhs + 1e-10);
        }

        #[test]
        fn lower_and_opnorm_bounds((n, xs) in arb_case()) {
            let (r0, s, _) = build(n, &xs);
            let e = e_fn(&s.v, &s.u, &r0).unwrap();
            let lower = 0.5 * (dot(&s.v, &s.v) - r0.trace());
            prop_assert!(lower <= e + 1e-10);
            let nf = n as f64;
            let bound = 2.0 * (nf - 1.0) / nf * e + (nf - 1.0) * opnorm_inf(&r0);
            prop_assert!(opnorm_inf(s.u.as_sym()) <= bound + 1e-10);
        }

        #[test]
        fn lower_bound_equality_case((n, xs) in arb_case()) {
            let (r0, s, _) = build(n, &xs);
            let v2 = dot(&s.v, &s.v);
            let u = SymMat::outer(n, &s.v) - r0 - SymMat::scalar(n, (v2 - r0.trace()) / n as f64);
            let e = e_fn(&s.v, &TracelessSymMat::project(u), &r0).unwrap();
            prop_assert!((e - 0.5 * (v2 - r0.trace())).abs() < 1e-8);
        }

        #[test]
        fn min_speed_is_consistent((n, xs) in arb_case()) {
            let (r0, s, _) = build(n, &xs);
            let ms = min_speed(&s.v, &s.u, &r0).unwrap();
            let q = |r| hull_membership(&HullQuery { state: s, r0, r }).unwrap().class;
            prop_assert_ne!(q(ms + 1e-6), HullClass::Outside);
            if ms > 1e-3 {
                prop_assert_eq!(q(ms - 1e-3), HullClass::Outside);
            }
        }

        #[test]
        fn eig_reconstructs(n in 2usize..=3, xs in proptest::collection::vec(-1e3f64..1e3, 9)) {
            let m = SymMat::from_fn(n, |i, j| xs[i * n + j]);
            let e = eig_sym(&m).unwrap();
            let err = (e.reconstruct() - m).frob();
            prop_assert!(err <= EIG_TOL * (1.0 + m.frob()));
            for k in 1..n {
                prop_assert!(e.values[k - 1] >= e.values[k]);
            }
            for i in 0..n {
                for j in 0..n {
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((dot(&e.vectors[i], &e.vectors[j]) - want).abs() < 1e-12);
                }
            }
        }
    }
}
