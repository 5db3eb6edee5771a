//! Admissible segments and localized oscillatory plane waves for the linear
//! system div v = 0, ∂ₜv + div u = 0.
//!
//! A wave lives in space-time ℝᵈ, d = n + 1, as the symmetric matrix
//! W = [[u, v], [vᵀ, 0]], so the linear system reads div W = 0. The plane
//! wave amplitude is A = ã⊗ã − b̃⊗b̃ with ã = (a, 1), b̃ = (b, 1), and its
//! frequency ζ = (a + b, −(r² + a·b)) satisfies Aζ = 0. Localizing with a
//! cutoff χ leaves an O(1) error A∇χ sin ψ which a first-order corrector
//! 𝓑(A∇χ) cos ψ /(2πk) removes, leaving an O(1/k) residual.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::matgeom::{
    dot, eig_sym, hull_covariance, hull_membership, lambda_min, norm, vadd, vscale, vsub,
    HullClass, HullQuery, StateVU, SymMat, TracelessSymMat, Vec3,
};

/// L¹ constant: ∫|v| ≥ ALPHA·λ|b − a| for every localized wave.
pub const ALPHA: f64 = 0.5;

/// Pairs with |a + b| below this fraction of r are treated as antipodal.
const ANTIPODAL_TOL: f64 = 1e-3;

/// Safety factor applied to quadrature-derived cutoff constants.
const BOUND_SAFETY: f64 = 1.05;

type Mat4 = [[f64; 4]; 4];

/// Carathéodory count N₀ = n(n+3)/2 − 1.
pub fn n0(n: usize) -> usize {
    n * (n + 3) / 2 - 1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleSegment {
    pub center: StateVU,
    pub halfdir: StateVU,
    pub a: Vec3,
    pub b: Vec3,
    pub lambda: f64,
    pub r: f64,
    pub r0: SymMat,
}

impl AdmissibleSegment {
    pub fn n(&self) -> usize {
        self.r0.n()
    }

    pub fn endpoints(&self) -> (StateVU, StateVU) {
        let p = StateVU {
            v: vadd(&self.center.v, &self.halfdir.v),
            u: TracelessSymMat::project(*self.center.u.as_sym() + *self.halfdir.u.as_sym()),
        };
        let m = StateVU {
            v: vsub(&self.center.v, &self.halfdir.v),
            u: TracelessSymMat::project(*self.center.u.as_sym() - *self.halfdir.u.as_sym()),
        };
        (p, m)
    }

    /// |V-part of halfdir| = λ|a − b|.
    pub fn v_length(&self) -> f64 {
        norm(&self.halfdir.v)
    }

    /// Lower bound (r² − |V|²)/(4N₀r) on λ|a − b|.
    pub fn length_bound(&self) -> f64 {
        let v2 = dot(&self.center.v, &self.center.v);
        (self.r * self.r - v2) / (4.0 * n0(self.n()) as f64 * self.r)
    }
}

/// How hard `find_segment_with` works on each candidate pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentSearch {
    /// every candidate is stretched to the half-margin limit by bisection
    Exhaustive,
    /// decomposition weights give the amplitude; bisection only for
    /// rotated partners of antipodal pairs
    Fast,
}

pub fn find_segment(state: &StateVU, r0: &SymMat, r: f64) -> Result<AdmissibleSegment> {
    find_segment_with(state, r0, r, SegmentSearch::Exhaustive)
}

pub fn find_segment_with(
    state: &StateVU,
    r0: &SymMat,
    r: f64,
    search: SegmentSearch,
) -> Result<AdmissibleSegment> {
    let n = r0.n();
    let hm = hull_membership(&HullQuery {
        state: *state,
        r0: *r0,
        r,
    })?;
    if hm.class != HullClass::Interior {
        return Err(Error::Precondition(format!(
            "state is not interior to the hull (margin {:.3e})",
            hm.margin
        )));
    }
    let c = hull_covariance(state, r0, r);
    let cmin = lambda_min(&c);
    let eig = eig_sym(&c)?;
    let v = state.v;
    let trc = c.trace();

    // exact decomposition: along each eigenline of C, two points of the sphere
    let mut pts: Vec<(Vec3, f64)> = Vec::with_capacity(2 * n);
    for k in 0..n {
        let ck = eig.values[k];
        if ck <= 0.0 {
            continue;
        }
        let e = eig.vectors[k];
        let ve = dot(&v, &e);
        let disc = (ve * ve + r * r - dot(&v, &v)).max(0.0).sqrt();
        let (tp, tm) = (-ve + disc, -ve - disc);
        if tp - tm <= 0.0 {
            continue;
        }
        let q = ck / trc;
        for (t, p) in [(tp, -tm / (tp - tm)), (tm, tp / (tp - tm))] {
            let z = vadd(&v, &vscale(&e, t));
            let zn = norm(&z);
            let z = if zn > 0.0 { vscale(&z, r / zn) } else { z };
            pts.push((z, q * p));
        }
    }

    let target = 0.5 * cmin;
    let iters = match search {
        SegmentSearch::Exhaustive => 48,
        SegmentSearch::Fast => 24,
    };
    let angles: &[f64] = match search {
        SegmentSearch::Exhaustive => &[0.03, -0.03, 0.1, -0.1, 0.3, -0.3, 0.6, -0.6],
        SegmentSearch::Fast => &[0.15, -0.15, 0.4, -0.4],
    };
    let mut best: Option<(f64, Vec3, Vec3, f64)> = None;
    let mut consider = |a: Vec3, b: Vec3, lam: f64| {
        let score = lam * norm(&vsub(&a, &b));
        if score > 0.0 && best.is_none_or(|(s, ..)| score > s) {
            best = Some((score, a, b, lam));
        }
    };
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            let (a, mi) = pts[i];
            let (b, mj) = pts[j];
            if norm(&vsub(&a, &b)) <= 1e-8 * r {
                continue;
            }
            if norm(&vadd(&a, &b)) > ANTIPODAL_TOL * r {
                let lam = match search {
                    SegmentSearch::Exhaustive => half_margin_lambda(&c, &v, &a, &b, target, iters),
                    SegmentSearch::Fast => 0.5 * mi.min(mj),
                };
                consider(a, b, lam);
            } else {
                for p in perpendiculars(n, &b, &eig.vectors) {
                    for &phi in angles {
                        let bb = vadd(&vscale(&b, phi.cos()), &vscale(&p, r * phi.sin()));
                        let lam = half_margin_lambda(&c, &v, &a, &bb, target, iters);
                        consider(a, bb, lam);
                    }
                }
            }
        }
    }
    let Some((score, a, b, lambda)) = best else {
        return Err(Error::ConstructionFailed(
            "no admissible wave pair in the decomposition".into(),
        ));
    };
    let d = vsub(&a, &b);
    let seg = AdmissibleSegment {
        center: *state,
        halfdir: StateVU {
            v: vscale(&d, lambda),
            u: TracelessSymMat::project(
                (SymMat::outer(n, &a) - SymMat::outer(n, &b)) * lambda,
            ),
        },
        a,
        b,
        lambda,
        r,
        r0: *r0,
    };
    let bound = seg.length_bound();
    if score < bound {
        return Err(Error::ConstructionFailed(format!(
            "segment length {score:.3e} below bound {bound:.3e}"
        )));
    }
    let (p, m) = seg.endpoints();
    for e in [p, m] {
        let h = hull_membership(&HullQuery { state: e, r0: *r0, r })?;
        if h.margin <= 0.0 {
            return Err(Error::ConstructionFailed(format!(
                "segment endpoint not interior (margin {:.3e})",
                h.margin
            )));
        }
    }
    Ok(seg)
}

// unit vectors orthogonal to b drawn from the eigenbasis
fn perpendiculars(n: usize, b: &Vec3, basis: &[Vec3; 3]) -> Vec<Vec3> {
    let bn = norm(b);
    let bh = vscale(b, 1.0 / bn);
    let mut out: Vec<Vec3> = Vec::new();
    for e in basis.iter().take(n) {
        let mut p = vsub(e, &vscale(&bh, dot(e, &bh)));
        for q in &out {
            p = vsub(&p, &vscale(q, dot(&p, q)));
        }
        let pn = norm(&p);
        if pn > 1e-6 {
            out.push(vscale(&p, 1.0 / pn));
        }
        if out.len() == n - 1 {
            break;
        }
    }
    out
}

/// Largest λ with λ_min(C ± λE − λ²d⊗d) ≥ target at both endpoints.
fn half_margin_lambda(c: &SymMat, v: &Vec3, a: &Vec3, b: &Vec3, target: f64, iters: usize) -> f64 {
    let n = c.n();
    let d = vsub(a, b);
    let e = SymMat::outer(n, a) - SymMat::outer(n, b) - SymMat::sym_outer(n, v, &d);
    let q = SymMat::outer(n, &d);
    let ok = |lam: f64| {
        let base = *c - q * (lam * lam);
        lambda_min(&(base + e * lam)) >= target && lambda_min(&(base - e * lam)) >= target
    };
    let dn = norm(&d);
    if dn == 0.0 {
        return 0.0;
    }
    let mut hi = c.trace().sqrt() / dn;
    let mut lo = 0.0;
    let mut grow = 0;
    while ok(hi) && grow < 60 {
        lo = hi;
        hi *= 2.0;
        grow += 1;
    }
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneWaveCoeffs {
    pub n: usize,
    pub xi: Vec3,
    pub c: f64,
    pub amp_v: Vec3,
    pub amp_u: TracelessSymMat,
}

impl PlaneWaveCoeffs {
    /// (ampV·ξ, |c·ampV + ampU·ξ|)
    pub fn identity_residuals(&self) -> (f64, f64) {
        let uxi = self.amp_u.as_sym().matvec(&self.xi);
        let r = vadd(&vscale(&self.amp_v, self.c), &uxi);
        (dot(&self.amp_v, &self.xi).abs(), norm(&r))
    }
}

fn to_vec3(x: &[f64]) -> Vec3 {
    let mut v = [0.0; 3];
    v[..x.len()].copy_from_slice(x);
    v
}

pub fn plane_wave_coeffs(a: &[f64], b: &[f64]) -> Result<PlaneWaveCoeffs> {
    let n = a.len();
    if n != 2 && n != 3 {
        return Err(Error::InvalidInput(format!("dimension {n} not in {{2,3}}")));
    }
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: b.len(),
        });
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite wave state".into()));
    }
    let (a, b) = (to_vec3(a), to_vec3(b));
    let (ra, rb) = (norm(&a), norm(&b));
    if ra == 0.0 {
        return Err(Error::InvalidInput("wave states must have positive speed".into()));
    }
    if (ra - rb).abs() > 1e-10 * (1.0 + ra) {
        return Err(Error::InvalidInput(format!("|a| = {ra} differs from |b| = {rb}")));
    }
    if norm(&vsub(&a, &b)) <= 1e-8 * ra || norm(&vadd(&a, &b)) <= 1e-8 * ra {
        return Err(Error::DegenerateInput("wave pair has b = ±a".into()));
    }
    let r2 = 0.5 * (dot(&a, &a) + dot(&b, &b));
    Ok(PlaneWaveCoeffs {
        n,
        xi: vadd(&a, &b),
        c: -(r2 + dot(&a, &b)),
        amp_v: vsub(&a, &b),
        amp_u: TracelessSymMat::project(SymMat::outer(n, &a) - SymMat::outer(n, &b)),
    })
}

/// Smooth step g(q): 1 for q ≤ 1/4, 0 for q ≥ 1. Returns (g, g', g'').
pub fn bump(q: f64) -> (f64, f64, f64) {
    if q <= 0.25 {
        return (1.0, 0.0, 0.0);
    }
    if q >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let (p, m) = (q - 0.25, 1.0 - q);
    let w = -1.0 / p + 1.0 / m;
    let w1 = 1.0 / (p * p) + 1.0 / (m * m);
    let w2 = -2.0 / (p * p * p) + 2.0 / (m * m * m);
    let g = if w > 0.0 {
        let e = (-w).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + w.exp())
    };
    // g(1 − g) = 1/(4 cosh²(w/2)), finite for any w
    let ch = (0.5 * w).cosh();
    let s = 0.25 / (ch * ch);
    let g1 = -s * w1;
    let g2 = -g1 * (1.0 - 2.0 * g) * w1 - s * w2;
    (g, if g1.is_finite() { g1 } else { 0.0 }, if g2.is_finite() { g2 } else { 0.0 })
}

/// χ(x, t) = g(|x|²) g(t²) on ℝⁿ × ℝ with gradient and Hessian
/// (space-time index n is time).
pub fn cutoff(n: usize, y: &[f64; 4]) -> (f64, [f64; 4], Mat4) {
    let qx: f64 = y[..n].iter().map(|x| x * x).sum();
    let t = y[n];
    let (gx, gx1, gx2) = bump(qx);
    let (gt, gt1, gt2) = bump(t * t);
    let chi = gx * gt;
    let mut grad = [0.0; 4];
    let mut hess = [[0.0; 4]; 4];
    if gx1 == 0.0 && gt1 == 0.0 && gx2 == 0.0 && gt2 == 0.0 {
        return (chi, grad, hess);
    }
    for i in 0..n {
        grad[i] = 2.0 * gx1 * y[i] * gt;
    }
    grad[n] = gx * 2.0 * gt1 * t;
    for i in 0..n {
        for j in 0..n {
            let mut h = 4.0 * gx2 * y[i] * y[j] * gt;
            if i == j {
                h += 2.0 * gx1 * gt;
            }
            hess[i][j] = h;
        }
        let ht = 2.0 * gx1 * y[i] * 2.0 * gt1 * t;
        hess[i][n] = ht;
        hess[n][i] = ht;
    }
    hess[n][n] = gx * (4.0 * gt2 * t * t + 2.0 * gt1);
    (chi, grad, hess)
}

/// Integrals and sup norms of the cutoff, by radial quadrature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutoffConstants {
    pub integral: f64,
    pub grad_sup: f64,
    pub hess_sup: f64,
    pub hess_l1: f64,
}

pub fn cutoff_constants(n: usize) -> CutoffConstants {
    static C2: OnceLock<CutoffConstants> = OnceLock::new();
    static C3: OnceLock<CutoffConstants> = OnceLock::new();
    let cell = if n == 2 { &C2 } else { &C3 };
    *cell.get_or_init(|| compute_cutoff_constants(n))
}

fn compute_cutoff_constants(n: usize) -> CutoffConstants {
    let m = 1200;
    let shell = if n == 2 { 2.0 * PI } else { 4.0 * PI };
    let (dr, dt) = (1.0 / m as f64, 2.0 / m as f64);
    let mut out = CutoffConstants {
        integral: 0.0,
        grad_sup: 0.0,
        hess_sup: 0.0,
        hess_l1: 0.0,
    };
    for i in 0..m {
        let rho = (i as f64 + 0.5) * dr;
        let jac = shell * rho.powi(n as i32 - 1) * dr * dt;
        for j in 0..m {
            let t = -1.0 + (j as f64 + 0.5) * dt;
            let mut y = [0.0; 4];
            y[0] = rho;
            y[n] = t;
            let (chi, g, h) = cutoff(n, &y);
            let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            let hn = h.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
            out.integral += chi * jac;
            out.hess_l1 += hn * jac;
            out.grad_sup = out.grad_sup.max(gn);
            out.hess_sup = out.hess_sup.max(hn);
        }
    }
    out.grad_sup *= BOUND_SAFETY;
    out.hess_sup *= BOUND_SAFETY;
    out.hess_l1 *= BOUND_SAFETY;
    out
}

// basis of S' = {B symmetric d×d : B_dd = 0, spatial trace 0}
fn s_prime_basis(n: usize) -> Vec<Mat4> {
    let d = n + 1;
    let mut out = Vec::new();
    for i in 0..d {
        for j in (i + 1)..d {
            let mut b = [[0.0; 4]; 4];
            b[i][j] = 1.0;
            b[j][i] = 1.0;
            out.push(b);
        }
    }
    for i in 0..(n - 1) {
        let mut b = [[0.0; 4]; 4];
        b[i][i] = 1.0;
        b[n - 1][n - 1] = -1.0;
        out.push(b);
    }
    out
}

fn solve_small(mut g: Mat4, mut w: [f64; 4], d: usize) -> Option<[f64; 4]> {
    for col in 0..d {
        let piv = (col..d).max_by(|&i, &j| g[i][col].abs().partial_cmp(&g[j][col].abs()).unwrap())?;
        if g[piv][col].abs() < 1e-13 {
            return None;
        }
        g.swap(col, piv);
        w.swap(col, piv);
        for row in (col + 1)..d {
            let f = g[row][col] / g[col][col];
            for k in col..d {
                g[row][k] -= f * g[col][k];
            }
            w[row] -= f * w[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..d).rev() {
        let s: f64 = ((row + 1)..d).map(|k| g[row][k] * x[k]).sum();
        x[row] = (w[row] - s) / g[row][row];
    }
    Some(x)
}

/// Minimum-norm right inverse of B ↦ Bζ̂ on S', applied to A's columns.
fn corrector_tensors(n: usize, amp: &Mat4, zhat: &[f64; 4]) -> Result<[Mat4; 4]> {
    let d = n + 1;
    let basis = s_prime_basis(n);
    let cols: Vec<[f64; 4]> = basis
        .iter()
        .map(|b| {
            let mut c = [0.0; 4];
            for (i, ci) in c.iter_mut().enumerate().take(d) {
                *ci = (0..d).map(|j| b[i][j] * zhat[j]).sum();
            }
            c
        })
        .collect();
    let mut gram = [[0.0; 4]; 4];
    for i in 0..d {
        for j in 0..d {
            gram[i][j] = cols.iter().map(|c| c[i] * c[j]).sum();
        }
    }
    let mut out = [[[0.0; 4]; 4]; 4];
    for (m, bm) in out.iter_mut().enumerate().take(d) {
        let mut w = [0.0; 4];
        for (i, wi) in w.iter_mut().enumerate().take(d) {
            *wi = amp[i][m];
        }
        let y = solve_small(gram, w, d).ok_or_else(|| {
            Error::ConstructionFailed("wave corrector map is not surjective".into())
        })?;
        for (k, b) in basis.iter().enumerate() {
            let coef: f64 = (0..d).map(|i| cols[k][i] * y[i]).sum();
            for i in 0..d {
                for j in 0..d {
                    bm[i][j] += coef * b[i][j];
                }
            }
        }
    }
    Ok(out)
}

/// Analytic localized wave in local coordinates y ∈ B₁ × (−1, 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveShape {
    pub n: usize,
    pub a: Vec3,
    pub b: Vec3,
    pub lambda: f64,
    pub k: u32,
    pub zeta_hat: [f64; 4],
    pub amp: Mat4,
    pub corr: [Mat4; 4],
    pub corr_norm: f64,
}

impl WaveShape {
    pub fn new(n: usize, a: &Vec3, b: &Vec3, lambda: f64, k: u32) -> Result<Self> {
        let pw = plane_wave_coeffs(&a[..n], &b[..n])?;
        if k == 0 {
            return Err(Error::InvalidInput("frequency k must be >= 1".into()));
        }
        let mut zeta = [0.0; 4];
        zeta[..n].copy_from_slice(&pw.xi[..n]);
        zeta[n] = pw.c;
        let zn = zeta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let zeta_hat = zeta.map(|x| x / zn);
        let mut amp = [[0.0; 4]; 4];
        for i in 0..n {
            for j in 0..n {
                amp[i][j] = a[i] * a[j] - b[i] * b[j];
            }
            amp[i][n] = a[i] - b[i];
            amp[n][i] = a[i] - b[i];
        }
        let corr = corrector_tensors(n, &amp, &zeta_hat)?;
        let corr_norm = corr.iter().flatten().flatten().map(|x| x * x).sum::<f64>().sqrt();
        Ok(WaveShape {
            n,
            a: *a,
            b: *b,
            lambda,
            k,
            zeta_hat,
            amp,
            corr,
            corr_norm,
        })
    }

    pub fn from_segment(seg: &AdmissibleSegment, k: u32) -> Result<Self> {
        Self::new(seg.n(), &seg.a, &seg.b, seg.lambda, k)
    }

    fn phase(&self, y: &[f64; 4]) -> f64 {
        let d = self.n + 1;
        let s: f64 = (0..d).map(|i| self.zeta_hat[i] * y[i]).sum();
        2.0 * PI * self.k as f64 * s
    }

    /// Space-time matrix W at y.
    pub fn eval_full(&self, y: &[f64; 4]) -> Mat4 {
        let d = self.n + 1;
        let mut w = [[0.0; 4]; 4];
        if self.lambda == 0.0 {
            return w;
        }
        let (chi, grad, _) = cutoff(self.n, y);
        if chi == 0.0 && grad.iter().all(|&g| g == 0.0) {
            return w;
        }
        let psi = self.phase(y);
        let (s, c) = psi.sin_cos();
        let ck = c / (2.0 * PI * self.k as f64);
        for i in 0..d {
            for j in 0..d {
                let corr: f64 = (0..d).map(|m| grad[m] * self.corr[m][i][j]).sum();
                w[i][j] = self.lambda * (chi * self.amp[i][j] * s + ck * corr);
            }
        }
        w
    }

    pub fn eval(&self, y: &[f64; 4]) -> (Vec3, SymMat) {
        let n = self.n;
        let w = self.eval_full(y);
        let mut v = [0.0; 3];
        for i in 0..n {
            v[i] = w[i][n];
        }
        (v, SymMat::from_fn(n, |i, j| w[i][j]))
    }

    /// div W at y, summed from the product rule term by term.
    pub fn residual(&self, y: &[f64; 4]) -> [f64; 4] {
        let d = self.n + 1;
        let mut r = [0.0; 4];
        if self.lambda == 0.0 {
            return r;
        }
        let (chi, grad, hess) = cutoff(self.n, y);
        if chi == 0.0 && grad.iter().all(|&g| g == 0.0) {
            return r;
        }
        let twopik = 2.0 * PI * self.k as f64;
        let psi = self.phase(y);
        let (s, c) = psi.sin_cos();
        for (i, ri) in r.iter_mut().enumerate().take(d) {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.amp[i][j] * (grad[j] * s + chi * c * twopik * self.zeta_hat[j]);
                for m in 0..d {
                    let bm = self.corr[m][i][j];
                    acc += bm * (hess[j][m] * c / twopik - grad[m] * s * self.zeta_hat[j]);
                }
            }
            *ri = self.lambda * acc;
        }
        r
    }

    fn scale(&self) -> f64 {
        self.lambda.abs() * self.corr_norm / (2.0 * PI * self.k as f64)
    }

    pub fn residual_sup_bound(&self) -> f64 {
        self.scale() * cutoff_constants(self.n).hess_sup
    }

    /// Bound on ∫|div W| over the local support.
    pub fn residual_l1_bound(&self) -> f64 {
        self.scale() * cutoff_constants(self.n).hess_l1
    }

    /// Bound on the distance of (v, u) from the segment [−p, p].
    pub fn image_bound(&self) -> f64 {
        self.scale() * cutoff_constants(self.n).grad_sup
    }
}

/// Smallest k whose image bound is at most eps.
pub fn k_min(seg: &AdmissibleSegment, eps: f64) -> Result<u32> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput("eps must be positive".into()));
    }
    let shape = WaveShape::from_segment(seg, 1)?;
    let k = (shape.image_bound() / eps).ceil().max(1.0);
    if k > u32::MAX as f64 {
        return Err(Error::ConstructionFailed("required frequency overflows".into()));
    }
    Ok(k as u32)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WaveCerts {
    /// sup |div W| on the sampling grid
    pub residual_sup: f64,
    /// ∫|div W| by quadrature on the sampling grid
    pub residual_l1: f64,
    pub residual_sup_bound: f64,
    pub residual_l1_bound: f64,
    /// max distance of sampled (v, u) from [−p, p]
    pub image_dist: f64,
    pub image_bound: f64,
    /// |∫v| / (λ·vol)
    pub mean_v: f64,
    /// |∫u| / (λ·vol)
    pub mean_u: f64,
    /// ∫|v|
    pub l1_v: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizedWave {
    pub shape: WaveShape,
    pub coeffs: PlaneWaveCoeffs,
    pub eps: f64,
    pub nx: usize,
    pub nt: usize,
    /// samples on the symmetric cell-centered grid of [−1,1]ⁿ × [−1,1],
    /// time-major, axis 0 fastest
    pub v: Vec<Vec3>,
    pub u: Vec<SymMat>,
    pub certs: WaveCerts,
}

impl LocalizedWave {
    pub fn lambda(&self) -> f64 {
        self.shape.lambda
    }

    pub fn k(&self) -> u32 {
        self.shape.k
    }

    pub fn local_point(&self, idx: usize) -> [f64; 4] {
        local_point(self.shape.n, self.nx, self.nt, idx)
    }
}

fn local_point(n: usize, nx: usize, nt: usize, idx: usize) -> [f64; 4] {
    let ns = nx.pow(n as u32);
    let (j, mut s) = (idx / ns, idx % ns);
    let hx = 2.0 / nx as f64;
    let ht = 2.0 / nt as f64;
    let mut y = [0.0; 4];
    for a in y.iter_mut().take(n) {
        let i = s % nx;
        s /= nx;
        // symmetric about 0 so that mirrored samples are exact negatives
        *a = (i as f64 + 0.5 - nx as f64 / 2.0) * hx;
    }
    y[n] = (j as f64 + 0.5 - nt as f64 / 2.0) * ht;
    y
}

pub const DEFAULT_LOCAL_RES_2D: usize = 32;
pub const DEFAULT_LOCAL_RES_3D: usize = 12;

pub fn localize(seg: &AdmissibleSegment, k: u32, eps: f64) -> Result<LocalizedWave> {
    let res = if seg.n() == 2 {
        DEFAULT_LOCAL_RES_2D
    } else {
        DEFAULT_LOCAL_RES_3D
    };
    localize_on(seg, k, eps, res, res)
}

pub fn localize_on(
    seg: &AdmissibleSegment,
    k: u32,
    eps: f64,
    nx: usize,
    nt: usize,
) -> Result<LocalizedWave> {
    let n = seg.n();
    if nx < 4 || nt < 4 {
        return Err(Error::InvalidInput("local resolution below 4".into()));
    }
    let shape = WaveShape::from_segment(seg, k.max(1))?;
    let coeffs = plane_wave_coeffs(&seg.a[..n], &seg.b[..n])?;
    let ns = nx.pow(n as u32);
    let len = ns * nt;
    let dv = (2.0 / nx as f64).powi(n as i32) * (2.0 / nt as f64);
    let vol = 2f64.powi(n as i32 + 1);

    let pv = shape_seg_v(&shape);
    let pu = shape_seg_u(&shape);
    let p2 = dot(&pv, &pv) + pu.ddot(&pu);

    let mut v = Vec::with_capacity(len);
    let mut u = Vec::with_capacity(len);
    let mut certs = WaveCerts::default();
    let mut sum_v = [0.0; 3];
    let mut sum_u = SymMat::zeros(n);
    for idx in 0..len {
        let y = local_point(n, nx, nt, idx);
        let (vi, ui) = shape.eval(&y);
        let res = shape.residual(&y);
        let rn = res.iter().map(|x| x * x).sum::<f64>().sqrt();
        certs.residual_sup = certs.residual_sup.max(rn);
        certs.residual_l1 += rn * dv;
        certs.l1_v += norm(&vi) * dv;
        sum_v = vadd(&sum_v, &vi);
        sum_u += ui;
        if p2 > 0.0 {
            let s = ((dot(&vi, &pv) + ui.ddot(&pu)) / p2).clamp(-1.0, 1.0);
            let dvv = vsub(&vi, &vscale(&pv, s));
            let duu = ui - pu * s;
            let dist = (dot(&dvv, &dvv) + duu.ddot(&duu)).sqrt();
            certs.image_dist = certs.image_dist.max(dist);
        }
        v.push(vi);
        u.push(ui);
    }
    let lam = shape.lambda.abs();
    if lam > 0.0 {
        certs.mean_v = norm(&sum_v) * dv / (lam * vol);
        certs.mean_u = sum_u.frob() * dv / (lam * vol);
    }
    certs.residual_sup_bound = shape.residual_sup_bound();
    certs.residual_l1_bound = shape.residual_l1_bound();
    certs.image_bound = shape.image_bound();
    if certs.image_bound > eps {
        let km = k_min(seg, eps)?;
        return Err(Error::FrequencyTooLow {
            k,
            k_min: km,
            image_dist: certs.image_dist,
            residual: certs.residual_sup,
        });
    }
    Ok(LocalizedWave {
        shape,
        coeffs,
        eps,
        nx,
        nt,
        v,
        u,
        certs,
    })
}

fn shape_seg_v(s: &WaveShape) -> Vec3 {
    vscale(&vsub(&s.a, &s.b), s.lambda)
}

fn shape_seg_u(s: &WaveShape) -> SymMat {
    (SymMat::outer(s.n, &s.a) - SymMat::outer(s.n, &s.b)) * s.lambda
}

/// Axis-aligned space-time box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeBox {
    pub x_lo: Vec3,
    pub x_hi: Vec3,
    pub t_lo: f64,
    pub t_hi: f64,
}

/// Affine placement of a local wave: x' = (x − x₀)/r, t' = (t − t₀)/(√ρ r),
/// V ↦ √ρ V, U ↦ U.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub n: usize,
    pub x0: Vec3,
    pub t0: f64,
    pub r_loc: f64,
    pub sqrt_rho: f64,
}

impl Placement {
    pub fn local(&self, x: &Vec3, t: f64) -> [f64; 4] {
        let mut y = [0.0; 4];
        for a in 0..self.n {
            y[a] = (x[a] - self.x0[a]) / self.r_loc;
        }
        y[self.n] = (t - self.t0) / (self.sqrt_rho * self.r_loc);
        y
    }

    pub fn eval(&self, shape: &WaveShape, x: &Vec3, t: f64) -> (Vec3, SymMat) {
        let (v, u) = shape.eval(&self.local(x, t));
        (vscale(&v, self.sqrt_rho), u)
    }

    /// Physical residual (momentum rows, then the mass row).
    pub fn residual(&self, shape: &WaveShape, x: &Vec3, t: f64) -> [f64; 4] {
        let mut r = shape.residual(&self.local(x, t));
        for ri in r.iter_mut().take(self.n) {
            *ri /= self.r_loc;
        }
        r[self.n] *= self.sqrt_rho / self.r_loc;
        r
    }

    /// Bound on the physical ∫|residual| over the support.
    pub fn residual_l1_bound(&self, shape: &WaveShape) -> f64 {
        self.mass_l1_bound(shape).max(self.momentum_l1_bound(shape))
    }

    /// Bound on ∫|div V| over the support.
    pub fn mass_l1_bound(&self, shape: &WaveShape) -> f64 {
        let rho = self.sqrt_rho * self.sqrt_rho;
        rho * self.r_loc.powi(self.n as i32) * shape.residual_l1_bound()
    }

    /// Bound on ∫|∂ₜV + div U| over the support.
    pub fn momentum_l1_bound(&self, shape: &WaveShape) -> f64 {
        self.sqrt_rho * self.r_loc.powi(self.n as i32) * shape.residual_l1_bound()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RescaledWave {
    pub placement: Placement,
    /// flat grid indices of the cube's sample points
    pub indices: Vec<usize>,
    pub v: Vec<Vec3>,
    pub u: Vec<SymMat>,
    pub residual_l1_cert: f64,
}

pub fn rescale_wave(
    w: &LocalizedWave,
    cube: &SpaceTimeBox,
    rho_min: f64,
    grid: &Grid,
) -> Result<RescaledWave> {
    let n = grid.n;
    if w.shape.n != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: w.shape.n,
        });
    }
    if !(rho_min > 0.0) || !rho_min.is_finite() {
        return Err(Error::Precondition(format!("rho_min = {rho_min} must be positive")));
    }
    let tol = 1e-12 * (1.0 + grid.extent);
    let inside = (0..n).all(|a| cube.x_lo[a] >= -tol && cube.x_hi[a] <= grid.extent + tol && cube.x_hi[a] > cube.x_lo[a])
        && cube.t_lo >= grid.t_start - tol
        && cube.t_hi <= grid.t_end + tol
        && cube.t_hi > cube.t_lo;
    if !inside {
        return Err(Error::Precondition("cube is not inside the domain".into()));
    }
    let sqrt_rho = rho_min.sqrt();
    let mut x0 = [0.0; 3];
    let mut half = f64::INFINITY;
    for a in 0..n {
        x0[a] = 0.5 * (cube.x_lo[a] + cube.x_hi[a]);
        half = half.min(0.5 * (cube.x_hi[a] - cube.x_lo[a]));
    }
    let t0 = 0.5 * (cube.t_lo + cube.t_hi);
    let r_loc = half.min(0.5 * (cube.t_hi - cube.t_lo) / sqrt_rho);
    let placement = Placement {
        n,
        x0,
        t0,
        r_loc,
        sqrt_rho,
    };
    let mut indices = Vec::new();
    let mut v = Vec::new();
    let mut u = Vec::new();
    for j in 0..grid.nt {
        let t = grid.t(j);
        if t < cube.t_lo || t > cube.t_hi {
            continue;
        }
        for s in 0..grid.ns() {
            let x = grid.x(s);
            if (0..n).any(|a| x[a] < cube.x_lo[a] || x[a] > cube.x_hi[a]) {
                continue;
            }
            let (vi, ui) = placement.eval(&w.shape, &x, t);
            indices.push(grid.idx(j, s));
            v.push(vi);
            u.push(ui);
        }
    }
    Ok(RescaledWave {
        placement,
        indices,
        v,
        u,
        residual_l1_cert: placement.residual_l1_bound(&w.shape),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeLayout;
    use crate::matgeom::{sphere_state, SymMat};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn center_state(n: usize, r0: &SymMat) -> StateVU {
        StateVU {
            v: [0.0; 3],
            u: TracelessSymMat::project(SymMat::scalar(n, r0.trace() / n as f64) - *r0),
        }
    }

    fn sample_segment(n: usize) -> AdmissibleSegment {
        let r0 = SymMat::identity(n);
        let r = ((n + 1) as f64).sqrt();
        find_segment(&center_state(n, &r0), &r0, r).unwrap()
    }

    #[test]
    fn n0_values() {
        assert_eq!(n0(2), 4);
        assert_eq!(n0(3), 8);
    }

    #[test]
    fn segment_at_hull_center() {
        for n in [2, 3] {
            let seg = sample_segment(n);
            let r2 = (n + 1) as f64;
            assert!(seg.v_length() >= r2 / (4.0 * n0(n) as f64 * r2.sqrt()));
            assert!((norm(&seg.a) - seg.r).abs() < 1e-10);
            assert!((norm(&seg.b) - seg.r).abs() < 1e-10);
            assert!(seg.halfdir.u.as_sym().trace().abs() < 1e-12);
        }
    }

    #[test]
    fn segment_rejects_non_interior() {
        let r0 = SymMat::zeros(2);
        let s = sphere_state(&[1.0, 0.0, 0.0], &r0, 1.0);
        assert!(matches!(find_segment(&s, &r0, 1.0), Err(Error::Precondition(_))));
        let s = StateVU {
            v: [3.0, 0.0, 0.0],
            u: TracelessSymMat::zeros(2),
        };
        assert!(matches!(find_segment(&s, &r0, 1.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn plane_wave_examples() {
        let p = plane_wave_coeffs(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(&p.xi[..2], &[1.0, 1.0]);
        assert_eq!(p.c, -1.0);
        assert_eq!(&p.amp_v[..2], &[1.0, -1.0]);
        assert_eq!(p.amp_u.as_sym().upper(), &[1.0, 0.0, -1.0]);
        let p = plane_wave_coeffs(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(p.xi, [1.0, 1.0, 0.0]);
        assert_eq!(p.c, -1.0);
        assert!(matches!(
            plane_wave_coeffs(&[1.0, 0.0], &[-1.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(plane_wave_coeffs(&[1.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(plane_wave_coeffs(&[1.0, 0.0], &[0.0, 2.0]).is_err());
    }

    #[test]
    fn bump_derivatives_match_differences() {
        for &q in &[0.3, 0.5, 0.62, 0.8, 0.95] {
            let h = 1e-6;
            let (g, g1, g2) = bump(q);
            let (gp, g1p, _) = bump(q + h);
            let (gm, g1m, _) = bump(q - h);
            assert!(((gp - gm) / (2.0 * h) - g1).abs() < 1e-6 * (1.0 + g1.abs()));
            assert!(((g1p - g1m) / (2.0 * h) - g2).abs() < 1e-4 * (1.0 + g2.abs()));
            assert!((0.0..=1.0).contains(&g));
        }
        assert_eq!(bump(0.1), (1.0, 0.0, 0.0));
        assert_eq!(bump(1.2), (0.0, 0.0, 0.0));
    }

    #[test]
    fn cutoff_hessian_matches_differences() {
        let y = [0.4, -0.3, 0.0, 0.55];
        let (_, g, h) = cutoff(2, &y);
        let eps = 1e-6;
        for m in 0..3 {
            let mut yp = y;
            let mut ym = y;
            yp[m] += eps;
            ym[m] -= eps;
            let (cp, gp, _) = cutoff(2, &yp);
            let (cm, gm, _) = cutoff(2, &ym);
            assert!(((cp - cm) / (2.0 * eps) - g[m]).abs() < 1e-7);
            for i in 0..3 {
                assert!(((gp[i] - gm[i]) / (2.0 * eps) - h[i][m]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn corrector_solves_the_right_inverse_equation() {
        for n in [2, 3] {
            let seg = sample_segment(n);
            let shape = WaveShape::from_segment(&seg, 8).unwrap();
            let d = n + 1;
            for m in 0..d {
                let b = shape.corr[m];
                let mut tr = 0.0;
                for i in 0..d {
                    let bz: f64 = (0..d).map(|j| b[i][j] * shape.zeta_hat[j]).sum();
                    assert!((bz - shape.amp[i][m]).abs() < 1e-12);
                    for j in 0..d {
                        assert!((b[i][j] - b[j][i]).abs() < 1e-14);
                    }
                    if i < n {
                        tr += b[i][i];
                    }
                }
                assert!(tr.abs() < 1e-12);
                assert_eq!(b[n][n], 0.0);
            }
            // A ζ̂ = 0
            for i in 0..d {
                let az: f64 = (0..d).map(|j| shape.amp[i][j] * shape.zeta_hat[j]).sum();
                assert!(az.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_matches_finite_difference_divergence() {
        let seg = sample_segment(2);
        let shape = WaveShape::from_segment(&seg, 3).unwrap();
        let y = [0.45, 0.3, 0.0, -0.6];
        let r = shape.residual(&y);
        let h = 1e-6;
        for i in 0..3 {
            let mut div = 0.0;
            for j in 0..3 {
                let mut yp = y;
                let mut ym = y;
                yp[j] += h;
                ym[j] -= h;
                div += (shape.eval_full(&yp)[i][j] - shape.eval_full(&ym)[i][j]) / (2.0 * h);
            }
            assert!((div - r[i]).abs() < 1e-6, "{div} vs {}", r[i]);
        }
    }

    #[test]
    fn zero_amplitude_wave() {
        let mut seg = sample_segment(2);
        seg.lambda = 0.0;
        let w = localize_on(&seg, 4, 1e-3, 8, 8).unwrap();
        assert!(w.v.iter().all(|v| *v == [0.0; 3]));
        assert_eq!(w.certs.residual_sup, 0.0);
        assert_eq!(w.certs.image_bound, 0.0);
    }

    #[test]
    fn residual_decays_like_one_over_k() {
        let seg = sample_segment(2);
        let w1 = localize_on(&seg, 16, 1.0, 24, 24).unwrap();
        let w2 = localize_on(&seg, 32, 1.0, 24, 24).unwrap();
        let ratio = w2.certs.residual_sup / w1.certs.residual_sup;
        assert!((0.35..=0.65).contains(&ratio), "ratio {ratio}");
        assert!(w1.certs.residual_sup <= w1.certs.residual_sup_bound);
        assert!(w1.certs.image_dist <= w1.certs.image_bound);
    }

    #[test]
    fn mean_zero_and_l1_floor() {
        let seg = sample_segment(2);
        let w = localize_on(&seg, 20, 1.0, 24, 24).unwrap();
        assert!(w.certs.mean_v <= 1e-8);
        assert!(w.certs.mean_u <= 1e-8);
        let ab = norm(&vsub(&seg.a, &seg.b));
        assert!(w.certs.l1_v >= ALPHA * seg.lambda * ab);
    }

    #[test]
    fn low_frequency_is_rejected() {
        let seg = sample_segment(2);
        let km = k_min(&seg, 1e-2).unwrap();
        assert!(matches!(
            localize_on(&seg, km - 1, 1e-2, 8, 8),
            Err(Error::FrequencyTooLow { .. })
        ));
        assert!(localize_on(&seg, km, 1e-2, 8, 8).is_ok());
    }

    #[test]
    fn rescale_identity_and_dilation() {
        let seg = sample_segment(2);
        let w = localize_on(&seg, 5, 10.0, 8, 8).unwrap();
        let grid = Grid::new(2, 8, 8, 2.0, 0.0, 2.0, TimeLayout::Cell).unwrap();
        let cube = SpaceTimeBox {
            x_lo: [0.0; 3],
            x_hi: [2.0, 2.0, 0.0],
            t_lo: 0.0,
            t_hi: 2.0,
        };
        let rw = rescale_wave(&w, &cube, 1.0, &grid).unwrap();
        assert_eq!(rw.indices.len(), grid.len());
        for (i, &idx) in rw.indices.iter().enumerate() {
            assert!(norm(&vsub(&rw.v[i], &w.v[idx])) < 1e-12);
            assert!((rw.u[i] - w.u[idx]).frob() < 1e-12);
        }

        // long-in-time cube: r_loc set by space; ρ = 4 doubles V and the time support
        let grid = Grid::new(2, 8, 64, 2.0, 0.0, 8.0, TimeLayout::Cell).unwrap();
        let cube = SpaceTimeBox {
            x_lo: [0.0; 3],
            x_hi: [2.0, 2.0, 0.0],
            t_lo: 0.0,
            t_hi: 8.0,
        };
        let a = rescale_wave(&w, &cube, 1.0, &grid).unwrap();
        let b = rescale_wave(&w, &cube, 4.0, &grid).unwrap();
        assert_eq!(a.placement.r_loc, b.placement.r_loc);
        let (x, t) = ([1.3, 0.8, 0.0], 4.2);
        let (va, _) = a.placement.eval(&w.shape, &x, t);
        let (vb, _) = b.placement.eval(&w.shape, &x, 4.0 + 2.0 * (t - 4.0));
        assert!(norm(&vsub(&vscale(&va, 2.0), &vb)) < 1e-12);
        let support = |rw: &RescaledWave| {
            let ts: Vec<f64> = rw
                .indices
                .iter()
                .zip(&rw.v)
                .filter(|(_, v)| norm(v) > 0.0)
                .map(|(&i, _)| grid.t(grid.split(i).0))
                .collect();
            ts.iter().cloned().fold(f64::MIN, f64::max) - ts.iter().cloned().fold(f64::MAX, f64::min)
        };
        let ratio = support(&b) / support(&a);
        assert!((ratio - 2.0).abs() < 0.3, "support ratio {ratio}");

        let outside = SpaceTimeBox {
            x_lo: [1.0, 1.0, 0.0],
            x_hi: [3.0, 2.0, 0.0],
            t_lo: 0.0,
            t_hi: 1.0,
        };
        assert!(rescale_wave(&w, &outside, 1.0, &grid).is_err());
        assert!(rescale_wave(&w, &cube, 0.0, &grid).is_err());
    }

    fn random_interior(rng: &mut ChaCha8Rng, n: usize) -> (StateVU, SymMat, f64) {
        loop {
            let a = SymMat::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let mut r0 = SymMat::zeros(n);
            for i in 0..n {
                for j in i..n {
                    r0.set(i, j, (0..n).map(|k| a.get(i, k) * a.get(k, j)).sum());
                }
            }
            let r = rng.random_range(0.2..3.0);
            let mut v = [0.0; 3];
            for x in v.iter_mut().take(n) {
                *x = rng.random_range(-r..r);
            }
            let u = TracelessSymMat::project(SymMat::from_fn(n, |_, _| rng.random_range(-2.0..2.0)));
            let s = StateVU { v, u };
            let h = hull_membership(&HullQuery { state: s, r0, r }).unwrap();
            if h.class == HullClass::Interior {
                return (s, r0, r);
            }
        }
    }

    #[test]
    fn segment_bounds_on_random_interior_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..1000 {
            let n = 2 + trial % 2;
            let (s, r0, r) = random_interior(&mut rng, n);
            let seg = find_segment(&s, &r0, r).unwrap();
            assert!(seg.v_length() >= seg.length_bound());
            let m0 = hull_membership(&HullQuery { state: s, r0, r }).unwrap().margin;
            let (p, m) = seg.endpoints();
            for e in [p, m] {
                let h = hull_membership(&HullQuery { state: e, r0, r }).unwrap();
                assert!(h.margin >= 0.5 * m0 - 1e-9, "{} vs {}", h.margin, m0);
            }
            let fast = find_segment_with(&s, &r0, r, SegmentSearch::Fast).unwrap();
            assert!(fast.v_length() >= fast.length_bound());
        }
    }

    proptest! {
        #[test]
        fn plane_wave_identities(n in 2usize..=3, xs in proptest::collection::vec(-1.0f64..1.0, 6), r in 0.1f64..5.0) {
            let mut a = xs[..n].to_vec();
            let mut b = xs[3..3 + n].to_vec();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assume!(na > 1e-3 && nb > 1e-3);
            a.iter_mut().for_each(|x| *x *= r / na);
            b.iter_mut().for_each(|x| *x *= r / nb);
            match plane_wave_coeffs(&a, &b) {
                Ok(p) => {
                    let (e1, e2) = p.identity_residuals();
                    prop_assert!(e1 <= 1e-12 * (1.0 + r * r));
                    prop_assert!(e2 <= 1e-12 * (1.0 + r * r * r));
                }
                Err(e) => prop_assert!(matches!(e, Error::DegenerateInput(_))),
            }
        }
    }
}
