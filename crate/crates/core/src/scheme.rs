//! Discrete convex-integration iteration: cube partition, per-cube
//! perturbations by localized waves, and defect tracking.
//!
//! The iterate is (ρ₀, V₀ + Ṽ, U₀ + Ũ) with relaxed constraint M ≻ 0 on the
//! active region P, where
//! M = |V₀|²/(nρ₀) I + R₀ − (V₀+Ṽ)⊗(V₀+Ṽ)/ρ₀ + U₀ + Ũ.
//! Every wave is placed inside a single grid cell, so the grid sees the flat
//! part of its cutoff: the sampled increment is sin ψ times the segment
//! direction. The continuum residual of each wave is tracked through its
//! certificate.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::matgeom::{
    dot, eigvals, lambda_min, norm, vadd, vscale, vsub, StateVU, SymMat, TracelessSymMat, Vec3,
};
use crate::wavegen::{find_segment_with, Placement, SegmentSearch, WaveShape};

/// Calibrated coercivity constant: ‖ΔṼ‖_{L¹} ≥ (c/Λ)∫tr M per sweep.
pub const COERCIVITY_C: f64 = 0.1;
/// Upper limit on the stretch factor applied to a segment.
pub const STRETCH_CAP: f64 = 8.0;
/// Fraction of the expected decrease one wave certificate may use.
const CERT_SHARE: f64 = 0.05;
/// Total certificate allowance relative to the achieved decrease.
const EXACTNESS_BUDGET: f64 = 0.1;
const K_CAP: f64 = (1u64 << 30) as f64;
const STAGNATION_WINDOW: usize = 5;
const STAGNATION_TOL: f64 = 1e-3;
const DEGENERATE_CUBE: f64 = 1e-8;
const JITTER: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SchemeCerts {
    /// Σ over waves of the L¹ mass residual bound
    pub mass_l1: f64,
    /// Σ over waves of the L¹ momentum residual bound
    pub momentum_l1: f64,
    pub waves: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldState {
    pub grid: Grid,
    pub rho0: Vec<f64>,
    pub v0: Vec<Vec3>,
    pub u0: Vec<SymMat>,
    pub r0: Vec<SymMat>,
    pub vtil: Vec<Vec3>,
    pub util: Vec<SymMat>,
    pub active: Vec<bool>,
    /// density bound: 1/Λ² ≤ ρ₀ ≤ Λ²
    pub lambda: f64,
    pub certs: SchemeCerts,
}

impl FieldState {
    /// Builds a state with zero perturbation; U₀ is derived from (ρ₀, V₀).
    pub fn new(
        grid: Grid,
        rho0: Vec<f64>,
        v0: Vec<Vec3>,
        r0: Vec<SymMat>,
        active: Vec<bool>,
    ) -> Result<Self> {
        let len = grid.len();
        for l in [rho0.len(), v0.len(), r0.len(), active.len()] {
            if l != len {
                return Err(Error::DimensionMismatch { expected: len, got: l });
            }
        }
        let n = grid.n;
        if let Some(r) = rho0.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
            return Err(Error::InvalidInput(format!("density {r} is not positive")));
        }
        let (lo, hi) = rho0
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
        let lambda = hi.sqrt().max(1.0 / lo.sqrt()).max(1.0);
        let u0 = rho0
            .iter()
            .zip(&v0)
            .map(|(&r, v)| u0_of(n, r, v))
            .collect();
        let fs = FieldState {
            grid,
            rho0,
            v0,
            u0,
            r0,
            vtil: vec![[0.0; 3]; len],
            util: vec![SymMat::zeros(n); len],
            active,
            lambda,
            certs: SchemeCerts::default(),
        };
        fs.validate()?;
        Ok(fs)
    }

    /// Spatially and temporally constant base state, fully active.
    pub fn constant(grid: Grid, rho: f64, v: Vec3, r0: SymMat) -> Result<Self> {
        let len = grid.len();
        Self::new(
            grid,
            vec![rho; len],
            vec![v; len],
            vec![r0; len],
            vec![true; len],
        )
    }

    pub fn n(&self) -> usize {
        self.grid.n
    }

    /// Checks the standing invariants of an iterate.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let lam2 = self.lambda * self.lambda;
        for i in 0..self.grid.len() {
            let r = self.rho0[i];
            if !(r > 0.0) || r < 1.0 / lam2 * (1.0 - 1e-12) || r > lam2 * (1.0 + 1e-12) {
                return Err(Error::InvalidInput(format!("density {r} outside [1/Λ², Λ²]")));
            }
            let du = (self.u0[i] - u0_of(n, r, &self.v0[i])).max_abs();
            if du > 1e-10 * (1.0 + self.u0[i].max_abs()) {
                return Err(Error::InvalidInput("U0 inconsistent with V0, rho0".into()));
            }
            if self.active[i] {
                if lambda_min(&self.r0[i]) <= 0.0 {
                    return Err(Error::InvalidInput(
                        "R0 is not positive definite on the active region".into(),
                    ));
                }
            } else if norm(&self.vtil[i]) != 0.0 || self.util[i].max_abs() != 0.0 {
                return Err(Error::InvalidInput("perturbation outside the active region".into()));
            }
        }
        Ok(())
    }

    /// M at flat index i (also evaluated outside P).
    pub fn defect_at(&self, i: usize) -> SymMat {
        let n = self.n();
        let rho = self.rho0[i];
        let v0 = self.v0[i];
        let w = vadd(&v0, &self.vtil[i]);
        SymMat::scalar(n, dot(&v0, &v0) / (n as f64 * rho)) + self.r0[i]
            - SymMat::outer(n, &w) * (1.0 / rho)
            + self.u0[i]
            + self.util[i]
    }

    pub fn velocity(&self, i: usize) -> Vec3 {
        vadd(&self.v0[i], &self.vtil[i])
    }
}

fn u0_of(n: usize, rho: f64, v: &Vec3) -> SymMat {
    SymMat::outer(n, v) * (1.0 / rho) - SymMat::scalar(n, dot(v, v) / (n as f64 * rho))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefectField {
    /// M on P, zero elsewhere
    pub m: Vec<SymMat>,
    /// ∫_P tr M
    pub integral_tr: f64,
    /// min_P λ_min(M); +∞ for empty P
    pub min_lambda: f64,
}

pub fn compute_defect(fs: &FieldState) -> Result<DefectField> {
    let n = fs.n();
    if fs.rho0.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::InvalidInput("density must be positive".into()));
    }
    let m: Vec<SymMat> = (0..fs.grid.len())
        .map(|i| if fs.active[i] { fs.defect_at(i) } else { SymMat::zeros(n) })
        .collect();
    let mut integral_tr = 0.0;
    let mut min_lambda = f64::INFINITY;
    for (i, mi) in m.iter().enumerate() {
        if fs.active[i] {
            integral_tr += mi.trace() * fs.grid.weight(i);
            min_lambda = min_lambda.min(lambda_min(mi));
        }
    }
    Ok(DefectField {
        m,
        integral_tr,
        min_lambda,
    })
}

/// min over region of min(λ_min M, λ_min R₀).
pub fn lambda_star(fs: &FieldState, region: &[bool]) -> Result<f64> {
    if region.len() != fs.grid.len() {
        return Err(Error::DimensionMismatch {
            expected: fs.grid.len(),
            got: region.len(),
        });
    }
    Ok(region
        .iter()
        .enumerate()
        .filter(|(_, &on)| on)
        .map(|(i, _)| lambda_min(&fs.defect_at(i)).min(lambda_min(&fs.r0[i])))
        .fold(f64::INFINITY, f64::min))
}

fn lambda_star_active(fs: &FieldState, defect: &DefectField) -> f64 {
    (0..fs.grid.len())
        .filter(|&i| fs.active[i])
        .map(|i| lambda_min(&defect.m[i]).min(lambda_min(&fs.r0[i])))
        .fold(f64::INFINITY, f64::min)
}

fn opnorm(m: &SymMat) -> f64 {
    let ev = eigvals(m);
    ev[..m.n()].iter().fold(0.0, |a, &x| a.max(x.abs()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cube {
    /// flat grid indices
    pub cells: Vec<usize>,
    /// averages of V₀ + Ṽ, U₀ + Ũ, R₀ and M
    pub v_bar: Vec3,
    pub u_bar: SymMat,
    pub r_bar: SymMat,
    pub m_bar: SymMat,
    pub rho_min: f64,
    /// min over the cube of |V₀|²/ρ₀
    pub c_q: f64,
    /// R̄₀ − λ_*/(16n) I
    pub r_q: SymMat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CubePartition {
    /// side length in cells
    pub delta: usize,
    pub lambda_star: f64,
    pub cubes: Vec<Cube>,
}

// aligned blocks of side b cells; blocks that are not fully active or run
// past the grid edge are split into single cells
fn blocks(fs: &FieldState, b: usize) -> Vec<Vec<usize>> {
    let g = &fs.grid;
    let n = g.n;
    let nbx = g.nx / b;
    let nbt = g.nt / b;
    let mut covered = vec![false; g.len()];
    let mut out = Vec::new();
    if b > 1 && nbx > 0 && nbt > 0 {
        let nblocks_s = nbx.pow(n as u32);
        for bt in 0..nbt {
            for bs in 0..nblocks_s {
                let mut bm = [0usize; 3];
                let mut r = bs;
                for a in bm.iter_mut().take(n) {
                    *a = r % nbx;
                    r /= nbx;
                }
                let mut cells = Vec::with_capacity(b.pow(n as u32 + 1));
                for jt in 0..b {
                    let j = bt * b + jt;
                    for ls in 0..b.pow(n as u32) {
                        let mut m = [0usize; 3];
                        let mut r = ls;
                        for a in 0..n {
                            m[a] = bm[a] * b + r % b;
                            r /= b;
                        }
                        cells.push(g.idx(j, g.spatial(&m)));
                    }
                }
                if cells.iter().all(|&i| fs.active[i]) {
                    for &i in &cells {
                        covered[i] = true;
                    }
                    out.push(cells);
                }
            }
        }
    }
    for i in 0..g.len() {
        if fs.active[i] && !covered[i] {
            out.push(vec![i]);
        }
    }
    out
}

fn make_cube(fs: &FieldState, defect: &DefectField, cells: Vec<usize>, lstar: f64) -> Cube {
    let n = fs.n();
    let mut wsum = 0.0;
    let mut v_bar = [0.0; 3];
    let mut u_bar = SymMat::zeros(n);
    let mut r_bar = SymMat::zeros(n);
    let mut m_bar = SymMat::zeros(n);
    let mut rho_min = f64::INFINITY;
    let mut c_q = f64::INFINITY;
    for &i in &cells {
        let w = fs.grid.weight(i);
        wsum += w;
        v_bar = vadd(&v_bar, &vscale(&fs.velocity(i), w));
        u_bar += (fs.u0[i] + fs.util[i]) * w;
        r_bar += fs.r0[i] * w;
        m_bar += defect.m[i] * w;
        rho_min = rho_min.min(fs.rho0[i]);
        c_q = c_q.min(dot(&fs.v0[i], &fs.v0[i]) / fs.rho0[i]);
    }
    let inv = 1.0 / wsum;
    let r_bar = r_bar * inv;
    Cube {
        cells,
        v_bar: vscale(&v_bar, inv),
        u_bar: u_bar * inv,
        r_bar,
        m_bar: m_bar * inv,
        rho_min,
        c_q,
        r_q: r_bar - SymMat::scalar(n, lstar / (16.0 * n as f64)),
    }
}

fn cube_passes(fs: &FieldState, defect: &DefectField, cube: &Cube, lstar: f64) -> bool {
    let n = fs.n() as f64;
    if lambda_min(&cube.r_q) <= 0.0 {
        return false;
    }
    cube.cells.iter().all(|&i| {
        opnorm(&(defect.m[i] - cube.m_bar)) < lstar / (8.0 * n)
            && opnorm(&(cube.r_bar - fs.r0[i])) < lstar / (64.0 * n)
            && dot(&fs.v0[i], &fs.v0[i]) / fs.rho0[i] - cube.c_q <= lstar / (64.0 * n)
    })
}

/// Largest dyadic block side (in cells) on which every candidate cube meets
/// the fluctuation bounds. Single cells always pass.
pub fn choose_delta(fs: &FieldState, lambda_star: f64) -> Result<usize> {
    let defect = compute_defect(fs)?;
    choose_delta_with(fs, &defect, lambda_star)
}

fn choose_delta_with(fs: &FieldState, defect: &DefectField, lstar: f64) -> Result<usize> {
    if !(lstar > 0.0) {
        return Err(Error::Precondition(format!("lambda_star = {lstar} must be positive")));
    }
    let scale = fs
        .r0
        .iter()
        .zip(&fs.active)
        .filter(|(_, &a)| a)
        .fold(0.0f64, |s, (r, _)| s.max(r.trace()));
    if lstar < 1e-14 * scale {
        return Err(Error::ResolutionTooCoarse(format!(
            "lambda_star = {lstar:.3e} is below roundoff at this resolution"
        )));
    }
    let mut b = 1;
    while b * 2 <= fs.grid.nx.min(fs.grid.nt) {
        b *= 2;
    }
    while b > 1 {
        let ok = blocks(fs, b)
            .into_par_iter()
            .filter(|c| c.len() > 1)
            .all(|cells| cube_passes(fs, defect, &make_cube(fs, defect, cells, lstar), lstar));
        if ok {
            return Ok(b);
        }
        b /= 2;
    }
    Ok(1)
}

pub fn build_partition(fs: &FieldState, lambda_star: f64) -> Result<CubePartition> {
    let defect = compute_defect(fs)?;
    build_partition_with(fs, &defect, lambda_star)
}

fn build_partition_with(
    fs: &FieldState,
    defect: &DefectField,
    lstar: f64,
) -> Result<CubePartition> {
    let delta = choose_delta_with(fs, defect, lstar)?;
    let cubes = blocks(fs, delta)
        .into_par_iter()
        .map(|cells| make_cube(fs, defect, cells, lstar))
        .collect();
    Ok(CubePartition {
        delta,
        lambda_star: lstar,
        cubes,
    })
}

/// Cube-supported increment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CubePerturbation {
    pub cells: Vec<usize>,
    pub dv: Vec<Vec3>,
    pub du: Vec<SymMat>,
    pub cert_mass: f64,
    pub cert_momentum: f64,
    pub stretch: f64,
    pub k: u32,
    pub skipped: bool,
}

impl CubePerturbation {
    pub fn v_l1(&self, grid: &Grid) -> f64 {
        self.cells
            .iter()
            .zip(&self.dv)
            .map(|(&i, v)| norm(v) * grid.weight(i))
            .sum()
    }
}

/// Parameters shared by all cubes of one sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepParams {
    pub seed: u64,
    pub lambda_star: f64,
    /// mean of tr M over P, for the degenerate-cube test
    pub mean_tr: f64,
    pub k_mult: f64,
}

fn jitter(seed: u64, cell: usize, d: usize) -> [f64; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_word_pos(cell as u128 * 8);
    let mut o = [0.0; 4];
    for x in o.iter_mut().take(d) {
        *x = rng.random_range(-JITTER..JITTER);
    }
    o
}

/// Waves for every cell of one cube, stretched so that the relaxed
/// constraint keeps margin λ_*/(64n).
pub fn perturb_cube(
    cube: &Cube,
    fs: &FieldState,
    defect: &DefectField,
    p: &SweepParams,
) -> Result<CubePerturbation> {
    let n = fs.n();
    let nf = n as f64;
    let skip = CubePerturbation {
        cells: cube.cells.clone(),
        dv: vec![[0.0; 3]; cube.cells.len()],
        du: vec![SymMat::zeros(n); cube.cells.len()],
        skipped: true,
        ..Default::default()
    };
    if cube.m_bar.trace() <= DEGENERATE_CUBE * p.mean_tr || cube.m_bar.trace() <= 0.0 {
        return Ok(skip);
    }
    let sr = cube.rho_min.sqrt();
    let state = StateVU {
        v: vscale(&cube.v_bar, 1.0 / sr),
        u: TracelessSymMat::project(cube.u_bar),
    };
    let r2 = cube.c_q + cube.r_q.trace();
    if !(r2 > dot(&state.v, &state.v)) {
        return Ok(skip);
    }
    let seg = match find_segment_with(&state, &cube.r_q, r2.sqrt(), SegmentSearch::Fast) {
        Ok(s) => s,
        Err(Error::Precondition(_)) | Err(Error::ConstructionFailed(_)) => return Ok(skip),
        Err(e) => return Err(e),
    };
    let d = vsub(&seg.a, &seg.b);
    let dmat = SymMat::outer(n, &seg.a) - SymMat::outer(n, &seg.b);
    let lam = seg.lambda;
    let floor = p.lambda_star / (64.0 * nf);

    let eq: Vec<(SymMat, SymMat)> = cube
        .cells
        .iter()
        .map(|&i| {
            let w = fs.velocity(i);
            let rho = fs.rho0[i];
            let e = dmat * lam - SymMat::sym_outer(n, &w, &d) * (sr * lam / rho);
            let q = SymMat::outer(n, &d) * (cube.rho_min * lam * lam / rho);
            (e, q)
        })
        .collect();
    let feasible = |tau: f64| {
        cube.cells.iter().zip(&eq).all(|(&i, (e, q))| {
            let base = defect.m[i] - *q * (tau * tau);
            lambda_min(&(base + *e * tau)) >= floor && lambda_min(&(base - *e * tau)) >= floor
        })
    };
    let tau_star = if feasible(STRETCH_CAP) {
        STRETCH_CAP
    } else {
        let (mut lo, mut hi) = (0.0, STRETCH_CAP);
        for _ in 0..30 {
            let mid = 0.5 * (lo + hi);
            if feasible(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    let tau = 0.9 * tau_star;
    if tau <= 0.0 {
        return Ok(skip);
    }

    let g = &fs.grid;
    let r_loc = (0.5 * g.h()).min(0.5 * g.dt() / sr) / 1.2;
    let min_trq = eq.iter().map(|(_, q)| q.trace()).fold(f64::INFINITY, f64::min);
    let w_cell = cube
        .cells
        .iter()
        .map(|&i| g.weight(i))
        .fold(f64::INFINITY, f64::min);
    let shape1 = WaveShape::new(n, &seg.a, &seg.b, tau * lam, 1)?;
    let probe = Placement {
        n,
        x0: [0.0; 3],
        t0: 0.0,
        r_loc,
        sqrt_rho: sr,
    };
    let cert1 = probe.mass_l1_bound(&shape1) + probe.momentum_l1_bound(&shape1);
    let allowance = CERT_SHARE * 0.5 * tau * tau * min_trq * w_cell;
    let k = ((cert1 / allowance).ceil().max(1.0) * p.k_mult).min(K_CAP);
    let shape = WaveShape::new(n, &seg.a, &seg.b, tau * lam, k as u32)?;

    let mut out = CubePerturbation {
        cells: cube.cells.clone(),
        dv: Vec::with_capacity(cube.cells.len()),
        du: Vec::with_capacity(cube.cells.len()),
        stretch: tau,
        k: k as u32,
        ..Default::default()
    };
    for &i in &cube.cells {
        let (j, s) = g.split(i);
        let x = g.x(s);
        let t = g.t(j);
        let o = jitter(p.seed, i, n + 1);
        let mut x0 = [0.0; 3];
        for a in 0..n {
            x0[a] = x[a] + o[a] * r_loc;
        }
        let pl = Placement {
            n,
            x0,
            t0: t + o[n] * sr * r_loc,
            r_loc,
            sqrt_rho: sr,
        };
        let (v, u) = pl.eval(&shape, &x, t);
        out.dv.push(v);
        out.du.push(TracelessSymMat::project(u).into_sym());
        out.cert_mass += pl.mass_l1_bound(&shape);
        out.cert_momentum += pl.momentum_l1_bound(&shape);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxSweeps,
    Stagnated,
}

/// One JSON line per sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectReport {
    pub sweep: usize,
    pub integral_tr_m: f64,
    pub initial_tr_m: f64,
    pub min_lambda_m: f64,
    pub lambda_star: f64,
    pub delta: usize,
    pub cubes: usize,
    pub skipped: usize,
    pub waves: u64,
    pub k_max: u32,
    /// ‖Ṽ' − Ṽ‖_{L¹(P)}
    pub dv_l1: f64,
    /// Λ‖ΔṼ‖_{L¹} / ∫tr M before the sweep
    pub coercivity: f64,
    pub cert_mass: f64,
    pub cert_momentum: f64,
    pub decrease: f64,
}

impl DefectReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub state: FieldState,
    pub report: DefectReport,
}

/// Perturbs every cube once. Supports are disjoint, so the merge is
/// independent of evaluation order.
pub fn sweep(fs: &FieldState, seed: u64) -> Result<SweepOutcome> {
    let defect = compute_defect(fs)?;
    sweep_with(fs, &defect, seed, 0, defect.integral_tr)
}

fn sweep_with(
    fs: &FieldState,
    defect: &DefectField,
    seed: u64,
    index: usize,
    initial: f64,
) -> Result<SweepOutcome> {
    let g = fs.grid;
    let mut report = DefectReport {
        sweep: index,
        integral_tr_m: defect.integral_tr,
        initial_tr_m: initial,
        min_lambda_m: defect.min_lambda,
        lambda_star: 0.0,
        delta: 0,
        cubes: 0,
        skipped: 0,
        waves: 0,
        k_max: 0,
        dv_l1: 0.0,
        coercivity: 0.0,
        cert_mass: 0.0,
        cert_momentum: 0.0,
        decrease: 0.0,
    };
    let active_vol: f64 = (0..g.len()).filter(|&i| fs.active[i]).map(|i| g.weight(i)).sum();
    if active_vol == 0.0 || defect.integral_tr <= 0.0 {
        return Ok(SweepOutcome {
            state: fs.clone(),
            report,
        });
    }
    let lstar = lambda_star_active(fs, defect);
    if !(lstar > 0.0) {
        return Err(Error::Precondition(format!(
            "iterate is not strict: lambda_star = {lstar:.3e}"
        )));
    }
    let part = build_partition_with(fs, defect, lstar)?;
    report.lambda_star = lstar;
    report.delta = part.delta;
    report.cubes = part.cubes.len();

    let mut params = SweepParams {
        seed,
        lambda_star: lstar,
        mean_tr: defect.integral_tr / active_vol,
        k_mult: 1.0,
    };
    loop {
        let perts: Vec<CubePerturbation> = part
            .cubes
            .par_iter()
            .map(|c| perturb_cube(c, fs, defect, &params))
            .collect::<Result<_>>()?;
        let mut next = fs.clone();
        let mut rep = report.clone();
        for p in &perts {
            if p.skipped {
                rep.skipped += 1;
                continue;
            }
            for (c, &i) in p.cells.iter().enumerate() {
                next.vtil[i] = vadd(&next.vtil[i], &p.dv[c]);
                next.util[i] += p.du[c];
            }
            rep.waves += p.cells.len() as u64;
            rep.k_max = rep.k_max.max(p.k);
            rep.cert_mass += p.cert_mass;
            rep.cert_momentum += p.cert_momentum;
            rep.dv_l1 += p.v_l1(&g);
        }
        let nd = compute_defect(&next)?;
        if nd.min_lambda <= 0.0 {
            return Err(Error::ConstructionFailed(format!(
                "relaxed constraint violated after superposition (min eig {:.3e})",
                nd.min_lambda
            )));
        }
        rep.decrease = defect.integral_tr - nd.integral_tr;
        let cert = rep.cert_mass + rep.cert_momentum;
        if cert > EXACTNESS_BUDGET * rep.decrease && rep.decrease > 0.0 && params.k_mult < K_CAP {
            params.k_mult *= 2.0;
            continue;
        }
        next.certs.mass_l1 += rep.cert_mass;
        next.certs.momentum_l1 += rep.cert_momentum;
        next.certs.waves += rep.waves;
        rep.integral_tr_m = nd.integral_tr;
        rep.min_lambda_m = nd.min_lambda;
        rep.coercivity = fs.lambda * rep.dv_l1 / defect.integral_tr;
        return Ok(SweepOutcome {
            state: next,
            report: rep,
        });
    }
}

/// Output of `run`: (ρ₀, V₀ + Ṽ, U₀ + Ũ) with its bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct EulerCandidate {
    pub grid: Grid,
    pub rho: Vec<f64>,
    pub v: Vec<Vec3>,
    pub u: Vec<SymMat>,
    pub v0: Vec<Vec3>,
    pub r0_trace: Vec<f64>,
    pub vtil: Vec<Vec3>,
    pub util: Vec<SymMat>,
    /// tr M pointwise (zero outside P)
    pub m_trace: Vec<f64>,
    pub active: Vec<bool>,
    /// scalar pressure closing the momentum flux V⊗V/ρ + pI
    pub pressure: Vec<f64>,
    /// adiabatic exponent; None for kinetic-only energy accounting
    pub gamma: Option<f64>,
    /// test momentum against divergence-free fields only
    pub incompressible: bool,
    pub certs: SchemeCerts,
    /// upstream residual certificates of the base state
    pub base_mass_cert: f64,
    pub base_momentum_cert: f64,
    pub status: RunStatus,
    pub reports: Vec<DefectReport>,
}

impl EulerCandidate {
    pub fn final_tr_m(&self) -> f64 {
        (0..self.grid.len())
            .map(|i| self.m_trace[i] * self.grid.weight(i))
            .sum()
    }

    pub fn l2_distance(&self, other: &EulerCandidate) -> f64 {
        (0..self.grid.len())
            .filter(|&i| self.active[i])
            .map(|i| {
                let d = vsub(&self.v[i], &other.v[i]);
                dot(&d, &d) * self.grid.weight(i)
            })
            .sum::<f64>()
            .sqrt()
    }
}

fn candidate(fs: &FieldState, defect: &DefectField, status: RunStatus, reports: Vec<DefectReport>) -> EulerCandidate {
    let len = fs.grid.len();
    EulerCandidate {
        grid: fs.grid,
        rho: fs.rho0.clone(),
        v: (0..len).map(|i| fs.velocity(i)).collect(),
        u: (0..len).map(|i| fs.u0[i] + fs.util[i]).collect(),
        v0: fs.v0.clone(),
        r0_trace: fs.r0.iter().map(|r| r.trace()).collect(),
        vtil: fs.vtil.clone(),
        util: fs.util.clone(),
        m_trace: defect.m.iter().map(|m| m.trace()).collect(),
        active: fs.active.clone(),
        pressure: vec![0.0; len],
        gamma: None,
        incompressible: false,
        certs: fs.certs,
        base_mass_cert: 0.0,
        base_momentum_cert: 0.0,
        status,
        reports,
    }
}

/// Sweeps until ∫tr M ≤ target·initial, max_sweeps, or stagnation.
pub fn run(fs: &FieldState, target: f64, max_sweeps: usize, seed: u64) -> Result<EulerCandidate> {
    run_with(fs, target, max_sweeps, seed, |_| {})
}

/// `run` with a callback receiving each sweep's report.
pub fn run_with(
    fs: &FieldState,
    target: f64,
    max_sweeps: usize,
    seed: u64,
    mut on_sweep: impl FnMut(&DefectReport),
) -> Result<EulerCandidate> {
    if !(target >= 0.0) {
        return Err(Error::InvalidInput("target must be nonnegative".into()));
    }
    fs.validate()?;
    let mut state = fs.clone();
    let mut defect = compute_defect(&state)?;
    let initial = defect.integral_tr;
    let mut history = vec![initial];
    let mut reports = Vec::new();
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let status = loop {
        if defect.integral_tr <= target * initial {
            break RunStatus::Converged;
        }
        if reports.len() >= max_sweeps {
            break RunStatus::MaxSweeps;
        }
        let out = sweep_with(&state, &defect, seeds.next_u64(), reports.len() + 1, initial)?;
        on_sweep(&out.report);
        reports.push(out.report);
        state = out.state;
        defect = compute_defect(&state)?;
        history.push(defect.integral_tr);
        let h = history.len();
        if h > STAGNATION_WINDOW {
            let old = history[h - 1 - STAGNATION_WINDOW];
            if old - defect.integral_tr < STAGNATION_TOL * old && defect.integral_tr > target * initial {
                break RunStatus::Stagnated;
            }
        }
    };
    Ok(candidate(&state, &defect, status, reports))
}

/// Pointwise |V_new|²/ρ₀ − |V₀|²/ρ₀ − tr R₀ on P (zero elsewhere).
pub fn energy_identity_check(c: &EulerCandidate) -> Vec<f64> {
    (0..c.grid.len())
        .map(|i| {
            if !c.active[i] {
                return 0.0;
            }
            (dot(&c.v[i], &c.v[i]) - dot(&c.v0[i], &c.v0[i])) / c.rho[i] - c.r0_trace[i]
        })
        .collect()
}

/// ∫_P |f|.
pub fn l1_active(grid: &Grid, active: &[bool], f: &[f64]) -> f64 {
    (0..grid.len())
        .filter(|&i| active[i])
        .map(|i| f[i].abs() * grid.weight(i))
        .sum()
}
