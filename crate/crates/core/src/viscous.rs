//! Viscous approximations on the periodic torus and extraction of the
//! defect fields (𝓡, r) by coarse-graining.
//!
//! Incompressible: pseudo-spectral Navier–Stokes with 2/3 dealiasing and an
//! integrating-factor RK4 step. Compressible: finite volumes with MUSCL
//! (minmod on primitive variables), Rusanov fluxes, a central viscous flux
//! νρ𝔻v and SSP-RK3. Both keep a ledger energy + cumulative dissipation.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, TimeLayout};
use crate::harness::{comp_subsolution_residuals, incomp_subsolution_residuals, TestBank, DEFAULT_KMAX};
use crate::matgeom::{dot, lambda_min, SymMat, Vec3};
use crate::subsolution::{energy_density, pressure, CompSubsolution, EnergyBudget, IncompSubsolution};

pub const VACUUM_FLOOR: f64 = 1e-6;
const CFL: f64 = 0.4;
const SPECTRAL_CFL: f64 = 0.5;
const VISCOUS_SAFETY: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub step: usize,
    pub t: f64,
    pub energy: f64,
    /// cumulative dissipation
    pub dissipation: f64,
    pub ledger: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViscousRun {
    pub nu: f64,
    /// saved slices (node layout)
    pub grid: Grid,
    /// None for the incompressible solver
    pub gamma: Option<f64>,
    pub rho: Vec<f64>,
    /// momentum ρv (velocity when incompressible)
    pub v: Vec<Vec3>,
    pub e0: f64,
    pub ledger: Vec<LedgerEntry>,
}

impl ViscousRun {
    /// Largest per-step increase of energy + dissipation.
    pub fn max_ledger_increase(&self) -> f64 {
        self.ledger
            .windows(2)
            .map(|w| w[1].ledger - w[0].ledger)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn slice_energy(&self, j: usize) -> f64 {
        let g = &self.grid;
        let h = g.cell_volume();
        (0..g.ns())
            .map(|s| {
                let i = g.idx(j, s);
                h * match self.gamma {
                    Some(gm) => energy_density(self.rho[i], &self.v[i], gm).unwrap_or(f64::NAN),
                    None => 0.5 * dot(&self.v[i], &self.v[i]),
                }
            })
            .sum()
    }

    pub fn total_dissipation(&self) -> f64 {
        self.ledger.last().map_or(0.0, |e| e.dissipation)
    }
}

fn check_output_grid(grid: &Grid) -> Result<()> {
    if grid.layout != TimeLayout::Node || grid.t_start != 0.0 {
        return Err(Error::InvalidInput(
            "viscous runs save on a node grid starting at t = 0".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// pseudo-spectral incompressible solver

struct Spectral {
    n: usize,
    nx: usize,
    ns: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    kvec: Vec<Vec3>,
    k2: Vec<f64>,
    keep: Vec<bool>,
}

impl Spectral {
    fn new(grid: &Grid) -> Self {
        let n = grid.n;
        let nx = grid.nx;
        let ns = grid.ns();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(nx);
        let inv = planner.plan_fft_inverse(nx);
        let c = 2.0 * std::f64::consts::PI / grid.extent;
        let mut kvec = Vec::with_capacity(ns);
        let mut keep = Vec::with_capacity(ns);
        for s in 0..ns {
            let m = grid.multi(s);
            let mut k = [0.0; 3];
            let mut ok = true;
            for a in 0..n {
                let mm = if m[a] > nx / 2 { m[a] as i64 - nx as i64 } else { m[a] as i64 };
                k[a] = c * mm as f64;
                if 3 * mm.unsigned_abs() as usize >= nx {
                    ok = false;
                }
            }
            kvec.push(k);
            keep.push(ok);
        }
        let k2 = kvec.iter().map(|k| dot(k, k)).collect();
        Spectral {
            n,
            nx,
            ns,
            fwd,
            inv,
            kvec,
            k2,
            keep,
        }
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let plan = if inverse { &self.inv } else { &self.fwd };
        let mut line = vec![Complex64::new(0.0, 0.0); self.nx];
        for a in 0..self.n {
            let stride = self.nx.pow(a as u32);
            for s in 0..self.ns {
                if (s / stride) % self.nx != 0 {
                    continue;
                }
                for (m, l) in line.iter_mut().enumerate() {
                    *l = data[s + m * stride];
                }
                plan.process(&mut line);
                for (m, l) in line.iter().enumerate() {
                    data[s + m * stride] = *l;
                }
            }
        }
    }

    fn to_spectral(&self, f: &[f64]) -> Vec<Complex64> {
        let mut d: Vec<Complex64> = f.iter().map(|x| Complex64::new(*x, 0.0)).collect();
        self.transform(&mut d, false);
        d
    }

    fn to_physical(&self, f: &[Complex64]) -> Vec<f64> {
        let mut d = f.to_vec();
        self.transform(&mut d, true);
        let inv = 1.0 / self.ns as f64;
        d.iter().map(|z| z.re * inv).collect()
    }

    fn project(&self, v: &mut [Vec<Complex64>]) {
        for s in 0..self.ns {
            if !self.keep[s] {
                for c in v.iter_mut() {
                    c[s] = Complex64::new(0.0, 0.0);
                }
                continue;
            }
            if self.k2[s] == 0.0 {
                continue;
            }
            let k = &self.kvec[s];
            let mut kd = Complex64::new(0.0, 0.0);
            for a in 0..self.n {
                kd += v[a][s] * k[a];
            }
            for a in 0..self.n {
                v[a][s] -= kd * (k[a] / self.k2[s]);
            }
        }
    }

    /// −P div(v⊗v) in spectral space.
    fn nonlinear(&self, vh: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
        let n = self.n;
        let phys: Vec<Vec<f64>> = vh.iter().map(|c| self.to_physical(c)).collect();
        let mut out = vec![vec![Complex64::new(0.0, 0.0); self.ns]; n];
        for a in 0..n {
            for b in a..n {
                let prod: Vec<f64> = phys[a].iter().zip(&phys[b]).map(|(x, y)| x * y).collect();
                let ph = self.to_spectral(&prod);
                for s in 0..self.ns {
                    let i_k = Complex64::new(0.0, 1.0);
                    out[a][s] -= i_k * self.kvec[s][b] * ph[s];
                    if a != b {
                        out[b][s] -= i_k * self.kvec[s][a] * ph[s];
                    }
                }
            }
        }
        self.project(&mut out);
        out
    }

    fn energy(&self, vh: &[Vec<Complex64>], hn: f64) -> f64 {
        0.5 * hn / self.ns as f64 * vh.iter().flat_map(|c| c.iter()).map(|z| z.norm_sqr()).sum::<f64>()
    }

    fn dissipation_rate(&self, vh: &[Vec<Complex64>], hn: f64, nu: f64) -> f64 {
        let mut acc = 0.0;
        for c in vh {
            for (s, z) in c.iter().enumerate() {
                acc += self.k2[s] * z.norm_sqr();
            }
        }
        nu * hn / self.ns as f64 * acc
    }

    fn max_speed(&self, vh: &[Vec<Complex64>]) -> f64 {
        let phys: Vec<Vec<f64>> = vh.iter().map(|c| self.to_physical(c)).collect();
        (0..self.ns)
            .map(|s| phys.iter().map(|c| c[s] * c[s]).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

fn axpy(y: &[Vec<Complex64>], a: f64, x: &[Vec<Complex64>], f: &[f64]) -> Vec<Vec<Complex64>> {
    // f ⊙ (y + a x)
    y.iter()
        .zip(x)
        .map(|(yc, xc)| {
            yc.iter()
                .zip(xc)
                .zip(f)
                .map(|((y, x), f)| (y + x * a) * *f)
                .collect()
        })
        .collect()
}

/// Leray–Hopf approximation from v0 (projected onto divergence-free fields).
pub fn solve_incomp_ns(grid: Grid, v0: &[Vec3], nu: f64) -> Result<ViscousRun> {
    check_output_grid(&grid)?;
    if !(nu > 0.0) {
        return Err(Error::InvalidInput(format!("viscosity {nu} must be positive")));
    }
    let ns = grid.ns();
    if v0.len() != ns {
        return Err(Error::DimensionMismatch { expected: ns, got: v0.len() });
    }
    let n = grid.n;
    let hn = grid.cell_volume();
    let h = grid.h();
    let sp = Spectral::new(&grid);
    let mut vh: Vec<Vec<Complex64>> = (0..n)
        .map(|a| sp.to_spectral(&v0.iter().map(|v| v[a]).collect::<Vec<_>>()))
        .collect();
    sp.project(&mut vh);
    let mut out_v = vec![[0.0; 3]; grid.len()];
    let save = |vh: &[Vec<Complex64>], j: usize, out: &mut Vec<Vec3>| {
        for (a, c) in vh.iter().enumerate() {
            let p = sp.to_physical(c);
            for s in 0..ns {
                out[j * ns + s][a] = p[s];
            }
        }
    };
    save(&vh, 0, &mut out_v);
    let e0 = sp.energy(&vh, hn);
    let mut ledger = vec![LedgerEntry {
        step: 0,
        t: 0.0,
        energy: e0,
        dissipation: 0.0,
        ledger: e0,
    }];
    let mut t = 0.0;
    let mut diss = 0.0;
    let mut rate = sp.dissipation_rate(&vh, hn, nu);
    let mut step = 0;
    for j in 1..grid.nt {
        let target = grid.t(j);
        let umax = sp.max_speed(&vh);
        let span = target - t;
        let dt_cfl = if umax > 0.0 { SPECTRAL_CFL * h / umax } else { span };
        let m = (span / dt_cfl).ceil().max(1.0) as usize;
        let dt = span / m as f64;
        let e_full: Vec<f64> = sp.k2.iter().map(|k| (-nu * k * dt).exp()).collect();
        let e_half: Vec<f64> = sp.k2.iter().map(|k| (-0.5 * nu * k * dt).exp()).collect();
        let ones = vec![1.0; ns];
        for _ in 0..m {
            let k1 = sp.nonlinear(&vh);
            let k2 = sp.nonlinear(&axpy(&vh, 0.5 * dt, &k1, &e_half));
            let base_half = axpy(&vh, 0.0, &vh, &e_half);
            let k3 = sp.nonlinear(&axpy(&base_half, 0.5 * dt, &k2, &ones));
            let ek3 = axpy(&k3, 0.0, &k3, &e_half);
            let base_full = axpy(&vh, 0.0, &vh, &e_full);
            let k4 = sp.nonlinear(&axpy(&base_full, dt, &ek3, &ones));
            for a in 0..n {
                for s in 0..ns {
                    vh[a][s] = e_full[s] * vh[a][s]
                        + (e_full[s] * k1[a][s] + 2.0 * e_half[s] * (k2[a][s] + k3[a][s]) + k4[a][s])
                            * (dt / 6.0);
                }
            }
            sp.project(&mut vh);
            step += 1;
            t += dt;
            let energy = sp.energy(&vh, hn);
            if !energy.is_finite() {
                return Err(Error::StepSize(format!("spectral solution blew up at t = {t:.4e}")));
            }
            let new_rate = sp.dissipation_rate(&vh, hn, nu);
            diss += dt * rate.min(new_rate);
            rate = new_rate;
            ledger.push(LedgerEntry {
                step,
                t,
                energy,
                dissipation: diss,
                ledger: energy + diss,
            });
        }
        let umax = sp.max_speed(&vh);
        if umax * dt > h {
            return Err(Error::StepSize(format!("CFL number {:.3} above 1", umax * dt / h)));
        }
        t = target;
        save(&vh, j, &mut out_v);
    }
    Ok(ViscousRun {
        nu,
        grid,
        gamma: None,
        rho: vec![1.0; grid.len()],
        v: out_v,
        e0,
        ledger,
    })
}

// ---------------------------------------------------------------------------
// finite-volume compressible solver

struct FvMesh {
    n: usize,
    ns: usize,
    h: f64,
    /// nbr[a][0] = i − e_a, nbr[a][1] = i + e_a
    nbr: Vec<[Vec<usize>; 2]>,
}

impl FvMesh {
    fn new(grid: &Grid) -> Self {
        let ns = grid.ns();
        let nbr = (0..grid.n)
            .map(|a| {
                [
                    (0..ns).map(|s| grid.shift(s, a, -1)).collect(),
                    (0..ns).map(|s| grid.shift(s, a, 1)).collect(),
                ]
            })
            .collect();
        FvMesh {
            n: grid.n,
            ns,
            h: grid.h(),
            nbr,
        }
    }
}

fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

struct FvState {
    rho: Vec<f64>,
    mom: Vec<Vec3>,
}

/// Returns the time derivative and the dissipation rate of the viscous flux.
fn fv_rhs(mesh: &FvMesh, st: &FvState, nu: f64, gamma: f64) -> (Vec<f64>, Vec<Vec3>, f64) {
    let n = mesh.n;
    let ns = mesh.ns;
    let h = mesh.h;
    let u: Vec<Vec3> = (0..ns)
        .map(|i| {
            let mut v = [0.0; 3];
            for c in 0..n {
                v[c] = st.mom[i][c] / st.rho[i];
            }
            v
        })
        .collect();
    let mut drho = vec![0.0; ns];
    let mut dmom = vec![[0.0; 3]; ns];
    let mut rate = 0.0;
    let hn = h.powi(n as i32);
    for a in 0..n {
        let prev = &mesh.nbr[a][0];
        let next = &mesh.nbr[a][1];
        // slopes of (ρ, u)
        let slopes: Vec<[f64; 4]> = (0..ns)
            .map(|i| {
                let (l, r) = (prev[i], next[i]);
                let mut s = [0.0; 4];
                s[0] = minmod(st.rho[i] - st.rho[l], st.rho[r] - st.rho[i]);
                for c in 0..n {
                    s[1 + c] = minmod(u[i][c] - u[l][c], u[r][c] - u[i][c]);
                }
                s
            })
            .collect();
        for i in 0..ns {
            let j = next[i];
            let rl = st.rho[i] + 0.5 * slopes[i][0];
            let rr = st.rho[j] - 0.5 * slopes[j][0];
            let mut ul = [0.0; 3];
            let mut ur = [0.0; 3];
            for c in 0..n {
                ul[c] = u[i][c] + 0.5 * slopes[i][1 + c];
                ur[c] = u[j][c] - 0.5 * slopes[j][1 + c];
            }
            let pl = pressure(rl, gamma);
            let pr = pressure(rr, gamma);
            let cl = (gamma * pl / rl).sqrt();
            let cr = (gamma * pr / rr).sqrt();
            let smax = (ul[a].abs() + cl).max(ur[a].abs() + cr);
            let mut f = [0.0; 4];
            f[0] = 0.5 * (rl * ul[a] + rr * ur[a]) - 0.5 * smax * (rr - rl);
            for c in 0..n {
                let fl = rl * ul[a] * ul[c] + if c == a { pl } else { 0.0 };
                let fr = rr * ur[a] * ur[c] + if c == a { pr } else { 0.0 };
                f[1 + c] = 0.5 * (fl + fr) - 0.5 * smax * (rr * ur[c] - rl * ul[c]);
            }
            // viscous flux −νρ_f 𝔻v e_a at the face
            let rho_f = 0.5 * (st.rho[i] + st.rho[j]);
            let mut grad = [[0.0; 3]; 3]; // grad[c][b] = ∂_b v_c
            for c in 0..n {
                grad[c][a] = (u[j][c] - u[i][c]) / h;
            }
            for b in 0..n {
                if b == a {
                    continue;
                }
                let (ip, im) = (mesh.nbr[b][1][i], mesh.nbr[b][0][i]);
                let (jp, jm) = (mesh.nbr[b][1][j], mesh.nbr[b][0][j]);
                for c in 0..n {
                    grad[c][b] = (u[ip][c] - u[im][c] + u[jp][c] - u[jm][c]) / (4.0 * h);
                }
            }
            for c in 0..n {
                let d = 0.5 * (grad[c][a] + grad[a][c]);
                let fv = nu * rho_f * d;
                f[1 + c] -= fv;
                rate += grad[c][a] * fv * hn;
            }
            drho[i] -= f[0] / h;
            drho[j] += f[0] / h;
            for c in 0..n {
                dmom[i][c] -= f[1 + c] / h;
                dmom[j][c] += f[1 + c] / h;
            }
        }
    }
    (drho, dmom, rate)
}

fn fv_energy(st: &FvState, gamma: f64, hn: f64) -> f64 {
    st.rho
        .iter()
        .zip(&st.mom)
        .map(|(r, m)| (0.5 * dot(m, m) / r + pressure(*r, gamma) / (gamma - 1.0)) * hn)
        .sum()
}

fn fv_combine(a: &FvState, wa: f64, b: &FvState, wb: f64, d: (&[f64], &[Vec3]), dt: f64) -> FvState {
    // wa·a + wb·(b + dt·d)
    let rho = (0..a.rho.len())
        .map(|i| wa * a.rho[i] + wb * (b.rho[i] + dt * d.0[i]))
        .collect();
    let mom = (0..a.mom.len())
        .map(|i| {
            let mut m = [0.0; 3];
            for c in 0..3 {
                m[c] = wa * a.mom[i][c] + wb * (b.mom[i][c] + dt * d.1[i][c]);
            }
            m
        })
        .collect();
    FvState { rho, mom }
}

fn check_vacuum(st: &FvState) -> Result<()> {
    let mut min = f64::INFINITY;
    for r in &st.rho {
        if !r.is_finite() {
            return Err(Error::StepSize("non-finite density".into()));
        }
        min = min.min(*r);
    }
    if min < VACUUM_FLOOR {
        return Err(Error::Vacuum { rho: min });
    }
    Ok(())
}

/// Compressible Navier–Stokes with degenerate viscosity div(νρ𝔻v);
/// `mom0` is the momentum V⁰ = ρ⁰v⁰.
pub fn solve_comp_ns(grid: Grid, rho0: &[f64], mom0: &[Vec3], nu: f64, gamma: f64) -> Result<ViscousRun> {
    check_output_grid(&grid)?;
    crate::subsolution::gamma_gate(gamma, grid.n)?;
    if !(nu > 0.0) {
        return Err(Error::InvalidInput(format!("viscosity {nu} must be positive")));
    }
    let ns = grid.ns();
    if rho0.len() != ns || mom0.len() != ns {
        return Err(Error::DimensionMismatch { expected: ns, got: rho0.len().min(mom0.len()) });
    }
    let n = grid.n;
    let mesh = FvMesh::new(&grid);
    let h = mesh.h;
    let hn = grid.cell_volume();
    let mut st = FvState {
        rho: rho0.to_vec(),
        mom: mom0
            .iter()
            .map(|m| {
                let mut v = [0.0; 3];
                v[..n].copy_from_slice(&m[..n]);
                v
            })
            .collect(),
    };
    check_vacuum(&st)?;
    let mut out_rho = vec![0.0; grid.len()];
    let mut out_v = vec![[0.0; 3]; grid.len()];
    let save = |st: &FvState, j: usize, r: &mut Vec<f64>, v: &mut Vec<Vec3>| {
        r[j * ns..(j + 1) * ns].copy_from_slice(&st.rho);
        v[j * ns..(j + 1) * ns].copy_from_slice(&st.mom);
    };
    save(&st, 0, &mut out_rho, &mut out_v);
    let e0 = fv_energy(&st, gamma, hn);
    let mut ledger = vec![LedgerEntry {
        step: 0,
        t: 0.0,
        energy: e0,
        dissipation: 0.0,
        ledger: e0,
    }];
    let mut t = 0.0;
    let mut diss = 0.0;
    let mut step = 0;
    let dt_visc = VISCOUS_SAFETY * h * h / (n as f64 * nu);
    for j in 1..grid.nt {
        let target = grid.t(j);
        while t < target * (1.0 - 1e-14) {
            let smax = (0..ns)
                .map(|i| {
                    let r = st.rho[i];
                    let c = (gamma * pressure(r, gamma) / r).sqrt();
                    (0..n).map(|a| (st.mom[i][a] / r).abs()).fold(0.0, f64::max) + c
                })
                .fold(0.0, f64::max);
            let dt = (CFL * h / smax).min(dt_visc).min(target - t);
            let (d1r, d1m, rate0) = fv_rhs(&mesh, &st, nu, gamma);
            let s1 = fv_combine(&st, 0.0, &st, 1.0, (&d1r, &d1m), dt);
            check_vacuum(&s1)?;
            let (d2r, d2m, _) = fv_rhs(&mesh, &s1, nu, gamma);
            let s2 = fv_combine(&st, 0.75, &s1, 0.25, (&d2r, &d2m), dt);
            check_vacuum(&s2)?;
            let (d3r, d3m, _) = fv_rhs(&mesh, &s2, nu, gamma);
            let next = fv_combine(&st, 1.0 / 3.0, &s2, 2.0 / 3.0, (&d3r, &d3m), dt);
            check_vacuum(&next)?;
            st = next;
            t += dt;
            step += 1;
            let (_, _, rate1) = fv_rhs(&mesh, &st, nu, gamma);
            diss += dt * rate0.min(rate1).max(0.0);
            let energy = fv_energy(&st, gamma, hn);
            ledger.push(LedgerEntry {
                step,
                t,
                energy,
                dissipation: diss,
                ledger: energy + diss,
            });
        }
        t = target;
        save(&st, j, &mut out_rho, &mut out_v);
    }
    Ok(ViscousRun {
        nu,
        grid,
        gamma: Some(gamma),
        rho: out_rho,
        v: out_v,
        e0,
        ledger,
    })
}

/// Runs the compressible solver for every viscosity in parallel.
pub fn solve_comp_schedule(
    grid: Grid,
    rho0: &[f64],
    mom0: &[Vec3],
    nus: &[f64],
    gamma: f64,
) -> Result<Vec<ViscousRun>> {
    nus.par_iter()
        .map(|&nu| solve_comp_ns(grid, rho0, mom0, nu, gamma))
        .collect()
}

// ---------------------------------------------------------------------------
// defect extraction

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    /// Gaussian filter standard deviation (0 = no filtering)
    pub filter_width: f64,
    /// largest admissible normalized weak residual
    pub max_residual: f64,
    pub kmax: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            filter_width: 0.0,
            max_residual: 5e-2,
            kmax: DEFAULT_KMAX,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectTrend {
    pub nu: f64,
    pub calr_l1: f64,
    pub r_l1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefectExtract {
    pub filter_width: f64,
    pub sub: CompSubsolution,
    /// largest negative eigenvalue removed from 𝓡
    pub clip_calr: f64,
    /// largest negative value removed from r
    pub clip_r: f64,
    /// sup |𝓡|, sup r
    pub calr_sup: f64,
    pub r_sup: f64,
    /// sup |V|²/ρ and sup p(ρ) of the filtered fields
    pub kinetic_scale: f64,
    pub pressure_scale: f64,
    pub trend: Vec<DefectTrend>,
}

struct Filtered {
    rho: Vec<f64>,
    v: Vec<Vec3>,
    calr: Vec<SymMat>,
    r: Vec<f64>,
}

// Gauss–Legendre nodes and weights on [0,1] (8 points)
const GL_X: [f64; 8] = [
    0.019_855_071_751_231_856,
    0.101_666_761_293_186_63,
    0.237_233_795_041_835_5,
    0.408_282_678_752_175_1,
    0.591_717_321_247_824_9,
    0.762_766_204_958_164_5,
    0.898_333_238_706_813_4,
    0.980_144_928_248_768_1,
];
const GL_W: [f64; 8] = [
    0.050_614_268_145_188_13,
    0.111_190_517_226_687_24,
    0.156_853_322_938_943_64,
    0.181_341_891_689_180_99,
    0.181_341_891_689_180_99,
    0.156_853_322_938_943_64,
    0.111_190_517_226_687_24,
    0.050_614_268_145_188_13,
];

/// p(ρ) − p(ρ̄) − p'(ρ̄)(ρ − ρ̄) in integral form, nonnegative by construction.
fn bregman(rho: f64, bar: f64, gamma: f64) -> f64 {
    let d = rho - bar;
    let mut acc = 0.0;
    for k in 0..8 {
        let s = GL_X[k];
        let x = bar + s * d;
        acc += GL_W[k] * (1.0 - s) * gamma * (gamma - 1.0) * x.powf(gamma - 2.0);
    }
    d * d * acc
}

fn filter_run(run: &ViscousRun, width: f64, gamma: f64) -> Filtered {
    let g = run.grid;
    let n = g.n;
    let len = g.len();
    if width <= 0.0 {
        return Filtered {
            rho: run.rho.clone(),
            v: run.v.clone(),
            calr: vec![SymMat::zeros(n); len],
            r: vec![0.0; len],
        };
    }
    let nx = g.nx;
    let h = g.h();
    let radius = ((8.6 * width / h).ceil() as usize).min((nx - 1) / 2);
    let raw: Vec<f64> = (0..=radius)
        .map(|k| (-((k as f64 * h).powi(2)) / (2.0 * width * width)).exp())
        .collect();
    let tot: f64 = raw[0] + 2.0 * raw[1..].iter().sum::<f64>();
    let w1: Vec<f64> = raw.iter().map(|x| x / tot).collect();
    let r = radius as isize;
    let offsets: Vec<([isize; 3], f64)> = {
        let mut o = Vec::new();
        let zr = if n == 3 { -r..=r } else { 0..=0 };
        for dz in zr {
            for dy in -r..=r {
                for dx in -r..=r {
                    let mut w = w1[dx.unsigned_abs()] * w1[dy.unsigned_abs()];
                    if n == 3 {
                        w *= w1[dz.unsigned_abs()];
                    }
                    o.push(([dx, dy, dz], w));
                }
            }
        }
        o
    };
    let ns = g.ns();
    let cells: Vec<(f64, Vec3, SymMat, f64)> = (0..len)
        .into_par_iter()
        .map(|i| {
            let (j, s) = g.split(i);
            let m = g.multi(s);
            let base = j * ns;
            let nb = |off: &[isize; 3]| {
                let mut mm = [0usize; 3];
                for a in 0..n {
                    mm[a] = (m[a] as isize + off[a]).rem_euclid(nx as isize) as usize;
                }
                base + g.spatial(&mm)
            };
            let mut rb = 0.0;
            let mut vb = [0.0; 3];
            for (off, w) in &offsets {
                let k = nb(off);
                rb += w * run.rho[k];
                for c in 0..n {
                    vb[c] += w * run.v[k][c];
                }
            }
            let mut vt = [0.0; 3];
            for c in 0..n {
                vt[c] = vb[c] / rb;
            }
            let mut cr = SymMat::zeros(n);
            let mut rr = 0.0;
            for (off, w) in &offsets {
                let k = nb(off);
                let rho = run.rho[k];
                let mut d = [0.0; 3];
                for c in 0..n {
                    d[c] = run.v[k][c] / rho - vt[c];
                }
                cr += SymMat::outer(n, &d) * (w * rho);
                rr += w * bregman(rho, rb, gamma);
            }
            (rb, vb, cr, rr)
        })
        .collect();
    let mut f = Filtered {
        rho: Vec::with_capacity(len),
        v: Vec::with_capacity(len),
        calr: Vec::with_capacity(len),
        r: Vec::with_capacity(len),
    };
    for (a, b, c, d) in cells {
        f.rho.push(a);
        f.v.push(b);
        f.calr.push(c);
        f.r.push(d);
    }
    f
}

/// Coarse-grains the smallest-viscosity run: ρ = ⟨ρ_ν⟩, V = ⟨V_ν⟩,
/// 𝓡 = ⟨V_ν⊗V_ν/ρ_ν⟩ − V⊗V/ρ, r = ⟨p(ρ_ν)⟩ − p(ρ).
pub fn extract_defect(runs: &[ViscousRun], cfg: &ExtractConfig) -> Result<DefectExtract> {
    if runs.len() < 2 {
        return Err(Error::InvalidInput("extraction needs at least two viscosities".into()));
    }
    let g = runs[0].grid;
    let gamma = runs[0]
        .gamma
        .ok_or_else(|| Error::InvalidInput("extraction needs compressible runs".into()))?;
    if runs.iter().any(|r| r.grid != g || r.gamma != Some(gamma)) {
        return Err(Error::InvalidInput("runs do not share grid and gamma".into()));
    }
    let finest = runs
        .iter()
        .min_by(|a, b| a.nu.partial_cmp(&b.nu).unwrap())
        .unwrap();
    let mut trend = Vec::new();
    let mut sorted: Vec<&ViscousRun> = runs.iter().collect();
    sorted.sort_by(|a, b| b.nu.partial_cmp(&a.nu).unwrap());
    let mut main = None;
    for run in sorted {
        let f = filter_run(run, cfg.filter_width, gamma);
        let l1 = |x: &dyn Fn(usize) -> f64| (0..g.len()).map(|i| x(i).abs() * g.weight(i)).sum::<f64>();
        trend.push(DefectTrend {
            nu: run.nu,
            calr_l1: l1(&|i| f.calr[i].trace()),
            r_l1: l1(&|i| f.r[i]),
        });
        if std::ptr::eq(run, finest) {
            main = Some(f);
        }
    }
    let mut f = main.expect("finest run filtered");
    let mut clip_calr = 0.0f64;
    let mut clip_r = 0.0f64;
    for i in 0..g.len() {
        let lm = lambda_min(&f.calr[i]);
        if lm < 0.0 {
            clip_calr = clip_calr.max(-lm);
            let mut e = crate::matgeom::eig_sym(&f.calr[i])?;
            for v in e.values.iter_mut() {
                *v = v.max(0.0);
            }
            f.calr[i] = e.reconstruct();
        }
        if f.r[i] < 0.0 {
            clip_r = clip_r.max(-f.r[i]);
            f.r[i] = 0.0;
        }
    }
    let calr_sup = f.calr.iter().map(|m| m.max_abs()).fold(0.0, f64::max);
    let r_sup = f.r.iter().cloned().fold(0.0, f64::max);
    let kinetic_scale = (0..g.len())
        .map(|i| dot(&f.v[i], &f.v[i]) / f.rho[i])
        .fold(0.0, f64::max);
    let pressure_scale = f.rho.iter().map(|r| pressure(*r, gamma)).fold(0.0, f64::max);
    let budget = EnergyBudget::new(finest.e0, g.t_end - g.t_start)?;
    let mut sub = CompSubsolution::new(g, gamma, f.rho, f.v, f.calr, f.r, budget)?;
    let bank = TestBank::new(&g, cfg.kmax)?;
    sub.certs = comp_subsolution_residuals(&sub, &bank)?;
    let worst = sub.certs.mass.max(sub.certs.momentum);
    if worst > cfg.max_residual {
        return Err(Error::RejectedExtract(format!(
            "weak residual {worst:.3e} exceeds {:.3e} (filter width {}, nu {})",
            cfg.max_residual, cfg.filter_width, finest.nu
        )));
    }
    Ok(DefectExtract {
        filter_width: cfg.filter_width,
        sub,
        clip_calr,
        clip_r,
        calr_sup,
        r_sup,
        kinetic_scale,
        pressure_scale,
        trend,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct IncompExtract {
    pub filter_width: f64,
    pub sub: IncompSubsolution,
    /// largest negative eigenvalue removed from R
    pub clip: f64,
    pub stress_sup: f64,
}

/// Incompressible analogue: v = ⟨v_ν⟩, R = ⟨v_ν⊗v_ν⟩ − v⊗v.
pub fn extract_defect_incomp(runs: &[ViscousRun], cfg: &ExtractConfig) -> Result<IncompExtract> {
    if runs.len() < 2 {
        return Err(Error::InvalidInput("extraction needs at least two viscosities".into()));
    }
    let g = runs[0].grid;
    if runs.iter().any(|r| r.grid != g || r.gamma.is_some()) {
        return Err(Error::InvalidInput("runs must be incompressible on a common grid".into()));
    }
    let finest = runs
        .iter()
        .min_by(|a, b| a.nu.partial_cmp(&b.nu).unwrap())
        .unwrap();
    // unit density: the Bregman term vanishes for any exponent
    let f = filter_run(finest, cfg.filter_width, 2.0);
    let mut clip = 0.0f64;
    let rr: Vec<SymMat> = f
        .calr
        .into_iter()
        .map(|m| {
            let lm = lambda_min(&m);
            if lm >= 0.0 {
                return Ok(m);
            }
            clip = clip.max(-lm);
            let mut e = crate::matgeom::eig_sym(&m)?;
            for v in e.values.iter_mut() {
                *v = v.max(0.0);
            }
            Ok(e.reconstruct())
        })
        .collect::<Result<_>>()?;
    let stress_sup = rr.iter().map(|m| m.max_abs()).fold(0.0, f64::max);
    let budget = EnergyBudget::new(finest.e0, g.t_end - g.t_start)?;
    let mut sub = IncompSubsolution::new(g, f.v, rr, budget)?;
    let bank = TestBank::new(&g, cfg.kmax)?;
    sub.certs = incomp_subsolution_residuals(&sub, &bank)?;
    let worst = sub.certs.mass.max(sub.certs.momentum);
    if worst > cfg.max_residual {
        return Err(Error::RejectedExtract(format!(
            "weak residual {worst:.3e} exceeds {:.3e} (filter width {}, nu {})",
            cfg.max_residual, cfg.filter_width, finest.nu
        )));
    }
    Ok(IncompExtract {
        filter_width: cfg.filter_width,
        sub,
        clip,
        stress_sup,
    })
}

/// ∫E(U₁|U₂) = ∫[E(U₁) − E(U₂) − E'(U₂)·(U₁ − U₂)] with U = (ρ, V).
pub fn relative_entropy(
    u1: (&[f64], &[Vec3]),
    u2: (&[f64], &[Vec3]),
    gamma: f64,
    n: usize,
    cell_volume: f64,
) -> Result<f64> {
    let (r1, v1) = u1;
    let (r2, v2) = u2;
    if r1.len() != r2.len() || v1.len() != r1.len() || v2.len() != r2.len() {
        return Err(Error::DimensionMismatch { expected: r1.len(), got: r2.len() });
    }
    let mut acc = 0.0;
    for i in 0..r1.len() {
        let (a, b) = (r1[i], r2[i]);
        if !(a > 0.0) || !(b > 0.0) {
            return Err(Error::InvalidInput(format!("nonpositive density in relative entropy ({a}, {b})")));
        }
        let e1 = energy_density(a, &v1[i], gamma)?;
        let e2 = energy_density(b, &v2[i], gamma)?;
        let vv2 = dot(&v2[i], &v2[i]);
        let d_rho = -0.5 * vv2 / (b * b) + gamma * b.powf(gamma - 1.0) / (gamma - 1.0);
        let mut lin = d_rho * (a - b);
        for c in 0..n {
            lin += v2[i][c] / b * (v1[i][c] - v2[i][c]);
        }
        acc += (e1 - e2 - lin) * cell_volume;
    }
    Ok(acc)
}
