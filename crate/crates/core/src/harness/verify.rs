//! Weak-form residuals over a test bank and slice-wise energy reports.
//!
//! Quadrature is midpoint in space and the grid's time rule (trapezoid on
//! node layouts). Spatial integrals against each trigonometric mode come
//! from a separable direct DFT, so results do not depend on FFT planning.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::bank::{discrete_derivative, Phase, TestBank};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::matgeom::{dot, norm, SymMat, Vec3};
use crate::scheme::EulerCandidate;
use crate::subsolution::{pressure, CompSubsolution, IncompSubsolution, ResidualCerts};

/// Fields entering the weak forms: ∂tρ + div V = 0, ∂tV + div F = 0.
pub struct WeakFields<'a> {
    pub grid: &'a Grid,
    /// None means ρ ≡ 1
    pub rho: Option<&'a [f64]>,
    pub v: &'a [Vec3],
    pub flux: &'a [SymMat],
}

/// Largest normalized (mass, momentum) residual over the bank. With
/// `divfree` the momentum equation is tested against divergence-free fields.
pub fn weak_residuals(f: &WeakFields, bank: &TestBank, divfree: bool) -> Result<(f64, f64)> {
    let g = f.grid;
    let len = g.len();
    if f.v.len() != len || f.flux.len() != len || f.rho.is_some_and(|r| r.len() != len) {
        return Err(Error::DimensionMismatch {
            expected: len,
            got: f.v.len(),
        });
    }
    if bank.n != g.n || bank.extent != g.extent {
        return Err(Error::InvalidInput("test bank does not match the grid".into()));
    }
    let n = g.n;
    let kk = bank.kmax;
    let side = 2 * kk + 1;
    let tables = trig_tables(g, kk);
    let ones;
    let rho = match f.rho {
        Some(r) => r,
        None => {
            ones = vec![1.0; len];
            &ones
        }
    };
    // channel layout: ρ, V_c, F_cb (c ≤ b)
    let mut channels: Vec<Vec<f64>> = vec![rho.to_vec()];
    for c in 0..n {
        channels.push(f.v.iter().map(|v| v[c]).collect());
    }
    let mut fidx = [[0usize; 3]; 3];
    for c in 0..n {
        for b in c..n {
            fidx[c][b] = channels.len();
            fidx[b][c] = channels.len();
            channels.push(f.flux.iter().map(|m| m.get(c, b)).collect());
        }
    }
    let ns = g.ns();
    let hn = g.cell_volume();
    // transforms[ch][j] is the cube of ∫g e^{iκ·x} over k ∈ [−K,K]ⁿ
    let transforms: Vec<Vec<Vec<Complex64>>> = channels
        .par_iter()
        .map(|ch| {
            (0..g.nt)
                .map(|j| slice_dft(&ch[j * ns..(j + 1) * ns], g, &tables, side, hn))
                .collect()
        })
        .collect();

    let wts: Vec<f64> = (0..g.nt).map(|j| g.time_weight(j)).collect();
    let tw: Vec<(Vec<f64>, Vec<f64>, f64)> = bank
        .windows
        .iter()
        .map(|w| {
            let vals: Vec<f64> = (0..g.nt).map(|j| w.value(g.t(j))).collect();
            let d = discrete_derivative(g, &vals);
            let t0 = if w.touches_start { vals[0] } else { 0.0 };
            (vals, d, t0)
        })
        .collect();

    let per_mode: Vec<(f64, f64)> = (0..bank.modes.len())
        .into_par_iter()
        .map(|q| {
            let m = &bank.modes[q];
            let kap = bank.kappa(m);
            let mut ci = 0;
            let mut stride = 1;
            for a in 0..n {
                ci += (m[a] + kk as i32) as usize * stride;
                stride *= side;
            }
            let mut worst = (0.0f64, 0.0f64);
            for &ph in bank.phases(q) {
                let val = |z: Complex64| if ph == Phase::Cos { z.re } else { z.im };
                let dval = |z: Complex64, b: usize| {
                    if ph == Phase::Cos {
                        -kap[b] * z.im
                    } else {
                        kap[b] * z.re
                    }
                };
                for (wi, (tv, td, t0)) in tw.iter().enumerate() {
                    let nrm = bank.norm(q, wi);
                    let mut mass = *t0 * val(transforms[0][0][ci]);
                    let mut mom = [0.0; 3];
                    for (c, mc) in mom.iter_mut().enumerate().take(n) {
                        *mc = *t0 * val(transforms[1 + c][0][ci]);
                    }
                    for j in 0..g.nt {
                        if tv[j] == 0.0 && td[j] == 0.0 {
                            continue;
                        }
                        let w = wts[j];
                        let mut div_v = 0.0;
                        for b in 0..n {
                            div_v += dval(transforms[1 + b][j][ci], b);
                        }
                        mass += w * (td[j] * val(transforms[0][j][ci]) + tv[j] * div_v);
                        for (c, mc) in mom.iter_mut().enumerate().take(n) {
                            let mut div_f = 0.0;
                            for b in 0..n {
                                div_f += dval(transforms[fidx[c][b]][j][ci], b);
                            }
                            *mc += w * (td[j] * val(transforms[1 + c][j][ci]) + tv[j] * div_f);
                        }
                    }
                    worst.0 = worst.0.max(mass.abs() / nrm);
                    if divfree {
                        for d in &bank.divfree_dirs[q] {
                            worst.1 = worst.1.max(dot(d, &mom).abs() / nrm);
                        }
                    } else {
                        for mc in mom.iter().take(n) {
                            worst.1 = worst.1.max(mc.abs() / nrm);
                        }
                    }
                }
            }
            worst
        })
        .collect();
    Ok(per_mode
        .into_iter()
        .fold((0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1))))
}

// tables[k + K][m] = e^{2πi k (m + ½)/nx}
fn trig_tables(g: &Grid, kk: usize) -> Vec<Vec<Complex64>> {
    let nx = g.nx;
    (0..2 * kk + 1)
        .map(|ki| {
            let k = ki as f64 - kk as f64;
            (0..nx)
                .map(|m| {
                    let th = 2.0 * std::f64::consts::PI * k * (m as f64 + 0.5) / nx as f64;
                    Complex64::new(th.cos(), th.sin())
                })
                .collect()
        })
        .collect()
}

fn slice_dft(data: &[f64], g: &Grid, tables: &[Vec<Complex64>], side: usize, hn: f64) -> Vec<Complex64> {
    let nx = g.nx;
    let mut shape = [1usize; 3];
    for s in shape.iter_mut().take(g.n) {
        *s = nx;
    }
    let mut cur: Vec<Complex64> = data.iter().map(|x| Complex64::new(*x, 0.0)).collect();
    for a in 0..g.n {
        let mut next_shape = shape;
        next_shape[a] = side;
        let stride_in: usize = shape[..a].iter().product();
        let stride_out: usize = next_shape[..a].iter().product();
        let outer: usize = shape[a + 1..].iter().product();
        let mut next = vec![Complex64::new(0.0, 0.0); next_shape.iter().product()];
        for o in 0..outer {
            for inner in 0..stride_in {
                for (ki, row) in tables.iter().enumerate() {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (m, e) in row.iter().enumerate() {
                        acc += cur[inner + stride_in * (m + shape[a] * o)] * e;
                    }
                    next[inner + stride_out * (ki + side * o)] = acc;
                }
            }
        }
        cur = next;
        shape = next_shape;
    }
    for z in &mut cur {
        *z *= hn;
    }
    cur
}

/// Momentum flux V⊗V/ρ + 𝓡 + (r + p(ρ))I of a subsolution.
pub fn comp_flux(s: &CompSubsolution) -> Vec<SymMat> {
    let n = s.grid.n;
    (0..s.grid.len())
        .map(|i| {
            SymMat::outer(n, &s.v[i]) * (1.0 / s.rho[i])
                + s.calr[i]
                + SymMat::scalar(n, s.r[i] + pressure(s.rho[i], s.gamma))
        })
        .collect()
}

pub fn comp_subsolution_residuals(s: &CompSubsolution, bank: &TestBank) -> Result<ResidualCerts> {
    let flux = comp_flux(s);
    let (mass, momentum) = weak_residuals(
        &WeakFields {
            grid: &s.grid,
            rho: Some(&s.rho),
            v: &s.v,
            flux: &flux,
        },
        bank,
        false,
    )?;
    Ok(ResidualCerts { mass, momentum })
}

pub fn incomp_subsolution_residuals(s: &IncompSubsolution, bank: &TestBank) -> Result<ResidualCerts> {
    let n = s.grid.n;
    let flux: Vec<SymMat> = (0..s.grid.len()).map(|i| SymMat::outer(n, &s.v[i]) + s.rr[i]).collect();
    let (mass, momentum) = weak_residuals(
        &WeakFields {
            grid: &s.grid,
            rho: None,
            v: &s.v,
            flux: &flux,
        },
        bank,
        true,
    )?;
    Ok(ResidualCerts { mass, momentum })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub series: Vec<f64>,
    pub e_init: f64,
    pub tol: f64,
    pub violations: usize,
    pub max_excess: f64,
}

/// Budget the measured residuals are held against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertBudget {
    pub base_mass: f64,
    pub base_momentum: f64,
    pub wave_mass: f64,
    pub wave_momentum: f64,
    /// ∫tr M
    pub defect: f64,
    pub sampling_mass: f64,
    pub sampling_momentum: f64,
    pub mass_total: f64,
    pub momentum_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub n: usize,
    pub nx: usize,
    pub nt: usize,
    pub kmax: usize,
    pub bank_scalar: usize,
    pub incompressible: bool,
    pub mass_residual: f64,
    pub momentum_residual: f64,
    pub budget: CertBudget,
    pub energy: EnergyReport,
    pub residuals_within_budget: bool,
    pub passed: bool,
}

impl VerifyReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Nine significant digits, so reports compare equal across libm builds.
pub fn sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

pub fn candidate_energy(c: &EulerCandidate, j: usize) -> f64 {
    let g = &c.grid;
    let h = g.cell_volume();
    (0..g.ns())
        .map(|s| {
            let i = g.idx(j, s);
            let mut e = 0.5 * dot(&c.v[i], &c.v[i]) / c.rho[i];
            if let Some(gm) = c.gamma {
                e += pressure(c.rho[i], gm) / (gm - 1.0);
            }
            e * h
        })
        .sum()
}

/// Slice energies and violations of E(t) ≤ E(0) + 10⁻³E(0).
pub fn verify_energy(c: &EulerCandidate) -> EnergyReport {
    let series: Vec<f64> = (0..c.grid.nt).map(|j| candidate_energy(c, j)).collect();
    let e_init = series[0];
    let tol = 1e-3 * e_init.abs();
    let mut violations = 0;
    let mut max_excess = f64::NEG_INFINITY;
    for e in &series {
        let ex = e - e_init;
        max_excess = max_excess.max(ex);
        if ex > tol {
            violations += 1;
        }
    }
    EnergyReport {
        series: series.iter().map(|x| sig9(*x)).collect(),
        e_init: sig9(e_init),
        tol: sig9(tol),
        violations,
        max_excess: sig9(max_excess),
    }
}

/// Residuals of a candidate against its certificate budget.
pub fn verify_weak(c: &EulerCandidate, bank: &TestBank) -> Result<VerifyReport> {
    let g = &c.grid;
    let n = g.n;
    let len = g.len();
    for l in [c.rho.len(), c.v.len(), c.pressure.len(), c.vtil.len(), c.util.len(), c.m_trace.len()] {
        if l != len {
            return Err(Error::DimensionMismatch { expected: len, got: l });
        }
    }
    if let Some(r) = c.rho.iter().find(|r| !(**r > 0.0)) {
        return Err(Error::InvalidInput(format!("candidate density {r} is not positive")));
    }
    let flux: Vec<SymMat> = (0..len)
        .map(|i| SymMat::outer(n, &c.v[i]) * (1.0 / c.rho[i]) + SymMat::scalar(n, c.pressure[i]))
        .collect();
    let (mass, momentum) = weak_residuals(
        &WeakFields {
            grid: g,
            rho: if c.incompressible { None } else { Some(&c.rho) },
            v: &c.v,
            flux: &flux,
        },
        bank,
        c.incompressible,
    )?;
    let mut defect = 0.0;
    let mut s_mass = 0.0;
    let mut s_mom = 0.0;
    for i in 0..len {
        let w = g.weight(i);
        defect += c.m_trace[i].abs() * w;
        let dv = norm(&c.vtil[i]);
        s_mass += dv * w;
        s_mom += (dv + c.util[i].frob()) * w;
    }
    let hn = g.cell_volume();
    s_mom += (0..g.ns()).map(|s| norm(&c.vtil[s]) * hn).sum::<f64>();
    let quad = 1e-12;
    let mass_total = c.base_mass_cert + c.certs.mass_l1 + s_mass + quad;
    let momentum_total = c.base_momentum_cert + c.certs.momentum_l1 + defect + s_mom + quad;
    let within = mass <= mass_total && momentum <= momentum_total;
    let energy = verify_energy(c);
    let passed = within && energy.violations == 0;
    Ok(VerifyReport {
        n,
        nx: g.nx,
        nt: g.nt,
        kmax: bank.kmax,
        bank_scalar: bank.scalar_count(),
        incompressible: c.incompressible,
        mass_residual: sig9(mass),
        momentum_residual: sig9(momentum),
        budget: CertBudget {
            base_mass: sig9(c.base_mass_cert),
            base_momentum: sig9(c.base_momentum_cert),
            wave_mass: sig9(c.certs.mass_l1),
            wave_momentum: sig9(c.certs.momentum_l1),
            defect: sig9(defect),
            sampling_mass: sig9(s_mass),
            sampling_momentum: sig9(s_mom),
            mass_total: sig9(mass_total),
            momentum_total: sig9(momentum_total),
        },
        energy,
        residuals_within_budget: within,
        passed,
    })
}

/// Wraps plain fields (no perturbation bookkeeping) as a candidate.
pub fn plain_candidate(
    grid: Grid,
    rho: Vec<f64>,
    v: Vec<Vec3>,
    gamma: Option<f64>,
    incompressible: bool,
) -> Result<EulerCandidate> {
    let len = grid.len();
    if rho.len() != len || v.len() != len {
        return Err(Error::DimensionMismatch { expected: len, got: rho.len().min(v.len()) });
    }
    let n = grid.n;
    let pressure_field = match gamma {
        Some(gm) if !incompressible => rho.iter().map(|r| pressure(*r, gm)).collect(),
        _ => vec![0.0; len],
    };
    Ok(EulerCandidate {
        grid,
        v0: v.clone(),
        rho,
        u: vec![SymMat::zeros(n); len],
        v,
        r0_trace: vec![0.0; len],
        vtil: vec![[0.0; 3]; len],
        util: vec![SymMat::zeros(n); len],
        m_trace: vec![0.0; len],
        active: vec![false; len],
        pressure: pressure_field,
        gamma,
        incompressible,
        certs: Default::default(),
        base_mass_cert: 0.0,
        base_momentum_cert: 0.0,
        status: crate::scheme::RunStatus::Converged,
        reports: Vec::new(),
    })
}
