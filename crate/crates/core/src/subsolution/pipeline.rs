//! Double convex integration from a datum to families of wild solutions.
//!
//! viscous runs → defect extraction → saturation → mollification →
//! strictification → r_c → scheme on [0, t₀] → pick t̃ → scheme on
//! [t₀, end] → glue slices t̃.. into a candidate starting at 0.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    compensating_potential, gamma_gate, mollify_subsolution, mollify_subsolution_incomp, pressure,
    saturate, saturate_incomp, strictify_comp, strictify_incomp, CompSubsolution, EnergyBudget,
    IncompSubsolution, ResidualCerts, StrictifyReport, ENERGY_TOL,
};
use crate::error::{Error, Result};
use crate::grid::{Grid, TimeLayout};
use crate::harness::verify::candidate_energy;
use crate::harness::{
    comp_subsolution_residuals, incomp_subsolution_residuals, verify_weak, TestBank, VerifyReport,
    DEFAULT_KMAX,
};
use crate::matgeom::{dot, vsub, SymMat, Vec3};
use crate::scheme::{run, EulerCandidate, FieldState, RunStatus, SchemeCerts};
use crate::viscous::{
    extract_defect, extract_defect_incomp, solve_comp_schedule, solve_incomp_ns, ExtractConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub nx: usize,
    /// node slices of the viscous runs
    pub nt: usize,
    pub horizon: f64,
    pub gamma: f64,
    pub eps: f64,
    pub nus: Vec<f64>,
    pub filter_width: f64,
    pub alpha: f64,
    pub kmax: usize,
    pub max_residual: f64,
    /// scheme target ratio for ∫tr M
    pub target: f64,
    pub max_sweeps: usize,
    /// solutions per initial value
    pub solutions: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            nx: 48,
            nt: 52,
            horizon: 1.0,
            gamma: 2.0,
            eps: 0.5,
            nus: vec![4e-3, 2e-3, 1e-3],
            filter_width: 1.0 / 48.0,
            alpha: 0.04,
            kmax: DEFAULT_KMAX,
            max_residual: 5e-2,
            target: 0.02,
            max_sweeps: 80,
            solutions: 2,
        }
    }
}

impl PipelineConfig {
    fn check(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::InvalidInput(format!("epsilon {} must be positive", self.eps)));
        }
        if self.nus.len() < 2 || self.nus.iter().any(|nu| !(*nu > 0.0)) {
            return Err(Error::InvalidInput("need at least two positive viscosities".into()));
        }
        if self.solutions == 0 {
            return Err(Error::InvalidInput("solutions per value must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WildSolution {
    pub candidate: EulerCandidate,
    pub verify: VerifyReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WildValue {
    pub seed: u64,
    pub j_tilde: usize,
    pub t_tilde: f64,
    /// initial density (ρ ≡ 1 when incompressible) and momentum
    pub rho: Vec<f64>,
    pub v: Vec<Vec3>,
    pub distance: f64,
    pub stage1_status: RunStatus,
    pub stage1_ratio: f64,
    /// slices of [1, t₀) whose energy is saturated
    pub saturated_slices: usize,
    pub solutions: Vec<WildSolution>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub eps: f64,
    pub distances: Vec<f64>,
    pub max_distance: f64,
    pub all_within: bool,
    /// min over pairs of initial values of ‖U⁰ − U⁰'‖_{L²}
    pub min_pairwise_initial: f64,
    /// min over pairs of solutions sharing an initial value of ‖V − V'‖_{L²}
    pub min_pairwise_solution: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineReport {
    pub incompressible: bool,
    pub gamma: Option<f64>,
    pub eps: f64,
    pub e0: f64,
    /// grid of the strictified subsolution
    pub grid: Grid,
    pub extract_clip: f64,
    pub extract_certs: ResidualCerts,
    pub saturation_max: f64,
    pub strictify: StrictifyReport,
    pub rc_max: f64,
    pub j0: usize,
    pub t0: f64,
    /// t₀ times the smoothness rate of the subsolution on [0, t₀]
    pub t0_rate_product: f64,
    pub values: Vec<WildValue>,
    pub distance: DistanceReport,
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    kind: &'static str,
    incompressible: bool,
    gamma: Option<f64>,
    eps: f64,
    e0: f64,
    nx: usize,
    nt: usize,
    extract_clip: f64,
    extract_certs: &'a ResidualCerts,
    saturation_max: f64,
    strictify: &'a StrictifyReport,
    rc_max: f64,
    j0: usize,
    t0: f64,
    t0_rate_product: f64,
    distance: &'a DistanceReport,
}

#[derive(Serialize)]
struct SolutionLine {
    kind: &'static str,
    seed: u64,
    value: usize,
    solution: usize,
    t_tilde: f64,
    distance: f64,
    stage1_status: RunStatus,
    stage1_ratio: f64,
    status: RunStatus,
    energy_violations: usize,
    max_excess: f64,
    mass_residual: f64,
    momentum_residual: f64,
    mass_budget: f64,
    momentum_budget: f64,
    within_budget: bool,
}

impl PipelineReport {
    pub fn to_json_lines(&self) -> Vec<String> {
        let mut out = vec![serde_json::to_string(&SummaryLine {
            kind: "pipeline",
            incompressible: self.incompressible,
            gamma: self.gamma,
            eps: self.eps,
            e0: self.e0,
            nx: self.grid.nx,
            nt: self.grid.nt,
            extract_clip: self.extract_clip,
            extract_certs: &self.extract_certs,
            saturation_max: self.saturation_max,
            strictify: &self.strictify,
            rc_max: self.rc_max,
            j0: self.j0,
            t0: self.t0,
            t0_rate_product: self.t0_rate_product,
            distance: &self.distance,
        })
        .expect("summary serializes")];
        for (vi, val) in self.values.iter().enumerate() {
            for (si, sol) in val.solutions.iter().enumerate() {
                let r = &sol.verify;
                out.push(
                    serde_json::to_string(&SolutionLine {
                        kind: "solution",
                        seed: val.seed,
                        value: vi,
                        solution: si,
                        t_tilde: val.t_tilde,
                        distance: val.distance,
                        stage1_status: val.stage1_status,
                        stage1_ratio: val.stage1_ratio,
                        status: sol.candidate.status,
                        energy_violations: r.energy.violations,
                        max_excess: r.energy.max_excess,
                        mass_residual: r.mass_residual,
                        momentum_residual: r.momentum_residual,
                        mass_budget: r.budget.mass_total,
                        momentum_budget: r.budget.momentum_total,
                        within_budget: r.residuals_within_budget,
                    })
                    .expect("line serializes"),
                );
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------

fn spatial_grid_check(n: usize, nx: usize, len: usize) -> Result<()> {
    let ns = nx.pow(n as u32);
    if len != ns {
        return Err(Error::DimensionMismatch { expected: ns, got: len });
    }
    Ok(())
}

fn comp_window(s: &CompSubsolution, a: usize, b: usize) -> Result<CompSubsolution> {
    let g = s.grid.window(a, b)?;
    let ns = s.grid.ns();
    let r = a * ns..(b + 1) * ns;
    let elapsed = s.grid.t(a) - s.grid.t_start;
    let budget = EnergyBudget::new(s.budget.e0, (s.budget.t - elapsed).max(s.grid.dt()))?;
    CompSubsolution::new(
        g,
        s.gamma,
        s.rho[r.clone()].to_vec(),
        s.v[r.clone()].to_vec(),
        s.calr[r.clone()].to_vec(),
        s.r[r].to_vec(),
        budget,
    )
}

fn incomp_window(s: &IncompSubsolution, a: usize, b: usize) -> Result<IncompSubsolution> {
    let g = s.grid.window(a, b)?;
    let ns = s.grid.ns();
    let r = a * ns..(b + 1) * ns;
    let elapsed = s.grid.t(a) - s.grid.t_start;
    let budget = EnergyBudget::new(s.budget.e0, (s.budget.t - elapsed).max(s.grid.dt()))?;
    IncompSubsolution::new(g, s.v[r.clone()].to_vec(), s.rr[r].to_vec(), budget)
}

/// ‖ρ − ϱ‖^γ_γ + ‖V/√ρ − U/√ϱ‖²₂ on one slice (γ = None drops the density
/// term and uses ρ = ϱ = 1).
fn datum_distance(a: (&[f64], &[Vec3]), b: (&[f64], &[Vec3]), gamma: Option<f64>, n: usize, hn: f64) -> f64 {
    (0..a.0.len())
        .map(|s| {
            let (ra, rb) = (a.0[s], b.0[s]);
            let (sa, sb) = (ra.sqrt(), rb.sqrt());
            let mut dv = 0.0;
            for c in 0..n {
                let d = a.1[s][c] / sa - b.1[s][c] / sb;
                dv += d * d;
            }
            let dr = gamma.map_or(0.0, |g| (ra - rb).abs().powf(g));
            (dv + dr) * hn
        })
        .sum()
}

fn l2_slice(a: &[Vec3], b: &[Vec3], hn: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = vsub(x, y);
            dot(&d, &d) * hn
        })
        .sum::<f64>()
        .sqrt()
}

/// Largest j0 with t(j0) < T/2 such that every slice up to j0 stays within
/// ε/2 of slice 0 in the datum distance.
fn choose_t0(grid: &Grid, budget_t: f64, eps: f64, dist: impl Fn(usize) -> f64) -> Result<usize> {
    let mut j0 = 0;
    for j in 1..grid.nt {
        if grid.t(j) - grid.t_start >= 0.5 * budget_t || dist(j) >= 0.5 * eps {
            break;
        }
        j0 = j;
    }
    if j0 < 3 {
        return Err(Error::ConstructionFailed(format!(
            "first stage window has only {j0} slices; refine the time grid"
        )));
    }
    Ok(j0)
}

/// t₀·[sup(‖∂ₜp‖₁/(γ−1) + 4ℰ⁰²‖∂ₜ√ρ/√ρ⁰‖∞) + 2ℰ⁰‖∇(V⁰/ρ⁰)‖∞], the smoothness
/// product that a proof-level choice of t₀ would keep below ε/4.
fn rate_product(s: &CompSubsolution, j0: usize) -> f64 {
    let g = s.grid;
    let ns = g.ns();
    let n = g.n;
    let dt = g.dt();
    let hn = g.cell_volume();
    let e0 = s.budget.e0;
    let mut sup = 0.0f64;
    for j in 0..j0 {
        let mut dp = 0.0;
        let mut dsq = 0.0f64;
        for sp in 0..ns {
            let (a, b) = (s.rho[j * ns + sp], s.rho[(j + 1) * ns + sp]);
            dp += (pressure(b, s.gamma) - pressure(a, s.gamma)).abs() / dt * hn;
            dsq = dsq.max((b.sqrt() - a.sqrt()).abs() / dt / s.rho[sp].sqrt());
        }
        sup = sup.max(dp / (s.gamma - 1.0) + 4.0 * e0 * e0 * dsq);
    }
    let h = g.h();
    let mut grad = 0.0f64;
    for sp in 0..ns {
        for a in 0..n {
            let (p, m) = (g.shift(sp, a, 1), g.shift(sp, a, -1));
            for c in 0..n {
                let d = (s.v[p][c] / s.rho[p] - s.v[m][c] / s.rho[m]) / (2.0 * h);
                grad = grad.max(d.abs());
            }
        }
    }
    (g.t(j0) - g.t_start) * (sup + 2.0 * e0 * grad)
}

struct Stages {
    grid: Grid,
    n: usize,
    e0: f64,
    gamma: Option<f64>,
    j0: usize,
    fs1: FieldState,
    fs2: FieldState,
}

fn mark_candidate(c: &mut EulerCandidate, gamma: Option<f64>) {
    c.gamma = gamma;
    match gamma {
        Some(g) => c.pressure = c.rho.iter().map(|r| pressure(*r, g)).collect(),
        None => {
            c.incompressible = true;
            c.pressure = vec![0.0; c.rho.len()];
        }
    }
}

fn glue(st: &Stages, c1: &EulerCandidate, c2: &EulerCandidate, jt: usize, base: ResidualCerts) -> Result<EulerCandidate> {
    let ns = st.grid.ns();
    let grid = st.grid.window(jt, st.grid.nt - 1)?.starting_at(0.0);
    let a = jt * ns..(st.j0 + 1) * ns;
    let b = ns..c2.grid.len();
    fn cat<T: Clone>(x: &[T], y: &[T]) -> Vec<T> {
        let mut v = x.to_vec();
        v.extend_from_slice(y);
        v
    }
    let status = if c1.status != RunStatus::Converged { c1.status } else { c2.status };
    let mut reports = c1.reports.clone();
    reports.extend(c2.reports.iter().cloned());
    let c = EulerCandidate {
        grid,
        rho: cat(&c1.rho[a.clone()], &c2.rho[b.clone()]),
        v: cat(&c1.v[a.clone()], &c2.v[b.clone()]),
        u: cat(&c1.u[a.clone()], &c2.u[b.clone()]),
        v0: cat(&c1.v0[a.clone()], &c2.v0[b.clone()]),
        r0_trace: cat(&c1.r0_trace[a.clone()], &c2.r0_trace[b.clone()]),
        vtil: cat(&c1.vtil[a.clone()], &c2.vtil[b.clone()]),
        util: cat(&c1.util[a.clone()], &c2.util[b.clone()]),
        m_trace: cat(&c1.m_trace[a.clone()], &c2.m_trace[b.clone()]),
        active: cat(&c1.active[a.clone()], &c2.active[b.clone()]),
        pressure: cat(&c1.pressure[a.clone()], &c2.pressure[b.clone()]),
        gamma: st.gamma,
        incompressible: st.gamma.is_none(),
        certs: SchemeCerts {
            mass_l1: c1.certs.mass_l1 + c2.certs.mass_l1,
            momentum_l1: c1.certs.momentum_l1 + c2.certs.momentum_l1,
            waves: c1.certs.waves + c2.certs.waves,
        },
        base_mass_cert: base.mass,
        base_momentum_cert: base.momentum,
        status,
        reports,
    };
    Ok(c)
}

/// Runs both stages for one seed and glues `solutions` continuations.
fn wild_value(
    st: &Stages,
    cfg: &PipelineConfig,
    seed: u64,
    datum: (&[f64], &[Vec3]),
    base_cert: &dyn Fn(usize) -> Result<ResidualCerts>,
) -> Result<WildValue> {
    let ns = st.grid.ns();
    let n = st.n;
    let hn = st.grid.cell_volume();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c1 = run(&st.fs1, cfg.target, cfg.max_sweeps, rng.next_u64()).map_err(|e| e.at("stage1"))?;
    mark_candidate(&mut c1, st.gamma);
    let tol = 0.5 * ENERGY_TOL * st.e0;
    let saturated: Vec<usize> = (1..st.j0)
        .filter(|&j| (candidate_energy(&c1, j) - st.e0).abs() <= tol)
        .collect();
    if saturated.is_empty() {
        let best = (1..st.j0)
            .map(|j| (candidate_energy(&c1, j) - st.e0).abs() / st.e0)
            .fold(f64::INFINITY, f64::min);
        return Err(Error::ConstructionFailed(format!(
            "no saturated slice in (0, t0) for seed {seed}: closest relative energy gap {best:.3e} \
             (tolerance {:.1e}, stage ratio {:.3e}); lower the scheme target",
            0.5 * ENERGY_TOL,
            c1.reports.last().map_or(1.0, |r| r.integral_tr_m / r.initial_tr_m)
        ))
        .at("select"));
    }
    let jt = saturated[rng.random_range(0..saturated.len())];
    let base = base_cert(jt).map_err(|e| e.at("glue"))?;
    let seeds2: Vec<u64> = (0..cfg.solutions).map(|_| rng.next_u64()).collect();
    let mut solutions = Vec::with_capacity(cfg.solutions);
    for s2 in seeds2 {
        let mut c2 = run(&st.fs2, cfg.target, cfg.max_sweeps, s2).map_err(|e| e.at("stage2"))?;
        mark_candidate(&mut c2, st.gamma);
        let cand = glue(st, &c1, &c2, jt, base).map_err(|e| e.at("glue"))?;
        let bank = TestBank::new(&cand.grid, cfg.kmax).map_err(|e| e.at("verify"))?;
        let verify = verify_weak(&cand, &bank).map_err(|e| e.at("verify"))?;
        solutions.push(WildSolution { candidate: cand, verify });
    }
    let rho = c1.rho[jt * ns..(jt + 1) * ns].to_vec();
    let v = c1.v[jt * ns..(jt + 1) * ns].to_vec();
    let distance = datum_distance(datum, (&rho, &v), st.gamma, n, hn);
    let stage1_ratio = c1
        .reports
        .last()
        .map_or(1.0, |r| r.integral_tr_m / r.initial_tr_m);
    Ok(WildValue {
        seed,
        j_tilde: jt,
        t_tilde: st.grid.t(jt) - st.grid.t_start,
        rho,
        v,
        distance,
        stage1_status: c1.status,
        stage1_ratio,
        saturated_slices: saturated.len(),
        solutions,
    })
}

fn distance_report(values: &[WildValue], eps: f64, hn: f64) -> DistanceReport {
    let distances: Vec<f64> = values.iter().map(|v| v.distance).collect();
    let max_distance = distances.iter().cloned().fold(0.0, f64::max);
    let mut min_init = f64::INFINITY;
    for (i, a) in values.iter().enumerate() {
        for b in &values[i + 1..] {
            min_init = min_init.min(l2_slice(&a.v, &b.v, hn));
        }
    }
    let mut min_sol = f64::INFINITY;
    for val in values {
        for (i, a) in val.solutions.iter().enumerate() {
            for b in &val.solutions[i + 1..] {
                let h = a.candidate.grid.cell_volume();
                let d: f64 = (0..a.candidate.grid.len())
                    .map(|k| {
                        let d = vsub(&a.candidate.v[k], &b.candidate.v[k]);
                        dot(&d, &d) * a.candidate.grid.weight(k)
                    })
                    .sum::<f64>()
                    .sqrt();
                let _ = h;
                min_sol = min_sol.min(d);
            }
        }
    }
    DistanceReport {
        eps,
        all_within: !values.is_empty() && distances.iter().all(|d| *d < eps),
        distances,
        max_distance,
        min_pairwise_initial: min_init,
        min_pairwise_solution: min_sol,
    }
}

fn viscous_grid(n: usize, cfg: &PipelineConfig) -> Result<Grid> {
    Grid::new(n, cfg.nx, cfg.nt, 1.0, 0.0, cfg.horizon, TimeLayout::Node)
}

/// Compressible pipeline from (ρ⁰, V⁰) given as spatial fields on the
/// `cfg.nx`ⁿ grid; V⁰ is the momentum. One initial value per seed.
pub fn wild_data_pipeline(
    n: usize,
    rho0: &[f64],
    v0: &[Vec3],
    cfg: &PipelineConfig,
    seeds: &[u64],
) -> Result<PipelineReport> {
    gamma_gate(cfg.gamma, n).map_err(|e| e.at("gamma"))?;
    cfg.check().map_err(|e| e.at("setup"))?;
    spatial_grid_check(n, cfg.nx, rho0.len()).map_err(|e| e.at("setup"))?;
    spatial_grid_check(n, cfg.nx, v0.len()).map_err(|e| e.at("setup"))?;
    let vgrid = viscous_grid(n, cfg).map_err(|e| e.at("setup"))?;
    let runs = solve_comp_schedule(vgrid, rho0, v0, &cfg.nus, cfg.gamma).map_err(|e| e.at("viscous"))?;
    let ex = extract_defect(
        &runs,
        &ExtractConfig {
            filter_width: cfg.filter_width,
            max_residual: cfg.max_residual,
            kmax: cfg.kmax,
        },
    )
    .map_err(|e| e.at("extract"))?;
    let (sat, added) = saturate(&ex.sub).map_err(|e| e.at("saturate"))?;
    let moll = mollify_subsolution(&sat, cfg.alpha).map_err(|e| e.at("mollify"))?;
    let (strict, srep) = strictify_comp(&moll, cfg.eps / 9.0, cfg.alpha).map_err(|e| e.at("strictify"))?;
    let rc = compensating_potential(&strict).map_err(|e| e.at("compensate"))?;

    let g = strict.grid;
    let ns = g.ns();
    let hn = g.cell_volume();
    let gamma = strict.gamma;
    let j0 = choose_t0(&g, strict.budget.t, cfg.eps, |j| {
        let r = j * ns..(j + 1) * ns;
        datum_distance(
            (&strict.rho[..ns], &strict.v[..ns]),
            (&strict.rho[r.clone()], &strict.v[r]),
            Some(gamma),
            n,
            hn,
        )
    })
    .map_err(|e| e.at("t0"))?;
    let t0_rate_product = rate_product(&strict, j0);

    let stage = |a: usize, b: usize, with_rc: bool| -> Result<FieldState> {
        let r = a * ns..(b + 1) * ns;
        let r0 = r
            .clone()
            .map(|i| {
                let extra = if with_rc { rc[i / ns] } else { 0.0 };
                strict.calr[i] + SymMat::scalar(n, strict.r[i] + extra)
            })
            .collect();
        let active = r
            .clone()
            .map(|i| {
                let j = i / ns;
                j > a && j < b
            })
            .collect();
        FieldState::new(
            g.window(a, b)?,
            strict.rho[r.clone()].to_vec(),
            strict.v[r].to_vec(),
            r0,
            active,
        )
    };
    let st = Stages {
        grid: g,
        n,
        e0: strict.budget.e0,
        gamma: Some(gamma),
        j0,
        fs1: stage(0, j0, true).map_err(|e| e.at("stage1"))?,
        fs2: stage(j0, g.nt - 1, false).map_err(|e| e.at("stage2"))?,
    };
    let base_cert = |jt: usize| -> Result<ResidualCerts> {
        let mut w = comp_window(&strict, jt, g.nt - 1)?;
        w.grid = w.grid.starting_at(0.0);
        let bank = TestBank::new(&w.grid, cfg.kmax)?;
        comp_subsolution_residuals(&w, &bank)
    };
    let values = seeds
        .iter()
        .map(|&s| wild_value(&st, cfg, s, (rho0, v0), &base_cert))
        .collect::<Result<Vec<_>>>()?;
    let distance = distance_report(&values, cfg.eps, hn);
    Ok(PipelineReport {
        incompressible: false,
        gamma: Some(gamma),
        eps: cfg.eps,
        e0: strict.budget.e0,
        grid: g,
        extract_clip: ex.clip_calr.max(ex.clip_r),
        extract_certs: ex.sub.certs,
        saturation_max: added.iter().cloned().fold(0.0, f64::max),
        strictify: srep,
        rc_max: rc.iter().cloned().fold(0.0, f64::max),
        j0,
        t0: g.t(j0) - g.t_start,
        t0_rate_product,
        values,
        distance,
    })
}

/// Incompressible pipeline from a velocity datum v⁰ (projected onto
/// divergence-free fields by the solver).
pub fn wild_data_pipeline_incomp(
    n: usize,
    v0: &[Vec3],
    cfg: &PipelineConfig,
    seeds: &[u64],
) -> Result<PipelineReport> {
    cfg.check().map_err(|e| e.at("setup"))?;
    spatial_grid_check(n, cfg.nx, v0.len()).map_err(|e| e.at("setup"))?;
    let vgrid = viscous_grid(n, cfg).map_err(|e| e.at("setup"))?;
    let runs = cfg
        .nus
        .par_iter()
        .map(|&nu| solve_incomp_ns(vgrid, v0, nu))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at("viscous"))?;
    let ex = extract_defect_incomp(
        &runs,
        &ExtractConfig {
            filter_width: cfg.filter_width,
            max_residual: cfg.max_residual,
            kmax: cfg.kmax,
        },
    )
    .map_err(|e| e.at("extract"))?;
    let (sat, added) = saturate_incomp(&ex.sub).map_err(|e| e.at("saturate"))?;
    let moll = mollify_subsolution_incomp(&sat, cfg.alpha).map_err(|e| e.at("mollify"))?;
    let (strict, srep) = strictify_incomp(&moll, cfg.eps / 9.0).map_err(|e| e.at("strictify"))?;

    let g = strict.grid;
    let ns = g.ns();
    let hn = g.cell_volume();
    let ones = vec![1.0; ns];
    let j0 = choose_t0(&g, strict.budget.t, cfg.eps, |j| {
        datum_distance((&ones, &strict.v[..ns]), (&ones, &strict.v[j * ns..(j + 1) * ns]), None, n, hn)
    })
    .map_err(|e| e.at("t0"))?;

    let stage = |a: usize, b: usize| -> Result<FieldState> {
        let r = a * ns..(b + 1) * ns;
        let active = r
            .clone()
            .map(|i| {
                let j = i / ns;
                j > a && j < b
            })
            .collect();
        FieldState::new(
            g.window(a, b)?,
            vec![1.0; r.len()],
            strict.v[r.clone()].to_vec(),
            strict.rr[r].to_vec(),
            active,
        )
    };
    let st = Stages {
        grid: g,
        n,
        e0: strict.budget.e0,
        gamma: None,
        j0,
        fs1: stage(0, j0).map_err(|e| e.at("stage1"))?,
        fs2: stage(j0, g.nt - 1).map_err(|e| e.at("stage2"))?,
    };
    let base_cert = |jt: usize| -> Result<ResidualCerts> {
        let mut w = incomp_window(&strict, jt, g.nt - 1)?;
        w.grid = w.grid.starting_at(0.0);
        let bank = TestBank::new(&w.grid, cfg.kmax)?;
        incomp_subsolution_residuals(&w, &bank)
    };
    let values = seeds
        .iter()
        .map(|&s| wild_value(&st, cfg, s, (&ones, v0), &base_cert))
        .collect::<Result<Vec<_>>>()?;
    let distance = distance_report(&values, cfg.eps, hn);
    Ok(PipelineReport {
        incompressible: true,
        gamma: None,
        eps: cfg.eps,
        e0: strict.budget.e0,
        grid: g,
        extract_clip: ex.clip,
        extract_certs: ex.sub.certs,
        saturation_max: added.iter().cloned().fold(0.0, f64::max),
        strictify: srep,
        rc_max: 0.0,
        j0,
        t0: g.t(j0) - g.t_start,
        t0_rate_product: f64::NAN,
        values,
        distance,
    })
}
