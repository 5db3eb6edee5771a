//! Energy compatible subsolutions of the Euler equations: convex
//! combination, mollification, strictification, compensating potential.

pub mod pipeline;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::matgeom::{dot, lambda_min, vsub, SymMat, Vec3};

pub use pipeline::{wild_data_pipeline, wild_data_pipeline_incomp, PipelineConfig, PipelineReport};

/// Relative tolerance for energy saturation.
pub const ENERGY_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBudget {
    pub e0: f64,
    pub t: f64,
}

impl EnergyBudget {
    pub fn new(e0: f64, t: f64) -> Result<Self> {
        if !(e0 > 0.0) || !(t > 0.0) || !e0.is_finite() || !t.is_finite() {
            return Err(Error::InvalidInput(format!(
                "energy budget needs E0 > 0 and T > 0, got ({e0}, {t})"
            )));
        }
        Ok(EnergyBudget { e0, t })
    }

    fn matches(&self, o: &EnergyBudget) -> bool {
        (self.e0 - o.e0).abs() <= 1e-12 * self.e0 && (self.t - o.t).abs() <= 1e-12 * self.t
    }
}

/// Normalized weak-residual bounds carried along with a subsolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualCerts {
    pub mass: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IncompSubsolution {
    pub grid: Grid,
    pub v: Vec<Vec3>,
    pub rr: Vec<SymMat>,
    pub budget: EnergyBudget,
    pub certs: ResidualCerts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompSubsolution {
    pub grid: Grid,
    pub gamma: f64,
    pub rho: Vec<f64>,
    pub v: Vec<Vec3>,
    pub calr: Vec<SymMat>,
    pub r: Vec<f64>,
    pub budget: EnergyBudget,
    pub certs: ResidualCerts,
}

/// Probability weights over a finite family.
#[derive(Clone, Debug, PartialEq)]
pub struct MixWeights(Vec<f64>);

impl MixWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("weights sum to {s}, not 1")));
        }
        Ok(MixWeights(w))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn pressure(rho: f64, gamma: f64) -> f64 {
    rho.powf(gamma)
}

/// E(ρ, V) = |V|²/(2ρ) + p(ρ)/(γ−1).
pub fn energy_density(rho: f64, v: &Vec3, gamma: f64) -> Result<f64> {
    let vv = dot(v, v);
    if rho > 0.0 {
        Ok(0.5 * vv / rho + pressure(rho, gamma) / (gamma - 1.0))
    } else if rho == 0.0 && vv == 0.0 {
        Ok(0.0)
    } else {
        Err(Error::InvalidInput(format!(
            "state with density {rho} and |V|² = {vv}"
        )))
    }
}

/// Fails unless 1 < γ ≤ 1 + 2/n.
pub fn gamma_gate(gamma: f64, n: usize) -> Result<()> {
    if gamma > 1.0 && gamma <= 1.0 + 2.0 / n as f64 + 1e-14 {
        Ok(())
    } else {
        Err(Error::GammaConstraint { gamma, n })
    }
}

fn check_len(expected: usize, lens: &[usize]) -> Result<()> {
    for &l in lens {
        if l != expected {
            return Err(Error::DimensionMismatch { expected, got: l });
        }
    }
    Ok(())
}

impl IncompSubsolution {
    pub fn new(grid: Grid, v: Vec<Vec3>, rr: Vec<SymMat>, budget: EnergyBudget) -> Result<Self> {
        check_len(grid.len(), &[v.len(), rr.len()])?;
        Ok(IncompSubsolution {
            grid,
            v,
            rr,
            budget,
            certs: ResidualCerts::default(),
        })
    }

    /// ½∫(|v|² + tr R) over slice j.
    pub fn energy(&self, j: usize) -> f64 {
        let g = &self.grid;
        let h = g.cell_volume();
        (0..g.ns())
            .map(|s| {
                let i = g.idx(j, s);
                0.5 * (dot(&self.v[i], &self.v[i]) + self.rr[i].trace()) * h
            })
            .sum()
    }

    pub fn energy_series(&self) -> Vec<f64> {
        (0..self.grid.nt).map(|j| self.energy(j)).collect()
    }
}

impl CompSubsolution {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grid: Grid,
        gamma: f64,
        rho: Vec<f64>,
        v: Vec<Vec3>,
        calr: Vec<SymMat>,
        r: Vec<f64>,
        budget: EnergyBudget,
    ) -> Result<Self> {
        check_len(grid.len(), &[rho.len(), v.len(), calr.len(), r.len()])?;
        if !(gamma > 1.0) {
            return Err(Error::GammaConstraint { gamma, n: grid.n });
        }
        for (i, &p) in rho.iter().enumerate() {
            if !(p >= 0.0) || (p == 0.0 && dot(&v[i], &v[i]) != 0.0) {
                return Err(Error::InvalidInput(format!("invalid density {p} at {i}")));
            }
        }
        Ok(CompSubsolution {
            grid,
            gamma,
            rho,
            v,
            calr,
            r,
            budget,
            certs: ResidualCerts::default(),
        })
    }

    /// Rest state ρ̂ with zero defects.
    pub fn rest(grid: Grid, gamma: f64, rho_hat: f64, budget: EnergyBudget) -> Result<Self> {
        let len = grid.len();
        Self::new(
            grid,
            gamma,
            vec![rho_hat; len],
            vec![[0.0; 3]; len],
            vec![SymMat::zeros(grid.n); len],
            vec![0.0; len],
            budget,
        )
    }
}

/// ∫(E(ρ,V) + ½tr𝓡 + r/(γ−1)) over slice j.
pub fn energy_total(s: &CompSubsolution, j: usize) -> Result<f64> {
    let g = &s.grid;
    if j >= g.nt {
        return Err(Error::InvalidInput(format!("slice {j} outside 0..{}", g.nt)));
    }
    let h = g.cell_volume();
    let mut acc = 0.0;
    for sp in 0..g.ns() {
        let i = g.idx(j, sp);
        let e = energy_density(s.rho[i], &s.v[i], s.gamma)?;
        acc += (e + 0.5 * s.calr[i].trace() + s.r[i] / (s.gamma - 1.0)) * h;
    }
    Ok(acc)
}

pub fn energy_series(s: &CompSubsolution) -> Result<Vec<f64>> {
    (0..s.grid.nt).map(|j| energy_total(s, j)).collect()
}

/// Largest |energy − ℰ⁰| over slices with t ≤ T, and largest excess over
/// ℰ⁰ beyond T.
pub fn energy_compat_errors(series: &[f64], grid: &Grid, budget: &EnergyBudget) -> (f64, f64) {
    let mut sat = 0.0f64;
    let mut excess = 0.0f64;
    for (j, e) in series.iter().enumerate() {
        if grid.t(j) - grid.t_start <= budget.t * (1.0 + 1e-12) {
            sat = sat.max((e - budget.e0).abs());
        } else {
            excess = excess.max(e - budget.e0);
        }
    }
    (sat, excess)
}

// Lifted channels: the quantities that combine linearly.
struct Lifted {
    grid: Grid,
    ch: Vec<Vec<f64>>,
}

fn sym_len(n: usize) -> usize {
    n * (n + 1) / 2
}

fn lift_comp(s: &CompSubsolution) -> Result<Lifted> {
    let n = s.grid.n;
    let len = s.grid.len();
    let nc = 2 + n + sym_len(n);
    let mut ch = vec![vec![0.0; len]; nc];
    for i in 0..len {
        let rho = s.rho[i];
        if !(rho > 0.0) {
            return Err(Error::InvalidInput(format!("density {rho} must be positive")));
        }
        ch[0][i] = rho;
        for a in 0..n {
            ch[1 + a][i] = s.v[i][a];
        }
        let f = s.calr[i] + SymMat::outer(n, &s.v[i]) * (1.0 / rho);
        for (k, x) in f.upper().iter().enumerate() {
            ch[1 + n + k][i] = *x;
        }
        ch[nc - 1][i] = s.r[i] + pressure(rho, s.gamma);
    }
    Ok(Lifted { grid: s.grid, ch })
}

fn unlift_comp(l: &Lifted, gamma: f64, budget: EnergyBudget, certs: ResidualCerts) -> Result<CompSubsolution> {
    let n = l.grid.n;
    let len = l.grid.len();
    let nc = l.ch.len();
    let mut rho = vec![0.0; len];
    let mut v = vec![[0.0; 3]; len];
    let mut calr = vec![SymMat::zeros(n); len];
    let mut r = vec![0.0; len];
    let mut up = vec![0.0; sym_len(n)];
    for i in 0..len {
        rho[i] = l.ch[0][i];
        for a in 0..n {
            v[i][a] = l.ch[1 + a][i];
        }
        for (k, u) in up.iter_mut().enumerate() {
            *u = l.ch[1 + n + k][i];
        }
        calr[i] = SymMat::from_upper(n, &up)? - SymMat::outer(n, &v[i]) * (1.0 / rho[i]);
        r[i] = l.ch[nc - 1][i] - pressure(rho[i], gamma);
    }
    let mut s = CompSubsolution::new(l.grid, gamma, rho, v, calr, r, budget)?;
    s.certs = certs;
    Ok(s)
}

fn lift_incomp(s: &IncompSubsolution) -> Lifted {
    let n = s.grid.n;
    let len = s.grid.len();
    let mut ch = vec![vec![0.0; len]; n + sym_len(n)];
    for i in 0..len {
        for a in 0..n {
            ch[a][i] = s.v[i][a];
        }
        let f = s.rr[i] + SymMat::outer(n, &s.v[i]);
        for (k, x) in f.upper().iter().enumerate() {
            ch[n + k][i] = *x;
        }
    }
    Lifted { grid: s.grid, ch }
}

fn unlift_incomp(l: &Lifted, budget: EnergyBudget, certs: ResidualCerts) -> Result<IncompSubsolution> {
    let n = l.grid.n;
    let len = l.grid.len();
    let mut v = vec![[0.0; 3]; len];
    let mut rr = vec![SymMat::zeros(n); len];
    let mut up = vec![0.0; sym_len(n)];
    for i in 0..len {
        for a in 0..n {
            v[i][a] = l.ch[a][i];
        }
        for (k, u) in up.iter_mut().enumerate() {
            *u = l.ch[n + k][i];
        }
        rr[i] = SymMat::from_upper(n, &up)? - SymMat::outer(n, &v[i]);
    }
    let mut s = IncompSubsolution::new(l.grid, v, rr, budget)?;
    s.certs = certs;
    Ok(s)
}

fn combine_lifted(family: &[Lifted], w: &[f64]) -> Lifted {
    let nc = family[0].ch.len();
    let len = family[0].grid.len();
    let mut ch = vec![vec![0.0; len]; nc];
    for (m, &wk) in family.iter().zip(w) {
        for c in 0..nc {
            for (o, x) in ch[c].iter_mut().zip(&m.ch[c]) {
                *o += wk * x;
            }
        }
    }
    Lifted {
        grid: family[0].grid,
        ch,
    }
}

fn combine_certs(certs: impl Iterator<Item = ResidualCerts>, w: &[f64]) -> ResidualCerts {
    certs.zip(w).fold(ResidualCerts::default(), |acc, (c, &wk)| ResidualCerts {
        mass: acc.mass + wk * c.mass,
        momentum: acc.momentum + wk * c.momentum,
    })
}

fn check_family<'a>(
    grids: impl Iterator<Item = (&'a Grid, &'a EnergyBudget)>,
    k: usize,
    w: &MixWeights,
) -> Result<()> {
    if k == 0 || w.as_slice().len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: w.as_slice().len(),
        });
    }
    let mut first: Option<(&Grid, &EnergyBudget)> = None;
    for (g, b) in grids {
        match first {
            None => first = Some((g, b)),
            Some((g0, b0)) => {
                if g0 != g {
                    return Err(Error::InvalidInput("family members live on different grids".into()));
                }
                if !b0.matches(b) {
                    return Err(Error::InvalidInput("family members carry different budgets".into()));
                }
            }
        }
    }
    Ok(())
}

/// v̄ = 𝔼v, R̄ = 𝔼R + 𝔼(v⊗v) − v̄⊗v̄.
pub fn convex_combine_incomp(family: &[&IncompSubsolution], w: &MixWeights) -> Result<IncompSubsolution> {
    check_family(family.iter().map(|s| (&s.grid, &s.budget)), family.len(), w)?;
    let lifted: Vec<Lifted> = family.iter().map(|s| lift_incomp(s)).collect();
    let out = combine_lifted(&lifted, w.as_slice());
    let certs = combine_certs(family.iter().map(|s| s.certs), w.as_slice());
    unlift_incomp(&out, family[0].budget, certs)
}

/// ρ̄ = 𝔼ρ, V̄ = 𝔼V, 𝓡̄ = 𝔼𝓡 + 𝔼(V⊗V/ρ) − V̄⊗V̄/ρ̄, r̄ = 𝔼r + 𝔼p(ρ) − p(ρ̄).
pub fn convex_combine_comp(family: &[&CompSubsolution], w: &MixWeights) -> Result<CompSubsolution> {
    check_family(family.iter().map(|s| (&s.grid, &s.budget)), family.len(), w)?;
    let gamma = family[0].gamma;
    if family.iter().any(|s| s.gamma != gamma) {
        return Err(Error::InvalidInput("family members use different gamma".into()));
    }
    let lifted: Vec<Lifted> = family.iter().map(|s| lift_comp(s)).collect::<Result<_>>()?;
    let out = combine_lifted(&lifted, w.as_slice());
    let certs = combine_certs(family.iter().map(|s| s.certs), w.as_slice());
    unlift_comp(&out, gamma, family[0].budget, certs)
}

/// Kernel of the space-time mollifier at scale α on a given grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Mollifier {
    pub alpha: f64,
    /// spatial standard deviation (α/2)
    pub sigma: f64,
    /// weights of forward time shifts 0..=m
    pub time_weights: Vec<f64>,
    /// periodic 1D spatial weights by offset
    pub space_weights: Vec<f64>,
}

impl Mollifier {
    pub fn new(grid: &Grid, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidInput(format!("mollifier scale {alpha} must be positive")));
        }
        let m = (alpha / grid.dt()).round() as usize;
        if m + 4 > grid.nt {
            return Err(Error::InvalidInput(format!(
                "mollifier scale {alpha} too large for {} time slices",
                grid.nt
            )));
        }
        // bump profile on [0,1] evaluated at the shift fractions, kept positive
        let time_weights: Vec<f64> = if m == 0 {
            vec![1.0]
        } else {
            let raw: Vec<f64> = (0..=m)
                .map(|j| {
                    let s = (j as f64 + 0.5) / (m as f64 + 1.0);
                    (s * (1.0 - s)).max(1e-3)
                })
                .collect();
            let tot: f64 = raw.iter().sum();
            raw.iter().map(|x| x / tot).collect()
        };
        let sigma = 0.5 * alpha;
        let nx = grid.nx;
        let h = grid.h();
        let mut space_weights: Vec<f64> = (0..nx)
            .map(|k| {
                let d = (k.min(nx - k)) as f64 * h;
                (-(d * d) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let tot: f64 = space_weights.iter().sum();
        for w in &mut space_weights {
            *w /= tot;
        }
        Ok(Mollifier {
            alpha,
            sigma,
            time_weights,
            space_weights,
        })
    }

    pub fn shifts(&self) -> usize {
        self.time_weights.len() - 1
    }
}

fn conv_axis(data: &[f64], out: &mut [f64], n: usize, nx: usize, axis: usize, w: &[f64]) {
    let stride = nx.pow(axis as u32);
    let ns = nx.pow(n as u32);
    for s in 0..ns {
        let ia = (s / stride) % nx;
        let base = s - ia * stride;
        let mut acc = 0.0;
        for (k, wk) in w.iter().enumerate() {
            if *wk == 0.0 {
                continue;
            }
            acc += wk * data[base + ((ia + k) % nx) * stride];
        }
        out[s] = acc;
    }
}

fn mollify_lifted(l: &Lifted, k: &Mollifier) -> Result<Lifted> {
    let g = l.grid;
    let m = k.shifts();
    let nt_out = g.nt - m;
    let grid = g.window(0, nt_out - 1)?;
    let ns = g.ns();
    let mut ch = Vec::with_capacity(l.ch.len());
    let mut a = vec![0.0; ns];
    let mut b = vec![0.0; ns];
    for c in &l.ch {
        // spatial smoothing of every input slice
        let mut sm = vec![0.0; g.len()];
        for j in 0..g.nt {
            a.copy_from_slice(&c[j * ns..(j + 1) * ns]);
            for axis in 0..g.n {
                conv_axis(&a, &mut b, g.n, g.nx, axis, &k.space_weights);
                std::mem::swap(&mut a, &mut b);
            }
            sm[j * ns..(j + 1) * ns].copy_from_slice(&a);
        }
        let mut out = vec![0.0; grid.len()];
        for j in 0..nt_out {
            for (q, wq) in k.time_weights.iter().enumerate() {
                let src = &sm[(j + q) * ns..(j + q + 1) * ns];
                for (o, x) in out[j * ns..(j + 1) * ns].iter_mut().zip(src) {
                    *o += wq * x;
                }
            }
        }
        ch.push(out);
    }
    Ok(Lifted { grid, ch })
}

fn mollified_budget(b: &EnergyBudget, k: &Mollifier, grid: &Grid) -> Result<EnergyBudget> {
    if !(k.alpha < 0.5 * b.t) {
        return Err(Error::Precondition(format!(
            "mollifier scale {} not below half the horizon {}",
            k.alpha, b.t
        )));
    }
    let shift = k.shifts() as f64 * grid.dt();
    EnergyBudget::new(b.e0, b.t - shift.max(0.0))
}

/// Convex combination of forward space-time translates; the result lives on
/// the first nt − m slices.
pub fn mollify_subsolution(s: &CompSubsolution, alpha: f64) -> Result<CompSubsolution> {
    let k = Mollifier::new(&s.grid, alpha)?;
    let budget = mollified_budget(&s.budget, &k, &s.grid)?;
    let out = mollify_lifted(&lift_comp(s)?, &k)?;
    unlift_comp(&out, s.gamma, budget, s.certs)
}

pub fn mollify_subsolution_incomp(s: &IncompSubsolution, alpha: f64) -> Result<IncompSubsolution> {
    let k = Mollifier::new(&s.grid, alpha)?;
    let budget = mollified_budget(&s.budget, &k, &s.grid)?;
    let out = mollify_lifted(&lift_incomp(s), &k)?;
    unlift_incomp(&out, budget, s.certs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrictifyReport {
    pub lambda: f64,
    /// guaranteed lower bound on the smallest eigenvalue (0 if none)
    pub floor: f64,
    /// measured min over the grid of the strictness eigenvalue
    pub min_eig: f64,
    /// measured initial closeness
    pub closeness: f64,
    pub eps: f64,
}

pub fn strictify_lambda(eps: f64, e0: f64) -> f64 {
    (eps / (6.0 * e0)).min(0.5)
}

/// Mixes with (0, 2ℰ⁰/(n|𝕋ⁿ|) I) at weight λ = min(ε/6ℰ⁰, ½).
pub fn strictify_incomp(s: &IncompSubsolution, eps: f64) -> Result<(IncompSubsolution, StrictifyReport)> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("epsilon {eps} must be positive")));
    }
    let g = s.grid;
    let n = g.n;
    let e0 = s.budget.e0;
    let lambda = strictify_lambda(eps, e0);
    let floor = 2.0 * lambda * e0 / (n as f64 * g.volume());
    let partner = IncompSubsolution::new(
        g,
        vec![[0.0; 3]; g.len()],
        vec![SymMat::scalar(n, 2.0 * e0 / (n as f64 * g.volume())); g.len()],
        s.budget,
    )?;
    let w = MixWeights::new(vec![lambda, 1.0 - lambda])?;
    let mut out = convex_combine_incomp(&[&partner, s], &w)?;
    out.certs = ResidualCerts {
        mass: (1.0 - lambda) * s.certs.mass,
        momentum: (1.0 - lambda) * s.certs.momentum,
    };
    let min_eig = out.rr.iter().map(lambda_min).fold(f64::INFINITY, f64::min);
    if min_eig < floor - 1e-10 {
        return Err(Error::ConstructionFailed(format!(
            "strictified stress has eigenvalue {min_eig:.3e} below floor {floor:.3e}"
        )));
    }
    let h = g.cell_volume();
    let closeness: f64 = (0..g.ns())
        .map(|sp| {
            let d = vsub(&out.v[sp], &s.v[sp]);
            0.5 * (dot(&d, &d) + out.rr[sp].trace()) * h
        })
        .sum();
    Ok((
        out,
        StrictifyReport {
            lambda,
            floor,
            min_eig,
            closeness,
            eps,
        },
    ))
}

/// ρ̂ with p(ρ̂)/(γ−1) = ℰ⁰/|𝕋ⁿ|.
pub fn rest_density(e0: f64, volume: f64, gamma: f64) -> f64 {
    ((gamma - 1.0) * e0 / volume).powf(1.0 / gamma)
}

/// Initial-slice distance ‖Ṽ/√ρ̃ − V/√ρ‖² + ‖ρ̃ − ρ‖^γ_γ + ∫(tr𝓡̃ + r̃/(γ−1)).
pub fn comp_closeness(out: &CompSubsolution, rho0: &[f64], v0: &[Vec3]) -> f64 {
    let g = out.grid;
    let h = g.cell_volume();
    let gamma = out.gamma;
    (0..g.ns())
        .map(|sp| {
            let a = out.rho[sp].sqrt();
            let b = rho0[sp].sqrt();
            let mut dv = 0.0;
            for c in 0..g.n {
                let d = out.v[sp][c] / a - v0[sp][c] / b;
                dv += d * d;
            }
            let dr = (out.rho[sp] - rho0[sp]).abs().powf(gamma);
            (dv + dr + out.calr[sp].trace() + out.r[sp] / (gamma - 1.0)) * h
        })
        .sum()
}

/// Mixes with the rest state (ρ̂, 0, 0, 0), then mollifies at scale α so that
/// 𝓡̃ + r̃I is positive definite everywhere. λ starts at min(ε/6ℰ⁰, ½) and
/// is halved until the measured initial closeness drops below ε.
pub fn strictify_comp(s: &CompSubsolution, eps: f64, alpha: f64) -> Result<(CompSubsolution, StrictifyReport)> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("epsilon {eps} must be positive")));
    }
    let g = s.grid;
    let ns = g.ns();
    let rho0 = &s.rho[..ns];
    let v0 = &s.v[..ns];
    let vmax = v0.iter().map(|v| dot(v, v).sqrt()).fold(0.0, f64::max);
    let (lo, hi) = rho0
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    let mean = rho0.iter().sum::<f64>() / ns as f64;
    if vmax <= 1e-12 * (1.0 + mean) && hi - lo <= 1e-12 * mean {
        return Err(Error::DegenerateInput(
            "initial density is constant and initial momentum vanishes".into(),
        ));
    }
    let rho_hat = rest_density(s.budget.e0, g.volume(), s.gamma);
    let partner = CompSubsolution::rest(g, s.gamma, rho_hat, s.budget)?;
    let mut lambda = strictify_lambda(eps, s.budget.e0);
    for _ in 0..40 {
        let w = MixWeights::new(vec![lambda, 1.0 - lambda])?;
        let mut mixed = convex_combine_comp(&[&partner, s], &w)?;
        mixed.certs = ResidualCerts {
            mass: (1.0 - lambda) * s.certs.mass,
            momentum: (1.0 - lambda) * s.certs.momentum,
        };
        let out = mollify_subsolution(&mixed, alpha)?;
        let closeness = comp_closeness(&out, rho0, v0);
        if closeness < eps {
            let min_eig = (0..out.grid.len())
                .map(|i| lambda_min(&(out.calr[i] + SymMat::scalar(g.n, out.r[i]))))
                .fold(f64::INFINITY, f64::min);
            if !(min_eig > 0.0) {
                return Err(Error::ConstructionFailed(format!(
                    "strictified defect has eigenvalue {min_eig:.3e}"
                )));
            }
            return Ok((
                out,
                StrictifyReport {
                    lambda,
                    floor: 0.0,
                    min_eig,
                    closeness,
                    eps,
                },
            ));
        }
        lambda *= 0.5;
    }
    Err(Error::ConstructionFailed(format!(
        "initial closeness stays above {eps} for every mixing weight"
    )))
}

/// r_c(t) = (2/(n(γ−1)) − 1) ⨍ r(t,·), so that ∫(r + r_c) = (2/(n(γ−1)))∫r.
pub fn compensating_potential(s: &CompSubsolution) -> Result<Vec<f64>> {
    let n = s.grid.n;
    gamma_gate(s.gamma, n)?;
    let c = 2.0 / (n as f64 * (s.gamma - 1.0)) - 1.0;
    let ns = s.grid.ns();
    Ok((0..s.grid.nt)
        .map(|j| {
            let mean = s.r[j * ns..(j + 1) * ns].iter().sum::<f64>() / ns as f64;
            (c * mean).max(0.0)
        })
        .collect())
}

/// Per slice |∫(r + r_c) − (2/(n(γ−1)))∫r| relative to max(1, |∫r|).
pub fn compensating_identity_errors(s: &CompSubsolution, rc: &[f64]) -> Vec<f64> {
    let g = s.grid;
    let ns = g.ns();
    let h = g.cell_volume();
    let c = 2.0 / (g.n as f64 * (s.gamma - 1.0));
    (0..g.nt)
        .map(|j| {
            let ir: f64 = s.r[j * ns..(j + 1) * ns].iter().sum::<f64>() * h;
            let lhs = ir + rc[j] * g.volume();
            (lhs - c * ir).abs() / ir.abs().max(1.0)
        })
        .collect()
}

/// Adds the spatially constant r_def(t) = (γ−1)(ℰ⁰ − energy(t))/|𝕋ⁿ| so that
/// energy saturation holds exactly. Slices whose energy exceeds ℰ⁰ by more than the
/// tolerance are rejected.
pub fn saturate(s: &CompSubsolution) -> Result<(CompSubsolution, Vec<f64>)> {
    let series = energy_series(s)?;
    let e0 = s.budget.e0;
    let vol = s.grid.volume();
    let ns = s.grid.ns();
    let mut out = s.clone();
    let mut added = Vec::with_capacity(series.len());
    for (j, e) in series.iter().enumerate() {
        if *e > e0 * (1.0 + ENERGY_TOL) {
            return Err(Error::Precondition(format!(
                "slice {j} carries energy {e:.6e} above the budget {e0:.6e}"
            )));
        }
        let rd = ((s.gamma - 1.0) * (e0 - e) / vol).max(0.0);
        for x in &mut out.r[j * ns..(j + 1) * ns] {
            *x += rd;
        }
        added.push(rd);
    }
    Ok((out, added))
}

/// Adds (2(ℰ⁰ − energy(t))/(n|𝕋ⁿ|)) I to R so that energy saturation holds exactly.
pub fn saturate_incomp(s: &IncompSubsolution) -> Result<(IncompSubsolution, Vec<f64>)> {
    let e0 = s.budget.e0;
    let g = s.grid;
    let ns = g.ns();
    let mut out = s.clone();
    let mut added = Vec::with_capacity(g.nt);
    for j in 0..g.nt {
        let e = s.energy(j);
        if e > e0 * (1.0 + ENERGY_TOL) {
            return Err(Error::Precondition(format!(
                "slice {j} carries energy {e:.6e} above the budget {e0:.6e}"
            )));
        }
        let rd = (2.0 * (e0 - e) / (g.n as f64 * g.volume())).max(0.0);
        for m in &mut out.rr[j * ns..(j + 1) * ns] {
            *m += SymMat::scalar(g.n, rd);
        }
        added.push(rd);
    }
    Ok((out, added))
}
