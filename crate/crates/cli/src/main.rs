use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use wildfield::grid::{Grid, TimeLayout};
use wildfield::harness::verify::plain_candidate;
use wildfield::harness::{verify_weak, write_csv, Config, Snapshot, TestBank, DEFAULT_KMAX};
use wildfield::matgeom::{
    e_fn, hull_membership, min_speed, HullClass, HullQuery, StateVU, SymMat, TracelessSymMat, Vec3,
};
use wildfield::scheme::{self, FieldState};
use wildfield::subsolution::pipeline::{wild_data_pipeline, wild_data_pipeline_incomp, PipelineConfig};
use wildfield::subsolution::{
    compensating_potential, convex_combine_comp, convex_combine_incomp, mollify_subsolution,
    mollify_subsolution_incomp, saturate, saturate_incomp, strictify_comp, strictify_incomp,
    CompSubsolution, EnergyBudget, IncompSubsolution, MixWeights,
};
use wildfield::viscous::{extract_defect, extract_defect_incomp, solve_incomp_ns, ExtractConfig, ViscousRun};
use wildfield::wavegen::{find_segment, localize_on, DEFAULT_LOCAL_RES_2D, DEFAULT_LOCAL_RES_3D};

/// Convex-integration laboratory for wild Euler solutions.
#[derive(Parser)]
#[command(name = "wildfield", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// override a configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// write a CSV time series here
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Hull membership, E and the admissible segment of one state.
    Geometry {
        /// state spec: n, v, u (upper triangle), r0 (upper triangle), r
        spec: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Localize a wave for one state and write its samples.
    Wave {
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the defect-reduction scheme.
    Integrate {
        #[arg(long, required = true)]
        seed: Option<u64>,
        /// snapshot with rho, V, R0 and optionally active
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Subsolution operations: combine, mollify, strictify, saturate, compensate.
    Subsolution {
        op: String,
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Viscous runs over a viscosity schedule, then defect extraction.
    Viscous {
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Wild initial data and solutions near a smooth shear datum.
    Pipeline {
        #[arg(long, required = true)]
        seed: Option<u64>,
        #[arg(long)]
        gamma: Option<f64>,
        /// directory for solution snapshots
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Weak-form and energy report for a snapshot.
    Verify {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common, allowed: &[&str]) -> anyhow::Result<Config> {
    let mut c = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Config::parse(&text, allowed)?
        }
        None => Config::new(allowed),
    };
    for pair in &common.set {
        c.set_pair(pair)?;
    }
    Ok(c)
}

fn emit(v: serde_json::Value) {
    println!("{v}");
}

fn vec_of(c: &Config, key: &str, n: usize) -> anyhow::Result<Vec3> {
    let mut v = [0.0; 3];
    if let Some(l) = c.get_list(key)? {
        if l.len() != n {
            bail!(wildfield::Error::InvalidInput(format!("{key}: expected {n} entries")));
        }
        v[..n].copy_from_slice(&l);
    }
    Ok(v)
}

fn sym_of(c: &Config, key: &str, n: usize, default: SymMat) -> anyhow::Result<SymMat> {
    match c.get_list(key)? {
        None => Ok(default),
        Some(l) => Ok(SymMat::from_upper(n, &l)?),
    }
}

const STATE_KEYS: &[&str] = &["n", "v", "u", "r0", "r", "k", "eps", "res"];

struct PointState {
    state: StateVU,
    r0: SymMat,
    r: f64,
}

fn point_state(c: &Config) -> anyhow::Result<PointState> {
    let n: usize = c.get("n", 2)?;
    if n != 2 && n != 3 {
        bail!(wildfield::Error::InvalidInput(format!("dimension {n} not in {{2,3}}")));
    }
    let v = vec_of(c, "v", n)?;
    let u = TracelessSymMat::new(sym_of(c, "u", n, SymMat::zeros(n))?)?;
    let r0 = sym_of(c, "r0", n, SymMat::zeros(n))?;
    let r: f64 = c.get("r", 1.0)?;
    Ok(PointState {
        state: StateVU { v, u },
        r0,
        r,
    })
}

fn cmd_geometry(spec: &Path, common: &Common) -> anyhow::Result<()> {
    let mut common = common.clone();
    common.config = Some(spec.to_path_buf());
    let c = load_config(&common, STATE_KEYS)?;
    let p = point_state(&c)?;
    let hm = hull_membership(&HullQuery {
        state: p.state,
        r0: p.r0,
        r: p.r,
    })?;
    let e = e_fn(&p.state.v, &p.state.u, &p.r0)?;
    let speed = min_speed(&p.state.v, &p.state.u, &p.r0)?;
    let segment = if hm.class == HullClass::Interior {
        Some(find_segment(&p.state, &p.r0, p.r)?)
    } else {
        None
    };
    emit(json!({
        "kind": "geometry",
        "class": hm.class,
        "margin": hm.margin,
        "e": e,
        "min_speed": speed,
        "segment": segment,
    }));
    Ok(())
}

fn cmd_wave(out: Option<&Path>, common: &Common) -> anyhow::Result<()> {
    let c = load_config(common, STATE_KEYS)?;
    let p = point_state(&c)?;
    let n = p.r0.n();
    let seg = find_segment(&p.state, &p.r0, p.r)?;
    let eps: f64 = c.get("eps", 0.1)?;
    let k: u32 = c.get("k", 64)?;
    let res: usize = c.get("res", if n == 2 { DEFAULT_LOCAL_RES_2D } else { DEFAULT_LOCAL_RES_3D })?;
    let w = localize_on(&seg, k, eps, res, res)?;
    emit(json!({
        "kind": "wave",
        "k": w.k(),
        "lambda": w.lambda(),
        "eps": eps,
        "segment": seg,
        "certs": w.certs,
    }));
    if let Some(path) = out {
        // local coordinates [−1, 1]ⁿ × [−1, 1]
        let g = Grid::new(n, res, res, 2.0, -1.0, 1.0, TimeLayout::Cell)?;
        let mut s = Snapshot::new(g, None);
        s.push_vector("v", &w.v)?;
        s.push_sym("u", &w.u)?;
        s.meta.insert("k".into(), w.k().into());
        s.meta.insert("origin".into(), json!(-1.0));
        s.write(path)?;
    }
    Ok(())
}

fn cmd_integrate(seed: u64, input: Option<&Path>, out: Option<&Path>, common: &Common) -> anyhow::Result<()> {
    let c = load_config(common, &["n", "nx", "nt", "target", "max_sweeps"])?;
    let target: f64 = c.get("target", 0.1)?;
    let max_sweeps: usize = c.get("max_sweeps", 50)?;
    let fs = match input {
        Some(p) => {
            let s = Snapshot::read(p)?;
            let len = s.grid.len();
            let active = match s.field("active") {
                Ok(_) => s.scalar("active")?.iter().map(|a| *a != 0.0).collect(),
                Err(_) => vec![true; len],
            };
            FieldState::new(s.grid, s.scalar("rho")?, s.vector("V")?, s.sym("R0")?, active)?
        }
        None => {
            // constant benchmark: ρ₀ = 1, V₀ = 0, R₀ = I
            let n: usize = c.get("n", 2)?;
            let g = Grid::unit(n, c.get("nx", 32)?, c.get("nt", 32)?)?;
            FieldState::constant(g, 1.0, [0.0; 3], SymMat::identity(n))?
        }
    };
    let mut rows = Vec::new();
    let cand = scheme::run_with(&fs, target, max_sweeps, seed, |r| {
        println!("{}", r.to_json_line());
        rows.push(vec![r.sweep as f64, r.integral_tr_m, r.min_lambda_m, r.dv_l1, r.coercivity]);
    })?;
    let id = scheme::energy_identity_check(&cand);
    let ratio = scheme::l1_active(&cand.grid, &cand.active, &id)
        / scheme::l1_active(&cand.grid, &cand.active, &cand.r0_trace).max(f64::MIN_POSITIVE);
    emit(json!({
        "kind": "integrate",
        "seed": seed,
        "status": cand.status,
        "sweeps": cand.reports.len(),
        "final_tr_m": cand.final_tr_m(),
        "energy_identity_ratio": ratio,
        "certs": cand.certs,
    }));
    if let Some(p) = &common.csv {
        write_csv(p, &["sweep", "integral_tr_m", "min_lambda_m", "dv_l1", "coercivity"], &rows)?;
    }
    if let Some(p) = out {
        let mut s = Snapshot::new(cand.grid, None);
        s.push_scalar("rho", &cand.rho)?;
        s.push_vector("V", &cand.v)?;
        s.push_sym("U", &cand.u)?;
        s.push_scalar("trM", &cand.m_trace)?;
        s.meta.insert("seed".into(), seed.into());
        s.write(p)?;
    }
    Ok(())
}

enum Sub {
    Comp(CompSubsolution),
    Incomp(IncompSubsolution),
}

fn budget_of(s: &Snapshot, c: &Config) -> anyhow::Result<EnergyBudget> {
    let meta = |k: &str| s.meta.get(k).and_then(|v| v.as_f64());
    let e0 = match meta("e0") {
        Some(e) => c.get("e0", e)?,
        None => c.get_str("e0").map(|_| c.get("e0", 0.0)).transpose()?.ok_or_else(|| {
            wildfield::Error::InvalidInput("energy budget e0 missing from snapshot meta and config".into())
        })?,
    };
    let t = c.get("horizon", meta("T").unwrap_or(s.grid.t_end))?;
    Ok(EnergyBudget::new(e0, t)?)
}

fn read_sub(p: &Path, c: &Config) -> anyhow::Result<Sub> {
    let s = Snapshot::read(p)?;
    let budget = budget_of(&s, c)?;
    Ok(match s.gamma {
        Some(gm) => Sub::Comp(CompSubsolution::new(
            s.grid,
            gm,
            s.scalar("rho")?,
            s.vector("V")?,
            s.sym("calR")?,
            s.scalar("r")?,
            budget,
        )?),
        None => Sub::Incomp(IncompSubsolution::new(s.grid, s.vector("V")?, s.sym("R")?, budget)?),
    })
}

fn sub_snapshot(sub: &Sub) -> anyhow::Result<Snapshot> {
    Ok(match sub {
        Sub::Comp(s) => {
            let mut o = Snapshot::new(s.grid, Some(s.gamma));
            o.push_scalar("rho", &s.rho)?;
            o.push_vector("V", &s.v)?;
            o.push_sym("calR", &s.calr)?;
            o.push_scalar("r", &s.r)?;
            o.meta.insert("e0".into(), s.budget.e0.into());
            o.meta.insert("T".into(), s.budget.t.into());
            o
        }
        Sub::Incomp(s) => {
            let mut o = Snapshot::new(s.grid, None);
            o.push_vector("V", &s.v)?;
            o.push_sym("R", &s.rr)?;
            o.meta.insert("e0".into(), s.budget.e0.into());
            o.meta.insert("T".into(), s.budget.t.into());
            o
        }
    })
}

fn cmd_subsolution(op: &str, inputs: &[PathBuf], out: Option<&Path>, common: &Common) -> anyhow::Result<()> {
    let c = load_config(common, &["e0", "horizon", "eps", "alpha", "weights"])?;
    let subs = inputs.iter().map(|p| read_sub(p, &c)).collect::<anyhow::Result<Vec<_>>>()?;
    if op != "combine" && subs.len() != 1 {
        bail!(wildfield::Error::InvalidInput(format!("{op} takes exactly one input")));
    }
    let alpha: f64 = c.get("alpha", 0.04)?;
    let eps: f64 = c.get("eps", 0.5)?;
    let mut report = json!({ "kind": "subsolution", "op": op });
    let result = match op {
        "combine" => {
            let w = match c.get_list("weights")? {
                Some(w) => MixWeights::new(w)?,
                None => MixWeights::uniform(subs.len())?,
            };
            let comp: Vec<&CompSubsolution> = subs
                .iter()
                .filter_map(|s| if let Sub::Comp(x) = s { Some(x) } else { None })
                .collect();
            let inc: Vec<&IncompSubsolution> = subs
                .iter()
                .filter_map(|s| if let Sub::Incomp(x) = s { Some(x) } else { None })
                .collect();
            if !comp.is_empty() && !inc.is_empty() {
                bail!(wildfield::Error::InvalidInput("cannot mix compressible and incompressible inputs".into()));
            }
            if inc.is_empty() {
                Sub::Comp(convex_combine_comp(&comp, &w)?)
            } else {
                Sub::Incomp(convex_combine_incomp(&inc, &w)?)
            }
        }
        "mollify" => match &subs[0] {
            Sub::Comp(s) => Sub::Comp(mollify_subsolution(s, alpha)?),
            Sub::Incomp(s) => Sub::Incomp(mollify_subsolution_incomp(s, alpha)?),
        },
        "strictify" => match &subs[0] {
            Sub::Comp(s) => {
                let (o, r) = strictify_comp(s, eps, alpha)?;
                report["strictify"] = json!(r);
                Sub::Comp(o)
            }
            Sub::Incomp(s) => {
                let (o, r) = strictify_incomp(s, eps)?;
                report["strictify"] = json!(r);
                Sub::Incomp(o)
            }
        },
        "saturate" => match &subs[0] {
            Sub::Comp(s) => {
                let (o, added) = saturate(s)?;
                report["added"] = json!(added);
                Sub::Comp(o)
            }
            Sub::Incomp(s) => {
                let (o, added) = saturate_incomp(s)?;
                report["added"] = json!(added);
                Sub::Incomp(o)
            }
        },
        "compensate" => match &subs[0] {
            Sub::Comp(s) => {
                let rc = compensating_potential(s)?;
                report["rc"] = json!(rc);
                Sub::Comp(s.clone())
            }
            Sub::Incomp(_) => bail!(wildfield::Error::InvalidInput(
                "compensate needs a compressible subsolution".into()
            )),
        },
        other => bail!(wildfield::Error::InvalidInput(format!(
            "unknown op '{other}' (combine, mollify, strictify, saturate, compensate)"
        ))),
    };
    let series = match &result {
        Sub::Comp(s) => wildfield::subsolution::energy_series(s)?,
        Sub::Incomp(s) => s.energy_series(),
    };
    report["energy"] = json!(series);
    emit(report);
    if let Some(p) = &common.csv {
        let g = match &result {
            Sub::Comp(s) => s.grid,
            Sub::Incomp(s) => s.grid,
        };
        let rows: Vec<Vec<f64>> = series.iter().enumerate().map(|(j, e)| vec![g.t(j), *e]).collect();
        write_csv(p, &["t", "energy"], &rows)?;
    }
    if let Some(p) = out {
        sub_snapshot(&result)?.write(p)?;
    }
    Ok(())
}

/// ρ⁰ = 1 + a sin 2πx₁, V⁰ = b(sin 2πx₂, 0, …) on the nxⁿ grid.
fn shear_datum(n: usize, nx: usize, a: f64, b: f64) -> anyhow::Result<(Vec<f64>, Vec<Vec3>)> {
    let g = Grid::unit(n, nx, 4)?;
    let rho = (0..g.ns()).map(|s| 1.0 + a * (2.0 * PI * g.x(s)[0]).sin()).collect();
    let v = (0..g.ns()).map(|s| [b * (2.0 * PI * g.x(s)[1]).sin(), 0.0, 0.0]).collect();
    Ok((rho, v))
}

const VISCOUS_KEYS: &[&str] = &[
    "n", "nx", "nt", "horizon", "gamma", "incompressible", "nus", "filter_width", "max_residual", "kmax", "rho_amp",
    "v_amp",
];

fn cmd_viscous(out: Option<&Path>, common: &Common) -> anyhow::Result<()> {
    let c = load_config(common, VISCOUS_KEYS)?;
    let d = PipelineConfig::default();
    let n: usize = c.get("n", 2)?;
    let nx: usize = c.get("nx", 32)?;
    let nt: usize = c.get("nt", 21)?;
    let horizon: f64 = c.get("horizon", 0.5)?;
    let incomp: bool = c.get("incompressible", false)?;
    let gamma: f64 = c.get("gamma", d.gamma)?;
    let nus = c.get_list("nus")?.unwrap_or_else(|| vec![4e-3, 2e-3]);
    let ecfg = ExtractConfig {
        filter_width: c.get("filter_width", 1.0 / nx as f64)?,
        max_residual: c.get("max_residual", d.max_residual)?,
        kmax: c.get("kmax", DEFAULT_KMAX)?,
    };
    let (rho0, v0) = shear_datum(n, nx, c.get("rho_amp", 0.2)?, c.get("v_amp", 0.3)?)?;
    let grid = Grid::new(n, nx, nt, 1.0, 0.0, horizon, TimeLayout::Node)?;
    let runs: Vec<ViscousRun> = if incomp {
        nus.iter()
            .map(|&nu| solve_incomp_ns(grid, &v0, nu))
            .collect::<Result<_, _>>()?
    } else {
        wildfield::viscous::solve_comp_schedule(grid, &rho0, &v0, &nus, gamma)?
    };
    let mut rows = Vec::new();
    for r in &runs {
        let ns = r.grid.ns();
        let m0: f64 = r.rho[..ns].iter().sum();
        let m1: f64 = r.rho[(r.grid.nt - 1) * ns..].iter().sum();
        emit(json!({
            "kind": "viscous_run",
            "nu": r.nu,
            "e0": r.e0,
            "total_dissipation": r.total_dissipation(),
            "max_ledger_increase": r.max_ledger_increase(),
            "mass_drift": (m1 - m0).abs() * r.grid.cell_volume(),
            "steps": r.ledger.len(),
        }));
        for e in &r.ledger {
            rows.push(vec![r.nu, e.step as f64, e.t, e.energy, e.dissipation, e.ledger]);
        }
    }
    if let Some(p) = &common.csv {
        write_csv(p, &["nu", "step", "t", "energy", "dissipation", "ledger"], &rows)?;
    }
    let sub = if incomp {
        let ex = extract_defect_incomp(&runs, &ecfg)?;
        emit(json!({
            "kind": "extract",
            "incompressible": true,
            "filter_width": ex.filter_width,
            "clip": ex.clip,
            "stress_sup": ex.stress_sup,
            "certs": ex.sub.certs,
        }));
        Sub::Incomp(ex.sub)
    } else {
        let ex = extract_defect(&runs, &ecfg)?;
        emit(json!({
            "kind": "extract",
            "incompressible": false,
            "filter_width": ex.filter_width,
            "clip_calr": ex.clip_calr,
            "clip_r": ex.clip_r,
            "calr_sup": ex.calr_sup,
            "r_sup": ex.r_sup,
            "kinetic_scale": ex.kinetic_scale,
            "pressure_scale": ex.pressure_scale,
            "trend": ex.trend,
            "certs": ex.sub.certs,
        }));
        Sub::Comp(ex.sub)
    };
    if let Some(p) = out {
        sub_snapshot(&sub)?.write(p)?;
    }
    Ok(())
}

const PIPELINE_KEYS: &[&str] = &[
    "n", "nx", "nt", "horizon", "gamma", "eps", "nus", "filter_width", "alpha", "kmax", "max_residual", "target",
    "max_sweeps", "solutions", "values", "incompressible", "rho_amp", "v_amp",
];

fn cmd_pipeline(seed: u64, gamma: Option<f64>, out: Option<&Path>, common: &Common) -> anyhow::Result<()> {
    let c = load_config(common, PIPELINE_KEYS)?;
    let d = PipelineConfig::default();
    let n: usize = c.get("n", 2)?;
    let cfg = PipelineConfig {
        nx: c.get("nx", d.nx)?,
        nt: c.get("nt", d.nt)?,
        horizon: c.get("horizon", d.horizon)?,
        gamma: gamma.map_or_else(|| c.get("gamma", d.gamma), Ok)?,
        eps: c.get("eps", d.eps)?,
        nus: c.get_list("nus")?.unwrap_or(d.nus.clone()),
        filter_width: c.get("filter_width", d.filter_width)?,
        alpha: c.get("alpha", d.alpha)?,
        kmax: c.get("kmax", d.kmax)?,
        max_residual: c.get("max_residual", d.max_residual)?,
        target: c.get("target", d.target)?,
        max_sweeps: c.get("max_sweeps", d.max_sweeps)?,
        solutions: c.get("solutions", d.solutions)?,
    };
    let values: u64 = c.get("values", 3)?;
    let seeds: Vec<u64> = (0..values).map(|i| seed.wrapping_add(i)).collect();
    let incomp: bool = c.get("incompressible", false)?;
    let (rho0, v0) = shear_datum(n, cfg.nx, c.get("rho_amp", 0.2)?, c.get("v_amp", 0.3)?)?;
    let rep = if incomp {
        wild_data_pipeline_incomp(n, &v0, &cfg, &seeds)?
    } else {
        wild_data_pipeline(n, &rho0, &v0, &cfg, &seeds)?
    };
    for line in rep.to_json_lines() {
        println!("{line}");
    }
    if let Some(p) = &common.csv {
        let mut rows = Vec::new();
        for (a, v) in rep.values.iter().enumerate() {
            for (b, s) in v.solutions.iter().enumerate() {
                for (j, e) in s.verify.energy.series.iter().enumerate() {
                    rows.push(vec![a as f64, b as f64, s.candidate.grid.t(j), *e]);
                }
            }
        }
        write_csv(p, &["value", "solution", "t", "energy"], &rows)?;
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        for (a, v) in rep.values.iter().enumerate() {
            for (b, s) in v.solutions.iter().enumerate() {
                let cand = &s.candidate;
                let mut snap = Snapshot::new(cand.grid, cand.gamma);
                snap.push_scalar("rho", &cand.rho)?;
                snap.push_vector("V", &cand.v)?;
                snap.meta.insert("seed".into(), v.seed.into());
                snap.meta.insert("incompressible".into(), cand.incompressible.into());
                snap.write(&dir.join(format!("value{a}_solution{b}.wfld")))?;
            }
        }
    }
    if rep.values.iter().flat_map(|v| &v.solutions).any(|s| !s.verify.passed) {
        bail!(wildfield::Error::Verification("a solution failed verification".into()));
    }
    Ok(())
}

fn cmd_verify(input: &Path, common: &Common) -> anyhow::Result<()> {
    let c = load_config(common, &["kmax"])?;
    let s = Snapshot::read(input)?;
    let incomp = s
        .meta
        .get("incompressible")
        .and_then(|v| v.as_bool())
        .unwrap_or(s.field("rho").is_err());
    let rho = if s.field("rho").is_ok() {
        s.scalar("rho")?
    } else {
        vec![1.0; s.grid.len()]
    };
    let cand = plain_candidate(s.grid, rho, s.vector("V")?, s.gamma, incomp)?;
    let bank = TestBank::new(&s.grid, c.get("kmax", DEFAULT_KMAX)?)?;
    let rep = verify_weak(&cand, &bank)?;
    println!("{}", rep.to_json_line());
    if let Some(p) = &common.csv {
        let rows: Vec<Vec<f64>> = rep
            .energy
            .series
            .iter()
            .enumerate()
            .map(|(j, e)| vec![s.grid.t(j), *e])
            .collect();
        write_csv(p, &["t", "energy"], &rows)?;
    }
    if !rep.passed {
        bail!(wildfield::Error::Verification(format!(
            "residuals mass {:.3e} momentum {:.3e}, {} energy violations",
            rep.mass_residual, rep.momentum_residual, rep.energy.violations
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.cmd {
        Cmd::Geometry { spec, common } => cmd_geometry(spec, common),
        Cmd::Wave { out, common } => cmd_wave(out.as_deref(), common),
        Cmd::Integrate {
            seed,
            input,
            out,
            common,
        } => cmd_integrate(seed.expect("clap enforces --seed"), input.as_deref(), out.as_deref(), common),
        Cmd::Subsolution {
            op,
            inputs,
            out,
            common,
        } => cmd_subsolution(op, inputs, out.as_deref(), common),
        Cmd::Viscous { out, common } => cmd_viscous(out.as_deref(), common),
        Cmd::Pipeline {
            seed,
            gamma,
            out,
            common,
        } => cmd_pipeline(seed.expect("clap enforces --seed"), *gamma, out.as_deref(), common),
        Cmd::Verify { input, common } => cmd_verify(input, common),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<wildfield::Error>().map_or(2, |w| w.exit_code());
            eprintln!("{}", json!({ "kind": "error", "exit_code": code, "message": e.to_string() }));
            ExitCode::from(code as u8)
        }
    }
}
