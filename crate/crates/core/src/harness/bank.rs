//! Finite bank of space-time test functions φ(t,x) = T(t)·S(x), with S a
//! single trigonometric mode and T a quartic bump in time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, TimeLayout};
use crate::matgeom::Vec3;

pub const DEFAULT_KMAX: usize = 8;
const BUMP_SUP_DERIV: f64 = 1.539_600_717_839_002; // 8/(3√3)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Cos,
    Sin,
}

/// (1 − s²)² on [a, b]; with `touches_start` the bump is one-sided and
/// equals 1 at t = a.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub a: f64,
    pub b: f64,
    pub touches_start: bool,
}

impl TimeWindow {
    pub fn value(&self, t: f64) -> f64 {
        let s = if self.touches_start {
            (t - self.a) / (self.b - self.a)
        } else {
            (2.0 * t - self.a - self.b) / (self.b - self.a)
        };
        if !(-1.0..=1.0).contains(&s) || (self.touches_start && s < 0.0) {
            return 0.0;
        }
        let q = 1.0 - s * s;
        q * q
    }

    pub fn sup_deriv(&self) -> f64 {
        let scale = if self.touches_start { 1.0 } else { 2.0 };
        BUMP_SUP_DERIV * scale / (self.b - self.a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestBank {
    pub n: usize,
    pub kmax: usize,
    pub extent: f64,
    /// canonical wave vectors (first nonzero component positive), zero first
    pub modes: Vec<[i32; 3]>,
    pub windows: Vec<TimeWindow>,
    /// unit directions orthogonal to each mode (all axes for k = 0)
    pub divfree_dirs: Vec<Vec<Vec3>>,
}

impl TestBank {
    pub fn new(grid: &Grid, kmax: usize) -> Result<Self> {
        let n = grid.n;
        let k = kmax.min(grid.nx / 2 - 1);
        if k == 0 {
            return Err(Error::InvalidInput("grid too coarse for a test bank".into()));
        }
        let ki = k as i32;
        let mut modes = vec![[0; 3]];
        let range = -ki..=ki;
        for k2 in if n == 3 { range.clone() } else { 0..=0 } {
            for k1 in range.clone() {
                for k0 in range.clone() {
                    let m = [k0, k1, k2];
                    let first = m.iter().take(n).find(|x| **x != 0);
                    if matches!(first, Some(f) if *f > 0) {
                        modes.push(m);
                    }
                }
            }
        }
        let divfree_dirs = modes.iter().map(|m| perp_dirs(n, m)).collect();
        let windows = windows(grid)?;
        Ok(TestBank {
            n,
            kmax: k,
            extent: grid.extent,
            modes,
            windows,
            divfree_dirs,
        })
    }

    /// 2πk/L
    pub fn kappa(&self, m: &[i32; 3]) -> Vec3 {
        let c = 2.0 * std::f64::consts::PI / self.extent;
        [c * m[0] as f64, c * m[1] as f64, c * m[2] as f64]
    }

    pub fn phases(&self, q: usize) -> &'static [Phase] {
        if q == 0 {
            &[Phase::Cos]
        } else {
            &[Phase::Cos, Phase::Sin]
        }
    }

    /// ‖φ‖ = sup|φ| + sup|∇_{t,x}φ| bound for mode q and window w.
    pub fn norm(&self, q: usize, w: usize) -> f64 {
        let kap = self.kappa(&self.modes[q]);
        let kk = (kap[0] * kap[0] + kap[1] * kap[1] + kap[2] * kap[2]).sqrt();
        let d = self.windows[w].sup_deriv();
        1.0 + (d * d + kk * kk).sqrt()
    }

    pub fn scalar_count(&self) -> usize {
        (2 * self.modes.len() - 1) * self.windows.len()
    }

    pub fn divfree_count(&self) -> usize {
        let per: usize = self
            .divfree_dirs
            .iter()
            .enumerate()
            .map(|(q, d)| d.len() * self.phases(q).len())
            .sum();
        per * self.windows.len()
    }

    /// Human-readable roster of scalar members.
    pub fn roster(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (q, m) in self.modes.iter().enumerate() {
            for p in self.phases(q) {
                for w in &self.windows {
                    out.push(format!(
                        "k={:?} phase={:?} t=[{:.6},{:.6}]{}",
                        &m[..self.n],
                        p,
                        w.a,
                        w.b,
                        if w.touches_start { " initial" } else { "" }
                    ));
                }
            }
        }
        out
    }
}

fn perp_dirs(n: usize, m: &[i32; 3]) -> Vec<Vec3> {
    if m.iter().all(|x| *x == 0) {
        return (0..n)
            .map(|a| {
                let mut e = [0.0; 3];
                e[a] = 1.0;
                e
            })
            .collect();
    }
    let k = [m[0] as f64, m[1] as f64, m[2] as f64];
    let kn = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
    if n == 2 {
        return vec![[-k[1] / kn, k[0] / kn, 0.0]];
    }
    let ax = (0..3)
        .min_by(|&a, &b| k[a].abs().partial_cmp(&k[b].abs()).unwrap())
        .unwrap();
    let mut e = [0.0; 3];
    e[ax] = 1.0;
    let d1 = normalize(cross(&k, &e));
    let d2 = normalize(cross(&k, &d1));
    vec![d1, d2]
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: Vec3) -> Vec3 {
    let l = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / l, a[1] / l, a[2] / l]
}

/// Windows with endpoints on sample times: the whole range, halves and
/// quarters. Node grids also get one-sided bumps anchored at the start.
fn windows(grid: &Grid) -> Result<Vec<TimeWindow>> {
    let (lo, hi) = match grid.layout {
        TimeLayout::Node => (0, grid.nt - 1),
        TimeLayout::Cell => (1, grid.nt - 2),
    };
    if hi < lo + 2 {
        return Err(Error::InvalidInput("too few time samples for a test bank".into()));
    }
    let mut out = Vec::new();
    let mut push = |a: usize, b: usize, touches: bool| {
        if b >= a + 2 {
            out.push(TimeWindow {
                a: grid.t(a),
                b: grid.t(b),
                touches_start: touches,
            });
        }
    };
    let span = hi - lo;
    push(lo, hi, false);
    for parts in [2usize, 4] {
        for p in 0..parts {
            push(lo + span * p / parts, lo + span * (p + 1) / parts, false);
        }
    }
    if grid.layout == TimeLayout::Node {
        push(lo, hi, true);
        push(lo, lo + span / 2, true);
    }
    Ok(out)
}

/// Summation-by-parts consistent derivative of T at the sample times.
pub(crate) fn discrete_derivative(grid: &Grid, vals: &[f64]) -> Vec<f64> {
    let nt = vals.len();
    let dt = grid.dt();
    (0..nt)
        .map(|j| {
            if j == 0 {
                (vals[1] - vals[0]) / dt
            } else if j + 1 == nt {
                (vals[j] - vals[j - 1]) / dt
            } else {
                (vals[j + 1] - vals[j - 1]) / (2.0 * dt)
            }
        })
        .collect()
}
