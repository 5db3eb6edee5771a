//! Uniform space-time sampling grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matgeom::Vec3;

/// Where time samples sit inside [t_start, t_end].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeLayout {
    /// cell centers, midpoint weights
    Cell,
    /// closed node set including both ends, trapezoid weights
    Node,
}

/// Cell-centered spatial grid on [0, extent]ⁿ (periodic) times a time axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n: usize,
    pub nx: usize,
    pub nt: usize,
    pub extent: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub layout: TimeLayout,
}

impl Grid {
    pub fn new(
        n: usize,
        nx: usize,
        nt: usize,
        extent: f64,
        t_start: f64,
        t_end: f64,
        layout: TimeLayout,
    ) -> Result<Self> {
        if n != 2 && n != 3 {
            return Err(Error::InvalidInput(format!("dimension {n} not in {{2,3}}")));
        }
        if nx < 4 || nt < 4 {
            return Err(Error::InvalidInput(format!(
                "resolution {nx}x{nt} below the minimum of 4"
            )));
        }
        if !(extent > 0.0) || !(t_end > t_start) {
            return Err(Error::InvalidInput("empty domain".into()));
        }
        Ok(Grid {
            n,
            nx,
            nt,
            extent,
            t_start,
            t_end,
            layout,
        })
    }

    /// Unit torus in space, [0,1] in time, cell-centered.
    pub fn unit(n: usize, nx: usize, nt: usize) -> Result<Self> {
        Self::new(n, nx, nt, 1.0, 0.0, 1.0, TimeLayout::Cell)
    }

    pub fn h(&self) -> f64 {
        self.extent / self.nx as f64
    }

    pub fn dt(&self) -> f64 {
        match self.layout {
            TimeLayout::Cell => (self.t_end - self.t_start) / self.nt as f64,
            TimeLayout::Node => (self.t_end - self.t_start) / (self.nt - 1) as f64,
        }
    }

    /// Number of spatial points per time slice.
    pub fn ns(&self) -> usize {
        self.nx.pow(self.n as u32)
    }

    pub fn len(&self) -> usize {
        self.ns() * self.nt
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn volume(&self) -> f64 {
        self.extent.powi(self.n as i32)
    }

    pub fn t(&self, j: usize) -> f64 {
        match self.layout {
            TimeLayout::Cell => self.t_start + (j as f64 + 0.5) * self.dt(),
            TimeLayout::Node => self.t_start + j as f64 * self.dt(),
        }
    }

    pub fn time_weight(&self, j: usize) -> f64 {
        match self.layout {
            TimeLayout::Cell => self.dt(),
            TimeLayout::Node if j == 0 || j + 1 == self.nt => 0.5 * self.dt(),
            TimeLayout::Node => self.dt(),
        }
    }

    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.n as i32)
    }

    /// Quadrature weight of flat index `idx`.
    pub fn weight(&self, idx: usize) -> f64 {
        self.cell_volume() * self.time_weight(idx / self.ns())
    }

    /// Multi-index of spatial index s (axis 0 fastest).
    pub fn multi(&self, s: usize) -> [usize; 3] {
        let mut m = [0; 3];
        let mut r = s;
        for a in m.iter_mut().take(self.n) {
            *a = r % self.nx;
            r /= self.nx;
        }
        m
    }

    pub fn spatial(&self, m: &[usize; 3]) -> usize {
        let mut s = 0;
        for a in (0..self.n).rev() {
            s = s * self.nx + m[a];
        }
        s
    }

    /// Periodic neighbor of s shifted by `off` cells along `axis`.
    pub fn shift(&self, s: usize, axis: usize, off: isize) -> usize {
        let mut m = self.multi(s);
        let nx = self.nx as isize;
        m[axis] = ((m[axis] as isize + off).rem_euclid(nx)) as usize;
        self.spatial(&m)
    }

    pub fn x(&self, s: usize) -> Vec3 {
        let m = self.multi(s);
        let h = self.h();
        let mut x = [0.0; 3];
        for a in 0..self.n {
            x[a] = (m[a] as f64 + 0.5) * h;
        }
        x
    }

    pub fn idx(&self, j: usize, s: usize) -> usize {
        j * self.ns() + s
    }

    pub fn split(&self, idx: usize) -> (usize, usize) {
        (idx / self.ns(), idx % self.ns())
    }

    pub fn same_shape(&self, o: &Grid) -> bool {
        self.n == o.n && self.nx == o.nx && self.nt == o.nt
    }

    /// Sub-grid made of slices a..=b, same spacing.
    pub fn window(&self, a: usize, b: usize) -> Result<Grid> {
        if b >= self.nt || a > b {
            return Err(Error::InvalidInput(format!(
                "slice window {a}..={b} outside 0..{}",
                self.nt
            )));
        }
        let dt = self.dt();
        let (t0, t1) = match self.layout {
            TimeLayout::Cell => (
                self.t_start + a as f64 * dt,
                self.t_start + (b + 1) as f64 * dt,
            ),
            TimeLayout::Node => (self.t(a), self.t(b)),
        };
        Grid::new(self.n, self.nx, b - a + 1, self.extent, t0, t1, self.layout)
    }

    /// Same grid with the time axis shifted to start at `t0`.
    pub fn starting_at(&self, t0: f64) -> Grid {
        Grid {
            t_start: t0,
            t_end: t0 + (self.t_end - self.t_start),
            ..*self
        }
    }
}
