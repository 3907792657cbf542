//! Uniform periodic grids, the discrete inner product, difference and shift
//! stencils, and the periodic Poisson solve for the electric field.
//!
//! Nodes sit at `a + k * delta` for `k = 0..n`; the right endpoint is the
//! periodic image of the left one and is not stored. Every stencil wraps.

use nalgebra::{DMatrix, DVector};
use rustfft::{num_complex::Complex64, FftPlanner};

use crate::error::{KinlrError, Result};

/// Smallest admissible node count.
pub const MIN_NODES: usize = 4;

/// A uniform periodic grid on `[a, b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    n: usize,
    a: f64,
    b: f64,
}

impl Grid1D {
    pub fn new(n: usize, a: f64, b: f64) -> Result<Self> {
        if n < MIN_NODES {
            return Err(KinlrError::InvalidGrid(format!(
                "node count {n} below minimum {MIN_NODES}"
            )));
        }
        if !(a.is_finite() && b.is_finite() && b > a) {
            return Err(KinlrError::InvalidGrid(format!(
                "interval [{a}, {b}) is empty or not finite"
            )));
        }
        Ok(Self { n, a, b })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn delta(&self) -> f64 {
        (self.b - self.a) / self.n as f64
    }

    pub fn length(&self) -> f64 {
        self.b - self.a
    }

    pub fn node(&self, k: usize) -> f64 {
        self.a + k as f64 * self.delta()
    }

    pub fn nodes(&self) -> DVector<f64> {
        DVector::from_fn(self.n, |k, _| self.node(k))
    }

    /// Largest `|x_k|` over the nodes.
    pub fn max_abs_node(&self) -> f64 {
        (0..self.n).map(|k| self.node(k).abs()).fold(0.0, f64::max)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n {
            return Err(KinlrError::Dimension(format!(
                "grid vector has length {len}, grid has {} nodes",
                self.n
            )));
        }
        Ok(())
    }
}

/// Tensor product of the physical grid and the (symmetric) velocity grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseGrid {
    pub x: Grid1D,
    pub v: Grid1D,
}

impl PhaseGrid {
    pub fn new(x: Grid1D, v: Grid1D) -> Result<Self> {
        if (v.a() + v.b()).abs() > 1e-12 * v.b().abs().max(1.0) {
            return Err(KinlrError::InvalidGrid(format!(
                "velocity grid [{}, {}) is not symmetric about 0",
                v.a(),
                v.b()
            )));
        }
        Ok(Self { x, v })
    }

    /// Periodic `[0, lx) x [-vmax, vmax)` grid.
    pub fn uniform(nx: usize, lx: f64, nv: usize, vmax: f64) -> Result<Self> {
        Self::new(Grid1D::new(nx, 0.0, lx)?, Grid1D::new(nv, -vmax, vmax)?)
    }

    pub fn nx(&self) -> usize {
        self.x.n()
    }

    pub fn nv(&self) -> usize {
        self.v.n()
    }

    /// Area element `dx * dv`.
    pub fn cell(&self) -> f64 {
        self.x.delta() * self.v.delta()
    }
}

/// Which one-sided stencil to use.
///
/// `Plus` is the backward difference, upwind for a positive advection speed;
/// `Minus` is the forward difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Plus,
    Minus,
}

impl Side {
    /// The upwind side for transport with the given speed. Zero speed maps
    /// to `Plus`.
    pub fn upwind_for(speed: f64) -> Side {
        if speed < 0.0 {
            Side::Minus
        } else {
            Side::Plus
        }
    }
}

/// `delta * sum_k u_k w_k`.
pub fn inner(u: &[f64], w: &[f64], g: &Grid1D) -> Result<f64> {
    g.check_len(u.len())?;
    g.check_len(w.len())?;
    Ok(g.delta() * u.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
}

#[inline]
fn wrap(k: isize, n: usize) -> usize {
    k.rem_euclid(n as isize) as usize
}

pub(crate) fn upwind_into(u: &[f64], out: &mut [f64], h: f64, side: Side) {
    let n = u.len();
    match side {
        Side::Plus => {
            out[0] = (u[0] - u[n - 1]) / h;
            for k in 1..n {
                out[k] = (u[k] - u[k - 1]) / h;
            }
        }
        Side::Minus => {
            for k in 0..n - 1 {
                out[k] = (u[k + 1] - u[k]) / h;
            }
            out[n - 1] = (u[0] - u[n - 1]) / h;
        }
    }
}

pub(crate) fn centered_into(u: &[f64], out: &mut [f64], h: f64) {
    let n = u.len();
    let h2 = 2.0 * h;
    out[0] = (u[1] - u[n - 1]) / h2;
    for k in 1..n - 1 {
        out[k] = (u[k + 1] - u[k - 1]) / h2;
    }
    out[n - 1] = (u[0] - u[n - 2]) / h2;
}

pub(crate) fn shift_into(u: &[f64], out: &mut [f64], offset: isize) {
    let n = u.len();
    for (k, o) in out.iter_mut().enumerate() {
        *o = u[wrap(k as isize - offset, n)];
    }
}

/// One-sided periodic first difference.
pub fn diff_upwind(u: &[f64], g: &Grid1D, side: Side) -> Result<DVector<f64>> {
    g.check_len(u.len())?;
    let mut out = DVector::zeros(g.n());
    upwind_into(u, out.as_mut_slice(), g.delta(), side);
    Ok(out)
}

/// Second-order periodic centered difference.
pub fn diff_centered(u: &[f64], g: &Grid1D) -> Result<DVector<f64>> {
    g.check_len(u.len())?;
    let mut out = DVector::zeros(g.n());
    centered_into(u, out.as_mut_slice(), g.delta());
    Ok(out)
}

/// Periodic index shift: `shift(u, 1)[k] = u[k - 1]`.
pub fn shift(u: &[f64], g: &Grid1D, offset: isize) -> Result<DVector<f64>> {
    g.check_len(u.len())?;
    let mut out = DVector::zeros(g.n());
    shift_into(u, out.as_mut_slice(), offset);
    Ok(out)
}

fn map_columns(
    m: &DMatrix<f64>,
    g: &Grid1D,
    f: impl Fn(&[f64], &mut [f64]),
) -> Result<DMatrix<f64>> {
    g.check_len(m.nrows())?;
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, m.ncols());
    for (src, dst) in m
        .as_slice()
        .chunks_exact(n)
        .zip(out.as_mut_slice().chunks_exact_mut(n))
    {
        f(src, dst);
    }
    Ok(out)
}

/// [`diff_upwind`] applied to every column.
pub fn diff_upwind_cols(m: &DMatrix<f64>, g: &Grid1D, side: Side) -> Result<DMatrix<f64>> {
    let h = g.delta();
    map_columns(m, g, |s, d| upwind_into(s, d, h, side))
}

/// [`diff_centered`] applied to every column.
pub fn diff_centered_cols(m: &DMatrix<f64>, g: &Grid1D) -> Result<DMatrix<f64>> {
    let h = g.delta();
    map_columns(m, g, |s, d| centered_into(s, d, h))
}

/// [`shift`] applied to every column.
pub fn shift_cols(m: &DMatrix<f64>, g: &Grid1D, offset: isize) -> Result<DMatrix<f64>> {
    map_columns(m, g, |s, d| shift_into(s, d, offset))
}

/// Solves `-phi'' = rho` on the periodic grid and returns `E = -phi'` with
/// zero mean. The Nyquist mode (even `n`) is dropped.
pub fn solve_efield(rho: &[f64], g: &Grid1D) -> Result<DVector<f64>> {
    g.check_len(rho.len())?;
    let n = g.n();
    let mean = rho.iter().sum::<f64>() / n as f64;
    let scale = rho.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
    // absolute floor so that round-off around rho = 0 is accepted
    let tol = 1e-10 * scale + 1e-14;
    if mean.abs() > tol {
        return Err(KinlrError::Solvability { mean, tol });
    }

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex64> = rho.iter().map(|&r| Complex64::new(r, 0.0)).collect();
    fwd.process(&mut buf);

    let two_pi_over_l = 2.0 * std::f64::consts::PI / g.length();
    buf[0] = Complex64::new(0.0, 0.0);
    for (m, c) in buf.iter_mut().enumerate().skip(1) {
        if 2 * m == n {
            *c = Complex64::new(0.0, 0.0);
            continue;
        }
        let wave = if 2 * m < n { m as f64 } else { m as f64 - n as f64 };
        let kappa = wave * two_pi_over_l;
        // E_hat = rho_hat / (i kappa)
        *c = Complex64::new(c.im / kappa, -c.re / kappa);
    }
    inv.process(&mut buf);

    let norm = 1.0 / n as f64;
    let mut e = DVector::from_iterator(n, buf.iter().map(|c| c.re * norm));
    let mean_e = e.sum() / n as f64;
    e.add_scalar_mut(-mean_e);
    Ok(e)
}
