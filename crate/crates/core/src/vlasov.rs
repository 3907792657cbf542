//! Problem definitions, charge density and electric field of a factored
//! state, and the projected coefficient matrices used by the K/S/L steps.
//!
//! Sign convention: `RHS(f) = -v d_x f + E d_v f` with `rho = 1 - int f dv`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::dlr::SpaceScheme;
use crate::error::{KinlrError, Result};
use crate::grid::{self, Grid1D, PhaseGrid, Side};
use crate::linalg::{scaled_rows, weighted_gram};
use crate::lowrank::{FactoredSum, LowRankState, TruncationPolicy};

/// Equilibrium tail allowed at the velocity boundary.
pub const TAIL_TOL: f64 = 1e-12;

/// Largest mean of `rho` that is silently removed before the field solve.
pub const NEUTRALITY_TOL: f64 = 1e-3;

/// Unit-mass Maxwellian `(2 pi)^{-1/2} exp(-v^2 / 2)`.
pub fn maxwellian(v: f64) -> f64 {
    (-0.5 * v * v).exp() / (2.0 * PI).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProblemKind {
    /// `(1 + alpha cos(kx)) M(v)`.
    Landau,
    /// `(1 + alpha cos(kx)) (M(v - v0) + M(v + v0)) / 2`.
    TwoStream { v0: f64 },
    /// `(1 + alpha cos(kx)) ((1 - beta) M(v) + beta M((v - vb)/sb)/sb)`.
    BumpOnTail { fraction: f64, center: f64, width: f64 },
    /// `alpha cos(kx) M(v)` transported with `E = 0`.
    FreeStream,
}

impl ProblemKind {
    pub fn two_stream() -> Self {
        ProblemKind::TwoStream { v0: 2.4 }
    }

    pub fn bump_on_tail() -> Self {
        ProblemKind::BumpOnTail {
            fraction: 0.1,
            center: 4.5,
            width: 0.5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProblemKind::Landau => "landau",
            ProblemKind::TwoStream { .. } => "two_stream",
            ProblemKind::BumpOnTail { .. } => "bump_on_tail",
            ProblemKind::FreeStream => "free_stream",
        }
    }
}

/// Whether the field comes from the Poisson equation or is switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldMode {
    SelfConsistent,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    pub alpha: f64,
    pub k: f64,
    /// Domain length is `2 pi periods / k`.
    pub periods: usize,
}

impl ProblemSpec {
    pub fn landau(alpha: f64, k: f64) -> Self {
        Self {
            kind: ProblemKind::Landau,
            alpha,
            k,
            periods: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(KinlrError::Config(format!("alpha = {} must be >= 0", self.alpha)));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(KinlrError::Config(format!("k = {} must be > 0", self.k)));
        }
        if self.periods < 1 {
            return Err(KinlrError::Config("periods must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lx(&self) -> f64 {
        2.0 * PI * self.periods as f64 / self.k
    }

    pub fn field_mode(&self) -> FieldMode {
        match self.kind {
            ProblemKind::FreeStream => FieldMode::Zero,
            _ => FieldMode::SelfConsistent,
        }
    }

    /// Velocity cutoff at which the equilibrium tail is below [`TAIL_TOL`].
    pub fn default_vmax(&self) -> f64 {
        match self.kind {
            ProblemKind::Landau | ProblemKind::FreeStream => 8.0,
            ProblemKind::TwoStream { v0 } => (v0.abs() + 8.0).ceil(),
            ProblemKind::BumpOnTail { center, width, .. } => {
                (center.abs() + 8.0 * width).max(8.0).ceil() + 1.0
            }
        }
    }

    pub fn phase_grid(&self, nx: usize, nv: usize, vmax: f64) -> Result<PhaseGrid> {
        PhaseGrid::uniform(nx, self.lx(), nv, vmax)
    }

    /// Velocity profile `f_eq(v)`.
    pub fn equilibrium(&self, v: f64) -> f64 {
        match self.kind {
            ProblemKind::Landau | ProblemKind::FreeStream => maxwellian(v),
            ProblemKind::TwoStream { v0 } => 0.5 * (maxwellian(v - v0) + maxwellian(v + v0)),
            ProblemKind::BumpOnTail {
                fraction,
                center,
                width,
            } => (1.0 - fraction) * maxwellian(v) + fraction * maxwellian((v - center) / width) / width,
        }
    }

    /// Spatial profile of the initial condition.
    pub fn x_profile(&self, x: f64) -> f64 {
        match self.kind {
            ProblemKind::FreeStream => self.alpha * (self.k * x).cos(),
            _ => 1.0 + self.alpha * (self.k * x).cos(),
        }
    }

    /// Dense samples of the initial condition.
    pub fn initial_dense(&self, grids: &PhaseGrid) -> DMatrix<f64> {
        DMatrix::from_fn(grids.nx(), grids.nv(), |i, l| {
            self.x_profile(grids.x.node(i)) * self.equilibrium(grids.v.node(l))
        })
    }

    /// Domain length matches the problem and the equilibrium tail is negligible.
    pub fn check_grid(&self, grids: &PhaseGrid) -> Result<()> {
        self.validate()?;
        if (grids.x.length() - self.lx()).abs() > 1e-12 * self.lx() {
            return Err(KinlrError::Config(format!(
                "x domain length {} differs from 2 pi m / k = {}",
                grids.x.length(),
                self.lx()
            )));
        }
        let tail = self.equilibrium(grids.v.a()).max(self.equilibrium(grids.v.b()));
        if tail > TAIL_TOL {
            return Err(KinlrError::Config(format!(
                "vmax = {} too small: equilibrium tail {tail:e} exceeds {TAIL_TOL:e}",
                grids.v.b()
            )));
        }
        Ok(())
    }
}

/// The separable initial state. Fixed-rank policies pad it to the target
/// rank with zero singular values.
pub fn initial_condition(
    p: &ProblemSpec,
    grids: &PhaseGrid,
    policy: &TruncationPolicy,
) -> Result<LowRankState> {
    p.check_grid(grids)?;
    policy.validate()?;
    let x = DVector::from_fn(grids.nx(), |i, _| p.x_profile(grids.x.node(i)));
    let v = DVector::from_fn(grids.nv(), |l, _| p.equilibrium(grids.v.node(l)));
    let state = LowRankState::separable(&x, &v, *grids)?;
    match policy.mode {
        crate::lowrank::TruncationMode::FixedRank => pad_to_rank(&state, policy.r_target),
        _ => Ok(state),
    }
}

/// Extends a state to rank `r` by completing its bases with smooth
/// deterministic functions (Fourier modes in x, Gaussian-damped monomials
/// in v) and zero coefficients. The represented function is unchanged.
pub fn pad_to_rank(s: &LowRankState, r: usize) -> Result<LowRankState> {
    let g = *s.grids();
    let r0 = s.rank();
    if r <= r0 {
        return Ok(s.clone());
    }
    if r > g.nx().min(g.nv()) {
        return Err(KinlrError::Dimension(format!(
            "rank {r} exceeds grid size {}",
            g.nx().min(g.nv())
        )));
    }
    let extra = r - r0 + 2;
    let kappa = 2.0 * PI / g.x.length();
    let cx = DMatrix::from_fn(g.nx(), extra, |i, j| {
        let x = g.x.node(i);
        let m = (j / 2 + 1) as f64;
        if j % 2 == 0 {
            (m * kappa * x).cos()
        } else {
            (m * kappa * x).sin()
        }
    });
    let cv = DMatrix::from_fn(g.nv(), extra, |l, j| {
        let v = g.v.node(l);
        v.powi(j as i32 + 1) * (-0.25 * v * v).exp()
    });
    let complete = |base: &DMatrix<f64>, c: DMatrix<f64>, grid: &Grid1D| {
        let mut a = DMatrix::zeros(base.nrows(), base.ncols() + c.ncols());
        a.columns_mut(0, base.ncols()).copy_from(base);
        a.columns_mut(base.ncols(), c.ncols()).copy_from(&c);
        let (q, _) = crate::lowrank::orthonormalize(&a, grid)?;
        // columns of q beyond r0 are orthogonal to the old basis; fix the
        // leading block to the old basis exactly
        let mut out = q.columns(0, r).into_owned();
        out.columns_mut(0, base.ncols()).copy_from(base);
        Ok::<_, KinlrError>(out)
    };
    let u = complete(s.u(), cx, &g.x)?;
    let v = complete(s.v(), cv, &g.v)?;
    let mut core = DMatrix::zeros(r, r);
    core.view_mut((0, 0), (r0, r0)).copy_from(s.s());
    LowRankState::new(u, core, v, g)
}

/// `rho_k = 1 - (U S (dv V^T 1))_k`.
pub fn charge_density(s: &LowRankState) -> DVector<f64> {
    let dv = s.grids().v.delta();
    let vint = s.v().row_sum_tr() * dv;
    let mut rho = s.u() * (s.s() * vint);
    rho.neg_mut();
    rho.add_scalar_mut(1.0);
    rho
}

/// Charge density of an unorthonormalized factored sum.
pub fn charge_density_factored(fs: &FactoredSum, gv: &Grid1D) -> Result<DVector<f64>> {
    let t0 = fs.terms().first().ok_or(KinlrError::EmptyInput)?;
    let mut rho = DVector::from_element(t0.u.nrows(), 1.0);
    for t in fs.terms() {
        let vint = t.v.row_sum_tr() * gv.delta();
        rho -= &t.u * (&t.s * vint);
    }
    Ok(rho)
}

/// Charge density of a dense `nx x nv` matrix.
pub fn charge_density_dense(f: &DMatrix<f64>, gv: &Grid1D) -> DVector<f64> {
    let mut rho = f.column_sum() * gv.delta();
    rho.neg_mut();
    rho.add_scalar_mut(1.0);
    rho
}

/// Field of a charge density. The mean of `rho` (charge drift of a
/// non-conservative integrator) is removed when it is below
/// [`NEUTRALITY_TOL`]; larger means are rejected.
pub fn efield_from_rho(rho: &DVector<f64>, gx: &Grid1D) -> Result<DVector<f64>> {
    let mean = rho.mean();
    if mean.abs() > NEUTRALITY_TOL {
        return Err(KinlrError::Solvability {
            mean,
            tol: NEUTRALITY_TOL,
        });
    }
    let centered = rho.add_scalar(-mean);
    grid::solve_efield(centered.as_slice(), gx)
}

pub fn efield(s: &LowRankState) -> Result<DVector<f64>> {
    efield_from_rho(&charge_density(s), &s.grids().x)
}

/// Field of a state under the given field mode.
pub fn field_for(s: &LowRankState, mode: FieldMode) -> Result<DVector<f64>> {
    match mode {
        FieldMode::SelfConsistent => efield(s),
        FieldMode::Zero => Ok(DVector::zeros(s.grids().nx())),
    }
}

pub fn field_for_factored(fs: &FactoredSum, grids: &PhaseGrid, mode: FieldMode) -> Result<DVector<f64>> {
    match mode {
        FieldMode::SelfConsistent => efield_from_rho(&charge_density_factored(fs, &grids.v)?, &grids.x),
        FieldMode::Zero => Ok(DVector::zeros(grids.nx())),
    }
}

pub fn field_for_dense(f: &DMatrix<f64>, grids: &PhaseGrid, mode: FieldMode) -> Result<DVector<f64>> {
    match mode {
        FieldMode::SelfConsistent => efield_from_rho(&charge_density_dense(f, &grids.v), &grids.x),
        FieldMode::Zero => Ok(DVector::zeros(grids.nx())),
    }
}

pub(crate) fn positive_part(w: &[f64]) -> Vec<f64> {
    w.iter().map(|x| x.max(0.0)).collect()
}

pub(crate) fn negative_part(w: &[f64]) -> Vec<f64> {
    w.iter().map(|x| x.min(0.0)).collect()
}

/// Velocity-side brackets of a basis `V`:
/// `a1 = <V_i, v V_l>_v` and `a2 = <V_i, D_v V_l>_v` (centered `D_v`).
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityCoeffs {
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub split: Option<VelocitySplit>,
}

/// Upwind pieces: `a1_plus/minus` use `v+ / v-`, `a2_plus/minus` use the
/// backward / forward difference.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocitySplit {
    pub a1_plus: DMatrix<f64>,
    pub a1_minus: DMatrix<f64>,
    pub a2_plus: DMatrix<f64>,
    pub a2_minus: DMatrix<f64>,
}

impl VelocityCoeffs {
    pub fn new(v: &DMatrix<f64>, gv: &Grid1D, scheme: SpaceScheme) -> Result<Self> {
        let dv = gv.delta();
        let nodes = gv.nodes();
        let a1 = weighted_gram(v, Some(nodes.as_slice()), v, dv);
        let a2 = weighted_gram(v, None, &grid::diff_centered_cols(v, gv)?, dv);
        let split = match scheme {
            SpaceScheme::Centered => None,
            SpaceScheme::Upwind => Some(VelocitySplit {
                a1_plus: weighted_gram(v, Some(&positive_part(nodes.as_slice())), v, dv),
                a1_minus: weighted_gram(v, Some(&negative_part(nodes.as_slice())), v, dv),
                a2_plus: weighted_gram(v, None, &grid::diff_upwind_cols(v, gv, Side::Plus)?, dv),
                a2_minus: weighted_gram(v, None, &grid::diff_upwind_cols(v, gv, Side::Minus)?, dv),
            }),
        };
        Ok(Self { a1, a2, split })
    }
}

/// Space-side brackets of a basis `U`:
/// `c1 = <U_i, D_x U_k>_x` (centered) and `c2 = <U_i, E U_k>_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialCoeffs {
    pub c1: DMatrix<f64>,
    pub c2: DMatrix<f64>,
    pub split: Option<SpatialSplit>,
}

/// Upwind pieces: `c1_plus/minus` use the backward / forward difference,
/// `c2_plus/minus` use `E+ / E-`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialSplit {
    pub c1_plus: DMatrix<f64>,
    pub c1_minus: DMatrix<f64>,
    pub c2_plus: DMatrix<f64>,
    pub c2_minus: DMatrix<f64>,
}

impl SpatialCoeffs {
    pub fn new(u: &DMatrix<f64>, e: &DVector<f64>, gx: &Grid1D, scheme: SpaceScheme) -> Result<Self> {
        if e.len() != gx.n() {
            return Err(KinlrError::Dimension(format!(
                "field has length {}, grid has {} nodes",
                e.len(),
                gx.n()
            )));
        }
        let dx = gx.delta();
        let c1 = weighted_gram(u, None, &grid::diff_centered_cols(u, gx)?, dx);
        let c2 = weighted_gram(u, Some(e.as_slice()), u, dx);
        let split = match scheme {
            SpaceScheme::Centered => None,
            SpaceScheme::Upwind => Some(SpatialSplit {
                c1_plus: weighted_gram(u, None, &grid::diff_upwind_cols(u, gx, Side::Plus)?, dx),
                c1_minus: weighted_gram(u, None, &grid::diff_upwind_cols(u, gx, Side::Minus)?, dx),
                c2_plus: weighted_gram(u, Some(&positive_part(e.as_slice())), u, dx),
                c2_minus: weighted_gram(u, Some(&negative_part(e.as_slice())), u, dx),
            }),
        };
        Ok(Self { c1, c2, split })
    }
}

/// The four bracket families `A1, A2, C1, C2` for a pair of bases.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedCoeffs {
    pub velocity: VelocityCoeffs,
    pub spatial: SpatialCoeffs,
}

impl ProjectedCoeffs {
    pub fn from_bases(
        u: &DMatrix<f64>,
        v: &DMatrix<f64>,
        e: &DVector<f64>,
        grids: &PhaseGrid,
        scheme: SpaceScheme,
    ) -> Result<Self> {
        Ok(Self {
            velocity: VelocityCoeffs::new(v, &grids.v, scheme)?,
            spatial: SpatialCoeffs::new(u, e, &grids.x, scheme)?,
        })
    }

    pub fn a1(&self) -> &DMatrix<f64> {
        &self.velocity.a1
    }

    pub fn a2(&self) -> &DMatrix<f64> {
        &self.velocity.a2
    }

    pub fn c1(&self) -> &DMatrix<f64> {
        &self.spatial.c1
    }

    pub fn c2(&self) -> &DMatrix<f64> {
        &self.spatial.c2
    }
}

pub fn projected_coeffs(s: &LowRankState, e: &DVector<f64>, scheme: SpaceScheme) -> Result<ProjectedCoeffs> {
    ProjectedCoeffs::from_bases(s.u(), s.v(), e, s.grids(), scheme)
}

/// `diag(w) m`, the Hadamard product of `w` with every column.
pub(crate) fn hadamard(w: &[f64], m: &DMatrix<f64>) -> DMatrix<f64> {
    scaled_rows(m, w)
}
