//! Dynamical low-rank integrators built from K/S/L substeps: projector
//! splitting (Lie and Strang), fixed-rank BUG and the rank-adaptive
//! augmented BUG.
//!
//! Two upwind forms are available for the K- and L-steps. The
//! characteristic form advects with the eigendecomposition of the symmetric
//! coefficient matrix where the derivative acts on the evolving factor
//! (`A1` in the K-step, `C2` in the L-step). The projected form is the
//! Galerkin projection of the full upwind operator. Terms whose derivative
//! acts on the frozen basis, and the whole S-step, are always projections.
//!
//! BUG-type integrators use the characteristic form. Projector splitting
//! uses the projected form: its backward S-step has to cancel exactly what
//! the K- or L-step added inside the new basis, which needs one operator
//! behind all three substeps. Without that, the leftover lands in basis
//! directions picked by QR from `O(dt)` data whenever `S` is singular, and
//! the Strang composition drops to first order.

use nalgebra::{DMatrix, DVector};

use crate::error::{KinlrError, Result};
use crate::grid::{self, Grid1D, PhaseGrid, Side};
use crate::linalg::{qr_weighted, svd_sorted, sym_eigen};
use crate::lowrank::{
    conservative_truncate_with_report, truncate_with_report, LowRankState, TruncationMode,
    TruncationPolicy, TruncationReport,
};
use crate::vlasov::{
    field_for, hadamard, negative_part, positive_part, FieldMode, ProjectedCoeffs, SpatialCoeffs,
    VelocityCoeffs,
};

/// Field magnitude below which the velocity CFL bound is skipped.
const FIELD_CFL_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceScheme {
    /// First-order upwind, diagonalized in the characteristic frame inside
    /// projected systems.
    Upwind,
    Centered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubstepSolver {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeConfig {
    pub space_scheme: SpaceScheme,
    pub substep_solver: SubstepSolver,
    pub cfl_guard: f64,
    pub field: FieldMode,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            space_scheme: SpaceScheme::Upwind,
            substep_solver: SubstepSolver::Rk4,
            cfl_guard: 0.9,
            field: FieldMode::SelfConsistent,
        }
    }
}

impl SchemeConfig {
    pub fn new(space_scheme: SpaceScheme, substep_solver: SubstepSolver) -> Self {
        Self {
            space_scheme,
            substep_solver,
            ..Self::default()
        }
    }

    pub fn with_field(mut self, field: FieldMode) -> Self {
        self.field = field;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cfl_guard > 0.0 && self.cfl_guard <= 1.0) {
            return Err(KinlrError::Config(format!(
                "cfl_guard = {} must lie in (0, 1]",
                self.cfl_guard
            )));
        }
        Ok(())
    }
}

/// Largest admissible step `guard * min(dx / vmax, dv / max|E|)`.
pub fn cfl_bound(grids: &PhaseGrid, e: &DVector<f64>, guard: f64) -> f64 {
    let mut bound = grids.x.delta() / grids.v.max_abs_node();
    let emax = e.amax();
    if emax > FIELD_CFL_FLOOR {
        bound = bound.min(grids.v.delta() / emax);
    }
    guard * bound
}

pub fn check_cfl(grids: &PhaseGrid, e: &DVector<f64>, dt: f64, guard: f64) -> Result<()> {
    let bound = cfl_bound(grids, e, guard);
    if !(dt > 0.0) || dt > bound {
        return Err(KinlrError::StepSize { dt, bound });
    }
    Ok(())
}

/// Integrates `y' = f(y)` over one step of length `dt`.
pub(crate) fn integrate<F>(y: &DMatrix<f64>, dt: f64, solver: SubstepSolver, f: F) -> Result<DMatrix<f64>>
where
    F: Fn(&DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    match solver {
        SubstepSolver::Euler => Ok(y + f(y)? * dt),
        SubstepSolver::Rk4 => {
            let k1 = f(y)?;
            let k2 = f(&(y + &k1 * (0.5 * dt)))?;
            let k3 = f(&(y + &k2 * (0.5 * dt)))?;
            let k4 = f(&(y + &k3 * dt))?;
            Ok(y + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0))
        }
    }
}

/// `sum_j lambda_j D_{side_j}[Y T_j] T_j^T` for `coeff = T diag(lambda) T^T`,
/// with each side picked from the advection speed `speed_sign * lambda_j`.
fn characteristic_transport(
    y: &DMatrix<f64>,
    coeff: &DMatrix<f64>,
    g: &Grid1D,
    speed_sign: f64,
) -> Result<DMatrix<f64>> {
    let (t, lambda) = sym_eigen(coeff)?;
    let yt = y * &t;
    let mut d = DMatrix::zeros(yt.nrows(), yt.ncols());
    for (j, lam) in lambda.iter().enumerate() {
        let side = Side::upwind_for(speed_sign * lam);
        let col = yt.column(j);
        let mut out = d.column_mut(j);
        grid::upwind_into(col.as_slice(), out.as_mut_slice(), g.delta(), side);
        out *= *lam;
    }
    Ok(d * t.transpose())
}

/// Upwind treatment of the derivative acting on the evolving factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    Characteristic,
    Projected,
}

fn split_missing() -> KinlrError {
    KinlrError::Config("upwind scheme needs split coefficients".into())
}

/// K-step right-hand side `-D_x[K] A1^T + E * (K A2^T)`, characteristic
/// upwind form.
pub fn k_rhs(
    k: &DMatrix<f64>,
    coeffs: &VelocityCoeffs,
    e: &DVector<f64>,
    gx: &Grid1D,
    scheme: SpaceScheme,
) -> Result<DMatrix<f64>> {
    k_rhs_with(k, coeffs, e, gx, scheme, Transport::Characteristic)
}

pub fn k_rhs_with(
    k: &DMatrix<f64>,
    coeffs: &VelocityCoeffs,
    e: &DVector<f64>,
    gx: &Grid1D,
    scheme: SpaceScheme,
    transport: Transport,
) -> Result<DMatrix<f64>> {
    match scheme {
        SpaceScheme::Centered => {
            let dk = grid::diff_centered_cols(k, gx)?;
            Ok(hadamard(e.as_slice(), &(k * coeffs.a2.transpose())) - dk * coeffs.a1.transpose())
        }
        SpaceScheme::Upwind => {
            let split = coeffs.split.as_ref().ok_or_else(split_missing)?;
            let transport = match transport {
                Transport::Characteristic => characteristic_transport(k, &coeffs.a1, gx, 1.0)?,
                Transport::Projected => {
                    grid::diff_upwind_cols(k, gx, Side::Plus)? * split.a1_plus.transpose()
                        + grid::diff_upwind_cols(k, gx, Side::Minus)? * split.a1_minus.transpose()
                }
            };
            // speed of the E-term is -E: E > 0 takes the forward difference
            let field = hadamard(&positive_part(e.as_slice()), &(k * split.a2_minus.transpose()))
                + hadamard(&negative_part(e.as_slice()), &(k * split.a2_plus.transpose()));
            Ok(field - transport)
        }
    }
}

/// L-step right-hand side `-v * (L C1^T) + D_v[L] C2^T`, characteristic
/// upwind form.
pub fn l_rhs(
    l: &DMatrix<f64>,
    coeffs: &SpatialCoeffs,
    gv: &Grid1D,
    scheme: SpaceScheme,
) -> Result<DMatrix<f64>> {
    l_rhs_with(l, coeffs, gv, scheme, Transport::Characteristic)
}

pub fn l_rhs_with(
    l: &DMatrix<f64>,
    coeffs: &SpatialCoeffs,
    gv: &Grid1D,
    scheme: SpaceScheme,
    transport: Transport,
) -> Result<DMatrix<f64>> {
    let v = gv.nodes();
    match scheme {
        SpaceScheme::Centered => {
            let dl = grid::diff_centered_cols(l, gv)?;
            Ok(dl * coeffs.c2.transpose() - hadamard(v.as_slice(), &(l * coeffs.c1.transpose())))
        }
        SpaceScheme::Upwind => {
            let split = coeffs.split.as_ref().ok_or_else(split_missing)?;
            let stream = hadamard(&positive_part(v.as_slice()), &(l * split.c1_plus.transpose()))
                + hadamard(&negative_part(v.as_slice()), &(l * split.c1_minus.transpose()));
            let field = match transport {
                Transport::Characteristic => characteristic_transport(l, &coeffs.c2, gv, -1.0)?,
                // E+ pairs with the forward difference
                Transport::Projected => {
                    grid::diff_upwind_cols(l, gv, Side::Minus)? * split.c2_plus.transpose()
                        + grid::diff_upwind_cols(l, gv, Side::Plus)? * split.c2_minus.transpose()
                }
            };
            Ok(field - stream)
        }
    }
}

/// Projected right-hand side `<U_i V_j, RHS(U S V^T)>`. Centered:
/// `-C1 S A1^T + C2 S A2^T`; with split coefficients the projection of the
/// upwind operator.
pub fn s_rhs(s: &DMatrix<f64>, coeffs: &ProjectedCoeffs) -> Result<DMatrix<f64>> {
    let (vc, xc) = (&coeffs.velocity, &coeffs.spatial);
    match (&vc.split, &xc.split) {
        (Some(vs), Some(xs)) => Ok(&xs.c2_plus * s * vs.a2_minus.transpose()
            + &xs.c2_minus * s * vs.a2_plus.transpose()
            - &xs.c1_plus * s * vs.a1_plus.transpose()
            - &xs.c1_minus * s * vs.a1_minus.transpose()),
        (None, None) => Ok(&xc.c2 * s * vc.a2.transpose() - &xc.c1 * s * vc.a1.transpose()),
        _ => Err(KinlrError::Config(
            "coefficient families built with different schemes".into(),
        )),
    }
}

fn weighted_qr(a: &DMatrix<f64>, g: &Grid1D) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    crate::lowrank::orthonormalize(a, g)
}

/// K-step: evolves `K = U S` against the frozen `v`.
#[allow(clippy::too_many_arguments)]
fn k_step(
    u: &DMatrix<f64>,
    s: &DMatrix<f64>,
    v: &DMatrix<f64>,
    e: &DVector<f64>,
    dt: f64,
    grids: &PhaseGrid,
    scheme: &SchemeConfig,
    transport: Transport,
) -> Result<DMatrix<f64>> {
    let vc = VelocityCoeffs::new(v, &grids.v, scheme.space_scheme)?;
    integrate(&(u * s), dt, scheme.substep_solver, |k| {
        k_rhs_with(k, &vc, e, &grids.x, scheme.space_scheme, transport)
    })
}

/// L-step: evolves `L = V S^T` against the frozen `u`.
#[allow(clippy::too_many_arguments)]
fn l_step(
    u: &DMatrix<f64>,
    s: &DMatrix<f64>,
    v: &DMatrix<f64>,
    e: &DVector<f64>,
    dt: f64,
    grids: &PhaseGrid,
    scheme: &SchemeConfig,
    transport: Transport,
) -> Result<DMatrix<f64>> {
    let xc = SpatialCoeffs::new(u, e, &grids.x, scheme.space_scheme)?;
    integrate(&(v * s.transpose()), dt, scheme.substep_solver, |l| {
        l_rhs_with(l, &xc, &grids.v, scheme.space_scheme, transport)
    })
}

/// Galerkin S-step in the bases `(u, v)`; `sign = -1` runs it backward.
#[allow(clippy::too_many_arguments)]
fn s_step(
    u: &DMatrix<f64>,
    s: &DMatrix<f64>,
    v: &DMatrix<f64>,
    e: &DVector<f64>,
    dt: f64,
    sign: f64,
    grids: &PhaseGrid,
    scheme: &SchemeConfig,
) -> Result<DMatrix<f64>> {
    let coeffs = ProjectedCoeffs::from_bases(u, v, e, grids, scheme.space_scheme)?;
    integrate(s, dt, scheme.substep_solver, |y| Ok(s_rhs(y, &coeffs)? * sign))
}

/// Order of the three projector-splitting substeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitOrder {
    Ksl,
    Lsk,
}

/// One projector-splitting sweep with a given frozen field.
pub fn ps_sweep(
    s: &LowRankState,
    dt: f64,
    e: &DVector<f64>,
    order: SplitOrder,
    scheme: &SchemeConfig,
) -> Result<LowRankState> {
    let grids = *s.grids();
    let (u, s0, v) = (s.u(), s.s(), s.v());
    match order {
        SplitOrder::Ksl => {
            let k = k_step(u, s0, v, e, dt, &grids, scheme, Transport::Projected)?;
            let (u1, s1) = weighted_qr(&k, &grids.x)?;
            let s2 = s_step(&u1, &s1, v, e, dt, -1.0, &grids, scheme)?;
            let l = l_step(&u1, &s2, v, e, dt, &grids, scheme, Transport::Projected)?;
            let (v1, r) = weighted_qr(&l, &grids.v)?;
            LowRankState::new(u1, r.transpose(), v1, grids)
        }
        SplitOrder::Lsk => {
            let l = l_step(u, s0, v, e, dt, &grids, scheme, Transport::Projected)?;
            let (v1, r) = weighted_qr(&l, &grids.v)?;
            let s2 = s_step(u, &r.transpose(), &v1, e, dt, -1.0, &grids, scheme)?;
            let k = k_step(u, &s2, &v1, e, dt, &grids, scheme, Transport::Projected)?;
            let (u1, s3) = weighted_qr(&k, &grids.x)?;
            LowRankState::new(u1, s3, v1, grids)
        }
    }
}

fn field_checked(s: &LowRankState, dt: f64, scheme: &SchemeConfig) -> Result<DVector<f64>> {
    scheme.validate()?;
    let e = field_for(s, scheme.field)?;
    check_cfl(s.grids(), &e, dt, scheme.cfl_guard)?;
    Ok(e)
}

/// Lie projector splitting K, S (backward), L with the field frozen at `t^n`.
pub fn step_ps_lie(s: &LowRankState, dt: f64, scheme: &SchemeConfig) -> Result<LowRankState> {
    let e = field_checked(s, dt, scheme)?;
    ps_sweep(s, dt, &e, SplitOrder::Ksl, scheme)
}

/// Strang projector splitting: a KSL half step followed by an LSK half
/// step, both with the midpoint field. The midpoint field is predicted by a
/// Lie half step with the field at `t^n`.
pub fn step_ps_strang(s: &LowRankState, dt: f64, scheme: &SchemeConfig) -> Result<LowRankState> {
    let e0 = field_checked(s, dt, scheme)?;
    let h = 0.5 * dt;
    let e_half = match scheme.field {
        FieldMode::Zero => e0,
        FieldMode::SelfConsistent => {
            let predicted = ps_sweep(s, h, &e0, SplitOrder::Ksl, scheme)?;
            field_for(&predicted, scheme.field)?
        }
    };
    let first = ps_sweep(s, h, &e_half, SplitOrder::Ksl, scheme)?;
    ps_sweep(&first, h, &e_half, SplitOrder::Lsk, scheme)
}

/// K and L substeps from the same data, run concurrently.
fn parallel_kl(
    s: &LowRankState,
    e: &DVector<f64>,
    dt: f64,
    scheme: &SchemeConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let grids = *s.grids();
    let (k, l) = rayon::join(
        || k_step(s.u(), s.s(), s.v(), e, dt, &grids, scheme, Transport::Characteristic),
        || l_step(s.u(), s.s(), s.v(), e, dt, &grids, scheme, Transport::Characteristic),
    );
    Ok((k?, l?))
}

/// Fixed-rank BUG: new bases from independent K and L steps, then a
/// forward Galerkin S-step in those bases.
pub fn step_bug(s: &LowRankState, dt: f64, scheme: &SchemeConfig) -> Result<LowRankState> {
    let e = field_checked(s, dt, scheme)?;
    let grids = *s.grids();
    let (k, l) = parallel_kl(s, &e, dt, scheme)?;
    let (u1, _) = weighted_qr(&k, &grids.x)?;
    let (v1, _) = weighted_qr(&l, &grids.v)?;
    let m = u1.tr_mul(s.u()) * grids.x.delta();
    let n = v1.tr_mul(s.v()) * grids.v.delta();
    let s0 = &m * s.s() * n.transpose();
    let s1 = s_step(&u1, &s0, &v1, &e, dt, 1.0, &grids, scheme)?;
    LowRankState::new(u1, s1, v1, grids)
}

/// Singular values below this fraction of the largest do not span an
/// augmented direction.
pub const SPAN_RTOL: f64 = 1e-12;

/// Orthonormal basis of the numerical span of `[new, old]`. Deficient
/// directions are dropped rather than completed, since a completion would
/// depend on the factorization of the input.
fn augmented_basis(new: &DMatrix<f64>, old: &DMatrix<f64>, g: &Grid1D) -> Result<DMatrix<f64>> {
    let mut a = DMatrix::zeros(new.nrows(), new.ncols() + old.ncols());
    a.columns_mut(0, new.ncols()).copy_from(new);
    a.columns_mut(new.ncols(), old.ncols()).copy_from(old);
    let (q, r) = qr_weighted(&a, g.delta());
    let (p, sigma, _) = svd_sorted(&r)?;
    let keep = sigma.iter().filter(|&&x| x > SPAN_RTOL * sigma[0]).count().max(1);
    Ok(q * p.columns(0, keep))
}

/// Rank-adaptive augmented BUG. Returns the new state and the report of
/// the final truncation.
pub fn step_bug_augmented_with_report(
    s: &LowRankState,
    dt: f64,
    scheme: &SchemeConfig,
    policy: &TruncationPolicy,
) -> Result<(LowRankState, TruncationReport)> {
    policy.validate()?;
    let e = field_checked(s, dt, scheme)?;
    let grids = *s.grids();
    let (k, l) = parallel_kl(s, &e, dt, scheme)?;
    let u1 = augmented_basis(&k, s.u(), &grids.x)?;
    let v1 = augmented_basis(&l, s.v(), &grids.v)?;
    let m = u1.tr_mul(s.u()) * grids.x.delta();
    let n = v1.tr_mul(s.v()) * grids.v.delta();
    let s0 = &m * s.s() * n.transpose();
    let s1 = s_step(&u1, &s0, &v1, &e, dt, 1.0, &grids, scheme)?;
    let wide = if s1.is_square() {
        LowRankState::new(u1, s1, v1, grids)?
    } else {
        // the bases can differ in width; diagonalize the rectangular core
        let (p, sigma, q) = svd_sorted(&s1)?;
        let core = DMatrix::from_diagonal(&DVector::from_vec(sigma));
        LowRankState::new(u1 * p, core, v1 * q, grids)?
    };
    match policy.mode {
        TruncationMode::Conservative => conservative_truncate_with_report(&wide, policy),
        _ => truncate_with_report(&wide, policy),
    }
}

pub fn step_bug_augmented(
    s: &LowRankState,
    dt: f64,
    scheme: &SchemeConfig,
    policy: &TruncationPolicy,
) -> Result<LowRankState> {
    step_bug_augmented_with_report(s, dt, scheme, policy).map(|(s, _)| s)
}
