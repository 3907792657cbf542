//! Step-and-truncate integrators: the full-grid scheme applied to the
//! factors term by term, followed by rounding.

use nalgebra::{DMatrix, DVector};

use crate::dlr::{check_cfl, SchemeConfig, SpaceScheme};
use crate::error::{KinlrError, Result};
use crate::grid::{self, PhaseGrid, Side};
use crate::lowrank::{round, FactoredSum, LowRankState, TruncationPolicy};
use crate::vlasov::{field_for, field_for_factored, hadamard, negative_part, positive_part, FieldMode};

/// Appends the factored `RHS(u s v^T)` of a single term.
fn push_rhs_term(
    out: &mut FactoredSum,
    u: &DMatrix<f64>,
    s: &DMatrix<f64>,
    v: &DMatrix<f64>,
    e: &DVector<f64>,
    grids: &PhaseGrid,
    scheme: SpaceScheme,
) -> Result<()> {
    let nodes = grids.v.nodes();
    let neg = -s;
    match scheme {
        SpaceScheme::Upwind => {
            let (vp, vm) = (positive_part(nodes.as_slice()), negative_part(nodes.as_slice()));
            let (ep, em) = (positive_part(e.as_slice()), negative_part(e.as_slice()));
            out.push(
                grid::diff_upwind_cols(u, &grids.x, Side::Plus)?,
                neg.clone(),
                hadamard(&vp, v),
            )?;
            out.push(
                grid::diff_upwind_cols(u, &grids.x, Side::Minus)?,
                neg,
                hadamard(&vm, v),
            )?;
            // E d_v f moves mass with speed -E
            out.push(hadamard(&ep, u), s.clone(), grid::diff_upwind_cols(v, &grids.v, Side::Minus)?)?;
            out.push(hadamard(&em, u), s.clone(), grid::diff_upwind_cols(v, &grids.v, Side::Plus)?)?;
        }
        SpaceScheme::Centered => {
            out.push(grid::diff_centered_cols(u, &grids.x)?, neg, hadamard(nodes.as_slice(), v))?;
            out.push(hadamard(e.as_slice(), u), s.clone(), grid::diff_centered_cols(v, &grids.v)?)?;
        }
    }
    Ok(())
}

/// Factored right-hand side of an arbitrary factored sum.
pub fn rhs_factored(
    fs: &FactoredSum,
    e: &DVector<f64>,
    grids: &PhaseGrid,
    scheme: SpaceScheme,
) -> Result<FactoredSum> {
    let mut out = FactoredSum::new();
    for t in fs.terms() {
        push_rhs_term(&mut out, &t.u, &t.s, &t.v, e, grids, scheme)?;
    }
    Ok(out)
}

/// `RHS(f) = -v d_x f + E d_v f` of a state as a factored sum: four groups
/// of width `r` for the upwind scheme, two for the centered one.
pub fn sat_rhs_terms(s: &LowRankState, e: &DVector<f64>, scheme: SpaceScheme) -> Result<FactoredSum> {
    if e.len() != s.grids().nx() {
        return Err(KinlrError::Dimension(format!(
            "field has length {}, grid has {} nodes",
            e.len(),
            s.grids().nx()
        )));
    }
    rhs_factored(&FactoredSum::from_state(s), e, s.grids(), scheme)
}

/// Forward Euler `f + dt RHS(f)` with the field frozen at `t^n`, then
/// rounding per `policy`.
pub fn step_sat_euler(
    s: &LowRankState,
    dt: f64,
    scheme: &SchemeConfig,
    policy: &TruncationPolicy,
) -> Result<LowRankState> {
    policy.validate()?;
    scheme.validate()?;
    let e = field_for(s, scheme.field)?;
    check_cfl(s.grids(), &e, dt, scheme.cfl_guard)?;
    let mut fs = FactoredSum::from_state(s);
    fs.extend_scaled(&sat_rhs_terms(s, &e, scheme.space_scheme)?, dt)?;
    round(&fs, policy, s.grids())
}

/// Butcher rows of the explicit midpoint rule and classical RK4.
fn tableau(stages: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    match stages {
        2 => Ok((vec![vec![], vec![0.5]], vec![0.0, 1.0])),
        4 => Ok((
            vec![vec![], vec![0.5], vec![0.0, 0.5], vec![0.0, 0.0, 1.0]],
            vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
        )),
        _ => Err(KinlrError::Config(format!("RK stages must be 2 or 4, got {stages}"))),
    }
}

/// Explicit Runge-Kutta on factored sums. The field is recomputed from
/// every stage value. With `truncate_stages` each stage value is rounded
/// with budget `theta / stages` before its right-hand side is formed.
pub fn step_sat_rk(
    s: &LowRankState,
    dt: f64,
    stages: usize,
    scheme: &SchemeConfig,
    policy: &TruncationPolicy,
    truncate_stages: bool,
) -> Result<LowRankState> {
    policy.validate()?;
    scheme.validate()?;
    let (a, b) = tableau(stages)?;
    let grids = *s.grids();
    let e0 = field_for(s, scheme.field)?;
    check_cfl(&grids, &e0, dt, scheme.cfl_guard)?;
    let stage_policy = TruncationPolicy {
        theta: policy.theta / stages as f64,
        ..*policy
    };
    let y0 = FactoredSum::from_state(s);
    let mut ks: Vec<FactoredSum> = Vec::with_capacity(stages);
    for (i, row) in a.iter().enumerate() {
        let mut y = y0.clone();
        for (kj, aij) in ks.iter().zip(row) {
            if *aij != 0.0 {
                y.extend_scaled(kj, aij * dt)?;
            }
        }
        let (y, e) = if i == 0 {
            (y, e0.clone())
        } else if truncate_stages {
            let st = round(&y, &stage_policy, &grids)?;
            let e = field_for(&st, scheme.field)?;
            (FactoredSum::from_state(&st), e)
        } else {
            let e = field_for_factored(&y, &grids, scheme.field)?;
            (y, e)
        };
        ks.push(rhs_factored(&y, &e, &grids, scheme.space_scheme)?);
    }
    let mut out = y0;
    for (k, bi) in ks.iter().zip(&b) {
        if *bi != 0.0 {
            out.extend_scaled(k, bi * dt)?;
        }
    }
    round(&out, policy, &grids)
}

/// Linear-interpolation weights `(stay, from_below, from_above)` for a
/// displacement `c` in units of the grid spacing, `|c| <= 1`.
pub(crate) fn sl_weights(c: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let stay = c.iter().map(|x| 1.0 - x.abs()).collect();
    let below = c.iter().map(|x| x.max(0.0)).collect();
    let above = c.iter().map(|x| (-x).max(0.0)).collect();
    (stay, below, above)
}

/// Semi-Lagrangian steps may move at most one cell.
fn check_displacement(c: &[f64], dt: f64) -> Result<()> {
    let cmax = c.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if cmax > 1.0 {
        return Err(KinlrError::StepSize { dt, bound: dt / cmax });
    }
    Ok(())
}

/// Split semi-Lagrangian step: `f(x - dt v, v)` by linear interpolation,
/// rounding, field update, then `f(x, v + dt E)`, rounding.
pub fn step_sl_split(
    s: &LowRankState,
    dt: f64,
    policy: &TruncationPolicy,
    field: FieldMode,
) -> Result<LowRankState> {
    policy.validate()?;
    let grids = *s.grids();
    let cx: Vec<f64> = grids.v.nodes().iter().map(|v| dt * v / grids.x.delta()).collect();
    if dt == 0.0 {
        return Ok(s.clone());
    }
    check_displacement(&cx, dt)?;
    let (stay, below, above) = sl_weights(&cx);
    let mut fs = FactoredSum::new();
    let (u, core, v) = (s.u(), s.s(), s.v());
    fs.push(u.clone(), core.clone(), hadamard(&stay, v))?;
    fs.push(grid::shift_cols(u, &grids.x, 1)?, core.clone(), hadamard(&below, v))?;
    fs.push(grid::shift_cols(u, &grids.x, -1)?, core.clone(), hadamard(&above, v))?;
    let half = round(&fs, policy, &grids)?;

    let e = field_for(&half, field)?;
    // characteristics of d_t f = E d_v f run with dV/dt = -E
    let cv: Vec<f64> = e.iter().map(|ek| dt * ek / grids.v.delta()).collect();
    check_displacement(&cv, dt)?;
    let (stay, from_above, from_below) = sl_weights(&cv);
    let mut fs = FactoredSum::new();
    let (u, core, v) = (half.u(), half.s(), half.v());
    fs.push(hadamard(&stay, u), core.clone(), v.clone())?;
    fs.push(hadamard(&from_above, u), core.clone(), grid::shift_cols(v, &grids.v, -1)?)?;
    fs.push(hadamard(&from_below, u), core.clone(), grid::shift_cols(v, &grids.v, 1)?)?;
    round(&fs, policy, &grids)
}
