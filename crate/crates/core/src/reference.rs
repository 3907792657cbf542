//! Full-grid solvers with the same stencils as the factored ones, and SVD
//! rank profiling of dense densities.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::diagnostics::{observe_dense, DiagRecord};
use crate::dlr::{check_cfl, SchemeConfig, SpaceScheme};
use crate::error::{KinlrError, Result};
use crate::grid::{self, PhaseGrid, Side};
use crate::linalg::svd_sorted;
use crate::lowrank::DEFAULT_DENSE_CAP;
use crate::sat::sl_weights;
use crate::vlasov::{charge_density_dense, field_for_dense, FieldMode, ProblemSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenseMethod {
    Euler,
    Rk2,
    Rk4,
    SemiLagrangian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileNorm {
    Max,
    Frobenius,
}

fn check_shape(f: &DMatrix<f64>, grids: &PhaseGrid) -> Result<()> {
    if f.shape() != (grids.nx(), grids.nv()) {
        return Err(KinlrError::Dimension(format!(
            "matrix is {:?}, grid is {}x{}",
            f.shape(),
            grids.nx(),
            grids.nv()
        )));
    }
    Ok(())
}

fn check_cap(grids: &PhaseGrid) -> Result<()> {
    let entries = grids.nx() * grids.nv();
    if entries > DEFAULT_DENSE_CAP {
        return Err(KinlrError::Resource {
            entries,
            cap: DEFAULT_DENSE_CAP,
        });
    }
    Ok(())
}

/// Dense `-v d_x F + E d_v F`. Upwind: `-v+ D+_x - v- D-_x` and
/// `E+ D-_v + E- D+_v`, i.e. every line is differenced against its own
/// advection speed.
pub fn dense_rhs(f: &DMatrix<f64>, e: &DVector<f64>, grids: &PhaseGrid, scheme: SpaceScheme) -> Result<DMatrix<f64>> {
    check_shape(f, grids)?;
    if e.len() != grids.nx() {
        return Err(KinlrError::Dimension(format!(
            "field has length {}, grid has {} nodes",
            e.len(),
            grids.nx()
        )));
    }
    let (nx, nv) = (grids.nx(), grids.nv());
    let (hx, hv) = (grids.x.delta(), grids.v.delta());

    // x-transport, one velocity column at a time
    let mut out = DMatrix::zeros(nx, nv);
    out.as_mut_slice()
        .par_chunks_mut(nx)
        .zip(f.as_slice().par_chunks(nx))
        .enumerate()
        .for_each(|(l, (dst, src))| {
            let v = grids.v.node(l);
            match scheme {
                SpaceScheme::Upwind => grid::upwind_into(src, dst, hx, Side::upwind_for(v)),
                SpaceScheme::Centered => grid::centered_into(src, dst, hx),
            }
            dst.iter_mut().for_each(|d| *d *= -v);
        });

    // v-transport on the transpose, one x row at a time
    let ft = f.transpose();
    let mut acc = DMatrix::zeros(nv, nx);
    acc.as_mut_slice()
        .par_chunks_mut(nv)
        .zip(ft.as_slice().par_chunks(nv))
        .enumerate()
        .for_each(|(k, (dst, src))| {
            let ek = e[k];
            match scheme {
                SpaceScheme::Upwind => grid::upwind_into(src, dst, hv, Side::upwind_for(-ek)),
                SpaceScheme::Centered => grid::centered_into(src, dst, hv),
            }
            dst.iter_mut().for_each(|d| *d *= ek);
        });
    out += acc.transpose();
    Ok(out)
}

pub fn dense_euler_step(f: &DMatrix<f64>, dt: f64, grids: &PhaseGrid, scheme: &SchemeConfig) -> Result<DMatrix<f64>> {
    let e = field_for_dense(f, grids, scheme.field)?;
    check_cfl(grids, &e, dt, scheme.cfl_guard)?;
    Ok(f + dense_rhs(f, &e, grids, scheme.space_scheme)? * dt)
}

/// Explicit midpoint (`stages = 2`) or classical RK4 with the field
/// recomputed from every stage.
pub fn dense_rk_step(
    f: &DMatrix<f64>,
    dt: f64,
    stages: usize,
    grids: &PhaseGrid,
    scheme: &SchemeConfig,
) -> Result<DMatrix<f64>> {
    let e0 = field_for_dense(f, grids, scheme.field)?;
    check_cfl(grids, &e0, dt, scheme.cfl_guard)?;
    let rhs = |y: &DMatrix<f64>, e: Option<&DVector<f64>>| -> Result<DMatrix<f64>> {
        match e {
            Some(e) => dense_rhs(y, e, grids, scheme.space_scheme),
            None => dense_rhs(y, &field_for_dense(y, grids, scheme.field)?, grids, scheme.space_scheme),
        }
    };
    match stages {
        2 => {
            let k1 = rhs(f, Some(&e0))?;
            let k2 = rhs(&(f + k1 * (0.5 * dt)), None)?;
            Ok(f + k2 * dt)
        }
        4 => {
            let k1 = rhs(f, Some(&e0))?;
            let k2 = rhs(&(f + &k1 * (0.5 * dt)), None)?;
            let k3 = rhs(&(f + &k2 * (0.5 * dt)), None)?;
            let k4 = rhs(&(f + &k3 * dt), None)?;
            Ok(f + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0))
        }
        _ => Err(KinlrError::Config(format!("RK stages must be 2 or 4, got {stages}"))),
    }
}

/// Split semi-Lagrangian step with linear interpolation: `F(x - dt v, v)`,
/// field update, then `F(x, v + dt E)`.
pub fn dense_sl_step(f: &DMatrix<f64>, dt: f64, grids: &PhaseGrid, field: FieldMode) -> Result<DMatrix<f64>> {
    check_shape(f, grids)?;
    let (nx, nv) = (grids.nx(), grids.nv());
    let cx: Vec<f64> = grids.v.nodes().iter().map(|v| dt * v / grids.x.delta()).collect();
    let (stay, below, above) = sl_weights(&cx);
    if cx.iter().any(|c| c.abs() > 1.0) {
        return Err(KinlrError::StepSize {
            dt,
            bound: grids.x.delta() / grids.v.max_abs_node(),
        });
    }
    let half = DMatrix::from_fn(nx, nv, |k, l| {
        stay[l] * f[(k, l)] + below[l] * f[((k + nx - 1) % nx, l)] + above[l] * f[((k + 1) % nx, l)]
    });
    let e = field_for_dense(&half, grids, field)?;
    let cv: Vec<f64> = e.iter().map(|ek| dt * ek / grids.v.delta()).collect();
    if cv.iter().any(|c| c.abs() > 1.0) {
        return Err(KinlrError::StepSize {
            dt,
            bound: grids.v.delta() / e.amax(),
        });
    }
    let (stay, from_above, from_below) = sl_weights(&cv);
    Ok(DMatrix::from_fn(nx, nv, |k, l| {
        stay[k] * half[(k, l)]
            + from_above[k] * half[(k, (l + 1) % nv)]
            + from_below[k] * half[(k, (l + nv - 1) % nv)]
    }))
}

pub fn dense_step(
    f: &DMatrix<f64>,
    dt: f64,
    grids: &PhaseGrid,
    scheme: &SchemeConfig,
    method: DenseMethod,
) -> Result<DMatrix<f64>> {
    match method {
        DenseMethod::Euler => dense_euler_step(f, dt, grids, scheme),
        DenseMethod::Rk2 => dense_rk_step(f, dt, 2, grids, scheme),
        DenseMethod::Rk4 => dense_rk_step(f, dt, 4, grids, scheme),
        DenseMethod::SemiLagrangian => dense_sl_step(f, dt, grids, scheme.field),
    }
}

/// Snapshots and per-step diagnostics of a dense run.
#[derive(Debug, Clone)]
pub struct DenseRun {
    pub snapshots: Vec<(f64, DMatrix<f64>)>,
    pub records: Vec<DiagRecord>,
}

/// Runs `nsteps` dense steps from `f0`. Snapshots are kept at `t = 0`,
/// every `snapshot_every` steps (0 disables) and at the end. The field mode
/// follows the problem.
#[allow(clippy::too_many_arguments)]
pub fn run_dense(
    f0: &DMatrix<f64>,
    prob: &ProblemSpec,
    grids: &PhaseGrid,
    dt: f64,
    nsteps: usize,
    scheme: &SchemeConfig,
    method: DenseMethod,
    snapshot_every: usize,
) -> Result<DenseRun> {
    check_cap(grids)?;
    check_shape(f0, grids)?;
    let scheme = scheme.with_field(prob.field_mode());
    let mut f = f0.clone();
    let mut run = DenseRun {
        snapshots: vec![(0.0, f.clone())],
        records: vec![observe_dense(&f, grids, 0.0, scheme.field)?],
    };
    for n in 1..=nsteps {
        f = dense_step(&f, dt, grids, &scheme, method).map_err(|e| KinlrError::AtStep {
            step: n,
            source: Box::new(e),
        })?;
        let t = n as f64 * dt;
        run.records.push(observe_dense(&f, grids, t, scheme.field)?);
        if n == nsteps || (snapshot_every > 0 && n % snapshot_every == 0) {
            run.snapshots.push((t, f.clone()));
        }
    }
    Ok(run)
}

/// Weighted SVD of a dense density, as `(P, sigma, Q)` with
/// `F = P diag(sigma) Q^T`.
fn dense_svd(f: &DMatrix<f64>, grids: &PhaseGrid) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let w = grids.cell().sqrt();
    let (p, sigma, q) = svd_sorted(&(f * w))?;
    Ok((p / w, sigma, q))
}

/// Best rank-`r` approximations for `r = 1, 2, ...` in turn, stopping at
/// the first one accepted by `ok`. Returns that `r`, or the full rank.
fn first_accepted(
    f: &DMatrix<f64>,
    grids: &PhaseGrid,
    mut ok: impl FnMut(&DMatrix<f64>) -> Result<bool>,
) -> Result<usize> {
    let (p, sigma, q) = dense_svd(f, grids)?;
    let mut fr = DMatrix::zeros(f.nrows(), f.ncols());
    for (j, s) in sigma.iter().enumerate() {
        fr += p.column(j) * q.column(j).transpose() * *s;
        if ok(&fr)? {
            return Ok(j + 1);
        }
    }
    Ok(sigma.len().max(1))
}

/// Smallest rank whose best approximation has relative error at most `tol`
/// in the chosen norm. `tol = 0` gives the numerical rank.
pub fn rank_profile(f: &DMatrix<f64>, grids: &PhaseGrid, tol: f64, norm: ProfileNorm) -> Result<usize> {
    check_shape(f, grids)?;
    check_cap(grids)?;
    if !(tol >= 0.0) {
        return Err(KinlrError::Config(format!("tolerance {tol} must be >= 0")));
    }
    let fmax = f.amax();
    if fmax == 0.0 {
        return Ok(1);
    }
    if tol == 0.0 {
        let (_, sigma, _) = dense_svd(f, grids)?;
        let cut = sigma[0] * crate::diagnostics::NUMERICAL_RANK_RTOL;
        return Ok(sigma.iter().filter(|s| **s > cut).count().max(1));
    }
    match norm {
        ProfileNorm::Frobenius => {
            let (_, sigma, _) = dense_svd(f, grids)?;
            let total: f64 = sigma.iter().map(|s| s * s).sum();
            // rest[r] = sum_{j >= r} sigma_j^2
            let mut rest = vec![0.0; sigma.len() + 1];
            for j in (0..sigma.len()).rev() {
                rest[j] = rest[j + 1] + sigma[j] * sigma[j];
            }
            Ok((1..=sigma.len())
                .find(|&r| rest[r] <= tol * tol * total)
                .unwrap_or(sigma.len()))
        }
        ProfileNorm::Max => first_accepted(f, grids, |fr| Ok((f - fr).amax() <= tol * fmax)),
    }
}

/// Field of a dense density with any mean charge removed.
fn neutralized_field(f: &DMatrix<f64>, grids: &PhaseGrid) -> Result<DVector<f64>> {
    let rho = charge_density_dense(f, &grids.v);
    let centered = rho.add_scalar(-rho.mean());
    grid::solve_efield(centered.as_slice(), &grids.x)
}

/// Smallest rank whose best approximation reproduces both the field (max
/// norm, normalized) and the electric energy (relative) to within `tol`.
pub fn field_rank(f: &DMatrix<f64>, grids: &PhaseGrid, tol: f64) -> Result<usize> {
    check_shape(f, grids)?;
    let e = neutralized_field(f, grids)?;
    let (emax, energy) = (e.amax(), e.norm_squared());
    if emax <= f64::MIN_POSITIVE {
        return Ok(1);
    }
    first_accepted(f, grids, |fr| {
        let er = neutralized_field(fr, grids)?;
        let field_ok = (&er - &e).amax() <= tol * emax;
        let energy_ok = (er.norm_squared() - energy).abs() <= tol * energy;
        Ok(field_ok && energy_ok)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::{from_full, TruncationPolicy};
    use crate::sat::sat_rhs_terms;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grids() -> PhaseGrid {
        PhaseGrid::uniform(32, 4.0 * std::f64::consts::PI, 32, 8.0).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn constant_density_without_field_is_steady() {
        let g = grids();
        let f = DMatrix::from_element(32, 32, 0.3);
        for scheme in [SpaceScheme::Upwind, SpaceScheme::Centered] {
            assert!(dense_rhs(&f, &DVector::zeros(32), &g, scheme).unwrap().amax() < 1e-15);
        }
    }

    #[test]
    fn dense_rhs_matches_factored_rhs() {
        let g = grids();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DVector::from_fn(32, |_, _| rng.gen_range(-1.0..1.0));
        let v = DVector::from_fn(32, |_, _| rng.gen_range(-1.0..1.0));
        let f = &x * v.transpose();
        let s = from_full(&f, &g, &TruncationPolicy::fixed_rank(1)).unwrap();
        let e = DVector::from_fn(32, |_, _| rng.gen_range(-1.0..1.0));
        for scheme in [SpaceScheme::Upwind, SpaceScheme::Centered] {
            let want = sat_rhs_terms(&s, &e, scheme).unwrap().assemble().unwrap();
            let got = dense_rhs(&f, &e, &g, scheme).unwrap();
            assert!((got - want).amax() < 1e-12 * f.amax() / g.x.delta().min(g.v.delta()));
        }
    }

    #[test]
    fn upwind_flux_telescopes() {
        let g = grids();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random(&mut rng, 32, 32);
        let e = DVector::from_fn(32, |_, _| rng.gen_range(-1.0..1.0));
        assert!(dense_rhs(&f, &e, &g, SpaceScheme::Upwind).unwrap().sum().abs() < 1e-11);
    }

    #[test]
    fn free_stream_euler_conserves_mass() {
        let g = grids();
        let p = ProblemSpec {
            kind: crate::vlasov::ProblemKind::FreeStream,
            alpha: 0.1,
            k: 0.5,
            periods: 1,
        };
        let f0 = p.initial_dense(&g);
        let run = run_dense(&f0, &p, &g, 0.04, 100, &SchemeConfig::default(), DenseMethod::Euler, 0).unwrap();
        let m0 = run.records[0].mass;
        assert_eq!(run.records.len(), 101);
        assert_eq!(run.snapshots.len(), 2);
        for r in &run.records {
            assert!((r.mass - m0).abs() < 1e-11 * m0.abs().max(1.0));
        }
        let zero = run_dense(&f0, &p, &g, 0.04, 0, &SchemeConfig::default(), DenseMethod::Euler, 0).unwrap();
        assert_eq!(zero.snapshots.len(), 1);
        assert_eq!(zero.snapshots[0].1, f0);
    }

    #[test]
    fn rank_profile_cases() {
        let g = grids();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = DVector::from_fn(32, |_, _| rng.gen_range(-1.0..1.0));
        let v = DVector::from_fn(32, |_, _| rng.gen_range(-1.0..1.0));
        let outer = &x * v.transpose();
        for tol in [0.0, 1e-8, 1e-2] {
            for norm in [ProfileNorm::Max, ProfileNorm::Frobenius] {
                assert_eq!(rank_profile(&outer, &g, tol, norm).unwrap(), 1);
            }
        }
        let a = random(&mut rng, 32, 3) * random(&mut rng, 3, 32);
        let f = &a + random(&mut rng, 32, 32) * 1e-6;
        assert_eq!(rank_profile(&f, &g, 1e-2, ProfileNorm::Frobenius).unwrap(), 3);
        assert_eq!(rank_profile(&f, &g, 0.0, ProfileNorm::Frobenius).unwrap(), 32);
        assert_eq!(rank_profile(&DMatrix::zeros(32, 32), &g, 1e-2, ProfileNorm::Max).unwrap(), 1);
    }

    #[test]
    fn rank_profile_is_monotone_in_tol() {
        let g = grids();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = DMatrix::from_fn(32, 32, |i, j| {
            (-((i as f64 - 16.0).powi(2) + (j as f64 - 16.0).powi(2)) / 30.0).exp() + 1e-3 * rng.gen_range(-1.0..1.0)
        });
        for norm in [ProfileNorm::Max, ProfileNorm::Frobenius] {
            let mut last = usize::MAX;
            for tol in [1e-6, 1e-4, 1e-3, 1e-2, 1e-1, 0.5] {
                let r = rank_profile(&f, &g, tol, norm).unwrap();
                assert!(r <= last);
                last = r;
            }
        }
    }
}
