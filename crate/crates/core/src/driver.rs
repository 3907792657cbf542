//! Config-driven runs, snapshot comparison and rank scans.

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::config::{Integrator, RunConfig};
use crate::diagnostics::{observe_dense, observe_with, write_csv, DiagRecord};
use crate::dlr::{step_bug, step_bug_augmented, step_ps_lie, step_ps_strang, SchemeConfig};
use crate::error::{KinlrError, Result};
use crate::grid::PhaseGrid;
use crate::lowrank::{LowRankState, TruncationPolicy, DEFAULT_DENSE_CAP};
use crate::reference::{dense_step, field_rank, rank_profile, DenseMethod, ProfileNorm};
use crate::sat::{step_sat_euler, step_sat_rk, step_sl_split};
use crate::snapshot::{read_index, Snapshot, SnapshotWriter};
use crate::vlasov::initial_condition;

/// Snapshot times closer than this are the same time.
pub const TIME_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum SimState {
    LowRank(LowRankState),
    Dense(DMatrix<f64>),
}

impl SimState {
    pub fn assemble(&self) -> Result<DMatrix<f64>> {
        match self {
            SimState::LowRank(s) => s.to_full(),
            SimState::Dense(f) => Ok(f.clone()),
        }
    }
}

/// A configured simulation advanced one step at a time.
#[derive(Debug, Clone)]
pub struct Simulation {
    integrator: Integrator,
    grids: PhaseGrid,
    scheme: SchemeConfig,
    policy: TruncationPolicy,
    state: SimState,
}

impl Simulation {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Self::with_integrator(cfg, cfg.integrator)
    }

    fn with_integrator(cfg: &RunConfig, integrator: Integrator) -> Result<Self> {
        let prob = cfg.problem_spec();
        let grids = cfg.grids()?;
        let policy = cfg.policy();
        let state = if integrator.is_dense() {
            let entries = grids.nx() * grids.nv();
            if entries > DEFAULT_DENSE_CAP {
                return Err(KinlrError::Resource {
                    entries,
                    cap: DEFAULT_DENSE_CAP,
                });
            }
            prob.check_grid(&grids)?;
            SimState::Dense(prob.initial_dense(&grids))
        } else if integrator == Integrator::BugAug {
            // a rank-1 equilibrium has a vanishing projected vector field, so
            // the basis is widened with zero singular values for the first step
            let padded = initial_condition(&prob, &grids, &TruncationPolicy::fixed_rank(cfg.rank))?;
            SimState::LowRank(padded)
        } else {
            SimState::LowRank(initial_condition(&prob, &grids, &policy)?)
        };
        Ok(Self {
            integrator,
            grids,
            scheme: cfg.scheme_config(),
            policy,
            state,
        })
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn grids(&self) -> &PhaseGrid {
        &self.grids
    }

    pub fn advance(&mut self, dt: f64) -> Result<()> {
        let (scheme, policy) = (&self.scheme, &self.policy);
        self.state = match (&self.state, self.integrator) {
            (SimState::Dense(f), Integrator::Dense(method)) => {
                SimState::Dense(dense_step(f, dt, &self.grids, scheme, method)?)
            }
            (SimState::LowRank(s), integrator) => SimState::LowRank(match integrator {
                Integrator::PsLie => step_ps_lie(s, dt, scheme)?,
                Integrator::PsStrang => step_ps_strang(s, dt, scheme)?,
                Integrator::Bug => step_bug(s, dt, scheme)?,
                Integrator::BugAug => step_bug_augmented(s, dt, scheme, policy)?,
                Integrator::SatEuler => step_sat_euler(s, dt, scheme, policy)?,
                Integrator::SatRk2 => step_sat_rk(s, dt, 2, scheme, policy, false)?,
                Integrator::SatRk4 => step_sat_rk(s, dt, 4, scheme, policy, false)?,
                Integrator::Sl => step_sl_split(s, dt, policy, scheme.field)?,
                Integrator::Dense(_) => unreachable!("dense integrators hold dense states"),
            }),
            (SimState::Dense(_), _) => unreachable!("low-rank integrators hold low-rank states"),
        };
        Ok(())
    }

    pub fn observe(&self, t: f64) -> Result<DiagRecord> {
        match &self.state {
            SimState::LowRank(s) => observe_with(s, t, self.scheme.field),
            SimState::Dense(f) => observe_dense(f, &self.grids, t, self.scheme.field),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<DiagRecord>,
    pub state: SimState,
}

/// Runs a configuration in memory. `on_snapshot(step, t, state)` is called
/// at `t = 0`, every `snapshot_every` steps and after the last step.
pub fn simulate(
    cfg: &RunConfig,
    mut on_snapshot: impl FnMut(usize, f64, &SimState) -> Result<()>,
) -> Result<RunOutput> {
    let mut sim = Simulation::new(cfg)?;
    let nsteps = cfg.nsteps();
    let mut records = vec![sim.observe(0.0)?];
    on_snapshot(0, 0.0, sim.state())?;
    let mut t = 0.0;
    for n in 1..=nsteps {
        let t_next = cfg.time_at(n);
        let at_step = |e| KinlrError::AtStep {
            step: n,
            source: Box::new(e),
        };
        sim.advance(t_next - t).map_err(at_step)?;
        t = t_next;
        records.push(sim.observe(t).map_err(at_step)?);
        if n == nsteps || (cfg.snapshot_every > 0 && n % cfg.snapshot_every == 0) {
            on_snapshot(n, t, sim.state())?;
        }
    }
    Ok(RunOutput {
        records,
        state: sim.state,
    })
}

/// Runs a configuration and writes its diagnostics CSV and, when
/// `out_snap_dir` is set, its snapshots.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut writer = match &cfg.out_snap_dir {
        Some(dir) => Some(SnapshotWriter::create(dir)?),
        None => None,
    };
    let out = simulate(cfg, |step, t, state| match (&mut writer, state) {
        (None, _) => Ok(()),
        (Some(w), SimState::LowRank(s)) => w.write_state(step, t, s),
        (Some(w), SimState::Dense(f)) => w.write_dense(step, t, f),
    })?;
    write_csv(&out.records, &cfg.out_csv)?;
    Ok(out)
}

fn norm_of(m: &DMatrix<f64>, norm: ProfileNorm) -> f64 {
    match norm {
        ProfileNorm::Frobenius => m.norm(),
        ProfileNorm::Max => m.amax(),
    }
}

/// `|A - B| / |B|`, or `|A - B|` when `B = 0`.
pub fn relative_difference(a: &DMatrix<f64>, b: &DMatrix<f64>, norm: ProfileNorm) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(KinlrError::Dimension(format!(
            "snapshot shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let diff = norm_of(&(a - b), norm);
    let base = norm_of(b, norm);
    Ok(if base > 0.0 { diff / base } else { diff })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub t: f64,
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub norm: ProfileNorm,
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    pub fn max(&self) -> f64 {
        self.rows.iter().fold(0.0, |m, r| m.max(r.diff))
    }

    pub fn last(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.diff)
    }
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.norm {
            ProfileNorm::Frobenius => "fro",
            ProfileNorm::Max => "max",
        };
        writeln!(f, "t,rel_diff_{name}")?;
        for r in &self.rows {
            writeln!(f, "{:.16e},{:.6e}", r.t, r.diff)?;
        }
        writeln!(f, "max_rel_diff {:.6e}", self.max())?;
        write!(f, "final_rel_diff {:.6e}", self.last())
    }
}

/// `(t, file)` pairs of a snapshot directory, or a lone snapshot file at `t = 0`.
fn snapshot_list(path: &Path) -> Result<Vec<(f64, std::path::PathBuf)>> {
    if path.is_dir() {
        Ok(read_index(path)?
            .into_iter()
            .map(|e| (e.t, path.join(e.file)))
            .collect())
    } else {
        Ok(vec![(0.0, path.to_path_buf())])
    }
}

/// Relative differences of two runs at every snapshot time; the second
/// run is the reference.
pub fn compare(a: &Path, b: &Path, norm: ProfileNorm) -> Result<CompareReport> {
    let (la, lb) = (snapshot_list(a)?, snapshot_list(b)?);
    if la.len() != lb.len() {
        return Err(KinlrError::Dimension(format!(
            "{} has {} snapshots, {} has {}",
            a.display(),
            la.len(),
            b.display(),
            lb.len()
        )));
    }
    let mut rows = Vec::with_capacity(la.len());
    for ((ta, fa), (tb, fb)) in la.iter().zip(&lb) {
        if (ta - tb).abs() > TIME_TOL {
            return Err(KinlrError::Dimension(format!("snapshot times {ta} and {tb} differ")));
        }
        let xa = Snapshot::read(fa)?.assemble();
        let xb = Snapshot::read(fb)?.assemble();
        rows.push(CompareRow {
            t: *ta,
            diff: relative_difference(&xa, &xb, norm)?,
        });
    }
    Ok(CompareReport { norm, rows })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankRow {
    pub t: f64,
    pub rank_f: usize,
    pub rank_e: usize,
}

/// Dense method standing in for a configured integrator.
pub fn dense_counterpart(integrator: Integrator) -> DenseMethod {
    match integrator {
        Integrator::Dense(m) => m,
        Integrator::SatEuler => DenseMethod::Euler,
        Integrator::SatRk2 => DenseMethod::Rk2,
        Integrator::Sl => DenseMethod::SemiLagrangian,
        _ => DenseMethod::Rk4,
    }
}

/// Dense run of a configuration with [`rank_profile`] and [`field_rank`]
/// evaluated at every snapshot (every step when `snapshot_every = 0`).
pub fn rankscan(cfg: &RunConfig, tol: f64, norm: ProfileNorm) -> Result<Vec<RankRow>> {
    let dense = RunConfig {
        integrator: Integrator::Dense(dense_counterpart(cfg.integrator)),
        truncation: None,
        r_max: None,
        snapshot_every: cfg.snapshot_every.max(1),
        ..cfg.clone()
    };
    let grids = dense.grids()?;
    let mut rows = Vec::new();
    simulate(&dense, |_, t, state| {
        let f = state.assemble()?;
        rows.push(RankRow {
            t,
            rank_f: rank_profile(&f, &grids, tol, norm)?,
            rank_e: field_rank(&f, &grids, tol)?,
        });
        Ok(())
    })?;
    Ok(rows)
}

pub fn write_rankscan_to<W: Write>(rows: &[RankRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "rank_f", "rank_E_energy"])?;
    for r in rows {
        out.write_record([format!("{:.16e}", r.t), r.rank_f.to_string(), r.rank_e.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_rankscan(rows: &[RankRow], path: impl AsRef<Path>) -> Result<()> {
    write_rankscan_to(rows, File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::read_csv;

    fn small(integrator: &str) -> RunConfig {
        RunConfig::parse(&format!(
            "nx = 16\nnv = 32\ndt = 0.01\ntfinal = 0.05\nintegrator = {integrator}\nrank = 3\n"
        ))
        .unwrap()
    }

    #[test]
    fn bug_aug_leaves_the_rank_one_equilibrium() {
        let text = "alpha = 1e-3\nnx = 32\nnv = 64\ndt = 0.01\ntfinal = 0.5\nintegrator = bug_aug\ntheta = 1e-6\n";
        let ranks = |extra: &str| -> Vec<usize> {
            let cfg = RunConfig::parse(&format!("{text}{extra}")).unwrap();
            simulate(&cfg, |_, _, _| Ok(())).unwrap().records.iter().map(|r| r.rank).collect()
        };
        // from a bare rank-1 state the K and L steps see no transport
        assert!(ranks("rank = 1\n").iter().all(|&r| r == 1));
        let padded = ranks("rank = 2\n");
        assert_eq!(padded[0], 2);
        assert!(padded.iter().skip(1).all(|&r| r >= 2));
    }

    #[test]
    fn every_integrator_runs() {
        for name in [
            "ps_lie", "ps_strang", "bug", "bug_aug", "sat_euler", "sat_rk2", "sat_rk4", "sl",
            "dense_euler", "dense_rk2", "dense_rk4", "dense_sl",
        ] {
            let out = simulate(&small(name), |_, _, _| Ok(())).unwrap();
            assert_eq!(out.records.len(), 6, "{name}");
            let last = out.records.last().unwrap();
            assert!((last.t - 0.05).abs() < 1e-15, "{name}");
            let m0 = out.records[0].mass;
            assert!((last.mass - m0).abs() < 1e-5 * m0, "{name}: {} vs {m0}", last.mass);
        }
    }

    #[test]
    fn snapshot_cadence_and_short_last_step() {
        let cfg = RunConfig {
            tfinal: 0.045,
            snapshot_every: 2,
            ..small("sat_euler")
        };
        let mut seen = Vec::new();
        let out = simulate(&cfg, |n, t, _| {
            seen.push((n, t));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 2, 4, 5]);
        assert_eq!(seen[3].1, 0.045);
        assert_eq!(out.records.len(), 6);
    }

    #[test]
    fn cfl_failure_reports_step() {
        let cfg = RunConfig {
            dt: 1.0,
            tfinal: 2.0,
            ..small("sat_euler")
        };
        match simulate(&cfg, |_, _, _| Ok(())) {
            Err(KinlrError::AtStep { step, source }) => {
                assert_eq!(step, 1);
                assert!(matches!(*source, KinlrError::StepSize { .. }));
            }
            other => panic!("expected a step error, got {other:?}"),
        }
    }

    #[test]
    fn run_writes_outputs_and_compares() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |name: &str, integrator: &str| RunConfig {
            out_csv: dir.path().join(format!("{name}.csv")),
            out_snap_dir: Some(dir.path().join(name)),
            snapshot_every: 2,
            theta: 0.0,
            ..small(integrator)
        };
        run(&mk("lr", "sat_euler")).unwrap();
        run(&mk("dense", "dense_euler")).unwrap();
        let recs = read_csv(dir.path().join("lr.csv")).unwrap();
        assert_eq!(recs.len(), 6);
        let same = compare(&dir.path().join("lr"), &dir.path().join("lr"), ProfileNorm::Max).unwrap();
        assert_eq!(same.max(), 0.0);
        let rep = compare(&dir.path().join("lr"), &dir.path().join("dense"), ProfileNorm::Frobenius).unwrap();
        assert_eq!(rep.rows.len(), 4);
        assert!(rep.last() <= 1e-10, "{rep}");
        assert!(rep.to_string().contains("final_rel_diff"));
    }

    #[test]
    fn compare_rejects_mismatched_times() {
        let dir = tempfile::tempdir().unwrap();
        let f = DMatrix::from_element(2, 2, 1.0);
        let mut a = SnapshotWriter::create(dir.path().join("a")).unwrap();
        let mut b = SnapshotWriter::create(dir.path().join("b")).unwrap();
        a.write_dense(0, 0.0, &f).unwrap();
        b.write_dense(0, 1e-9, &f).unwrap();
        assert!(compare(&dir.path().join("a"), &dir.path().join("b"), ProfileNorm::Max).is_err());
    }

    #[test]
    fn free_stream_rankscan_starts_at_rank_one() {
        let cfg = RunConfig::parse("problem = free_stream\nnx = 16\nnv = 64\ndt = 0.05\ntfinal = 0.2\nintegrator = dense_sl\n").unwrap();
        let rows = rankscan(&cfg, 1e-2, ProfileNorm::Max).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].rank_f, 1);
        assert_eq!(rows[0].rank_e, 1);
        let mut buf = Vec::new();
        write_rankscan_to(&rows, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,rank_f,rank_E_energy\n"));
    }
}
