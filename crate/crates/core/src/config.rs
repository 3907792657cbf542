//! Run configuration: flat `key = value` lines, `#` starts a comment.
//!
//! Unknown and repeated keys are errors. Omitted keys take the defaults of
//! [`RunConfig::default`], except `vmax` (problem dependent), `truncation`
//! (`fixed` for the fixed-rank integrators, `tolerance` otherwise) and
//! `r_max` (`min(nx, nv)`).

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dlr::{SchemeConfig, SpaceScheme, SubstepSolver};
use crate::error::{KinlrError, Result};
use crate::grid::PhaseGrid;
use crate::lowrank::{TruncationMode, TruncationPolicy};
use crate::reference::DenseMethod;
use crate::vlasov::{ProblemKind, ProblemSpec};

pub const KEYS: [&str; 21] = [
    "problem",
    "alpha",
    "k",
    "periods",
    "nx",
    "nv",
    "vmax",
    "dt",
    "tfinal",
    "integrator",
    "rank",
    "truncation",
    "theta",
    "r_max",
    "scheme",
    "substep",
    "snapshot_every",
    "out_csv",
    "out_snap_dir",
    "seed",
    "cfl_guard",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    PsLie,
    PsStrang,
    Bug,
    BugAug,
    SatEuler,
    SatRk2,
    SatRk4,
    Sl,
    Dense(DenseMethod),
}

impl Integrator {
    pub fn name(&self) -> &'static str {
        match self {
            Integrator::PsLie => "ps_lie",
            Integrator::PsStrang => "ps_strang",
            Integrator::Bug => "bug",
            Integrator::BugAug => "bug_aug",
            Integrator::SatEuler => "sat_euler",
            Integrator::SatRk2 => "sat_rk2",
            Integrator::SatRk4 => "sat_rk4",
            Integrator::Sl => "sl",
            Integrator::Dense(DenseMethod::Euler) => "dense_euler",
            Integrator::Dense(DenseMethod::Rk2) => "dense_rk2",
            Integrator::Dense(DenseMethod::Rk4) => "dense_rk4",
            Integrator::Dense(DenseMethod::SemiLagrangian) => "dense_sl",
        }
    }

    /// Integrators that keep the rank of the initial state.
    pub fn is_fixed_rank(&self) -> bool {
        matches!(self, Integrator::PsLie | Integrator::PsStrang | Integrator::Bug)
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, Integrator::Dense(_))
    }
}

impl FromStr for Integrator {
    type Err = KinlrError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ps_lie" => Integrator::PsLie,
            "ps_strang" => Integrator::PsStrang,
            "bug" => Integrator::Bug,
            "bug_aug" => Integrator::BugAug,
            "sat_euler" => Integrator::SatEuler,
            "sat_rk2" => Integrator::SatRk2,
            "sat_rk4" => Integrator::SatRk4,
            "sl" => Integrator::Sl,
            "dense_euler" => Integrator::Dense(DenseMethod::Euler),
            "dense_rk2" => Integrator::Dense(DenseMethod::Rk2),
            "dense_rk4" => Integrator::Dense(DenseMethod::Rk4),
            "dense_sl" => Integrator::Dense(DenseMethod::SemiLagrangian),
            _ => return Err(KinlrError::Config(format!("unknown integrator {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: ProblemKind,
    pub alpha: f64,
    pub k: f64,
    pub periods: usize,
    pub nx: usize,
    pub nv: usize,
    pub vmax: Option<f64>,
    pub dt: f64,
    pub tfinal: f64,
    pub integrator: Integrator,
    /// Rank with `truncation = fixed`. For `bug_aug` also the width of the
    /// initial bases, padded with zero singular values.
    pub rank: usize,
    pub truncation: Option<TruncationMode>,
    pub theta: f64,
    pub r_max: Option<usize>,
    pub scheme: SpaceScheme,
    pub substep: SubstepSolver,
    /// 0 writes only the first and last snapshot.
    pub snapshot_every: usize,
    pub out_csv: PathBuf,
    pub out_snap_dir: Option<PathBuf>,
    /// Accepted for forward compatibility; every integrator is deterministic.
    pub seed: u64,
    pub cfl_guard: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: ProblemKind::Landau,
            alpha: 0.01,
            k: 0.5,
            periods: 1,
            nx: 64,
            nv: 128,
            vmax: None,
            dt: 1e-2,
            tfinal: 1.0,
            integrator: Integrator::BugAug,
            rank: 5,
            truncation: None,
            theta: 1e-6,
            r_max: None,
            scheme: SpaceScheme::Upwind,
            substep: SubstepSolver::Rk4,
            snapshot_every: 0,
            out_csv: PathBuf::from("diagnostics.csv"),
            out_snap_dir: None,
            seed: 0,
            cfl_guard: 0.9,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| KinlrError::Config(format!("line {line}: bad value {value:?} for {key}")))
}

fn parse_problem(s: &str) -> Result<ProblemKind> {
    Ok(match s {
        "landau" => ProblemKind::Landau,
        "two_stream" => ProblemKind::two_stream(),
        "bump_on_tail" => ProblemKind::bump_on_tail(),
        "free_stream" => ProblemKind::FreeStream,
        _ => return Err(KinlrError::Config(format!("unknown problem {s:?}"))),
    })
}

fn parse_truncation(s: &str) -> Result<TruncationMode> {
    Ok(match s {
        "fixed" => TruncationMode::FixedRank,
        "tolerance" => TruncationMode::Tolerance,
        "conservative" => TruncationMode::Conservative,
        _ => return Err(KinlrError::Config(format!("unknown truncation {s:?}"))),
    })
}

fn parse_scheme(s: &str) -> Result<SpaceScheme> {
    match s {
        "upwind" => Ok(SpaceScheme::Upwind),
        "centered" => Ok(SpaceScheme::Centered),
        _ => Err(KinlrError::Config(format!("unknown scheme {s:?}"))),
    }
}

fn parse_substep(s: &str) -> Result<SubstepSolver> {
    match s {
        "euler" => Ok(SubstepSolver::Euler),
        "rk4" => Ok(SubstepSolver::Rk4),
        _ => Err(KinlrError::Config(format!("unknown substep solver {s:?}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| KinlrError::Config(format!("line {n}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            let Some(&known) = KEYS.iter().find(|k| **k == key) else {
                return Err(KinlrError::Config(format!("line {n}: unknown key {key:?}")));
            };
            if seen.contains(&known) {
                return Err(KinlrError::Config(format!("line {n}: duplicate key {key:?}")));
            }
            seen.push(known);
            if value.is_empty() {
                return Err(KinlrError::Config(format!("line {n}: empty value for {key}")));
            }
            match known {
                "problem" => cfg.problem = parse_problem(value)?,
                "alpha" => cfg.alpha = parse_value(key, value, n)?,
                "k" => cfg.k = parse_value(key, value, n)?,
                "periods" => cfg.periods = parse_value(key, value, n)?,
                "nx" => cfg.nx = parse_value(key, value, n)?,
                "nv" => cfg.nv = parse_value(key, value, n)?,
                "vmax" => cfg.vmax = Some(parse_value(key, value, n)?),
                "dt" => cfg.dt = parse_value(key, value, n)?,
                "tfinal" => cfg.tfinal = parse_value(key, value, n)?,
                "integrator" => cfg.integrator = value.parse()?,
                "rank" => cfg.rank = parse_value(key, value, n)?,
                "truncation" => cfg.truncation = Some(parse_truncation(value)?),
                "theta" => cfg.theta = parse_value(key, value, n)?,
                "r_max" => cfg.r_max = Some(parse_value(key, value, n)?),
                "scheme" => cfg.scheme = parse_scheme(value)?,
                "substep" => cfg.substep = parse_substep(value)?,
                "snapshot_every" => cfg.snapshot_every = parse_value(key, value, n)?,
                "out_csv" => cfg.out_csv = PathBuf::from(value),
                "out_snap_dir" => cfg.out_snap_dir = Some(PathBuf::from(value)),
                "seed" => cfg.seed = parse_value(key, value, n)?,
                "cfl_guard" => cfg.cfl_guard = parse_value(key, value, n)?,
                _ => unreachable!("key list and match arms disagree"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn problem_spec(&self) -> ProblemSpec {
        ProblemSpec {
            kind: self.problem,
            alpha: self.alpha,
            k: self.k,
            periods: self.periods,
        }
    }

    pub fn vmax(&self) -> f64 {
        self.vmax.unwrap_or_else(|| self.problem_spec().default_vmax())
    }

    pub fn grids(&self) -> Result<PhaseGrid> {
        self.problem_spec().phase_grid(self.nx, self.nv, self.vmax())
    }

    pub fn truncation_mode(&self) -> TruncationMode {
        self.truncation.unwrap_or(if self.integrator.is_fixed_rank() {
            TruncationMode::FixedRank
        } else {
            TruncationMode::Tolerance
        })
    }

    pub fn r_max(&self) -> usize {
        self.r_max.unwrap_or(self.nx.min(self.nv))
    }

    pub fn policy(&self) -> TruncationPolicy {
        match self.truncation_mode() {
            TruncationMode::FixedRank => TruncationPolicy::fixed_rank(self.rank),
            TruncationMode::Tolerance => TruncationPolicy::tolerance(self.theta, self.r_max()),
            TruncationMode::Conservative => TruncationPolicy::conservative(self.theta, self.r_max()),
        }
    }

    /// Scheme with the field mode of the problem.
    pub fn scheme_config(&self) -> SchemeConfig {
        SchemeConfig {
            space_scheme: self.scheme,
            substep_solver: self.substep,
            cfl_guard: self.cfl_guard,
            field: self.problem_spec().field_mode(),
        }
    }

    /// Number of steps; the last one is shortened when `tfinal / dt` is not
    /// an integer.
    pub fn nsteps(&self) -> usize {
        let q = self.tfinal / self.dt;
        let n = q.round();
        if (q - n).abs() <= 1e-9 * n.max(1.0) {
            n as usize
        } else {
            q.ceil() as usize
        }
    }

    /// Time after step `n`.
    pub fn time_at(&self, n: usize) -> f64 {
        if n >= self.nsteps() {
            self.tfinal
        } else {
            n as f64 * self.dt
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.problem_spec().validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(KinlrError::Config(format!("dt = {} must be > 0", self.dt)));
        }
        if !(self.tfinal >= 0.0 && self.tfinal.is_finite()) {
            return Err(KinlrError::Config(format!("tfinal = {} must be >= 0", self.tfinal)));
        }
        if let Some(v) = self.vmax {
            if !(v > 0.0 && v.is_finite()) {
                return Err(KinlrError::Config(format!("vmax = {v} must be > 0")));
            }
        }
        self.scheme_config().validate()?;
        let mode = self.truncation_mode();
        if self.integrator.is_fixed_rank() && mode != TruncationMode::FixedRank {
            return Err(KinlrError::Config(format!(
                "integrator {} keeps the rank fixed; it needs truncation = fixed",
                self.integrator.name()
            )));
        }
        if mode == TruncationMode::FixedRank && self.r_max.is_some() {
            return Err(KinlrError::Config("r_max has no effect with truncation = fixed; use rank".into()));
        }
        if !self.integrator.is_dense() {
            self.policy().validate()?;
        }
        self.problem_spec().check_grid(&self.grids()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_comments() {
        let cfg = RunConfig::parse("# a comment\n\nnx = 32 # trailing\nnv=48\n").unwrap();
        assert_eq!((cfg.nx, cfg.nv), (32, 48));
        assert_eq!(cfg.integrator, Integrator::BugAug);
        assert_eq!(cfg.policy(), TruncationPolicy::tolerance(1e-6, 32));
        assert_eq!(cfg.vmax(), 8.0);
    }

    #[test]
    fn every_key_parses() {
        let text = "problem = two_stream\nalpha = 1e-3\nk = 0.2\nperiods = 2\nnx = 16\nnv = 32\n\
                    vmax = 12\ndt = 0.01\ntfinal = 0.05\nintegrator = ps_strang\nrank = 4\n\
                    truncation = fixed\ntheta = 0\nscheme = centered\nsubstep = euler\n\
                    snapshot_every = 2\nout_csv = a.csv\nout_snap_dir = snaps\nseed = 7\ncfl_guard = 0.5\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.problem, ProblemKind::two_stream());
        assert_eq!(cfg.integrator, Integrator::PsStrang);
        assert_eq!(cfg.policy(), TruncationPolicy::fixed_rank(4));
        assert_eq!(cfg.scheme, SpaceScheme::Centered);
        assert_eq!(cfg.out_snap_dir, Some(PathBuf::from("snaps")));
        assert!((cfg.problem_spec().lx() - 20.0 * std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn integrator_names_round_trip() {
        for name in [
            "ps_lie", "ps_strang", "bug", "bug_aug", "sat_euler", "sat_rk2", "sat_rk4", "sl",
            "dense_euler", "dense_rk2", "dense_rk4", "dense_sl",
        ] {
            assert_eq!(name.parse::<Integrator>().unwrap().name(), name);
        }
    }

    #[test]
    fn unknown_and_duplicate_keys_fail() {
        assert!(matches!(RunConfig::parse("colour = red\n"), Err(KinlrError::Config(_))));
        assert!(matches!(RunConfig::parse("nx = 8\nnx = 8\n"), Err(KinlrError::Config(_))));
        assert!(RunConfig::parse("nx 8\n").is_err());
        assert!(RunConfig::parse("nx = eight\n").is_err());
    }

    #[test]
    fn inconsistent_combinations_fail() {
        assert!(RunConfig::parse("integrator = bug\ntruncation = conservative\n").is_err());
        assert!(RunConfig::parse("integrator = ps_lie\ntruncation = tolerance\n").is_err());
        assert!(RunConfig::parse("integrator = sat_euler\ntruncation = conservative\nr_max = 2\n").is_err());
        assert!(RunConfig::parse("integrator = sat_euler\ntruncation = fixed\nr_max = 2\n").is_err());
        assert!(RunConfig::parse("vmax = 3\n").is_err());
        assert!(RunConfig::parse("dt = 0\n").is_err());
    }

    #[test]
    fn step_count() {
        let mut cfg = RunConfig {
            dt: 0.1,
            tfinal: 0.3,
            ..RunConfig::default()
        };
        assert_eq!(cfg.nsteps(), 3);
        assert_eq!(cfg.time_at(3), 0.3);
        cfg.tfinal = 0.25;
        assert_eq!(cfg.nsteps(), 3);
        cfg.tfinal = 0.0;
        assert_eq!(cfg.nsteps(), 0);
    }
}
