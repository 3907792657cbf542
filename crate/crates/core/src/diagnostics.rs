//! Per-step observables and their CSV form.
//!
//! Columns: `t,mass,momentum,e_kin,e_ele,e_tot,rank,sv0,...,sv{K-1}` where
//! `K` is the largest rank in the file; shorter rows leave the trailing
//! singular value fields empty. Numbers are written with 17 significant
//! digits, which reproduces every finite double exactly.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{KinlrError, Result};
use crate::grid::{Grid1D, PhaseGrid};
use crate::linalg::svd_sorted;
use crate::lowrank::{LowRankState, Moments};
use crate::vlasov::{field_for, field_for_dense, FieldMode};

const FIXED_COLUMNS: [&str; 7] = ["t", "mass", "momentum", "e_kin", "e_ele", "e_tot", "rank"];

/// Relative cutoff defining the numerical rank of a dense snapshot.
pub const NUMERICAL_RANK_RTOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagRecord {
    pub t: f64,
    pub mass: f64,
    pub momentum: f64,
    pub e_kin: f64,
    pub e_ele: f64,
    pub e_tot: f64,
    pub rank: usize,
    /// Descending singular values.
    pub sv: Vec<f64>,
}

impl DiagRecord {
    fn from_parts(t: f64, m: Moments, e: &DVector<f64>, gx: &Grid1D, sv: Vec<f64>) -> Self {
        let e_ele = electric_energy(e, gx);
        Self {
            t,
            mass: m.mass,
            momentum: m.momentum,
            e_kin: m.kinetic,
            e_ele,
            e_tot: m.kinetic + e_ele,
            rank: sv.len(),
            sv,
        }
    }
}

/// `dx / 2 * sum E^2`.
pub fn electric_energy(e: &DVector<f64>, gx: &Grid1D) -> f64 {
    0.5 * gx.delta() * e.norm_squared()
}

/// Diagnostics of a state with the self-consistent field.
pub fn observe(s: &LowRankState, t: f64) -> Result<DiagRecord> {
    observe_with(s, t, FieldMode::SelfConsistent)
}

pub fn observe_with(s: &LowRankState, t: f64, field: FieldMode) -> Result<DiagRecord> {
    let e = field_for(s, field)?;
    Ok(DiagRecord::from_parts(
        t,
        s.moments(),
        &e,
        &s.grids().x,
        s.singular_values(),
    ))
}

/// Weighted singular values of a dense density above the numerical rank
/// cutoff (at least one).
pub fn dense_singular_values(f: &DMatrix<f64>, grids: &PhaseGrid) -> Result<Vec<f64>> {
    let (_, sigma, _) = svd_sorted(&(f * grids.cell().sqrt()))?;
    let cut = sigma.first().copied().unwrap_or(0.0) * NUMERICAL_RANK_RTOL;
    let keep = sigma.iter().take_while(|&&x| x > cut).count().max(1);
    Ok(sigma.into_iter().take(keep).collect())
}

/// Diagnostics of a dense density; rank is the numerical rank.
pub fn observe_dense(f: &DMatrix<f64>, grids: &PhaseGrid, t: f64, field: FieldMode) -> Result<DiagRecord> {
    let e = field_for_dense(f, grids, field)?;
    Ok(DiagRecord::from_parts(
        t,
        Moments::of_dense(f, grids),
        &e,
        &grids.x,
        dense_singular_values(f, grids)?,
    ))
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv_to<W: Write>(records: &[DiagRecord], w: W) -> Result<()> {
    let k = records.iter().map(|r| r.sv.len()).max().unwrap_or(0);
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..k).map(|j| format!("sv{j}")));
    out.write_record(&header)?;
    for r in records {
        let mut row = vec![
            fmt(r.t),
            fmt(r.mass),
            fmt(r.momentum),
            fmt(r.e_kin),
            fmt(r.e_ele),
            fmt(r.e_tot),
            r.rank.to_string(),
        ];
        row.extend(r.sv.iter().map(|x| fmt(*x)));
        row.resize(FIXED_COLUMNS.len() + k, String::new());
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_csv(records: &[DiagRecord], path: impl AsRef<Path>) -> Result<()> {
    write_csv_to(records, File::create(path)?)
}

fn parse_f64(s: &str, line: u64, col: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| KinlrError::Parse(format!("line {line}: bad value {s:?} in column {col}")))
}

pub fn read_csv_from<R: Read>(r: R) -> Result<Vec<DiagRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < FIXED_COLUMNS.len() || names[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
        return Err(KinlrError::Parse(format!("malformed header: {}", names.join(","))));
    }
    for (j, name) in names[FIXED_COLUMNS.len()..].iter().enumerate() {
        if *name != format!("sv{j}") {
            return Err(KinlrError::Parse(format!("malformed header column {name:?}")));
        }
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let num = |j: usize| parse_f64(&row[j], line, FIXED_COLUMNS[j]);
        let rank: usize = row[6]
            .trim()
            .parse()
            .map_err(|_| KinlrError::Parse(format!("line {line}: bad rank {:?}", &row[6])))?;
        let mut sv = Vec::new();
        for (j, field) in row.iter().enumerate().skip(FIXED_COLUMNS.len()) {
            if field.is_empty() {
                break;
            }
            sv.push(parse_f64(field, line, names[j])?);
        }
        records.push(DiagRecord {
            t: num(0)?,
            mass: num(1)?,
            momentum: num(2)?,
            e_kin: num(3)?,
            e_ele: num(4)?,
            e_tot: num(5)?,
            rank,
            sv,
        });
    }
    Ok(records)
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<DiagRecord>> {
    read_csv_from(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::{from_full, TruncationPolicy};
    use crate::vlasov::{initial_condition, ProblemSpec};
    use proptest::prelude::*;

    fn grids() -> PhaseGrid {
        PhaseGrid::uniform(32, 4.0 * std::f64::consts::PI, 32, 8.0).unwrap()
    }

    #[test]
    fn equilibrium_has_no_field_energy() {
        let g = grids();
        let p = ProblemSpec::landau(0.0, 0.5);
        let s = initial_condition(&p, &g, &TruncationPolicy::fixed_rank(1)).unwrap();
        let r = observe(&s, 0.0).unwrap();
        assert!(r.e_ele <= 1e-16 * r.e_kin);
        assert_eq!(r.e_tot, r.e_kin + r.e_ele);
    }

    #[test]
    fn zero_state_record() {
        let g = grids();
        let s = from_full(&DMatrix::zeros(32, 32), &g, &TruncationPolicy::fixed_rank(1)).unwrap();
        let r = observe_with(&s, 0.0, FieldMode::Zero).unwrap();
        assert_eq!((r.mass, r.momentum, r.e_kin), (0.0, 0.0, 0.0));
        assert_eq!(r.sv, vec![0.0]);
        assert_eq!(r.rank, 1);
    }

    #[test]
    fn matches_dense_diagnostics() {
        let g = grids();
        let p = ProblemSpec::landau(0.05, 0.5);
        let s = initial_condition(&p, &g, &TruncationPolicy::fixed_rank(1)).unwrap();
        let a = observe(&s, 0.5).unwrap();
        let b = observe_dense(&s.to_full().unwrap(), &g, 0.5, FieldMode::SelfConsistent).unwrap();
        for (x, y) in [
            (a.mass, b.mass),
            (a.momentum, b.momentum),
            (a.e_kin, b.e_kin),
            (a.e_ele, b.e_ele),
        ] {
            assert!((x - y).abs() <= 1e-11 * y.abs().max(1e-3));
        }
        assert_eq!(b.rank, 1);
    }

    fn sample() -> Vec<DiagRecord> {
        vec![
            DiagRecord {
                t: 0.0,
                mass: 4.0 * std::f64::consts::PI,
                momentum: -1e-300,
                e_kin: std::f64::consts::TAU,
                e_ele: 1.2e-5,
                e_tot: std::f64::consts::TAU + 1.2e-5,
                rank: 3,
                sv: vec![1.5, 0.25, 1.0 / 3.0],
            },
            DiagRecord {
                t: 0.1,
                mass: 1.0,
                momentum: 2.0,
                e_kin: 3.0,
                e_ele: 4.0,
                e_tot: 7.0,
                rank: 2,
                sv: vec![0.7, 0.1],
            },
        ]
    }

    #[test]
    fn padded_rows_parse() {
        let mut buf = Vec::new();
        write_csv_to(&sample(), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,mass,momentum,e_kin,e_ele,e_tot,rank,sv0,sv1,sv2\n"));
        assert!(text.lines().nth(2).unwrap().ends_with(','));
        assert_eq!(read_csv_from(buf.as_slice()).unwrap(), sample());
    }

    #[test]
    fn empty_list_is_header_only() {
        let mut buf = Vec::new();
        write_csv_to(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "t,mass,momentum,e_kin,e_ele,e_tot,rank\n");
        assert!(read_csv_from(buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn malformed_header_is_rejected() {
        let text = "t,mass,energy\n1,2,3\n";
        assert!(matches!(read_csv_from(text.as_bytes()), Err(KinlrError::Parse(_))));
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_lossless(
            vals in proptest::collection::vec(-1e300f64..1e300, 6),
            sv in proptest::collection::vec(0.0f64..1e10, 1..6),
            tiny in -1e-300f64..1e-300,
        ) {
            let rec = DiagRecord {
                t: vals[0], mass: vals[1], momentum: tiny, e_kin: vals[3],
                e_ele: vals[4], e_tot: vals[5], rank: sv.len(), sv,
            };
            let mut buf = Vec::new();
            write_csv_to(std::slice::from_ref(&rec), &mut buf).unwrap();
            prop_assert_eq!(read_csv_from(buf.as_slice()).unwrap(), vec![rec]);
        }
    }
}
