//! Plain-text snapshots.
//!
//! A matrix block is a `rows cols` line followed by `rows` lines of
//! whitespace-separated values (17 significant digits). A low-rank state is
//! the header `kinlr-lrstate v1 Nx Nv r` and the blocks `U`, `S`, `V`
//! separated by single blank lines. A snapshot directory holds
//! `snap_NNNNNN.txt` files and an `index.csv` with columns `step,t,file`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{KinlrError, Result};
use crate::lowrank::LowRankState;

const LRSTATE_MAGIC: &str = "kinlr-lrstate";
const LRSTATE_VERSION: &str = "v1";
pub const INDEX_FILE: &str = "index.csv";

pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let mut out = format!("{} {}\n", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|x| format!("{x:.16e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn format_lrstate(s: &LowRankState) -> String {
    let g = s.grids();
    let mut out = String::new();
    let _ = writeln!(out, "{LRSTATE_MAGIC} {LRSTATE_VERSION} {} {} {}", g.nx(), g.nv(), s.rank());
    out.push_str(&format_matrix(s.u()));
    out.push('\n');
    out.push_str(&format_matrix(s.s()));
    out.push('\n');
    out.push_str(&format_matrix(s.v()));
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
        }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| KinlrError::Parse("unexpected end of snapshot".into()))
    }

    fn expect_blank(&mut self) -> Result<()> {
        let (n, l) = self.next_line()?;
        if !l.trim().is_empty() {
            return Err(KinlrError::Parse(format!("line {n}: expected a blank separator line")));
        }
        Ok(())
    }

    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let (n, head) = self.next_line()?;
        let dims: Vec<usize> = head
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| KinlrError::Parse(format!("line {n}: bad matrix header {head:?}")))?;
        let [rows, cols] = dims[..] else {
            return Err(KinlrError::Parse(format!("line {n}: bad matrix header {head:?}")));
        };
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            let (n, line) = self.next_line()?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| KinlrError::Parse(format!("line {n}: bad number")))?;
            if vals.len() != cols {
                return Err(KinlrError::Parse(format!(
                    "line {n}: expected {cols} values, found {}",
                    vals.len()
                )));
            }
            for (j, x) in vals.into_iter().enumerate() {
                m[(i, j)] = x;
            }
        }
        Ok(m)
    }
}

pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    Lines::new(text).matrix()
}

/// Raw factors `(U, S, V)` of a low-rank snapshot.
pub fn parse_lrstate(text: &str) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let mut lines = Lines::new(text);
    let (_, head) = lines.next_line()?;
    let parts: Vec<&str> = head.split_whitespace().collect();
    if parts.len() != 5 || parts[0] != LRSTATE_MAGIC || parts[1] != LRSTATE_VERSION {
        return Err(KinlrError::Parse(format!("line 1: bad lrstate header {head:?}")));
    }
    let dims: Vec<usize> = parts[2..]
        .iter()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| KinlrError::Parse(format!("line 1: bad lrstate header {head:?}")))?;
    let u = lines.matrix()?;
    lines.expect_blank()?;
    let s = lines.matrix()?;
    lines.expect_blank()?;
    let v = lines.matrix()?;
    let (nx, nv, r) = (dims[0], dims[1], dims[2]);
    if u.shape() != (nx, r) || s.shape() != (r, r) || v.shape() != (nv, r) {
        return Err(KinlrError::Parse(format!(
            "factor shapes U {:?}, S {:?}, V {:?} disagree with header {nx} {nv} {r}",
            u.shape(),
            s.shape(),
            v.shape()
        )));
    }
    Ok((u, s, v))
}

/// A snapshot in either format.
#[derive(Debug, Clone, PartialEq)]
pub enum Snapshot {
    Dense(DMatrix<f64>),
    LowRank {
        u: DMatrix<f64>,
        s: DMatrix<f64>,
        v: DMatrix<f64>,
    },
}

impl Snapshot {
    pub fn parse(text: &str) -> Result<Self> {
        if text.starts_with(LRSTATE_MAGIC) {
            let (u, s, v) = parse_lrstate(text)?;
            Ok(Snapshot::LowRank { u, s, v })
        } else {
            Ok(Snapshot::Dense(parse_matrix(text)?))
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Snapshot::Dense(f) => f.shape(),
            Snapshot::LowRank { u, v, .. } => (u.nrows(), v.nrows()),
        }
    }

    pub fn assemble(&self) -> DMatrix<f64> {
        match self {
            Snapshot::Dense(f) => f.clone(),
            Snapshot::LowRank { u, s, v } => u * (s * v.transpose()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub step: usize,
    pub t: f64,
    pub file: String,
}

/// Writes numbered snapshots into a directory and keeps its index current.
#[derive(Debug)]
pub struct SnapshotWriter {
    dir: PathBuf,
    entries: Vec<IndexEntry>,
}

impl SnapshotWriter {
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(Self {
            dir: dir.as_ref().to_path_buf(),
            entries: Vec::new(),
        })
    }

    fn push(&mut self, step: usize, t: f64, body: String) -> Result<()> {
        let file = format!("snap_{step:06}.txt");
        fs::write(self.dir.join(&file), body)?;
        self.entries.push(IndexEntry { step, t, file });
        self.write_index()
    }

    pub fn write_state(&mut self, step: usize, t: f64, s: &LowRankState) -> Result<()> {
        self.push(step, t, format_lrstate(s))
    }

    pub fn write_dense(&mut self, step: usize, t: f64, f: &DMatrix<f64>) -> Result<()> {
        self.push(step, t, format_matrix(f))
    }

    fn write_index(&self) -> Result<()> {
        let mut w = csv::Writer::from_path(self.dir.join(INDEX_FILE))?;
        w.write_record(["step", "t", "file"])?;
        for e in &self.entries {
            w.write_record([e.step.to_string(), format!("{:.16e}", e.t), e.file.clone()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }
}

pub fn read_index(dir: impl AsRef<Path>) -> Result<Vec<IndexEntry>> {
    let path = dir.as_ref().join(INDEX_FILE);
    let mut rdr = csv::Reader::from_path(&path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != ["step", "t", "file"] {
        return Err(KinlrError::Parse(format!(
            "{}: expected header step,t,file",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let bad = || KinlrError::Parse(format!("{}: malformed row {:?}", path.display(), row));
        out.push(IndexEntry {
            step: row[0].parse().map_err(|_| bad())?,
            t: row[1].parse().map_err(|_| bad())?,
            file: row[2].to_string(),
        });
    }
    Ok(out)
}
