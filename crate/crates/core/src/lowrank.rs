//! Factored phase-space density `f = U S V^T` and the rank-manipulation
//! primitives: weighted orthonormalization, rounding of factored sums,
//! tolerance truncation, and moment-preserving truncation.
//!
//! Columns of `U` and `V` are node values of basis functions. Orthonormality
//! is with respect to the quadrature inner products, i.e.
//! `U^T (dx U) = I` and `V^T (dv V) = I`, so the weighted Frobenius norm of
//! the assembled density equals `||S||_F`.

use nalgebra::{DMatrix, DVector};

use crate::error::{KinlrError, Result};
use crate::grid::{Grid1D, PhaseGrid};
use crate::linalg::{orthonormality_residual, qr_weighted, svd_sorted};

/// Default cap on the number of entries of an assembled dense matrix.
pub const DEFAULT_DENSE_CAP: usize = 1 << 24;

/// Relative singular value threshold used when recombining the conserved
/// and truncated parts of a conservative truncation.
const RECOMBINE_RTOL: f64 = 1e-14;

/// Floor applied to the Maxwellian weight of the conservative projection.
pub const WEIGHT_FLOOR: f64 = 1e-16;

const ORTHONORMALITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncationMode {
    FixedRank,
    Tolerance,
    Conservative,
}

/// How to pick the rank after an SVD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationPolicy {
    pub mode: TruncationMode,
    pub r_target: usize,
    /// Budget on the discarded singular values, `sum sigma_j^2 <= theta^2`.
    pub theta: f64,
    /// Hard rank cap.
    pub r_max: usize,
}

impl TruncationPolicy {
    pub fn fixed_rank(r: usize) -> Self {
        Self {
            mode: TruncationMode::FixedRank,
            r_target: r,
            theta: 0.0,
            r_max: r,
        }
    }

    pub fn tolerance(theta: f64, r_max: usize) -> Self {
        Self {
            mode: TruncationMode::Tolerance,
            r_target: 1,
            theta,
            r_max,
        }
    }

    pub fn conservative(theta: f64, r_max: usize) -> Self {
        Self {
            mode: TruncationMode::Conservative,
            r_target: 1,
            theta,
            r_max,
        }
    }

    /// Tolerance policy with `theta = 0` and no cap: only exact zeros go.
    pub fn lossless() -> Self {
        Self::tolerance(0.0, usize::MAX)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta >= 0.0) {
            return Err(KinlrError::Config(format!(
                "truncation budget theta = {} must be >= 0",
                self.theta
            )));
        }
        if self.r_target < 1 || self.r_target > self.r_max {
            return Err(KinlrError::Config(format!(
                "rank target {} must lie in [1, r_max = {}]",
                self.r_target, self.r_max
            )));
        }
        if self.mode == TruncationMode::Conservative && self.r_max < 3 {
            return Err(KinlrError::Config(format!(
                "conservative truncation needs r_max >= 3, got {}",
                self.r_max
            )));
        }
        Ok(())
    }

    /// Rank to keep from descending singular values. `floor` is the least
    /// rank returned when any singular values exist.
    fn select(&self, sigma: &[f64], floor: usize) -> usize {
        let m = sigma.len();
        let r = match self.mode {
            TruncationMode::FixedRank => self.r_target.min(m),
            TruncationMode::Tolerance | TruncationMode::Conservative => {
                let budget = self.theta * self.theta;
                // tail[j] = sum_{i >= j} sigma_i^2, accumulated smallest first
                let mut tail = vec![0.0; m + 1];
                for j in (0..m).rev() {
                    tail[j] = tail[j + 1] + sigma[j] * sigma[j];
                }
                (0..=m).find(|&j| tail[j] <= budget).unwrap_or(m)
            }
        };
        r.min(self.r_max).max(floor.min(m))
    }
}

/// What a truncation kept and dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationReport {
    /// All singular values of the core, descending.
    pub sigma: Vec<f64>,
    pub kept: usize,
    /// `sum_{j >= kept} sigma_j^2`.
    pub discarded_sq: f64,
}

impl TruncationReport {
    fn new(sigma: Vec<f64>, kept: usize) -> Self {
        let discarded_sq = sigma[kept.min(sigma.len())..]
            .iter()
            .rev()
            .map(|s| s * s)
            .sum();
        Self {
            sigma,
            kept,
            discarded_sq,
        }
    }
}

/// Discrete mass, momentum and kinetic energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mass: f64,
    pub momentum: f64,
    pub kinetic: f64,
}

impl Moments {
    /// Moments of an assembled `nx x nv` matrix by direct summation.
    pub fn of_dense(f: &DMatrix<f64>, grids: &PhaseGrid) -> Self {
        let v = grids.v.nodes();
        let cell = grids.cell();
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for (l, col) in f.column_iter().enumerate() {
            let s = col.sum();
            m0 += s;
            m1 += v[l] * s;
            m2 += 0.5 * v[l] * v[l] * s;
        }
        Self {
            mass: cell * m0,
            momentum: cell * m1,
            kinetic: cell * m2,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.mass, self.momentum, self.kinetic]
    }
}

/// `f ~ U S V^T` with weighted-orthonormal `U` and `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankState {
    u: DMatrix<f64>,
    s: DMatrix<f64>,
    v: DMatrix<f64>,
    grids: PhaseGrid,
}

impl LowRankState {
    /// Checks shapes and the orthonormality invariant.
    pub fn new(u: DMatrix<f64>, s: DMatrix<f64>, v: DMatrix<f64>, grids: PhaseGrid) -> Result<Self> {
        let state = Self::from_parts(u, s, v, grids)?;
        let res = state.orthonormality_residual();
        if !(res <= ORTHONORMALITY_TOL) {
            return Err(KinlrError::Numeric(format!(
                "factors are not weighted-orthonormal (residual {res:e})"
            )));
        }
        Ok(state)
    }

    /// Shape-checked constructor that trusts the caller on orthonormality.
    pub(crate) fn from_parts(
        u: DMatrix<f64>,
        s: DMatrix<f64>,
        v: DMatrix<f64>,
        grids: PhaseGrid,
    ) -> Result<Self> {
        let r = s.nrows();
        if s.ncols() != r || u.ncols() != r || v.ncols() != r {
            return Err(KinlrError::Dimension(format!(
                "factor ranks disagree: U {:?}, S {:?}, V {:?}",
                u.shape(),
                s.shape(),
                v.shape()
            )));
        }
        if u.nrows() != grids.nx() || v.nrows() != grids.nv() {
            return Err(KinlrError::Dimension(format!(
                "factor rows ({}, {}) do not match grid ({}, {})",
                u.nrows(),
                v.nrows(),
                grids.nx(),
                grids.nv()
            )));
        }
        if r < 1 || r > grids.nx().min(grids.nv()) {
            return Err(KinlrError::Dimension(format!(
                "rank {r} outside [1, {}]",
                grids.nx().min(grids.nv())
            )));
        }
        Ok(Self { u, s, v, grids })
    }

    /// The single-term state `alpha * x_profile (outer) v_profile`.
    pub fn separable(x_profile: &DVector<f64>, v_profile: &DVector<f64>, grids: PhaseGrid) -> Result<Self> {
        let ux = DMatrix::from_column_slice(x_profile.len(), 1, x_profile.as_slice());
        let vv = DMatrix::from_column_slice(v_profile.len(), 1, v_profile.as_slice());
        let mut fs = FactoredSum::new();
        fs.push(ux, DMatrix::identity(1, 1), vv)?;
        round(&fs, &TruncationPolicy::fixed_rank(1), &grids)
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn grids(&self) -> &PhaseGrid {
        &self.grids
    }

    pub fn rank(&self) -> usize {
        self.s.nrows()
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        (self.u, self.s, self.v)
    }

    /// `K = U S`.
    pub fn k(&self) -> DMatrix<f64> {
        &self.u * &self.s
    }

    /// `L = V S^T`.
    pub fn l(&self) -> DMatrix<f64> {
        &self.v * self.s.transpose()
    }

    /// Worst entry of `U^T(dx U) - I` and `V^T(dv V) - I`.
    pub fn orthonormality_residual(&self) -> f64 {
        orthonormality_residual(&self.u, self.grids.x.delta())
            .max(orthonormality_residual(&self.v, self.grids.v.delta()))
    }

    /// Weighted Frobenius norm `sqrt(dx dv sum f^2)`, i.e. `||S||_F`.
    pub fn norm(&self) -> f64 {
        self.s.norm()
    }

    /// Singular values of `S`, descending.
    pub fn singular_values(&self) -> Vec<f64> {
        svd_sorted(&self.s).map(|(_, s, _)| s).unwrap_or_default()
    }

    /// Replaces `(U, S, V)` by `(U P, P^T S Q, V Q)`.
    pub fn rotated(&self, p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<Self> {
        Self::from_parts(
            &self.u * p,
            p.tr_mul(&self.s) * q,
            &self.v * q,
            self.grids,
        )
    }

    /// Mass, momentum and kinetic energy from factored reductions.
    pub fn moments(&self) -> Moments {
        let (dx, dv) = (self.grids.x.delta(), self.grids.v.delta());
        let v = self.grids.v.nodes();
        let ux = self.u.row_sum_tr() * dx;
        let su = self.s.tr_mul(&ux);
        let reduce = |w: &dyn Fn(f64) -> f64| -> f64 {
            let wv = DVector::from_iterator(v.len(), v.iter().map(|&x| w(x)));
            dv * su.dot(&self.v.tr_mul(&wv))
        };
        Moments {
            mass: reduce(&|_| 1.0),
            momentum: reduce(&|x| x),
            kinetic: reduce(&|x| 0.5 * x * x),
        }
    }

    pub fn to_full(&self) -> Result<DMatrix<f64>> {
        to_full_capped(self, DEFAULT_DENSE_CAP)
    }
}

/// One block `u s v^T` of a factored sum.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub u: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

/// A sum of factored terms `sum_t U_t S_t V_t^T` with no orthonormality
/// requirement; the concatenated factors have block-diagonal core.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FactoredSum {
    terms: Vec<Term>,
}

impl FactoredSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_state(s: &LowRankState) -> Self {
        Self {
            terms: vec![Term {
                u: s.u.clone(),
                s: s.s.clone(),
                v: s.v.clone(),
            }],
        }
    }

    pub fn push(&mut self, u: DMatrix<f64>, s: DMatrix<f64>, v: DMatrix<f64>) -> Result<()> {
        if u.ncols() != s.nrows() || v.ncols() != s.ncols() {
            return Err(KinlrError::Dimension(format!(
                "term shapes U {:?}, S {:?}, V {:?} are inconsistent",
                u.shape(),
                s.shape(),
                v.shape()
            )));
        }
        if let Some(t) = self.terms.first() {
            if t.u.nrows() != u.nrows() || t.v.nrows() != v.nrows() {
                return Err(KinlrError::Dimension(
                    "term grid sizes differ from the rest of the sum".into(),
                ));
            }
        }
        self.terms.push(Term { u, s, v });
        Ok(())
    }

    /// Appends every term of `other`, scaling its cores by `c`.
    pub fn extend_scaled(&mut self, other: &FactoredSum, c: f64) -> Result<()> {
        for t in &other.terms {
            self.push(t.u.clone(), &t.s * c, t.v.clone())?;
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            terms: self
                .terms
                .iter()
                .map(|t| Term {
                    u: t.u.clone(),
                    s: &t.s * c,
                    v: t.v.clone(),
                })
                .collect(),
        }
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn is_empty(&self) -> bool {
        self.terms.iter().all(|t| t.u.ncols() == 0 || t.v.ncols() == 0)
    }

    /// Column count of the concatenated x-factor.
    pub fn width(&self) -> usize {
        self.terms.iter().map(|t| t.u.ncols()).sum()
    }

    fn width_v(&self) -> usize {
        self.terms.iter().map(|t| t.v.ncols()).sum()
    }

    pub fn u_cat(&self) -> DMatrix<f64> {
        concat(self.terms.iter().map(|t| &t.u))
    }

    pub fn v_cat(&self) -> DMatrix<f64> {
        concat(self.terms.iter().map(|t| &t.v))
    }

    /// The block-diagonal core of the concatenated representation.
    pub fn s_blk(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.width(), self.width_v());
        let (mut i, mut j) = (0, 0);
        for t in &self.terms {
            s.view_mut((i, j), t.s.shape()).copy_from(&t.s);
            i += t.s.nrows();
            j += t.s.ncols();
        }
        s
    }

    /// Dense `U_cat S_blk V_cat^T`.
    pub fn assemble(&self) -> Result<DMatrix<f64>> {
        let t0 = self.terms.first().ok_or(KinlrError::EmptyInput)?;
        let mut out = DMatrix::zeros(t0.u.nrows(), t0.v.nrows());
        for t in &self.terms {
            out += &t.u * (&t.s * t.v.transpose());
        }
        Ok(out)
    }
}

fn concat<'a>(blocks: impl Iterator<Item = &'a DMatrix<f64>> + Clone) -> DMatrix<f64> {
    let rows = blocks.clone().next().map(|b| b.nrows()).unwrap_or(0);
    let cols: usize = blocks.clone().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut j = 0;
    for b in blocks {
        out.columns_mut(j, b.ncols()).copy_from(b);
        j += b.ncols();
    }
    out
}

/// QR factorization `a = q r` in the grid's inner product.
///
/// Requires `a.ncols() <= g.n()`. Rank-deficient input is completed:
/// `q` keeps full column rank and the matching pivots of `r` are zero.
pub fn orthonormalize(a: &DMatrix<f64>, g: &Grid1D) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if a.nrows() != g.n() {
        return Err(KinlrError::Dimension(format!(
            "matrix has {} rows, grid has {} nodes",
            a.nrows(),
            g.n()
        )));
    }
    if a.ncols() > g.n() {
        return Err(KinlrError::Dimension(format!(
            "cannot orthonormalize {} columns on {} nodes",
            a.ncols(),
            g.n()
        )));
    }
    Ok(qr_weighted(a, g.delta()))
}

/// Core SVD of a factored sum: returns `(Qx P, sigma, Qv Q)`.
fn compress(fs: &FactoredSum, grids: &PhaseGrid) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    if fs.terms.is_empty() || fs.is_empty() {
        return Err(KinlrError::EmptyInput);
    }
    let t0 = &fs.terms[0];
    if t0.u.nrows() != grids.nx() || t0.v.nrows() != grids.nv() {
        return Err(KinlrError::Dimension(format!(
            "factored sum is {}x{}, grid is {}x{}",
            t0.u.nrows(),
            t0.v.nrows(),
            grids.nx(),
            grids.nv()
        )));
    }
    let (qx, rx) = qr_weighted(&fs.u_cat(), grids.x.delta());
    let (qv, rv) = qr_weighted(&fs.v_cat(), grids.v.delta());
    let mut core = DMatrix::zeros(rx.nrows(), rv.nrows());
    let (mut i, mut j) = (0, 0);
    for t in &fs.terms {
        let (p, q) = t.s.shape();
        let rxi = rx.columns(i, p);
        let rvj = rv.columns(j, q);
        core += rxi * (&t.s * rvj.transpose());
        i += p;
        j += q;
    }
    let (p, sigma, q) = svd_sorted(&core)?;
    Ok((qx * p, sigma, qv * q))
}

fn assemble_truncated(
    ux: DMatrix<f64>,
    sigma: &[f64],
    vx: DMatrix<f64>,
    r: usize,
    grids: &PhaseGrid,
) -> Result<LowRankState> {
    let s = DMatrix::from_diagonal(&DVector::from_column_slice(&sigma[..r]));
    LowRankState::from_parts(ux.columns(0, r).into_owned(), s, vx.columns(0, r).into_owned(), *grids)
}

/// Recompresses a factored sum: two weighted QRs, an SVD of the small core,
/// and truncation per `policy`.
pub fn round(fs: &FactoredSum, policy: &TruncationPolicy, grids: &PhaseGrid) -> Result<LowRankState> {
    round_with_report(fs, policy, grids).map(|(s, _)| s)
}

pub fn round_with_report(
    fs: &FactoredSum,
    policy: &TruncationPolicy,
    grids: &PhaseGrid,
) -> Result<(LowRankState, TruncationReport)> {
    policy.validate()?;
    if policy.mode == TruncationMode::Conservative {
        let full = round(fs, &TruncationPolicy::lossless(), grids)?;
        return conservative_truncate_with_report(&full, policy);
    }
    let (ux, sigma, vx) = compress(fs, grids)?;
    let r = policy.select(&sigma, 1);
    let state = assemble_truncated(ux, &sigma, vx, r, grids)?;
    Ok((state, TruncationReport::new(sigma, r)))
}

/// Truncates a state through the SVD of its core `S = P Sigma Q^T`.
pub fn truncate(s: &LowRankState, policy: &TruncationPolicy) -> Result<LowRankState> {
    truncate_with_report(s, policy).map(|(s, _)| s)
}

pub fn truncate_with_report(
    s: &LowRankState,
    policy: &TruncationPolicy,
) -> Result<(LowRankState, TruncationReport)> {
    policy.validate()?;
    if policy.mode == TruncationMode::Conservative {
        return conservative_truncate_with_report(s, policy);
    }
    let (p, sigma, q) = svd_sorted(&s.s)?;
    let r = policy.select(&sigma, 1);
    let state = assemble_truncated(&s.u * p, &sigma, &s.v * q, r, &s.grids)?;
    Ok((state, TruncationReport::new(sigma, r)))
}

/// The conserved velocity subspace: `phi` spans `{w, v w, v^2 w}` and is
/// orthonormal in `<a, b>_{1/w} = dv sum a b / w`; `dual = phi / w`, so the
/// projection coefficients of `g` are `dv * dual^T g`.
pub struct MomentBasis {
    pub phi: DMatrix<f64>,
    pub dual: DMatrix<f64>,
}

impl MomentBasis {
    pub fn new(gv: &Grid1D) -> Result<Self> {
        let nv = gv.n();
        if nv < 6 {
            return Err(KinlrError::Dimension(format!(
                "conservative truncation needs at least 6 velocity nodes, got {nv}"
            )));
        }
        let v = gv.nodes();
        let w: Vec<f64> = v.iter().map(|x| (-0.5 * x * x).exp().max(WEIGHT_FLOOR)).collect();
        let sqw: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
        // B / sqrt(w) = sqrt(w) [1, v, v^2]
        let scaled = DMatrix::from_fn(nv, 3, |l, m| sqw[l] * v[l].powi(m as i32));
        let (q, _) = qr_weighted(&scaled, gv.delta());
        let phi = DMatrix::from_fn(nv, 3, |l, m| q[(l, m)] * sqw[l]);
        let dual = DMatrix::from_fn(nv, 3, |l, m| q[(l, m)] / sqw[l]);
        Ok(Self { phi, dual })
    }

    /// Splits the V-side of `s` into `(x-coefficients, remainder V)` so that
    /// `f = X phi^T + U S V_rem^T` and `V_rem` has vanishing moments 0..2.
    fn split(&self, s: &LowRankState) -> (DMatrix<f64>, DMatrix<f64>) {
        let t = self.dual.tr_mul(&s.v) * s.grids.v.delta();
        let x = &s.u * (&s.s * t.transpose());
        let v_rem = &s.v - &self.phi * t;
        (x, v_rem)
    }
}

/// Truncation that leaves the discrete mass, momentum and kinetic energy
/// unchanged: the projection onto the Maxwellian-weighted span of
/// `{1, v, v^2}` is kept exactly and only the remainder is truncated with
/// budget `policy.theta` and rank cap `policy.r_max - 3`.
pub fn conservative_truncate(s: &LowRankState, policy: &TruncationPolicy) -> Result<LowRankState> {
    conservative_truncate_with_report(s, policy).map(|(s, _)| s)
}

/// As [`conservative_truncate`]; the report describes the remainder.
pub fn conservative_truncate_with_report(
    s: &LowRankState,
    policy: &TruncationPolicy,
) -> Result<(LowRankState, TruncationReport)> {
    policy.validate()?;
    let grids = s.grids;
    let basis = MomentBasis::new(&grids.v)?;
    let (x, v_rem) = basis.split(s);

    let mut rem = FactoredSum::new();
    rem.push(s.u.clone(), s.s.clone(), v_rem)?;
    let (ux, sigma, vx) = compress(&rem, &grids)?;
    let rem_policy = TruncationPolicy {
        mode: TruncationMode::Tolerance,
        r_target: 1,
        theta: policy.theta,
        r_max: policy.r_max.saturating_sub(3),
    };
    let kept = rem_policy.select(&sigma, 0);
    let report = TruncationReport::new(sigma.clone(), kept);

    let mut total = FactoredSum::new();
    total.push(x, DMatrix::identity(3, 3), basis.phi.clone())?;
    if kept > 0 {
        // QR completions are not moment-free; project them out again
        let vk = vx.columns(0, kept).into_owned();
        let coef = basis.dual.tr_mul(&vk) * grids.v.delta();
        total.push(
            ux.columns(0, kept).into_owned(),
            DMatrix::from_diagonal(&DVector::from_column_slice(&sigma[..kept])),
            vk - &basis.phi * coef,
        )?;
    }
    let (ux, sigma, vx) = compress(&total, &grids)?;
    let cut = sigma.first().copied().unwrap_or(0.0) * RECOMBINE_RTOL;
    let r = sigma.iter().take_while(|&&x| x > cut).count().max(1);
    Ok((assemble_truncated(ux, &sigma, vx, r, &grids)?, report))
}

/// Projection of `s` onto the conserved subspace alone (its moment part).
pub fn moment_projection(s: &LowRankState) -> Result<DMatrix<f64>> {
    let basis = MomentBasis::new(&s.grids.v)?;
    let (x, _) = basis.split(s);
    Ok(x * basis.phi.transpose())
}

/// `U S V^T`, refused when it would exceed `cap` entries.
pub fn to_full_capped(s: &LowRankState, cap: usize) -> Result<DMatrix<f64>> {
    let entries = s.grids.nx() * s.grids.nv();
    if entries > cap {
        return Err(KinlrError::Resource { entries, cap });
    }
    Ok(&s.u * (&s.s * s.v.transpose()))
}

pub fn to_full(s: &LowRankState) -> Result<DMatrix<f64>> {
    s.to_full()
}

/// Factorizes a dense `nx x nv` matrix by an SVD in the weighted geometry.
pub fn from_full(f: &DMatrix<f64>, grids: &PhaseGrid, policy: &TruncationPolicy) -> Result<LowRankState> {
    from_full_with_report(f, grids, policy).map(|(s, _)| s)
}

pub fn from_full_with_report(
    f: &DMatrix<f64>,
    grids: &PhaseGrid,
    policy: &TruncationPolicy,
) -> Result<(LowRankState, TruncationReport)> {
    policy.validate()?;
    if f.nrows() != grids.nx() || f.ncols() != grids.nv() {
        return Err(KinlrError::Dimension(format!(
            "matrix is {:?}, grid is {}x{}",
            f.shape(),
            grids.nx(),
            grids.nv()
        )));
    }
    let (sx, sv) = (grids.x.delta().sqrt(), grids.v.delta().sqrt());
    let (p, sigma, q) = svd_sorted(&(f * (sx * sv)))?;
    if policy.mode == TruncationMode::Conservative {
        let full = assemble_truncated(p / sx, &sigma, q / sv, sigma.len(), grids)?;
        return conservative_truncate_with_report(&full, policy);
    }
    let r = policy.select(&sigma, 1);
    let state = assemble_truncated(p / sx, &sigma, q / sv, r, grids)?;
    Ok((state, TruncationReport::new(sigma, r)))
}

/// Weighted Frobenius norm `sqrt(dx dv sum F^2)` of a dense matrix.
pub fn weighted_norm(f: &DMatrix<f64>, grids: &PhaseGrid) -> f64 {
    f.norm() * grids.cell().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grids(nx: usize, nv: usize) -> PhaseGrid {
        PhaseGrid::uniform(nx, 4.0 * std::f64::consts::PI, nv, 6.0).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_state(rng: &mut ChaCha8Rng, g: &PhaseGrid, r: usize) -> LowRankState {
        let (u, _) = orthonormalize(&random_matrix(rng, g.nx(), r), &g.x).unwrap();
        let (v, _) = orthonormalize(&random_matrix(rng, g.nv(), r), &g.v).unwrap();
        LowRankState::new(u, random_matrix(rng, r, r), v, *g).unwrap()
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn orthonormalize_identity_on_orthonormal_input() {
        let g = grids(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q0, _) = orthonormalize(&random_matrix(&mut rng, 16, 3), &g.x).unwrap();
        let (q, r) = orthonormalize(&q0, &g.x).unwrap();
        for j in 0..3 {
            let sign = r[(j, j)].signum();
            assert!((r[(j, j)].abs() - 1.0).abs() < 1e-12);
            assert!((q.column(j) * sign - q0.column(j)).amax() < 1e-12);
        }
    }

    #[test]
    fn orthonormalize_completes_deficient_input() {
        let g = grids(16, 16);
        let col = DVector::from_fn(16, |k, _| (k as f64).cos());
        let a = DMatrix::from_columns(&[col.clone(), col]);
        let (q, r) = orthonormalize(&a, &g.x).unwrap();
        assert!(orthonormality_residual(&q, g.x.delta()) < 1e-12);
        assert_eq!(r[(1, 1)], 0.0);
        assert_eq!(r[(1, 0)], 0.0);
        assert!((&q * &r - &a).amax() < 1e-13);
    }

    #[test]
    fn orthonormalize_random_reconstruction() {
        let g = PhaseGrid::uniform(64, 1.0, 8, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 64, 5);
        let (q, r) = orthonormalize(&a, &g.x).unwrap();
        assert!(rel(&(&q * &r), &a) <= 1e-13);
        assert!(orthonormality_residual(&q, g.x.delta()) < 1e-12);
        for i in 0..5 {
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
        let too_wide = random_matrix(&mut rng, 64, 65);
        assert!(matches!(
            orthonormalize(&too_wide, &g.x),
            Err(KinlrError::Dimension(_))
        ));
    }

    #[test]
    fn round_rank_one_product() {
        let g = grids(24, 20);
        let x = DVector::from_fn(24, |k, _| 1.0 + (k as f64 * 0.3).sin());
        let v = DVector::from_fn(20, |l, _| (-(l as f64 - 10.0).powi(2) / 8.0).exp());
        let mut fs = FactoredSum::new();
        // the same product split across three redundant terms
        for c in [0.5, 0.25, 0.25] {
            fs.push(
                DMatrix::from_column_slice(24, 1, x.as_slice()),
                DMatrix::from_element(1, 1, c),
                DMatrix::from_column_slice(20, 1, v.as_slice()),
            )
            .unwrap();
        }
        let out = round(&fs, &TruncationPolicy::tolerance(1e-8, 10), &g).unwrap();
        assert_eq!(out.rank(), 1);
        let dense = &x * v.transpose();
        assert!(rel(&out.to_full().unwrap(), &dense) < 1e-12);
    }

    #[test]
    fn tolerance_rule_on_given_spectrum() {
        let p = TruncationPolicy::tolerance(1e-6, 10);
        assert_eq!(p.select(&[3.0, 2.0, 1e-9], 1), 2);
        // exact tie is discarded
        let p = TruncationPolicy::tolerance(1.0, 10);
        assert_eq!(p.select(&[3.0, 1.0], 1), 1);
        // cap and floor
        let p = TruncationPolicy::tolerance(0.0, 2);
        assert_eq!(p.select(&[3.0, 2.0, 1.0], 1), 2);
        let p = TruncationPolicy::tolerance(10.0, 5);
        assert_eq!(p.select(&[3.0, 2.0, 1.0], 1), 1);
        assert_eq!(p.select(&[3.0, 2.0, 1.0], 0), 0);
    }

    #[test]
    fn round_redundant_terms_matches_dense_svd() {
        let g = grids(40, 36);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 40, 7);
        let b = random_matrix(&mut rng, 36, 7);
        let mut fs = FactoredSum::new();
        let m = random_matrix(&mut rng, 7, 7);
        for c in 0..2 {
            let w = if c == 0 { 0.3 } else { 0.7 };
            fs.push(a.clone(), &m * w, b.clone()).unwrap();
        }
        assert_eq!(fs.width(), 14);
        let dense = &a * &m * b.transpose();
        let out = round(&fs, &TruncationPolicy::fixed_rank(7), &g).unwrap();
        assert_eq!(out.rank(), 7);
        assert!(rel(&out.to_full().unwrap(), &dense) <= 1e-12);
        assert!(out.orthonormality_residual() < 1e-12);
        assert!(matches!(
            round(&FactoredSum::new(), &TruncationPolicy::fixed_rank(1), &g),
            Err(KinlrError::EmptyInput)
        ));
    }

    #[test]
    fn round_lossless_reproduces_sum() {
        let g = grids(20, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut fs = FactoredSum::new();
        for w in [2, 3, 1] {
            fs.push(
                random_matrix(&mut rng, 20, w),
                random_matrix(&mut rng, w, w),
                random_matrix(&mut rng, 18, w),
            )
            .unwrap();
        }
        let out = round(&fs, &TruncationPolicy::lossless(), &g).unwrap();
        assert!(rel(&out.to_full().unwrap(), &fs.assemble().unwrap()) <= 1e-12);
        assert!(rel(&(fs.u_cat() * fs.s_blk() * fs.v_cat().transpose()), &fs.assemble().unwrap()) < 1e-14);
    }

    #[test]
    fn truncate_zero_budget_keeps_function() {
        let g = grids(20, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_state(&mut rng, &g, 5);
        let t = truncate(&s, &TruncationPolicy::tolerance(0.0, 10)).unwrap();
        assert_eq!(t.rank(), 5);
        assert!((t.to_full().unwrap() - s.to_full().unwrap()).amax() < 1e-13);
    }

    #[test]
    fn truncate_drops_tiny_value() {
        let g = grids(20, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = random_state(&mut rng, &g, 2);
        let s = LowRankState::new(
            base.u().clone(),
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-12])),
            base.v().clone(),
            g,
        )
        .unwrap();
        let t = truncate(&s, &TruncationPolicy::tolerance(1e-6, 4)).unwrap();
        assert_eq!(t.rank(), 1);
    }

    #[test]
    fn truncate_fixed_rank_is_best_approximation() {
        let g = grids(30, 26);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_state(&mut rng, &g, 6);
        let t = truncate(&s, &TruncationPolicy::fixed_rank(3)).unwrap();
        // Eckart-Young oracle on the weighted dense matrix
        let (sx, sv) = (g.x.delta().sqrt(), g.v.delta().sqrt());
        let scaled = s.to_full().unwrap() * (sx * sv);
        let svd = scaled.clone().svd(true, true);
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let mut best = DMatrix::zeros(30, 26);
        for &i in &idx[..3] {
            best += u.column(i) * vt.row(i) * svd.singular_values[i];
        }
        let best = best / (sx * sv);
        assert!(rel(&t.to_full().unwrap(), &best) < 1e-12);
    }

    #[test]
    fn truncation_error_within_budget() {
        let g = grids(30, 26);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed_theta in [1e-3, 1e-1, 0.5] {
            let s = random_state(&mut rng, &g, 8);
            let t = truncate(&s, &TruncationPolicy::tolerance(seed_theta, 8)).unwrap();
            let err = weighted_norm(&(t.to_full().unwrap() - s.to_full().unwrap()), &g);
            assert!(err <= seed_theta * (1.0 + 1e-12));
            assert!(t.norm() <= s.norm() * (1.0 + 1e-14));
        }
    }

    #[test]
    fn moments_match_dense_and_quadrature() {
        // at vmax = 6 the Maxwellian tail alone carries ~2e-9 of the mass
        let g = PhaseGrid::uniform(64, 4.0 * std::f64::consts::PI, 64, 8.0).unwrap();
        let x = DVector::from_fn(64, |k, _| 1.0 + 0.01 * (0.5 * g.x.node(k)).cos());
        let v = DVector::from_fn(64, |l, _| {
            let vl = g.v.node(l);
            (-0.5 * vl * vl).exp() / (2.0 * std::f64::consts::PI).sqrt()
        });
        let s = from_full(&(&x * v.transpose()), &g, &TruncationPolicy::tolerance(1e-12, 4)).unwrap();
        let m = s.moments();
        assert!((m.mass - 4.0 * std::f64::consts::PI).abs() < 1e-8);
        let d = Moments::of_dense(&s.to_full().unwrap(), &g);
        assert!((m.mass - d.mass).abs() < 1e-12 * d.mass);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = random_state(&mut rng, &g, 4);
        let (a, b) = (r.moments(), Moments::of_dense(&r.to_full().unwrap(), &g));
        for (x, y) in a.as_array().iter().zip(b.as_array()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-3));
        }
    }

    #[test]
    fn odd_state_momentum() {
        let g = grids(32, 32);
        let x = DVector::from_fn(32, |k, _| 1.0 + 0.2 * (0.5 * g.x.node(k)).sin());
        let v = DVector::from_fn(32, |l, _| {
            let vl = g.v.node(l);
            vl * (-0.5 * vl * vl).exp()
        });
        let s = LowRankState::separable(&x, &v, g).unwrap();
        let m = s.moments();
        let d = Moments::of_dense(&s.to_full().unwrap(), &g);
        assert!((m.momentum - d.momentum).abs() <= 1e-12 * d.momentum.abs());
        assert!(m.momentum > 0.0);
    }

    #[test]
    fn zero_core_gives_zero_moments_and_matrix() {
        let g = grids(16, 16);
        let s = from_full(&DMatrix::zeros(16, 16), &g, &TruncationPolicy::tolerance(0.0, 4)).unwrap();
        assert_eq!(s.rank(), 1);
        assert_eq!(s.s()[(0, 0)], 0.0);
        assert_eq!(s.moments().as_array(), [0.0, 0.0, 0.0]);
        assert!(s.to_full().unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn from_full_outer_products() {
        let g = grids(32, 48);
        let x = DVector::from_fn(32, |k, _| (k as f64 * 0.2).cos() + 2.0);
        let v = DVector::from_fn(48, |l, _| (l as f64 * 0.1).sin());
        let s = from_full(&(&x * v.transpose()), &g, &TruncationPolicy::tolerance(1e-10, 10)).unwrap();
        assert_eq!(s.rank(), 1);
        let col = DMatrix::from_fn(32, 48, |k, l| if k == 0 { v[l] } else { 0.0 });
        let s = from_full(&col, &g, &TruncationPolicy::tolerance(1e-10, 10)).unwrap();
        assert!(rel(&s.to_full().unwrap(), &col) < 1e-13);
    }

    #[test]
    fn from_full_travelling_cosine_is_rank_two() {
        let g = grids(48, 64);
        let (k, t) = (0.5, 3.0);
        let f = DMatrix::from_fn(48, 64, |i, l| {
            let (x, v) = (g.x.node(i), g.v.node(l));
            (k * (x - v * t)).cos() * (-0.5 * v * v).exp()
        });
        // oracle: the weighted dense SVD has exactly two significant values
        let (_, sigma, _) = svd_sorted(&(&f * g.cell().sqrt())).unwrap();
        assert_eq!(sigma.iter().filter(|s| **s > 1e-12 * sigma[0]).count(), 2);
        let s = from_full(&f, &g, &TruncationPolicy::tolerance(1e-10, 10)).unwrap();
        assert_eq!(s.rank(), 2);
    }

    #[test]
    fn to_full_round_trip_and_cap() {
        let g = grids(20, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = random_matrix(&mut rng, 20, 24);
        let s = from_full(&f, &g, &TruncationPolicy::tolerance(0.0, 20)).unwrap();
        assert!(rel(&s.to_full().unwrap(), &f) < 1e-12);
        assert!(matches!(
            to_full_capped(&s, 100),
            Err(KinlrError::Resource { .. })
        ));
    }

    fn moment_rel_change(a: &LowRankState, b: &LowRankState) -> f64 {
        let (ma, mb) = (a.moments().as_array(), b.moments().as_array());
        ma.iter()
            .zip(mb)
            .map(|(x, y)| (x - y).abs() / x.abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn conservative_keeps_states_inside_moment_span() {
        let g = grids(24, 32);
        let basis = MomentBasis::new(&g.v).unwrap();
        let x = DMatrix::from_fn(24, 3, |k, m| ((m + 1) as f64 * 0.5 * g.x.node(k)).cos() + 1.5);
        let f = &x * basis.phi.transpose();
        let s = from_full(&f, &g, &TruncationPolicy::tolerance(0.0, 3)).unwrap();
        let c = conservative_truncate(&s, &TruncationPolicy::conservative(1e-8, 10)).unwrap();
        assert!(c.rank() <= 3);
        assert!(rel(&c.to_full().unwrap(), &f) < 1e-12);
    }

    #[test]
    fn conservative_preserves_moments_where_plain_does_not() {
        let g = grids(32, 48);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (u, _) = orthonormalize(&random_matrix(&mut rng, 32, 12), &g.x).unwrap();
        let (v, _) = orthonormalize(&random_matrix(&mut rng, 48, 12), &g.v).unwrap();
        let sigma: Vec<f64> = (0..12).map(|j| 10f64.powf(-(j as f64) * 0.6)).collect();
        let s = LowRankState::new(u, DMatrix::from_diagonal(&DVector::from_vec(sigma)), v, g).unwrap();
        let c = conservative_truncate(&s, &TruncationPolicy::conservative(1e-4, 48)).unwrap();
        assert!(moment_rel_change(&s, &c) < 1e-11);
        assert!(c.rank() < 12);
        let p = truncate(&s, &TruncationPolicy::tolerance(1e-4, 48)).unwrap();
        assert!(moment_rel_change(&s, &p) > 1e-8);
        assert!(c.orthonormality_residual() < 1e-10);
    }

    #[test]
    fn conservative_infinite_budget_is_moment_projection() {
        let g = grids(32, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = random_state(&mut rng, &g, 6);
        let c = conservative_truncate(&s, &TruncationPolicy::conservative(f64::INFINITY, 20)).unwrap();
        assert!(c.rank() <= 3);
        // dense oracle: project every row of F onto {w, vw, v^2 w} in the 1/w geometry
        let f = s.to_full().unwrap();
        let v = g.v.nodes();
        let w: Vec<f64> = v.iter().map(|x| (-0.5 * x * x).exp().max(WEIGHT_FLOOR)).collect();
        let dv = g.v.delta();
        let gram = DMatrix::from_fn(3, 3, |a, b| {
            dv * (0..40).map(|l| v[l].powi((a + b) as i32) * w[l]).sum::<f64>()
        });
        let inv = gram.try_inverse().unwrap();
        let mut proj = DMatrix::zeros(32, 40);
        for i in 0..32 {
            let mom = DVector::from_fn(3, |a, _| dv * (0..40).map(|l| f[(i, l)] * v[l].powi(a as i32)).sum::<f64>());
            let coef = &inv * mom;
            for l in 0..40 {
                proj[(i, l)] = w[l] * (coef[0] + coef[1] * v[l] + coef[2] * v[l] * v[l]);
            }
        }
        assert!(rel(&c.to_full().unwrap(), &proj) < 1e-10);
        assert!(rel(&moment_projection(&s).unwrap(), &proj) < 1e-10);
    }

    #[test]
    fn policy_validation() {
        assert!(TruncationPolicy::tolerance(-1.0, 3).validate().is_err());
        assert!(TruncationPolicy::conservative(1e-3, 2).validate().is_err());
        let mut p = TruncationPolicy::fixed_rank(3);
        p.r_max = 2;
        assert!(p.validate().is_err());
    }
}
