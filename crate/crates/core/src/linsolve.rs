//! Sparse symmetric-positive-definite solves for the pressure, viscous and
//! conduction systems: preconditioned conjugate gradients with Jacobi or
//! two-level deflated-Jacobi preconditioning.
//!
//! Deflation augments CG with a coarse space of piecewise-constant group
//! indicator vectors; the groups come from a geometric partition of the mesh
//! (angular sectors times radial bands for the annulus cases). Pure-Neumann
//! systems are handled by projecting the right-hand side and the iterates off
//! the constant vector instead of pinning a node.

use crate::geom::Vec2;
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("matrix is not structurally symmetric at entry ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("diagonal entry {0} is missing or not positive")]
    BadDiagonal(usize),
    #[error("dimension mismatch: matrix is {n}, vector is {len}")]
    DimensionMismatch { n: usize, len: usize },
    #[error("PCG did not converge in {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        /// Last iterate, kept for diagnostics and truncated-iteration studies.
        partial: Vec<f64>,
    },
    #[error("numerical breakdown after {0} iterations (NaN or non-positive curvature)")]
    Breakdown(usize),
    #[error("invalid deflation setup: {0}")]
    InvalidDeflation(String),
}

/// Compressed-sparse-row symmetric positive-definite matrix.
#[derive(Clone, Debug)]
pub struct SparseSpd {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSpd {
    /// Assemble from (row, col, value) triplets; duplicates are summed.
    /// Checks structural symmetry and positive diagonal presence.
    pub fn from_triplets(
        n: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self, SolveError> {
        let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, j, v) in triplets {
            *map.entry((i, j)).or_insert(0.0) += v;
        }
        let mut row_ptr = vec![0usize; n + 1];
        for &(i, _) in map.keys() {
            row_ptr[i + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let mut col_idx = Vec::with_capacity(map.len());
        let mut values = Vec::with_capacity(map.len());
        for (&(_, j), &v) in &map {
            col_idx.push(j);
            values.push(v);
        }
        let m = Self {
            n,
            row_ptr,
            col_idx,
            values,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_csr(n: usize, row_ptr: Vec<usize>, col_idx: Vec<usize>, values: Vec<f64>) -> Self {
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    fn validate(&self) -> Result<(), SolveError> {
        for i in 0..self.n {
            let mut has_diag = false;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                if j == i {
                    if self.values[k] <= 0.0 {
                        return Err(SolveError::BadDiagonal(i));
                    }
                    has_diag = true;
                } else {
                    let v_ij = self.values[k];
                    let v_ji = self.get(j, i).ok_or(SolveError::Asymmetric(i, j))?;
                    let scale = v_ij.abs().max(v_ji.abs()).max(1e-300);
                    if (v_ij - v_ji).abs() > 1e-9 * scale {
                        return Err(SolveError::Asymmetric(i, j));
                    }
                }
            }
            if !has_diag {
                return Err(SolveError::BadDiagonal(i));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi]
            .binary_search(&j)
            .ok()
            .map(|k| self.values[lo + k])
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for i in 0..self.n {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            y[i] = s;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.get(i, i).unwrap_or(0.0))
            .collect()
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &[usize], &[f64])> {
        (0..self.n).map(move |i| {
            let lo = self.row_ptr[i];
            let hi = self.row_ptr[i + 1];
            (i, &self.col_idx[lo..hi], &self.values[lo..hi])
        })
    }

    /// Debug dump in Matrix Market coordinate format (lower triangle).
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real symmetric")?;
        let nnz_lower = self
            .rows()
            .map(|(i, cols, _)| cols.iter().filter(|&&j| j <= i).count())
            .sum::<usize>();
        writeln!(w, "{} {} {}", self.n, self.n, nnz_lower)?;
        for (i, cols, vals) in self.rows() {
            for (&j, &v) in cols.iter().zip(vals) {
                if j <= i {
                    writeln!(w, "{} {} {:.16e}", i + 1, j + 1, v)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preconditioner {
    Jacobi,
    DeflatedJacobi,
}

/// Null-space handling for singular-but-consistent systems.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NullSpace {
    None,
    /// Project right-hand side and iterates off the constant vector
    /// (pure-Neumann operators); the returned solution has zero mean.
    Constants,
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub rel_tolerance: f64,
    /// Defaults to 10 * dimension when `None`.
    pub max_iterations: Option<usize>,
    pub preconditioner: Preconditioner,
    /// Node-to-group map, required for [`Preconditioner::DeflatedJacobi`].
    pub deflation_groups: Option<Vec<usize>>,
    pub null_space: NullSpace,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rel_tolerance: 1e-10,
            max_iterations: None,
            preconditioner: Preconditioner::Jacobi,
            deflation_groups: None,
            null_space: NullSpace::None,
        }
    }
}

pub struct PcgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final relative residual ‖b − Ax‖₂ / max(‖b‖₂, 1e-30).
    pub final_residual: f64,
    pub residual_history: Vec<f64>,
}

/// Coarse space of group indicator vectors with a factored coarse operator.
pub struct Deflation {
    groups: Vec<usize>,
    /// Number of coarse columns actually used (last group dropped when the
    /// fine operator has the constant vector in its null space).
    m: usize,
    /// Cholesky factor of the coarse matrix WᵀAW, row-major lower triangle.
    chol: Vec<f64>,
}

/// Build a deflation operator from a node-to-group map. Every node must be
/// assigned to a group and every group must be non-empty; the coarse matrix
/// WᵀAW is factored once. With `NullSpace::Constants` the last indicator
/// column is dropped so the coarse operator stays definite (the full set of
/// indicators sums to the constant vector).
pub fn build_deflation(
    a: &SparseSpd,
    groups: &[usize],
    null_space: NullSpace,
) -> Result<Deflation, SolveError> {
    if groups.len() != a.dim() {
        return Err(SolveError::InvalidDeflation(format!(
            "group map covers {} nodes, matrix has {}",
            groups.len(),
            a.dim()
        )));
    }
    let n_groups = groups.iter().copied().max().map_or(0, |g| g + 1);
    if n_groups == 0 {
        return Err(SolveError::InvalidDeflation("no groups given".to_string()));
    }
    let mut counts = vec![0usize; n_groups];
    for &g in groups {
        counts[g] += 1;
    }
    if let Some(g) = counts.iter().position(|&c| c == 0) {
        return Err(SolveError::InvalidDeflation(format!("group {g} is empty")));
    }
    let m = match null_space {
        NullSpace::Constants => n_groups.saturating_sub(1),
        NullSpace::None => n_groups,
    };
    if m == 0 {
        return Err(SolveError::InvalidDeflation(
            "deflation needs at least two groups on a singular operator".to_string(),
        ));
    }

    // Coarse matrix E_gh = sum of a_ij over i in group g, j in group h.
    let mut e = vec![0.0; m * m];
    for (i, cols, vals) in a.rows() {
        let g = groups[i];
        if g >= m {
            continue;
        }
        for (&j, &v) in cols.iter().zip(vals) {
            let h = groups[j];
            if h < m {
                e[g * m + h] += v;
            }
        }
    }
    let chol = dense_cholesky(&mut e, m).ok_or_else(|| {
        SolveError::InvalidDeflation("coarse matrix is not positive definite".to_string())
    })?;
    Ok(Deflation {
        groups: groups.to_vec(),
        m,
        chol,
    })
}

impl Deflation {
    pub fn coarse_dim(&self) -> usize {
        self.m
    }

    /// q = W E⁻¹ Wᵀ v
    fn coarse_correct(&self, v: &[f64], q: &mut [f64]) {
        let mut rc = vec![0.0; self.m];
        for (i, &g) in self.groups.iter().enumerate() {
            if g < self.m {
                rc[g] += v[i];
            }
        }
        cholesky_solve(&self.chol, self.m, &mut rc);
        for (i, &g) in self.groups.iter().enumerate() {
            q[i] = if g < self.m { rc[g] } else { 0.0 };
        }
    }
}

/// In-place dense Cholesky (lower), returns the factor or `None` if not SPD.
fn dense_cholesky(a: &mut [f64], n: usize) -> Option<Vec<f64>> {
    for j in 0..n {
        for k in 0..j {
            let ljk = a[j * n + k];
            for i in j..n {
                a[i * n + j] -= a[i * n + k] * ljk;
            }
        }
        let d = a[j * n + j];
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let s = d.sqrt();
        for i in j..n {
            a[i * n + j] /= s;
        }
    }
    // Zero strict upper triangle for cleanliness.
    for i in 0..n {
        for j in (i + 1)..n {
            a[i * n + j] = 0.0;
        }
    }
    Some(a.to_vec())
}

fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        for j in 0..i {
            b[i] -= l[i * n + j] * b[j];
        }
        b[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for j in (i + 1)..n {
            b[i] -= l[j * n + i] * b[j];
        }
        b[i] /= l[i * n + i];
    }
}

fn project_off_constants(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for vi in v.iter_mut() {
        *vi -= mean;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Preconditioned conjugate gradients, optionally deflated.
///
/// Converges when ‖b − Ax‖₂ ≤ rel_tolerance · max(‖b‖₂, 1e-30); a zero
/// right-hand side returns the (projected) initial guess immediately. The
/// iteration is deterministic for identical inputs.
pub fn pcg_solve(
    a: &SparseSpd,
    b: &[f64],
    initial_guess: &[f64],
    config: &SolverConfig,
) -> Result<PcgSolution, SolveError> {
    let n = a.dim();
    if b.len() != n || initial_guess.len() != n {
        return Err(SolveError::DimensionMismatch {
            n,
            len: b.len().min(initial_guess.len()),
        });
    }
    let max_iterations = config.max_iterations.unwrap_or(10 * n.max(1));
    let project = config.null_space == NullSpace::Constants;

    let deflation = match config.preconditioner {
        Preconditioner::DeflatedJacobi => {
            let groups = config.deflation_groups.as_ref().ok_or_else(|| {
                SolveError::InvalidDeflation("deflated-jacobi requires a group map".to_string())
            })?;
            Some(build_deflation(a, groups, config.null_space)?)
        }
        Preconditioner::Jacobi => None,
    };

    let mut rhs = b.to_vec();
    if project {
        project_off_constants(&mut rhs);
    }
    let b_norm = norm(&rhs).max(1e-30);

    let mut x = initial_guess.to_vec();
    if project {
        project_off_constants(&mut x);
    }

    // Zero right-hand side: return the (projected) initial guess untouched.
    if norm(&rhs) == 0.0 {
        return Ok(PcgSolution {
            x,
            iterations: 0,
            final_residual: 0.0,
            residual_history: vec![0.0],
        });
    }

    let inv_diag: Vec<f64> = a.diagonal().iter().map(|&d| 1.0 / d).collect();

    let mut ax = vec![0.0; n];
    a.mul_vec(&x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();

    // Coarse correction of the initial guess; afterwards Wᵀr = 0 and CG runs
    // on the deflated operator (I - AQ) A.
    let mut scratch = vec![0.0; n];
    if let Some(defl) = &deflation {
        defl.coarse_correct(&r, &mut scratch);
        for i in 0..n {
            x[i] += scratch[i];
        }
        a.mul_vec(&x, &mut ax);
        for i in 0..n {
            r[i] = rhs[i] - ax[i];
        }
    }
    if project {
        project_off_constants(&mut r);
    }

    let mut history = Vec::new();
    let rel0 = norm(&r) / b_norm;
    history.push(rel0);
    if rel0 <= config.rel_tolerance {
        return Ok(finish(a, x, &rhs, b_norm, 0, history, &deflation, project));
    }

    let apply_deflated = |v: &[f64], out: &mut [f64], defl: &Option<Deflation>, tmp: &mut [f64]| {
        a.mul_vec(v, out);
        if let Some(d) = defl {
            // out <- (I - A Q) out
            d.coarse_correct(out, tmp);
            let mut aq = vec![0.0; out.len()];
            a.mul_vec(tmp, &mut aq);
            for i in 0..out.len() {
                out[i] -= aq[i];
            }
        }
    };

    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    if project {
        project_off_constants(&mut z);
    }
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![0.0; n];

    for it in 1..=max_iterations {
        apply_deflated(&p, &mut q, &deflation, &mut scratch);
        let pq = dot(&p, &q);
        if !pq.is_finite() || pq <= 0.0 {
            return Err(SolveError::Breakdown(it));
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        if project {
            project_off_constants(&mut r);
        }
        let rel = norm(&r) / b_norm;
        history.push(rel);
        if !rel.is_finite() {
            return Err(SolveError::Breakdown(it));
        }
        if rel <= config.rel_tolerance {
            return Ok(finish(a, x, &rhs, b_norm, it, history, &deflation, project));
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        if project {
            project_off_constants(&mut z);
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }

    let residual = *history.last().unwrap();
    Err(SolveError::NotConverged {
        iterations: max_iterations,
        residual,
        partial: x,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish(
    a: &SparseSpd,
    x: Vec<f64>,
    rhs: &[f64],
    b_norm: f64,
    iterations: usize,
    history: Vec<f64>,
    deflation: &Option<Deflation>,
    project: bool,
) -> PcgSolution {
    let n = a.dim();
    let mut x = x;
    // Fold the deflated component back in: x <- Q b + (I - Q A) x.
    if let Some(defl) = deflation {
        let mut ax = vec![0.0; n];
        a.mul_vec(&x, &mut ax);
        let resid: Vec<f64> = rhs.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let mut corr = vec![0.0; n];
        defl.coarse_correct(&resid, &mut corr);
        for i in 0..n {
            x[i] += corr[i];
        }
    }
    if project {
        project_off_constants(&mut x);
    }
    let mut ax = vec![0.0; n];
    a.mul_vec(&x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    if project {
        project_off_constants(&mut r);
    }
    let final_residual = norm(&r) / b_norm;
    PcgSolution {
        x,
        iterations,
        final_residual,
        residual_history: history,
    }
}

/// Geometric node-to-group map for an annular point cloud: `n_sectors`
/// angular sectors times `n_bands` radial bands.
pub fn polar_groups(coords: &[Vec2], n_sectors: usize, n_bands: usize) -> Vec<usize> {
    assert!(n_sectors >= 1 && n_bands >= 1);
    let (mut r_min, mut r_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in coords {
        let r = c.norm();
        r_min = r_min.min(r);
        r_max = r_max.max(r);
    }
    let span = (r_max - r_min).max(1e-300);
    coords
        .iter()
        .map(|c| {
            let th = c.y.atan2(c.x).rem_euclid(2.0 * std::f64::consts::PI);
            let sector =
                ((th / (2.0 * std::f64::consts::PI) * n_sectors as f64) as usize).min(n_sectors - 1);
            let band = (((c.norm() - r_min) / span * n_bands as f64) as usize).min(n_bands - 1);
            sector * n_bands + band
        })
        .collect()
}
