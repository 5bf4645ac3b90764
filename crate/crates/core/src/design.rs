//! Design matrix assembly, the multi-index-banded Gram matrix, the banded
//! posterior precision, and a profile (skyline) Cholesky solver.
//!
//! Matrices over the tensor basis are indexed by multi-indices flattened
//! lexicographically (last axis fastest). A matrix that is `h`-banded per
//! axis has all its nonzeros inside a flattened envelope of bandwidth
//! `w = sum_k h_k * stride_k`; the profile storage keeps exactly that
//! envelope, which is also the fill envelope of the Cholesky factor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, SparseBasisVector};
use crate::error::{Error, Result};
use crate::stats::KahanSum;

/// Sparse per-observation rows of the design matrix `B`.
#[derive(Clone, Debug)]
pub struct DesignMatrix {
    spec: BasisSpec,
    rows: Vec<SparseBasisVector>,
}

impl DesignMatrix {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn row(&self, i: usize) -> &SparseBasisVector {
        &self.rows[i]
    }

    /// `B theta`.
    pub fn mul_coeff(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let j = self.spec.total_basis();
        if theta.len() != j {
            return Err(Error::SizeMismatch {
                expected: j,
                found: theta.len(),
            });
        }
        let dims = self.spec.basis_counts();
        Ok(self
            .rows
            .iter()
            .map(|row| row.iter_flat(&dims).map(|(c, v)| v * theta[c]).sum())
            .collect())
    }

    /// `B^T y`, accumulated with compensated summation.
    pub fn transpose_mul(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.n() {
            return Err(Error::SizeMismatch {
                expected: self.n(),
                found: y.len(),
            });
        }
        let dims = self.spec.basis_counts();
        let j = self.spec.total_basis();
        let mut acc = vec![KahanSum::new(); j];
        for (row, &yi) in self.rows.iter().zip(y) {
            for (c, v) in row.iter_flat(&dims) {
                acc[c].add(v * yi);
            }
        }
        Ok(acc.into_iter().map(|a| a.value()).collect())
    }
}

/// Evaluate the full-order tensor basis at every observation.
pub fn build_design(spec: &BasisSpec, points: &[Vec<f64>]) -> Result<DesignMatrix> {
    let r = vec![0; spec.dim()];
    let mut rows = Vec::with_capacity(points.len());
    for (i, x) in points.iter().enumerate() {
        let sb = spec.eval_tensor_basis(x, &r).map_err(|e| match e {
            Error::Domain { value, .. } => Error::Domain {
                index: Some(i),
                value,
            },
            other => other,
        })?;
        rows.push(sb);
    }
    Ok(DesignMatrix {
        spec: spec.clone(),
        rows,
    })
}

/// Symmetric matrix over the tensor index set, banded per axis, stored as a
/// flattened lower band profile.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BandedSymMatrix {
    dims: Vec<usize>,
    band: Vec<usize>,
    size: usize,
    /// Flattened bandwidth of the stored profile.
    w: usize,
    /// Row-major lower profile: entry `(i, j)` with `0 <= i - j <= w` lives at
    /// `i * (w + 1) + (w - (i - j))`.
    data: Vec<f64>,
}

impl BandedSymMatrix {
    pub fn zeros(dims: &[usize], band: &[usize]) -> Self {
        assert_eq!(dims.len(), band.len());
        let size: usize = dims.iter().product();
        let strides = crate::basis::strides(dims);
        let w: usize = band
            .iter()
            .zip(&strides)
            .zip(dims)
            .map(|((h, s), d)| h.min(&(d - 1)) * s)
            .sum::<usize>()
            .min(size.saturating_sub(1));
        Self {
            dims: dims.to_vec(),
            band: band.to_vec(),
            size,
            w,
            data: vec![0.0; size * (w + 1)],
        }
    }

    pub fn identity(dims: &[usize]) -> Self {
        Self::scaled_identity(dims, 1.0)
    }

    pub fn scaled_identity(dims: &[usize], c: f64) -> Self {
        let band = vec![0; dims.len()];
        let mut m = Self::zeros(dims, &band);
        for i in 0..m.size {
            m.data[i * (m.w + 1) + m.w] = c;
        }
        m
    }

    /// Fill within the band from a symmetric function of flat indices.
    pub fn from_fn(dims: &[usize], band: &[usize], mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dims, band);
        for i in 0..m.size {
            for j in i.saturating_sub(m.w)..=i {
                if m.within_band(i, j) {
                    m.set(i, j, f(i, j));
                }
            }
        }
        m
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn band(&self) -> &[usize] {
        &self.band
    }

    pub fn flat_bandwidth(&self) -> usize {
        self.w
    }

    /// True when `|u_k - v_k| <= h_k` on every axis.
    #[inline]
    pub fn within_band(&self, i: usize, j: usize) -> bool {
        let (mut a, mut b) = (i, j);
        for k in (0..self.dims.len()).rev() {
            let d = self.dims[k];
            let (ca, cb) = (a % d, b % d);
            if ca.abs_diff(cb) > self.band[k] {
                return false;
            }
            a /= d;
            b /= d;
        }
        true
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i >= j && i - j <= self.w);
        i * (self.w + 1) + (self.w - (i - j))
    }

    /// Entry `(i, j)`; exact zero outside the per-axis band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        if hi - lo > self.w || !self.within_band(hi, lo) {
            return 0.0;
        }
        self.data[self.idx(hi, lo)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        assert!(
            hi - lo <= self.w && self.within_band(hi, lo),
            "entry ({i},{j}) outside the band"
        );
        let at = self.idx(hi, lo);
        self.data[at] = v;
    }

    /// Profile value ignoring per-axis banding (used by the factorization,
    /// structural zeros read as 0).
    #[inline]
    fn profile_get(&self, i: usize, j: usize) -> f64 {
        if i - j > self.w {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.size).map(|i| self.profile_get(i, i)).sum()
    }

    /// Lower-triangle entries inside the per-axis band.
    pub fn banded_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.size).flat_map(move |i| {
            (i.saturating_sub(self.w)..=i).filter_map(move |j| {
                if self.within_band(i, j) {
                    Some((i, j, self.data[self.idx(i, j)]))
                } else {
                    None
                }
            })
        })
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.size]; self.size];
        for (i, j, v) in self.banded_entries() {
            out[i][j] = v;
            out[j][i] = v;
        }
        out
    }

    /// Matrix-vector product (symmetric, band-aware).
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.size {
            return Err(Error::SizeMismatch {
                expected: self.size,
                found: x.len(),
            });
        }
        let mut out = vec![0.0; self.size];
        for (i, j, v) in self.banded_entries() {
            out[i] += v * x[j];
            if i != j {
                out[j] += v * x[i];
            }
        }
        Ok(out)
    }
}

/// The banded Gram matrix `B^T B`, assembled with compensated summation;
/// declared band is `q` per axis (entries beyond basis overlap are exact
/// zeros).
pub fn gram(b: &DesignMatrix) -> BandedSymMatrix {
    let dims = b.spec().basis_counts();
    let band = b.spec().orders();
    let mut m = BandedSymMatrix::zeros(&dims, &band);
    let mut comp = vec![0.0; m.data.len()];
    for row in &b.rows {
        let entries: Vec<(usize, f64)> = row.iter_flat(&dims).collect();
        for (a_pos, &(ia, va)) in entries.iter().enumerate() {
            for &(ib, vb) in &entries[..=a_pos] {
                let (hi, lo) = if ia >= ib { (ia, ib) } else { (ib, ia) };
                let at = m.idx(hi, lo);
                // Kahan step on the stored cell.
                let y = va * vb - comp[at];
                let t = m.data[at] + y;
                comp[at] = (t - m.data[at]) - y;
                m.data[at] = t;
            }
        }
    }
    m
}

/// `B^T B + Omega^{-1}` with the per-axis band union.
pub fn add_prior_precision(
    g: &BandedSymMatrix,
    omega_inv: &BandedSymMatrix,
) -> Result<BandedSymMatrix> {
    if g.dims != omega_inv.dims {
        return Err(Error::SizeMismatch {
            expected: g.size,
            found: omega_inv.size,
        });
    }
    let band: Vec<usize> = g
        .band
        .iter()
        .zip(&omega_inv.band)
        .map(|(a, b)| *a.max(b))
        .collect();
    let mut out = BandedSymMatrix::zeros(&g.dims, &band);
    for (i, j, v) in g.banded_entries() {
        if v != 0.0 {
            let at = out.idx(i, j);
            out.data[at] += v;
        }
    }
    for (i, j, v) in omega_inv.banded_entries() {
        if v != 0.0 {
            let at = out.idx(i, j);
            out.data[at] += v;
        }
    }
    Ok(out)
}

/// Lower-triangular profile Cholesky factor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BandedCholesky {
    size: usize,
    /// Fill bandwidth (flattened) of the factor.
    w: usize,
    data: Vec<f64>,
}

impl BandedCholesky {
    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.w + 1) + (self.w - (i - j))
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn fill_bandwidth(&self) -> usize {
        self.w
    }

    pub fn factor_entry(&self, i: usize, j: usize) -> f64 {
        if j > i || i - j > self.w {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Solve `L z = rhs`.
    pub fn solve_lower(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        self.check_len(rhs)?;
        let mut z = rhs.to_vec();
        self.solve_lower_in_place(&mut z, 0);
        Ok(z)
    }

    fn check_len(&self, rhs: &[f64]) -> Result<()> {
        if rhs.len() != self.size {
            return Err(Error::SizeMismatch {
                expected: self.size,
                found: rhs.len(),
            });
        }
        Ok(())
    }

    /// `|| L^{-1} u ||^2` for a scattered right-hand side given as `(index,
    /// value)` increments; `buf` is scratch reused across calls.
    pub fn norm_sq_solve_lower_scatter<I>(&self, entries: I, buf: &mut Vec<f64>) -> f64
    where
        I: IntoIterator<Item = (usize, f64)>,
    {
        buf.clear();
        buf.resize(self.size, 0.0);
        let mut first = self.size;
        for (i, v) in entries {
            buf[i] += v;
            first = first.min(i);
        }
        self.solve_lower_in_place(buf, first);
        buf[first..].iter().map(|z| z * z).sum()
    }

    #[inline]
    pub(crate) fn solve_lower_in_place(&self, z: &mut [f64], first_nonzero: usize) {
        for i in first_nonzero..self.size {
            let j0 = i.saturating_sub(self.w).max(first_nonzero);
            let mut s = z[i];
            for j in j0..i {
                s -= self.data[self.idx(i, j)] * z[j];
            }
            z[i] = s / self.data[self.idx(i, i)];
        }
    }

    /// Solve `L^T z = rhs`.
    pub fn solve_lower_transpose(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        self.check_len(rhs)?;
        let mut z = rhs.to_vec();
        for i in (0..self.size).rev() {
            let mut s = z[i];
            let jmax = (i + self.w).min(self.size - 1);
            for j in i + 1..=jmax {
                s -= self.data[self.idx(j, i)] * z[j];
            }
            z[i] = s / self.data[self.idx(i, i)];
        }
        Ok(z)
    }

    /// Solve `L L^T x = rhs`.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let z = self.solve_lower(rhs)?;
        self.solve_lower_transpose(&z)
    }

    /// Solve for several right-hand sides.
    pub fn solve_many(&self, columns: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        columns.iter().map(|c| self.solve(c)).collect()
    }

    /// `|| L^{-1} b ||^2` for a right-hand side that is zero before `start`;
    /// `buf` is scratch reused across calls. This is the workhorse for hat
    /// diagonals and pointwise posterior variances.
    pub fn norm_sq_solve_lower_sparse(&self, start: usize, vals: &[f64], buf: &mut Vec<f64>) -> f64 {
        buf.clear();
        buf.resize(self.size, 0.0);
        for (o, v) in vals.iter().enumerate() {
            buf[start + o] = *v;
        }
        self.solve_lower_in_place(buf, start);
        buf[start..].iter().map(|z| z * z).sum()
    }
}

/// Profile Cholesky of a symmetric positive definite banded matrix.
/// Cost `O(J w^2)`; a non-positive pivot reports its index.
pub fn factorize(p: &BandedSymMatrix) -> Result<BandedCholesky> {
    let size = p.size;
    let w = p.w;
    let mut l = BandedCholesky {
        size,
        w,
        data: vec![0.0; size * (w + 1)],
    };
    for i in 0..size {
        let j0 = i.saturating_sub(w);
        for j in j0..=i {
            let mut s = p.profile_get(i, j);
            let kmin = j0.max(j.saturating_sub(w));
            for k in kmin..j {
                s -= l.data[l.idx(i, k)] * l.data[l.idx(j, k)];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::Factorization { pivot: i });
                }
                let at = l.idx(i, i);
                l.data[at] = s.sqrt();
            } else {
                let diag = l.data[l.idx(j, j)];
                let at = l.idx(i, j);
                l.data[at] = s / diag;
            }
        }
    }
    Ok(l)
}

/// Factorize, retrying with diagonal jitter `1e-10 * trace / J` (escalated
/// tenfold per attempt, at most 3 retries) before giving up.
pub fn factorize_with_jitter(p: &BandedSymMatrix) -> Result<BandedCholesky> {
    match factorize(p) {
        Ok(l) => Ok(l),
        Err(first) => {
            let base = 1e-10 * p.trace() / p.size.max(1) as f64;
            let mut jittered = p.clone();
            for attempt in 0..3u32 {
                let eps = base * 10f64.powi(attempt as i32);
                for i in 0..jittered.size {
                    let at = jittered.idx(i, i);
                    jittered.data[at] = p.data[p.idx(i, i)] + eps;
                }
                if let Ok(l) = factorize(&jittered) {
                    return Ok(l);
                }
            }
            Err(first)
        }
    }
}

/// Exact sup distance between the empirical CDF of `points` and the uniform
/// product measure on `[0,1]^d`, by enumeration over candidate corners.
/// Supported for `d <= 3`.
pub fn empirical_cdf_sup_distance(points: &[Vec<f64>]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Parameter("need at least one point".into()));
    }
    let d = points[0].len();
    if d == 0 || d > 3 {
        return Err(Error::Parameter(format!(
            "sup-distance enumeration supports 1 <= d <= 3, got {d}"
        )));
    }
    let n = points.len() as f64;
    if d == 1 {
        let mut xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let m = xs.len();
        let mut sup = 0.0f64;
        for (i, &x) in xs.iter().enumerate() {
            sup = sup.max(((i + 1) as f64 / n - x).abs());
            sup = sup.max((x - i as f64 / n).abs());
        }
        let _ = m;
        return Ok(sup);
    }

    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(d);
    for k in 0..d {
        let mut v: Vec<f64> = points.iter().map(|p| p[k]).collect();
        v.push(1.0);
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        v.dedup();
        axes.push(v);
    }
    let mut sup = 0.0f64;
    let mut corner = vec![0usize; d];
    'outer: loop {
        let c: Vec<f64> = corner.iter().enumerate().map(|(k, &i)| axes[k][i]).collect();
        let g: f64 = c.iter().product();
        for mask in 0..(1u32 << d) {
            let count = points
                .iter()
                .filter(|p| {
                    p.iter().enumerate().all(|(k, &xk)| {
                        if mask & (1 << k) != 0 {
                            xk < c[k]
                        } else {
                            xk <= c[k]
                        }
                    })
                })
                .count();
            sup = sup.max((count as f64 / n - g).abs());
        }
        for k in (0..d).rev() {
            corner[k] += 1;
            if corner[k] < axes[k].len() {
                continue 'outer;
            }
            corner[k] = 0;
            if k == 0 {
                break 'outer;
            }
        }
    }
    Ok(sup)
}

/// A data set read from CSV: covariate columns in `[0,1]^d` plus a response.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub covariate_names: Vec<String>,
    pub response_name: String,
}

/// Read a headered CSV. The response column is selected by name when given,
/// otherwise the last column is used; all remaining columns are covariates.
pub fn read_data_csv(path: &Path, response: Option<&str>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Csv {
            line: 0,
            msg: e.to_string(),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Csv {
            line: 1,
            msg: e.to_string(),
        })?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if headers.len() < 2 {
        return Err(Error::Csv {
            line: 1,
            msg: format!(
                "need at least one covariate column and one response column, found {}",
                headers.len()
            ),
        });
    }
    let resp_idx = match response {
        Some(name) => headers.iter().position(|h| h == name).ok_or_else(|| Error::Csv {
            line: 1,
            msg: format!("missing response column '{name}'"),
        })?,
        None => headers.len() - 1,
    };
    let covariate_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != resp_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut x = Vec::new();
    let mut y = Vec::new();
    for (rec_no, record) in reader.records().enumerate() {
        let line = rec_no + 2; // header is line 1
        let record = record.map_err(|e| Error::Csv {
            line,
            msg: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Csv {
                line,
                msg: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let mut row = Vec::with_capacity(headers.len() - 1);
        let mut resp = f64::NAN;
        for (i, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Csv {
                line,
                msg: format!("field '{}' in column '{}' is not a number", field, headers[i]),
            })?;
            if i == resp_idx {
                resp = v;
            } else {
                row.push(v);
            }
        }
        for &v in &row {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain {
                    index: Some(rec_no),
                    value: v,
                });
            }
        }
        x.push(row);
        y.push(resp);
    }
    Ok(Dataset {
        x,
        y,
        covariate_names,
        response_name: headers[resp_idx].clone(),
    })
}
