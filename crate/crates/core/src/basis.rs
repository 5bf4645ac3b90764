//! Knot sequences and evaluation of univariate and tensor-product B-spline
//! bases, including the lower-order bases that carry derivatives.
//!
//! Conventions fixed here and used everywhere else:
//! * Per axis, interior knots `0 = t_0 < t_1 < ... < t_N < t_{N+1} = 1` are
//!   extended with `q-1` exterior knots on each side. The basis function
//!   `B_{j,q}` (1-based index `j = 1..=J`, `J = q + N`) is supported on
//!   `[t_{j-q}, t_j]`. In the stored 0-based array the full sequence has
//!   length `N + 2q` and basis index `a = j - 1` is supported on array span
//!   `[a, a + q]`.
//! * Multi-indices flatten lexicographically with the last axis
//!   fastest-varying.
//! * Evaluation at `x = 1` treats the last knot span as closed, so the basis
//!   still sums to one at the right boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boundary extension of the knot sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryScheme {
    /// Endpoints repeated to multiplicity `q` (the usual regression spline
    /// construction; the simulation preset uses this).
    Clamped,
    /// Simple exterior knots continuing the adjacent interior spacing
    /// (quasi-uniform extension).
    OpenQuasiUniform,
}

/// A univariate extended knot sequence for B-splines of a fixed order.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "KnotVectorRepr", into = "KnotVectorRepr")]
pub struct KnotVector {
    order: usize,
    interior: Vec<f64>,
    scheme: BoundaryScheme,
    full: Vec<f64>,
}

/// Serialized form: the full sequence is derived, not stored.
#[derive(Serialize, Deserialize)]
struct KnotVectorRepr {
    order: usize,
    interior_knots: Vec<f64>,
    boundary_scheme: BoundaryScheme,
}

impl TryFrom<KnotVectorRepr> for KnotVector {
    type Error = Error;
    fn try_from(r: KnotVectorRepr) -> Result<Self> {
        KnotVector::from_interior(r.order, r.interior_knots, r.boundary_scheme)
    }
}

impl From<KnotVector> for KnotVectorRepr {
    fn from(kv: KnotVector) -> Self {
        KnotVectorRepr {
            order: kv.order,
            interior_knots: kv.interior,
            boundary_scheme: kv.scheme,
        }
    }
}

impl KnotVector {
    /// Build from explicit interior knots, which must be strictly increasing
    /// and lie in the open unit interval.
    pub fn from_interior(
        order: usize,
        interior: Vec<f64>,
        scheme: BoundaryScheme,
    ) -> Result<Self> {
        if order < 1 {
            return Err(Error::Parameter(format!(
                "spline order must be at least 1, got {order}"
            )));
        }
        for w in interior.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::Parameter(
                    "interior knots must be strictly increasing".into(),
                ));
            }
        }
        if interior
            .iter()
            .any(|&t| !t.is_finite() || t <= 0.0 || t >= 1.0)
        {
            return Err(Error::Parameter(
                "interior knots must lie strictly inside (0,1)".into(),
            ));
        }

        let n = interior.len();
        let pad = order - 1;
        let mut full = Vec::with_capacity(n + 2 * order);
        match scheme {
            BoundaryScheme::Clamped => {
                full.extend(std::iter::repeat(0.0).take(pad));
            }
            BoundaryScheme::OpenQuasiUniform => {
                let delta = interior.first().copied().unwrap_or(1.0);
                for j in (1..=pad).rev() {
                    full.push(-(j as f64) * delta);
                }
            }
        }
        full.push(0.0);
        full.extend_from_slice(&interior);
        full.push(1.0);
        match scheme {
            BoundaryScheme::Clamped => {
                full.extend(std::iter::repeat(1.0).take(pad));
            }
            BoundaryScheme::OpenQuasiUniform => {
                let delta = 1.0 - interior.last().copied().unwrap_or(0.0);
                for j in 1..=pad {
                    full.push(1.0 + j as f64 * delta);
                }
            }
        }
        Ok(Self {
            order,
            interior,
            scheme,
            full,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn scheme(&self) -> BoundaryScheme {
        self.scheme
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior
    }

    /// Number of basis functions `J = q + N`.
    pub fn basis_count(&self) -> usize {
        self.order + self.interior.len()
    }

    /// The full extended sequence, ascending, length `N + 2q`.
    pub fn full_sequence(&self) -> &[f64] {
        &self.full
    }

    /// Knot by 1-based "paper" index; valid for `1-q <= i <= N+q`.
    #[inline]
    pub(crate) fn knot(&self, paper_index: isize) -> f64 {
        self.full[(paper_index + self.order as isize - 1) as usize]
    }

    /// Largest span between consecutive knots of `[0,1]`.
    pub fn mesh_size(&self) -> f64 {
        self.spans().fold(0.0, f64::max)
    }

    /// max span / min span over the `N+1` spans partitioning `[0,1]`.
    pub fn quasi_uniformity_ratio(&self) -> f64 {
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for s in self.spans() {
            lo = lo.min(s);
            hi = hi.max(s);
        }
        hi / lo
    }

    fn spans(&self) -> impl Iterator<Item = f64> + '_ {
        let pad = self.order - 1;
        let n = self.interior.len();
        (pad..pad + n + 1).map(move |i| self.full[i + 1] - self.full[i])
    }

    /// 1-based index `l` of the span `[t_{l-1}, t_l)` containing `x`, with
    /// the last span closed at `x = 1`.
    #[inline]
    fn span_of(&self, x: f64) -> usize {
        self.interior.partition_point(|&t| t <= x) + 1
    }
}

/// Uniform interior knots `t_l = l/(N+1)` with the requested boundary
/// extension. `n_interior` may be zero (single-span / Bernstein case).
pub fn make_knots(order: usize, n_interior: usize, scheme: BoundaryScheme) -> Result<KnotVector> {
    if order < 1 {
        return Err(Error::Parameter(format!(
            "spline order must be at least 1, got {order}"
        )));
    }
    let denom = (n_interior + 1) as f64;
    let interior = (1..=n_interior).map(|l| l as f64 / denom).collect();
    KnotVector::from_interior(order, interior, scheme)
}

/// Evaluate the `q - deriv_drop` order B-spline family active at `x` on the
/// extended sequence of `kv`. Returns the 0-based index of the first active
/// function in that family plus the `q - deriv_drop` active values
/// (Cox-de Boor recursion).
pub fn eval_axis_basis(kv: &KnotVector, x: f64, deriv_drop: usize) -> Result<(usize, Vec<f64>)> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain {
            index: None,
            value: x,
        });
    }
    let q = kv.order;
    if deriv_drop >= q {
        return Err(Error::UnsupportedOrder {
            r: deriv_drop,
            q,
        });
    }
    let degree = q - deriv_drop - 1;
    let l = kv.span_of(x);
    let span = l + q - 2; // array index: full[span] <= x < full[span + 1]
    let t = &kv.full;

    let mut values = vec![0.0; degree + 1];
    values[0] = 1.0;
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    for j in 1..=degree {
        left[j] = x - t[span + 1 - j];
        right[j] = t[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom != 0.0 { values[r] / denom } else { 0.0 };
            values[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        values[j] = saved;
    }
    Ok((l - 1, values))
}

/// A multi-index into the tensor basis, 0-based per axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiIndex {
    pub coords: Vec<usize>,
}

impl MultiIndex {
    pub fn new(coords: Vec<usize>) -> Self {
        Self { coords }
    }

    /// Lexicographic flattening, last axis fastest-varying.
    pub fn flatten(&self, dims: &[usize]) -> usize {
        debug_assert_eq!(self.coords.len(), dims.len());
        let mut flat = 0;
        for (c, d) in self.coords.iter().zip(dims) {
            debug_assert!(c < d);
            flat = flat * d + c;
        }
        flat
    }

    pub fn unflatten(mut flat: usize, dims: &[usize]) -> Self {
        let mut coords = vec![0; dims.len()];
        for k in (0..dims.len()).rev() {
            coords[k] = flat % dims[k];
            flat /= dims[k];
        }
        Self { coords }
    }
}

/// Strides for the fixed lexicographic order (last axis stride 1).
pub fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for k in (0..dims.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * dims[k + 1];
    }
    s
}

/// The nonzero block of a tensor basis evaluation: per-axis start indices
/// and the dense outer-product block in lexicographic order.
#[derive(Clone, Debug)]
pub struct SparseBasisVector {
    pub start: MultiIndex,
    /// Per-axis block widths (`q_k - r_k`).
    pub widths: Vec<usize>,
    /// `prod(widths)` values, last axis fastest.
    pub values: Vec<f64>,
}

impl SparseBasisVector {
    pub fn sum(&self) -> f64 {
        crate::stats::kahan_sum(&self.values)
    }

    /// Iterate `(flat index in a tensor family with dims, value)`.
    pub fn iter_flat<'a>(&'a self, dims: &'a [usize]) -> impl Iterator<Item = (usize, f64)> + 'a {
        let strides = strides(dims);
        let base: usize = self
            .start
            .coords
            .iter()
            .zip(&strides)
            .map(|(c, s)| c * s)
            .sum();
        BlockIter::new(&self.widths).map(move |offsets| {
            let flat = base
                + offsets
                    .iter()
                    .zip(&strides)
                    .map(|(o, s)| o * s)
                    .sum::<usize>();
            let vidx = offsets
                .iter()
                .zip(&self.widths)
                .fold(0, |acc, (o, w)| acc * w + o);
            (flat, self.values[vidx])
        })
    }
}

/// Odometer over a dense block of per-axis widths, lexicographic order.
pub(crate) struct BlockIter {
    widths: Vec<usize>,
    next: Option<Vec<usize>>,
}

impl BlockIter {
    pub(crate) fn new(widths: &[usize]) -> Self {
        let next = if widths.iter().all(|&w| w > 0) {
            Some(vec![0; widths.len()])
        } else {
            None
        };
        Self {
            widths: widths.to_vec(),
            next,
        }
    }
}

impl Iterator for BlockIter {
    type Item = Vec<usize>;
    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.next.clone()?;
        let mut bumped = false;
        let mut next = current.clone();
        for k in (0..self.widths.len()).rev() {
            next[k] += 1;
            if next[k] < self.widths[k] {
                bumped = true;
                break;
            }
            next[k] = 0;
        }
        self.next = if bumped { Some(next) } else { None };
        Some(current)
    }
}

/// The tensor-product B-spline dictionary: one knot vector per axis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BasisSpec {
    axes: Vec<KnotVector>,
}

impl BasisSpec {
    pub fn new(axes: Vec<KnotVector>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Parameter("need at least one axis".into()));
        }
        Ok(Self { axes })
    }

    /// Uniform knots with the same order and interior count on every axis.
    pub fn uniform(d: usize, order: usize, n_interior: usize, scheme: BoundaryScheme) -> Result<Self> {
        let axis = make_knots(order, n_interior, scheme)?;
        Ok(Self {
            axes: vec![axis; d],
        })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[KnotVector] {
        &self.axes
    }

    pub fn axis(&self, k: usize) -> &KnotVector {
        &self.axes[k]
    }

    pub fn orders(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.order()).collect()
    }

    /// Per-axis basis counts `J_k`.
    pub fn basis_counts(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.basis_count()).collect()
    }

    /// Total basis size `J = prod J_k`.
    pub fn total_basis(&self) -> usize {
        self.axes.iter().map(|a| a.basis_count()).product()
    }

    fn check_deriv(&self, r: &[usize]) -> Result<()> {
        if r.len() != self.dim() {
            return Err(Error::SizeMismatch {
                expected: self.dim(),
                found: r.len(),
            });
        }
        for (rk, kv) in r.iter().zip(&self.axes) {
            if *rk >= kv.order() {
                return Err(Error::UnsupportedOrder {
                    r: *rk,
                    q: kv.order(),
                });
            }
        }
        Ok(())
    }

    /// Evaluate the active block of the lower-order tensor family
    /// `b_{J, q - r}` at `x`.
    pub fn eval_tensor_basis(&self, x: &[f64], r: &[usize]) -> Result<SparseBasisVector> {
        if x.len() != self.dim() {
            return Err(Error::SizeMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        self.check_deriv(r)?;
        let mut starts = Vec::with_capacity(self.dim());
        let mut per_axis = Vec::with_capacity(self.dim());
        for ((kv, &xk), &rk) in self.axes.iter().zip(x).zip(r) {
            let (s, v) = eval_axis_basis(kv, xk, rk)?;
            starts.push(s);
            per_axis.push(v);
        }
        let widths: Vec<usize> = per_axis.iter().map(|v| v.len()).collect();
        let mut values = Vec::with_capacity(widths.iter().product());
        for offsets in BlockIter::new(&widths) {
            let mut prod = 1.0;
            for (k, &o) in offsets.iter().enumerate() {
                prod *= per_axis[k][o];
            }
            values.push(prod);
        }
        Ok(SparseBasisVector {
            start: MultiIndex::new(starts),
            widths,
            values,
        })
    }
}
