//! The weighted finite-differencing operator that maps tensor B-spline
//! coefficients to the coefficients of a mixed partial derivative in the
//! lower-order tensor basis, and sparse evaluation of `D^r f`.

use crate::basis::{strides, BasisSpec, BlockIter, MultiIndex, SparseBasisVector};
use crate::error::{Error, Result};

/// One row of the operator: a dense block of `prod(r_k + 1)` weights whose
/// first column (in the flattened input indexing) is `start`.
#[derive(Clone, Debug)]
pub struct DerivRow {
    pub start: usize,
    pub weights: Vec<f64>,
}

/// Banded operator `W_r` with shape `prod(J_k - r_k) x prod(J_k)`.
///
/// Rows and columns are indexed by multi-indices; row `i` has its nonzero
/// block at columns `i + h` for `0 <= h <= r`, so the pattern is `r`-banded
/// in the multi-index sense.
#[derive(Clone, Debug)]
pub struct DerivOperator {
    r: Vec<usize>,
    in_dims: Vec<usize>,
    out_dims: Vec<usize>,
    /// Flattened input-index offsets of the weight block, shared by all rows.
    block_offsets: Vec<usize>,
    rows: Vec<DerivRow>,
}

impl DerivOperator {
    pub fn order(&self) -> &[usize] {
        &self.r
    }

    /// `(rows, cols) = (prod(J_k - r_k), prod(J_k))`.
    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.in_dims.iter().product())
    }

    pub fn out_dims(&self) -> &[usize] {
        &self.out_dims
    }

    pub fn row(&self, flat_out: usize) -> &DerivRow {
        &self.rows[flat_out]
    }

    /// Flattened input-index offsets of each row's weight block.
    pub fn block_offsets(&self) -> &[usize] {
        &self.block_offsets
    }

    /// `W_r * theta`.
    pub fn apply(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let (_, cols) = self.shape();
        if theta.len() != cols {
            return Err(Error::SizeMismatch {
                expected: cols,
                found: theta.len(),
            });
        }
        let out = self
            .rows
            .iter()
            .map(|row| {
                row.weights
                    .iter()
                    .zip(&self.block_offsets)
                    .map(|(w, off)| w * theta[row.start + off])
                    .sum()
            })
            .collect();
        Ok(out)
    }

    /// `W_r^T b` for a sparse lower-order basis block, returned dense with
    /// length `prod(J_k)`.
    pub fn transpose_mul_sparse(&self, b: &SparseBasisVector) -> Vec<f64> {
        let (_, cols) = self.shape();
        let mut out = vec![0.0; cols];
        for (flat_row, bval) in b.iter_flat(&self.out_dims) {
            if bval == 0.0 {
                continue;
            }
            let row = &self.rows[flat_row];
            for (w, off) in row.weights.iter().zip(&self.block_offsets) {
                out[row.start + off] += bval * w;
            }
        }
        out
    }
}

/// Per-axis differencing weights: rows of the one-axis operator taking the
/// order-`q - base_drop` family to the order-`q - base_drop - extra` family
/// on the same extended knot sequence. Row `j` (0-based, `J - base_drop -
/// extra` rows) holds weights for family columns `j..=j+extra`.
///
/// A zero knot-span denominator drops the whole difference term, matching
/// the classical convention for coincident knots.
fn axis_deriv_rows(
    kv: &crate::basis::KnotVector,
    base_drop: usize,
    extra: usize,
) -> Result<Vec<Vec<f64>>> {
    let q = kv.order();
    if base_drop + extra >= q {
        return Err(Error::UnsupportedOrder {
            r: base_drop + extra,
            q,
        });
    }
    let family_order = q - base_drop;
    let family_size = kv.basis_count() - base_drop;

    // Level u: rows j = 1..=family_size - u covering columns j..j+u.
    let mut rows: Vec<Vec<f64>> = vec![vec![1.0]; family_size];
    for u in 1..=extra {
        let mut next = Vec::with_capacity(family_size - u);
        for j in 1..=(family_size - u) {
            let den = kv.knot(j as isize) - kv.knot(j as isize - family_order as isize + u as isize);
            let factor = if den == 0.0 {
                0.0
            } else {
                (family_order - u) as f64 / den
            };
            let prev_lo = &rows[j - 1];
            let prev_hi = &rows[j];
            let mut w = vec![0.0; u + 1];
            for (c, wc) in w.iter_mut().enumerate() {
                let hi = if c >= 1 { prev_hi[c - 1] } else { 0.0 };
                let lo = if c <= u - 1 { prev_lo[c] } else { 0.0 };
                *wc = factor * (hi - lo);
            }
            next.push(w);
        }
        rows = next;
    }
    Ok(rows)
}

/// Build `W_r` for `spec`: the per-axis weighted finite differencing
/// operators composed coordinate-wise (Kronecker structure). `r = 0` yields
/// the identity.
pub fn build_deriv_operator(spec: &BasisSpec, r: &[usize]) -> Result<DerivOperator> {
    build_on_family(spec, &vec![0; spec.dim()], r)
}

/// Build the differencing operator acting on the intermediate family
/// `b_{J, q - base}` and dropping `extra` more orders. Used to check the
/// composition identity `W_{r+s} = W'_s W_r`; `build_deriv_operator` is the
/// `base = 0` case.
pub fn build_on_family(spec: &BasisSpec, base: &[usize], extra: &[usize]) -> Result<DerivOperator> {
    let d = spec.dim();
    if base.len() != d || extra.len() != d {
        return Err(Error::SizeMismatch {
            expected: d,
            found: base.len().max(extra.len()),
        });
    }
    let mut axis_tables = Vec::with_capacity(d);
    for k in 0..d {
        axis_tables.push(axis_deriv_rows(spec.axis(k), base[k], extra[k])?);
    }
    let in_dims: Vec<usize> = spec
        .basis_counts()
        .iter()
        .zip(base)
        .map(|(j, b)| j - b)
        .collect();
    let out_dims: Vec<usize> = in_dims.iter().zip(extra).map(|(j, r)| j - r).collect();
    let in_strides = strides(&in_dims);

    let widths: Vec<usize> = extra.iter().map(|r| r + 1).collect();
    let block_offsets: Vec<usize> = BlockIter::new(&widths)
        .map(|h| h.iter().zip(&in_strides).map(|(o, s)| o * s).sum())
        .collect();

    let n_rows: usize = out_dims.iter().product();
    let mut rows = Vec::with_capacity(n_rows);
    for flat in 0..n_rows {
        let mi = MultiIndex::unflatten(flat, &out_dims);
        let start: usize = mi
            .coords
            .iter()
            .zip(&in_strides)
            .map(|(c, s)| c * s)
            .sum();
        let weights: Vec<f64> = BlockIter::new(&widths)
            .map(|h| {
                let mut w = 1.0;
                for k in 0..d {
                    w *= axis_tables[k][mi.coords[k]][h[k]];
                }
                w
            })
            .collect();
        rows.push(DerivRow { start, weights });
    }
    Ok(DerivOperator {
        r: extra.to_vec(),
        in_dims,
        out_dims,
        block_offsets,
        rows,
    })
}

/// `D^r f(x) = b_{J, q-r}(x)^T W_r theta`, computed through the active block
/// only; cost is independent of the total basis size.
pub fn eval_derivative(
    spec: &BasisSpec,
    wr: &DerivOperator,
    theta: &[f64],
    x: &[f64],
) -> Result<f64> {
    let (_, cols) = wr.shape();
    if theta.len() != cols {
        return Err(Error::SizeMismatch {
            expected: cols,
            found: theta.len(),
        });
    }
    let sb = spec.eval_tensor_basis(x, wr.order())?;
    let mut acc = 0.0;
    for (flat_row, bval) in sb.iter_flat(&wr.out_dims) {
        if bval == 0.0 {
            continue;
        }
        let row = &wr.rows[flat_row];
        let mut dot = 0.0;
        for (w, off) in row.weights.iter().zip(&wr.block_offsets) {
            dot += w * theta[row.start + off];
        }
        acc += bval * dot;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{make_knots, BasisSpec, BoundaryScheme};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn spec1(q: usize, n: usize, scheme: BoundaryScheme) -> BasisSpec {
        BasisSpec::new(vec![make_knots(q, n, scheme).unwrap()]).unwrap()
    }

    fn eval_f(spec: &BasisSpec, theta: &[f64], x: &[f64], r: &[usize]) -> f64 {
        let wr = build_deriv_operator(spec, r).unwrap();
        eval_derivative(spec, &wr, theta, x).unwrap()
    }

    #[test]
    fn zero_order_is_identity() {
        let spec = BasisSpec::uniform(2, 3, 2, BoundaryScheme::Clamped).unwrap();
        let w = build_deriv_operator(&spec, &[0, 0]).unwrap();
        let j = spec.total_basis();
        assert_eq!(w.shape(), (j, j));
        let theta: Vec<f64> = (0..j).map(|i| i as f64).collect();
        assert_eq!(w.apply(&theta).unwrap(), theta);
    }

    #[test]
    fn hat_function_slopes_on_uniform_knots() {
        // Order 2 with simple exterior knots: every first-difference row is
        // (-1/delta, +1/delta).
        let n = 4;
        let spec = spec1(2, n, BoundaryScheme::OpenQuasiUniform);
        let w = build_deriv_operator(&spec, &[1]).unwrap();
        let delta = 1.0 / (n + 1) as f64;
        let (rows, _) = w.shape();
        assert_eq!(rows, spec.total_basis() - 1);
        for i in 0..rows {
            let row = w.row(i);
            assert_eq!(row.start, i);
            assert_abs_diff_eq!(row.weights[0], -1.0 / delta, epsilon = 1e-12);
            assert_abs_diff_eq!(row.weights[1], 1.0 / delta, epsilon = 1e-12);
        }
    }

    #[test]
    fn clamped_first_row_endpoint_weight() {
        // q=4, N=3: first-row first weight is -(q-1)/(t_1 - t_{-2}) = -3/0.25.
        let spec = spec1(4, 3, BoundaryScheme::Clamped);
        let w = build_deriv_operator(&spec, &[1]).unwrap();
        assert_abs_diff_eq!(w.row(0).weights[0], -12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.row(0).weights[1], 12.0, epsilon = 1e-12);
    }

    /// Closed-form first and last nonzero entries of each row.
    fn endpoint_weights(kv: &crate::basis::KnotVector, r: usize, i: usize) -> (f64, f64) {
        let q = kv.order();
        let ii = i as isize;
        let mut first = 1.0;
        let mut last = 1.0;
        for l in 1..=r as isize {
            first *= (q as isize - l) as f64 / (kv.knot(ii) - kv.knot(ii - q as isize + l));
            last *= (q as isize - l) as f64
                / (kv.knot(ii + l - 1) - kv.knot(ii - q as isize + r as isize));
        }
        (if r % 2 == 1 { -first } else { first }, last)
    }

    #[test]
    fn endpoints_match_closed_forms() {
        for (q, n, r) in [(4, 5, 1), (4, 5, 2), (4, 5, 3), (5, 3, 2), (3, 7, 2)] {
            for scheme in [BoundaryScheme::Clamped, BoundaryScheme::OpenQuasiUniform] {
                let spec = spec1(q, n, scheme);
                let w = build_deriv_operator(&spec, &[r]).unwrap();
                let (rows, _) = w.shape();
                for i in 0..rows {
                    let (wf, wl) = endpoint_weights(spec.axis(0), r, i + 1);
                    let row = w.row(i);
                    assert_abs_diff_eq!(row.weights[0], wf, epsilon = 1e-9 * wf.abs().max(1.0));
                    assert_abs_diff_eq!(row.weights[r], wl, epsilon = 1e-9 * wl.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn tensor_endpoints_are_products_of_axis_endpoints() {
        let spec = BasisSpec::new(vec![
            make_knots(4, 4, BoundaryScheme::Clamped).unwrap(),
            make_knots(3, 2, BoundaryScheme::Clamped).unwrap(),
        ])
        .unwrap();
        let w = build_deriv_operator(&spec, &[2, 1]).unwrap();
        let (rows, cols) = w.shape();
        assert_eq!(rows, (8 - 2) * (5 - 1));
        assert_eq!(cols, 8 * 5);
        let out_dims = [6usize, 4usize];
        for flat in 0..rows {
            let mi = MultiIndex::unflatten(flat, &out_dims);
            let (f0, l0) = endpoint_weights(spec.axis(0), 2, mi.coords[0] + 1);
            let (f1, l1) = endpoint_weights(spec.axis(1), 1, mi.coords[1] + 1);
            let row = w.row(flat);
            assert_eq!(row.weights.len(), 6);
            assert_abs_diff_eq!(row.weights[0], f0 * f1, epsilon = 1e-8 * (f0 * f1).abs());
            let lastw = row.weights[5];
            assert_abs_diff_eq!(lastw, l0 * l1, epsilon = 1e-8 * (l0 * l1).abs());
        }
    }

    #[test]
    fn derivative_of_constant_vanishes() {
        let spec = BasisSpec::uniform(2, 4, 3, BoundaryScheme::Clamped).unwrap();
        let theta = vec![2.5; spec.total_basis()];
        for r in [[1, 0], [0, 1], [1, 1], [2, 1], [3, 2]] {
            for x in [[0.0, 0.0], [0.31, 0.77], [1.0, 0.5], [1.0, 1.0]] {
                let v = eval_f(&spec, &theta, &x, &r);
                assert!(v.abs() < 1e-10, "D^{r:?} const = {v} at {x:?}");
            }
        }
    }

    #[test]
    fn zero_order_eval_matches_plain_expansion() {
        let spec = spec1(4, 5, BoundaryScheme::Clamped);
        let mut rng = crate::stream::derive_rng(11, &[]);
        let theta: Vec<f64> = (0..spec.total_basis()).map(|_| rng.gen::<f64>()).collect();
        for x in [0.0, 0.2, 0.55, 1.0] {
            let direct = {
                let sb = spec.eval_tensor_basis(&[x], &[0]).unwrap();
                sb.iter_flat(&[spec.total_basis()])
                    .map(|(i, v)| v * theta[i])
                    .sum::<f64>()
            };
            assert_abs_diff_eq!(eval_f(&spec, &theta, &[x], &[0]), direct, epsilon = 1e-14);
        }
    }

    /// Least-squares coefficients representing `f` exactly when `f` lies in
    /// the spline space (dense normal equations, test oracle only).
    fn project(spec: &BasisSpec, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let j = spec.total_basis();
        let m = 40 * j;
        let mut bt_b = nalgebra::DMatrix::<f64>::zeros(j, j);
        let mut bt_y = nalgebra::DVector::<f64>::zeros(j);
        for i in 0..m {
            let x = i as f64 / (m - 1) as f64;
            let sb = spec.eval_tensor_basis(&[x], &[0]).unwrap();
            let y = f(x);
            let entries: Vec<(usize, f64)> = sb.iter_flat(&[j]).collect();
            for &(a, va) in &entries {
                bt_y[a] += va * y;
                for &(b, vb) in &entries {
                    bt_b[(a, b)] += va * vb;
                }
            }
        }
        bt_b.cholesky().unwrap().solve(&bt_y).iter().copied().collect()
    }

    #[test]
    fn reproduces_polynomial_derivative() {
        let spec = spec1(4, 6, BoundaryScheme::Clamped);
        let theta = project(&spec, |x| x * x);
        let w1 = build_deriv_operator(&spec, &[1]).unwrap();
        let w2 = build_deriv_operator(&spec, &[2]).unwrap();
        for i in 0..=20 {
            let x = i as f64 / 20.0;
            let d1 = eval_derivative(&spec, &w1, &theta, &[x]).unwrap();
            assert_abs_diff_eq!(d1, 2.0 * x, epsilon = 1e-9);
            let d2 = eval_derivative(&spec, &w2, &theta, &[x]).unwrap();
            assert_abs_diff_eq!(d2, 2.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn matches_finite_differences() {
        let spec = spec1(4, 5, BoundaryScheme::Clamped);
        let mut rng = crate::stream::derive_rng(3, &[]);
        let theta: Vec<f64> = (0..spec.total_basis())
            .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
            .collect();
        let h = 1e-5;
        let w1 = build_deriv_operator(&spec, &[1]).unwrap();
        for i in 1..20 {
            let x = 0.03 + 0.94 * i as f64 / 20.0;
            let fd = (eval_f(&spec, &theta, &[x + h], &[0]) - eval_f(&spec, &theta, &[x - h], &[0]))
                / (2.0 * h);
            let exact = eval_derivative(&spec, &w1, &theta, &[x]).unwrap();
            assert_abs_diff_eq!(fd, exact, epsilon = 1e-5 * exact.abs().max(1.0));
        }
    }

    #[test]
    fn composition_of_operators() {
        // W_{r+s} theta == W'_s (W_r theta) where W'_s acts on the q-r family.
        let spec = BasisSpec::new(vec![
            make_knots(5, 4, BoundaryScheme::Clamped).unwrap(),
            make_knots(4, 3, BoundaryScheme::OpenQuasiUniform).unwrap(),
        ])
        .unwrap();
        let mut rng = crate::stream::derive_rng(17, &[]);
        let theta: Vec<f64> = (0..spec.total_basis())
            .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
            .collect();
        let r = [1usize, 1];
        let s = [2usize, 1];
        let rs = [3usize, 2];
        let w_rs = build_deriv_operator(&spec, &rs).unwrap();
        let w_r = build_deriv_operator(&spec, &r).unwrap();
        let w_s = build_on_family(&spec, &r, &s).unwrap();
        let direct = w_rs.apply(&theta).unwrap();
        let composed = w_s.apply(&w_r.apply(&theta).unwrap()).unwrap();
        assert_eq!(direct.len(), composed.len());
        let scale = direct.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in direct.iter().zip(&composed) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9 * scale);
        }
    }

    #[test]
    fn axis_composition_order_is_irrelevant() {
        let spec = BasisSpec::new(vec![
            make_knots(4, 3, BoundaryScheme::Clamped).unwrap(),
            make_knots(4, 2, BoundaryScheme::Clamped).unwrap(),
        ])
        .unwrap();
        let mut rng = crate::stream::derive_rng(23, &[]);
        let theta: Vec<f64> = (0..spec.total_basis())
            .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
            .collect();
        // axis 1 then axis 2 vs axis 2 then axis 1
        let w_a1 = build_deriv_operator(&spec, &[1, 0]).unwrap();
        let w_then_a2 = build_on_family(&spec, &[1, 0], &[0, 1]).unwrap();
        let w_a2 = build_deriv_operator(&spec, &[0, 1]).unwrap();
        let w_then_a1 = build_on_family(&spec, &[0, 1], &[1, 0]).unwrap();
        let ab = w_then_a2.apply(&w_a1.apply(&theta).unwrap()).unwrap();
        let ba = w_then_a1.apply(&w_a2.apply(&theta).unwrap()).unwrap();
        for (a, b) in ab.iter().zip(&ba) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn weight_scale_tracks_mesh_size() {
        // On uniform knots the weights scale exactly like delta^{-r}.
        let r = 2usize;
        let mut reference = None;
        for n in [4usize, 8, 16, 32] {
            let spec = spec1(4, n, BoundaryScheme::Clamped);
            let w = build_deriv_operator(&spec, &[r]).unwrap();
            let delta = 1.0 / (n + 1) as f64;
            let maxw = (0..w.shape().0)
                .flat_map(|i| w.row(i).weights.iter().copied())
                .fold(0.0f64, |m, v| m.max(v.abs()));
            let scaled = maxw * delta.powi(r as i32);
            match reference {
                None => reference = Some(scaled),
                Some(r0) => assert_abs_diff_eq!(scaled, r0, epsilon = 1e-9 * r0),
            }
        }
    }

    #[test]
    fn rejects_orders_at_or_above_q() {
        let spec = spec1(3, 4, BoundaryScheme::Clamped);
        assert!(matches!(
            build_deriv_operator(&spec, &[3]),
            Err(Error::UnsupportedOrder { .. })
        ));
    }
}
