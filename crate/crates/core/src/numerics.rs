//! Dense row-major matrices and the handful of kernels the toy model and the
//! scoring functions need.
//!
//! Every kernel accumulates in a fixed order (row-major, left to right) so the
//! same inputs produce bit-identical outputs on every platform.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Row-major 2-D matrix of `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorView {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl TensorView {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return invalid(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return invalid(format!("non-finite entry at flat index {pos}"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return invalid("ragged rows");
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        (0..self.rows).map(|i| self.row(i))
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows {
            return invalid(format!(
                "row range {start}..{end} out of bounds for {} rows",
                self.rows
            ));
        }
        Ok(Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    /// Gathers the listed rows, in the order given.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            if r >= self.rows {
                return invalid(format!("row {r} out of bounds for {} rows", self.rows));
            }
            data.extend_from_slice(self.row(r));
        }
        Ok(Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        })
    }

    /// Appends one row in place.
    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if self.rows > 0 && row.len() != self.cols {
            return invalid(format!(
                "row length {} does not match {} columns",
                row.len(),
                self.cols
            ));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return invalid("non-finite entry in appended row");
        }
        if self.rows == 0 {
            self.cols = row.len();
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Multiplies every entry by `s`.
    pub fn scale(&self, s: f32) -> Result<Self> {
        Self::new(
            self.rows,
            self.cols,
            self.data.iter().map(|x| x * s).collect(),
        )
    }

    /// Sum of all entries, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| f64::from(x)).sum()
    }

    /// Per-column sums over all rows, accumulated row by row in `f64`.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.cols];
        for row in self.row_iter() {
            for (acc, &x) in out.iter_mut().zip(row) {
                *acc += f64::from(x);
            }
        }
        out
    }
}

/// Dot product with left-to-right accumulation.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Computes `a · bᵀ` for `a: m×d`, `b: n×d`.
pub fn matmul_transposed(a: &TensorView, b: &TensorView) -> Result<TensorView> {
    if a.cols != b.cols {
        return invalid(format!(
            "inner dimension mismatch: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    let mut data = Vec::with_capacity(a.rows * b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            data.push(dot(ar, b.row(j)));
        }
    }
    TensorView::new(a.rows, b.rows, data)
        .map_err(|_| Error::InvalidArgument("matmul produced a non-finite entry".into()))
}

/// Numerically stable softmax of one row, restricted to `row[..visible]`.
/// Entries at or beyond `visible` and entries equal to `-inf` get zero mass.
pub fn softmax_prefix(row: &[f32], visible: usize) -> Result<Vec<f32>> {
    let visible = visible.min(row.len());
    let mut max = f32::NEG_INFINITY;
    for &x in &row[..visible] {
        if x.is_nan() || x == f32::INFINITY {
            return invalid("NaN or +inf in softmax input");
        }
        if x > max {
            max = x;
        }
    }
    if max == f32::NEG_INFINITY {
        return invalid("softmax row is empty after masking");
    }
    let mut out = vec![0.0f32; row.len()];
    let mut total = 0.0f32;
    for (o, &x) in out.iter_mut().zip(&row[..visible]) {
        if x != f32::NEG_INFINITY {
            *o = (x - max).exp();
            total += *o;
        }
    }
    for o in &mut out[..visible] {
        *o /= total;
    }
    Ok(out)
}

/// Row-wise softmax with a causal mask: query row `i` sits at absolute
/// position `query_offset + i` and sees columns `0..=query_offset + i`.
pub fn causal_softmax_rows(scores: &TensorView, query_offset: usize) -> Result<TensorView> {
    let mut data = Vec::with_capacity(scores.data.len());
    for (i, row) in scores.row_iter().enumerate() {
        data.extend(softmax_prefix(row, query_offset + i + 1)?);
    }
    TensorView::new(scores.rows, scores.cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> TensorView {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        TensorView::new(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_rows_select_columns() {
        let a = TensorView::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = TensorView::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let out = matmul_transposed(&a, &b).unwrap();
        assert_eq!(out.data(), &[3.0, 5.0, 4.0, 6.0]);
    }

    #[test]
    fn scalar_product() {
        let a = TensorView::new(1, 1, vec![2.0]).unwrap();
        let b = TensorView::new(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul_transposed(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matches_triple_loop_bit_exactly() {
        let a = random(4, 8, 11);
        let b = random(6, 8, 12);
        let out = matmul_transposed(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                let mut acc = 0.0f32;
                for k in 0..8 {
                    acc += a.get(i, k) * b.get(j, k);
                }
                assert_eq!(out.get(i, j).to_bits(), acc.to_bits());
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = TensorView::zeros(2, 3);
        let b = TensorView::zeros(2, 4);
        assert!(matches!(
            matmul_transposed(&a, &b),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn power_of_two_scaling_is_exact() {
        let a = random(3, 5, 1);
        let b = random(4, 5, 2);
        let base = matmul_transposed(&a, &b).unwrap();
        let scaled = matmul_transposed(&a.scale(4.0).unwrap(), &b).unwrap();
        for (x, y) in base.data().iter().zip(scaled.data()) {
            assert_eq!((x * 4.0).to_bits(), y.to_bits());
        }
    }

    #[test]
    fn uniform_row() {
        let s = TensorView::new(1, 3, vec![0.0; 3]).unwrap();
        let p = causal_softmax_rows(&s, 2).unwrap();
        for &x in p.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn masked_entry_gets_zero() {
        let s = TensorView::new(1, 2, vec![0.7, 5.0]).unwrap();
        let p = causal_softmax_rows(&s, 0).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);

        let p = softmax_prefix(&[0.7, f32::NEG_INFINITY], 2).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn known_softmax_values() {
        // exp-normalize of [1,2,3] evaluated in f64 offline
        let s = TensorView::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let p = causal_softmax_rows(&s, 2).unwrap();
        let expected = [0.090_030_57, 0.244_728_47, 0.665_240_96];
        for (x, e) in p.data().iter().zip(expected) {
            assert!((x - e).abs() < 1e-4);
        }
    }

    #[test]
    fn empty_row_is_rejected() {
        assert!(softmax_prefix(&[f32::NEG_INFINITY, f32::NEG_INFINITY], 2).is_err());
        let s = TensorView::zeros(1, 0);
        assert!(causal_softmax_rows(&s, 0).is_err());
    }

    #[test]
    fn causal_rows_sum_to_one() {
        let s = random(4, 10, 5).scale(8.0).unwrap();
        let p = causal_softmax_rows(&s, 6).unwrap();
        for (i, row) in p.row_iter().enumerate() {
            let total: f32 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-5);
            for (j, &x) in row.iter().enumerate() {
                assert!((0.0..=1.0).contains(&x));
                if j > 6 + i {
                    assert_eq!(x, 0.0);
                } else {
                    assert!(x > 0.0);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(TensorView::new(2, 2, vec![0.0; 3]).is_err());
        assert!(TensorView::new(1, 1, vec![f32::NAN]).is_err());
        assert!(TensorView::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
