//! Dense 2-D f64 tensor, row-major, with the handful of linear-algebra and
//! reduction primitives the rest of the crate builds on.
//!
//! Orientation convention: features run down the rows (D) and the sequence
//! runs across the columns (N), so a token is one column. Note this is the
//! transpose of the N x D layout much of the literature uses.

use crate::error::{Error, Result};

/// Dense 2-D array of f64, row-major. `data.len() == rows * cols` always.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a flat row-major buffer.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Identity matrix of size n x n.
    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Build from nested rows; every inner slice must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Contract(format!(
                    "ragged rows: expected {c} entries, found {}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(r, c, data)
    }

    /// Element (r, c) computed with `f`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    /// Copy of column `c` (columns are strided in row-major storage).
    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn set_col(&mut self, c: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (r, &v) in values.iter().enumerate() {
            self.set(r, c, v);
        }
    }

    /// New tensor keeping columns `[0, n)`.
    pub fn take_cols(&self, n: usize) -> Tensor {
        debug_assert!(n <= self.cols);
        Tensor::from_fn(self.rows, n, |r, c| self.get(r, c))
    }

    pub fn transpose(&self) -> Tensor {
        Tensor::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product. Summation over the contracted index is sequential
    /// (ascending), so results are bit-identical across runs.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let (p, q, r) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            for k in 0..q {
                let a = self.data[i * q + k];
                let brow = &other.data[k * r..(k + 1) * r];
                let orow = &mut out[i * r..(i + 1) * r];
                for j in 0..r {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(Tensor {
            rows: p,
            cols: r,
            data: out,
        })
    }

    /// Softmax over each column, stabilised by subtracting the column max
    /// before exponentiation.
    pub fn column_softmax(&self) -> Result<Tensor> {
        if !self.is_finite() {
            return Err(Error::Numeric(
                "column_softmax requires finite input".to_string(),
            ));
        }
        let mut out = Tensor::zeros(self.rows, self.cols);
        for n in 0..self.cols {
            let mut max = f64::NEG_INFINITY;
            for r in 0..self.rows {
                max = max.max(self.get(r, n));
            }
            let mut sum = 0.0;
            for r in 0..self.rows {
                let e = (self.get(r, n) - max).exp();
                out.set(r, n, e);
                sum += e;
            }
            for r in 0..self.rows {
                out.set(r, n, out.get(r, n) / sum);
            }
        }
        Ok(out)
    }

    /// Per-column population mean and population variance (divide by D).
    pub fn column_mean_var(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.rows as f64;
        let mut means = Vec::with_capacity(self.cols);
        let mut vars = Vec::with_capacity(self.cols);
        for n in 0..self.cols {
            let mut sum = 0.0;
            for r in 0..self.rows {
                sum += self.get(r, n);
            }
            let mean = sum / d;
            let mut sq = 0.0;
            for r in 0..self.rows {
                let diff = self.get(r, n) - mean;
                sq += diff * diff;
            }
            means.push(mean);
            vars.push(sq / d);
        }
        (means, vars)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add", self.shape(), other.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::shape("sub", self.shape(), other.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::shape("hadamard", self.shape(), other.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Largest absolute entry (0 for an empty tensor).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi))
    }

    #[test]
    fn matmul_identity_preserves_input() {
        let x = Tensor::from_rows(&[
            vec![1.0, -2.0, 0.5, 7.0],
            vec![3.0, 4.0, -1.0, 0.0],
            vec![0.0, 9.0, 2.5, -3.0],
        ])
        .unwrap();
        let id = Tensor::identity(3);
        assert_eq!(id.matmul(&x).unwrap(), x);
    }

    #[test]
    fn matmul_hand_computed_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "error should name both shapes: {msg}");
    }

    #[test]
    fn softmax_constant_column_is_uniform() {
        let x = Tensor::filled(4, 2, 3.7);
        let s = x.column_softmax().unwrap();
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form_quarter_three_quarters() {
        let x = Tensor::from_rows(&[vec![0.0], vec![3.0f64.ln()]]).unwrap();
        let s = x.column_softmax().unwrap();
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(1, 0) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::from_rows(&[vec![0.0], vec![f64::NAN]]).unwrap();
        assert!(matches!(x.column_softmax(), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_columns_sum_to_one_for_extreme_logits() {
        // Stability check for the max-subtraction trick.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let rows = rng.gen_range(1..=12);
            let cols = rng.gen_range(1..=12);
            let x = random_tensor(&mut rng, rows, cols, -50.0, 50.0);
            let s = x.column_softmax().unwrap();
            for n in 0..cols {
                let sum: f64 = (0..rows).map(|r| s.get(r, n)).sum();
                assert!((sum - 1.0).abs() <= 1e-12, "column sum {sum}");
                assert!((0..rows).all(|r| s.get(r, n) >= 0.0));
            }
        }
    }

    #[test]
    fn mean_var_hand_computed() {
        let x = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let (m, v) = x.column_mean_var();
        assert!((m[0] - 2.0).abs() < 1e-15);
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mean_var_constant_column() {
        let x = Tensor::filled(5, 3, -4.2);
        let (m, v) = x.column_mean_var();
        for n in 0..3 {
            assert!((m[n] + 4.2).abs() < 1e-15);
            assert!(v[n].abs() < 1e-15);
        }
    }

    #[test]
    fn mean_var_single_row_has_zero_variance() {
        let x = Tensor::from_rows(&[vec![5.0, -1.0, 2.0]]).unwrap();
        let (_, v) = x.column_mean_var();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn elementwise_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, 3, 4, -5.0, 5.0);
        assert_eq!(x.add(&Tensor::zeros(3, 4)).unwrap(), x);
        assert_eq!(x.scale(1.0), x);
        let h = Tensor::from_rows(&[vec![2.0, 3.0]])
            .unwrap()
            .hadamard(&Tensor::from_rows(&[vec![4.0, 5.0]]).unwrap())
            .unwrap();
        assert_eq!(h.data(), &[8.0, 15.0]);
    }

    #[test]
    fn elementwise_shape_errors() {
        let a = Tensor::zeros(2, 2);
        let b = Tensor::zeros(2, 3);
        assert!(a.add(&b).is_err());
        assert!(a.hadamard(&b).is_err());
    }

    #[test]
    fn matmul_associativity_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let a = random_tensor(&mut rng, 8, 8, -1.0, 1.0);
            let b = random_tensor(&mut rng, 8, 8, -1.0, 1.0);
            let c = random_tensor(&mut rng, 8, 8, -1.0, 1.0);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let diff = left.sub(&right).unwrap().max_abs();
            assert!(diff < 1e-9, "associativity violated by {diff}");
        }
    }

    #[test]
    fn zscored_column_has_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..200 {
            let d = rng.gen_range(2..=16);
            let x = random_tensor(&mut rng, d, 4, -3.0, 3.0);
            let (means, vars) = x.column_mean_var();
            for n in 0..4 {
                if vars[n] < 1e-6 {
                    continue;
                }
                let std = vars[n].sqrt();
                let norm: Vec<f64> = (0..d).map(|r| (x.get(r, n) - means[n]) / std).collect();
                let col = Tensor::new(d, 1, norm).unwrap();
                let (m2, v2) = col.column_mean_var();
                assert!(m2[0].abs() <= 1e-12);
                assert!((v2[0] - 1.0).abs() <= 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(shift in -20.0f64..20.0, vals in proptest::collection::vec(-30.0f64..30.0, 1..24)) {
            let rows = vals.len();
            let x = Tensor::new(rows, 1, vals.clone()).unwrap();
            let shifted = x.map(|v| v + shift);
            let a = x.column_softmax().unwrap();
            let b = shifted.column_softmax().unwrap();
            for r in 0..rows {
                prop_assert!((a.get(r, 0) - b.get(r, 0)).abs() < 1e-12);
            }
        }

        #[test]
        fn add_commutes(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_tensor(&mut rng, 4, 5, -10.0, 10.0);
            let b = random_tensor(&mut rng, 4, 5, -10.0, 10.0);
            prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
        }
    }
}
