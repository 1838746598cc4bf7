//! Row-major matrices and the few dense kernels the network needs.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn view(&self) -> MatRef<'_, S> {
        MatRef { rows: self.rows, cols: self.cols, data: &self.data }
    }
}

/// Borrowed matrix.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a, S> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [S],
}

impl<'a, S: Scalar> MatRef<'a, S> {
    pub fn row(&self, r: usize) -> &'a [S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_owned(&self) -> Mat<S> {
        Mat::from_vec(self.rows, self.cols, self.data.to_vec())
    }
}

/// `c (+)= a · b` for row-major operands, `a: m×k`, `b: k×n`.
pub fn matmul_into<S: Scalar>(a: MatRef<'_, S>, b: MatRef<'_, S>, c: &mut [S], accumulate: bool) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(c.len(), a.rows * b.cols);
    let beta = if accumulate { S::one() } else { S::zero() };
    S::gemm(
        a.rows,
        a.cols,
        b.cols,
        S::one(),
        a.data,
        a.cols as isize,
        1,
        b.data,
        b.cols as isize,
        1,
        beta,
        c,
        b.cols as isize,
        1,
    );
}

/// `c (+)= aᵀ · b`, `a: k×m`, `b: k×n`, `c: m×n`.
pub fn matmul_tn_into<S: Scalar>(a: MatRef<'_, S>, b: MatRef<'_, S>, c: &mut [S], accumulate: bool) {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(c.len(), a.cols * b.cols);
    let beta = if accumulate { S::one() } else { S::zero() };
    S::gemm(
        a.cols,
        a.rows,
        b.cols,
        S::one(),
        a.data,
        1,
        a.cols as isize,
        b.data,
        b.cols as isize,
        1,
        beta,
        c,
        b.cols as isize,
        1,
    );
}

/// `c (+)= a · bᵀ`, `a: m×k`, `b: n×k`, `c: m×n`.
pub fn matmul_nt_into<S: Scalar>(a: MatRef<'_, S>, b: MatRef<'_, S>, c: &mut [S], accumulate: bool) {
    debug_assert_eq!(a.cols, b.cols);
    debug_assert_eq!(c.len(), a.rows * b.rows);
    let beta = if accumulate { S::one() } else { S::zero() };
    S::gemm(
        a.rows,
        a.cols,
        b.rows,
        S::one(),
        a.data,
        a.cols as isize,
        1,
        b.data,
        1,
        b.cols as isize,
        beta,
        c,
        b.rows as isize,
        1,
    );
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = S::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree() {
        let a = Mat::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(2, 3, vec![0.5f64, -1.0, 2.0, 1.0, 0.0, -2.0]);
        // a · bᵀ
        let mut c = vec![0.0; 4];
        matmul_nt_into(a.view(), b.view(), &mut c, false);
        assert_eq!(c, vec![4.5, -5.0, 9.0, -8.0]);
        // aᵀ · b
        let mut d = vec![0.0; 9];
        matmul_tn_into(a.view(), b.view(), &mut d, false);
        assert_eq!(d[0], 1.0 * 0.5 + 4.0 * 1.0);
        assert_eq!(d[8], 3.0 * 2.0 + 6.0 * -2.0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut r = vec![1.0f32, 2.0, 3.0, -1e9];
        softmax_in_place(&mut r);
        let s: f32 = r.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert_eq!(r[3], 0.0);
    }
}
