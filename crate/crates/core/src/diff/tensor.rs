use alloc::vec;
use alloc::vec::Vec;

/// Dense row-major matrix of `f64`. Scalars are 1x1 tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor data length does not match {rows}x{cols}"
        );
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(1, 1, vec![value])
    }

    pub fn column(values: Vec<f64>) -> Self {
        let rows = values.len();
        Self::new(rows, 1, values)
    }

    pub fn row(values: Vec<f64>) -> Self {
        let cols = values.len();
        Self::new(1, cols, values)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn column_values(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "accumulate shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a (n x k) * b (k x m)`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(n, m, out)
}

/// `g (n x m) * b^T` where `b` is `k x m`; result `n x k`.
pub(crate) fn matmul_rhs_transposed(g: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(g.cols, b.cols, "matmul_rhs_transposed dimension mismatch");
    let (n, m, k) = (g.rows, g.cols, b.rows);
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let g_row = &g.data[i * m..(i + 1) * m];
        for p in 0..k {
            let b_row = &b.data[p * m..(p + 1) * m];
            let mut acc = 0.0;
            for (x, y) in g_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * k + p] = acc;
        }
    }
    Tensor::new(n, k, out)
}

/// `a^T (k x n) * g (n x m)` where `a` is `n x k`; result `k x m`.
pub(crate) fn matmul_lhs_transposed(a: &Tensor, g: &Tensor) -> Tensor {
    assert_eq!(a.rows, g.rows, "matmul_lhs_transposed dimension mismatch");
    let (n, k, m) = (a.rows, a.cols, g.cols);
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let a_row = &a.data[i * k..(i + 1) * k];
        let g_row = &g.data[i * m..(i + 1) * m];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aip * gv;
            }
        }
    }
    Tensor::new(k, m, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::new(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_products_agree_with_plain() {
        let a = Tensor::from_fn(3, 2, |i, j| (i * 2 + j) as f64 - 1.5);
        let g = Tensor::from_fn(3, 4, |i, j| 0.25 * (i as f64) - (j as f64));
        let at = Tensor::from_fn(2, 3, |i, j| a.get(j, i));
        assert_eq!(matmul_lhs_transposed(&a, &g), matmul(&at, &g));
        let b = Tensor::from_fn(5, 4, |i, j| (i as f64) * 0.5 + j as f64);
        let bt = Tensor::from_fn(4, 5, |i, j| b.get(j, i));
        assert_eq!(matmul_rhs_transposed(&g, &b), matmul(&g, &bt));
    }
}
