//! Dense row-major matrices and Householder least squares.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Panics if the rows are ragged.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged matrix rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_columns(columns: &[Vec<T>]) -> Self {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        let mut m = Matrix::zeros(rows, cols);
        for (j, c) in columns.iter().enumerate() {
            assert_eq!(c.len(), rows, "ragged matrix columns");
            for (i, &v) in c.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(v)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect()
    }

    /// `selfᵀ v`.
    pub fn tmul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o = *o + a * vi;
            }
        }
        out
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Thin QR factor `R` of a tall matrix, with `Qᵀ` applied to one right-hand side.
#[derive(Debug, Clone)]
pub struct QrSolve<T> {
    /// Upper-triangular `p × p`, row-major.
    pub r: Matrix<T>,
    pub qty: Vec<T>,
    /// Columns whose diagonal in `R` vanished relative to their original norm.
    pub dependent: Vec<usize>,
}

/// Householder QR of `x` (n × p, n ≥ p) applied to `y`.
pub fn householder_qr<T: Scalar>(x: &Matrix<T>, y: &[T], rel_tol: T) -> QrSolve<T> {
    let (n, p) = (x.rows(), x.cols());
    assert!(
        n >= p,
        "least squares needs at least as many rows as columns"
    );
    assert_eq!(y.len(), n);
    let norms: Vec<T> = (0..p)
        .map(|j| {
            (0..n)
                .fold(T::zero(), |acc, i| acc + x[(i, j)] * x[(i, j)])
                .sqrt()
        })
        .collect();
    let mut a = x.clone();
    let mut b = y.to_vec();
    let two = T::lit(2.0);
    for k in 0..p {
        let norm = (k..n)
            .fold(T::zero(), |acc, i| acc + a[(i, k)] * a[(i, k)])
            .sqrt();
        if norm == T::zero() {
            continue;
        }
        let alpha = if a[(k, k)] > T::zero() { -norm } else { norm };
        let mut v: Vec<T> = (k..n).map(|i| a[(i, k)]).collect();
        v[0] = v[0] - alpha;
        let vnorm2 = v.iter().fold(T::zero(), |acc, &t| acc + t * t);
        if vnorm2 == T::zero() {
            continue;
        }
        for j in k..p {
            let dot = v
                .iter()
                .enumerate()
                .fold(T::zero(), |acc, (m, &vm)| acc + vm * a[(k + m, j)]);
            let f = two * dot / vnorm2;
            for (m, &vm) in v.iter().enumerate() {
                a[(k + m, j)] = a[(k + m, j)] - f * vm;
            }
        }
        let dot = v
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (m, &vm)| acc + vm * b[k + m]);
        let f = two * dot / vnorm2;
        for (m, &vm) in v.iter().enumerate() {
            b[k + m] = b[k + m] - f * vm;
        }
    }
    let mut r = Matrix::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            r[(i, j)] = a[(i, j)];
        }
    }
    let dependent = (0..p)
        .filter(|&k| norms[k] == T::zero() || r[(k, k)].abs() <= rel_tol * norms[k])
        .collect();
    QrSolve {
        r,
        qty: b,
        dependent,
    }
}

/// Solves `R x = b` for upper-triangular `R`.
pub fn back_substitute<T: Scalar>(r: &Matrix<T>, b: &[T]) -> Vec<T> {
    let p = r.cols();
    let mut x = vec![T::zero(); p];
    for i in (0..p).rev() {
        let s = ((i + 1)..p).fold(b[i], |acc, j| acc - r[(i, j)] * x[j]);
        x[i] = s / r[(i, i)];
    }
    x
}

/// Inverse of an upper-triangular matrix.
pub fn upper_inverse<T: Scalar>(r: &Matrix<T>) -> Matrix<T> {
    let p = r.cols();
    let mut inv = Matrix::zeros(p, p);
    let mut e = vec![T::zero(); p];
    for j in 0..p {
        e.iter_mut().for_each(|v| *v = T::zero());
        e[j] = T::one();
        let col = back_substitute(r, &e);
        for (i, v) in col.into_iter().enumerate() {
            inv[(i, j)] = v;
        }
    }
    inv
}
