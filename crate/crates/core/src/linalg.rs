//! Banded direct solvers used by the Darcy and FEM paths.
//!
//! Grid-ordered stencil systems have bandwidth equal to the row length, so a
//! banded factorization is `O(n * b^2)` instead of `O(n^3)`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// General band matrix with `kl` sub- and `ku` super-diagonals, with room for
/// the fill-in that partial pivoting produces.
#[derive(Clone, Debug)]
pub struct BandMatrix<T> {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> BandMatrix<T> {
    pub fn new(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            width,
            data: vec![T::zero(); n * width],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.kl + self.ku);
        i * self.width + (j + self.kl - i)
    }

    pub fn add(&mut self, i: usize, j: usize, v: T) {
        assert!(
            j + self.kl >= i && j <= i + self.ku,
            "entry ({i},{j}) outside band kl={} ku={}",
            self.kl,
            self.ku
        );
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        if j + self.kl < i || j > i + self.kl + self.ku {
            return T::zero();
        }
        self.data[self.slot(i, j)]
    }

    /// `y = A x` using the stored band (before factorization).
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.n];
        for (i, yi) in y.iter_mut().enumerate() {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            let mut s = T::zero();
            for (j, xj) in x.iter().enumerate().take(hi + 1).skip(lo) {
                s += self.data[self.slot(i, j)] * *xj;
            }
            *yi = s;
        }
        y
    }

    /// Transposed copy, band limits swapped.
    pub fn transpose(&self) -> BandMatrix<T> {
        let mut t = BandMatrix::new(self.n, self.ku, self.kl);
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            for j in lo..=hi {
                let v = self.data[self.slot(i, j)];
                if v != T::zero() {
                    t.add(j, i, v);
                }
            }
        }
        t
    }

    /// LU factorization with partial pivoting (in place).
    pub fn factor(mut self) -> Result<BandLu<T>> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let mut piv = vec![0usize; n];
        let scale = self
            .data
            .iter()
            .fold(T::zero(), |m, v| m.max(v.abs()))
            .max(T::min_positive_value());
        let tiny = scale * T::epsilon() * T::lit(n as f64);
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.data[self.slot(k, k)].abs();
            for i in k + 1..=last {
                let v = self.data[self.slot(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= tiny {
                return Err(Error::Singular(format!("zero pivot at column {k} of {n}")));
            }
            piv[k] = p;
            let ucols = (k + kl + ku).min(n - 1);
            if p != k {
                for j in k..=ucols {
                    let a = self.slot(k, j);
                    let b = self.slot(p, j);
                    self.data.swap(a, b);
                }
            }
            let pivot = self.data[self.slot(k, k)];
            for i in k + 1..=last {
                let sik = self.slot(i, k);
                let l = self.data[sik] / pivot;
                self.data[sik] = l;
                if l == T::zero() {
                    continue;
                }
                for j in k + 1..=ucols {
                    let skj = self.data[self.slot(k, j)];
                    let sij = self.slot(i, j);
                    self.data[sij] -= l * skj;
                }
            }
        }
        Ok(BandLu { m: self, piv })
    }
}

#[derive(Clone, Debug)]
pub struct BandLu<T> {
    m: BandMatrix<T>,
    piv: Vec<usize>,
}

impl<T: Scalar> BandLu<T> {
    pub fn solve(&self, b: &mut [T]) {
        let m = &self.m;
        let n = m.n;
        assert_eq!(b.len(), n);
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk == T::zero() {
                continue;
            }
            for i in k + 1..=(k + m.kl).min(n - 1) {
                b[i] -= m.data[m.slot(i, k)] * bk;
            }
        }
        for k in (0..n).rev() {
            let mut s = b[k];
            for j in k + 1..=(k + m.kl + m.ku).min(n - 1) {
                s -= m.data[m.slot(k, j)] * b[j];
            }
            b[k] = s / m.data[m.slot(k, k)];
        }
    }
}

/// Symmetric positive definite band matrix, lower band of width `b` stored.
#[derive(Clone, Debug)]
pub struct SpdBand<T> {
    n: usize,
    b: usize,
    data: Vec<T>,
}

impl<T: Scalar> SpdBand<T> {
    pub fn new(n: usize, b: usize) -> Self {
        Self {
            n,
            b,
            data: vec![T::zero(); n * (b + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.b
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        // lower triangle: j <= i, i - j <= b
        i * (self.b + 1) + (j + self.b - i)
    }

    /// Accumulate into the symmetric pair (i,j)/(j,i); only the lower triangle is stored.
    pub fn add_sym(&mut self, i: usize, j: usize, v: T) {
        let (i, j) = if j <= i { (i, j) } else { (j, i) };
        assert!(i - j <= self.b, "entry ({i},{j}) outside band {}", self.b);
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let (i, j) = if j <= i { (i, j) } else { (j, i) };
        if i - j > self.b {
            return T::zero();
        }
        self.data[self.slot(i, j)]
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.b);
            for j in lo..=i {
                let v = self.data[self.slot(i, j)];
                y[i] += v * x[j];
                if j != i {
                    y[j] += v * x[i];
                }
            }
        }
        y
    }

    /// Zero row/column `k` and put 1 on the diagonal (Dirichlet elimination).
    pub fn fix_dof(&mut self, k: usize) {
        for j in k.saturating_sub(self.b)..=k {
            let s = self.slot(k, j);
            self.data[s] = T::zero();
        }
        for i in k + 1..=(k + self.b).min(self.n - 1) {
            let s = self.slot(i, k);
            self.data[s] = T::zero();
        }
        let s = self.slot(k, k);
        self.data[s] = T::one();
    }

    pub fn cholesky(mut self) -> Result<SpdBandCholesky<T>> {
        let n = self.n;
        let b = self.b;
        for j in 0..n {
            let lo = j.saturating_sub(b);
            let mut d = self.data[self.slot(j, j)];
            for k in lo..j {
                let l = self.data[self.slot(j, k)];
                d -= l * l;
            }
            if !(d > T::zero()) {
                return Err(Error::Singular(format!(
                    "matrix not positive definite at row {j} (pivot {d})"
                )));
            }
            let djj = d.sqrt();
            let sjj = self.slot(j, j);
            self.data[sjj] = djj;
            for i in j + 1..=(j + b).min(n - 1) {
                let lo_i = i.saturating_sub(b).max(lo);
                let mut s = self.data[self.slot(i, j)];
                for k in lo_i..j {
                    s -= self.data[self.slot(i, k)] * self.data[self.slot(j, k)];
                }
                let sij = self.slot(i, j);
                self.data[sij] = s / djj;
            }
        }
        Ok(SpdBandCholesky { l: self })
    }
}

#[derive(Clone, Debug)]
pub struct SpdBandCholesky<T> {
    l: SpdBand<T>,
}

impl<T: Scalar> SpdBandCholesky<T> {
    pub fn solve(&self, x: &mut [T]) {
        let l = &self.l;
        let n = l.n;
        assert_eq!(x.len(), n);
        for i in 0..n {
            let mut s = x[i];
            for k in i.saturating_sub(l.b)..i {
                s -= l.data[l.slot(i, k)] * x[k];
            }
            x[i] = s / l.data[l.slot(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..=(i + l.b).min(n - 1) {
                s -= l.data[l.slot(k, i)] * x[k];
            }
            x[i] = s / l.data[l.slot(i, i)];
        }
    }
}

/// Singular values of a row-major `rows x cols` matrix, descending.
///
/// One-sided Jacobi on the narrower orientation; accurate for small values.
pub fn singular_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(a.len(), rows * cols);
    // columns of the working matrix, each of length m
    let (m, n, cols_data) = if cols <= rows {
        let mut c = vec![vec![0.0; rows]; cols];
        for i in 0..rows {
            for j in 0..cols {
                c[j][i] = a[i * cols + j];
            }
        }
        (rows, cols, c)
    } else {
        let c: Vec<Vec<f64>> = (0..rows).map(|i| a[i * cols..(i + 1) * cols].to_vec()).collect();
        (cols, rows, c)
    };
    let mut v = cols_data;
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&v[p], &v[p]);
                let beta = dot(&v[q], &v[q]);
                let gamma = dot(&v[p], &v[q]);
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..m {
                    let (x, y) = (v[p][k], v[q][k]);
                    v[p][k] = c * x - s * y;
                    v[q][k] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = v.iter().map(|c| dot(c, c).sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}
