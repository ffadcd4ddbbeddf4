//! Dense complex linear algebra, DFT matrices and seeded Gaussian sampling.
//!
//! Problem sizes in this crate are small (at most a few dozen rows), so
//! everything is stored densely in row-major order and solved directly.

use std::f64::consts::PI;
use std::ops::{Deref, DerefMut, Index, IndexMut};

use num_complex::Complex64;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Relative pivot tolerance of the Cholesky factorization.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Hermitian-ness tolerance, relative to the largest entry magnitude.
pub const HERMITIAN_TOLERANCE: f64 = 1e-10;

/// Dense complex matrix in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Real diagonal matrix.
    pub fn from_real_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = C64::new(v, 0.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[C64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> CVector {
        CVector((0..self.rows).map(|r| self[(r, c)]).collect())
    }

    /// Copy of the matrix with column `c` removed.
    pub fn without_column(&self, c: usize) -> CMatrix {
        CMatrix::from_fn(self.rows, self.cols - 1, |r, j| {
            self[(r, if j < c { j } else { j + 1 })]
        })
    }

    /// Copy restricted to the given columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> CMatrix {
        CMatrix::from_fn(self.rows, cols.len(), |r, j| self[(r, cols[j])])
    }

    pub fn adjoint(&self) -> CMatrix {
        CMatrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn matmul(&self, rhs: &CMatrix) -> Result<CMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = CMatrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^H · rhs` without materializing the adjoint.
    pub fn adjoint_matmul(&self, rhs: &CMatrix) -> Result<CMatrix> {
        if self.rows != rhs.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply ({}x{})^H by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = CMatrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let rhs_row = rhs.row(k);
            for (i, a) in self.row(k).iter().enumerate() {
                let a = a.conj();
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[C64]) -> Result<CVector> {
        if self.cols != x.len() {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok(CVector(
            (0..self.rows)
                .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
                .collect(),
        ))
    }

    /// `self^H · x`.
    pub fn adjoint_matvec(&self, x: &[C64]) -> Result<CVector> {
        if self.rows != x.len() {
            return Err(Error::Dimension(format!(
                "cannot multiply ({}x{})^H by vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![C64::new(0.0, 0.0); self.cols];
        for (r, &xr) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a.conj() * xr;
            }
        }
        Ok(CVector(out))
    }

    /// Left multiplication by a real diagonal matrix.
    pub fn scale_rows(&self, diag: &[f64]) -> CMatrix {
        assert_eq!(diag.len(), self.rows);
        CMatrix::from_fn(self.rows, self.cols, |r, c| self[(r, c)] * diag[r])
    }

    pub fn scaled(&self, s: f64) -> CMatrix {
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, rhs: &CMatrix) -> Result<CMatrix> {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn add(&self, rhs: &CMatrix) -> Result<CMatrix> {
        self.zip_with(rhs, |a, b| a + b)
    }

    fn zip_with(&self, rhs: &CMatrix, f: impl Fn(C64, C64) -> C64) -> Result<CMatrix> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Largest `|a_ij - conj(a_ji)|`.
    pub fn hermitian_defect(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for r in 0..self.rows {
            for c in r..self.cols {
                worst = worst.max((self[(r, c)] - self[(c, r)].conj()).norm());
            }
        }
        worst
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermitian_defect() <= tol * self.max_abs().max(1.0)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = C64;

    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Dense complex vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CVector(pub Vec<C64>);

impl CVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![C64::new(0.0, 0.0); n])
    }

    /// `self^H · rhs`.
    pub fn dot(&self, rhs: &[C64]) -> C64 {
        self.0.iter().zip(rhs).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn sub(&self, rhs: &[C64]) -> CVector {
        CVector(self.0.iter().zip(rhs).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, rhs: &[C64]) -> CVector {
        CVector(self.0.iter().zip(rhs).map(|(a, b)| a + b).collect())
    }

    pub fn scaled(&self, s: C64) -> CVector {
        CVector(self.0.iter().map(|v| v * s).collect())
    }

    /// `self += s · x`.
    pub fn axpy(&mut self, s: C64, x: &[C64]) {
        for (a, b) in self.0.iter_mut().zip(x) {
            *a += s * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

impl From<Vec<C64>> for CVector {
    fn from(v: Vec<C64>) -> Self {
        Self(v)
    }
}

impl Deref for CVector {
    type Target = [C64];

    fn deref(&self) -> &[C64] {
        &self.0
    }
}

impl DerefMut for CVector {
    fn deref_mut(&mut self) -> &mut [C64] {
        &mut self.0
    }
}

/// `n`-point DFT matrix with entries `exp(-2πi·k·j/n)`.
pub fn dft_matrix(n: usize) -> Result<CMatrix> {
    if n == 0 {
        return Err(Error::InvalidParameter("DFT size must be at least 1".into()));
    }
    // Reduce k·j modulo n before evaluating the exponential so large
    // products do not lose phase accuracy.
    let roots: Vec<C64> = (0..n)
        .map(|t| C64::from_polar(1.0, -2.0 * PI * t as f64 / n as f64))
        .collect();
    Ok(CMatrix::from_fn(n, n, |k, j| roots[(k * j) % n]))
}

/// Lower-triangular factor `L` with `A = L·L^H`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: CMatrix,
}

impl Cholesky {
    /// Factors a Hermitian positive definite matrix.
    ///
    /// A pivot below `PIVOT_TOLERANCE · max_i a_ii` is reported as
    /// [`Error::NotPositiveDefinite`] naming the pivot index.
    pub fn factor(a: &CMatrix) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::Dimension(format!(
                "Cholesky of non-square {}x{} matrix",
                a.rows(),
                a.cols()
            )));
        }
        let defect = a.hermitian_defect();
        if defect > HERMITIAN_TOLERANCE * a.max_abs().max(1.0) {
            return Err(Error::NotHermitian(defect));
        }
        let n = a.rows();
        let max_diag = (0..n).map(|i| a[(i, i)].re).fold(0.0, f64::max);
        let tol = PIVOT_TOLERANCE * max_diag;
        let mut l = CMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)].re;
            for k in 0..j {
                d -= l[(j, k)].norm_sqr();
            }
            if !(d > tol) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j, value: d });
            }
            let djj = d.sqrt();
            l[(j, j)] = C64::new(djj, 0.0);
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)].conj();
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn lower(&self) -> &CMatrix {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Solves `A·x = b`.
    pub fn solve_vec(&self, b: &[C64]) -> Result<CVector> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::Dimension(format!(
                "right-hand side of length {} for a {n}x{n} system",
                b.len()
            )));
        }
        let l = &self.l;
        // Forward substitution L·z = b.
        let mut z = b.to_vec();
        for i in 0..n {
            let mut s = z[i];
            for k in 0..i {
                s -= l[(i, k)] * z[k];
            }
            z[i] = s / l[(i, i)].re;
        }
        // Back substitution L^H·x = z.
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in i + 1..n {
                s -= l[(k, i)].conj() * z[k];
            }
            z[i] = s / l[(i, i)].re;
        }
        Ok(CVector(z))
    }

    /// Solves `A·X = B` column by column.
    pub fn solve_mat(&self, b: &CMatrix) -> Result<CMatrix> {
        if b.rows() != self.dim() {
            return Err(Error::Dimension(format!(
                "right-hand side with {} rows for a {}x{} system",
                b.rows(),
                self.dim(),
                self.dim()
            )));
        }
        let mut x = CMatrix::zeros(b.rows(), b.cols());
        for c in 0..b.cols() {
            let col = self.solve_vec(&b.column(c))?;
            for (r, v) in col.iter().enumerate() {
                x[(r, c)] = *v;
            }
        }
        Ok(x)
    }

    /// Inverse of the factored matrix.
    pub fn inverse(&self) -> Result<CMatrix> {
        self.solve_mat(&CMatrix::identity(self.dim()))
    }
}

/// Solves `A·X = B` for Hermitian positive definite `A`.
pub fn cholesky_solve(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    Cholesky::factor(a)?.solve_mat(b)
}

/// Factor `L` with `L·L^H = A` for Hermitian positive *semi*definite `A`.
///
/// Columns whose pivot falls below the tolerance are set to zero, which
/// handles rank-deficient covariances such as spectral nulls.
pub fn psd_factor(a: &CMatrix) -> Result<CMatrix> {
    if a.rows() != a.cols() {
        return Err(Error::Dimension("covariance must be square".into()));
    }
    let defect = a.hermitian_defect();
    if defect > HERMITIAN_TOLERANCE * a.max_abs().max(1.0) {
        return Err(Error::NotHermitian(defect));
    }
    let n = a.rows();
    let max_diag = (0..n).map(|i| a[(i, i)].re).fold(0.0, f64::max);
    let tol = 1e-12 * max_diag;
    let mut l = CMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)].re;
        for k in 0..j {
            d -= l[(j, k)].norm_sqr();
        }
        if d < -1e-9 * max_diag.max(1.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        if d <= tol {
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = C64::new(djj, 0.0);
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Seeded, reproducible random stream.
///
/// Independent sub-streams are derived from the root seed and a key path
/// (for example channel id and burst id), never from the current state, so
/// parallel work draws the same numbers regardless of scheduling.
#[derive(Clone, Debug)]
pub struct SimRng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Sub-stream keyed by `keys`, a pure function of `(seed, keys)`.
    pub fn substream(&self, keys: &[u64]) -> SimRng {
        let mut h = splitmix64(self.seed ^ 0x5ca1_ab1e_d00d_f00d);
        for &k in keys {
            h = splitmix64(h ^ splitmix64(k.wrapping_add(0x2545_f491_4f6c_dd1d)));
        }
        SimRng::new(h)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Sample of `CN(0, 1)`.
    pub fn complex_normal(&mut self) -> C64 {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        C64::new(self.standard_normal() * s, self.standard_normal() * s)
    }

    pub fn uniform(&mut self) -> f64 {
        rand::Rng::random::<f64>(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        rand::Rng::random_range(&mut self.inner, 0..n)
    }

    pub fn bit(&mut self) -> u8 {
        (self.inner.next_u32() & 1) as u8
    }
}

impl RngCore for SimRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Zero-mean circularly symmetric complex Gaussian sample with covariance `cov`.
pub fn gauss_cn(rng: &mut SimRng, cov: &CMatrix) -> Result<CVector> {
    let l = psd_factor(cov)?;
    let z: Vec<C64> = (0..cov.rows()).map(|_| rng.complex_normal()).collect();
    l.matvec(&z)
}

/// Fast path of [`gauss_cn`] for a diagonal covariance.
pub fn gauss_cn_diag(rng: &mut SimRng, variances: &[f64]) -> CVector {
    CVector(
        variances
            .iter()
            .map(|&v| rng.complex_normal() * v.max(0.0).sqrt())
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_matrix(rng: &mut SimRng, rows: usize, cols: usize) -> CMatrix {
        CMatrix::from_fn(rows, cols, |_, _| rng.complex_normal())
    }

    fn random_pd(rng: &mut SimRng, n: usize) -> CMatrix {
        let g = random_matrix(rng, n, n);
        g.adjoint_matmul(&g).unwrap().add(&CMatrix::identity(n)).unwrap()
    }

    /// Gauss-Jordan elimination with partial pivoting; independent of the
    /// Cholesky path.
    fn gauss_jordan_inverse(a: &CMatrix) -> CMatrix {
        let n = a.rows();
        let mut m = a.clone();
        let mut inv = CMatrix::identity(n);
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| m[(x, col)].norm().partial_cmp(&m[(y, col)].norm()).unwrap())
                .unwrap();
            for j in 0..n {
                let t = m[(col, j)];
                m[(col, j)] = m[(piv, j)];
                m[(piv, j)] = t;
                let t = inv[(col, j)];
                inv[(col, j)] = inv[(piv, j)];
                inv[(piv, j)] = t;
            }
            let p = m[(col, col)];
            for j in 0..n {
                m[(col, j)] /= p;
                inv[(col, j)] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = m[(r, col)];
                    for j in 0..n {
                        let mv = m[(col, j)];
                        let iv = inv[(col, j)];
                        m[(r, j)] -= f * mv;
                        inv[(r, j)] -= f * iv;
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn dft_small_sizes() {
        assert_eq!(dft_matrix(1).unwrap(), CMatrix::identity(1));
        let f2 = dft_matrix(2).unwrap();
        assert!((f2[(0, 0)] - c(1.0, 0.0)).norm() < 1e-15);
        assert!((f2[(0, 1)] - c(1.0, 0.0)).norm() < 1e-15);
        assert!((f2[(1, 0)] - c(1.0, 0.0)).norm() < 1e-15);
        assert!((f2[(1, 1)] - c(-1.0, 0.0)).norm() < 1e-15);
        assert!(dft_matrix(0).is_err());
    }

    #[test]
    fn dft_is_scaled_unitary() {
        for n in 1..=64 {
            let f = dft_matrix(n).unwrap();
            let g = f.adjoint_matmul(&f).unwrap();
            let err = g.sub(&CMatrix::identity(n).scaled(n as f64)).unwrap().max_abs();
            let tol = if n == 8 { 1e-12 } else { 1e-10 };
            assert!(err < tol, "n={n} err={err}");
        }
    }

    #[test]
    fn cholesky_identity_and_diagonal() {
        let mut rng = SimRng::new(1);
        let b = random_matrix(&mut rng, 3, 2);
        let x = cholesky_solve(&CMatrix::identity(3), &b).unwrap();
        assert!(x.sub(&b).unwrap().max_abs() < 1e-15);

        let a = CMatrix::from_real_diag(&[2.0, 4.0]);
        let b = CMatrix::from_vec(2, 1, vec![c(1.0, 0.0), c(1.0, 0.0)]).unwrap();
        let x = cholesky_solve(&a, &b).unwrap();
        assert!((x[(0, 0)] - c(0.5, 0.0)).norm() < 1e-15);
        assert!((x[(1, 0)] - c(0.25, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn cholesky_inverse_matches_elimination_oracle() {
        let mut rng = SimRng::new(7);
        let a = random_pd(&mut rng, 4);
        let x = cholesky_solve(&a, &CMatrix::identity(4)).unwrap();
        let oracle = gauss_jordan_inverse(&a);
        assert!(x.sub(&oracle).unwrap().max_abs() < 1e-10);
        let resid = a.matmul(&x).unwrap().sub(&CMatrix::identity(4)).unwrap();
        assert!(resid.frobenius_norm() / 2.0 <= 1e-9);
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        // Second leading minor is zero.
        let a = CMatrix::from_vec(
            3,
            3,
            vec![
                c(1.0, 0.0),
                c(1.0, 0.0),
                c(0.0, 0.0),
                c(1.0, 0.0),
                c(1.0, 0.0),
                c(0.0, 0.0),
                c(0.0, 0.0),
                c(0.0, 0.0),
                c(1.0, 0.0),
            ],
        )
        .unwrap();
        match Cholesky::factor(&a) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("unexpected {other:?}"),
        }
        let nonherm = CMatrix::from_vec(2, 2, vec![c(1.0, 0.0), c(0.5, 0.0), c(0.0, 0.0), c(1.0, 0.0)])
            .unwrap();
        assert!(matches!(Cholesky::factor(&nonherm), Err(Error::NotHermitian(_))));
    }

    #[test]
    fn cholesky_recovers_solution_up_to_64() {
        let mut rng = SimRng::new(11);
        for &n in &[1usize, 2, 5, 16, 33, 64] {
            let a = random_pd(&mut rng, n);
            let x0 = random_matrix(&mut rng, n, 3);
            let b = a.matmul(&x0).unwrap();
            let x = cholesky_solve(&a, &b).unwrap();
            let rel = x.sub(&x0).unwrap().frobenius_norm() / x0.frobenius_norm();
            assert!(rel < 1e-8, "n={n} rel={rel}");
        }
    }

    #[test]
    fn substreams_are_pure_functions_of_keys() {
        let root = SimRng::new(42);
        let mut a = root.substream(&[3, 9]);
        let mut b = SimRng::new(42).substream(&[3, 9]);
        let mut other = root.substream(&[9, 3]);
        let xa: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        let xo: Vec<u64> = (0..4).map(|_| other.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xo);
    }

    #[test]
    fn gauss_zero_covariance_gives_zero() {
        let mut rng = SimRng::new(3);
        let w = gauss_cn(&mut rng, &CMatrix::zeros(3, 3)).unwrap();
        assert!(w.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn gauss_rejects_non_hermitian() {
        let mut rng = SimRng::new(3);
        let cov = CMatrix::from_vec(2, 2, vec![c(1.0, 0.0), c(0.3, 0.0), c(0.0, 0.0), c(1.0, 0.0)])
            .unwrap();
        assert!(gauss_cn(&mut rng, &cov).is_err());
    }

    #[test]
    fn gauss_moments_scaled_identity() {
        let mut rng = SimRng::new(5);
        let sigma2 = 2.5;
        let cov = CMatrix::identity(3).scaled(sigma2);
        let draws = 100_000;
        let mut power = [0.0; 3];
        let mut mean = [C64::new(0.0, 0.0); 3];
        let mut pseudo = C64::new(0.0, 0.0);
        for _ in 0..draws {
            let w = gauss_cn(&mut rng, &cov).unwrap();
            for i in 0..3 {
                power[i] += w[i].norm_sqr();
                mean[i] += w[i];
            }
            pseudo += w[0] * w[0];
        }
        for i in 0..3 {
            let v = power[i] / draws as f64;
            assert!((v / sigma2 - 1.0).abs() < 0.03, "component {i}: {v}");
            assert!((mean[i] / draws as f64).norm() < 0.03);
        }
        assert!((pseudo / draws as f64).norm() < 0.05);
    }

    #[test]
    fn gauss_moments_diagonal() {
        let mut rng = SimRng::new(6);
        let cov = CMatrix::from_real_diag(&[1.0, 4.0]);
        let draws = 100_000;
        let (mut p0, mut p1, mut cross) = (0.0, 0.0, C64::new(0.0, 0.0));
        for _ in 0..draws {
            let w = gauss_cn(&mut rng, &cov).unwrap();
            p0 += w[0].norm_sqr();
            p1 += w[1].norm_sqr();
            cross += w[0] * w[1].conj();
        }
        let n = draws as f64;
        assert!((p0 / n - 1.0).abs() < 0.03);
        assert!((p1 / n / 4.0 - 1.0).abs() < 0.03);
        // Standard error of the cross term is sqrt(1·4/n) ≈ 0.0063.
        assert!((cross / n).norm() < 0.03);
    }
}
