//! Dense complex kernels on row-major matrices, backed by BLAS and LAPACK.

// Links the system OpenBLAS that provides the cblas and lapack symbols.
extern crate openblas_src;

use std::os::raw::{c_char, c_int};

use cblas_sys::{cblas_zgemm, cblas_zherk, CblasConjTrans, CblasNoTrans, CblasRowMajor, CblasUpper};

use crate::error::{Error, Result};
use crate::volumes::{C64, ZERO};

/// Row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<C64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMatrix { rows, cols, data: vec![ZERO; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(CMatrix { rows, cols, data })
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> C64 {
        self.data[r * self.cols + c]
    }

    pub fn frobenius(&self) -> f64 {
        crate::volumes::norm_sqr(&self.data).sqrt()
    }

    /// Summary used in decomposition failure diagnostics.
    pub fn stats(&self) -> String {
        let finite = self.data.iter().filter(|v| v.re.is_finite() && v.im.is_finite()).count();
        let max = self.data.iter().map(|v| v.norm()).fold(0.0, f64::max);
        format!(
            "{}x{} matrix, {} non-finite entries, max |entry| {max:.3e}, Frobenius {:.3e}",
            self.rows,
            self.cols,
            self.data.len() - finite,
            self.frobenius()
        )
    }
}

fn int(n: usize) -> c_int {
    c_int::try_from(n).expect("matrix dimension exceeds BLAS integer range")
}

/// `H^H H` as a full row-major `cols x cols` Hermitian matrix.
pub fn gram(h: &CMatrix) -> Vec<C64> {
    let n = h.cols;
    let mut g = vec![ZERO; n * n];
    if n == 0 || h.rows == 0 {
        return g;
    }
    unsafe {
        cblas_zherk(
            CblasRowMajor,
            CblasUpper,
            CblasConjTrans,
            int(n),
            int(h.rows),
            1.0,
            h.data.as_ptr() as *const [f64; 2],
            int(n),
            0.0,
            g.as_mut_ptr() as *mut [f64; 2],
            int(n),
        );
    }
    for i in 0..n {
        g[i * n + i].im = 0.0;
        for j in 0..i {
            g[i * n + j] = g[j * n + i].conj();
        }
    }
    g
}

/// `A (m x k) * op(B)`, all row-major. `b_conj_trans` selects `B^H` with `B` stored `n x k`.
pub fn matmul(a: &[C64], b: &[C64], m: usize, k: usize, n: usize, b_conj_trans: bool) -> Vec<C64> {
    let mut c = vec![ZERO; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let one = [1.0, 0.0];
    let zero = [0.0, 0.0];
    let (tb, ldb) = if b_conj_trans { (CblasConjTrans, k) } else { (CblasNoTrans, n) };
    unsafe {
        cblas_zgemm(
            CblasRowMajor,
            CblasNoTrans,
            tb,
            int(m),
            int(n),
            int(k),
            &one,
            a.as_ptr() as *const [f64; 2],
            int(k),
            b.as_ptr() as *const [f64; 2],
            int(ldb),
            &zero,
            c.as_mut_ptr() as *mut [f64; 2],
            int(n),
        );
    }
    c
}

/// Eigen-decomposition of a Hermitian matrix stored row-major.
///
/// Returns eigenvalues in descending order and, when `top > 0`, the matching
/// leading `top` eigenvectors as a row-major `n x top` matrix.
pub fn hermitian_eigen(g: &[C64], n: usize, top: usize) -> Result<(Vec<f64>, Vec<C64>)> {
    if g.len() != n * n {
        return Err(Error::DimensionMismatch(format!("{} values for a {n}x{n} matrix", g.len())));
    }
    if top > n {
        return Err(Error::OutOfRange(format!("requested {top} eigenvectors of a {n}x{n} matrix")));
    }
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    // Row-major storage of a Hermitian G is the column-major storage of conj(G):
    // same eigenvalues, conjugated eigenvectors.
    let fail = |what: &str, info: c_int| Error::Decomposition {
        reason: format!("zheevr ({what}) returned info = {info}"),
        stats: format!("{n}x{n} Hermitian Gram matrix"),
    };
    let (mut vals, _) = zheevr(g, n, None).map_err(|i| fail("eigenvalues", i))?;
    vals.reverse();
    if top == 0 {
        return Ok((vals, Vec::new()));
    }
    let (_, z) = zheevr(g, n, Some((n - top + 1, n))).map_err(|i| fail("eigenvectors", i))?;
    // z is column-major n x top, ascending; flip to descending and conjugate
    let mut v = vec![ZERO; n * top];
    for j in 0..top {
        let src = top - 1 - j;
        for i in 0..n {
            v[i * top + j] = z[i + n * src].conj();
        }
    }
    Ok((vals, v))
}

/// Solves the real symmetric positive definite system `a x = b` with LAPACK
/// `dposv`. `a` is overwritten by its Cholesky factor and `b` by the solution.
pub fn solve_spd(a: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    if a.len() != n * n || b.len() != n {
        return Err(Error::DimensionMismatch(format!("{} and {} values for an order {n} system", a.len(), b.len())));
    }
    if n == 0 {
        return Ok(());
    }
    let uplo = b'U' as c_char;
    let (nn, one) = (int(n), 1 as c_int);
    let mut info: c_int = 0;
    unsafe {
        lapack_sys::dposv_(&uplo, &nn, &one, a.as_mut_ptr(), &nn, b.as_mut_ptr(), &nn, &mut info);
    }
    if info != 0 {
        return Err(Error::Decomposition { reason: format!("dposv returned info = {info}"), stats: format!("order {n}") });
    }
    Ok(())
}

/// Thin wrapper over LAPACK `zheevr` on a column-major copy of `a`.
/// `range = Some((il, iu))` computes vectors for the 1-based ascending index range.
fn zheevr(a: &[C64], n: usize, range: Option<(usize, usize)>) -> std::result::Result<(Vec<f64>, Vec<C64>), c_int> {
    let mut a = a.to_vec();
    let jobz = if range.is_some() { b'V' } else { b'N' } as c_char;
    let rng = if range.is_some() { b'I' } else { b'A' } as c_char;
    let uplo = b'U' as c_char;
    let (il, iu) = range.map_or((1, n), |(l, u)| (l, u));
    let count = iu + 1 - il;
    let nn = int(n);
    let (il, iu) = (int(il), int(iu));
    let (vl, vu, abstol) = (0.0f64, 0.0f64, 0.0f64);
    let mut m: c_int = 0;
    let mut w = vec![0.0f64; n];
    let ldz = if range.is_some() { n } else { 1 };
    let mut z = vec![ZERO; if range.is_some() { n * count } else { 1 }];
    let mut isuppz = vec![0 as c_int; 2 * n.max(1)];
    let mut info: c_int = 0;
    let mut work_q = ZERO;
    let mut rwork_q = 0.0f64;
    let mut iwork_q: c_int = 0;
    let query: c_int = -1;
    unsafe {
        lapack_sys::zheevr_(
            &jobz, &rng, &uplo, &nn,
            a.as_mut_ptr() as *mut _, &nn,
            &vl, &vu, &il, &iu, &abstol, &mut m,
            w.as_mut_ptr(), z.as_mut_ptr() as *mut _, &int(ldz), isuppz.as_mut_ptr(),
            &mut work_q as *mut C64 as *mut _, &query,
            &mut rwork_q, &query,
            &mut iwork_q, &query,
            &mut info,
        );
    }
    if info != 0 {
        return Err(info);
    }
    let lwork = work_q.re as usize;
    let lrwork = rwork_q as usize;
    let liwork = iwork_q as usize;
    let mut work = vec![ZERO; lwork.max(1)];
    let mut rwork = vec![0.0f64; lrwork.max(1)];
    let mut iwork = vec![0 as c_int; liwork.max(1)];
    unsafe {
        lapack_sys::zheevr_(
            &jobz, &rng, &uplo, &nn,
            a.as_mut_ptr() as *mut _, &nn,
            &vl, &vu, &il, &iu, &abstol, &mut m,
            w.as_mut_ptr(), z.as_mut_ptr() as *mut _, &int(ldz), isuppz.as_mut_ptr(),
            work.as_mut_ptr() as *mut _, &int(lwork),
            rwork.as_mut_ptr(), &int(lrwork),
            iwork.as_mut_ptr(), &int(liwork),
            &mut info,
        );
    }
    if info != 0 {
        return Err(info);
    }
    w.truncate(m as usize);
    Ok((w, z))
}
