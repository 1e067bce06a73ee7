//! Dense Cholesky machinery.
//!
//! The factorization, triangular solves and triangular inverse are written as
//! recursive two-by-two block algorithms so that almost all the flops land in
//! matrix-matrix products, which nalgebra hands to an optimized GEMM kernel.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector, Dyn, U1};

use crate::scalar::{lit, Scalar};

/// Blocks at or below this size are handled by the scalar kernels.
const LEAF: usize = 64;

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky<T: Scalar> {
    l: DMatrix<T>,
}

impl<T: Scalar> Cholesky<T> {
    /// Factors a symmetric positive-definite matrix. Only the lower triangle
    /// of `a` is read. Returns `None` when a non-positive pivot is hit.
    pub fn factor(a: &DMatrix<T>) -> Option<Self> {
        assert_eq!(a.nrows(), a.ncols(), "Cholesky needs a square matrix");
        let mut l = a.clone();
        chol_in_place(l.as_view_mut()).then_some(Cholesky { l })
    }

    pub fn l(&self) -> &DMatrix<T> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn log_det(&self) -> T {
        let mut acc = T::zero();
        for i in 0..self.dim() {
            acc += self.l[(i, i)].ln();
        }
        acc * lit(2.0)
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<T>) -> DVector<T> {
        let z = self.solve_lower_vec(b);
        self.l
            .tr_solve_lower_triangular(&z)
            .expect("non-singular Cholesky factor")
    }

    /// Solves `L z = b`.
    pub fn solve_lower_vec(&self, b: &DVector<T>) -> DVector<T> {
        self.l
            .solve_lower_triangular(b)
            .expect("non-singular Cholesky factor")
    }

    /// Solves `L Z = B` for a matrix right-hand side.
    pub fn solve_lower(&self, b: &DMatrix<T>) -> DMatrix<T> {
        let mut x = b.clone();
        trsm_left_lower(self.l.as_view(), x.as_view_mut());
        x
    }

    /// Solves `A X = B` for a matrix right-hand side.
    pub fn solve_mat(&self, b: &DMatrix<T>) -> DMatrix<T> {
        let z = self.solve_lower(b);
        self.l
            .tr_solve_lower_triangular(&z)
            .expect("non-singular Cholesky factor")
    }

    /// `L⁻¹`.
    pub fn l_inverse(&self) -> DMatrix<T> {
        tri_inverse(&self.l)
    }

    /// `A⁻¹ = L⁻ᵀ L⁻¹`.
    pub fn inverse(&self) -> DMatrix<T> {
        let mut out = self.inverse_lower();
        for j in 1..out.ncols() {
            for i in 0..j {
                out[(i, j)] = out[(j, i)];
            }
        }
        out
    }

    /// Lower triangle of `A⁻¹`; the strict upper triangle is left at zero.
    pub(crate) fn inverse_lower(&self) -> DMatrix<T> {
        let inv = tri_inverse(&self.l);
        let n = inv.nrows();
        let mut out = DMatrix::zeros(n, n);
        lower_gram_into(inv.as_view(), out.as_view_mut());
        out
    }
}

/// Crude lower bound on the spectrum used only in error messages.
pub fn smallest_eigenvalue<T: Scalar>(a: &DMatrix<T>) -> T {
    let sym = nalgebra::SymmetricEigen::new(a.clone());
    sym.eigenvalues
        .iter()
        .copied()
        .fold(T::max_value().unwrap_or(lit(f64::MAX)), |m, v| if v < m { v } else { m })
}

type View<'a, T> = DMatrixView<'a, T, U1, Dyn>;
type ViewMut<'a, T> = DMatrixViewMut<'a, T, U1, Dyn>;

/// In-place blocked factorization of the lower triangle; the strict upper
/// triangle is zeroed. Returns `false` on a non-positive pivot.
fn chol_in_place<T: Scalar>(mut a: ViewMut<'_, T>) -> bool {
    let n = a.nrows();
    if n <= LEAF {
        return chol_leaf(a);
    }
    let k = n / 2;
    let m = n - k;
    let (mut left, mut right) = a.columns_range_pair_mut(0..k, k..n);
    let (mut a11, mut a21) = left.rows_range_pair_mut(0..k, k..n);
    if !chol_in_place(a11.as_view_mut()) {
        return false;
    }
    trsm_right_lower_t(a11.as_view(), a21.as_view_mut());
    let a21t = a21.transpose();
    let mut a22 = right.view_mut((k, 0), (m, m));
    a22.gemm(-T::one(), &a21, &a21t, T::one());
    if !chol_in_place(a22) {
        return false;
    }
    right.view_mut((0, 0), (k, m)).fill(T::zero());
    true
}

fn chol_leaf<T: Scalar>(mut a: ViewMut<'_, T>) -> bool {
    // Left-looking on a contiguous copy so the column updates vectorize.
    let n = a.nrows();
    let mut w = a.clone_owned();
    let s = w.as_mut_slice();
    for j in 0..n {
        let (done, rest) = s.split_at_mut(j * n);
        let col = &mut rest[j..n];
        for p in 0..j {
            let cp = &done[p * n + j..(p + 1) * n];
            let f = cp[0];
            if f != T::zero() {
                for (c, &v) in col.iter_mut().zip(cp) {
                    *c -= v * f;
                }
            }
        }
        let d = col[0];
        if !(d > T::zero()) || !d.is_finite() {
            return false;
        }
        let djj = d.sqrt();
        col[0] = djj;
        for c in &mut col[1..] {
            *c /= djj;
        }
    }
    for j in 1..n {
        s[j * n..j * n + j].fill(T::zero());
    }
    a.copy_from(&w);
    true
}

/// Overwrites `B` with the solution `X` of `X Lᵀ = B`, `L` lower triangular.
fn trsm_right_lower_t<T: Scalar>(l: View<'_, T>, mut b: ViewMut<'_, T>) {
    let k = l.nrows();
    if k <= LEAF {
        // X = B L⁻ᵀ through the small inverse keeps the flops in GEMM.
        let inv_t = leaf_inverse(l).transpose();
        let w = b.clone_owned();
        b.gemm(T::one(), &w, &inv_t, T::zero());
        return;
    }
    let k1 = k / 2;
    let k2 = k - k1;
    let (mut b1, mut b2) = b.columns_range_pair_mut(0..k1, k1..k);
    trsm_right_lower_t(l.view((0, 0), (k1, k1)), b1.as_view_mut());
    let l21t = l.view((k1, 0), (k2, k1)).transpose();
    b2.gemm(-T::one(), &b1, &l21t, T::one());
    trsm_right_lower_t(l.view((k1, k1), (k2, k2)), b2);
}

/// Overwrites `B` with the solution `X` of `L X = B`, `L` lower triangular.
fn trsm_left_lower<T: Scalar>(l: View<'_, T>, mut b: ViewMut<'_, T>) {
    let k = l.nrows();
    let m = b.ncols();
    if k <= LEAF && m > 8 {
        let inv = leaf_inverse(l);
        let w = b.clone_owned();
        b.gemm(T::one(), &inv, &w, T::zero());
        return;
    }
    if k <= LEAF {
        let lw = l.clone_owned();
        let ls = lw.as_slice();
        let mut w = b.clone_owned();
        for col in w.as_mut_slice().chunks_exact_mut(k) {
            for j in 0..k {
                let v = col[j] / ls[j * k + j];
                col[j] = v;
                if v != T::zero() {
                    for (x, &f) in col[j + 1..].iter_mut().zip(&ls[j * k + j + 1..(j + 1) * k]) {
                        *x -= f * v;
                    }
                }
            }
        }
        b.copy_from(&w);
        return;
    }
    let k1 = k / 2;
    let k2 = k - k1;
    let (mut b1, mut b2) = b.rows_range_pair_mut(0..k1, k1..k);
    trsm_left_lower(l.view((0, 0), (k1, k1)), b1.as_view_mut());
    b2.gemm(-T::one(), &l.view((k1, 0), (k2, k1)), &b1, T::one());
    trsm_left_lower(l.view((k1, k1), (k2, k2)), b2);
}

/// Inverse of a small lower-triangular block by column substitution.
fn leaf_inverse<T: Scalar>(l: View<'_, T>) -> DMatrix<T> {
    let k = l.nrows();
    let lw = l.clone_owned();
    let ls = lw.as_slice();
    let mut w = DMatrix::identity(k, k);
    for (c, col) in w.as_mut_slice().chunks_exact_mut(k).enumerate() {
        for j in c..k {
            let v = col[j] / ls[j * k + j];
            col[j] = v;
            if v != T::zero() {
                for (x, &f) in col[j + 1..].iter_mut().zip(&ls[j * k + j + 1..(j + 1) * k]) {
                    *x -= f * v;
                }
            }
        }
    }
    w
}

/// Inverse of a non-singular lower-triangular matrix.
fn tri_inverse<T: Scalar>(l: &DMatrix<T>) -> DMatrix<T> {
    let mut out = l.clone();
    tri_inverse_in_place(out.as_view_mut());
    out
}

fn tri_inverse_in_place<T: Scalar>(mut a: ViewMut<'_, T>) {
    let n = a.nrows();
    if n <= LEAF {
        let x = leaf_inverse(a.as_view());
        a.copy_from(&x);
        return;
    }
    let k = n / 2;
    let (mut left, mut right) = a.columns_range_pair_mut(0..k, k..n);
    let (mut a11, mut a21) = left.rows_range_pair_mut(0..k, k..n);
    let mut a22 = right.rows_range_mut(k..n);
    tri_inverse_in_place(a11.as_view_mut());
    tri_inverse_in_place(a22.as_view_mut());
    // L⁻¹ has lower-left block −L22⁻¹ L21 L11⁻¹.
    let t = &a21 * &a11;
    a21.gemm(-T::one(), &a22, &t, T::zero());
}

// nalgebra's transposed products go through per-entry dot products, so
// transposes are materialized to keep everything on the GEMM path.
/// Writes the lower triangle of `Lᵀ L` into `out`.
fn lower_gram_into<T: Scalar>(l: View<'_, T>, mut out: ViewMut<'_, T>) {
    let n = l.nrows();
    if n <= LEAF {
        out.gemm(T::one(), &l.transpose(), &l, T::zero());
        return;
    }
    let k = n / 2;
    let m = n - k;
    let a21 = l.view((k, 0), (m, k));
    let a21t = a21.transpose();
    let a22 = l.view((k, k), (m, m));
    let (mut left, mut right) = out.columns_range_pair_mut(0..k, k..n);
    let (mut top, mut off) = left.rows_range_pair_mut(0..k, k..n);
    lower_gram_into(l.view((0, 0), (k, k)), top.as_view_mut());
    top.gemm(T::one(), &a21t, &a21, T::one());
    off.gemm(T::one(), &a22.transpose(), &a21, T::zero());
    lower_gram_into(a22, right.rows_range_mut(k..n));
}
