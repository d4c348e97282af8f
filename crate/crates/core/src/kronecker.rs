//! Kronecker algebra: the product itself, the rearrangement that turns the
//! nearest-Kronecker problem into a rank-1 approximation, power-iteration
//! rank-1 SVD, and products with `A ⊗ B` that never build the full matrix.
//!
//! Index convention (row-major throughout): for `A` of shape `m1 x n1` and
//! `B` of shape `m2 x n2`,
//!
//! ```text
//! (A ⊗ B)[i1*m2 + i2, j1*n2 + j2] = A[i1, j1] * B[i2, j2]
//! ```
//!
//! and `vec` flattens row by row.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul, matmul_nt, matmul_tn, Matrix, Rng};

/// Shapes of the two factors: `A` is `m1 x n1`, `B` is `m2 x n2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactorShapes {
    pub m1: usize,
    pub n1: usize,
    pub m2: usize,
    pub n2: usize,
}

impl FactorShapes {
    pub const fn new(m1: usize, n1: usize, m2: usize, n2: usize) -> Self {
        Self { m1, n1, m2, n2 }
    }

    /// Shape of `A ⊗ B`.
    pub fn product_shape(&self) -> (usize, usize) {
        (self.m1 * self.m2, self.n1 * self.n2)
    }

    pub fn a_shape(&self) -> (usize, usize) {
        (self.m1, self.n1)
    }

    pub fn b_shape(&self) -> (usize, usize) {
        (self.m2, self.n2)
    }

    /// `m1*n1 + m2*n2`.
    pub fn param_count(&self) -> usize {
        self.m1 * self.n1 + self.m2 * self.n2
    }

    /// Check that these factors tile a `rows x cols` matrix.
    pub fn check_divides(&self, rows: usize, cols: usize) -> Result<()> {
        if [self.m1, self.n1, self.m2, self.n2].contains(&0) || self.product_shape() != (rows, cols)
        {
            return Err(Error::Shape {
                op: "factor shapes",
                lhs: (rows, cols),
                rhs: self.product_shape(),
            });
        }
        Ok(())
    }

    /// Multiply-adds for one factored matrix-vector product, using the
    /// cheaper of the two evaluation orders:
    /// `min(n1*n2*m2 + m1*n1*m2, m1*n1*n2 + m1*n2*m2)`.
    pub fn matvec_macs(&self) -> u64 {
        let (m1, n1, m2, n2) = (
            self.m1 as u64,
            self.n1 as u64,
            self.m2 as u64,
            self.n2 as u64,
        );
        (n1 * n2 * m2 + m1 * n1 * m2).min(m1 * n1 * n2 + m1 * n2 * m2)
    }

    fn a_first(&self) -> bool {
        let (m1, n1, m2, n2) = (self.m1, self.n1, self.m2, self.n2);
        m1 * n1 * n2 + m1 * n2 * m2 <= n1 * n2 * m2 + m1 * n1 * m2
    }
}

impl fmt::Display for FactorShapes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "A:{}x{},B:{}x{}", self.m1, self.n1, self.m2, self.n2)
    }
}

/// A matrix stored as the Kronecker product of two factors.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerPair {
    pub a: Matrix,
    pub b: Matrix,
}

impl KroneckerPair {
    pub fn new(a: Matrix, b: Matrix) -> Self {
        Self { a, b }
    }

    pub fn shapes(&self) -> FactorShapes {
        FactorShapes::new(self.a.rows(), self.a.cols(), self.b.rows(), self.b.cols())
    }

    /// Shape of the implied product.
    pub fn shape(&self) -> (usize, usize) {
        self.shapes().product_shape()
    }

    pub fn param_count(&self) -> usize {
        self.shapes().param_count()
    }

    /// Build `A ⊗ B` explicitly. Only for tests, reports and small inputs.
    pub fn materialize(&self) -> Matrix {
        kron(&self.a, &self.b)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        kron_matvec(self, x)
    }

    pub fn matmul(&self, x: &Matrix) -> Result<Matrix> {
        kron_matmul(self, x)
    }
}

/// Outcome of a nearest-Kronecker fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    /// `||W - A ⊗ B||_F`.
    pub residual_fro: f64,
    /// `residual_fro / ||W||_F`, or 0 when `W = 0`.
    pub relative_residual: f64,
    pub singular_value: f64,
    pub power_iterations_used: usize,
    pub converged: bool,
}

/// The Kronecker product, block `(i, j)` equal to `a[i, j] * b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (m1, n1) = a.shape();
    let (m2, n2) = b.shape();
    let cols = n1 * n2;
    let mut out = Matrix::zeros(m1 * m2, cols);
    let data = out.as_mut_slice();
    for i1 in 0..m1 {
        for j1 in 0..n1 {
            let s = a.get(i1, j1);
            for i2 in 0..m2 {
                let row = (i1 * m2 + i2) * cols + j1 * n2;
                for (o, &bv) in data[row..row + n2].iter_mut().zip(b.row(i2)) {
                    *o = s * bv;
                }
            }
        }
    }
    out
}

/// Rearrange `w` so that `||W - A ⊗ B||_F = ||R - vec(A) vec(B)^T||_F`.
///
/// Row `i1*n1 + j1` of the result is the row-major flattening of the
/// `m2 x n2` block of `w` at block coordinates `(i1, j1)`.
pub fn rearrange(w: &Matrix, shapes: FactorShapes) -> Result<Matrix> {
    shapes.check_divides(w.rows(), w.cols())?;
    let FactorShapes { m1, n1, m2, n2 } = shapes;
    let mut r = Matrix::zeros(m1 * n1, m2 * n2);
    for i1 in 0..m1 {
        for j1 in 0..n1 {
            let dst = r.row_mut(i1 * n1 + j1);
            for i2 in 0..m2 {
                let src = &w.row(i1 * m2 + i2)[j1 * n2..(j1 + 1) * n2];
                dst[i2 * n2..(i2 + 1) * n2].copy_from_slice(src);
            }
        }
    }
    Ok(r)
}

/// Stopping rule for [`rank1_svd`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIteration {
    pub max_iters: usize,
    /// Stop once successive singular-value estimates differ by at most
    /// `tol * max(1, sigma)`.
    pub tol: f64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            tol: 1e-10,
        }
    }
}

/// Dominant singular triplet of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Rank1Svd {
    pub u: Vec<f64>,
    pub sigma: f64,
    pub v: Vec<f64>,
    pub iterations: usize,
    /// False when `max_iters` ran out; `u`, `sigma`, `v` then hold the last iterate.
    pub converged: bool,
}

/// Largest Gram matrix side formed explicitly; beyond this the iteration
/// applies `m^T (m v)` directly.
const GRAM_LIMIT: usize = 512;

/// Best rank-1 approximation `sigma * u v^T` by power iteration on `m^T m`.
///
/// The iteration runs on whichever Gram matrix (`m^T m` or `m m^T`) is
/// smaller; it starts from a Gaussian vector drawn from `rng`. Signs are
/// fixed so the largest-magnitude entry of `u` is positive (first index wins
/// ties).
pub fn rank1_svd(m: &Matrix, opts: PowerIteration, rng: &mut Rng) -> Result<Rank1Svd> {
    if opts.max_iters == 0 || opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(Error::Config(format!(
            "power iteration needs max_iters >= 1 and tol > 0, got {} and {}",
            opts.max_iters, opts.tol
        )));
    }
    if m.rows() < m.cols() {
        let t = rank1_svd(&m.transpose(), opts, rng)?;
        let mut out = Rank1Svd {
            u: t.v,
            v: t.u,
            ..t
        };
        fix_sign(&mut out.u, &mut out.v);
        return Ok(out);
    }

    let (p, q) = m.shape();
    let mut u = vec![0.0; p];
    let mut v = vec![0.0; q];
    if m.frobenius_norm() == 0.0 {
        u[0] = 1.0;
        v[0] = 1.0;
        return Ok(Rank1Svd {
            u,
            sigma: 0.0,
            v,
            iterations: 0,
            converged: true,
        });
    }

    let gram = (q <= GRAM_LIMIT).then(|| crate::tensor::matmul_tn(m, m).expect("square gram"));
    let mut mv = vec![0.0; p];
    let mut apply = |v: &[f64], out: &mut [f64]| match &gram {
        Some(g) => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = dot(g.row(i), v);
            }
        }
        None => {
            for (i, x) in mv.iter_mut().enumerate() {
                *x = dot(m.row(i), v);
            }
            out.iter_mut().for_each(|o| *o = 0.0);
            for (i, &x) in mv.iter().enumerate() {
                for (o, &mij) in out.iter_mut().zip(m.row(i)) {
                    *o += x * mij;
                }
            }
        }
    };

    for x in v.iter_mut() {
        *x = rng.normal();
    }
    normalize(&mut v);

    let mut w = vec![0.0; q];
    let mut sigma_prev = f64::NAN;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iters {
        iterations += 1;
        apply(&v, &mut w);
        // For unit v, ||G v|| tends to the top eigenvalue of G, i.e. sigma^2.
        let norm = l2(&w);
        if norm == 0.0 {
            // Start vector landed in the null space; m is nonzero, so redraw.
            for x in v.iter_mut() {
                *x = rng.normal();
            }
            normalize(&mut v);
            continue;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
        let sigma = norm.sqrt();
        if (sigma - sigma_prev).abs() <= opts.tol * sigma.max(1.0) {
            converged = true;
            break;
        }
        sigma_prev = sigma;
    }

    for (i, ui) in u.iter_mut().enumerate() {
        *ui = dot(m.row(i), &v);
    }
    let sigma = l2(&u);
    if sigma > 0.0 {
        u.iter_mut().for_each(|x| *x /= sigma);
    } else {
        u[0] = 1.0;
    }
    fix_sign(&mut u, &mut v);
    Ok(Rank1Svd {
        u,
        sigma,
        v,
        iterations,
        converged,
    })
}

fn l2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = l2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        v[0] = 1.0;
    }
}

fn fix_sign(u: &mut [f64], v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in u.iter().enumerate() {
        if x.abs() > u[best].abs() {
            best = i;
        }
    }
    if u[best] < 0.0 {
        u.iter_mut().for_each(|x| *x = -*x);
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Solve `min ||W - A ⊗ B||_F` for the given factor shapes with default
/// power-iteration settings.
pub fn nearest_kron(
    w: &Matrix,
    shapes: FactorShapes,
    rng: &mut Rng,
) -> Result<(KroneckerPair, DecompositionReport)> {
    nearest_kron_with(w, shapes, PowerIteration::default(), rng)
}

/// [`nearest_kron`] with explicit power-iteration settings.
///
/// The singular value is split evenly: `A = sqrt(sigma) * reshape(u)`,
/// `B = sqrt(sigma) * reshape(v)`. Hitting the iteration cap returns
/// [`Error::NotConverged`] carrying the last iterate.
pub fn nearest_kron_with(
    w: &Matrix,
    shapes: FactorShapes,
    opts: PowerIteration,
    rng: &mut Rng,
) -> Result<(KroneckerPair, DecompositionReport)> {
    let r = rearrange(w, shapes)?;
    let svd = rank1_svd(&r, opts, rng)?;
    let root = svd.sigma.sqrt();
    let a = Matrix::new(
        shapes.m1,
        shapes.n1,
        svd.u.iter().map(|x| x * root).collect(),
    )?;
    let b = Matrix::new(
        shapes.m2,
        shapes.n2,
        svd.v.iter().map(|x| x * root).collect(),
    )?;

    let mut sq = 0.0;
    for i in 0..r.rows() {
        let su = svd.sigma * svd.u[i];
        for (x, vj) in r.row(i).iter().zip(&svd.v) {
            let d = x - su * vj;
            sq += d * d;
        }
    }
    let residual_fro = sq.sqrt();
    let norm = w.frobenius_norm();
    let report = DecompositionReport {
        residual_fro,
        relative_residual: if norm > 0.0 { residual_fro / norm } else { 0.0 },
        singular_value: svd.sigma,
        power_iterations_used: svd.iterations,
        converged: svd.converged,
    };
    let pair = KroneckerPair::new(a, b);
    if !svd.converged {
        return Err(Error::NotConverged {
            iterations: svd.iterations,
            partial: Box::new((pair, report)),
        });
    }
    Ok((pair, report))
}

/// `(A ⊗ B) x` without forming `A ⊗ B`.
///
/// With `X = reshape(x, n1 x n2)` this is `vec(A X B^T)`, evaluated in
/// whichever association order is cheaper.
pub fn kron_matvec(pair: &KroneckerPair, x: &[f64]) -> Result<Vec<f64>> {
    let s = pair.shapes();
    if x.len() != s.n1 * s.n2 {
        return Err(Error::Length {
            op: "kron_matvec",
            expected: s.n1 * s.n2,
            got: x.len(),
        });
    }
    let xm = Matrix::new(1, x.len(), x.to_vec())?;
    Ok(kron_matmul(pair, &xm)?.into_vec())
}

/// Row `r` of the result is `kron_matvec(pair, row r of x)`.
pub fn kron_matmul(pair: &KroneckerPair, x: &Matrix) -> Result<Matrix> {
    kron_matmul_parts(&pair.a, &pair.b, x)
}

/// `X_p[(t, j2), j1] = X[t, j1 * n2 + j2]`: the rows of `x` reshaped to
/// `n1 x n2` and transposed, stacked.
fn permute_rows(x: &Matrix, n1: usize, n2: usize) -> Matrix {
    let t = x.rows();
    if n2 == 1 {
        return x.clone();
    }
    let mut out = Matrix::zeros(t * n2, n1);
    for r in 0..t {
        let xr = x.row(r);
        for j2 in 0..n2 {
            let orow = out.row_mut(r * n2 + j2);
            for (j1, o) in orow.iter_mut().enumerate() {
                *o = xr[j1 * n2 + j2];
            }
        }
    }
    out
}

/// Inverse of [`permute_rows`].
fn unpermute_rows(xp: &Matrix, rows: usize, n1: usize, n2: usize) -> Matrix {
    if n2 == 1 {
        return xp.clone();
    }
    let mut out = Matrix::zeros(rows, n1 * n2);
    for r in 0..rows {
        let orow = out.row_mut(r);
        for j2 in 0..n2 {
            for (j1, &v) in xp.row(r * n2 + j2).iter().enumerate() {
                orow[j1 * n2 + j2] = v;
            }
        }
    }
    out
}

/// [`kron_matmul`] on borrowed factors.
///
/// All rows are processed together so the contraction with `A` is a single
/// matrix product with dot products of length `n1`.
pub fn kron_matmul_parts(a: &Matrix, b: &Matrix, x: &Matrix) -> Result<Matrix> {
    let s = FactorShapes::new(a.rows(), a.cols(), b.rows(), b.cols());
    let FactorShapes { m1, n1, m2, n2 } = s;
    if x.cols() != n1 * n2 {
        return Err(Error::Shape {
            op: "kron_matmul",
            lhs: x.shape(),
            rhs: s.product_shape(),
        });
    }
    let t = x.rows();
    let mut out = Matrix::zeros(t, m1 * m2);
    if s.a_first() {
        // S[(t, j2), i1] = (A X_t)[i1, j2], then Y_t = S_t B^T.
        let sp = matmul_nt(&permute_rows(x, n1, n2), a)?;
        for r in 0..t {
            let orow = out.row_mut(r);
            for j2 in 0..n2 {
                let srow = sp.row(r * n2 + j2);
                for (i1, &sv) in srow.iter().enumerate() {
                    for i2 in 0..m2 {
                        orow[i1 * m2 + i2] += sv * b.get(i2, j2);
                    }
                }
            }
        }
    } else {
        // T[(t, i2), j1] = (X_t B^T)[j1, i2], then Y_t = A T_t.
        let mut tp = Matrix::zeros(t * m2, n1);
        for r in 0..t {
            let xr = x.row(r);
            for i2 in 0..m2 {
                let brow = b.row(i2);
                for (j1, o) in tp.row_mut(r * m2 + i2).iter_mut().enumerate() {
                    *o = dot(&xr[j1 * n2..(j1 + 1) * n2], brow);
                }
            }
        }
        let u = matmul_nt(&tp, a)?;
        for r in 0..t {
            let orow = out.row_mut(r);
            for i2 in 0..m2 {
                for (i1, &v) in u.row(r * m2 + i2).iter().enumerate() {
                    orow[i1 * m2 + i2] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `Y = X (A ⊗ B)^T` (one input vector per row of `X`) with
/// respect to `A`, `B` and `X`, computed in factored form.
///
/// With `G_r = reshape(dY_r, m1 x m2)` and `X_r = reshape(x_r, n1 x n2)`:
/// `dA = Σ_r G_r B X_r^T`, `dB = Σ_r G_r^T A X_r`, `dX_r = A^T G_r B`.
pub fn kron_backward(
    pair: &KroneckerPair,
    x: &Matrix,
    upstream: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    kron_backward_parts(&pair.a, &pair.b, x, upstream)
}

/// [`kron_backward`] on borrowed factors.
pub fn kron_backward_parts(
    a: &Matrix,
    b: &Matrix,
    x: &Matrix,
    upstream: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let (m1, n1, m2, n2) = (a.rows(), a.cols(), b.rows(), b.cols());
    if x.cols() != n1 * n2 || upstream.cols() != m1 * m2 || x.rows() != upstream.rows() {
        return Err(Error::Shape {
            op: "kron_backward",
            lhs: x.shape(),
            rhs: upstream.shape(),
        });
    }
    let t = x.rows();
    // P[(t, j2), i1] = (G_t B)[i1, j2]
    let mut pp = Matrix::zeros(t * n2, m1);
    for r in 0..t {
        let g = upstream.row(r);
        for j2 in 0..n2 {
            let prow = pp.row_mut(r * n2 + j2);
            for (i1, pv) in prow.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i2 in 0..m2 {
                    acc += g[i1 * m2 + i2] * b.get(i2, j2);
                }
                *pv = acc;
            }
        }
    }
    let xp = permute_rows(x, n1, n2);
    // dA[i1, j1] = Σ_(t, j2) P[(t, j2), i1] X[(t, j2), j1]
    let ga = matmul_tn(&pp, &xp)?;
    // dX_t = A^T P_t, i.e. dX_p = P_p A
    let gx = unpermute_rows(&matmul(&pp, a)?, t, n1, n2);
    // Q[(t, j2), i1] = (A X_t)[i1, j2];  dB[i2, j2] = Σ_(t, i1) G_t[i1, i2] Q[(t, j2), i1]
    let qp = matmul_nt(&xp, a)?;
    let mut gb = Matrix::zeros(m2, n2);
    for r in 0..t {
        let g = upstream.row(r);
        for j2 in 0..n2 {
            let qrow = qp.row(r * n2 + j2);
            for i2 in 0..m2 {
                let mut acc = 0.0;
                for (i1, &qv) in qrow.iter().enumerate() {
                    acc += g[i1 * m2 + i2] * qv;
                }
                let cur = gb.get(i2, j2);
                gb.set(i2, j2, cur + acc);
            }
        }
    }
    Ok((ga, gb, gx))
}

/// Dense over factored parameter count: `m n / (m1 n1 + m2 n2)`.
pub fn compression_factor(m: usize, n: usize, shapes: FactorShapes) -> Result<f64> {
    shapes.check_divides(m, n)?;
    Ok((m * n) as f64 / shapes.param_count() as f64)
}
