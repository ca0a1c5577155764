//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Complex, ComplexField, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

/// Reconstruction error above which a factorization is rejected.
const SVD_RECOMPOSE_TOL: f64 = 1e-12;

/// Full singular value decomposition `m = U Σ Vᴴ`.
#[derive(Debug, Clone)]
pub struct Svd<T: nalgebra::Scalar> {
    pub u: DMatrix<T>,
    pub singular_values: DVector<f64>,
    /// `Vᴴ`; row `k` pairs with `singular_values[k]`.
    pub v_t: DMatrix<T>,
}

/// Scalars the SVD backend accepts.
pub trait SvdScalar: ComplexField<RealField = f64> + Copy {
    fn factor(m: &DMatrix<Self>) -> Option<Svd<Self>>;
}

impl SvdScalar for f64 {
    fn factor(m: &DMatrix<f64>) -> Option<Svd<f64>> {
        let (r, c) = m.shape();
        let svd = faer::Mat::<f64>::from_fn(r, c, |i, j| m[(i, j)]).svd().ok()?;
        let s = svd.S().column_vector();
        Some(Svd {
            u: DMatrix::from_fn(r, r, |i, j| svd.U()[(i, j)]),
            singular_values: DVector::from_fn(r.min(c), |k, _| s[k]),
            v_t: DMatrix::from_fn(c, c, |i, j| svd.V()[(j, i)]),
        })
    }
}

impl SvdScalar for C64 {
    fn factor(m: &DMatrix<C64>) -> Option<Svd<C64>> {
        let (r, c) = m.shape();
        let svd = faer::Mat::<faer::c64>::from_fn(r, c, |i, j| m[(i, j)]).svd().ok()?;
        let s = svd.S().column_vector();
        Some(Svd {
            u: DMatrix::from_fn(r, r, |i, j| svd.U()[(i, j)]),
            singular_values: DVector::from_fn(r.min(c), |k, _| s[k].re),
            v_t: DMatrix::from_fn(c, c, |i, j| svd.V()[(j, i)].conj()),
        })
    }
}

/// Full SVD whose reconstruction has been verified.
pub fn checked_svd<T: SvdScalar>(m: &DMatrix<T>) -> Result<Svd<T>> {
    let svd = T::factor(m).ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let sigma = DMatrix::from_fn(svd.u.ncols(), svd.v_t.nrows(), |i, j| {
        if i == j {
            T::from_real(svd.singular_values[i])
        } else {
            T::zero()
        }
    });
    let err = (&svd.u * sigma * &svd.v_t - m).norm() / m.norm().max(f64::MIN_POSITIVE);
    if !(err <= SVD_RECOMPOSE_TOL) {
        return Err(Error::Numerical(format!("SVD reconstruction error {err:.3e}")));
    }
    Ok(svd)
}

/// Outcome of a truncated pseudo-inverse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinvInfo {
    pub sigma_max: f64,
    /// Smallest singular value that was kept.
    pub smallest_retained: f64,
    /// Number of singular directions dropped.
    pub truncated: usize,
}

/// Pseudo-inverse that drops singular values below `rtol * sigma_max`.
pub fn truncated_pinv(m: &DMatrix<f64>, rtol: f64) -> Result<(DMatrix<f64>, PinvInfo)> {
    let svd = checked_svd(m)?;
    let (u, v_t) = (&svd.u, &svd.v_t);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = rtol * sigma_max;
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    let mut smallest = f64::INFINITY;
    let mut truncated = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            truncated += 1;
            continue;
        }
        smallest = smallest.min(s);
        let vk = v_t.row(k).transpose();
        let uk = u.column(k);
        out += (vk / s) * uk.transpose();
    }
    if !smallest.is_finite() {
        smallest = 0.0;
    }
    Ok((
        out,
        PinvInfo {
            sigma_max,
            smallest_retained: smallest,
            truncated,
        },
    ))
}

/// Orthogonal projector onto the complement of the all-ones direction in R^n.
pub fn centering_projector(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - 1.0 / n as f64
    })
}

/// Builds `[[0, I], [-M^-1 J, -M^-1 D]]` from a synchronizing matrix and diagonal inertia/damping.
pub fn swing_state_matrix(jacobian: &DMatrix<f64>, inertia: &[f64], damping: &[f64]) -> DMatrix<f64> {
    let n = inertia.len();
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        a[(i, n + i)] = 1.0;
        for j in 0..n {
            a[(n + i, j)] = -jacobian[(i, j)] / inertia[i];
        }
        a[(n + i, n + i)] = -damping[i] / inertia[i];
    }
    a
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|v| C64::new(v, 0.0))
}

pub fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(values))
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Row-major matrix as stored in JSON reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixData {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.rows * self.cols != self.data.len() {
            return Err(Error::Dimension {
                what: "matrix data",
                expected: self.rows * self.cols,
                found: self.data.len(),
            });
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

impl From<&DMatrix<f64>> for MatrixData {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatrixData {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

/// Complex number as it appears in JSON reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexData {
    pub re: f64,
    pub im: f64,
}

impl From<C64> for ComplexData {
    fn from(c: C64) -> Self {
        ComplexData { re: c.re, im: c.im }
    }
}

impl From<ComplexData> for C64 {
    fn from(c: ComplexData) -> Self {
        C64::new(c.re, c.im)
    }
}
