//! Finite-dimensional state algebra: kets, density operators, tensor products
//! and the partial trace over one half of a bipartite system.
//!
//! Composite indices are signal-major: the basis state |j⟩_s ⊗ |k⟩_i sits at
//! index `j * d_i + k`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub(crate) const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub(crate) const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Numerical tolerances used when validating states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub norm: f64,
    pub hermitian: f64,
    pub eigenvalue: f64,
    pub trace: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            norm: 1e-12,
            hermitian: 1e-10,
            eigenvalue: 1e-9,
            trace: 1e-9,
        }
    }
}

/// One half of the photon pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subsystem {
    Signal,
    Idler,
}

impl Subsystem {
    pub const ALL: [Subsystem; 2] = [Subsystem::Signal, Subsystem::Idler];

    pub fn other(self) -> Subsystem {
        match self {
            Subsystem::Signal => Subsystem::Idler,
            Subsystem::Idler => Subsystem::Signal,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ket {
    amplitudes: CVector,
}

impl Ket {
    pub fn new(amplitudes: CVector) -> Result<Self> {
        if amplitudes.is_empty() {
            return Err(Error::InvalidDimension("ket must have dim >= 1".into()));
        }
        Ok(Ket { amplitudes })
    }

    /// Like [`Ket::new`] but requires unit norm.
    pub fn normalized(amplitudes: CVector, tol: &Tolerances) -> Result<Self> {
        let ket = Ket::new(amplitudes)?;
        let n2 = ket.norm_sqr();
        if (n2 - 1.0).abs() > tol.norm {
            return Err(Error::ContractViolation(format!(
                "ket squared norm {n2} differs from 1"
            )));
        }
        Ok(ket)
    }

    pub fn from_slice(amplitudes: &[Complex64]) -> Result<Self> {
        Ket::new(CVector::from_column_slice(amplitudes))
    }

    pub fn basis(dim: usize, index: usize) -> Result<Self> {
        if index >= dim {
            return Err(Error::InvalidDimension(format!(
                "basis index {index} out of range for dim {dim}"
            )));
        }
        let mut v = CVector::zeros(dim);
        v[index] = ONE;
        Ket::new(v)
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn inner(&self, other: &Ket) -> Complex64 {
        self.amplitudes.dotc(&other.amplitudes)
    }

    /// |ψ⟩⟨ψ|
    pub fn projector(&self) -> CMatrix {
        &self.amplitudes * self.amplitudes.adjoint()
    }
}

/// Kronecker product with the left operand as the major (signal) index.
pub trait Tensor {
    fn tensor(&self, other: &Self) -> Self;
}

impl Tensor for Ket {
    fn tensor(&self, other: &Ket) -> Ket {
        Ket {
            amplitudes: self.amplitudes.kronecker(&other.amplitudes),
        }
    }
}

impl Tensor for DensityOperator {
    fn tensor(&self, other: &DensityOperator) -> DensityOperator {
        DensityOperator {
            matrix: self.matrix.kronecker(&other.matrix),
        }
    }
}

/// The ket d^{-1/2} Σ_k e^{ikφ} |k⟩_s ⊗ |k⟩_i.
pub fn maximally_entangled(d: usize, phi: f64) -> Result<Ket> {
    if d < 2 {
        return Err(Error::InvalidDimension(format!(
            "maximally entangled state needs d >= 2, got {d}"
        )));
    }
    let norm = 1.0 / (d as f64).sqrt();
    let mut v = CVector::zeros(d * d);
    for k in 0..d {
        v[k * d + k] = Complex64::from_polar(norm, k as f64 * phi);
    }
    Ket::new(v)
}

/// Hermitian positive-semidefinite operator. States built with
/// [`DensityOperator::new`] also have unit trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DensityJson", into = "DensityJson")]
pub struct DensityOperator {
    matrix: CMatrix,
}

impl DensityOperator {
    pub fn new(matrix: CMatrix) -> Result<Self> {
        DensityOperator::new_with(matrix, &Tolerances::default())
    }

    pub fn new_with(matrix: CMatrix, tol: &Tolerances) -> Result<Self> {
        let rho = DensityOperator::new_unnormalized_with(matrix, tol)?;
        let tr = rho.trace();
        if (tr - 1.0).abs() > tol.trace {
            return Err(Error::ContractViolation(format!("trace {tr} differs from 1")));
        }
        Ok(rho)
    }

    /// Hermitian PSD check only; the trace may be anything non-negative.
    pub fn new_unnormalized(matrix: CMatrix) -> Result<Self> {
        DensityOperator::new_unnormalized_with(matrix, &Tolerances::default())
    }

    pub fn new_unnormalized_with(matrix: CMatrix, tol: &Tolerances) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.nrows() != matrix.ncols() {
            return Err(Error::InvalidDimension(format!(
                "density operator must be square and non-empty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        check_hermitian(&matrix, tol.hermitian)?;
        let matrix = hermitian_part(&matrix);
        let (vals, _) = hermitian_eigen(&matrix);
        if let Some(&min) = vals.last() {
            if min < -tol.eigenvalue {
                return Err(Error::ContractViolation(format!("negative eigenvalue {min}")));
            }
        }
        Ok(DensityOperator { matrix })
    }

    /// Skips validation. Callers guarantee Hermitian PSD by construction.
    pub(crate) fn from_matrix_unchecked(matrix: CMatrix) -> Self {
        DensityOperator { matrix }
    }

    pub fn from_ket(ket: &Ket) -> Self {
        DensityOperator {
            matrix: ket.projector(),
        }
    }

    pub fn maximally_mixed(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension("dim must be >= 1".into()));
        }
        Ok(DensityOperator {
            matrix: CMatrix::identity(dim, dim) / Complex64::from(dim as f64),
        })
    }

    /// p |φ⟩⟨φ| + (1 − p) I/d² for the d×d maximally entangled |φ⟩.
    pub fn werner(d: usize, p: f64, phi: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::ContractViolation(format!("Werner weight {p} outside [0, 1]")));
        }
        let pure = DensityOperator::from_ket(&maximally_entangled(d, phi)?);
        let mixed = DensityOperator::maximally_mixed(d * d)?;
        Ok(DensityOperator {
            matrix: pure.matrix * Complex64::from(p) + mixed.matrix * Complex64::from(1.0 - p),
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }

    /// Tr(ρ²)
    pub fn purity(&self) -> f64 {
        // Tr(ρ²) = Σ_ij |ρ_ij|² for Hermitian ρ.
        self.matrix.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Tr(ρ A)
    pub fn expectation(&self, op: &CMatrix) -> Complex64 {
        let n = self.dim();
        let mut acc = ZERO;
        for i in 0..n {
            for j in 0..n {
                acc += self.matrix[(i, j)] * op[(j, i)];
            }
        }
        acc
    }

    pub fn frobenius_distance(&self, other: &DensityOperator) -> f64 {
        (&self.matrix - &other.matrix).norm()
    }

    /// U ρ U†
    pub fn conjugate_by(&self, unitary: &CMatrix) -> DensityOperator {
        let m = unitary * &self.matrix * unitary.adjoint();
        DensityOperator {
            matrix: hermitian_part(&m),
        }
    }
}

/// Reduced operator on `keep`, tracing out the other half of a
/// `dims = (d_s, d_i)` bipartite system.
pub fn partial_trace(rho: &DensityOperator, keep: Subsystem, dims: (usize, usize)) -> Result<DensityOperator> {
    let (ds, di) = dims;
    if ds == 0 || di == 0 || ds * di != rho.dim() {
        return Err(Error::InvalidDimension(format!(
            "cannot split dim {} as {ds}x{di}",
            rho.dim()
        )));
    }
    let m = rho.matrix();
    let out = match keep {
        Subsystem::Signal => CMatrix::from_fn(ds, ds, |a, b| (0..di).map(|k| m[(a * di + k, b * di + k)]).sum()),
        Subsystem::Idler => CMatrix::from_fn(di, di, |a, b| (0..ds).map(|j| m[(j * di + a, j * di + b)]).sum()),
    };
    Ok(DensityOperator::from_matrix_unchecked(out))
}

/// Spectral decomposition of a density operator, eigenvalues descending.
pub fn eigendecompose(rho: &DensityOperator) -> Result<Vec<(f64, Ket)>> {
    eigendecompose_matrix(rho.matrix(), &Tolerances::default())
}

/// Spectral decomposition of an arbitrary Hermitian matrix.
pub fn eigendecompose_matrix(m: &CMatrix, tol: &Tolerances) -> Result<Vec<(f64, Ket)>> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::InvalidDimension("matrix must be square".into()));
    }
    check_hermitian(m, tol.hermitian)?;
    let (vals, vecs) = hermitian_eigen(&hermitian_part(m));
    Ok(vals
        .into_iter()
        .enumerate()
        .map(|(k, v)| {
            (
                v,
                Ket {
                    amplitudes: vecs.column(k).into_owned(),
                },
            )
        })
        .collect())
}

pub(crate) fn check_hermitian(m: &CMatrix, tol: f64) -> Result<()> {
    let n = m.nrows();
    for i in 0..n {
        for j in i..n {
            let d = (m[(i, j)] - m[(j, i)].conj()).norm();
            if d > tol {
                return Err(Error::ContractViolation(format!(
                    "matrix not Hermitian: |m[{i},{j}] - conj(m[{j},{i}])| = {d:e}"
                )));
            }
        }
    }
    Ok(())
}

pub(crate) fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * Complex64::from(0.5)
}

/// Eigenvalues (descending) and matching eigenvector columns of a Hermitian
/// matrix. No validation.
pub(crate) fn hermitian_eigen(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vecs = CMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    (vals, vecs)
}

/// Eigenvalues only, descending.
pub(crate) fn hermitian_eigenvalues(m: &CMatrix) -> Vec<f64> {
    let mut vals: Vec<f64> = nalgebra::SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    vals
}

#[derive(Serialize, Deserialize)]
struct DensityJson {
    dim: usize,
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

impl From<DensityOperator> for DensityJson {
    fn from(rho: DensityOperator) -> Self {
        let n = rho.dim();
        let m = rho.matrix();
        DensityJson {
            dim: n,
            re: (0..n).map(|i| (0..n).map(|j| m[(i, j)].re).collect()).collect(),
            im: (0..n).map(|i| (0..n).map(|j| m[(i, j)].im).collect()).collect(),
        }
    }
}

impl TryFrom<DensityJson> for DensityOperator {
    type Error = Error;

    fn try_from(js: DensityJson) -> Result<Self> {
        let n = js.dim;
        let rows_ok = |rows: &Vec<Vec<f64>>| rows.len() == n && rows.iter().all(|r| r.len() == n);
        if !rows_ok(&js.re) || !rows_ok(&js.im) {
            return Err(Error::InvalidDimension(format!("re/im arrays must both be {n}x{n}")));
        }
        let m = CMatrix::from_fn(n, n, |i, j| Complex64::new(js.re[i][j], js.im[i][j]));
        DensityOperator::new(m)
    }
}
