//! Figures of merit for a reconstructed two-qudit state.

use std::f64::consts::TAU;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mzi::QUDIT_DIM;
use crate::qudit::{hermitian_eigen, hermitian_eigenvalues, partial_trace, CMatrix, DensityOperator, Subsystem};

const DIMS: (usize, usize) = (QUDIT_DIM, QUDIT_DIM);
const JOINT: usize = QUDIT_DIM * QUDIT_DIM;

fn same_dim(rho: &DensityOperator, sigma: &DensityOperator) -> Result<()> {
    if rho.dim() != sigma.dim() {
        return Err(Error::InvalidDimension(format!("{} vs {}", rho.dim(), sigma.dim())));
    }
    Ok(())
}

fn bipartite(rho: &DensityOperator) -> Result<()> {
    if rho.dim() != JOINT {
        return Err(Error::InvalidDimension(format!(
            "expected a {JOINT}-dim state, got {}",
            rho.dim()
        )));
    }
    Ok(())
}

/// Eigenvalues below this fraction of the largest are rounding noise; their
/// square roots would otherwise dominate the error for low-rank states.
const SPECTRAL_FLOOR: f64 = 1e-14;

/// Square root of a PSD matrix, negative eigenvalues clamped to zero.
fn psd_sqrt(m: &CMatrix) -> CMatrix {
    let (vals, vecs) = hermitian_eigen(m);
    let n = m.nrows();
    let floor = SPECTRAL_FLOOR * vals.first().copied().unwrap_or(0.0);
    let mut out = CMatrix::zeros(n, n);
    for (k, v) in vals.iter().enumerate() {
        if *v > floor {
            let col = vecs.column(k);
            out += col * col.adjoint() * Complex64::from(v.sqrt());
        }
    }
    out
}

/// Uhlmann fidelity [Tr √(√σ ρ √σ)]².
pub fn fidelity(rho: &DensityOperator, sigma: &DensityOperator) -> Result<f64> {
    same_dim(rho, sigma)?;
    let s = psd_sqrt(sigma.matrix());
    let inner = &s * rho.matrix() * &s;
    let inner = (&inner + inner.adjoint()) * Complex64::from(0.5);
    let vals = hermitian_eigenvalues(&inner);
    let floor = SPECTRAL_FLOOR * vals.iter().copied().fold(0.0, f64::max);
    let root: f64 = vals.iter().filter(|&&v| v > floor).map(|v| v.sqrt()).sum();
    Ok((root * root).clamp(0.0, 1.0))
}

/// ½ Σ |λ(ρ − σ)|
pub fn trace_distance(rho: &DensityOperator, sigma: &DensityOperator) -> Result<f64> {
    same_dim(rho, sigma)?;
    let diff = rho.matrix() - sigma.matrix();
    let d: f64 = hermitian_eigenvalues(&diff).iter().map(|v| v.abs()).sum::<f64>() / 2.0;
    Ok(d.clamp(0.0, 1.0))
}

pub fn linear_entropy(rho: &DensityOperator) -> f64 {
    (1.0 - rho.purity()).max(0.0)
}

/// Von Neumann entropy in bits.
pub fn von_neumann_entropy(rho: &DensityOperator) -> f64 {
    entropy_of(&hermitian_eigenvalues(rho.matrix()))
}

fn entropy_of(eigenvalues: &[f64]) -> f64 {
    let h: f64 = eigenvalues.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.log2()).sum();
    h.max(0.0)
}

/// H(ρ) − H(ρ^X), where ρ^X is the reduced state of `given`.
pub fn conditional_entropy(rho: &DensityOperator, given: Subsystem) -> Result<f64> {
    bipartite(rho)?;
    let marginal = partial_trace(rho, given, DIMS)?;
    Ok(von_neumann_entropy(rho) - von_neumann_entropy(&marginal))
}

/// Coherent information toward `given`: −H(ρ|given), clamped at zero.
pub fn secure_key_bound(rho: &DensityOperator, given: Subsystem) -> Result<f64> {
    Ok((-conditional_entropy(rho, given)?).max(0.0))
}

/// ⟨φ(phi)|ρ|φ(phi)⟩ for the maximally entangled target.
pub fn target_fidelity(rho: &DensityOperator, phi: f64) -> Result<f64> {
    bipartite(rho)?;
    let m = rho.matrix();
    let d = QUDIT_DIM;
    let mut acc = Complex64::new(0.0, 0.0);
    for j in 0..d {
        for k in 0..d {
            acc += Complex64::from_polar(1.0, (k as f64 - j as f64) * phi) * m[(j * (d + 1), k * (d + 1))];
        }
    }
    Ok((acc.re / d as f64).clamp(0.0, 1.0))
}

const PHASE_GRID: usize = 256;

/// Phase of the maximally entangled target that maximizes the fidelity:
/// 256-point grid, then golden-section refinement around the best point.
/// Ties go to the smallest phase in [0, 2π).
pub fn optimize_phase(rho: &DensityOperator) -> Result<(f64, f64)> {
    bipartite(rho)?;
    let f = |phi: f64| target_fidelity(rho, phi).unwrap_or(0.0);
    let step = TAU / PHASE_GRID as f64;
    let (mut best_phi, mut best_f) = (0.0, f(0.0));
    for i in 1..PHASE_GRID {
        let phi = i as f64 * step;
        let v = f(phi);
        if v > best_f {
            best_phi = phi;
            best_f = v;
        }
    }

    let golden = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (best_phi - step, best_phi + step);
    let mut c = b - golden * (b - a);
    let mut d = a + golden * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - golden * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + golden * (b - a);
            fd = f(d);
        }
    }
    let phi = 0.5 * (a + b);
    let v = f(phi);
    if v > best_f + 1e-14 {
        best_phi = phi.rem_euclid(TAU);
        best_f = v;
    }
    Ok((best_phi, best_f))
}

/// (U ⊗ I) ρ (U ⊗ I)† with U = Σ_k e^{−ikφ}|k⟩⟨k| on the signal.
pub fn display_rotate(rho: &DensityOperator, phi: f64) -> Result<DensityOperator> {
    bipartite(rho)?;
    let u = CMatrix::from_fn(JOINT, JOINT, |i, j| {
        if i == j {
            Complex64::from_polar(1.0, -((i / QUDIT_DIM) as f64) * phi)
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    Ok(rho.conjugate_by(&u))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeritReport {
    pub fidelity: f64,
    pub trace_distance: f64,
    pub linear_entropy: f64,
    pub von_neumann_entropy: f64,
    pub conditional_entropy_signal: f64,
    pub conditional_entropy_idler: f64,
    /// −H(ρ|given) for the conditioning side chosen at construction.
    pub coherent_information: f64,
    pub optimal_phi: f64,
}

impl MeritReport {
    /// Scores `rho` against the maximally entangled target. With `phi` unset
    /// the target phase is optimized.
    pub fn compute(rho: &DensityOperator, phi: Option<f64>) -> Result<Self> {
        Self::compute_given(rho, phi, Subsystem::Idler)
    }

    pub fn compute_given(rho: &DensityOperator, phi: Option<f64>, given: Subsystem) -> Result<Self> {
        bipartite(rho)?;
        let phi = match phi {
            Some(p) => p.rem_euclid(TAU),
            None => optimize_phase(rho)?.0,
        };
        let target = DensityOperator::from_ket(&crate::qudit::maximally_entangled(QUDIT_DIM, phi)?);
        let h_s = conditional_entropy(rho, Subsystem::Signal)?;
        let h_i = conditional_entropy(rho, Subsystem::Idler)?;
        Ok(MeritReport {
            fidelity: target_fidelity(rho, phi)?,
            trace_distance: trace_distance(rho, &target)?,
            linear_entropy: linear_entropy(rho),
            von_neumann_entropy: von_neumann_entropy(rho),
            conditional_entropy_signal: h_s,
            conditional_entropy_idler: h_i,
            coherent_information: -match given {
                Subsystem::Signal => h_s,
                Subsystem::Idler => h_i,
            },
            optimal_phi: phi,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qudit::{maximally_entangled, Ket, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ginibre(d: usize, rank: usize, rng: &mut impl Rng) -> DensityOperator {
        let g = CMatrix::from_fn(d, rank, |_, _| {
            Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        });
        let m = &g * g.adjoint();
        let tr = m.trace().re;
        DensityOperator::new(m / Complex64::from(tr)).unwrap()
    }

    fn unitary(d: usize, rng: &mut impl Rng) -> CMatrix {
        let g = CMatrix::from_fn(d, d, |_, _| {
            Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        });
        g.qr().q()
    }

    fn phi_state(phi: f64) -> DensityOperator {
        DensityOperator::from_ket(&maximally_entangled(4, phi).unwrap())
    }

    #[test]
    fn reference_values() {
        let phi = phi_state(0.0);
        let mixed = DensityOperator::maximally_mixed(16).unwrap();
        assert!((fidelity(&phi, &phi).unwrap() - 1.0).abs() < 1e-12);
        assert!((fidelity(&mixed, &phi).unwrap() - 0.0625).abs() < 1e-12);
        assert!(trace_distance(&phi, &phi).unwrap() < 1e-12);
        assert!((trace_distance(&mixed, &phi).unwrap() - 15.0 / 16.0).abs() < 1e-12);
        assert!(linear_entropy(&phi).abs() < 1e-12);
        assert!((linear_entropy(&mixed) - 0.9375).abs() < 1e-12);
        assert!(von_neumann_entropy(&phi).abs() < 1e-9);
        assert!((von_neumann_entropy(&mixed) - 4.0).abs() < 1e-12);
        assert!((conditional_entropy(&phi, Subsystem::Idler).unwrap() + 2.0).abs() < 1e-9);
        assert!((conditional_entropy(&mixed, Subsystem::Signal).unwrap() - 2.0).abs() < 1e-12);
        assert!((secure_key_bound(&phi, Subsystem::Idler).unwrap() - 2.0).abs() < 1e-9);
        assert_eq!(secure_key_bound(&mixed, Subsystem::Idler).unwrap(), 0.0);
    }

    #[test]
    fn half_half_is_one_bit() {
        let mut m = CMatrix::zeros(16, 16);
        m[(0, 0)] = Complex64::from(0.5);
        m[(1, 1)] = Complex64::from(0.5);
        assert!((von_neumann_entropy(&DensityOperator::new(m).unwrap()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn werner_linear_entropy_matches_purity_formula() {
        let p = 0.9307;
        let w = DensityOperator::werner(4, p, 0.0).unwrap();
        let purity = p * p + (2.0 * p * (1.0 - p) + (1.0 - p) * (1.0 - p)) / 16.0;
        assert!((linear_entropy(&w) - (1.0 - purity)).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let a = DensityOperator::maximally_mixed(4).unwrap();
        let b = DensityOperator::maximally_mixed(16).unwrap();
        assert!(fidelity(&a, &b).is_err());
        assert!(trace_distance(&a, &b).is_err());
        assert!(conditional_entropy(&a, Subsystem::Idler).is_err());
    }

    #[test]
    fn fidelity_symmetric_and_pure_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let r = ginibre(16, 16, &mut rng);
            let s = ginibre(16, 3, &mut rng);
            let f1 = fidelity(&r, &s).unwrap();
            let f2 = fidelity(&s, &r).unwrap();
            assert!((f1 - f2).abs() < 1e-8);
            let pure = ginibre(16, 1, &mut rng);
            let direct = r.expectation(pure.matrix()).re;
            assert!((fidelity(&r, &pure).unwrap() - direct).abs() < 1e-8);
        }
    }

    #[test]
    fn fuchs_van_de_graaf_and_triangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (r, s, t) = (
                ginibre(16, 16, &mut rng),
                ginibre(16, 4, &mut rng),
                ginibre(16, 2, &mut rng),
            );
            let f = fidelity(&r, &s).unwrap();
            let d = trace_distance(&r, &s).unwrap();
            assert!(1.0 - f.sqrt() <= d + 1e-10);
            assert!(d <= (1.0 - f).sqrt() + 1e-10);
            assert!((d - trace_distance(&s, &r).unwrap()).abs() < 1e-12);
            assert!(d <= trace_distance(&r, &t).unwrap() + trace_distance(&t, &s).unwrap() + 1e-12);
        }
    }

    #[test]
    fn qubit_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bloch = |rng: &mut ChaCha8Rng| -> [f64; 3] {
            let v: [f64; 3] = [
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let r = rng.random::<f64>() * 0.999;
            [v[0] / n * r, v[1] / n * r, v[2] / n * r]
        };
        let state = |r: [f64; 3]| {
            DensityOperator::new(CMatrix::from_row_slice(
                2,
                2,
                &[
                    Complex64::from((1.0 + r[2]) / 2.0),
                    Complex64::new(r[0], -r[1]) / 2.0,
                    Complex64::new(r[0], r[1]) / 2.0,
                    Complex64::from((1.0 - r[2]) / 2.0),
                ],
            ))
            .unwrap()
        };
        for _ in 0..200 {
            let (a, b) = (bloch(&mut rng), bloch(&mut rng));
            let dot: f64 = (0..3).map(|i| a[i] * b[i]).sum();
            let na: f64 = a.iter().map(|v| v * v).sum();
            let nb: f64 = b.iter().map(|v| v * v).sum();
            let f = 0.5 * (1.0 + dot + ((1.0 - na) * (1.0 - nb)).sqrt());
            let d = 0.5 * (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
            assert!((fidelity(&state(a), &state(b)).unwrap() - f).abs() < 1e-9);
            assert!((trace_distance(&state(a), &state(b)).unwrap() - d).abs() < 1e-9);
        }
    }

    #[test]
    fn entropies_invariant_under_local_unitaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let r = ginibre(16, 5, &mut rng);
            let u = unitary(4, &mut rng).kronecker(&unitary(4, &mut rng));
            let r2 = r.conjugate_by(&u);
            assert!((von_neumann_entropy(&r) - von_neumann_entropy(&r2)).abs() < 1e-9);
            assert!((linear_entropy(&r) - linear_entropy(&r2)).abs() < 1e-9);
            for g in Subsystem::ALL {
                assert!((conditional_entropy(&r, g).unwrap() - conditional_entropy(&r2, g).unwrap()).abs() < 1e-9);
            }
            let s = ginibre(16, 16, &mut rng);
            let s2 = s.conjugate_by(&u);
            assert!((fidelity(&r, &s).unwrap() - fidelity(&r2, &s2).unwrap()).abs() < 1e-8);
            assert!((trace_distance(&r, &s).unwrap() - trace_distance(&r2, &s2).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn conditional_entropy_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let r = ginibre(16, 1 + rng.random_range(0..16), &mut rng);
            assert!(conditional_entropy(&r, Subsystem::Idler).unwrap() >= -2.0 - 1e-9);
            let p = ginibre(4, 1 + rng.random_range(0..4), &mut rng).tensor(&ginibre(
                4,
                1 + rng.random_range(0..4),
                &mut rng,
            ));
            for g in Subsystem::ALL {
                assert!(conditional_entropy(&p, g).unwrap() >= -1e-9);
            }
        }
    }

    #[test]
    fn phase_recovery() {
        let (phi, f) = optimize_phase(&phi_state(0.7)).unwrap();
        assert!((phi - 0.7).abs() < 1e-6, "{phi}");
        assert!(f >= 0.9999);

        let (phi, f) = optimize_phase(&DensityOperator::maximally_mixed(16).unwrap()).unwrap();
        assert_eq!(phi, 0.0);
        assert!((f - 1.0 / 16.0).abs() < 1e-12);

        let pure = phi_state(std::f64::consts::FRAC_PI_3);
        let diag = CMatrix::from_diagonal(&pure.matrix().diagonal());
        let dephased =
            DensityOperator::new(pure.matrix() * Complex64::from(0.9) + diag * Complex64::from(0.1)).unwrap();
        let (phi, _) = optimize_phase(&dephased).unwrap();
        assert!((phi - std::f64::consts::FRAC_PI_3).abs() < 0.02);
    }

    #[test]
    fn optimized_fidelity_is_at_least_grid_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let r = ginibre(16, 2, &mut rng);
            let (_, f) = optimize_phase(&r).unwrap();
            let grid = (0..256)
                .map(|i| target_fidelity(&r, i as f64 * TAU / 256.0).unwrap())
                .fold(0.0, f64::max);
            assert!(f >= grid);
        }
    }

    #[test]
    fn display_rotation() {
        let r = phi_state(1.1);
        let same = display_rotate(&r, 0.0).unwrap();
        assert!(same.frobenius_distance(&r) < 1e-15);
        let rotated = display_rotate(&r, 1.1).unwrap();
        assert!(rotated.frobenius_distance(&phi_state(0.0)) < 1e-12);
        assert!(rotated.matrix().iter().all(|z| z.re >= -1e-12));
        let w = DensityOperator::werner(4, 0.4, 0.3).unwrap();
        let a = hermitian_eigenvalues(w.matrix());
        let b = hermitian_eigenvalues(display_rotate(&w, 2.0).unwrap().matrix());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-10));
    }

    #[test]
    fn merit_report_on_pure_target() {
        let rep = MeritReport::compute(&phi_state(0.4), None).unwrap();
        assert!((rep.fidelity - 1.0).abs() < 1e-9);
        assert!(rep.trace_distance < 1e-6);
        assert!((rep.coherent_information - 2.0).abs() < 1e-9);
        assert!((rep.coherent_information + rep.conditional_entropy_idler).abs() < 1e-15);
        assert!((rep.optimal_phi - 0.4).abs() < 1e-6);
        let fixed = MeritReport::compute(&phi_state(0.4), Some(0.0)).unwrap();
        assert!(fixed.fidelity < 0.99);
        let basis = DensityOperator::from_ket(&Ket::basis(16, 0).unwrap());
        assert_eq!(MeritReport::compute(&basis, None).unwrap().coherent_information, 0.0);
    }
}
