//! Maximum-likelihood reconstruction of a density operator from counts.
//!
//! The state is parameterized as ρ = T†T / Tr(T†T) with T lower triangular
//! (d real diagonal entries and d(d−1)/2 complex entries below it), so every
//! iterate is a valid state. Counts follow a Poisson model with mean
//! μ = N Tr(ρE); the rate scale N is either fixed or profiled out
//! (N = Σc / Σ Tr(ρE), its maximizer for the current ρ). The likelihood is
//! maximized by L-BFGS with an Armijo backtracking line search, so accepted
//! iterates never decrease the likelihood.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mzi::{enumerate_outcomes, joint_factor};
use crate::qudit::{hermitian_eigen, CMatrix, CVector, DensityOperator, ZERO};
use crate::sim::{Calibrations, Cell, CoincidenceRecord, SettingPair};

/// Positive operator stored as a sum of outer products, E = Σ_r f_r f_r†.
#[derive(Debug, Clone, PartialEq)]
pub struct Effect {
    factors: Vec<CVector>,
}

impl Effect {
    pub fn rank_one(factor: CVector) -> Self {
        Effect { factors: vec![factor] }
    }

    /// Factorizes a Hermitian PSD matrix through its eigendecomposition.
    pub fn from_matrix(m: &CMatrix) -> Result<Self> {
        crate::qudit::check_hermitian(m, 1e-10)?;
        let (vals, vecs) = hermitian_eigen(m);
        let top = vals.first().copied().unwrap_or(0.0).max(0.0);
        if vals.last().is_some_and(|&v| v < -1e-9 * top.max(1.0)) {
            return Err(Error::ContractViolation("effect is not positive semidefinite".into()));
        }
        let factors = vals
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 1e-14 * top)
            .map(|(k, &v)| vecs.column(k) * Complex64::from(v.sqrt()))
            .collect();
        Ok(Effect { factors })
    }

    pub fn dim(&self) -> usize {
        self.factors.first().map_or(0, |f| f.len())
    }

    pub fn factors(&self) -> &[CVector] {
        &self.factors
    }

    pub fn matrix(&self, dim: usize) -> CMatrix {
        self.factors
            .iter()
            .fold(CMatrix::zeros(dim, dim), |acc, f| acc + f * f.adjoint())
    }

    /// Tr(ρE)
    pub fn expectation(&self, rho: &DensityOperator) -> f64 {
        let m = rho.matrix();
        self.factors.iter().map(|f| f.dotc(&(m * f)).re).sum()
    }
}

/// How the expected-count scale N is handled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum RateModel {
    /// N known from the exposure.
    Fixed(f64),
    /// N refitted to Σc / Σ Tr(ρE) at every ρ.
    Profiled,
}

/// Identifies a cell of the dataset: (setting index, cell index).
pub type CellKey = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemCell {
    pub key: CellKey,
    pub count: f64,
    pub effect: Effect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TomographyProblem {
    dim: usize,
    cells: Vec<ProblemCell>,
    rate: RateModel,
}

impl TomographyProblem {
    /// Cells are stored sorted by key, so the input order is irrelevant.
    pub fn new(dim: usize, mut cells: Vec<ProblemCell>, rate: RateModel) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension("dim must be >= 1".into()));
        }
        if cells.is_empty() {
            return Err(Error::InsufficientData("no cells".into()));
        }
        for c in &cells {
            if !(c.count.is_finite() && c.count >= 0.0) {
                return Err(Error::ContractViolation(format!(
                    "cell {:?} has count {}",
                    c.key, c.count
                )));
            }
            if c.effect.factors.iter().any(|f| f.len() != dim) {
                return Err(Error::InvalidDimension(format!(
                    "cell {:?} operator is not {dim}-dimensional",
                    c.key
                )));
            }
        }
        if let RateModel::Fixed(n) = rate {
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::ContractViolation(format!(
                    "rate scale must be positive, got {n}"
                )));
            }
        }
        cells.sort_by_key(|c| c.key);
        if cells.windows(2).any(|w| w[0].key == w[1].key) {
            return Err(Error::ContractViolation("duplicate cell".into()));
        }
        Ok(TomographyProblem { dim, cells, rate })
    }

    /// Two-qudit problem from coincidence records. Every setting that appears
    /// gets all 169 cells; cells without a record count zero.
    pub fn from_records(records: &[CoincidenceRecord], calibs: &Calibrations, rate: RateModel) -> Result<Self> {
        let mut settings: BTreeMap<usize, SettingPair> = BTreeMap::new();
        let mut counts: BTreeMap<CellKey, f64> = BTreeMap::new();
        for r in records {
            match settings.get(&r.setting_index) {
                Some(s) if *s != r.setting => {
                    return Err(Error::ContractViolation(format!(
                        "setting {} appears with two different phase pairs",
                        r.setting_index
                    )))
                }
                Some(_) => {}
                None => {
                    settings.insert(r.setting_index, r.setting);
                }
            }
            let key = (r.setting_index, r.cell.index());
            if counts.insert(key, r.count as f64).is_some() {
                return Err(Error::ContractViolation(format!(
                    "duplicate record for setting {} cell {:?}",
                    r.setting_index, r.cell
                )));
            }
        }
        let mut cells = Vec::with_capacity(settings.len() * 169);
        for (&s, pair) in &settings {
            let ops_a = enumerate_outcomes(pair.alice, &calibs.alice)?;
            let ops_b = enumerate_outcomes(pair.bob, &calibs.bob)?;
            for cell in Cell::all() {
                let key = (s, cell.index());
                cells.push(ProblemCell {
                    key,
                    count: counts.get(&key).copied().unwrap_or(0.0),
                    effect: Effect::rank_one(joint_factor(&ops_a[cell.a.index()], &ops_b[cell.b.index()])),
                });
            }
        }
        TomographyProblem::new(16, cells, rate)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> &[ProblemCell] {
        &self.cells
    }

    pub fn rate_model(&self) -> RateModel {
        self.rate
    }

    pub fn with_rate_model(mut self, rate: RateModel) -> Self {
        self.rate = rate;
        self
    }

    pub fn total_counts(&self) -> f64 {
        self.cells.iter().map(|c| c.count).sum()
    }

    /// Replaces every count with `f(key, effect)`, e.g. exact expectations.
    pub fn with_counts(mut self, mut f: impl FnMut(CellKey, &Effect) -> f64) -> Self {
        for c in &mut self.cells {
            c.count = f(c.key, &c.effect);
        }
        self
    }

    /// Rank of the linear map ρ ↦ (Tr(ρE_c))_c over Hermitian ρ. The state is
    /// identifiable only when this equals d².
    pub fn operator_rank(&self) -> usize {
        let a = self.design_matrix();
        let sv = a.singular_values();
        let top = sv.max();
        sv.iter().filter(|&&s| s > 1e-10 * top).count()
    }

    /// Rows: cells. Columns: coefficients of ρ in the Hermitian basis of
    /// [`hermitian_basis`].
    pub fn design_matrix(&self) -> DMatrix<f64> {
        let d = self.dim;
        let basis = hermitian_basis(d);
        let mut a = DMatrix::zeros(self.cells.len(), d * d);
        for (row, c) in self.cells.iter().enumerate() {
            let e = c.effect.matrix(d);
            for (k, b) in basis.iter().enumerate() {
                a[(row, k)] = b.iter().map(|&(i, j, z)| (z * e[(j, i)]).re).sum();
            }
        }
        a
    }
}

/// Orthogonal Hermitian basis as sparse (row, col, value) lists: diagonal
/// units, then (|i⟩⟨j| + |j⟩⟨i|) and i(|j⟩⟨i| − |i⟩⟨j|) for i < j.
fn hermitian_basis(d: usize) -> Vec<Vec<(usize, usize, Complex64)>> {
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        out.push(vec![(i, i, Complex64::new(1.0, 0.0))]);
    }
    for i in 0..d {
        for j in i + 1..d {
            out.push(vec![(i, j, Complex64::new(1.0, 0.0)), (j, i, Complex64::new(1.0, 0.0))]);
            out.push(vec![
                (i, j, Complex64::new(0.0, -1.0)),
                (j, i, Complex64::new(0.0, 1.0)),
            ]);
        }
    }
    out
}

/// Number of real parameters for dimension `d`.
pub fn parameter_count(d: usize) -> usize {
    d * d
}

/// Lower-triangular T from the flat parameter vector: d diagonal reals, then
/// (re, im) pairs for (i, j), i > j, row by row.
fn unpack(params: &[f64], d: usize) -> Vec<Complex64> {
    let mut t = vec![ZERO; d * d];
    for i in 0..d {
        t[i * d + i] = Complex64::new(params[i], 0.0);
    }
    let mut p = d;
    for i in 1..d {
        for j in 0..i {
            t[i * d + j] = Complex64::new(params[p], params[p + 1]);
            p += 2;
        }
    }
    t
}

fn pack(t: &[Complex64], d: usize) -> Vec<f64> {
    let mut params = Vec::with_capacity(d * d);
    for i in 0..d {
        params.push(t[i * d + i].re);
    }
    for i in 1..d {
        for j in 0..i {
            params.push(t[i * d + j].re);
            params.push(t[i * d + j].im);
        }
    }
    params
}

/// ρ = T†T / Tr(T†T).
pub fn parameterize(params: &[f64], d: usize) -> Result<DensityOperator> {
    if params.len() != parameter_count(d) {
        return Err(Error::InvalidDimension(format!(
            "expected {} parameters for dim {d}, got {}",
            parameter_count(d),
            params.len()
        )));
    }
    let t = unpack(params, d);
    let s: f64 = t.iter().map(|z| z.norm_sqr()).sum();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::DegenerateParameterization("T is zero or not finite".into()));
    }
    let tm = CMatrix::from_row_slice(d, d, &t);
    let rho = tm.adjoint() * &tm / Complex64::from(s);
    Ok(DensityOperator::from_matrix_unchecked(crate::qudit::hermitian_part(
        &rho,
    )))
}

/// Parameters whose [`parameterize`] image is `rho` (up to a tiny ridge for
/// rank-deficient states).
pub fn parameters_for(rho: &DensityOperator) -> Result<Vec<f64>> {
    let d = rho.dim();
    let ridge = 1e-10;
    // Reverse the basis order, Cholesky-factor, and reverse back so that the
    // factor is lower triangular on the right: ρ = T†T.
    let rev = CMatrix::from_fn(d, d, |i, j| {
        rho.matrix()[(d - 1 - i, d - 1 - j)] + if i == j { Complex64::from(ridge) } else { ZERO }
    });
    let chol = nalgebra::Cholesky::new(rev)
        .ok_or_else(|| Error::ContractViolation("state is not positive definite after ridge".into()))?;
    let l = chol.l();
    // U = P L P is upper triangular with ρ ≈ U U†; T = U†.
    let t = CMatrix::from_fn(d, d, |i, j| l[(d - 1 - j, d - 1 - i)].conj());
    let flat: Vec<Complex64> = (0..d * d).map(|k| t[(k / d, k % d)]).collect();
    Ok(pack(&flat, d))
}

/// Default μ clamp.
pub const MU_MIN: f64 = 1e-12;

/// Flattened likelihood data.
struct Objective<'a> {
    problem: &'a TomographyProblem,
    d: usize,
    mu_min: f64,
    chunks: Vec<std::ops::Range<usize>>,
    /// Σ c ln c − c. The optimizer works on L minus this constant, which is
    /// small near the optimum and so keeps full precision at large counts.
    offset: f64,
}

/// Per-cell quantities of one evaluation.
struct Partial {
    q: Vec<f64>,
}

const EVAL_CHUNKS: usize = 32;

impl<'a> Objective<'a> {
    fn new(problem: &'a TomographyProblem, mu_min: f64) -> Self {
        let n = problem.cells.len();
        let size = n.div_ceil(EVAL_CHUNKS).max(1);
        let chunks = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
        let offset = problem
            .cells
            .iter()
            .filter(|c| c.count > 0.0)
            .map(|c| c.count * c.count.ln() - c.count)
            .sum();
        Objective {
            problem,
            d: problem.dim,
            mu_min,
            chunks,
            offset,
        }
    }

    fn apply(t: &[Complex64], f: &CVector, d: usize, w: &mut [Complex64]) {
        for i in 0..d {
            let mut acc = ZERO;
            for j in 0..=i {
                acc += t[i * d + j] * f[j];
            }
            w[i] = acc;
        }
    }

    /// Unnormalized q_c = Σ_r ||T f_r||² for every cell.
    fn raw_q(&self, t: &[Complex64]) -> Partial {
        let d = self.d;
        let cells = &self.problem.cells;
        let parts: Vec<Vec<f64>> = self
            .chunks
            .par_iter()
            .map(|range| {
                let mut w = vec![ZERO; d];
                cells[range.clone()]
                    .iter()
                    .map(|c| {
                        c.effect
                            .factors
                            .iter()
                            .map(|f| {
                                Self::apply(t, f, d, &mut w);
                                w.iter().map(|z| z.norm_sqr()).sum::<f64>()
                            })
                            .sum()
                    })
                    .collect()
            })
            .collect();
        Partial {
            q: parts.into_iter().flatten().collect(),
        }
    }

    fn rate(&self, q_sum: f64) -> f64 {
        match self.problem.rate {
            RateModel::Fixed(n) => n,
            RateModel::Profiled => {
                let c = self.problem.total_counts();
                if q_sum > 0.0 {
                    c / q_sum
                } else {
                    0.0
                }
            }
        }
    }

    /// Centered log-likelihood, the per-cell weights ∂L/∂μ (zero where clamped), q
    /// normalized by s, and the rate used.
    fn likelihood_terms(&self, t: &[Complex64]) -> (f64, Vec<f64>, Vec<f64>, f64) {
        let s: f64 = t.iter().map(|z| z.norm_sqr()).sum();
        let q: Vec<f64> = self.raw_q(t).q.into_iter().map(|v| v / s).collect();
        let n = self.rate(q.iter().sum());
        let mut l = 0.0;
        let mut g = Vec::with_capacity(q.len());
        for (c, &qc) in self.problem.cells.iter().zip(&q) {
            let raw = n * qc;
            let mu = raw.max(self.mu_min);
            l += if c.count > 0.0 {
                c.count * (mu / c.count).ln() - (mu - c.count)
            } else {
                -mu
            };
            g.push(if raw > self.mu_min { c.count / mu - 1.0 } else { 0.0 });
        }
        (l, g, q, n)
    }

    fn value(&self, params: &[f64]) -> f64 {
        self.likelihood_terms(&unpack(params, self.d)).0
    }

    /// Likelihood and its gradient with respect to the parameters.
    fn value_and_gradient(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let d = self.d;
        let t = unpack(params, d);
        let s: f64 = t.iter().map(|z| z.norm_sqr()).sum();
        let (l, g, q, n) = self.likelihood_terms(&t);
        let kappa: f64 = g.iter().zip(&q).map(|(a, b)| a * b).sum();

        // M_ij = Σ_c g_c Σ_r conj(w_i) f_j over the lower triangle.
        let cells = &self.problem.cells;
        let parts: Vec<Vec<Complex64>> = self
            .chunks
            .par_iter()
            .map(|range| {
                let mut m = vec![ZERO; d * d];
                let mut w = vec![ZERO; d];
                for idx in range.clone() {
                    let gc = g[idx];
                    if gc == 0.0 {
                        continue;
                    }
                    for f in &cells[idx].effect.factors {
                        Self::apply(&t, f, d, &mut w);
                        for i in 0..d {
                            let wi = w[i].conj() * gc;
                            for j in 0..=i {
                                m[i * d + j] += wi * f[j];
                            }
                        }
                    }
                }
                m
            })
            .collect();
        let mut m = vec![ZERO; d * d];
        for part in parts {
            for (a, b) in m.iter_mut().zip(part) {
                *a += b;
            }
        }

        let scale = n / s;
        let z = |i: usize, j: usize| (m[i * d + j] - t[i * d + j].conj() * kappa) * scale;
        let mut grad = Vec::with_capacity(d * d);
        for i in 0..d {
            grad.push(2.0 * z(i, i).re);
        }
        for i in 1..d {
            for j in 0..i {
                let zij = z(i, j);
                grad.push(2.0 * zij.re);
                grad.push(-2.0 * zij.im);
            }
        }
        (l, grad)
    }
}

/// Poisson log-likelihood Σ c ln μ − μ (constants dropped) with
/// μ = N Tr(ρE) clamped below at [`MU_MIN`].
pub fn log_likelihood(rho: &DensityOperator, problem: &TomographyProblem) -> Result<f64> {
    if rho.dim() != problem.dim {
        return Err(Error::InvalidDimension(format!(
            "state dim {} does not match problem dim {}",
            rho.dim(),
            problem.dim
        )));
    }
    let q: Vec<f64> = problem
        .cells
        .iter()
        .map(|c| c.effect.expectation(rho).max(0.0))
        .collect();
    let obj = Objective::new(problem, MU_MIN);
    let n = obj.rate(q.iter().sum());
    Ok(problem
        .cells
        .iter()
        .zip(&q)
        .map(|(c, &qc)| {
            let mu = (n * qc).max(MU_MIN);
            (if c.count > 0.0 { c.count * mu.ln() } else { 0.0 }) - mu
        })
        .sum())
}

/// Likelihood and analytic gradient at a parameter vector.
pub fn log_likelihood_with_gradient(params: &[f64], problem: &TomographyProblem) -> Result<(f64, Vec<f64>)> {
    parameterize(params, problem.dim)?;
    let obj = Objective::new(problem, MU_MIN);
    let (l, g) = obj.value_and_gradient(params);
    Ok((l + obj.offset, g))
}

/// Likelihood at a parameter vector.
pub fn log_likelihood_params(params: &[f64], problem: &TomographyProblem) -> Result<f64> {
    parameterize(params, problem.dim)?;
    let obj = Objective::new(problem, MU_MIN);
    Ok(obj.value(params) + obj.offset)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MleOptions {
    pub max_iter: usize,
    /// Relative likelihood change that counts as converged.
    pub tol: f64,
    /// L-BFGS history length.
    pub memory: usize,
    /// Start from a PSD-projected linear inversion instead of I/d.
    pub warm_start: bool,
    pub mu_min: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions {
            max_iter: 5000,
            tol: 1e-9,
            memory: 12,
            warm_start: false,
            mu_min: MU_MIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleResult {
    pub rho: DensityOperator,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// N at the returned state.
    pub rate_scale: f64,
    /// Likelihood after each accepted iteration, starting with the initial point.
    #[serde(skip)]
    pub history: Vec<f64>,
    pub warnings: Vec<String>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximizes the likelihood. Returns the best iterate even when the
/// iteration budget runs out (then `converged` is false).
pub fn mle_reconstruct(problem: &TomographyProblem, options: &MleOptions) -> Result<MleResult> {
    let d = problem.dim;
    let total = problem.total_counts();
    if problem.rate == RateModel::Profiled && total <= 0.0 {
        return Err(Error::InsufficientData(
            "profiled rate needs a nonzero total count".into(),
        ));
    }
    let mut warnings = Vec::new();
    let nonzero = problem.cells.iter().filter(|c| c.count > 0.0).count();
    if nonzero <= 1 {
        let msg = format!("ill-conditioned data: only {nonzero} cell(s) with counts; expect a near-pure estimate");
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let obj = Objective::new(problem, options.mu_min);
    let mut x = if options.warm_start {
        parameters_for(&linear_inversion(problem)?)?
    } else {
        let mut p = vec![0.0; parameter_count(d)];
        p[..d].iter_mut().for_each(|v| *v = 1.0);
        p
    };

    // Minimize f = −L.
    let (l0, g0) = obj.value_and_gradient(&x);
    let mut f = -l0;
    let mut grad: Vec<f64> = g0.iter().map(|v| -v).collect();
    let mut history = vec![l0 + obj.offset];
    let mut mem_s: Vec<Vec<f64>> = Vec::new();
    let mut mem_y: Vec<Vec<f64>> = Vec::new();
    let mut converged = false;
    let mut quiet = 0;
    let mut iterations = 0;

    while iterations < options.max_iter {
        iterations += 1;
        let mut dir = two_loop(&grad, &mem_s, &mem_y);
        let mut slope = dot(&grad, &dir);
        if !(slope < 0.0) {
            mem_s.clear();
            mem_y.clear();
            dir = grad.iter().map(|v| -v).collect();
            slope = dot(&grad, &dir);
        }
        if slope == 0.0 {
            converged = true;
            break;
        }
        let mut alpha = if mem_s.is_empty() {
            let gmax = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            (0.1 / gmax).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + alpha * b).collect();
            let ft = -obj.value(&trial);
            if ft.is_finite() && ft <= f + 1e-4 * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_trial)) = accepted else {
            if mem_s.is_empty() {
                // Steepest descent cannot make progress: stationary to
                // working precision.
                converged = true;
                break;
            }
            mem_s.clear();
            mem_y.clear();
            continue;
        };

        let (l_new, g_new) = obj.value_and_gradient(&x_new);
        let f_new = -l_new;
        debug_assert!((f_new - f_trial).abs() <= 1e-9 * f_trial.abs().max(1.0));
        let grad_new: Vec<f64> = g_new.iter().map(|v| -v).collect();
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if mem_s.len() == options.memory {
                mem_s.remove(0);
                mem_y.remove(0);
            }
            mem_s.push(s);
            mem_y.push(y);
        }

        let rel = (f - f_new).abs() / f.abs().max(1.0);
        x = x_new;
        f = f_new;
        grad = grad_new;
        history.push(obj.offset - f);
        if rel < options.tol {
            quiet += 1;
            if quiet >= 2 {
                converged = true;
                break;
            }
        } else {
            quiet = 0;
        }
    }

    let rho = parameterize(&x, d)?;
    let (_, _, _, n) = obj.likelihood_terms(&unpack(&x, d));
    if !converged {
        log::warn!("MLE stopped after {iterations} iterations without converging");
    }
    Ok(MleResult {
        rho,
        log_likelihood: obj.offset - f,
        iterations,
        converged,
        rate_scale: n,
        history,
        warnings,
    })
}

fn two_loop(grad: &[f64], mem_s: &[Vec<f64>], mem_y: &[Vec<f64>]) -> Vec<f64> {
    let mut q = grad.to_vec();
    let k = mem_s.len();
    let mut alphas = vec![0.0; k];
    for i in (0..k).rev() {
        let rho = 1.0 / dot(&mem_y[i], &mem_s[i]);
        alphas[i] = rho * dot(&mem_s[i], &q);
        q.iter_mut().zip(&mem_y[i]).for_each(|(a, b)| *a -= alphas[i] * b);
    }
    if k > 0 {
        let gamma = dot(&mem_s[k - 1], &mem_y[k - 1]) / dot(&mem_y[k - 1], &mem_y[k - 1]);
        q.iter_mut().for_each(|a| *a *= gamma);
    }
    for i in 0..k {
        let rho = 1.0 / dot(&mem_y[i], &mem_s[i]);
        let beta = rho * dot(&mem_y[i], &q);
        q.iter_mut()
            .zip(&mem_s[i])
            .for_each(|(a, b)| *a += (alphas[i] - beta) * b);
    }
    q.iter_mut().for_each(|a| *a = -*a);
    q
}

/// Least-squares solution of Tr(X E_c) = c over Hermitian X, projected onto
/// the PSD cone and normalized.
pub fn linear_inversion(problem: &TomographyProblem) -> Result<DensityOperator> {
    let d = problem.dim;
    let a = problem.design_matrix();
    let b = DVector::from_iterator(problem.cells.len(), problem.cells.iter().map(|c| c.count));
    let svd = a.svd(true, true);
    let coeffs = svd
        .solve(&b, 1e-12)
        .map_err(|e| Error::InsufficientData(format!("linear inversion failed: {e}")))?;
    let basis = hermitian_basis(d);
    let mut x = CMatrix::zeros(d, d);
    for (k, bk) in basis.iter().enumerate() {
        for &(i, j, z) in bk {
            x[(i, j)] += z * coeffs[k];
        }
    }
    // Basis elements are orthogonal with norm² 1 (diagonal) or 2, and the
    // solve returned coordinates, so x is already the estimate.
    let (vals, vecs) = hermitian_eigen(&crate::qudit::hermitian_part(&x));
    let clipped: Vec<f64> = vals.iter().map(|v| v.max(0.0)).collect();
    let tr: f64 = clipped.iter().sum();
    if !(tr > 0.0) {
        return Err(Error::InsufficientData(
            "linear inversion produced no positive weight".into(),
        ));
    }
    let mut m = CMatrix::zeros(d, d);
    for (k, v) in clipped.iter().enumerate() {
        if *v > 0.0 {
            let col = vecs.column(k);
            m += col * col.adjoint() * Complex64::from(v / tr);
        }
    }
    Ok(DensityOperator::from_matrix_unchecked(crate::qudit::hermitian_part(&m)))
}

/// Rate scale consistent with the observed total under state `reference`
/// (I/d when `None`): N̂ = Σc / Σ Tr(ρE).
pub fn estimate_rate_scale(problem: &TomographyProblem, reference: Option<&DensityOperator>) -> Result<f64> {
    let total = problem.total_counts();
    if !(total > 0.0) {
        return Err(Error::InsufficientData("total count is zero".into()));
    }
    let mixed;
    let rho = match reference {
        Some(r) => r,
        None => {
            mixed = DensityOperator::maximally_mixed(problem.dim)?;
            &mixed
        }
    };
    let q: f64 = problem.cells.iter().map(|c| c.effect.expectation(rho)).sum();
    if !(q > 0.0) {
        return Err(Error::InsufficientData(
            "operators have no overlap with the reference state".into(),
        ));
    }
    Ok(total / q)
}
