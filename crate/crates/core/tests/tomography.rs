use nalgebra::DVector;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use tbqudit::metrics::{target_fidelity, trace_distance};
use tbqudit::qudit::{maximally_entangled, CMatrix, DensityOperator};
use tbqudit::sim::{standard_settings, Calibrations, Cell, CoincidenceRecord};
use tbqudit::tomography::{
    estimate_rate_scale, linear_inversion, mle_reconstruct, Effect, MleOptions, ProblemCell, RateModel,
    TomographyProblem,
};

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    if mean <= 0.0 {
        0.0
    } else {
        Poisson::new(mean).unwrap().sample(rng)
    }
}

/// Eigenvectors of X, Y and Z, in that order, + then −.
fn pauli_kets() -> Vec<DVector<Complex64>> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    vec![
        DVector::from_vec(vec![c(s, 0.0), c(s, 0.0)]),
        DVector::from_vec(vec![c(s, 0.0), c(-s, 0.0)]),
        DVector::from_vec(vec![c(s, 0.0), c(0.0, s)]),
        DVector::from_vec(vec![c(s, 0.0), c(0.0, -s)]),
        DVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]),
        DVector::from_vec(vec![c(0.0, 0.0), c(1.0, 0.0)]),
    ]
}

fn bloch_state(r: [f64; 3]) -> DensityOperator {
    let m = CMatrix::from_row_slice(
        2,
        2,
        &[
            c((1.0 + r[2]) / 2.0, 0.0),
            c(r[0] / 2.0, -r[1] / 2.0),
            c(r[0] / 2.0, r[1] / 2.0),
            c((1.0 - r[2]) / 2.0, 0.0),
        ],
    );
    DensityOperator::new(m).unwrap()
}

fn qubit_problem(truth: &DensityOperator, n: f64, rng: &mut ChaCha8Rng) -> TomographyProblem {
    let cells = pauli_kets()
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let effect = Effect::rank_one(k);
            let count = poisson(rng, n * effect.expectation(truth));
            ProblemCell {
                key: (i / 2, i % 2),
                count,
                effect,
            }
        })
        .collect();
    TomographyProblem::new(2, cells, RateModel::Profiled).unwrap()
}

#[test]
fn qubit_linear_inversion_matches_pauli_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth = bloch_state([0.3, -0.4, 0.5]);
    for &n in &[1e3, 1e4, 1e5] {
        let problem = qubit_problem(&truth, n, &mut rng);
        let counts: Vec<f64> = problem.cells().iter().map(|c| c.count).collect();
        // Least squares over the three projector pairs: r_k = 3(n₊ − n₋) / Σn.
        let total: f64 = counts.iter().sum();
        let r = [0, 1, 2].map(|k| 3.0 * (counts[2 * k] - counts[2 * k + 1]) / total);
        let oracle = bloch_state(r);
        let li = linear_inversion(&problem).unwrap();
        let d = trace_distance(&li, &oracle).unwrap();
        assert!(d < 1e-10, "n={n}: linear inversion differs from oracle by {d}");
        if n >= 1e5 {
            assert!(trace_distance(&li, &truth).unwrap() < 0.01);
            let mle = mle_reconstruct(&problem, &MleOptions::default()).unwrap();
            assert!(mle.converged);
            assert!(trace_distance(&mle.rho, &truth).unwrap() < 0.01);
        }
    }
}

/// Every standard setting with all 169 cells and zero counts.
fn empty_records() -> Vec<CoincidenceRecord> {
    standard_settings()
        .into_iter()
        .enumerate()
        .flat_map(|(s, setting)| {
            Cell::all().map(move |cell| CoincidenceRecord {
                setting_index: s,
                setting,
                cell,
                count: 0,
            })
        })
        .collect()
}

fn sampled_problem(truth: &DensityOperator, n: f64, seed: u64) -> TomographyProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TomographyProblem::from_records(&empty_records(), &Calibrations::measured(), RateModel::Profiled)
        .unwrap()
        .with_counts(|_, e| poisson(&mut rng, n * e.expectation(truth)))
}

/// Rate scale giving `total` expected counts for `truth` over the full protocol.
fn rate_for_total(truth: &DensityOperator, total: f64) -> f64 {
    let p = TomographyProblem::from_records(&empty_records(), &Calibrations::measured(), RateModel::Profiled).unwrap();
    let q: f64 = p.cells().iter().map(|c| c.effect.expectation(truth)).sum();
    total / q
}

#[test]
fn cell_order_does_not_matter() {
    let truth = DensityOperator::werner(4, 0.8, 0.3).unwrap();
    let problem = sampled_problem(&truth, rate_for_total(&truth, 2e4), 8);
    let mut cells = problem.cells().to_vec();
    cells.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let shuffled = TomographyProblem::new(16, cells, RateModel::Profiled).unwrap();
    let opts = MleOptions::default();
    let a = mle_reconstruct(&problem, &opts).unwrap();
    let b = mle_reconstruct(&shuffled, &opts).unwrap();
    assert_eq!(a.rho, b.rho);
    assert_eq!(a.log_likelihood, b.log_likelihood);
}

#[test]
fn error_shrinks_with_counts() {
    let truth = DensityOperator::werner(4, 0.9, 0.0).unwrap();
    let opts = MleOptions::default();
    let mut medians = Vec::new();
    for &total in &[1e3, 1e4, 1e5] {
        let n = rate_for_total(&truth, total);
        let mut errs: Vec<f64> = (0..10u64)
            .into_par_iter()
            .map(|seed| {
                let problem = sampled_problem(&truth, n, 100 + seed);
                let res = mle_reconstruct(&problem, &opts).unwrap();
                trace_distance(&res.rho, &truth).unwrap()
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        medians.push((errs[4] + errs[5]) / 2.0);
    }
    assert!(
        medians[0] > medians[1] && medians[1] > medians[2],
        "medians {medians:?}"
    );
}

#[test]
fn pure_state_fidelity_bias_is_small() {
    let truth = DensityOperator::from_ket(&maximally_entangled(4, 0.0).unwrap());
    let n = rate_for_total(&truth, 6e5);
    let fids: Vec<f64> = (0..4u64)
        .into_par_iter()
        .map(|seed| {
            let res = mle_reconstruct(&sampled_problem(&truth, n, 200 + seed), &MleOptions::default()).unwrap();
            target_fidelity(&res.rho, 0.0).unwrap()
        })
        .collect();
    let mean = fids.iter().sum::<f64>() / fids.len() as f64;
    assert!(1.0 - mean < 0.005, "fidelities {fids:?}");
}

#[test]
fn rate_scale_with_true_reference() {
    let truth = DensityOperator::werner(4, 0.93, 0.0).unwrap();
    for (seed, total) in [(1u64, 1e4), (2, 1e5), (3, 1e6)] {
        let n = rate_for_total(&truth, total);
        let problem = sampled_problem(&truth, n, seed);
        let est = estimate_rate_scale(&problem, Some(&truth)).unwrap();
        assert!((est / n - 1.0).abs() < 0.05, "total {total}: N̂ {est} vs {n}");
        let fit = mle_reconstruct(&problem, &MleOptions::default()).unwrap();
        assert!((fit.rate_scale / n - 1.0).abs() < 0.05);
    }
}

#[test]
fn fixed_rate_matches_profiled_at_true_scale() {
    let truth = DensityOperator::werner(4, 0.85, 0.0).unwrap();
    let n = rate_for_total(&truth, 1e5);
    let problem = sampled_problem(&truth, n, 21);
    let profiled = mle_reconstruct(&problem, &MleOptions::default()).unwrap();
    let fixed_n = profiled.rate_scale;
    let fixed = mle_reconstruct(
        &problem.clone().with_rate_model(RateModel::Fixed(fixed_n)),
        &MleOptions::default(),
    )
    .unwrap();
    assert!(trace_distance(&profiled.rho, &fixed.rho).unwrap() < 1e-3);
}
