//! Exhaustive checks of the batch-indicator and force-error moment
//! identities, the machine-checkable core of the method's consistency.

use rbm_core::batching::{
    for_each_division, indicator_moment_check, n_divisions, random_partition,
};
use rbm_core::metrics::chi_moment_check;
use rbm_core::model::{
    DriftField, InteractionKernel, KernelSpec, ModelParams, ParticleState, RadialKernel,
    WeightVector,
};
use rbm_core::rng::{RngStream, StreamPurpose};

fn diag_stream(seed: u64) -> RngStream {
    RngStream::new(seed, StreamPurpose::Diagnostics, 0, 0)
}

#[test]
fn chi_mean_and_variance_identities_over_random_states() {
    // For each (N, p), twenty random states and weight vectors: the
    // division-averaged chi is zero and its second moment matches
    // (1/(p-1) - 1/(N-1)) * Lambda_i, all under exact enumeration.
    let mut rng = diag_stream(101);
    for &(n, p) in &[(4usize, 2usize), (6, 2), (6, 3)] {
        for trial in 0..20 {
            let masses: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.5, 1.5)).collect();
            let mut params = ModelParams::new(2, n, p);
            params.weights = WeightVector::new(masses).unwrap();
            params.kernel = KernelSpec::new(
                InteractionKernel::RadialSmooth(RadialKernel::Gaussian {
                    amp: 1.0,
                    width: 1.0,
                }),
                DriftField::Linear { gain: -1.0 },
            );
            let model = params.build().unwrap();
            let x: Vec<f64> = (0..n * 2).map(|_| 1.5 * rng.normal()).collect();
            let state = ParticleState::new(0.0, 2, x, None).unwrap();
            for i in 0..n {
                let report = chi_moment_check(&model, &state, i).unwrap();
                assert!(
                    report.mean_norm <= 1e-12,
                    "N={n} p={p} trial={trial} i={i}: |E chi| = {}",
                    report.mean_norm
                );
                assert!(
                    (report.second_moment - report.predicted).abs()
                        <= 1e-12 * (1.0 + report.predicted),
                    "N={n} p={p} trial={trial} i={i}: E|chi|^2 = {} vs predicted {}",
                    report.second_moment,
                    report.predicted
                );
            }
        }
    }
}

#[test]
fn indicator_moments_enumerated_exactly_up_to_n8() {
    let mut rng = diag_stream(103);
    for &(n, p) in &[(4usize, 2usize), (6, 2), (6, 3), (8, 2), (8, 4)] {
        let report = indicator_moment_check(n, p, 1, &mut rng).unwrap();
        assert!(report.exhaustive);
        assert_eq!(report.samples, n_divisions(n, p).unwrap());
        assert!(
            (report.first - report.predicted_first).abs() <= 1e-14,
            "N={n} p={p}: first {} vs {}",
            report.first,
            report.predicted_first
        );
        assert!(
            (report.second - report.predicted_second).abs() <= 1e-14,
            "N={n} p={p}: second {} vs {}",
            report.second,
            report.predicted_second
        );
    }
}

/// Upper chi-square quantile via the Wilson-Hilferty approximation; good to
/// a fraction of a percent at the sizes used here.
fn chi_square_quantile(df: f64, z: f64) -> f64 {
    let a = 2.0 / (9.0 * df);
    df * (1.0 - a + z * a.sqrt()).powi(3)
}

#[test]
fn pair_divisions_are_uniform_chi_square() {
    // Significance 0.001 with 1e5 draws per system size; the seed is fixed,
    // so this is a regression test, not a flaky statistical one.
    let z_999 = 3.090_232;
    for &n in &[4usize, 6, 8] {
        let categories = n_divisions(n, 2).unwrap() as usize;
        let mut index = std::collections::HashMap::new();
        let mut next = 0usize;
        for_each_division(n, 2, |partition| {
            let mut key: Vec<Vec<u32>> = partition.batches().map(|b| b.to_vec()).collect();
            key.sort();
            index.insert(key, next);
            next += 1;
        })
        .unwrap();
        assert_eq!(index.len(), categories);

        let draws = 100_000usize;
        let mut counts = vec![0u64; categories];
        let mut rng = diag_stream(107 + n as u64);
        for _ in 0..draws {
            let partition = random_partition(n, 2, &mut rng).unwrap();
            let mut key: Vec<Vec<u32>> = partition.batches().map(|b| b.to_vec()).collect();
            key.sort();
            counts[index[&key]] += 1;
        }
        let expected = draws as f64 / categories as f64;
        let statistic: f64 = counts
            .iter()
            .map(|&c| {
                let dev = c as f64 - expected;
                dev * dev / expected
            })
            .sum();
        let critical = chi_square_quantile((categories - 1) as f64, z_999);
        assert!(
            statistic <= critical,
            "N={n}: chi-square {statistic} exceeds critical {critical}"
        );
    }
}

#[test]
fn charged_kernel_equals_explicit_pair_table() {
    // A two-species charged system and its explicit per-pair encoding of
    // z_i z_j F produce the same forces.
    let n = 10;
    let mut rng = diag_stream(113);
    let charges: Vec<i8> = (0..n).map(|_| if rng.uniform() < 0.5 { 1 } else { -1 }).collect();
    let masses: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.5, 1.5)).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();

    let gauss = |amp: f64| RadialKernel::Gaussian { amp, width: 1.0 };

    let mut charged = ModelParams::new(1, n, 2);
    charged.weights = WeightVector::new(masses.clone()).unwrap();
    charged.species = rbm_core::model::SpeciesSpec::from_charges(charges.clone()).unwrap();
    charged.kernel = KernelSpec::new(InteractionKernel::Charged(gauss(0.8)), DriftField::Zero);
    let charged = charged.build().unwrap();

    let labels: Vec<u32> = charges.iter().map(|&z| if z > 0 { 0 } else { 1 }).collect();
    let mut table = ModelParams::new(1, n, 2);
    table.weights = WeightVector::new(masses).unwrap();
    table.species = rbm_core::model::SpeciesSpec::new(labels, None).unwrap();
    table.kernel = KernelSpec::new(
        InteractionKernel::PairwiseTable(rbm_core::model::PairTable::new(vec![
            rbm_core::model::PairEntry { a: 0, b: 0, f: gauss(0.8) },
            rbm_core::model::PairEntry { a: 0, b: 1, f: gauss(-0.8) },
            rbm_core::model::PairEntry { a: 1, b: 0, f: gauss(-0.8) },
            rbm_core::model::PairEntry { a: 1, b: 1, f: gauss(0.8) },
        ])),
        DriftField::Zero,
    );
    let table = table.build().unwrap();

    let state = ParticleState::new(0.0, 1, x, None).unwrap();
    for i in 0..n {
        let a = charged.force_full(i, &state).unwrap();
        let b = table.force_full(i, &state).unwrap();
        assert!(
            (a[0] - b[0]).abs() <= 1e-14 * (1.0 + a[0].abs()),
            "i={i}: {} vs {}",
            a[0],
            b[0]
        );
    }
}
