use cashgof::calibrate::{
    builtin_methods, cell_setup, null_histogram, power_curve, run_grid, runtime_bench, type1_curve, ExperimentGrid,
    Family,
};
use cashgof::cumulants::CumulantSource;
use cashgof::dataset::unit_grid_edges;
use cashgof::fit::{fit_with, FitOptions};
use cashgof::gof::{naive_z_highorder, Algorithm};
use cashgof::model::channel_energies;
use cashgof::seed::derive_seed;
use cashgof::simulate::sample_counts;
use cashgof::stats::ks_one_sample;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn grid(family: Family, n: usize, k: f64, m: usize, algorithms: Vec<Algorithm>) -> ExperimentGrid {
    ExperimentGrid {
        family,
        k_values: vec![k],
        n_values: vec![n],
        alphas: vec![0.1],
        replications: m,
        bootstrap_b: 100,
        algorithms,
        ..ExperimentGrid::type1_desk(2024)
    }
}

#[test]
fn null_mean_matches_the_plug_in_prediction() {
    let g = grid(Family::PowerLaw, 100, 10.0, 500, vec![Algorithm::LrChi2]);
    let sample = null_histogram(&g, 100, 10.0, 500, 77).unwrap();
    assert!(sample.failed_seeds.is_empty());
    let setup = cell_setup(&g, 100, 10.0).unwrap();
    let src = CumulantSource::direct();
    let opts = FitOptions::single_start();
    let predicted: Vec<f64> = (0..500u64)
        .map(|r| {
            let data = setup
                .template
                .with_counts(sample_counts(&setup.rates, derive_seed(77, r)))
                .unwrap();
            let fit = fit_with(&data, setup.null_model.as_ref(), None, &opts).unwrap();
            naive_z_highorder(fit.c_min, setup.null_model.as_ref(), fit.theta(), &src, false)
                .unwrap()
                .ref_mean
                .unwrap()
        })
        .collect();
    let m = sample.values.len() as f64;
    let mean = sample.values.iter().sum::<f64>() / m;
    let sd = (sample.values.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    let pred = predicted.iter().sum::<f64>() / m;
    assert!((mean - pred).abs() < 3.0 * sd / m.sqrt(), "{mean} vs {pred}");
}

#[test]
fn low_count_null_is_not_chi_square() {
    let g = grid(Family::PowerLaw, 10, 1.0, 2000, vec![Algorithm::LrChi2]);
    let sample = null_histogram(&g, 10, 1.0, 2000, 5).unwrap();
    let chi2 = ChiSquared::new(8.0).unwrap();
    let ks = ks_one_sample(&sample.values, |x| chi2.cdf(x));
    assert!(ks.p_value < 0.01, "KS p = {}", ks.p_value);
}

#[test]
fn line_equal_to_the_continuum_has_null_power() {
    // A one-bin line whose level equals the power law there leaves the rates unchanged.
    let n = 40;
    let mut alt = grid(
        Family::Emission,
        n,
        2.0,
        300,
        vec![Algorithm::LrChi2, Algorithm::CorrectedZHigh],
    );
    alt.line_width = 1.0 / n as f64;
    let (m1, _) = alt.line_bins(n);
    let e = channel_energies(&unit_grid_edges(n), Default::default());
    alt.psi_factor = Some(e[m1].powf(-alt.gamma));
    let null = ExperimentGrid {
        family: Family::PowerLaw,
        psi_factor: None,
        ..alt.clone()
    };
    let src = CumulantSource::direct();
    let p = power_curve(&alt, &builtin_methods(&alt, &src)).unwrap();
    let t = type1_curve(&null, &builtin_methods(&null, &src)).unwrap();
    for (a, b) in p.records.iter().zip(&t.records) {
        assert!(
            (a.value - b.value).abs() <= 3.0 * (a.se + b.se).max(1e-3),
            "{a:?} vs {b:?}"
        );
    }
}

#[test]
fn grid_results_do_not_depend_on_thread_count() {
    let g = grid(
        Family::PowerLaw,
        20,
        1.5,
        40,
        vec![Algorithm::LrChi2, Algorithm::CorrectedZHigh, Algorithm::Bootstrap],
    );
    let src = CumulantSource::direct();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_grid(&g, &builtin_methods(&g, &src)).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn type1_rejects_line_families_and_power_rejects_null_families() {
    let src = CumulantSource::direct();
    let g = grid(Family::Emission, 20, 1.0, 10, vec![Algorithm::LrChi2]);
    assert!(type1_curve(&g, &builtin_methods(&g, &src)).is_err());
    let g = grid(Family::PowerLaw, 20, 1.0, 10, vec![Algorithm::LrChi2]);
    assert!(power_curve(&g, &builtin_methods(&g, &src)).is_err());
}

#[test]
fn benchmark_work_grows_with_channels() {
    let rows = runtime_bench(&[20, 200], 20, 2, 3, &CumulantSource::direct()).unwrap();
    assert!(rows[1].corrected_z_secs >= rows[0].corrected_z_secs);
    assert!(rows[1].bootstrap_secs >= rows[0].bootstrap_secs);
    assert!(rows.iter().all(|r| r.bootstrap_secs > r.corrected_z_secs));
}
