//! Acceptance criteria 1-10. Runs every criterion in order and prints one
//! PASS/FAIL line each; pass criterion numbers as arguments to run a subset.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cashgof::calibrate::{
    self, builtin_methods, rmf_case_study, rmf_study_model, runtime_bench, ExperimentGrid, Family, RmfCase,
};
use cashgof::cash::{c_function, c_gradient, c_per_bin};
use cashgof::cumulants::{build_table, cumulants_at, CumulantSource, CumulantTable, TableSpec};
use cashgof::dataset::{unit_grid_edges, BinnedDataset};
use cashgof::fit::{design_at, fit_with, FitOptions};
use cashgof::gof::{
    conditional_moments, log_linear_moment_summary, lr_chi2_test, moment_summary, summary_at, unconditional_moments,
    Algorithm, MeanCorrection,
};
use cashgof::model::{
    expected_counts, Constant, EnergyPoint, FoldedModel, LogLinear, PowerLaw, PowerLawWithLine, SpectralModel,
};
use cashgof::response::InstrumentResponse;
use cashgof::seed::derive_seed;
use cashgof::simulate::sample_counts;
use cashgof::stats::{ks_two_sample, ks_uniform};
use nalgebra::{DMatrix, DVector};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Uniform draw in `[0, 1)` from a seed stream.
fn unif(seed: u64, i: u64) -> f64 {
    (derive_seed(seed, i) >> 11) as f64 / (1u64 << 53) as f64
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn default_table() -> Arc<CumulantTable> {
    static TABLE: std::sync::OnceLock<Arc<CumulantTable>> = std::sync::OnceLock::new();
    TABLE
        .get_or_init(|| Arc::new(build_table(TableSpec::default(), 0).expect("table build")))
        .clone()
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn criterion_1() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/c_oracle.csv");
    let mut rdr = csv::Reader::from_path(path).expect("oracle fixture");
    let rows: Vec<(u64, f64, f64)> = rdr
        .records()
        .map(|r| {
            let r = r.expect("fixture row");
            (r[0].parse().unwrap(), r[1].parse().unwrap(), r[2].parse().unwrap())
        })
        .collect();
    let start = Instant::now();
    let got: Vec<f64> = rows.iter().map(|&(n, s, _)| c_per_bin(n, s).unwrap()).collect();
    let elapsed = start.elapsed();
    let mut worst = 0.0f64;
    for (&(_, _, want), &c) in rows.iter().zip(&got) {
        let e = if want == 0.0 {
            c.abs()
        } else {
            ((c - want) / want).abs()
        };
        worst = worst.max(e);
    }
    outcome(
        worst < 1e-12 && rows.len() >= 10_000 && elapsed < Duration::from_secs(1),
        format!(
            "max rel err {worst:.2e} over {} pairs vs 60-digit oracle (limit 1e-12); {}",
            rows.len(),
            secs(elapsed)
        ),
    )
}

/// Random instances of every built-in model.
fn gradient_instances(seed: u64) -> Vec<(String, Box<dyn SpectralModel>, Vec<f64>)> {
    let mut out: Vec<(String, Box<dyn SpectralModel>, Vec<f64>)> = Vec::new();
    for r in 0..100u64 {
        let u = |i: u64| unif(derive_seed(seed, r), i);
        let n = 5 + (u(0) * 60.0) as usize;
        let edges = unit_grid_edges(n);
        let k = 10f64.powf(-0.5 + 3.0 * u(1));
        let gamma = -2.0 + 6.0 * u(2);
        out.push(("constant".into(), Box::new(Constant::new(n).unwrap()), vec![k]));
        out.push((
            "powerlaw".into(),
            Box::new(PowerLaw::on_edges(&edges, EnergyPoint::Upper).unwrap()),
            vec![k, gamma],
        ));
        let m1 = (u(3) * (n - 1) as f64) as usize;
        let m2 = m1 + 1 + (u(4) * (n - m1 - 1) as f64) as usize;
        out.push((
            "powerlaw+line".into(),
            Box::new(PowerLawWithLine::on_edges(&edges, EnergyPoint::Upper, m1, m2).unwrap()),
            vec![k, gamma, k * (0.1 + 2.0 * u(5))],
        ));
        let d = 3;
        let design = DMatrix::from_fn(n, d, |i, j| {
            if j == 0 {
                1.0
            } else {
                (u(10 + (i * d + j) as u64) - 0.5) * 2.0
            }
        });
        out.push((
            "loglinear".into(),
            Box::new(LogLinear::new(design).unwrap()),
            vec![k.ln(), 0.5 * (u(6) - 0.5), 0.5 * (u(7) - 0.5)],
        ));
        let resp = match r % 3 {
            0 => InstrumentResponse::tridiagonal(&edges),
            1 => InstrumentResponse::dispersed(&edges),
            _ => InstrumentResponse::identity(&edges),
        }
        .unwrap();
        let resp = resp
            .with_area((0..n).map(|i| 0.5 + u(200 + i as u64)).collect())
            .unwrap();
        let cont = Box::new(PowerLaw::on_edges(&edges, EnergyPoint::Mid).unwrap());
        let bg = Some((0..n).map(|i| 0.05 * u(400 + i as u64)).collect());
        out.push((
            "folded powerlaw".into(),
            Box::new(FoldedModel::new(cont, &resp, bg, 1.0 + u(8)).unwrap()),
            vec![k * n as f64, gamma],
        ));
    }
    out
}

fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut worst_grad = 0.0f64;
    let mut worst_jac = 0.0f64;
    let mut worst_name = String::new();
    let mut count = 0;
    for (r, (name, model, theta)) in gradient_instances(0xC2).into_iter().enumerate() {
        let s = expected_counts(model.as_ref(), &theta).unwrap();
        let counts = sample_counts(&s, derive_seed(0xC2C2, r as u64));
        let data = BinnedDataset::on_unit_grid(counts).unwrap();
        let (s, x) = design_at(model.as_ref(), &theta).unwrap();
        let g = c_gradient(&data, &s, &x).unwrap();
        let d = theta.len();
        let mut fd_g = vec![0.0; d];
        let mut jac_err = 0.0f64;
        for k in 0..d {
            // Five-point central stencil.
            let h = 1e-4 * (1.0 + theta[k].abs());
            let at = |m: f64| {
                let mut t = theta.clone();
                t[k] += m * h;
                let s = expected_counts(model.as_ref(), &t).unwrap();
                let c = c_function(&data, &s).unwrap().total;
                (s, c)
            };
            let [(s2m, c2m), (s1m, c1m), (s1p, c1p), (s2p, c2p)] = [at(-2.0), at(-1.0), at(1.0), at(2.0)];
            let stencil = |a2m: f64, a1m: f64, a1p: f64, a2p: f64| (a2m - 8.0 * a1m + 8.0 * a1p - a2p) / (12.0 * h);
            fd_g[k] = stencil(c2m, c1m, c1p, c2p);
            let fd_col: Vec<f64> = (0..s1p.len())
                .map(|i| stencil(s2m[i], s1m[i], s1p[i], s2p[i]))
                .collect();
            let col: Vec<f64> = x.column(k).iter().copied().collect();
            jac_err = jac_err.max(rel_inf(&col, &fd_col));
        }
        let grad_err = rel_inf(g.as_slice(), &fd_g);
        if grad_err.max(jac_err) > worst_grad.max(worst_jac) {
            worst_name = name.clone();
        }
        worst_grad = worst_grad.max(grad_err);
        worst_jac = worst_jac.max(jac_err);
        count += 1;
    }
    let elapsed = start.elapsed();
    outcome(
        worst_grad < 1e-6 && worst_jac < 1e-6 && elapsed < Duration::from_secs(10),
        format!(
            "{count} instances over 5 models; max rel err gradient {worst_grad:.2e}, Jacobian {worst_jac:.2e} \
             (worst: {worst_name}; limit 1e-6); {}",
            secs(elapsed)
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let table = default_table();
    let build = start.elapsed();
    let mut worst = [0.0f64; 4];
    let mut k03_err = 0.0f64;
    for i in 0..1000u64 {
        let s = 0.01 + (99.0 - 0.01) * unif(0xC3, i);
        let a = table.lookup(s).unwrap();
        let b = cumulants_at(s, 1e-40).unwrap();
        for (w, (x, y)) in worst
            .iter_mut()
            .zip([(a.k1, b.k1), (a.k2, b.k2), (a.k11, b.k11), (a.k12, b.k12)])
        {
            *w = w.max(((x - y) / y).abs());
        }
        k03_err = k03_err.max(((a.k03 - s) / s).abs()).max(((b.k03 - s) / s).abs());
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    outcome(
        max < 1e-5 && k03_err < 1e-12 && build < Duration::from_secs(600),
        format!(
            "max rel err k1 {:.2e}, k2 {:.2e}, k11 {:.2e}, k12 {:.2e} (limit 1e-5); k03 {k03_err:.1e}; \
             table build {}",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            secs(build)
        ),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let n = 50;
    let m = 2000u64;
    let model = Constant::new(n).unwrap();
    let template = BinnedDataset::on_unit_grid(vec![0; n]).unwrap();
    let src = CumulantSource::with_table(default_table());
    let opts = FitOptions::single_start();
    let mut c = Vec::new();
    let mut predicted = Vec::new();
    let mut p = Vec::new();
    for r in 0..m {
        let data = template
            .with_counts(sample_counts(&vec![100.0; n], derive_seed(0xC4, r)))
            .unwrap();
        let fit = fit_with(&data, &model, None, &opts).unwrap();
        c.push(fit.c_min);
        predicted.push(unconditional_moments(&model, fit.theta(), &src).unwrap().mean);
        p.push(lr_chi2_test(fit.c_min, n, 1).unwrap().p_value);
    }
    let (mc, sd) = mean_sd(&c);
    let se = sd / (m as f64).sqrt();
    let (mp, _) = mean_sd(&predicted);
    let z = (mc - mp) / se;
    let ks = ks_uniform(&p);
    let elapsed = start.elapsed();
    outcome(
        z.abs() < 3.0 && ks.p_value > 0.01 && elapsed < Duration::from_secs(120),
        format!(
            "mean C {mc:.4} vs predicted {mp:.4} ({z:+.2} SE, limit 3); LR-chi2 p-value KS D = {:.4}, p = {:.3} \
             (limit 0.01); {}",
            ks.statistic,
            ks.p_value,
            secs(elapsed)
        ),
    )
}

fn type1_grid(k: f64, algorithms: Vec<Algorithm>, seed: u64) -> ExperimentGrid {
    ExperimentGrid {
        family: Family::PowerLaw,
        gamma: 3.0,
        k_values: vec![k],
        n_values: vec![100],
        alphas: vec![0.1],
        replications: 2000,
        bootstrap_b: 300,
        algorithms,
        ..ExperimentGrid::type1_desk(seed)
    }
}

fn rate(report: &calibrate::CalibrationReport, alg: Algorithm, n: usize, k: f64) -> (f64, f64) {
    let r = report.record(alg.label(), n, k, 0.1).expect("cell present");
    (r.value, r.se)
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let src = CumulantSource::with_table(default_table());
    let g = type1_grid(0.25, vec![Algorithm::CorrectedZHigh, Algorithm::LrChi2], 0xC5);
    let low = calibrate::type1_curve(&g, &builtin_methods(&g, &src)).unwrap();
    let g = type1_grid(0.1, vec![Algorithm::NaiveZHighorder, Algorithm::Bootstrap], 0xC5);
    let lowest = calibrate::type1_curve(&g, &builtin_methods(&g, &src)).unwrap();
    let (cz, cz_se) = rate(&low, Algorithm::CorrectedZHigh, 100, 0.25);
    let (lr, _) = rate(&low, Algorithm::LrChi2, 100, 0.25);
    let (nz, _) = rate(&lowest, Algorithm::NaiveZHighorder, 100, 0.1);
    let (bs, _) = rate(&lowest, Algorithm::Bootstrap, 100, 0.1);
    let flagged = low.records.iter().chain(&lowest.records).any(|r| r.flagged);
    let elapsed = start.elapsed();
    let pass = (0.07..=0.13).contains(&cz)
        && !(0.05..=0.15).contains(&lr)
        && nz < 0.05
        && bs < 0.05
        && elapsed < Duration::from_secs(1800);
    outcome(
        pass,
        format!(
            "K=0.25: corrected-Z {cz:.4} (se {cz_se:.4}, need [0.07, 0.13]), LR-chi2 {lr:.4} (need outside \
             [0.05, 0.15]); K=0.1: naive-Z {nz:.4}, bootstrap {bs:.4} (need < 0.05){}; {}",
            if flagged { "; cells flagged for failures" } else { "" },
            secs(elapsed)
        ),
    )
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let src = CumulantSource::with_table(default_table());
    let grid = ExperimentGrid {
        k_values: vec![0.1, 1.0],
        n_values: vec![100],
        alphas: vec![0.1],
        replications: 1000,
        bootstrap_b: 300,
        algorithms: vec![
            Algorithm::CorrectedZHigh,
            Algorithm::NaiveZHighorder,
            Algorithm::Bootstrap,
        ],
        ..ExperimentGrid::power(Family::Emission, 0xC6)
    };
    let rep = calibrate::power_curve(&grid, &builtin_methods(&grid, &src)).unwrap();
    let (c1, _) = rate(&rep, Algorithm::CorrectedZHigh, 100, 1.0);
    let (n1, _) = rate(&rep, Algorithm::NaiveZHighorder, 100, 1.0);
    let (b1, _) = rate(&rep, Algorithm::Bootstrap, 100, 1.0);
    let (c01, _) = rate(&rep, Algorithm::CorrectedZHigh, 100, 0.1);
    let (b01, _) = rate(&rep, Algorithm::Bootstrap, 100, 0.1);
    let elapsed = start.elapsed();
    let pass = c1 >= b1 - 0.03 && c1 > n1 + 0.02 && b01 < c01 - 0.1 && elapsed < Duration::from_secs(2700);
    outcome(
        pass,
        format!(
            "K=1: power corrected-Z {c1:.3}, bootstrap {b1:.3}, naive-Z {n1:.3}; K=0.1: corrected-Z {c01:.3}, \
             bootstrap {b01:.3}; {}",
            secs(elapsed)
        ),
    )
}

fn structural_instances() -> Vec<(String, Box<dyn SpectralModel>, Vec<f64>)> {
    let mut v = Vec::new();
    for (r, (name, model, theta)) in gradient_instances(0xC7).into_iter().enumerate().step_by(3) {
        let s = expected_counts(model.as_ref(), &theta).unwrap();
        let data = BinnedDataset::on_unit_grid(sample_counts(&s, derive_seed(0xC7C7, r as u64))).unwrap();
        if let Ok(fit) = fit_with(&data, model.as_ref(), Some(&theta), &FitOptions::single_start()) {
            v.push((name, model, fit.theta().to_vec()));
        }
    }
    v
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let src = CumulantSource::direct();
    let mut q_min = f64::INFINITY;
    let mut trace_err = 0.0f64;
    let mut var_err = 0.0f64;
    let mut checked = 0;
    for (_, model, theta) in structural_instances() {
        let (s, x) = design_at(model.as_ref(), &theta).unwrap();
        let n = s.len();
        let d = x.ncols();
        if n <= d {
            continue;
        }
        let Ok(sum) = summary_at(model.as_ref(), &theta, &src, MeanCorrection::Trace) else {
            continue;
        };
        checked += 1;
        let cums: Vec<_> = s.iter().map(|&si| cumulants_at(si, 1e-30).unwrap()).collect();
        let vinv_x = DMatrix::from_fn(n, d, |i, j| x[(i, j)] / s[i]);
        let f = x.transpose() * &vinv_x;
        let f_inv = f.clone().try_inverse().unwrap();
        let hat = &x * &f_inv * x.transpose();
        let tr: f64 = (0..n).map(|i| hat[(i, i)] / s[i]).sum();
        trace_err = trace_err.max((tr - d as f64).abs());
        let c = x.transpose() * DVector::from_iterator(n, cums.iter().zip(&s).map(|(c, si)| c.k11 / si));
        let q = c.dot(&(&f_inv * &c));
        q_min = q_min.min(sum.q_form);
        let sum_k2: f64 = cums.iter().map(|c| c.k2).sum();
        let cond = conditional_moments(model.as_ref(), &theta, &src, MeanCorrection::Trace).unwrap();
        var_err = var_err.max((cond.var - (sum_k2 - q)).abs() / sum_k2.abs().max(1.0));
    }

    let mut const_err = 0.0f64;
    for (i, &theta) in [0.05, 0.3, 1.0, 2.7, 12.0, 80.0].iter().enumerate() {
        let n = 10 + 7 * i;
        let model = Constant::new(n).unwrap();
        let k = cumulants_at(theta, 1e-30).unwrap();
        let nf = n as f64;
        let q = nf * k.k11 * k.k11 / theta;
        let mean = nf * k.k1 - 0.5 * (k.k12 - k.k11) / theta;
        let var = nf * k.k2 - q;
        let sum = summary_at(&model, &[theta], &src, MeanCorrection::Trace).unwrap();
        let cond = sum.conditional();
        for (a, b) in [(sum.q_form, q), (cond.mean, mean), (cond.var, var)] {
            const_err = const_err.max(((a - b) / b).abs());
        }
    }

    let mut prop3_err = 0.0f64;
    for r in 0..20u64 {
        let u = |i: u64| unif(derive_seed(0x73, r), i);
        let n = 8 + (u(0) * 40.0) as usize;
        let d = 1 + (u(1) * 3.0) as usize;
        let design = DMatrix::from_fn(n, d, |i, j| if j == 0 { 1.0 } else { u(10 + (i * d + j) as u64) - 0.5 });
        let model = LogLinear::new(design.clone()).unwrap();
        let beta: Vec<f64> = (0..d)
            .map(|j| {
                if j == 0 {
                    (0.1 + 20.0 * u(2)).ln()
                } else {
                    u(3 + j as u64) - 0.5
                }
            })
            .collect();
        let (s, x) = design_at(&model, &beta).unwrap();
        let cums: Vec<_> = s.iter().map(|&si| cumulants_at(si, 1e-30).unwrap()).collect();
        for how in [MeanCorrection::Trace, MeanCorrection::OnesQuadratic] {
            let general = moment_summary(&s, &x, &cums, how).unwrap();
            let reduced = log_linear_moment_summary(&design, &s, &cums, how).unwrap();
            for (a, b) in [
                (general.q_form, reduced.q_form),
                (general.mean_correction, reduced.mean_correction),
            ] {
                prop3_err = prop3_err.max((a - b).abs() / b.abs().max(1e-300));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = q_min >= 0.0
        && trace_err < 1e-8
        && var_err < 1e-10
        && const_err < 1e-10
        && prop3_err < 1e-10
        && elapsed < Duration::from_secs(10);
    outcome(
        pass,
        format!(
            "{checked} fitted instances: min Q {q_min:.2e}, |tr(V^-1 H) - d| {trace_err:.1e}, conditional variance \
             err {var_err:.1e}; constant closed forms {const_err:.1e}; log-linear reduced route {prop3_err:.1e}; {}",
            secs(elapsed)
        ),
    )
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let study = rmf_case_study(RmfCase::Tridiagonal, 10.0, 1000, 0xC8).unwrap();
    let dist = ks_two_sample(&study.with_rmf, &study.without_rmf);
    let identity = rmf_study_model(Some(RmfCase::Identity)).unwrap();
    let unfolded = rmf_study_model(None).unwrap();
    let mut exact = true;
    for r in 0..100u64 {
        let theta = [
            10f64.powf(-1.0 + 4.0 * unif(0xC88, 2 * r)),
            -2.0 + 7.0 * unif(0xC88, 2 * r + 1),
        ];
        let a = expected_counts(identity.as_ref(), &theta).unwrap();
        let b = expected_counts(unfolded.as_ref(), &theta).unwrap();
        let (_, xa) = design_at(identity.as_ref(), &theta).unwrap();
        let (_, xb) = design_at(unfolded.as_ref(), &theta).unwrap();
        exact &= a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()) && xa == xb;
    }
    let id_study = rmf_case_study(RmfCase::Identity, 10.0, 50, 0xC8).unwrap();
    exact &= id_study.with_rmf == id_study.without_rmf;
    let elapsed = start.elapsed();
    outcome(
        dist < 0.05 && exact && study.with_rmf.len() >= 990 && elapsed < Duration::from_secs(600),
        format!(
            "KS distance tridiagonal vs identity {dist:.4} (limit 0.05, {} pairs); identity fold bit-identical to \
             unfolded: {exact}; {}",
            study.with_rmf.len(),
            secs(elapsed)
        ),
    )
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let src = CumulantSource::with_table(default_table());
    let rows = runtime_bench(&[100], 100, 3, 0xC9, &src).unwrap();
    let r = &rows[0];
    let ratio = r.bootstrap_secs / r.corrected_z_secs;
    let elapsed = start.elapsed();
    outcome(
        ratio >= 10.0 && elapsed < Duration::from_secs(300),
        format!(
            "n=100: corrected-Z {:.4}s, bootstrap (B=100) {:.4}s per call, ratio {ratio:.1} (need >= 10); {}",
            r.corrected_z_secs,
            r.bootstrap_secs,
            secs(elapsed)
        ),
    )
}

fn run_cli(args: &[&str], threads: usize, dir: &Path) -> (bool, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_cashgof"))
        .args(args)
        .current_dir(dir)
        .env("RAYON_NUM_THREADS", threads.to_string())
        .env_remove("CASHGOF_TABLE")
        .output()
        .expect("spawn cashgof");
    (out.status.success(), out.stdout)
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let model = r#"{"model":"powerlaw","params":{"K":3.0,"Gamma":2.0}}"#;
    let grid = serde_json::json!({
        "family": "powerlaw", "k_values": [0.5, 2.0], "n_values": [20],
        "alphas": [0.05, 0.1], "replications": 40, "bootstrap_b": 30, "seed": 11,
        "algorithms": ["lr-chi2", "naive-z-boot", "corrected-z-high", "bootstrap"]
    });
    std::fs::write(p.join("grid.json"), grid.to_string()).unwrap();
    let (ok, _) = run_cli(
        &[
            "simulate", "--bins", "30", "--model", model, "--seed", "5", "--out", "d.csv",
        ],
        1,
        p,
    );
    if !ok {
        return outcome(false, "simulate failed".into());
    }
    let commands: Vec<(&str, Vec<&str>)> = vec![
        (
            "simulate",
            vec!["simulate", "--bins", "30", "--model", model, "--seed", "9"],
        ),
        (
            "gof",
            vec![
                "gof",
                "--data",
                "d.csv",
                "--model",
                model,
                "--method",
                "lr-chi2,naive-z-boot,corrected-z-high,bootstrap,double-bootstrap",
                "--B",
                "60",
                "--B1",
                "12",
                "--B2",
                "12",
                "--seed",
                "21",
            ],
        ),
        ("calibrate", vec!["calibrate", "grid.json", "--format", "csv"]),
        ("calibrate-json", vec!["calibrate", "grid.json"]),
    ];
    let mut bad = Vec::new();
    for (name, args) in &commands {
        let runs: Vec<(bool, Vec<u8>)> = [1, 4, 4].iter().map(|&t| run_cli(args, t, p)).collect();
        if !runs.iter().all(|r| r.0) || runs.iter().any(|r| r.1 != runs[0].1) || runs[0].1.is_empty() {
            bad.push(*name);
        }
    }
    let seg: Vec<Vec<u8>> = [1, 4]
        .iter()
        .map(|&t| {
            let out = format!("seg{t}");
            run_cli(
                &["segment", "--data", "d.csv", "--k", "4", "--seed", "3", "--out", &out],
                t,
                p,
            );
            (1..=4)
                .flat_map(|i| std::fs::read(p.join(&out).join(format!("segment_{i:02}.csv"))).unwrap_or_default())
                .collect()
        })
        .collect();
    if seg[0].is_empty() || seg[0] != seg[1] {
        bad.push("segment");
    }
    let elapsed = start.elapsed();
    outcome(
        bad.is_empty(),
        format!(
            "simulate, gof (all stochastic methods), calibrate (csv and json), segment repeated at 1 and 4 \
             threads: {}; {}",
            if bad.is_empty() {
                "byte-identical".to_owned()
            } else {
                format!("differences in {bad:?}")
            },
            secs(elapsed)
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 10] = [
        (1, "C-function exactness", criterion_1),
        (2, "gradient correctness", criterion_2),
        (3, "cumulant accuracy", criterion_3),
        (4, "unconditional mean, large counts", criterion_4),
        (5, "low-count Type-I error", criterion_5),
        (6, "power ordering, emission line", criterion_6),
        (7, "structural identities", criterion_7),
        (8, "response-matrix insensitivity", criterion_8),
        (9, "runtime, corrected Z vs bootstrap", criterion_9),
        (10, "determinism across thread counts", criterion_10),
    ];
    let mut failed = Vec::new();
    let mut stdout = std::io::stdout();
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let o = f();
        let _ = writeln!(
            stdout,
            "acceptance criterion {id:>2} ({name}): {} : {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        let _ = stdout.flush();
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        let _ = writeln!(stdout, "failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
