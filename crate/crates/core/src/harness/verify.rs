//! Numerical checks of the estimator theory and the gain identities.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::dataset::{build_dataset, stream_seed, Stream};
use super::{evaluate, train_model};
use crate::error::Result;
use crate::estimator::{noise_variance_for_snr, synthesize_rx, LsOperator};
use crate::linalg::ComplexMatrix;
use crate::network::{GainReport, MbaModel};
use crate::pilot::{dft_matrix, hadamard_matrix, ls_mse_objective, random_unimodular};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Measured quantity the check thresholds.
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TheoryReport {
    pub checks: Vec<CheckResult>,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{} {}: measured {:.6e}, threshold {:.6e}; {}\n",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.measured,
                    c.threshold,
                    c.detail
                )
            })
            .collect()
    }
}

/// Mean `||H_LS - H||_F^2` over `draws` noisy observations of a zero channel
/// (the LS error does not depend on the channel).
pub fn monte_carlo_ls_mse(psi: &ComplexMatrix, n_t: usize, sigma_n2: f64, draws: usize, seed: u64) -> Result<f64> {
    let op = LsOperator::new(psi)?;
    let h = ComplexMatrix::zeros(n_t, psi.rows());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..draws {
        let rx = synthesize_rx(&h, psi, sigma_n2, 1.0, 0, &mut rng)?;
        total += op.apply(&rx.y)?.frobenius_norm_sq();
    }
    Ok(total / draws as f64)
}

/// Least-squares line through `(x, y)`: `(slope, intercept)`.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

fn check(name: &str, measured: f64, threshold: f64, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: measured <= threshold,
        measured,
        threshold,
        detail,
    }
}

/// (a) Monte-Carlo LS MSE against the trace formula for the configured
/// design at the first configured SNR.
fn trace_formula(config: &ExperimentConfig) -> Result<CheckResult> {
    let psi = config
        .psi
        .build(config.b, stream_seed(config.seed, Stream::Design, 0))?;
    let n_t = config.system.n_t;
    let sigma = noise_variance_for_snr(config.snr_db[0], 1.0);
    let mc = monte_carlo_ls_mse(
        psi.matrix(),
        n_t,
        sigma,
        config.mc_draws,
        stream_seed(config.seed, Stream::Verify, 0),
    )?;
    let j = ls_mse_objective(psi.matrix(), n_t, sigma)?;
    Ok(check(
        "trace formula",
        (mc / j - 1.0).abs(),
        0.03,
        format!(
            "{} design, B = {}, {} draws: empirical {mc:.6e}, analytic {j:.6e}",
            config.psi, config.b, config.mc_draws
        ),
    ))
}

/// (b) For M in {4, 8, 16}: number of random unimodular designs strictly
/// better than DFT, and the Hadamard/DFT objective gap.
fn etf_optimality(config: &ExperimentConfig) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, Stream::Verify, 1));
    for m in [4usize, 8, 16] {
        let dft = ls_mse_objective(dft_matrix(m)?.matrix(), 1, 1.0)?;
        let mut better = 0usize;
        let mut best = f64::INFINITY;
        for _ in 0..config.random_designs {
            let j = ls_mse_objective(random_unimodular(m, m, &mut rng)?.matrix(), 1, 1.0)?;
            best = best.min(j);
            if j < dft * (1.0 - 1e-12) {
                better += 1;
            }
        }
        out.push(check(
            &format!("etf optimality M={m}"),
            better as f64,
            0.0,
            format!(
                "DFT objective {dft:.6e}; best of {} random designs {best:.6e} (margin {:.3e})",
                config.random_designs,
                best - dft
            ),
        ));
        let had = ls_mse_objective(hadamard_matrix(m)?.matrix(), 1, 1.0)?;
        out.push(check(
            &format!("hadamard equals dft M={m}"),
            (had - dft).abs() / dft,
            1e-12,
            format!("hadamard {had:.15e}, dft {dft:.15e}"),
        ));
    }
    Ok(out)
}

/// (c) The first-power identity on a trained toy model, with the squared
/// amplitude-model form reported alongside.
fn gain_identity(report: &GainReport) -> CheckResult {
    let gap = (report.first_power - report.nmse_cmn).abs() / report.nmse_ls;
    check(
        "gain identity",
        gap,
        1e-12,
        format!(
            "NMSE LS {:.6e}, CAN {:.6e}, MBA {:.6e}; lambda_can {:.6}, lambda_cmn {:.6}; \
             squared form gives {:.6e}",
            report.nmse_ls, report.nmse_can, report.nmse_cmn, report.lambda_can, report.lambda_cmn, report.squared_form
        ),
    )
}

/// (d) LS MSE against M for `Psi = DFT(M) / sqrt(M)` (identity Gram): the
/// fitted slope over M in {4, 8, 16, 32} should be `N_t sigma^2`. The
/// unimodular DFT slope is reported as well; it is `N_t sigma^2 / M` per
/// element and so not linear.
fn linearity(config: &ExperimentConfig) -> Result<CheckResult> {
    let n_t = config.system.n_t;
    let sigma = noise_variance_for_snr(config.snr_db[0], 1.0);
    let ms = [4usize, 8, 16, 32];
    let mut normalized = Vec::new();
    let mut unimodular = Vec::new();
    for (i, &m) in ms.iter().enumerate() {
        let dft = dft_matrix(m)?;
        let scaled = dft.matrix().scale(Complex64::new(1.0 / (m as f64).sqrt(), 0.0));
        let seed = stream_seed(config.seed, Stream::Verify, 10 + i as u64);
        normalized.push(monte_carlo_ls_mse(&scaled, n_t, sigma, config.mc_draws, seed)?);
        unimodular.push(ls_mse_objective(dft.matrix(), n_t, sigma)?);
    }
    let x: Vec<f64> = ms.iter().map(|&m| m as f64).collect();
    let (slope, intercept) = fit_line(&x, &normalized);
    let target = n_t as f64 * sigma;
    Ok(check(
        "ls mse linear in M",
        (slope / target - 1.0).abs(),
        0.05,
        format!(
            "normalized-Gram slope {slope:.6e} (intercept {intercept:.3e}) vs N_t sigma^2 = {target:.6e}; \
             unimodular DFT MSE {:?}",
            unimodular.iter().map(|v| format!("{v:.4e}")).collect::<Vec<_>>()
        ),
    ))
}

/// Runs checks (a) to (d). Check (c) uses `model` when given, otherwise a
/// model trained from `config`. Failures are report entries, not errors.
pub fn verify_theory(config: &ExperimentConfig, model: Option<&MbaModel>) -> Result<TheoryReport> {
    config.validate()?;
    let mut checks = vec![trace_formula(config)?];
    checks.extend(etf_optimality(config)?);
    let splits = build_dataset(config)?;
    let report = match model {
        Some(m) => evaluate(config, m, &splits.test)?,
        None => {
            let (m, _) = train_model(config, &splits.train, &splits.val, 0)?;
            evaluate(config, &m, &splits.test)?
        }
    };
    checks.push(gain_identity(&report));
    checks.push(linearity(config)?);
    Ok(TheoryReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_fit_recovers_slope() {
        let (s, c) = fit_line(&[1.0, 2.0, 3.0, 4.0], &[3.0, 5.0, 7.0, 9.0]);
        assert!((s - 2.0).abs() < 1e-12 && (c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn toy_report_passes() {
        let cfg = ExperimentConfig::parse(
            "seed = 2\nn_subcarriers = 4\nn_train = 32\nn_val = 8\nn_test = 8\nepochs_can = 2\nepochs_cmn = 2\n\
             width = 4\nattn_width = 2\nmc_draws = 4000\nrandom_designs = 200\n",
        )
        .unwrap();
        let report = verify_theory(&cfg, None).unwrap();
        assert_eq!(report.checks.len(), 9);
        assert!(report.passed(), "{}", report.to_text());
        assert!(report.to_text().lines().all(|l| l.starts_with("PASS")));
    }
}
