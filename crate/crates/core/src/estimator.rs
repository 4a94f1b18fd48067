//! Uplink training observations, full/reduced LS estimation and NMSE scoring.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::ComplexMatrix;
use crate::pilot::{reduce_psi, ActivationPattern, PhaseMatrix};

/// Pilot-normalized received signals over the training slots of one subcarrier.
#[derive(Clone, Debug, PartialEq)]
pub struct RxBlock {
    pub y: ComplexMatrix,
    pub subcarrier: usize,
    pub snr_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimateRecord {
    pub h_true: ComplexMatrix,
    pub h_ls_reduced: ComplexMatrix,
    pub h_aug: ComplexMatrix,
    pub pattern: ActivationPattern,
}

/// `10 log10(p / sigma_n^2)`.
pub fn snr_db(pilot_power: f64, noise_variance: f64) -> f64 {
    10.0 * (pilot_power / noise_variance).log10()
}

/// Noise variance giving `snr_db` at pilot power `p`.
pub fn noise_variance_for_snr(snr_db: f64, pilot_power: f64) -> f64 {
    pilot_power / 10f64.powf(snr_db / 10.0)
}

/// Circularly-symmetric complex Gaussian with total variance `variance`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// `Y = H_cs * Psi + N` with i.i.d. `CN(0, sigma_n^2 / p)` noise.
pub fn synthesize_rx<R: Rng + ?Sized>(
    h_cs: &ComplexMatrix,
    psi: &ComplexMatrix,
    sigma_n2: f64,
    pilot_power: f64,
    subcarrier: usize,
    rng: &mut R,
) -> Result<RxBlock> {
    if h_cs.cols() != psi.rows() {
        return Err(Error::Dimension(format!(
            "channel has {} columns, design has {} rows",
            h_cs.cols(),
            psi.rows()
        )));
    }
    if !(sigma_n2 >= 0.0) || !(pilot_power > 0.0) {
        return Err(Error::Precondition(format!(
            "need sigma_n^2 >= 0 and p > 0, got {sigma_n2} and {pilot_power}"
        )));
    }
    let mut y = h_cs.matmul(psi)?;
    let variance = sigma_n2 / pilot_power;
    if variance > 0.0 {
        for z in y.entries_mut() {
            *z += complex_gaussian(rng, variance);
        }
    }
    Ok(RxBlock {
        y,
        subcarrier,
        snr_db: if sigma_n2 > 0.0 {
            snr_db(pilot_power, sigma_n2)
        } else {
            f64::INFINITY
        },
    })
}

/// Precomputed right factor `Psi^H (Psi Psi^H)^-1` of the LS estimator.
#[derive(Clone, Debug)]
pub struct LsOperator {
    right: ComplexMatrix,
}

impl LsOperator {
    pub fn new(psi: &ComplexMatrix) -> Result<Self> {
        if psi.rows() > psi.cols() {
            return Err(Error::Precondition(format!(
                "LS needs at least as many training slots as unknown columns: \
                 design has {} rows but only {} slots (B < M)",
                psi.rows(),
                psi.cols()
            )));
        }
        let inv = psi.gram().hermitian_inverse()?;
        Ok(Self {
            right: psi.hermitian().matmul(&inv)?,
        })
    }

    pub fn apply(&self, y: &ComplexMatrix) -> Result<ComplexMatrix> {
        y.matmul(&self.right)
    }
}

/// `Y Psi^H (Psi Psi^H)^-1`.
pub fn ls_estimate(y: &ComplexMatrix, psi: &ComplexMatrix) -> Result<ComplexMatrix> {
    LsOperator::new(psi)?.apply(y)
}

/// Scatters the reduced estimate's columns to the active element indices;
/// inactive columns are zero.
pub fn augment_zeros(h_reduced: &ComplexMatrix, pattern: &ActivationPattern) -> Result<ComplexMatrix> {
    let active = pattern.active_indices();
    if h_reduced.cols() != active.len() {
        return Err(Error::Dimension(format!(
            "reduced estimate has {} columns, pattern activates {}",
            h_reduced.cols(),
            active.len()
        )));
    }
    let mut out = ComplexMatrix::zeros(h_reduced.rows(), pattern.m());
    for (src, &dst) in active.iter().enumerate() {
        for r in 0..h_reduced.rows() {
            out[(r, dst)] = h_reduced[(r, src)];
        }
    }
    Ok(out)
}

/// Keeps only the active columns.
pub fn compress_columns(h: &ComplexMatrix, pattern: &ActivationPattern) -> Result<ComplexMatrix> {
    if h.cols() != pattern.m() {
        return Err(Error::Dimension(format!(
            "matrix has {} columns, pattern has {} elements",
            h.cols(),
            pattern.m()
        )));
    }
    let active = pattern.active_indices();
    Ok(ComplexMatrix::from_fn(h.rows(), active.len(), |r, c| h[(r, active[c])]))
}

/// `||h_true - h_est||_F^2 / ||h_true||_F^2`.
pub fn nmse(h_true: &ComplexMatrix, h_est: &ComplexMatrix) -> Result<f64> {
    if h_true.shape() != h_est.shape() {
        return Err(Error::Dimension(format!(
            "nmse of {:?} against {:?}",
            h_true.shape(),
            h_est.shape()
        )));
    }
    let denom = h_true.frobenius_norm_sq();
    if denom == 0.0 {
        return Err(Error::Precondition("nmse against an all-zero channel".into()));
    }
    Ok(h_true.sub(h_est)?.frobenius_norm_sq() / denom)
}

/// Mean of per-sample NMSE ratios.
pub fn nmse_batch(pairs: &[(ComplexMatrix, ComplexMatrix)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Precondition("nmse over an empty batch".into()));
    }
    let mut total = 0.0;
    for (t, e) in pairs {
        total += nmse(t, e)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Trains with inactive elements switched off (zero rows of the `M x B`
/// design), solves LS on the `B x B` active design and zero-augments.
pub fn estimate_reduced<R: Rng + ?Sized>(
    h_cs: &ComplexMatrix,
    base: &PhaseMatrix,
    pattern: &ActivationPattern,
    sigma_n2: f64,
    pilot_power: f64,
    subcarrier: usize,
    rng: &mut R,
) -> Result<EstimateRecord> {
    let design = reduce_psi(base, pattern)?;
    let rx = synthesize_rx(h_cs, design.matrix(), sigma_n2, pilot_power, subcarrier, rng)?;
    let h_ls_reduced = ls_estimate(&rx.y, base.matrix())?;
    let h_aug = augment_zeros(&h_ls_reduced, pattern)?;
    Ok(EstimateRecord {
        h_true: h_cs.clone(),
        h_ls_reduced,
        h_aug,
        pattern: pattern.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pilot::{dft_matrix, make_pattern, PatternKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> ComplexMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexMatrix::from_fn(rows, cols, |_, _| complex_gaussian(&mut rng, 1.0))
    }

    #[test]
    fn noiseless_rx_is_exact_product() {
        let h = random(3, 4, 1);
        let psi = dft_matrix(4).unwrap();
        let rx = synthesize_rx(&h, psi.matrix(), 0.0, 1.0, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(rx.y, h.matmul(psi.matrix()).unwrap());
    }

    #[test]
    fn rx_rejects_bad_inputs() {
        let h = random(3, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(synthesize_rx(&h, dft_matrix(3).unwrap().matrix(), 0.1, 1.0, 0, &mut rng).is_err());
        assert!(synthesize_rx(&h, dft_matrix(4).unwrap().matrix(), -0.1, 1.0, 0, &mut rng).is_err());
    }

    #[test]
    fn noiseless_dft_ls_is_exact() {
        let h = random(4, 8, 2);
        let psi = dft_matrix(8).unwrap();
        let y = h.matmul(psi.matrix()).unwrap();
        let est = ls_estimate(&y, psi.matrix()).unwrap();
        assert!(est.sub(&h).unwrap().frobenius_norm() / h.frobenius_norm() < 1e-10);
    }

    #[test]
    fn identity_design_returns_observation() {
        let y = random(3, 5, 3);
        let est = ls_estimate(&y, &ComplexMatrix::identity(5)).unwrap();
        assert!(est.max_abs_diff(&y) < 1e-15);
    }

    #[test]
    fn underdetermined_full_ls_fails() {
        let psi = random(6, 4, 4);
        let err = ls_estimate(&random(2, 4, 5), &psi).unwrap_err();
        assert!(err.to_string().contains("B < M"), "{err}");
    }

    #[test]
    fn augment_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = make_pattern(PatternKind::Column, 2, 2, 4, &mut rng).unwrap();
        let h = random(3, 4, 6);
        assert_eq!(augment_zeros(&h, &all).unwrap(), h);

        let mut mask = vec![false; 4];
        mask[2] = true;
        let one = ActivationPattern::from_mask(2, 2, mask, PatternKind::Random).unwrap();
        let col = random(3, 1, 7);
        let aug = augment_zeros(&col, &one).unwrap();
        for r in 0..3 {
            assert_eq!(aug[(r, 2)], col[(r, 0)]);
            for c in [0, 1, 3] {
                assert_eq!(aug[(r, c)], Complex64::new(0.0, 0.0));
            }
        }
        assert!(augment_zeros(&random(3, 2, 8), &one).is_err());
    }

    #[test]
    fn nmse_examples() {
        let h = random(4, 6, 9);
        assert_eq!(nmse(&h, &h).unwrap(), 0.0);
        assert_eq!(nmse(&h, &ComplexMatrix::zeros(4, 6)).unwrap(), 1.0);
        let double = h.scale(Complex64::new(2.0, 0.0));
        assert!((nmse(&h, &double).unwrap() - 1.0).abs() < 1e-15);
        assert!(nmse(&ComplexMatrix::zeros(4, 6), &h).is_err());
        assert!(nmse(&h, &random(4, 5, 1)).is_err());
    }

    #[test]
    fn snr_round_trip() {
        let v = noise_variance_for_snr(10.0, 1.0);
        assert!((v - 0.1).abs() < 1e-15);
        assert!((snr_db(1.0, v) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn reduced_estimate_has_zero_inactive_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = make_pattern(PatternKind::Proposed, 4, 4, 8, &mut rng).unwrap();
        let h = random(4, 16, 12);
        let rec = estimate_reduced(&h, &dft_matrix(8).unwrap(), &p, 0.1, 1.0, 0, &mut rng).unwrap();
        for (i, &a) in p.mask().iter().enumerate() {
            if !a {
                assert!(rec.h_aug.column(i).iter().all(|z| z.norm() == 0.0));
            }
        }
        assert_eq!(rec.h_aug.frobenius_norm_sq(), rec.h_ls_reduced.frobenius_norm_sq());
    }
}
