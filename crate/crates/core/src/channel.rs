//! CDL-style multipath synthesis for the BS–IRS and IRS–user links.
//!
//! The BS is a half-wavelength ULA, the IRS a half-wavelength UPA whose
//! elements are indexed row-major over `(n_x, n_y)`, both zero-based.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::ComplexMatrix;

/// Mean and standard deviation (radians) of one wrapped-Gaussian angle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngleDist {
    pub mean: f64,
    pub spread: f64,
}

impl AngleDist {
    pub const fn new(mean: f64, spread: f64) -> Self {
        Self { mean, spread }
    }
}

/// Angle statistics for one link. `bs_azimuth` is ignored on the IRS–user link.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkAngles {
    pub irs_azimuth: AngleDist,
    pub irs_elevation: AngleDist,
    pub bs_azimuth: AngleDist,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Link {
    BsIrs,
    MuIrs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemConfig {
    pub n_t: usize,
    pub irs_rows: usize,
    pub irs_cols: usize,
    pub n_subcarriers: usize,
    /// Hz.
    pub sampling_rate: f64,
    /// GHz.
    pub carrier_freq: f64,
    pub l_bs_irs: usize,
    pub l_mu_irs: usize,
    pub noise_variance: f64,
    pub pilot_power: f64,
    pub r_tau: f64,
    pub bs_irs_angles: LinkAngles,
    pub mu_irs_angles: LinkAngles,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let spread = 10f64.to_radians();
        Self {
            n_t: 4,
            irs_rows: 4,
            irs_cols: 4,
            n_subcarriers: 16,
            sampling_rate: 100e6,
            carrier_freq: 28.0,
            l_bs_irs: 4,
            l_mu_irs: 10,
            noise_variance: 0.1,
            pilot_power: 1.0,
            r_tau: 2.1,
            bs_irs_angles: LinkAngles {
                irs_azimuth: AngleDist::new(-0.4, spread),
                irs_elevation: AngleDist::new(1.3, spread),
                bs_azimuth: AngleDist::new(0.5, spread),
            },
            mu_irs_angles: LinkAngles {
                irs_azimuth: AngleDist::new(0.7, spread),
                irs_elevation: AngleDist::new(1.8, spread),
                bs_azimuth: AngleDist::new(0.0, spread),
            },
        }
    }
}

impl SystemConfig {
    /// Number of IRS elements.
    pub fn m(&self) -> usize {
        self.irs_rows * self.irs_cols
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_t", self.n_t),
            ("irs_rows", self.irs_rows),
            ("irs_cols", self.irs_cols),
            ("n_subcarriers", self.n_subcarriers),
            ("l_bs_irs", self.l_bs_irs),
            ("l_mu_irs", self.l_mu_irs),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.noise_variance > 0.0) {
            return Err(Error::Config("noise_variance must be positive".into()));
        }
        if !(self.carrier_freq > 0.0) {
            return Err(Error::Config("carrier_freq must be positive".into()));
        }
        if !(self.sampling_rate > 0.0) || !(self.pilot_power > 0.0) || !(self.r_tau > 0.0) {
            return Err(Error::Config(
                "sampling_rate, pilot_power and r_tau must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn paths(&self, link: Link) -> usize {
        match link {
            Link::BsIrs => self.l_bs_irs,
            Link::MuIrs => self.l_mu_irs,
        }
    }

    pub fn angles(&self, link: Link) -> &LinkAngles {
        match link {
            Link::BsIrs => &self.bs_irs_angles,
            Link::MuIrs => &self.mu_irs_angles,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    /// Seconds.
    pub delay: f64,
    pub gain: Complex64,
    pub irs_azimuth: f64,
    pub irs_elevation: f64,
    pub bs_azimuth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathSet {
    pub paths: Vec<Path>,
    /// Drawn RMS delay spread, seconds.
    pub delay_spread: f64,
    pub r_tau: f64,
}

/// Per-subcarrier channels of one multipath drop.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub g: Vec<ComplexMatrix>,
    pub hr: Vec<ComplexMatrix>,
    pub h_cs: Vec<ComplexMatrix>,
}

/// `(1/sqrt(n)) * exp(j*pi*m*sin(phi))`, `m = 0..n`.
pub fn ula_response(phi: f64, n: usize) -> ComplexMatrix {
    let norm = 1.0 / (n as f64).sqrt();
    let s = phi.sin();
    ComplexMatrix::from_fn(n, 1, |m, _| Complex64::from_polar(norm, PI * m as f64 * s))
}

/// Planar response with entry `(n_x, n_y)` at row `n_x * ny + n_y`:
/// `(1/sqrt(nx*ny)) * exp(j*pi*(n_x sin(phi) sin(theta) + n_y cos(theta)))`.
pub fn upa_response(phi: f64, theta: f64, nx: usize, ny: usize) -> ComplexMatrix {
    let norm = 1.0 / ((nx * ny) as f64).sqrt();
    let u = phi.sin() * theta.sin();
    let v = theta.cos();
    ComplexMatrix::from_fn(nx * ny, 1, |idx, _| {
        let (ix, iy) = (idx / ny, idx % ny);
        Complex64::from_polar(norm, PI * (ix as f64 * u + iy as f64 * v))
    })
}

/// Mean and standard deviation of `log10` of the delay spread, `f_c` in GHz.
pub fn delay_spread_log10_params(carrier_freq: f64) -> (f64, f64) {
    let l = (1.0 + carrier_freq).log10();
    (-0.24 * l - 6.83, 0.16 * l + 0.28)
}

/// Raw exponential path delays `-r_tau * x_ds * ln(u)`, before anchoring.
pub fn raw_path_delays(delay_spread: f64, r_tau: f64, uniforms: &[f64]) -> Vec<f64> {
    uniforms.iter().map(|u| -r_tau * delay_spread * u.ln()).collect()
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w < -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

fn reflect_elevation(a: f64) -> f64 {
    // fold onto [0, pi]
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        2.0 * PI - w
    } else {
        w
    }
}

fn draw_angle<R: Rng + ?Sized>(rng: &mut R, dist: AngleDist) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    dist.mean + dist.spread * z
}

/// Draws delays, gains and angles for one link.
pub fn sample_cdl_params<R: Rng + ?Sized>(config: &SystemConfig, link: Link, rng: &mut R) -> PathSet {
    let (mu, sigma) = delay_spread_log10_params(config.carrier_freq);
    let log_ds = Normal::new(mu, sigma)
        .expect("finite log-normal parameters")
        .sample(rng);
    let delay_spread = 10f64.powf(log_ds);
    let l = config.paths(link);
    // (0, 1]: ln stays finite
    let uniforms: Vec<f64> = (0..l).map(|_| 1.0 - rng.random::<f64>()).collect();
    let mut delays = raw_path_delays(delay_spread, config.r_tau, &uniforms);
    let min = delays.iter().copied().fold(f64::INFINITY, f64::min);
    for d in &mut delays {
        *d -= min;
    }
    delays.sort_by(f64::total_cmp);

    let amp = (1.0 / (2.0 * l as f64)).sqrt();
    let angles = *config.angles(link);
    let paths = delays
        .into_iter()
        .map(|delay| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            let irs_azimuth = wrap_angle(draw_angle(rng, angles.irs_azimuth));
            let irs_elevation = reflect_elevation(draw_angle(rng, angles.irs_elevation));
            let bs_azimuth = match link {
                Link::BsIrs => wrap_angle(draw_angle(rng, angles.bs_azimuth)),
                Link::MuIrs => 0.0,
            };
            Path {
                delay,
                gain: Complex64::new(amp * re, amp * im),
                irs_azimuth,
                irs_elevation,
                bs_azimuth,
            }
        })
        .collect();
    PathSet {
        paths,
        delay_spread,
        r_tau: config.r_tau,
    }
}

fn subcarrier_phase(path: &Path, config: &SystemConfig, k: usize) -> Complex64 {
    let phase = -2.0 * PI * path.delay * config.sampling_rate * k as f64 / config.n_subcarriers as f64;
    Complex64::from_polar(1.0, phase)
}

fn check_args(paths: &PathSet, config: &SystemConfig, k: usize) -> Result<()> {
    if paths.paths.is_empty() {
        return Err(Error::Precondition("empty path set".into()));
    }
    if k >= config.n_subcarriers {
        return Err(Error::Precondition(format!(
            "subcarrier {k} out of range for K = {}",
            config.n_subcarriers
        )));
    }
    Ok(())
}

/// BS–IRS frequency response `G_k` (`N_t x M`).
pub fn freq_response_g(paths: &PathSet, config: &SystemConfig, k: usize) -> Result<ComplexMatrix> {
    check_args(paths, config, k)?;
    let (n_t, m) = (config.n_t, config.m());
    let scale = ((n_t * m) as f64 / paths.paths.len() as f64).sqrt();
    let mut g = ComplexMatrix::zeros(n_t, m);
    for p in &paths.paths {
        let coef = p.gain * subcarrier_phase(p, config, k) * scale;
        let a_bs = ula_response(p.bs_azimuth, n_t);
        let a_irs = upa_response(p.irs_azimuth, p.irs_elevation, config.irs_rows, config.irs_cols);
        for r in 0..n_t {
            let left = coef * a_bs[(r, 0)];
            for c in 0..m {
                g[(r, c)] += left * a_irs[(c, 0)].conj();
            }
        }
    }
    Ok(g)
}

/// IRS–user frequency response `h_r,k` (`M x 1`).
pub fn freq_response_hr(paths: &PathSet, config: &SystemConfig, k: usize) -> Result<ComplexMatrix> {
    check_args(paths, config, k)?;
    let m = config.m();
    let scale = (m as f64 / paths.paths.len() as f64).sqrt();
    let mut h = ComplexMatrix::zeros(m, 1);
    for p in &paths.paths {
        let coef = p.gain * subcarrier_phase(p, config, k) * scale;
        let a_irs = upa_response(p.irs_azimuth, p.irs_elevation, config.irs_rows, config.irs_cols);
        for c in 0..m {
            h[(c, 0)] += coef * a_irs[(c, 0)];
        }
    }
    Ok(h)
}

/// `G * diag(h_r)`: column `m` of `g` scaled by `hr[m]`.
pub fn cascaded_channel(g: &ComplexMatrix, hr: &ComplexMatrix) -> Result<ComplexMatrix> {
    if hr.cols() != 1 || hr.rows() != g.cols() {
        return Err(Error::Dimension(format!(
            "cascade of {:?} with reflection vector {:?}",
            g.shape(),
            hr.shape()
        )));
    }
    let mut out = g.clone();
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            out[(r, c)] *= hr[(c, 0)];
        }
    }
    Ok(out)
}

/// Draws both links and evaluates every subcarrier.
pub fn realize<R: Rng + ?Sized>(config: &SystemConfig, rng: &mut R) -> Result<ChannelRealization> {
    config.validate()?;
    let bs = sample_cdl_params(config, Link::BsIrs, rng);
    let mu = sample_cdl_params(config, Link::MuIrs, rng);
    realize_from_paths(config, &bs, &mu)
}

pub fn realize_from_paths(config: &SystemConfig, bs: &PathSet, mu: &PathSet) -> Result<ChannelRealization> {
    let k_total = config.n_subcarriers;
    let mut out = ChannelRealization {
        g: Vec::with_capacity(k_total),
        hr: Vec::with_capacity(k_total),
        h_cs: Vec::with_capacity(k_total),
    };
    for k in 0..k_total {
        let g = freq_response_g(bs, config, k)?;
        let hr = freq_response_hr(mu, config, k)?;
        out.h_cs.push(cascaded_channel(&g, &hr)?);
        out.g.push(g);
        out.hr.push(hr);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn single_path(delay: f64, gain: Complex64) -> PathSet {
        PathSet {
            paths: vec![Path {
                delay,
                gain,
                irs_azimuth: 0.3,
                irs_elevation: 1.1,
                bs_azimuth: -0.2,
            }],
            delay_spread: 1e-7,
            r_tau: 2.1,
        }
    }

    #[test]
    fn ula_examples() {
        let a = ula_response(0.0, 4);
        for r in 0..4 {
            assert!((a[(r, 0)] - c(0.5, 0.0)).norm() < 1e-15);
        }
        let b = ula_response(PI / 2.0, 2);
        let s = 1.0 / 2f64.sqrt();
        assert!((b[(0, 0)] - c(s, 0.0)).norm() < 1e-15);
        assert!((b[(1, 0)] - c(-s, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn upa_examples() {
        let a = upa_response(0.0, PI / 2.0, 3, 4);
        let v = 1.0 / 12f64.sqrt();
        for r in 0..12 {
            assert!((a[(r, 0)] - c(v, 0.0)).norm() < 1e-15);
        }
        let planar = upa_response(0.7, PI / 2.0, 5, 1);
        let linear = ula_response(0.7, 5);
        assert!(planar.max_abs_diff(&linear) < 1e-14);
    }

    #[test]
    fn delay_spread_closed_forms_at_28ghz() {
        let (mu, sigma) = delay_spread_log10_params(28.0);
        assert!((mu - (-7.18098)).abs() < 1e-4, "{mu}");
        assert!((sigma - 0.51398).abs() < 1e-4, "{sigma}");
    }

    #[test]
    fn unit_uniforms_give_zero_delays() {
        assert!(raw_path_delays(5e-8, 2.1, &[1.0; 6]).iter().all(|&d| d == 0.0));
    }

    #[test]
    fn sampled_paths_are_anchored_sorted_and_normalized() {
        let config = SystemConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let ps = sample_cdl_params(&config, Link::MuIrs, &mut rng);
            assert_eq!(ps.paths.len(), config.l_mu_irs);
            assert_eq!(ps.paths[0].delay, 0.0);
            assert!(ps.paths.windows(2).all(|w| w[0].delay <= w[1].delay));
            for p in &ps.paths {
                assert!((-PI..=PI).contains(&p.irs_azimuth));
                assert!((0.0..=PI).contains(&p.irs_elevation));
                assert!(p.gain.re.is_finite() && p.gain.im.is_finite());
            }
        }
    }

    #[test]
    fn gain_powers_sum_to_one_on_average() {
        let config = SystemConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 4000;
        let total: f64 = (0..draws)
            .map(|_| {
                sample_cdl_params(&config, Link::BsIrs, &mut rng)
                    .paths
                    .iter()
                    .map(|p| p.gain.norm_sqr())
                    .sum::<f64>()
            })
            .sum();
        assert!((total / draws as f64 - 1.0).abs() < 0.03);
    }

    #[test]
    fn static_single_path_is_flat_in_frequency() {
        let config = SystemConfig::default();
        let ps = single_path(0.0, c(1.0, 0.0));
        let g0 = freq_response_g(&ps, &config, 0).unwrap();
        for k in 1..config.n_subcarriers {
            assert_eq!(freq_response_g(&ps, &config, k).unwrap(), g0);
        }
    }

    #[test]
    fn zero_gains_give_zero_responses() {
        let config = SystemConfig::default();
        let mut ps = single_path(1e-8, c(0.0, 0.0));
        ps.paths.push(ps.paths[0].clone());
        assert_eq!(freq_response_g(&ps, &config, 3).unwrap().frobenius_norm(), 0.0);
        assert_eq!(freq_response_hr(&ps, &config, 3).unwrap().frobenius_norm(), 0.0);
    }

    #[test]
    fn single_path_hr_has_norm_sqrt_m() {
        let config = SystemConfig::default();
        let h = freq_response_hr(&single_path(0.0, c(1.0, 0.0)), &config, 2).unwrap();
        assert!((h.frobenius_norm() - (config.m() as f64).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn subcarrier_out_of_range_and_empty_paths_fail() {
        let config = SystemConfig::default();
        let ps = single_path(0.0, c(1.0, 0.0));
        assert!(freq_response_g(&ps, &config, config.n_subcarriers).is_err());
        let empty = PathSet {
            paths: vec![],
            delay_spread: 0.0,
            r_tau: 2.1,
        };
        assert!(freq_response_g(&empty, &config, 0).is_err());
        assert!(freq_response_hr(&empty, &config, 0).is_err());
    }

    #[test]
    fn cascade_examples() {
        let g = ComplexMatrix::from_fn(3, 4, |r, cc| c(r as f64 + 1.0, cc as f64 - 1.5));
        let mut e1 = ComplexMatrix::zeros(4, 1);
        e1[(0, 0)] = c(1.0, 0.0);
        let out = cascaded_channel(&g, &e1).unwrap();
        for r in 0..3 {
            assert_eq!(out[(r, 0)], g[(r, 0)]);
            for cc in 1..4 {
                assert_eq!(out[(r, cc)], c(0.0, 0.0));
            }
        }
        let ones = ComplexMatrix::from_fn(4, 1, |_, _| c(1.0, 0.0));
        assert_eq!(cascaded_channel(&g, &ones).unwrap(), g);
        assert!(cascaded_channel(&g, &ComplexMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let config = SystemConfig {
            l_mu_irs: 0,
            ..SystemConfig::default()
        };
        assert!(config.validate().is_err());
        let config = SystemConfig {
            noise_variance: 0.0,
            ..SystemConfig::default()
        };
        assert!(config.validate().is_err());
    }
}
