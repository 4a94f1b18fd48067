//! Flat `key = value` experiment configuration.

use std::path::PathBuf;
use std::str::FromStr;

use crate::channel::{AngleDist, SystemConfig};
use crate::error::{Error, Result};
use crate::pilot::{dft_matrix, hadamard_matrix, quantize_phases, random_unimodular, PatternKind, PhaseMatrix};

/// Base training-phase design used on the active elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsiKind {
    Dft,
    Hadamard,
    Random,
    Quantized(u32),
}

impl PsiKind {
    /// `b x b` design; `Random` draws from `seed`.
    pub fn build(self, b: usize, seed: u64) -> Result<PhaseMatrix> {
        match self {
            PsiKind::Dft => dft_matrix(b),
            PsiKind::Hadamard => hadamard_matrix(b),
            PsiKind::Random => {
                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
                random_unimodular(b, b, &mut rng)
            }
            PsiKind::Quantized(bits) => quantize_phases(&dft_matrix(b)?, bits),
        }
    }
}

impl FromStr for PsiKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dft" => Ok(Self::Dft),
            "hadamard" => Ok(Self::Hadamard),
            "random" => Ok(Self::Random),
            _ => {
                if let Some(bits) = s.strip_prefix("quantized:") {
                    let bits = bits
                        .parse()
                        .map_err(|_| Error::Config(format!("bad quantizer bit count in {s:?}")))?;
                    Ok(Self::Quantized(bits))
                } else {
                    Err(Error::Config(format!(
                        "unknown psi {s:?} (expected dft, hadamard, random or quantized:<bits>)"
                    )))
                }
            }
        }
    }
}

impl std::fmt::Display for PsiKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PsiKind::Dft => f.write_str("dft"),
            PsiKind::Hadamard => f.write_str("hadamard"),
            PsiKind::Random => f.write_str("random"),
            PsiKind::Quantized(b) => write!(f, "quantized:{b}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Snr,
    Pilots,
    IrsSize,
    Pattern,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snr" => Ok(Self::Snr),
            "pilots" => Ok(Self::Pilots),
            "irs_size" => Ok(Self::IrsSize),
            "pattern" => Ok(Self::Pattern),
            _ => Err(Error::Config(format!(
                "unknown sweep axis {s:?} (expected snr, pilots, irs_size or pattern)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub pattern: PatternKind,
    pub b: usize,
    pub psi: PsiKind,
    /// Training SNRs; realizations cycle through the list.
    pub snr_db: Vec<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub epochs_can: usize,
    pub epochs_cmn: usize,
    pub batch_size: usize,
    pub width: usize,
    pub attn_width: usize,
    pub can_lr: f64,
    pub can_decay: f64,
    pub can_decay_every: usize,
    pub cmn_lr: f64,
    pub output_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub train: bool,
    pub sweep_axis: SweepAxis,
    pub sweep_snr_db: Vec<f64>,
    pub sweep_b: Vec<usize>,
    pub sweep_irs: Vec<(usize, usize)>,
    pub sweep_patterns: Vec<PatternKind>,
    /// Independent repetitions averaged per sweep point.
    pub sweep_repeats: usize,
    /// Record measured wall time; off keeps result files reproducible.
    pub timing: bool,
    pub mc_draws: usize,
    pub random_designs: usize,
    /// Scale every sample by its input norm before the network sees it
    /// (off by default).
    pub normalize: bool,
}

impl ExperimentConfig {
    /// Defaults for every key; `seed` must still be supplied by the file.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            system: SystemConfig::default(),
            pattern: PatternKind::Proposed,
            b: 8,
            psi: PsiKind::Dft,
            snr_db: vec![10.0],
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            seed,
            epochs_can: 400,
            epochs_cmn: 400,
            batch_size: 64,
            width: 32,
            attn_width: 16,
            can_lr: 2e-4,
            can_decay: 0.6,
            can_decay_every: 150,
            cmn_lr: 1e-4,
            output_dir: PathBuf::from("out"),
            checkpoint: None,
            train: false,
            sweep_axis: SweepAxis::Snr,
            sweep_snr_db: vec![0.0, 10.0, 20.0],
            sweep_b: vec![8, 12, 16],
            sweep_irs: vec![(4, 4)],
            sweep_patterns: PatternKind::ALL.to_vec(),
            sweep_repeats: 1,
            timing: false,
            mc_draws: 10_000,
            random_designs: 1000,
            normalize: false,
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. `seed` is mandatory.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", no + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let seed = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "seed")
            .ok_or_else(|| Error::Config("missing mandatory key `seed`".into()))?;
        let mut cfg = Self::with_seed(parse_num(&seed.0, &seed.1)?);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.system;
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "n_t" => s.n_t = parse_num(key, value)?,
            "irs_rows" => s.irs_rows = parse_num(key, value)?,
            "irs_cols" => s.irs_cols = parse_num(key, value)?,
            "n_subcarriers" => s.n_subcarriers = parse_num(key, value)?,
            "sampling_rate" => s.sampling_rate = parse_num(key, value)?,
            "carrier_freq" => s.carrier_freq = parse_num(key, value)?,
            "l_bs_irs" => s.l_bs_irs = parse_num(key, value)?,
            "l_mu_irs" => s.l_mu_irs = parse_num(key, value)?,
            "noise_variance" => s.noise_variance = parse_num(key, value)?,
            "pilot_power" => s.pilot_power = parse_num(key, value)?,
            "r_tau" => s.r_tau = parse_num(key, value)?,
            "bs_irs_irs_azimuth" => s.bs_irs_angles.irs_azimuth = parse_angle(key, value)?,
            "bs_irs_irs_elevation" => s.bs_irs_angles.irs_elevation = parse_angle(key, value)?,
            "bs_irs_bs_azimuth" => s.bs_irs_angles.bs_azimuth = parse_angle(key, value)?,
            "mu_irs_irs_azimuth" => s.mu_irs_angles.irs_azimuth = parse_angle(key, value)?,
            "mu_irs_irs_elevation" => s.mu_irs_angles.irs_elevation = parse_angle(key, value)?,
            "mu_irs_bs_azimuth" => s.mu_irs_angles.bs_azimuth = parse_angle(key, value)?,
            "pattern" => self.pattern = value.parse()?,
            "b" => self.b = parse_num(key, value)?,
            "psi" => self.psi = value.parse()?,
            "snr_db" => self.snr_db = parse_list(key, value)?,
            "n_train" => self.n_train = parse_num(key, value)?,
            "n_val" => self.n_val = parse_num(key, value)?,
            "n_test" => self.n_test = parse_num(key, value)?,
            "epochs_can" => self.epochs_can = parse_num(key, value)?,
            "epochs_cmn" => self.epochs_cmn = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "width" => self.width = parse_num(key, value)?,
            "attn_width" => self.attn_width = parse_num(key, value)?,
            "can_lr" => self.can_lr = parse_num(key, value)?,
            "can_decay" => self.can_decay = parse_num(key, value)?,
            "can_decay_every" => self.can_decay_every = parse_num(key, value)?,
            "cmn_lr" => self.cmn_lr = parse_num(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = (!value.is_empty()).then(|| PathBuf::from(value)),
            "train" => self.train = parse_bool(key, value)?,
            "sweep_axis" => self.sweep_axis = value.parse()?,
            "sweep_snr_db" => self.sweep_snr_db = parse_list(key, value)?,
            "sweep_b" => self.sweep_b = parse_list(key, value)?,
            "sweep_irs" => {
                self.sweep_irs = split_list(value)
                    .map(|item| {
                        let (r, c) = item
                            .split_once('x')
                            .ok_or_else(|| Error::Config(format!("sweep_irs entry {item:?} is not RxC")))?;
                        Ok((parse_num(key, r)?, parse_num(key, c)?))
                    })
                    .collect::<Result<_>>()?
            }
            "sweep_patterns" => self.sweep_patterns = split_list(value).map(str::parse).collect::<Result<_>>()?,
            "sweep_repeats" => self.sweep_repeats = parse_num(key, value)?,
            "timing" => self.timing = parse_bool(key, value)?,
            "mc_draws" => self.mc_draws = parse_num(key, value)?,
            "random_designs" => self.random_designs = parse_num(key, value)?,
            "normalize" => self.normalize = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` strings in order, then re-validates.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        let m = self.system.m();
        if self.b == 0 || self.b > m {
            return Err(Error::Config(format!("b = {} must be in 1..={m}", self.b)));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|v| v.is_nan()) {
            return Err(Error::Config("snr_db must list at least one SNR".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train, n_val and n_test must be positive".into()));
        }
        if self.batch_size == 0 || self.sweep_repeats == 0 {
            return Err(Error::Config("batch_size and sweep_repeats must be positive".into()));
        }
        if self.mc_draws < 2 || self.random_designs == 0 {
            return Err(Error::Config(
                "mc_draws must be at least 2 and random_designs positive".into(),
            ));
        }
        if self.sweep_snr_db.is_empty()
            || self.sweep_b.is_empty()
            || self.sweep_irs.is_empty()
            || self.sweep_patterns.is_empty()
        {
            return Err(Error::Config("sweep value lists must be non-empty".into()));
        }
        if let PsiKind::Quantized(bits) = self.psi {
            if !(1..=30).contains(&bits) {
                return Err(Error::Config(format!("quantizer bits must be in 1..=30, got {bits}")));
            }
        }
        if self.psi == PsiKind::Hadamard && !self.b.is_power_of_two() {
            return Err(Error::Config(format!(
                "hadamard design needs b to be a power of two, got {}",
                self.b
            )));
        }
        self.net_config().validate()?;
        crate::tensor::LrSchedule::stepped(self.can_lr, self.can_decay, self.can_decay_every)
            .and_then(|_| crate::tensor::LrSchedule::constant(self.cmn_lr))
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn net_config(&self) -> crate::network::NetConfig {
        crate::network::NetConfig {
            width: self.width,
            attn_width: self.attn_width,
            ..Default::default()
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {value:?}"))),
    }
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    split_list(value).map(|v| parse_num(key, v)).collect()
}

/// `mean, spread` in radians.
fn parse_angle(key: &str, value: &str) -> Result<AngleDist> {
    let v: Vec<f64> = parse_list(key, value)?;
    match v[..] {
        [mean, spread] if spread >= 0.0 => Ok(AngleDist { mean, spread }),
        _ => Err(Error::Config(format!(
            "{key}: expected `mean, spread` in radians, got {value:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_lists_and_overrides() {
        let text = "# toy\nseed = 7\nb = 12 # pilots\nsnr_db = 0, 10,20\npattern = column\npsi = quantized:3\n\
                    sweep_irs = 4x4, 4x8\nmu_irs_irs_azimuth = 0.1, 0.2\n";
        let mut cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.b, 12);
        assert_eq!(cfg.snr_db, vec![0.0, 10.0, 20.0]);
        assert_eq!(cfg.pattern, PatternKind::Column);
        assert_eq!(cfg.psi, PsiKind::Quantized(3));
        assert_eq!(cfg.sweep_irs, vec![(4, 4), (4, 8)]);
        assert_eq!(
            cfg.system.mu_irs_angles.irs_azimuth,
            AngleDist { mean: 0.1, spread: 0.2 }
        );
        cfg.apply_overrides(&["b=16".into(), "timing = true".into()]).unwrap();
        assert_eq!(cfg.b, 16);
        assert!(cfg.timing);
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(ExperimentConfig::parse("b = 8\n"), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_bad_values() {
        for bad in [
            "seed = 1\nunknown = 3\n",
            "seed = 1\nb = 17\n",
            "seed = 1\nb = x\n",
            "seed = 1\npattern = diagonal\n",
            "seed = 1\npsi = hadamard\nb = 12\n",
            "seed = 1\nno equals sign\n",
            "seed = 1\nsnr_db =\n",
        ] {
            assert!(ExperimentConfig::parse(bad).is_err(), "{bad}");
        }
        let mut cfg = ExperimentConfig::parse("seed = 1\n").unwrap();
        assert!(cfg.apply_overrides(&["n_train=0".into()]).is_err());
    }
}
