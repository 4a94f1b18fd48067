//! Seeded dataset construction: one sample per (realization, subcarrier).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::container;
use crate::channel::realize;
use crate::error::{Error, Result};
use crate::estimator::{estimate_reduced, noise_variance_for_snr};
use crate::linalg::ComplexMatrix;
use crate::network::{pack, Dataset};
use crate::pilot::{make_pattern, ActivationPattern, PhaseMatrix};
use crate::tensor::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sample (realization) `index`: output number `index` of a
/// splitmix64 generator started at `master`.
pub fn sample_seed(master: u64, index: u64) -> u64 {
    mix(master.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// Seeds for everything that is not a sample (shuffles, patterns, init).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Split,
    Pattern,
    Design,
    Init,
    Training,
    Verify,
}

/// Independent seed for `stream`, derived from the master seed.
pub fn stream_seed(master: u64, stream: Stream, index: u64) -> u64 {
    let tag = match stream {
        Stream::Split => 1,
        Stream::Pattern => 2,
        Stream::Design => 3,
        Stream::Init => 4,
        Stream::Training => 5,
        Stream::Verify => 6,
    };
    sample_seed(sample_seed(master, u64::MAX - tag), index)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub realization: u64,
    pub subcarrier: usize,
    pub snr_db: f64,
    pub h_aug: ComplexMatrix,
    pub h_cs: ComplexMatrix,
}

/// Activation pattern and base design implied by a config.
pub fn design(config: &ExperimentConfig) -> Result<(ActivationPattern, PhaseMatrix)> {
    let s = &config.system;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, Stream::Pattern, 0));
    let pattern = make_pattern(config.pattern, s.irs_rows, s.irs_cols, config.b, &mut rng)
        .map_err(|e| Error::Config(e.to_string()))?;
    let base = config
        .psi
        .build(config.b, stream_seed(config.seed, Stream::Design, 0))
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok((pattern, base))
}

/// All `K` samples of realization `index` at `snr_db`.
///
/// The channel is drawn before the noise from the same per-realization
/// stream, so changing the SNR rescales the noise but keeps the channel.
pub fn realization_samples(
    config: &ExperimentConfig,
    pattern: &ActivationPattern,
    base: &PhaseMatrix,
    index: u64,
    snr_db: f64,
) -> Result<Vec<Sample>> {
    let s = &config.system;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, index));
    let channel = realize(s, &mut rng)?;
    let sigma_n2 = noise_variance_for_snr(snr_db, s.pilot_power);
    channel
        .h_cs
        .iter()
        .enumerate()
        .map(|(k, h)| {
            let rec = estimate_reduced(h, base, pattern, sigma_n2, s.pilot_power, k, &mut rng)?;
            Ok(Sample {
                realization: index,
                subcarrier: k,
                snr_db,
                h_aug: rec.h_aug,
                h_cs: rec.h_true,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Realization indices per split, in the order their samples appear.
    pub realizations: [Vec<u64>; 3],
}

/// Realization indices for train/val/test: enough whole realizations to
/// cover each sample count, assigned by a seeded shuffle so that no
/// realization contributes to two splits.
pub fn split_realizations(config: &ExperimentConfig) -> [Vec<u64>; 3] {
    let k = config.system.n_subcarriers;
    let counts = [config.n_train, config.n_val, config.n_test].map(|n| n.div_ceil(k));
    let total: usize = counts.iter().sum();
    let mut order: Vec<u64> = (0..total as u64).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(
        config.seed,
        Stream::Split,
        0,
    )));
    let mut rest = order.as_slice();
    counts.map(|c| {
        let (head, tail) = rest.split_at(c);
        rest = tail;
        head.to_vec()
    })
}

/// Samples of the given realizations, each at `snr_db` if given or else at
/// the config's SNR list cycled by realization index; truncated to `count`.
pub fn collect_samples(
    config: &ExperimentConfig,
    pattern: &ActivationPattern,
    base: &PhaseMatrix,
    realizations: &[u64],
    count: usize,
    snr_db: Option<f64>,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(count);
    for &r in realizations {
        if out.len() >= count {
            break;
        }
        let snr = snr_db.unwrap_or(config.snr_db[r as usize % config.snr_db.len()]);
        out.extend(realization_samples(config, pattern, base, r, snr)?);
    }
    out.truncate(count);
    Ok(out)
}

pub fn to_dataset(samples: &[Sample]) -> Result<Dataset> {
    let inputs: Vec<ComplexMatrix> = samples.iter().map(|s| s.h_aug.clone()).collect();
    let targets: Vec<ComplexMatrix> = samples.iter().map(|s| s.h_cs.clone()).collect();
    Dataset::new(pack(&inputs)?, pack(&targets)?)
}

/// Builds train/val/test sets per the config.
pub fn build_dataset(config: &ExperimentConfig) -> Result<DatasetSplits> {
    config.validate()?;
    let (pattern, base) = design(config)?;
    let realizations = split_realizations(config);
    let counts = [config.n_train, config.n_val, config.n_test];
    let mut sets = Vec::with_capacity(3);
    for (ids, &count) in realizations.iter().zip(&counts) {
        sets.push(to_dataset(&collect_samples(
            config, &pattern, &base, ids, count, None,
        )?)?);
    }
    let test = sets.pop().expect("three splits");
    let val = sets.pop().expect("three splits");
    let train = sets.pop().expect("three splits");
    Ok(DatasetSplits {
        train,
        val,
        test,
        realizations,
    })
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Writes `<split>_inputs.irst` / `<split>_targets.irst` and the pattern.
pub fn write_dataset(splits: &DatasetSplits, pattern: &ActivationPattern, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, set) in SPLIT_NAMES.iter().zip([&splits.train, &splits.val, &splits.test]) {
        container::save(&dir.join(format!("{name}_inputs.irst")), &set.inputs)?;
        container::save(&dir.join(format!("{name}_targets.irst")), &set.targets)?;
    }
    std::fs::write(dir.join("pattern.txt"), pattern.to_text())?;
    Ok(())
}

/// Reads one split written by [`write_dataset`].
pub fn read_split(dir: &Path, name: &str) -> Result<Dataset> {
    let inputs: Tensor = container::load(&dir.join(format!("{name}_inputs.irst")))?;
    let targets = container::load(&dir.join(format!("{name}_targets.irst")))?;
    Dataset::new(inputs, targets)
}
