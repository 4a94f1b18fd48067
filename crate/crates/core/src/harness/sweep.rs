//! Parameter sweeps producing one [`ResultRow`] per method and point.

use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::{ExperimentConfig, SweepAxis};
use super::dataset::{build_dataset, collect_samples, design, split_realizations, to_dataset};
use super::{evaluate_timed, train_model};
use crate::error::{Error, Result};
use crate::network::{MbaModel, Stage};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    AugLs,
    Can,
    Mba,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::AugLs, Method::Can, Method::Mba];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::AugLs => "aug_ls",
            Method::Can => "can",
            Method::Mba => "mba",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    /// Method name, suffixed with `@<point>` on the pattern and IRS-size
    /// axes (e.g. `mba@column`, `can@4x8`).
    pub method: String,
    pub b: usize,
    pub snr_db: f64,
    pub nmse: f64,
    pub wall_time_ms: f64,
    pub flop_estimate: f64,
}

/// One sweep point: the config it runs with, its label suffix and, on the
/// SNR axis, the evaluation SNR.
struct Point {
    config: ExperimentConfig,
    label: Option<String>,
}

fn points(config: &ExperimentConfig) -> Vec<Point> {
    let with = |f: &dyn Fn(&mut ExperimentConfig), label: Option<String>| {
        let mut c = config.clone();
        f(&mut c);
        Point { config: c, label }
    };
    match config.sweep_axis {
        SweepAxis::Snr => vec![with(&|c| c.snr_db = config.sweep_snr_db.clone(), None)],
        SweepAxis::Pilots => config.sweep_b.iter().map(|&b| with(&|c| c.b = b, None)).collect(),
        SweepAxis::IrsSize => config
            .sweep_irs
            .iter()
            .map(|&(r, cols)| {
                with(
                    &|c| {
                        c.system.irs_rows = r;
                        c.system.irs_cols = cols;
                    },
                    Some(format!("{r}x{cols}")),
                )
            })
            .collect(),
        SweepAxis::Pattern => config
            .sweep_patterns
            .iter()
            .map(|&p| with(&|c| c.pattern = p, Some(p.to_string())))
            .collect(),
    }
}

/// Checkpoint of sweep point `index`, repeat `repeat`: on the SNR axis with a
/// single repeat the configured path itself, otherwise a file inside it.
fn checkpoint_path(config: &ExperimentConfig, point: &Point, repeat: usize) -> Option<PathBuf> {
    let base = config.checkpoint.as_ref()?;
    if config.sweep_axis == SweepAxis::Snr && config.sweep_repeats == 1 {
        return Some(base.clone());
    }
    let label = point.label.clone().unwrap_or_else(|| format!("b{}", point.config.b));
    Some(base.join(format!("{label}_r{repeat}.irsw")))
}

/// Trains (if `train`) or loads the model for one point.
fn obtain_model(config: &ExperimentConfig, point: &Point, repeat: usize) -> Result<MbaModel> {
    let path = checkpoint_path(config, point, repeat);
    let c = &point.config;
    if config.train {
        let splits = build_dataset(c)?;
        let (model, _) = train_model(c, &splits.train, &splits.val, 0)?;
        if let Some(p) = &path {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
            model.save(p)?;
        }
        return Ok(model);
    }
    let p =
        path.ok_or_else(|| Error::Config("sweep needs a trained model: set `checkpoint` or pass --train".into()))?;
    if !p.exists() {
        return Err(Error::Config(format!(
            "checkpoint {} does not exist; pass --train to train it",
            p.display()
        )));
    }
    let mut model = MbaModel::new(c.net_config(), 0)?;
    model.load(&p)?;
    if !model.cmn_trained() {
        return Err(Error::Config(format!(
            "checkpoint {} is not fully trained",
            p.display()
        )));
    }
    Ok(model)
}

/// Runs the configured sweep.
///
/// The SNR axis trains one model on realizations cycling through
/// `sweep_snr_db` and scores it on the same test channels at every SNR.
/// The other axes train a model per point. Repeats shift the seed and are
/// averaged. With `timing = false` wall times are written as 0.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let mut rows = Vec::new();
    for point in points(config) {
        point.config.validate()?;
        let evals: Vec<f64> = match config.sweep_axis {
            SweepAxis::Snr => config.sweep_snr_db.clone(),
            _ => vec![point.config.snr_db[0]],
        };
        // [eval][method] -> (nmse sum, time sum)
        let mut acc = vec![[(0.0, 0.0); 3]; evals.len()];
        let mut flops = [0.0; 3];
        for repeat in 0..config.sweep_repeats {
            let mut rc = point.config.clone();
            rc.seed = config.seed.wrapping_add(repeat as u64);
            let shifted = Point {
                config: rc,
                label: point.label.clone(),
            };
            let model = obtain_model(config, &shifted, repeat)?;
            let c = &shifted.config;
            let (pattern, base) = design(c)?;
            let test_ids = &split_realizations(c)[2];
            let s = &c.system;
            flops = [
                (s.n_subcarriers * s.n_t * c.b * c.b) as f64,
                model.stage_flop_estimate(Stage::Can, s.n_t, s.m(), s.n_subcarriers),
                model.flop_estimate(s.n_t, s.m(), s.n_subcarriers),
            ];
            for (slot, &snr) in acc.iter_mut().zip(&evals) {
                let start = Instant::now();
                let samples = collect_samples(c, &pattern, &base, test_ids, c.n_test, Some(snr))?;
                let ls_ms = start.elapsed().as_secs_f64() * 1e3;
                let test = to_dataset(&samples)?;
                let (report, [can_ms, mba_ms]) = evaluate_timed(c, &model, &test)?;
                let nmse = [report.nmse_ls, report.nmse_can, report.nmse_cmn];
                for (i, t) in [ls_ms, can_ms, mba_ms].into_iter().enumerate() {
                    slot[i].0 += nmse[i];
                    slot[i].1 += t;
                }
            }
        }
        let reps = config.sweep_repeats as f64;
        for (slot, &snr) in acc.iter().zip(&evals) {
            for (i, method) in Method::ALL.iter().enumerate() {
                rows.push(ResultRow {
                    method: match &point.label {
                        Some(l) => format!("{}@{l}", method.as_str()),
                        None => method.as_str().to_string(),
                    },
                    b: point.config.b,
                    snr_db: snr,
                    nmse: slot[i].0 / reps,
                    wall_time_ms: if config.timing { slot[i].1 / reps } else { 0.0 },
                    flop_estimate: flops[i],
                });
            }
        }
    }
    Ok(rows)
}

pub const RESULT_HEADER: &str = "method,b,snr_db,nmse,wall_time_ms,flop_estimate";

/// Shortest exact representation with at least 9 significant digits.
fn fmt_real(v: f64) -> String {
    let short = format!("{v:e}");
    let digits = short
        .split('e')
        .next()
        .unwrap_or("")
        .chars()
        .filter(char::is_ascii_digit)
        .count();
    if digits >= 9 || !v.is_finite() {
        short
    } else {
        format!("{v:.8e}")
    }
}

/// Writes `rows` as CSV with [`RESULT_HEADER`]. Reals are written in
/// exponent notation with at least 9 significant digits and read back
/// bit-exactly by [`read_results`].
pub fn export_results(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(RESULT_HEADER);
    out.push('\n');
    for r in rows {
        if r.method.contains([',', '\n']) {
            return Err(Error::Format(format!(
                "method tag {:?} cannot be written to CSV",
                r.method
            )));
        }
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method,
            r.b,
            fmt_real(r.snr_db),
            fmt_real(r.nmse),
            fmt_real(r.wall_time_ms),
            fmt_real(r.flop_estimate)
        ));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(RESULT_HEADER) {
        return Err(Error::Format(format!("{} lacks the result header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("line {}: malformed row {line:?}", i + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            let real = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(ResultRow {
                method: f[0].to_string(),
                b: f[1].parse().map_err(|_| bad())?,
                snr_db: real(f[2])?,
                nmse: real(f[3])?,
                wall_time_ms: real(f[4])?,
                flop_estimate: real(f[5])?,
            })
        })
        .collect()
}
