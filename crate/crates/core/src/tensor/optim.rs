use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam moments and hyperparameters for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Result<Self> {
        Self::with_betas(learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(beta1) || !in_unit(beta2) || epsilon <= 0.0 || learning_rate <= 0.0 {
            return Err(Error::Precondition(format!(
                "adam needs beta1, beta2 in (0,1), epsilon > 0 and lr > 0 \
                 (got {beta1}, {beta2}, {epsilon}, {learning_rate})"
            )));
        }
        Ok(Self {
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step_count: 0,
            beta1,
            beta2,
            epsilon,
            learning_rate,
        })
    }

    /// One bias-corrected Adam update over raw parameter/gradient slices.
    ///
    /// Every gradient is checked before any parameter moves, so a non-finite
    /// gradient leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], names: &[&str]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} parameter buffers but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Dimension(format!(
                    "parameter {} has {} values but gradient has {}",
                    names.get(i).copied().unwrap_or("?"),
                    p.len(),
                    g.len()
                )));
            }
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    name: names.get(i).copied().unwrap_or("?").to_string(),
                    index,
                    value: g[index],
                });
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
        } else if self.first_moment.len() != params.len()
            || self
                .first_moment
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::Dimension("adam moments do not match parameter set".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[k];
            let v = &mut self.second_moment[k];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }

    /// Updates every optimizable parameter of `store` from its accumulated
    /// gradient (missing gradients count as zero). Frozen parameters and
    /// buffers are never touched.
    pub fn step_store(&mut self, store: &mut ParamStore) -> Result<()> {
        let (names, grads): (Vec<String>, Vec<Vec<f64>>) = store
            .iter()
            .filter(|(_, p)| p.is_optimized())
            .map(|(_, p)| {
                let g = p
                    .value
                    .grad()
                    .map_or_else(|| vec![0.0; p.value.numel()], <[f64]>::to_vec);
                (p.name.clone(), g)
            })
            .unzip();
        let mut params: Vec<&mut [f64]> = store
            .iter_mut()
            .filter(|p| p.is_optimized())
            .map(|p| p.value.data_mut())
            .collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        self.step(&mut params, &grad_refs, &name_refs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleMode {
    Stepped,
    Constant,
}

/// Piecewise-constant learning-rate decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial_rate: f64,
    pub decay_factor: f64,
    pub decay_interval_epochs: usize,
    pub mode: ScheduleMode,
}

impl LrSchedule {
    pub fn stepped(initial_rate: f64, decay_factor: f64, decay_interval_epochs: usize) -> Result<Self> {
        let s = Self {
            initial_rate,
            decay_factor,
            decay_interval_epochs,
            mode: ScheduleMode::Stepped,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(rate: f64) -> Result<Self> {
        let s = Self {
            initial_rate: rate,
            decay_factor: 1.0,
            decay_interval_epochs: 1,
            mode: ScheduleMode::Constant,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_rate <= 0.0
            || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0)
            || self.decay_interval_epochs == 0
        {
            return Err(Error::Precondition(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }

    /// Rate used during zero-based `epoch`.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        match self.mode {
            ScheduleMode::Constant => self.initial_rate,
            ScheduleMode::Stepped => {
                let drops = (epoch / self.decay_interval_epochs) as i32;
                self.initial_rate * self.decay_factor.powi(drops)
            }
        }
    }
}
