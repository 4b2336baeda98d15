//! Forward-process noise schedule and its ancestral-sampling coefficients.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("schedule must have at least 2 steps, got {0}")]
    TooShort(usize),
    #[error("gamma table violates its contract: {0}")]
    BadGamma(String),
    #[error("step {t} out of range 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },
}

/// Signal-retention table γ(t) with γ(0) = 1, realized as the cumulative
/// product of a linear-β schedule. The β endpoints (1e-4, 0.02 at 1000
/// steps) are scaled by 1000/T so that shorter desk-scale schedules still
/// decay to γ(T) ≤ 1e-2.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_max: usize,
    betas: Vec<f64>,
    gammas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_max: usize) -> Result<Self, ScheduleError> {
        if t_max < 2 {
            return Err(ScheduleError::TooShort(t_max));
        }
        let scale = 1000.0 / t_max as f64;
        let beta_start = (1e-4 * scale).min(0.5);
        let beta_end = (0.02 * scale).min(0.999);
        let mut betas = Vec::with_capacity(t_max);
        for i in 0..t_max {
            let f = i as f64 / (t_max - 1) as f64;
            betas.push(beta_start + f * (beta_end - beta_start));
        }
        let mut gammas = Vec::with_capacity(t_max + 1);
        gammas.push(1.0);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            gammas.push(acc);
        }
        let s = NoiseSchedule { t_max, betas, gammas };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<(), ScheduleError> {
        for t in 1..=self.t_max {
            if !(self.gammas[t] > 0.0 && self.gammas[t] < self.gammas[t - 1]) {
                return Err(ScheduleError::BadGamma(format!("not strictly decreasing at t = {t}")));
            }
        }
        if self.gammas[1] < 1.0 - 1e-4 * (1000.0 / self.t_max as f64) * 1.5 {
            return Err(ScheduleError::BadGamma(format!("gamma(1) = {} too small", self.gammas[1])));
        }
        if self.gammas[self.t_max] > 1e-2 {
            return Err(ScheduleError::BadGamma(format!("gamma(T) = {} > 1e-2", self.gammas[self.t_max])));
        }
        Ok(())
    }

    /// γ(t) for t in 0..=T; γ(0) = 1.
    pub fn gamma(&self, t: usize) -> f64 {
        self.gammas[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// Posterior noise scale σ(t) of the ancestral reverse step.
    pub fn sigma(&self, t: usize) -> f64 {
        if t <= 1 {
            return 0.0;
        }
        let beta_tilde = (1.0 - self.gamma(t - 1)) / (1.0 - self.gamma(t)) * self.beta(t);
        beta_tilde.sqrt()
    }

    pub fn check_step(&self, t: usize) -> Result<(), ScheduleError> {
        if t == 0 || t > self.t_max {
            return Err(ScheduleError::StepOutOfRange { t, t_max: self.t_max });
        }
        Ok(())
    }
}

/// Forward diffusion draw: `√γ(t)·x0 + √(1−γ(t))·ε` elementwise.
pub fn q_sample(x0: &[f64], eps: &[f64], gamma: f64) -> Vec<f64> {
    assert_eq!(x0.len(), eps.len());
    let (sg, sn) = (gamma.sqrt(), (1.0 - gamma).sqrt());
    x0.iter().zip(eps).map(|(x, e)| sg * x + sn * e).collect()
}

/// One ancestral reverse step from x_t to x_{t-1} given predicted noise.
pub fn reverse_step(x_t: &[f64], eps_pred: &[f64], schedule: &NoiseSchedule, t: usize, noise: &[f64]) -> Vec<f64> {
    let gamma = schedule.gamma(t);
    let alpha = schedule.alpha(t);
    let beta = schedule.beta(t);
    let sigma = schedule.sigma(t);
    let c = beta / (1.0 - gamma).sqrt();
    x_t.iter()
        .zip(eps_pred)
        .zip(noise)
        .map(|((x, e), z)| (x - c * e) / alpha.sqrt() + sigma * z)
        .collect()
}
