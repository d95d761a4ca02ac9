use crate::error::{Error, Result};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 0.0085;
pub const DEFAULT_BETA_END: f64 = 0.0120;

/// How β is interpolated between its endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BetaSpacing {
    /// β linear in t.
    #[default]
    Linear,
    /// √β linear in t.
    ScaledLinear,
}

/// Betas and cumulative products `ᾱ_t = Π_{s≤t} (1 − β_s)`, held in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    spacing: BetaSpacing,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        linear_beta_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn new(spacing: BetaSpacing, steps: usize, beta0: f64, beta_t: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::validation("steps", format!("need at least 2, got {steps}")));
        }
        if !(beta0 > 0.0 && beta0 <= beta_t && beta_t < 1.0) {
            return Err(Error::validation(
                "betas",
                format!("need 0 < beta0 <= betaT < 1, got {beta0}, {beta_t}"),
            ));
        }
        let last = (steps - 1) as f64;
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                let f = i as f64 / last;
                match spacing {
                    BetaSpacing::Linear => beta0 * (1.0 - f) + beta_t * f,
                    BetaSpacing::ScaledLinear => {
                        let s = beta0.sqrt() * (1.0 - f) + beta_t.sqrt() * f;
                        s * s
                    }
                }
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self {
            betas,
            alpha_bars,
            spacing,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn spacing(&self) -> BetaSpacing {
        self.spacing
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or_else(|| {
            Error::Range(format!("timestep {t} outside [0, {})", self.steps()))
        })
    }
}

/// β interpolated linearly from `beta0` to `beta_t`, both endpoints included.
pub fn linear_beta_schedule(steps: usize, beta0: f64, beta_t: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(BetaSpacing::Linear, steps, beta0, beta_t)
}
