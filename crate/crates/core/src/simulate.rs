//! Monte Carlo estimate of how often the stability test releases keywords,
//! as a function of the privacy budget, on synthetic histograms.

use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::{calibrate, AccountantError, DpGuarantee};
use crate::histogram::{gap_profile, NormalizedToken, TokenHistogram};
use crate::mechanisms::{find_best_k, top_k_with_ptr, EmParams, KRange, NoiseSource, PtrParams};

pub const MIN_TRIALS: usize = 1000;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("at least {MIN_TRIALS} trials required, got {0}")]
    TooFewTrials(usize),
    #[error("calibration failed for epsilon {epsilon}: {source}")]
    Calibration {
        epsilon: f64,
        source: AccountantError,
    },
    #[error("invalid family: {0}")]
    InvalidFamily(String),
}

/// Synthetic ensembles, described by the per-token counts they induce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SyntheticFamily {
    /// `support` tokens all present in every response: every gap inside the
    /// support is zero.
    Flat {
        ensemble_size: usize,
        support: usize,
    },
    /// `k` tokens present in every response and nothing else: `d_k = N`.
    MaximalGap { ensemble_size: usize, k: usize },
    /// `answers` tokens each appearing in a response with probability
    /// `agreement`, and `distractors` tokens with probability `noise`.
    Agreement {
        ensemble_size: usize,
        answers: usize,
        agreement: f64,
        distractors: usize,
        noise: f64,
    },
}

impl SyntheticFamily {
    pub fn ensemble_size(&self) -> usize {
        match self {
            Self::Flat { ensemble_size, .. }
            | Self::MaximalGap { ensemble_size, .. }
            | Self::Agreement { ensemble_size, .. } => *ensemble_size,
        }
    }

    fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: &str| Err(SimulationError::InvalidFamily(m.to_owned()));
        if self.ensemble_size() == 0 {
            return bad("ensemble_size must be >= 1");
        }
        if let Self::Agreement {
            agreement, noise, ..
        } = self
        {
            if !(0.0..=1.0).contains(agreement) || !(0.0..=1.0).contains(noise) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        Ok(())
    }

    fn token(prefix: &str, i: usize) -> NormalizedToken {
        NormalizedToken::new(&format!("{prefix}{i:04}")).expect("synthetic tokens are valid")
    }

    pub fn sample(&self, noise: &mut NoiseSource) -> TokenHistogram {
        let n = self.ensemble_size();
        let counts: Vec<(NormalizedToken, u32)> = match self {
            Self::Flat { support, .. } => (0..*support)
                .map(|i| (Self::token("flat", i), n as u32))
                .collect(),
            Self::MaximalGap { k, .. } => {
                (0..*k).map(|i| (Self::token("top", i), n as u32)).collect()
            }
            Self::Agreement {
                answers,
                agreement,
                distractors,
                noise: rate,
                ..
            } => {
                let ans = Binomial::new(n as u64, *agreement).expect("validated probability");
                let dis = Binomial::new(n as u64, *rate).expect("validated probability");
                let rng = noise.rng();
                let mut counts = Vec::with_capacity(answers + distractors);
                for i in 0..*answers {
                    counts.push((Self::token("ans", i), ans.sample(rng) as u32));
                }
                for i in 0..*distractors {
                    counts.push((Self::token("dis", i), dis.sample(rng) as u32));
                }
                counts
            }
        };
        TokenHistogram::from_counts(counts, n).expect("counts bounded by ensemble size")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationParams {
    pub epsilons: Vec<f64>,
    pub delta: f64,
    pub em_fraction: f64,
    pub k_range: KRange,
    pub orders: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassRateRow {
    pub epsilon: f64,
    pub sigma: f64,
    pub epsilon_em: f64,
    pub trials: usize,
    pub released: usize,
    pub pass_rate: f64,
    /// Binomial standard error of `pass_rate`.
    pub std_err: f64,
}

/// For each epsilon: calibrate, then run selection and the stability test on
/// `trials` sampled histograms. Trial `t` uses the same noise stream at every
/// epsilon, so rows differ only through the calibrated parameters.
pub fn simulate_ptr_pass_rate(
    family: &SyntheticFamily,
    params: &SimulationParams,
) -> Result<Vec<PassRateRow>, SimulationError> {
    if params.trials < MIN_TRIALS {
        return Err(SimulationError::TooFewTrials(params.trials));
    }
    family.validate()?;
    params
        .epsilons
        .iter()
        .map(|&epsilon| {
            let calib_err = |source| SimulationError::Calibration { epsilon, source };
            let target = DpGuarantee::new(epsilon, params.delta).map_err(calib_err)?;
            let cal = calibrate(target, params.em_fraction, &params.orders).map_err(calib_err)?;
            let em = EmParams::new(cal.epsilon_em).expect("calibrated epsilon_em is positive");
            let ptr = PtrParams::new(cal.sigma, cal.ptr_delta).expect("calibrated PTR parameters");
            let released = (0..params.trials)
                .filter(|&t| {
                    let mut noise = NoiseSource::derive(params.seed, t as u64);
                    let h = family.sample(&mut noise);
                    find_best_k(&gap_profile(&h), params.k_range, &em, &mut noise)
                        .map(|k| {
                            top_k_with_ptr(&h, k, &ptr, &mut noise)
                                .expect("k >= 1")
                                .is_released()
                        })
                        .unwrap_or(false)
                })
                .count();
            let p = released as f64 / params.trials as f64;
            Ok(PassRateRow {
                epsilon,
                sigma: cal.sigma,
                epsilon_em: cal.epsilon_em,
                trials: params.trials,
                released,
                pass_rate: p,
                std_err: (p * (1.0 - p) / params.trials as f64).sqrt(),
            })
        })
        .collect()
}
