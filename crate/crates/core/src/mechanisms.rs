//! Private selection of the keyword count (exponential mechanism via Gumbel
//! noise) and the propose-test-release check that gates exact top-k release.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::histogram::{gap_profile, top_k_tokens, GapProfile, NormalizedToken, TokenHistogram};

/// Global sensitivity of every histogram gap `d_k` under single-response replacement.
pub const GAP_SENSITIVITY: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum MechanismError {
    #[error("probability {0} outside (0, 1)")]
    ProbabilityDomain(f64),
    #[error("standard deviation must be positive, got {0}")]
    NonPositiveStd(f64),
    #[error("invalid k range [{min}, {max}]")]
    InvalidKRange { min: usize, max: usize },
    #[error("invalid PTR parameters: sigma={sigma}, delta={delta}")]
    InvalidPtr { sigma: f64, delta: f64 },
    #[error("invalid exponential mechanism parameters: epsilon={epsilon}, scale={scale}")]
    InvalidEm { epsilon: f64, scale: f64 },
    #[error("k must be at least 1")]
    ZeroK,
}

/// Seeded randomness for the mechanisms. Each caller owns its own instance.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    seed: u64,
    rng: ChaCha20Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// An independent stream for `(master, index)`, e.g. one per query.
    pub fn derive(master: u64, index: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(master);
        rng.set_stream(index);
        let seed = rng.gen();
        Self::new(seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn standard_gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Standard Gumbel draw, `-ln(-ln U)` with `U` uniform on (0, 1).
    pub fn standard_gumbel(&mut self) -> f64 {
        let u: f64 = loop {
            let u: f64 = self.rng.gen();
            if u > 0.0 {
                break u;
            }
        };
        -(-u.ln()).ln()
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen()
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }
}

/// Inverse CDF of `N(mean, std^2)`.
///
/// Uses Wichura's AS241 (PPND16) rational approximations, accurate to about
/// 1e-16 relative in the standard-normal quantile.
pub fn gaussian_quantile(p: f64, mean: f64, std: f64) -> Result<f64, MechanismError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(MechanismError::ProbabilityDomain(p));
    }
    if !(std > 0.0) || !std.is_finite() {
        return Err(MechanismError::NonPositiveStd(std));
    }
    Ok(mean + std * standard_normal_quantile(p))
}

// Coefficients are quoted at the published precision.
#[allow(clippy::excessive_precision)]
fn standard_normal_quantile(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2509.0809287301226727 * r + 33430.575583588128105) * r
            + 67265.770927008700853)
            * r
            + 45921.953931549871457)
            * r
            + 13731.693765509461125)
            * r
            + 1971.5909503065514427)
            * r
            + 133.14166789178437745)
            * r
            + 3.387132872796366608;
        let den = ((((((5226.495278852545925 * r + 28729.085735721942674) * r
            + 39307.89580009271061)
            * r
            + 21213.794301586595867)
            * r
            + 5394.1960214247511077)
            * r
            + 687.1870074920579083)
            * r
            + 42.313330701600911252)
            * r
            + 1.0;
        return q * num / den;
    }

    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let z = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r
            + 0.24178072517745061177)
            * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734;
        let den = ((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r
            + 0.0151986665636164571966)
            * r
            + 0.14810397642748007459)
            * r
            + 0.68976733498510000455)
            * r
            + 1.6763848301838038494)
            * r
            + 2.05319162663775882187)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
            + 0.0012426609473880784386)
            * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772;
        let den = ((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
            + 1.8463183175100546818e-5)
            * r
            + 7.868691311456132591e-4)
            * r
            + 0.0148753612908506148525)
            * r
            + 0.13692988092273580531)
            * r
            + 0.59983220655588793769)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -z
    } else {
        z
    }
}

/// Admissible keyword counts: the regularizer is 0 on `[k_min, k_max]` and
/// minus infinity elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KRange {
    k_min: usize,
    k_max: usize,
}

impl KRange {
    pub fn new(k_min: usize, k_max: usize) -> Result<Self, MechanismError> {
        if k_min == 0 || k_max < k_min {
            return Err(MechanismError::InvalidKRange {
                min: k_min,
                max: k_max,
            });
        }
        Ok(Self { k_min, k_max })
    }

    pub fn k_min(&self) -> usize {
        self.k_min
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn contains(&self, k: usize) -> bool {
        (self.k_min..=self.k_max).contains(&k)
    }

    /// The admissible `k` values after clamping to `1..=defined_gaps`.
    pub fn clamped(&self, defined_gaps: usize) -> std::ops::RangeInclusive<usize> {
        self.k_min..=self.k_max.min(defined_gaps)
    }
}

impl Default for KRange {
    fn default() -> Self {
        Self {
            k_min: 15,
            k_max: 30,
        }
    }
}

/// Exponential-mechanism parameters for choosing `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmParams {
    epsilon_em: f64,
    sensitivity: f64,
    gumbel_scale: f64,
}

impl EmParams {
    /// Gumbel scale `2 * sensitivity / epsilon_em`, the scale at which
    /// Gumbel-max sampling is exactly the `epsilon_em`-DP exponential mechanism.
    pub fn new(epsilon_em: f64) -> Result<Self, MechanismError> {
        if !(epsilon_em > 0.0) {
            return Err(MechanismError::InvalidEm {
                epsilon: epsilon_em,
                scale: f64::NAN,
            });
        }
        Ok(Self {
            epsilon_em,
            sensitivity: GAP_SENSITIVITY,
            gumbel_scale: 2.0 * GAP_SENSITIVITY / epsilon_em,
        })
    }

    /// Overrides the Gumbel scale. A scale of zero gives the noiseless argmax.
    pub fn with_gumbel_scale(mut self, scale: f64) -> Result<Self, MechanismError> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(MechanismError::InvalidEm {
                epsilon: self.epsilon_em,
                scale,
            });
        }
        self.gumbel_scale = scale;
        Ok(self)
    }

    pub fn epsilon_em(&self) -> f64 {
        self.epsilon_em
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn gumbel_scale(&self) -> f64 {
        self.gumbel_scale
    }
}

/// Gaussian scale and failure probability for the stability test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PtrParams {
    sigma: f64,
    delta: f64,
}

impl PtrParams {
    pub fn new(sigma: f64, delta: f64) -> Result<Self, MechanismError> {
        if !(sigma > 0.0) || !sigma.is_finite() || !(delta > 0.0 && delta < 1.0) {
            return Err(MechanismError::InvalidPtr { sigma, delta });
        }
        Ok(Self { sigma, delta })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Standard deviation of the test noise, `2 * sigma`.
    pub fn noise_std(&self) -> f64 {
        2.0 * self.sigma
    }

    /// The shift `Phi(1 - delta; 0, 2 sigma)` subtracted from the noisy gap.
    pub fn threshold_shift(&self) -> f64 {
        gaussian_quantile(1.0 - self.delta, 0.0, self.noise_std())
            .expect("validated PTR parameters")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum KeywordRelease {
    Released {
        tokens: Vec<NormalizedToken>,
        k: usize,
    },
    Refused,
}

impl KeywordRelease {
    pub fn is_released(&self) -> bool {
        matches!(self, Self::Released { .. })
    }

    pub fn tokens(&self) -> &[NormalizedToken] {
        match self {
            Self::Released { tokens, .. } => tokens,
            Self::Refused => &[],
        }
    }
}

/// Selects `k` by Gumbel-max over the admissible gaps. Returns `None` when the
/// clamped range is empty.
pub fn find_best_k(
    profile: &GapProfile,
    range: KRange,
    em: &EmParams,
    noise: &mut NoiseSource,
) -> Option<usize> {
    let admissible = range.clamped(profile.len());
    let draws: Vec<f64> = admissible
        .clone()
        .map(|_| noise.standard_gumbel())
        .collect();
    find_best_k_with_noise(profile, range, em, &draws)
}

/// [`find_best_k`] with explicit standard-Gumbel draws, one per admissible `k`
/// in ascending order. Ties go to the smaller `k`.
pub fn find_best_k_with_noise(
    profile: &GapProfile,
    range: KRange,
    em: &EmParams,
    standard_gumbels: &[f64],
) -> Option<usize> {
    let admissible = range.clamped(profile.len());
    let scale = em.gumbel_scale();
    let mut best: Option<(usize, f64)> = None;
    for (k, g) in admissible.zip(standard_gumbels.iter().copied()) {
        let noisy = f64::from(profile.gap(k)) + scale * g;
        if best.is_none_or(|(_, b)| noisy > b) {
            best = Some((k, noisy));
        }
    }
    best.map(|(k, _)| k)
}

/// Releases the exact top-`k` tokens if the noisy gap test passes.
pub fn top_k_with_ptr(
    h: &TokenHistogram,
    k: usize,
    ptr: &PtrParams,
    noise: &mut NoiseSource,
) -> Result<KeywordRelease, MechanismError> {
    let z = noise.standard_gaussian();
    top_k_with_ptr_with_noise(h, k, ptr, ptr.noise_std() * z)
}

/// [`top_k_with_ptr`] with an explicit draw from `N(0, 4 sigma^2)`.
pub fn top_k_with_ptr_with_noise(
    h: &TokenHistogram,
    k: usize,
    ptr: &PtrParams,
    gaussian_draw: f64,
) -> Result<KeywordRelease, MechanismError> {
    if k == 0 {
        return Err(MechanismError::ZeroK);
    }
    let gap = gap_profile(h).gap(k);
    if noisy_gap(gap, ptr, gaussian_draw) > 2.0 {
        Ok(KeywordRelease::Released {
            tokens: top_k_tokens(h, k),
            k,
        })
    } else {
        Ok(KeywordRelease::Refused)
    }
}

/// `max(2, d_k) + G - Phi(1 - delta; 0, 2 sigma)`.
pub fn noisy_gap(gap: u32, ptr: &PtrParams, gaussian_draw: f64) -> f64 {
    f64::from(gap).max(2.0) + gaussian_draw - ptr.threshold_shift()
}
