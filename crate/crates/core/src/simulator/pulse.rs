use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SimError;

/// FWHM = 2·sqrt(2 ln 2)·σ.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Emitted pulse shape sampled on the time-bin grid, normalized to unit sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseWaveform {
    samples: Vec<f64>,
    bin_size_ps: f64,
}

impl PulseWaveform {
    /// Normalizes non-negative `samples` to sum 1.
    pub fn from_samples(samples: Vec<f64>, bin_size_ps: f64) -> Result<Self, SimError> {
        if !(bin_size_ps > 0.0) {
            return Err(SimError::InvalidPulse(format!("bin size {bin_size_ps} ps must be positive")));
        }
        if samples.is_empty() {
            return Err(SimError::InvalidPulse("no samples".into()));
        }
        if let Some((i, v)) = samples.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(SimError::InvalidPulse(format!("sample {i} = {v} is not a finite non-negative value")));
        }
        let total: f64 = samples.iter().sum();
        if total <= 0.0 {
            return Err(SimError::InvalidPulse("samples sum to zero".into()));
        }
        let samples = samples.into_iter().map(|v| v / total).collect();
        Ok(Self { samples, bin_size_ps })
    }

    /// Discretized Gaussian with the given FWHM centered on the support midpoint.
    ///
    /// `support_bins` must be odd and wide enough to hold 99.9% of the mass.
    pub fn gaussian(fwhm_ps: f64, delta_ps: f64, support_bins: usize) -> Result<Self, SimError> {
        if !(fwhm_ps > 0.0) || !(delta_ps > 0.0) {
            return Err(SimError::InvalidPulse(format!(
                "fwhm {fwhm_ps} ps and bin size {delta_ps} ps must be positive"
            )));
        }
        if support_bins.is_multiple_of(2) {
            return Err(SimError::InvalidPulse(format!("support of {support_bins} bins must be odd")));
        }
        let sigma = gaussian_sigma_bins(fwhm_ps, delta_ps);
        let half = (support_bins / 2) as f64;
        // Mass of the continuous Gaussian falling inside the sampled support.
        let captured = libm::erf((half + 0.5) / (sigma * std::f64::consts::SQRT_2));
        if captured < 0.999 {
            return Err(SimError::InvalidPulse(format!(
                "support of {support_bins} bins captures {:.4}% of a σ = {sigma:.3}-bin pulse, need 99.9%",
                captured * 100.0
            )));
        }
        let samples = (0..support_bins)
            .map(|k| {
                let x = k as f64 - half;
                (-0.5 * (x / sigma).powi(2)).exp()
            })
            .collect();
        Self::from_samples(samples, delta_ps)
    }

    /// Plain text, one non-negative sample per line; blank lines and `#` comments skipped.
    pub fn parse(text: &str, bin_size_ps: f64) -> Result<Self, SimError> {
        Self::from_samples(parse_profile(text)?, bin_size_ps)
    }

    pub fn load(path: &Path, bin_size_ps: f64) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text, bin_size_ps)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn bin_size_ps(&self) -> f64 {
        self.bin_size_ps
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample index used as the arrival reference: the first maximum.
    pub fn peak_index(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.samples.iter().enumerate() {
            if *v > self.samples[best] {
                best = i;
            }
        }
        best
    }

    /// Linear interpolation at fractional sample position `x`; zero outside.
    pub fn value_at(&self, x: f64) -> f64 {
        let at = |k: isize| {
            if k < 0 || k as usize >= self.samples.len() {
                0.0
            } else {
                self.samples[k as usize]
            }
        };
        let k = x.floor();
        let w = x - k;
        let k = k as isize;
        (1.0 - w) * at(k) + w * at(k + 1)
    }
}

/// σ of the Gaussian pulse in bins.
pub fn gaussian_sigma_bins(fwhm_ps: f64, delta_ps: f64) -> f64 {
    fwhm_ps / delta_ps / FWHM_PER_SIGMA
}

/// Smallest odd support holding ±4σ.
pub fn default_support_bins(fwhm_ps: f64, delta_ps: f64) -> usize {
    2 * (4.0 * gaussian_sigma_bins(fwhm_ps, delta_ps)).ceil() as usize + 1
}

pub(crate) fn parse_profile(text: &str) -> Result<Vec<f64>, SimError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: f64 = line.parse().map_err(|e| SimError::InvalidPulse(format!("line {}: {line:?}: {e}", n + 1)))?;
        out.push(v);
    }
    Ok(out)
}
