//! Photon-counting observation model: per-bin Poisson rates from depth, albedo,
//! pulse shape and ambient noise, calibrated to a signal/background photon budget.

mod pulse;
mod scene;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth::{depth_to_bin_position, unambiguous_range_m, BinIndexMap, DepthMap, SPEED_OF_LIGHT};
use crate::numerics::{Scalar, Tensor};

pub use pulse::{default_support_bins, gaussian_sigma_bins, PulseWaveform, FWHM_PER_SIGMA};
pub use scene::{synth_scene, SceneKind, SceneSample};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("invalid pulse waveform: {0}")]
    InvalidPulse(String),
    #[error("depth {depth} m at pixel ({i}, {j}) outside the unambiguous range [0, {max_m}) m")]
    DepthOutOfRange { i: usize, j: usize, depth: f64, max_m: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0}")]
    Io(String),
}

/// Mean signal and background photons per pixel, written `s:m`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sbr {
    pub signal: f64,
    pub noise: f64,
}

impl Sbr {
    pub fn new(signal: f64, noise: f64) -> Self {
        Self { signal, noise }
    }
}

impl std::fmt::Display for Sbr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.signal, self.noise)
    }
}

impl std::str::FromStr for Sbr {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SimError::InvalidConfig(format!("SBR {s:?} is not of the form signal:noise"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let signal = a.trim().parse().map_err(|_| bad())?;
        let noise = b.trim().parse().map_err(|_| bad())?;
        Ok(Self { signal, noise })
    }
}

/// Acquisition parameters of one simulated cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Number of time bins `T`.
    pub bins: usize,
    /// Bin width `Δ` in picoseconds.
    pub delta_ps: f64,
    /// Illuminations per pixel `n_t`.
    pub n_illum: u32,
    /// Detection efficiency `η`.
    pub eta: f64,
    /// Mean signal photons per pixel of mean albedo.
    pub signal_mean: f64,
    /// Mean background photons per pixel.
    pub noise_mean: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(bins: usize, delta_ps: f64, sbr: Sbr, seed: u64) -> Self {
        Self { bins, delta_ps, n_illum: 1, eta: 1.0, signal_mean: sbr.signal, noise_mean: sbr.noise, seed }
    }

    pub fn sbr(&self) -> Sbr {
        Sbr::new(self.signal_mean, self.noise_mean)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: String| Err(SimError::InvalidConfig(m));
        if self.bins == 0 {
            return fail("bins must be at least 1".into());
        }
        if !(self.delta_ps > 0.0 && self.delta_ps.is_finite()) {
            return fail(format!("bin width {} ps must be positive", self.delta_ps));
        }
        if self.n_illum == 0 {
            return fail("n_illum must be at least 1".into());
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return fail(format!("detection efficiency {} outside (0, 1]", self.eta));
        }
        if !(self.signal_mean > 0.0 && self.signal_mean.is_finite()) {
            return fail(format!("signal mean {} must be positive", self.signal_mean));
        }
        if !(self.noise_mean >= 0.0 && self.noise_mean.is_finite()) {
            return fail(format!("noise mean {} must be non-negative", self.noise_mean));
        }
        Ok(())
    }

    pub fn range_m(&self) -> f64 {
        unambiguous_range_m(self.bins, self.delta_ps, SPEED_OF_LIGHT)
    }
}

/// Temporal distribution of background photons, normalized to unit sum.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseProfile {
    Uniform,
    Custom(Vec<f64>),
}

impl NoiseProfile {
    pub fn from_samples(samples: Vec<f64>) -> Result<Self, SimError> {
        if samples.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SimError::InvalidConfig("noise profile has negative or non-finite entries".into()));
        }
        let total: f64 = samples.iter().sum();
        if total <= 0.0 {
            return Err(SimError::InvalidConfig("noise profile sums to zero".into()));
        }
        Ok(Self::Custom(samples.into_iter().map(|v| v / total).collect()))
    }

    /// Same text format as waveform files.
    pub fn load(path: &std::path::Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        Self::from_samples(pulse::parse_profile(&text)?)
    }

    fn weights(&self, bins: usize) -> Result<Vec<f64>, SimError> {
        match self {
            Self::Uniform => Ok(vec![1.0 / bins as f64; bins]),
            Self::Custom(w) if w.len() == bins => Ok(w.clone()),
            Self::Custom(w) => {
                Err(SimError::ShapeMismatch(format!("noise profile has {} entries for {bins} bins", w.len())))
            }
        }
    }
}

/// Per-illumination signal multiplier and per-bin background counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SbrCalibration {
    /// Scale on `η·a·s(t)` per illumination so a mean-albedo pixel collects `s̄` photons.
    pub signal_scale: f64,
    /// Expected background counts per bin (uniform profile), `m̄ / T`.
    pub noise_per_bin: f64,
}

pub fn calibrate_sbr(pulse: &PulseWaveform, cfg: &SimConfig) -> Result<SbrCalibration, SimError> {
    cfg.validate()?;
    let pulse_mass: f64 = pulse.samples().iter().sum();
    Ok(SbrCalibration {
        signal_scale: cfg.signal_mean / (cfg.n_illum as f64 * cfg.eta * pulse_mass),
        noise_per_bin: cfg.noise_mean / cfg.bins as f64,
    })
}

/// Expected counts `λ[T, Nx, Ny]` of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct RateCube {
    pub bins: usize,
    pub nx: usize,
    pub ny: usize,
    pub rates: Vec<f64>,
    /// Fraction of the scene's signal mass falling outside `[0, T)` after shifting.
    pub clipped_fraction: f64,
}

impl RateCube {
    pub fn rate(&self, t: usize, i: usize, j: usize) -> f64 {
        self.rates[(t * self.nx + i) * self.ny + j]
    }

    pub fn pixel_profile(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.bins).map(|t| self.rate(t, i, j)).collect()
    }
}

pub fn rate_cube(scene: &SceneSample, pulse: &PulseWaveform, cfg: &SimConfig) -> Result<RateCube, SimError> {
    rate_cube_with_noise(scene, pulse, cfg, &NoiseProfile::Uniform)
}

/// `λ_t = n_t·(η·a·S·s(tΔ_center − 2z/c) + n_t^{-1}·noise_t)` with the pulse sampled at bin centers.
pub fn rate_cube_with_noise(
    scene: &SceneSample,
    pulse: &PulseWaveform,
    cfg: &SimConfig,
    noise: &NoiseProfile,
) -> Result<RateCube, SimError> {
    cfg.validate()?;
    if (pulse.bin_size_ps() - cfg.delta_ps).abs() > 1e-9 * cfg.delta_ps {
        return Err(SimError::InvalidConfig(format!(
            "pulse sampled at {} ps but config bins are {} ps",
            pulse.bin_size_ps(),
            cfg.delta_ps
        )));
    }
    let (nx, ny) = scene.depth.dims();
    let bins = cfg.bins;
    let max_m = cfg.range_m();
    for i in 0..nx {
        for j in 0..ny {
            let z = scene.depth.get(i, j);
            if !(z >= 0.0 && z < max_m) {
                return Err(SimError::DepthOutOfRange { i, j, depth: z, max_m });
            }
        }
    }
    let cal = calibrate_sbr(pulse, cfg)?;
    let noise_w = noise.weights(bins)?;
    let mean_albedo = scene.mean_albedo();
    let n_px = nx * ny;
    let mut rates = vec![0.0; bins * n_px];
    for (t, w) in noise_w.iter().enumerate() {
        let n = cfg.noise_mean * w;
        rates[t * n_px..(t + 1) * n_px].iter_mut().for_each(|r| *r = n);
    }

    let peak = pulse.peak_index() as f64;
    let len = pulse.len() as f64;
    let mut total_signal = 0.0;
    let mut placed_signal = 0.0;
    for i in 0..nx {
        for j in 0..ny {
            let a = scene.albedo.get(i, j);
            if mean_albedo <= 0.0 || a <= 0.0 {
                continue;
            }
            let amp = cfg.n_illum as f64 * cfg.eta * (a / mean_albedo) * cal.signal_scale;
            total_signal += amp;
            let tau = depth_to_bin_position(scene.depth.get(i, j), cfg.delta_ps, SPEED_OF_LIGHT);
            // Sample position of bin t: (t + 0.5 - tau) + peak, non-zero on (-1, len).
            let t_lo = (tau - peak - 1.5).floor().max(0.0) as usize;
            let t_hi = ((tau - peak + len + 0.5).ceil().max(0.0) as usize).min(bins);
            for t in t_lo..t_hi {
                let s = amp * pulse.value_at(t as f64 + 0.5 - tau + peak);
                rates[t * n_px + i * ny + j] += s;
                placed_signal += s;
            }
        }
    }
    let clipped_fraction =
        if total_signal > 0.0 { ((total_signal - placed_signal) / total_signal).max(0.0) } else { 0.0 };
    Ok(RateCube { bins, nx, ny, rates, clipped_fraction })
}

/// Photon counts `[T, Nx, Ny]` with the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramCube {
    pub bins: usize,
    pub nx: usize,
    pub ny: usize,
    pub counts: Vec<u32>,
    pub meta: SimConfig,
}

impl HistogramCube {
    pub fn new(bins: usize, nx: usize, ny: usize, counts: Vec<u32>, meta: SimConfig) -> Result<Self, SimError> {
        if counts.len() != bins * nx * ny || bins == 0 || nx == 0 || ny == 0 {
            return Err(SimError::ShapeMismatch(format!("{} counts for shape [{bins}, {nx}, {ny}]", counts.len())));
        }
        if meta.bins != bins {
            return Err(SimError::ShapeMismatch(format!("meta has {} bins, cube {bins}", meta.bins)));
        }
        Ok(Self { bins, nx, ny, counts, meta })
    }

    pub fn count(&self, t: usize, i: usize, j: usize) -> u32 {
        self.counts[(t * self.nx + i) * self.ny + j]
    }

    pub fn pixel_histogram(&self, i: usize, j: usize) -> Vec<u32> {
        (0..self.bins).map(|t| self.count(t, i, j)).collect()
    }

    pub fn total_counts(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Network input `[1, T, Nx, Ny]` with raw counts as values.
    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor::new(
            vec![1, self.bins, self.nx, self.ny],
            self.counts.iter().map(|&c| F::from_u32(c).expect("count fits")).collect(),
        )
        .expect("cube dims are positive")
    }

    /// `[T, h, w]` window at origin `(i0, j0)`; pixels beyond the edge are mirrored.
    pub fn patch(&self, i0: usize, j0: usize, h: usize, w: usize) -> HistogramCube {
        let mut counts = Vec::with_capacity(self.bins * h * w);
        for t in 0..self.bins {
            for i in 0..h {
                let si = reflect(i0 + i, self.nx);
                for j in 0..w {
                    counts.push(self.count(t, si, reflect(j0 + j, self.ny)));
                }
            }
        }
        HistogramCube { bins: self.bins, nx: h, ny: w, counts, meta: self.meta.clone() }
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample.
pub(crate) fn reflect(k: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = k % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Independent Poisson draw per voxel from a ChaCha stream keyed by `(seed, voxel)`.
///
/// The result does not depend on thread count or scheduling.
pub fn sample_histogram(rates: &RateCube, meta: SimConfig, seed: u64) -> Result<HistogramCube, SimError> {
    if let Some(r) = rates.rates.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(SimError::InvalidConfig(format!("rate {r} is not finite and non-negative")));
    }
    let base = ChaCha8Rng::seed_from_u64(seed);
    let counts: Vec<u32> = rates
        .rates
        .par_iter()
        .enumerate()
        .map(|(voxel, &lambda)| {
            if lambda == 0.0 {
                return 0;
            }
            let mut rng = base.clone();
            rng.set_stream(voxel as u64);
            let d = Poisson::new(lambda).expect("positive finite rate");
            d.sample(&mut rng).min(u32::MAX as f64) as u32
        })
        .collect();
    let meta = SimConfig { seed, ..meta };
    HistogramCube::new(rates.bins, rates.nx, rates.ny, counts, SimConfig { bins: rates.bins, ..meta })
}

/// Independent child seed for item `index` of stream `tag` (SplitMix64 finalizer over
/// the master seed, an FNV hash of the tag and the index).
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = master ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Scene → rates → counts in one call, seeded from `cfg.seed`.
pub fn simulate_cube(scene: &SceneSample, pulse: &PulseWaveform, cfg: &SimConfig) -> Result<HistogramCube, SimError> {
    let rates = rate_cube(scene, pulse, cfg)?;
    sample_histogram(&rates, cfg.clone(), cfg.seed)
}

/// Bin index `floor(2z/(Δc))` per pixel; must be below `bins`.
pub fn quantize_depth(depth: &DepthMap, delta_ps: f64, c: f64, bins: usize) -> Result<BinIndexMap, SimError> {
    let (nx, ny) = depth.dims();
    let max_m = unambiguous_range_m(bins, delta_ps, c);
    let mut out = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            let z = depth.get(i, j);
            let pos = depth_to_bin_position(z, delta_ps, c);
            if !(z >= 0.0 && pos.is_finite()) || pos.floor() as usize >= bins {
                return Err(SimError::DepthOutOfRange { i, j, depth: z, max_m });
            }
            out.push(pos.floor() as usize);
        }
    }
    Ok(BinIndexMap::new(nx, ny, out).expect("dims from a valid depth map"))
}
