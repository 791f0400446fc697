//! Depth decoding: softargmax over network output, a Poisson maximum-likelihood
//! baseline, and patch tiling for scenes larger than the network patch.

use rayon::prelude::*;

use crate::depth::{bin_depth_m, DepthMap, SPEED_OF_LIGHT};
use crate::numerics::{Scalar, Tensor};
use crate::params::ParamStore;
use crate::simulator::{HistogramCube, PulseWaveform};
use crate::stin::{Stin, StinError};

/// Maximum allowed `|Σ_t ĥ − 1|` per pixel accepted by [`softargmax_depth`].
pub const NORMALIZATION_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InferenceError {
    #[error("pixel ({i}, {j}) sums to {sum}, not a distribution")]
    Unnormalized { i: usize, j: usize, sum: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] StinError),
}

/// `(Δc/2) · Σ_k k·ĥ[k]` per pixel of a `[1, T, H, W]` distribution.
pub fn softargmax_depth<F: Scalar>(h_hat: &Tensor<F>, delta_ps: f64) -> Result<DepthMap, InferenceError> {
    let s = h_hat.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(InferenceError::Shape(format!("expected [1,T,H,W], got {s:?}")));
    }
    let (t, h, w) = (s[1], s[2], s[3]);
    let p = h * w;
    let data = h_hat.data();
    let scale = bin_depth_m(delta_ps, SPEED_OF_LIGHT);
    let mut out = Vec::with_capacity(p);
    for px in 0..p {
        let (mut sum, mut mean) = (0.0, 0.0);
        for k in 0..t {
            let v = data[k * p + px].as_f64();
            sum += v;
            mean += k as f64 * v;
        }
        if !((sum - 1.0).abs() <= NORMALIZATION_TOL) {
            return Err(InferenceError::Unnormalized { i: px / w, j: px % w, sum });
        }
        out.push(scale * mean);
    }
    Ok(DepthMap::new(h, w, out).expect("sized above"))
}

/// Integer-shift Poisson maximum-likelihood depth estimator for a known pulse.
#[derive(Clone, Debug)]
pub struct MleDecoder {
    bins: usize,
    noise_per_bin: f64,
    bin_depth: f64,
    /// Template value at offset `t - b`, indexed by `t - b + peak`.
    template: Vec<f64>,
    peak: usize,
    /// `cum[k] = Σ template[..k]`.
    cum: Vec<f64>,
}

const RATE_FLOOR: f64 = 1e-12;

impl MleDecoder {
    pub fn new(pulse: &PulseWaveform, bins: usize, noise_per_bin: f64, delta_ps: f64) -> Result<Self, InferenceError> {
        if bins == 0 || !(noise_per_bin >= 0.0) || !(delta_ps > 0.0) {
            return Err(InferenceError::InvalidArgument(format!(
                "bins {bins}, noise {noise_per_bin}, delta {delta_ps}"
            )));
        }
        let template = pulse.samples().to_vec();
        let mut cum = vec![0.0; template.len() + 1];
        for (k, v) in template.iter().enumerate() {
            cum[k + 1] = cum[k] + v;
        }
        Ok(Self {
            bins,
            noise_per_bin,
            bin_depth: bin_depth_m(delta_ps, SPEED_OF_LIGHT),
            template,
            peak: pulse.peak_index(),
            cum,
        })
    }

    /// Best shift for one pixel histogram, or `None` when it holds no photons.
    pub fn decode_bin(&self, hist: &[f64]) -> Option<usize> {
        let total: f64 = hist.iter().sum();
        if !(total > 0.0) || hist.len() != self.bins {
            return None;
        }
        let nz: Vec<(usize, f64)> = hist.iter().copied().enumerate().filter(|(_, h)| *h > 0.0).collect();
        let amp = (total - self.noise_per_bin * self.bins as f64).max(RATE_FLOOR.sqrt());
        let len = self.template.len() as isize;
        let mut best = (f64::NEG_INFINITY, 0);
        for b in 0..self.bins {
            // Template index range covered by t in [0, T).
            let lo = (self.peak as isize - b as isize).clamp(0, len) as usize;
            let hi = (self.bins as isize - b as isize + self.peak as isize).clamp(0, len) as usize;
            let mass = amp * (self.cum[hi] - self.cum[lo]) + self.noise_per_bin * self.bins as f64;
            let mut ll = -mass;
            for &(t, h) in &nz {
                let k = t as isize - b as isize + self.peak as isize;
                let s = if (0..len).contains(&k) { self.template[k as usize] } else { 0.0 };
                ll += h * (amp * s + self.noise_per_bin).max(RATE_FLOOR).ln();
            }
            if ll > best.0 {
                best = (ll, b);
            }
        }
        Some(best.1)
    }

    /// Depth `b·Δc/2` of the best shift, NaN for empty pixels.
    pub fn decode(&self, hist: &[f64]) -> f64 {
        self.decode_bin(hist).map_or(f64::NAN, |b| b as f64 * self.bin_depth)
    }
}

/// Per-pixel maximum-likelihood depth of a cube; all-zero pixels come back NaN.
pub fn mle_depth(
    cube: &HistogramCube,
    pulse: &PulseWaveform,
    noise_per_bin: f64,
    delta_ps: f64,
) -> Result<DepthMap, InferenceError> {
    let dec = MleDecoder::new(pulse, cube.bins, noise_per_bin, delta_ps)?;
    let data: Vec<f64> = (0..cube.nx * cube.ny)
        .into_par_iter()
        .map(|px| {
            let hist: Vec<f64> = cube.pixel_histogram(px / cube.ny, px % cube.ny).iter().map(|&c| c as f64).collect();
            dec.decode(&hist)
        })
        .collect();
    Ok(DepthMap::new(cube.nx, cube.ny, data).expect("sized above"))
}

/// Non-overlapping patch grid; edge patches extend past the image and are cropped on paste.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub patch: (usize, usize),
    pub dims: (usize, usize),
    pub origins: Vec<(usize, usize)>,
}

impl TilePlan {
    pub fn new(dims: (usize, usize), patch: (usize, usize)) -> Result<Self, InferenceError> {
        if patch.0 == 0 || patch.1 == 0 || dims.0 == 0 || dims.1 == 0 {
            return Err(InferenceError::InvalidArgument(format!("image {dims:?}, patch {patch:?}")));
        }
        let mut origins = Vec::new();
        for i in (0..dims.0).step_by(patch.0) {
            for j in (0..dims.1).step_by(patch.1) {
                origins.push((i, j));
            }
        }
        Ok(Self { patch, dims, origins })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Runs `f` on every patch (reflect-padded at the borders) and pastes the cropped
/// results into a full-size map.
pub fn stitch_with<E>(
    cube: &HistogramCube,
    plan: &TilePlan,
    f: impl Fn(&HistogramCube) -> Result<DepthMap, E> + Sync,
) -> Result<DepthMap, E>
where
    E: From<InferenceError> + Send,
{
    if plan.dims != (cube.nx, cube.ny) {
        return Err(
            InferenceError::Shape(format!("plan covers {:?}, cube is {:?}", plan.dims, (cube.nx, cube.ny))).into()
        );
    }
    let (h, w) = plan.patch;
    let results: Vec<Result<DepthMap, E>> = plan.origins.par_iter().map(|&(i, j)| f(&cube.patch(i, j, h, w))).collect();
    let mut out = DepthMap::filled(cube.nx, cube.ny, f64::NAN);
    for (&(i, j), r) in plan.origins.iter().zip(results) {
        let d = r?;
        if d.dims() != plan.patch {
            return Err(InferenceError::Shape(format!("patch result {:?}, expected {:?}", d.dims(), plan.patch)).into());
        }
        out.paste(i, j, &d);
    }
    Ok(out)
}

/// Network prediction plus softargmax decoding on every patch of `cube`.
pub fn tile_and_stitch<F: Scalar>(
    cube: &HistogramCube,
    model: &Stin,
    params: &ParamStore<F>,
    plan: &TilePlan,
) -> Result<DepthMap, InferenceError> {
    if model.config().patch != plan.patch {
        return Err(InferenceError::Shape(format!(
            "model patch {:?}, plan patch {:?}",
            model.config().patch,
            plan.patch
        )));
    }
    let delta = cube.meta.delta_ps;
    stitch_with(cube, plan, |p| {
        let out = model.predict(params, p.to_tensor::<F>())?;
        softargmax_depth(&out, delta)
    })
}
