//! Depth-map error metrics. NaN pixels in either map are excluded.

use std::collections::BTreeMap;
use std::fmt;

use crate::depth::DepthMap;

/// Default accuracy thresholds `1.01` and `1.01²`.
pub const DEFAULT_DELTAS: [f64; 2] = [1.01, 1.0201];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("depth maps differ in shape: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("no valid pixels to evaluate")]
    NoValidPixels,
    #[error("threshold must exceed 1, got {0}")]
    BadDelta(f64),
}

fn pairs<'a>(z: &'a DepthMap, z_hat: &'a DepthMap) -> Result<impl Iterator<Item = (f64, f64)> + 'a, MetricsError> {
    if z.dims() != z_hat.dims() {
        return Err(MetricsError::Shape(z.dims(), z_hat.dims()));
    }
    Ok(z.data().iter().zip(z_hat.data()).map(|(a, b)| (*a, *b)).filter(|(a, b)| !a.is_nan() && !b.is_nan()))
}

pub fn rmse(z: &DepthMap, z_hat: &DepthMap) -> Result<f64, MetricsError> {
    let (mut n, mut s) = (0usize, 0.0);
    for (a, b) in pairs(z, z_hat)? {
        n += 1;
        s += (a - b) * (a - b);
    }
    if n == 0 {
        return Err(MetricsError::NoValidPixels);
    }
    Ok((s / n as f64).sqrt())
}

/// Mean of `|z − ẑ| / z`, with the number of pixels skipped for `z == 0`.
pub fn abs_rel(z: &DepthMap, z_hat: &DepthMap) -> Result<(f64, usize), MetricsError> {
    let (mut n, mut zeros, mut s) = (0usize, 0usize, 0.0);
    for (a, b) in pairs(z, z_hat)? {
        if a == 0.0 {
            zeros += 1;
            continue;
        }
        n += 1;
        s += (a - b).abs() / a;
    }
    if n == 0 {
        return Err(MetricsError::NoValidPixels);
    }
    Ok((s / n as f64, zeros))
}

/// Fraction of pixels with `max(z/ẑ, ẑ/z) < delta`; non-positive values always fail.
pub fn accuracy_delta(z: &DepthMap, z_hat: &DepthMap, delta: f64) -> Result<f64, MetricsError> {
    if !(delta > 1.0) {
        return Err(MetricsError::BadDelta(delta));
    }
    let (mut n, mut hit) = (0usize, 0usize);
    for (a, b) in pairs(z, z_hat)? {
        n += 1;
        if a > 0.0 && b > 0.0 && (a / b).max(b / a) < delta {
            hit += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::NoValidPixels);
    }
    Ok(hit as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rmse: f64,
    pub abs_rel: f64,
    /// Keyed by the threshold's bit pattern so the map stays ordered.
    pub acc: BTreeMap<u64, f64>,
    pub pixel_count: usize,
    pub zero_depth_pixels: usize,
}

impl EvalReport {
    pub fn evaluate(z: &DepthMap, z_hat: &DepthMap, deltas: &[f64]) -> Result<Self, MetricsError> {
        let pixel_count = pairs(z, z_hat)?.count();
        let rmse = rmse(z, z_hat)?;
        let (abs_rel, zero_depth_pixels) = abs_rel(z, z_hat)?;
        let mut acc = BTreeMap::new();
        for &d in deltas {
            acc.insert(d.to_bits(), accuracy_delta(z, z_hat, d)?);
        }
        Ok(Self { rmse, abs_rel, acc, pixel_count, zero_depth_pixels })
    }

    pub fn accuracies(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.acc.iter().map(|(k, v)| (f64::from_bits(*k), *v))
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("rmse,abs_rel");
        for (d, _) in self.accuracies() {
            h.push_str(&format!(",acc_{d}"));
        }
        h.push_str(",pixel_count,zero_depth_pixels");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!("{},{}", self.rmse, self.abs_rel);
        for (_, a) in self.accuracies() {
            r.push_str(&format!(",{a}"));
        }
        r.push_str(&format!(",{},{}", self.pixel_count, self.zero_depth_pixels));
        r
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", self.csv_header(), self.csv_row())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16}{:>12}", "metric", "value")?;
        writeln!(f, "{:<16}{:>12.6}", "RMSE (m)", self.rmse)?;
        writeln!(f, "{:<16}{:>12.6}", "Abs rel", self.abs_rel)?;
        for (d, a) in self.accuracies() {
            writeln!(f, "{:<16}{:>12.4}", format!("acc < {d}"), a)?;
        }
        write!(f, "{:<16}{:>12}", "pixels", self.pixel_count)
    }
}
