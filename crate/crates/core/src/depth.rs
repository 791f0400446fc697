//! Depth maps, bin-index maps and the time-of-flight geometry linking them.

use serde::{Deserialize, Serialize};

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Depth covered by one time bin, `Δ·c/2`, in meters.
pub fn bin_depth_m(delta_ps: f64, c: f64) -> f64 {
    delta_ps * 1e-12 * c / 2.0
}

/// Fractional bin position of a depth, `2z/(Δ·c)`.
pub fn depth_to_bin_position(depth_m: f64, delta_ps: f64, c: f64) -> f64 {
    2.0 * depth_m / (delta_ps * 1e-12 * c)
}

/// Exclusive upper end of the unambiguous range, `T·Δ·c/2`.
pub fn unambiguous_range_m(bins: usize, delta_ps: f64, c: f64) -> f64 {
    bins as f64 * bin_depth_m(delta_ps, c)
}

/// Per-pixel depth in meters, `[Nx, Ny]` row-major. `NaN` marks an invalid pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    nx: usize,
    ny: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(nx: usize, ny: usize, data: Vec<f64>) -> Option<Self> {
        (nx > 0 && ny > 0 && data.len() == nx * ny).then_some(Self { nx, ny, data })
    }

    pub fn filled(nx: usize, ny: usize, value: f64) -> Self {
        Self { nx, ny, data: vec![value; nx * ny] }
    }

    pub fn from_fn(nx: usize, ny: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(nx * ny);
        for i in 0..nx {
            for j in 0..ny {
                data.push(f(i, j));
            }
        }
        Self { nx, ny, data }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.ny + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.ny + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        !self.get(i, j).is_nan()
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|v| !v.is_nan()).count()
    }

    /// Copies a `[h, w]` window whose origin is `(i0, j0)`.
    pub fn crop(&self, i0: usize, j0: usize, h: usize, w: usize) -> Self {
        Self::from_fn(h, w, |i, j| self.get(i0 + i, j0 + j))
    }

    /// Writes `patch` into this map at origin `(i0, j0)`, clipping at the borders.
    pub fn paste(&mut self, i0: usize, j0: usize, patch: &DepthMap) {
        for i in 0..patch.nx.min(self.nx.saturating_sub(i0)) {
            for j in 0..patch.ny.min(self.ny.saturating_sub(j0)) {
                self.set(i0 + i, j0 + j, patch.get(i, j));
            }
        }
    }
}

/// Per-pixel 0-based time-bin indices, `[Nx, Ny]` row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinIndexMap {
    nx: usize,
    ny: usize,
    bins: Vec<usize>,
}

impl BinIndexMap {
    pub fn new(nx: usize, ny: usize, bins: Vec<usize>) -> Option<Self> {
        (nx > 0 && ny > 0 && bins.len() == nx * ny).then_some(Self { nx, ny, bins })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.bins[i * self.ny + j]
    }

    pub fn bins(&self) -> &[usize] {
        &self.bins
    }

    pub fn crop(&self, i0: usize, j0: usize, h: usize, w: usize) -> Self {
        let mut bins = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                bins.push(self.get(i0 + i, j0 + j));
            }
        }
        Self { nx: h, ny: w, bins }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_depth_at_80ps() {
        assert!((bin_depth_m(80.0, SPEED_OF_LIGHT) - 0.011_991_698_32).abs() < 1e-12);
    }

    #[test]
    fn crop_and_paste_round_trip() {
        let m = DepthMap::from_fn(4, 5, |i, j| (i * 10 + j) as f64);
        let c = m.crop(1, 2, 2, 3);
        assert_eq!(c.get(0, 0), 12.0);
        assert_eq!(c.get(1, 2), 24.0);
        let mut z = DepthMap::filled(4, 5, 0.0);
        z.paste(1, 2, &c);
        assert_eq!(z.get(2, 4), 24.0);
        assert_eq!(z.get(0, 0), 0.0);
    }
}
