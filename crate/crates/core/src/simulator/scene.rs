use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::depth::DepthMap;

/// Synthetic scene families used in place of captured depth datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    /// One plane tilted along a single image axis.
    Planes,
    /// Piecewise-constant terraces separated by sharp edges.
    Steps,
    /// Spherical caps in front of a tilted background.
    Spheres,
    /// Smooth multi-octave gradient noise.
    Perlin,
}

impl SceneKind {
    pub const ALL: [SceneKind; 4] = [SceneKind::Planes, SceneKind::Steps, SceneKind::Spheres, SceneKind::Perlin];
}

impl std::str::FromStr for SceneKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "planes" => Ok(Self::Planes),
            "steps" => Ok(Self::Steps),
            "spheres" => Ok(Self::Spheres),
            "perlin" => Ok(Self::Perlin),
            other => Err(SimError::InvalidConfig(format!("unknown scene kind {other:?}"))),
        }
    }
}

/// Ground-truth depth and albedo of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub depth: DepthMap,
    pub albedo: DepthMap,
}

impl SceneSample {
    pub fn new(depth: DepthMap, albedo: DepthMap) -> Result<Self, SimError> {
        if depth.dims() != albedo.dims() {
            return Err(SimError::ShapeMismatch(format!("depth {:?} vs albedo {:?}", depth.dims(), albedo.dims())));
        }
        Ok(Self { depth, albedo })
    }

    pub fn mean_albedo(&self) -> f64 {
        let a = self.albedo.data();
        a.iter().sum::<f64>() / a.len() as f64
    }
}

/// Smooth value noise on a lattice with `cells` cells across the larger image side.
struct ValueNoise {
    grid: Vec<f64>,
    side: usize,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, cells: usize) -> Self {
        let side = cells + 2;
        Self { grid: (0..side * side).map(|_| rng.random::<f64>()).collect(), side }
    }

    /// `u, v` in `[0, 1]`; returns a value in `[0, 1]`.
    fn sample(&self, u: f64, v: f64) -> f64 {
        let cells = (self.side - 2) as f64;
        let (x, y) = (u * cells, v * cells);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (smooth(x - x0), smooth(y - y0));
        let (i, j) = (x0 as usize, y0 as usize);
        let g = |a: usize, b: usize| self.grid[a * self.side + b];
        let top = g(i, j) * (1.0 - fy) + g(i, j + 1) * fy;
        let bot = g(i + 1, j) * (1.0 - fy) + g(i + 1, j + 1) * fy;
        top * (1.0 - fx) + bot * fx
    }
}

fn smooth(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Deterministic piecewise-smooth scene with depths clamped to `[z_min, z_max]`
/// and albedo in `[0.5, 1]`.
pub fn synth_scene(
    kind: SceneKind,
    size: (usize, usize),
    depth_range: (f64, f64),
    seed: u64,
) -> Result<SceneSample, SimError> {
    let (nx, ny) = size;
    let (z_min, z_max) = depth_range;
    if nx == 0 || ny == 0 {
        return Err(SimError::InvalidConfig(format!("scene size {size:?} must be positive")));
    }
    if !(z_min >= 0.0 && z_min < z_max && z_max.is_finite()) {
        return Err(SimError::InvalidConfig(format!(
            "depth range [{z_min}, {z_max}] is not increasing and non-negative"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = z_max - z_min;
    let u = |i: usize| if nx > 1 { i as f64 / (nx - 1) as f64 } else { 0.5 };
    let v = |j: usize| if ny > 1 { j as f64 / (ny - 1) as f64 } else { 0.5 };

    let depth = match kind {
        SceneKind::Planes => {
            let along_rows = rng.random_bool(0.5);
            let a = z_min + span * rng.random_range(0.0..0.5);
            let b = z_min + span * rng.random_range(0.5..1.0);
            let (start, end) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
            DepthMap::from_fn(nx, ny, |i, j| {
                let t = if along_rows { u(i) } else { v(j) };
                start + (end - start) * t
            })
        }
        SceneKind::Steps => {
            let along_rows = rng.random_bool(0.5);
            let n_steps = rng.random_range(2..=5usize);
            let mut cuts: Vec<f64> = (0..n_steps - 1).map(|_| rng.random::<f64>()).collect();
            cuts.sort_by(f64::total_cmp);
            let levels: Vec<f64> = (0..n_steps).map(|_| z_min + span * rng.random::<f64>()).collect();
            DepthMap::from_fn(nx, ny, |i, j| {
                let t = if along_rows { u(i) } else { v(j) };
                levels[cuts.iter().filter(|c| t >= **c).count()]
            })
        }
        SceneKind::Spheres => {
            let back = z_min + span * rng.random_range(0.6..1.0);
            let tilt = span * rng.random_range(-0.15..0.15);
            let n = rng.random_range(1..=3usize);
            let spheres: Vec<(f64, f64, f64, f64)> = (0..n)
                .map(|_| {
                    let (cu, cv) = (rng.random::<f64>(), rng.random::<f64>());
                    let r = rng.random_range(0.15..0.45);
                    let front = z_min + span * rng.random_range(0.0..0.5);
                    (cu, cv, r, front)
                })
                .collect();
            DepthMap::from_fn(nx, ny, |i, j| {
                let (x, y) = (u(i), v(j));
                let mut z = back + tilt * (x - 0.5);
                for &(cu, cv, r, front) in &spheres {
                    let d2 = (x - cu).powi(2) + (y - cv).powi(2);
                    if d2 < r * r {
                        // Cap bulging toward the sensor, radius r in image units.
                        let bulge = (r * r - d2).sqrt() / r;
                        z = z.min(front + (1.0 - bulge) * span * 0.2);
                    }
                }
                z
            })
        }
        SceneKind::Perlin => {
            let coarse = ValueNoise::new(&mut rng, 2);
            let fine = ValueNoise::new(&mut rng, 5);
            DepthMap::from_fn(nx, ny, |i, j| {
                let n = 0.7 * coarse.sample(u(i), v(j)) + 0.3 * fine.sample(u(i), v(j));
                z_min + span * n
            })
        }
    };
    let depth = DepthMap::from_fn(nx, ny, |i, j| depth.get(i, j).clamp(z_min, z_max));

    let albedo_field = ValueNoise::new(&mut rng, 3);
    let albedo = DepthMap::from_fn(nx, ny, |i, j| 0.5 + 0.5 * albedo_field.sample(u(i), v(j)).clamp(0.0, 1.0));
    SceneSample::new(depth, albedo)
}
