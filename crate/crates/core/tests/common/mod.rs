#![allow(dead_code)]

use photon_da_core::depth::BinIndexMap;
use photon_da_core::numerics::{Tape, Tensor, Var};
use photon_da_core::objectives::{LossBreakdown, LossValue};
use photon_da_core::params::{Bound, ParamStore};
use photon_da_core::stin::{disc_hidden_for, Stin, StinConfig};
use photon_da_core::trainer::{DannModel, StinTask, TrainError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Row = (char, &'static str, Option<[usize; 3]>, &'static [usize]);

/// Output sizes of the three architecture tables, row by row.
pub const PAPER_ROWS: &[Row] = &[
    ('F', "Input", None, &[1, 1024, 32, 32]),
    ('F', "ST-block", Some([7, 3, 3]), &[4, 1024, 32, 32]),
    ('F', "Max pooling", Some([2, 1, 1]), &[4, 512, 32, 32]),
    ('F', "ST-block", Some([7, 3, 3]), &[8, 512, 32, 32]),
    ('F', "Max pooling", Some([2, 1, 1]), &[8, 256, 32, 32]),
    ('F', "ST-block", Some([7, 3, 3]), &[12, 256, 32, 32]),
    ('F', "Max pooling", Some([2, 1, 1]), &[12, 128, 32, 32]),
    ('F', "ST-block", Some([7, 3, 3]), &[16, 128, 32, 32]),
    ('F', "Max pooling", Some([2, 1, 1]), &[16, 64, 32, 32]),
    ('F', "ST-block", Some([7, 3, 3]), &[24, 64, 32, 32]),
    ('F', "Max pooling", Some([2, 1, 1]), &[24, 32, 32, 32]),
    ('F', "ST-block", Some([7, 3, 3]), &[32, 32, 32, 32]),
    ('F', "Max pooling", Some([2, 1, 1]), &[32, 16, 32, 32]),
    ('F', "ST-block", Some([7, 3, 3]), &[40, 16, 32, 32]),
    ('F', "Max pooling", Some([2, 1, 1]), &[40, 8, 32, 32]),
    ('F', "ST-block", Some([7, 3, 3]), &[48, 8, 32, 32]),
    ('D', "Input", None, &[48, 8, 32, 32]),
    ('D', "Average pooling", Some([1, 8, 8]), &[48, 8, 4, 4]),
    ('D', "Reshape", None, &[6144]),
    ('D', "FC", None, &[512]),
    ('D', "FC", None, &[128]),
    ('D', "FC", None, &[1]),
    ('R', "Input", None, &[48, 8, 32, 32]),
    ('R', "3D Deconv", Some([6, 3, 3]), &[40, 16, 32, 32]),
    ('R', "3D Deconv", Some([6, 3, 3]), &[32, 32, 32, 32]),
    ('R', "3D Deconv", Some([6, 3, 3]), &[24, 64, 32, 32]),
    ('R', "3D Deconv", Some([6, 3, 3]), &[16, 128, 32, 32]),
    ('R', "3D Deconv", Some([6, 3, 3]), &[12, 256, 32, 32]),
    ('R', "3D Deconv", Some([6, 3, 3]), &[8, 512, 32, 32]),
    ('R', "3D Deconv", Some([6, 3, 3]), &[4, 1024, 32, 32]),
    ('R', "3D Conv", Some([1, 1, 1]), &[1, 1024, 32, 32]),
];

/// Two scalar parameters: feature `f = a·x`, supervised `(f − y)²`, discriminator `σ(b·f)`.
pub struct TwoParam {
    pub d0: f64,
}

impl DannModel<f64> for TwoParam {
    type Input = f64;
    type Label = f64;

    fn features(&self, tape: &mut Tape<f64>, p: &Bound, x: &f64) -> Result<Var, TrainError> {
        let a = p.get("f.a")?;
        let x = tape.constant(Tensor::scalar(*x));
        Ok(tape.mul(a, x)?)
    }

    fn supervised(
        &self,
        tape: &mut Tape<f64>,
        _p: &Bound,
        f: Var,
        y: &f64,
        _lambda_tv: f64,
    ) -> Result<LossValue, TrainError> {
        let y = tape.constant(Tensor::scalar(*y));
        let r = tape.sub(f, y)?;
        let loss = tape.mul(r, r)?;
        let v = tape.value(loss).data()[0];
        Ok(LossValue { loss, breakdown: LossBreakdown { ce: v, tv: 0.0, adv: 0.0, total: v } })
    }

    fn discriminate(&self, tape: &mut Tape<f64>, p: &Bound, f: Var) -> Result<Var, TrainError> {
        let b = p.get("d.b")?;
        let z = tape.mul(b, f)?;
        Ok(tape.sigmoid(z))
    }

    fn is_discriminator(&self, path: &str) -> bool {
        path.starts_with("d.")
    }

    fn init_discriminator(&self, _seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("d.b", Tensor::scalar(self.d0));
        s
    }
}

pub fn scalar_store(path: &str, v: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert(path, Tensor::scalar(v));
    s
}

/// `T = 16`, 4×4 patches, trunk [4, 8]: fast enough for hundreds of steps.
pub fn small_cfg() -> StinConfig {
    let mut cfg = StinConfig {
        bins: 16,
        trunk_channels: vec![4, 8],
        pools: 1,
        patch: (4, 4),
        disc_pool: [1, 4, 4],
        ..StinConfig::paper()
    };
    cfg.disc_hidden = disc_hidden_for(cfg.flatten_len());
    cfg
}

pub fn small_task() -> StinTask {
    StinTask { net: Stin::new(small_cfg()).unwrap(), delta_ps: 80.0 }
}

/// Histogram with a 3-bin pulse at each pixel's label plus uniform noise of mean `noise` per bin.
pub fn pulse_sample(rng: &mut ChaCha8Rng, cfg: &StinConfig, noise: f64) -> (Tensor<f32>, BinIndexMap) {
    let (t, (h, w)) = (cfg.bins, cfg.patch);
    let p = h * w;
    let bins: Vec<usize> = (0..p).map(|_| rng.random_range(1..t - 1)).collect();
    let mut x = vec![0f32; t * p];
    for (px, &b) in bins.iter().enumerate() {
        x[(b - 1) * p + px] += 1.0;
        x[b * p + px] += 4.0;
        x[(b + 1) * p + px] += 1.0;
    }
    for v in &mut x {
        // Bernoulli-sum noise keeps counts integral.
        for _ in 0..4 {
            if rng.random_bool((noise / 4.0).min(1.0)) {
                *v += 1.0;
            }
        }
    }
    (Tensor::new(vec![1, t, h, w], x).unwrap(), BinIndexMap::new(h, w, bins).unwrap())
}

pub fn pulse_set(seed: u64, n: usize, noise: f64) -> Vec<(Tensor<f32>, BinIndexMap)> {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| pulse_sample(&mut rng, &cfg, noise)).collect()
}
