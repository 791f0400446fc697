//! Desk-scale source→target adaptation run: synthetic low-noise training data,
//! unlabeled high-noise adaptation data, and held-out test sets for both regimes.

use std::time::{Duration, Instant};

use crate::depth::BinIndexMap;
use crate::depth::{DepthMap, SPEED_OF_LIGHT};
use crate::inference::softargmax_depth;
use crate::metrics::{rmse, MetricsError};
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::simulator::{
    default_support_bins, derive_seed, quantize_depth, simulate_cube, synth_scene, HistogramCube, PulseWaveform, Sbr,
    SceneKind, SimConfig, SimError,
};
use crate::stin::{Stin, StinConfig, StinError};
use crate::trainer::{
    dann_adapt, pretrain, AdaptOutcome, AdaptRecord, DomainBatch, EpochRecord, PretrainOutcome, StinTask, TrainConfig,
    TrainError,
};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] StinError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Inference(#[from] crate::inference::InferenceError),
}

#[derive(Clone, Debug)]
pub struct DeskConfig {
    pub net: StinConfig,
    pub delta_ps: f64,
    pub fwhm_ps: f64,
    pub depth_range: (f64, f64),
    pub source_sbr: Vec<Sbr>,
    pub target_sbr: Sbr,
    pub source_n: usize,
    pub target_n: usize,
    pub test_n: usize,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    pub seed: u64,
}

impl DeskConfig {
    /// `T = 128`, 16×16 patches, 64 source scenes at 2:2, 50 target scenes at 2:50.
    ///
    /// Supervised terms are summed over pixels while the adversarial term is not, so
    /// `λ_a` shrinks with the patch area relative to 32×32.
    pub fn toy(seed: u64) -> Self {
        let lambda_a = TrainConfig::default().lambda_a * (16.0 * 16.0) / (32.0 * 32.0);
        Self {
            net: StinConfig::toy(),
            delta_ps: 80.0,
            fwhm_ps: 400.0,
            depth_range: (0.15, 1.35),
            source_sbr: vec![Sbr::new(2.0, 2.0)],
            target_sbr: Sbr::new(2.0, 50.0),
            source_n: 64,
            target_n: 50,
            test_n: 16,
            pretrain: TrainConfig { epochs: 30, batch_size: 4, seed, ..TrainConfig::default() },
            adapt: TrainConfig { max_adapt_iters: 2, lambda_a, seed, ..TrainConfig::default() },
            seed,
        }
    }

    pub fn pulse(&self) -> Result<PulseWaveform, SimError> {
        PulseWaveform::gaussian(self.fwhm_ps, self.delta_ps, default_support_bins(self.fwhm_ps, self.delta_ps))
    }
}

/// A simulated patch with its ground truth.
#[derive(Clone, Debug)]
pub struct LabeledCube {
    pub cube: HistogramCube,
    pub depth: DepthMap,
    pub bins: BinIndexMap,
}

/// Scene `index` of stream `tag`; scene kinds cycle through all four generators.
pub fn make_sample(
    cfg: &DeskConfig,
    pulse: &PulseWaveform,
    tag: &str,
    index: usize,
    sbr: Sbr,
) -> Result<LabeledCube, SimError> {
    let kind = SceneKind::ALL[index % SceneKind::ALL.len()];
    let scene = synth_scene(
        kind,
        cfg.net.patch,
        cfg.depth_range,
        derive_seed(cfg.seed, &format!("{tag}/scene"), index as u64),
    )?;
    let sim =
        SimConfig::new(cfg.net.bins, cfg.delta_ps, sbr, derive_seed(cfg.seed, &format!("{tag}/photons"), index as u64));
    let cube = simulate_cube(&scene, pulse, &sim)?;
    let bins = quantize_depth(&scene.depth, cfg.delta_ps, SPEED_OF_LIGHT, cfg.net.bins)?;
    Ok(LabeledCube { cube, depth: scene.depth, bins })
}

#[derive(Clone, Debug)]
pub struct DeskData {
    pub source: Vec<LabeledCube>,
    pub target: Vec<HistogramCube>,
    pub test_target: Vec<LabeledCube>,
    pub test_source: Vec<LabeledCube>,
}

impl DeskData {
    pub fn generate(cfg: &DeskConfig) -> Result<Self, SimError> {
        let pulse = cfg.pulse()?;
        let nsbr = cfg.source_sbr.len().max(1);
        let source = (0..cfg.source_n)
            .map(|i| make_sample(cfg, &pulse, "source", i, cfg.source_sbr[i % nsbr]))
            .collect::<Result<_, _>>()?;
        let target = (0..cfg.target_n)
            .map(|i| make_sample(cfg, &pulse, "target", i, cfg.target_sbr).map(|s| s.cube))
            .collect::<Result<_, _>>()?;
        let test_target = (0..cfg.test_n)
            .map(|i| make_sample(cfg, &pulse, "test-target", i, cfg.target_sbr))
            .collect::<Result<_, _>>()?;
        let test_source = (0..cfg.test_n)
            .map(|i| make_sample(cfg, &pulse, "test-source", i, cfg.source_sbr[i % nsbr]))
            .collect::<Result<_, _>>()?;
        Ok(Self { source, target, test_target, test_source })
    }
}

/// Pooled RMSE over every pixel of every test patch.
pub fn test_rmse(
    net: &Stin,
    params: &ParamStore<f32>,
    set: &[LabeledCube],
    delta_ps: f64,
) -> Result<f64, ExperimentError> {
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for s in set {
        let out = net.predict(params, s.cube.to_tensor::<f32>())?;
        pred.extend_from_slice(softargmax_depth(&out, delta_ps)?.data());
        truth.extend_from_slice(s.depth.data());
    }
    let n = truth.len();
    Ok(rmse(&DepthMap::new(1, n, truth).expect("sized"), &DepthMap::new(1, n, pred).expect("sized"))?)
}

#[derive(Clone, Debug)]
pub struct DeskReport {
    pub baseline_target_rmse: f64,
    pub adapted_target_rmse: f64,
    pub baseline_source_rmse: f64,
    pub adapted_source_rmse: f64,
    pub pretrain_trace: Vec<EpochRecord>,
    pub adapt_trace: Vec<AdaptRecord>,
    pub pretrained: ParamStore<f32>,
    pub adapted: ParamStore<f32>,
    pub pretrain_time: Duration,
    pub adapt_time: Duration,
    pub total_time: Duration,
}

impl DeskReport {
    pub fn target_ratio(&self) -> f64 {
        self.adapted_target_rmse / self.baseline_target_rmse
    }

    pub fn source_regression(&self) -> f64 {
        self.adapted_source_rmse / self.baseline_source_rmse - 1.0
    }
}

/// Generated data and the network it is fed to.
pub struct DeskRun {
    pub cfg: DeskConfig,
    pub net: Stin,
    pub task: StinTask,
    pub data: DeskData,
    pub batch: DomainBatch<Tensor<f32>, BinIndexMap>,
}

impl DeskRun {
    pub fn prepare(cfg: &DeskConfig) -> Result<Self, ExperimentError> {
        let data = DeskData::generate(cfg)?;
        let net = Stin::new(cfg.net.clone())?;
        let task = StinTask { net: net.clone(), delta_ps: cfg.delta_ps };
        let batch = DomainBatch {
            source: data.source.iter().map(|s| (s.cube.to_tensor(), s.bins.clone())).collect(),
            target: data.target.iter().map(|c| c.to_tensor()).collect(),
        };
        Ok(Self { cfg: cfg.clone(), net, task, data, batch })
    }

    pub fn pretrain(&self) -> Result<PretrainOutcome<f32>, ExperimentError> {
        let init = self.net.init_params::<f32>(self.cfg.seed);
        Ok(pretrain(&self.task, &init, &self.batch.source, &self.cfg.pretrain, |_, _, _| Ok(()))?)
    }

    pub fn adapt(&self, pretrained: &ParamStore<f32>) -> Result<AdaptOutcome<f32>, ExperimentError> {
        Ok(dann_adapt(&self.task, pretrained, &self.batch, &self.cfg.adapt, |_| {})?)
    }

    /// `(target RMSE, source RMSE)` on the held-out sets.
    pub fn evaluate(&self, params: &ParamStore<f32>) -> Result<(f64, f64), ExperimentError> {
        Ok((
            test_rmse(&self.net, params, &self.data.test_target, self.cfg.delta_ps)?,
            test_rmse(&self.net, params, &self.data.test_source, self.cfg.delta_ps)?,
        ))
    }
}

/// Generates data, pretrains on the source set, adapts to the target set and scores
/// both models on both held-out sets.
pub fn run_desk(cfg: &DeskConfig) -> Result<DeskReport, ExperimentError> {
    let start = Instant::now();
    let run = DeskRun::prepare(cfg)?;
    let t0 = Instant::now();
    let pre = run.pretrain()?;
    let pretrain_time = t0.elapsed();
    let t1 = Instant::now();
    let adapted = run.adapt(&pre.params)?;
    let adapt_time = t1.elapsed();
    let (baseline_target_rmse, baseline_source_rmse) = run.evaluate(&pre.params)?;
    let (adapted_target_rmse, adapted_source_rmse) = run.evaluate(&adapted.params)?;
    Ok(DeskReport {
        baseline_target_rmse,
        adapted_target_rmse,
        baseline_source_rmse,
        adapted_source_rmse,
        pretrain_trace: pre.trace,
        adapt_trace: adapted.trace,
        pretrained: pre.params,
        adapted: adapted.params,
        pretrain_time,
        adapt_time,
        total_time: start.elapsed(),
    })
}
