//! Adam, supervised pretraining and alternating domain-adversarial adaptation.
//!
//! Both loops are generic over [`DannModel`], which splits a network into a
//! feature extractor, a supervised head and a domain discriminator.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::BinIndexMap;
use crate::numerics::{NumericsError, Scalar, Tape, Tensor, Var};
use crate::objectives::{adversarial_loss, supervised_loss, total_adaptation_loss, LossBreakdown, LossValue};
use crate::params::{Bound, ParamError, ParamStore};
use crate::stin::{ParamGroup, Stin, StinError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite gradient for {path} at optimizer step {step}")]
    NonFiniteGradient { path: String, step: u64 },
    #[error(
        "training diverged at iteration {iteration}: loss above 10x the initial value for {window} consecutive steps"
    )]
    Diverged { iteration: usize, window: usize, trace: Vec<AdaptRecord> },
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("sample geometry mismatch: {0}")]
    Geometry(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Model(#[from] StinError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<F: Scalar> {
    pub cfg: AdamConfig,
    pub step: u64,
    m: ParamStore<F>,
    v: ParamStore<F>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, m: ParamStore::new(), v: ParamStore::new() }
    }

    pub fn first_moment(&self, path: &str) -> Option<&Tensor<F>> {
        self.m.get(path)
    }

    pub fn second_moment(&self, path: &str) -> Option<&Tensor<F>> {
        self.v.get(path)
    }

    /// One bias-corrected update of every parameter named in `grads`.
    ///
    /// Per element, in this order and in `F` arithmetic:
    /// `m = β1·m + (1−β1)·g`, `v = β2·v + (1−β2)·g²`, `m̂ = m/(1−β1^t)`,
    /// `v̂ = v/(1−β2^t)`, `θ = θ − lr·m̂/(√v̂ + ε)`.
    /// A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &ParamStore<F>) -> Result<(), TrainError> {
        for (path, g) in grads.iter() {
            let p = params.get(path).ok_or_else(|| ParamError::Missing(path.clone()))?;
            if p.shape() != g.shape() {
                return Err(ParamError::Shape {
                    path: path.clone(),
                    expected: p.shape().to_vec(),
                    found: g.shape().to_vec(),
                }
                .into());
            }
            if !g.is_finite() {
                log::error!("adam step {}: gradient of {path} is not finite; step skipped", self.step + 1);
                return Err(TrainError::NonFiniteGradient { path: path.clone(), step: self.step + 1 });
            }
        }
        self.step += 1;
        let c = |x: f64| F::from_f64_lossy(x);
        let (b1, b2, lr, eps) = (c(self.cfg.beta1), c(self.cfg.beta2), c(self.cfg.lr), c(self.cfg.eps));
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let bc1 = F::one() - b1.powi(t);
        let bc2 = F::one() - b2.powi(t);
        for (path, g) in grads.iter() {
            if self.m.get(path).is_none() {
                self.m.insert(path.clone(), Tensor::zeros(g.shape().to_vec()));
                self.v.insert(path.clone(), Tensor::zeros(g.shape().to_vec()));
            }
            let m = self.m.get_mut(path).expect("inserted").data_mut();
            let v = self.v.get_mut(path).expect("inserted").data_mut();
            let theta = params.get_mut(path).expect("checked").data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                m[k] = b1 * m[k] + (F::one() - b1) * gk;
                v[k] = b2 * v[k] + (F::one() - b2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                theta[k] = theta[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_tv: f64,
    pub lambda_a: f64,
    pub seed: u64,
    /// Pretraining checkpoint interval in epochs; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Adaptation epochs over the source set.
    pub max_adapt_iters: usize,
    /// Shuffle source samples each pretraining epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 6,
            lr: 0.001,
            lambda_tv: crate::objectives::LAMBDA_TV,
            lambda_a: crate::objectives::LAMBDA_A,
            seed: 0,
            checkpoint_every: 0,
            max_adapt_iters: 30,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.lr > 0.0) {
            return fail("lr must be positive");
        }
        if !(self.lambda_tv >= 0.0) || !(self.lambda_a >= 0.0) {
            return fail("loss weights must be non-negative");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// Labeled source samples and unlabeled target inputs.
#[derive(Clone, Debug)]
pub struct DomainBatch<I, L> {
    pub source: Vec<(I, L)>,
    pub target: Vec<I>,
}

/// A network split into feature extractor, supervised head and discriminator.
pub trait DannModel<F: Scalar> {
    type Input;
    type Label;

    /// Rejects samples the network cannot take.
    fn check_sample(&self, _input: &Self::Input) -> Result<(), TrainError> {
        Ok(())
    }

    fn features(&self, tape: &mut Tape<F>, p: &Bound, input: &Self::Input) -> Result<Var, TrainError>;

    fn supervised(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        features: Var,
        label: &Self::Label,
        lambda_tv: f64,
    ) -> Result<LossValue, TrainError>;

    /// Probability that `features` came from the target domain, shape `[1]`.
    fn discriminate(&self, tape: &mut Tape<F>, p: &Bound, features: Var) -> Result<Var, TrainError>;

    fn is_discriminator(&self, path: &str) -> bool;

    fn init_discriminator(&self, seed: u64) -> ParamStore<F>;
}

/// STIN with per-sample depth labels for a fixed bin width.
#[derive(Clone, Debug)]
pub struct StinTask {
    pub net: Stin,
    pub delta_ps: f64,
}

impl<F: Scalar> DannModel<F> for StinTask {
    type Input = Tensor<F>;
    type Label = BinIndexMap;

    fn check_sample(&self, input: &Tensor<F>) -> Result<(), TrainError> {
        let c = self.net.config();
        let want = [1, c.bins, c.patch.0, c.patch.1];
        if input.shape() != want {
            return Err(TrainError::Geometry(format!("sample {:?}, network expects {want:?}", input.shape())));
        }
        Ok(())
    }

    fn features(&self, tape: &mut Tape<F>, p: &Bound, input: &Tensor<F>) -> Result<Var, TrainError> {
        let x = tape.constant(input.clone());
        Ok(self.net.feature_extract(tape, p, x)?)
    }

    fn supervised(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        features: Var,
        label: &BinIndexMap,
        lambda_tv: f64,
    ) -> Result<LossValue, TrainError> {
        let h_hat = self.net.reconstruct(tape, p, features)?;
        Ok(supervised_loss(tape, h_hat, label, self.delta_ps, lambda_tv)?)
    }

    fn discriminate(&self, tape: &mut Tape<F>, p: &Bound, features: Var) -> Result<Var, TrainError> {
        Ok(self.net.discriminate(tape, p, features)?)
    }

    fn is_discriminator(&self, path: &str) -> bool {
        ParamGroup::of(path) == Some(ParamGroup::Discriminator)
    }

    fn init_discriminator(&self, seed: u64) -> ParamStore<F> {
        self.net.init_discriminator(seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub tv: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome<F: Scalar> {
    pub params: ParamStore<F>,
    pub trace: Vec<EpochRecord>,
    pub adam: AdamState<F>,
    /// Shuffle RNG after the last epoch.
    pub rng: ChaCha8Rng,
}

fn item<F: Scalar>(tape: &Tape<F>, v: Var) -> f64 {
    tape.value(v).data()[0].as_f64()
}

fn accumulate<F: Scalar>(acc: &mut Option<ParamStore<F>>, g: ParamStore<F>) {
    match acc {
        None => *acc = Some(g),
        Some(a) => {
            for (path, t) in g.iter() {
                let dst = a.get_mut(path).expect("same parameter set").data_mut();
                for (d, s) in dst.iter_mut().zip(t.data()) {
                    *d = *d + *s;
                }
            }
        }
    }
}

/// Minimizes the supervised loss of `F` and `R` over shuffled mini-batches.
///
/// Batch loss is the mean of per-sample losses. Discriminator parameters pass through untouched.
/// `on_epoch` runs after every epoch with the parameters and shuffle RNG, e.g. to write checkpoints.
pub fn pretrain<F: Scalar, M: DannModel<F>>(
    model: &M,
    init: &ParamStore<F>,
    source: &[(M::Input, M::Label)],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ParamStore<F>, &ChaCha8Rng) -> Result<(), TrainError>,
) -> Result<PretrainOutcome<F>, TrainError> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(TrainError::EmptySet("source"));
    }
    for (x, _) in source {
        model.check_sample(x)?;
    }
    let mut params = init.clone();
    let mut adam = AdamState::new(cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let inv = F::one() / F::from_usize(chunk.len()).expect("batch size");
            let mut grads = None;
            for &i in chunk {
                let (x, label) = &source[i];
                let mut tape = Tape::new();
                let p = params.bind(&mut tape, |k| !model.is_discriminator(k));
                let f = model.features(&mut tape, &p, x)?;
                let sup = model.supervised(&mut tape, &p, f, label, cfg.lambda_tv)?;
                let loss = tape.scale(sup.loss, inv);
                tape.backward(loss)?;
                accumulate(&mut grads, p.grads(&tape, &params));
                let w = 1.0 / chunk.len() as f64;
                sums.ce += w * sup.breakdown.ce;
                sums.tv += w * sup.breakdown.tv;
                sums.total += w * sup.breakdown.total;
            }
            adam.step(&mut params, &grads.expect("non-empty chunk"))?;
            batches += 1;
        }
        let n = batches as f64;
        let rec = EpochRecord { epoch: epoch + 1, ce: sums.ce / n, tv: sums.tv / n, total: sums.total / n };
        log::info!("epoch {}: loss {:.4} (ce {:.4}, tv {:.4})", rec.epoch, rec.total, rec.ce, rec.tv);
        trace.push(rec);
        on_epoch(&rec, &params, &rng)?;
    }
    Ok(PretrainOutcome { params, trace, adam, rng })
}

/// One adaptation iteration as logged: the supervised terms and discriminator
/// outputs come from the `F`/`R` pass, which sees the already-updated `D`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptRecord {
    pub iteration: usize,
    pub ce: f64,
    pub tv: f64,
    pub adv: f64,
    pub total: f64,
    pub d_src: f64,
    pub d_tgt: f64,
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome<F: Scalar> {
    /// Adapted `F` and `R`.
    pub params: ParamStore<F>,
    /// Final discriminator, kept for diagnostics.
    pub discriminator: ParamStore<F>,
    pub trace: Vec<AdaptRecord>,
}

/// Consecutive steps above the divergence threshold that abort adaptation.
pub const DIVERGENCE_WINDOW: usize = 50;
pub const DIVERGENCE_FACTOR: f64 = 10.0;

const TARGET_STREAM: u64 = 0x7461_7267_6574; // "target"

/// Result of one adversarial iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Adversarial loss minimized by the discriminator step.
    pub d_step_adv: f64,
    pub record: AdaptRecord,
}

/// One discriminator update followed by one `F`/`R` update with a fresh forward pass.
///
/// The discriminator step treats `F` as constant and the `F`/`R` step treats `D` as
/// constant, so each optimizer only ever touches its own partition.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_step<F: Scalar, M: DannModel<F>>(
    model: &M,
    fr: &mut ParamStore<F>,
    d: &mut ParamStore<F>,
    adam_fr: &mut AdamState<F>,
    adam_d: &mut AdamState<F>,
    source: &(M::Input, M::Label),
    target: &M::Input,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<StepReport, TrainError> {
    let mut all = fr.clone();
    all.merge(d);

    let mut tape = Tape::new();
    let p = all.bind(&mut tape, |k| model.is_discriminator(k));
    let fs = model.features(&mut tape, &p, &source.0)?;
    let ft = model.features(&mut tape, &p, target)?;
    let ds = model.discriminate(&mut tape, &p, fs)?;
    let dt = model.discriminate(&mut tape, &p, ft)?;
    let adv = adversarial_loss(&mut tape, ds, dt)?;
    tape.backward(adv)?;
    let d_step_adv = item(&tape, adv);
    adam_d.step(d, &p.grads(&tape, &all))?;
    drop(tape);

    let mut all = fr.clone();
    all.merge(d);
    let mut tape = Tape::new();
    let p = all.bind(&mut tape, |k| !model.is_discriminator(k));
    let fs = model.features(&mut tape, &p, &source.0)?;
    let ft = model.features(&mut tape, &p, target)?;
    let sup = model.supervised(&mut tape, &p, fs, &source.1, cfg.lambda_tv)?;
    let ds = model.discriminate(&mut tape, &p, fs)?;
    let dt = model.discriminate(&mut tape, &p, ft)?;
    let adv = adversarial_loss(&mut tape, ds, dt)?;
    let total = total_adaptation_loss(&mut tape, sup.loss, adv, cfg.lambda_a)?;
    tape.backward(total)?;
    adam_fr.step(fr, &p.grads(&tape, &all))?;

    let record = AdaptRecord {
        iteration,
        ce: sup.breakdown.ce,
        tv: sup.breakdown.tv,
        adv: item(&tape, adv),
        total: item(&tape, total),
        d_src: item(&tape, ds),
        d_tgt: item(&tape, dt),
    };
    Ok(StepReport { d_step_adv, record })
}

/// Alternating domain-adversarial adaptation.
///
/// A fresh discriminator is drawn from `cfg.seed`. Each of `cfg.max_adapt_iters` epochs
/// visits the source samples in order and pairs each with a uniformly drawn target
/// sample (with replacement).
pub fn dann_adapt<F: Scalar, M: DannModel<F>>(
    model: &M,
    pretrained: &ParamStore<F>,
    data: &DomainBatch<M::Input, M::Label>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&AdaptRecord),
) -> Result<AdaptOutcome<F>, TrainError> {
    cfg.validate()?;
    if data.source.is_empty() {
        return Err(TrainError::EmptySet("source"));
    }
    if data.target.is_empty() {
        return Err(TrainError::EmptySet("target"));
    }
    for x in data.source.iter().map(|s| &s.0).chain(&data.target) {
        model.check_sample(x)?;
    }
    let mut fr = pretrained.filtered(|k| !model.is_discriminator(k));
    let mut d = model.init_discriminator(cfg.seed);
    let mut adam_fr = AdamState::new(cfg.adam());
    let mut adam_d = AdamState::new(cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TARGET_STREAM);

    let mut trace = Vec::with_capacity(cfg.max_adapt_iters * data.source.len());
    let mut initial = None;
    let mut above = 0usize;
    let mut iteration = 0usize;
    for _ in 0..cfg.max_adapt_iters {
        for src in &data.source {
            iteration += 1;
            let j = rng.random_range(0..data.target.len());
            let step = adversarial_step(
                model,
                &mut fr,
                &mut d,
                &mut adam_fr,
                &mut adam_d,
                src,
                &data.target[j],
                cfg,
                iteration,
            )?;
            let rec = step.record;
            trace.push(rec);
            on_step(&rec);
            let init = *initial.get_or_insert(rec.total);
            above = if rec.total > DIVERGENCE_FACTOR * init { above + 1 } else { 0 };
            if above >= DIVERGENCE_WINDOW {
                log::error!("adaptation diverged at iteration {iteration}");
                return Err(TrainError::Diverged { iteration, window: DIVERGENCE_WINDOW, trace });
            }
        }
    }
    Ok(AdaptOutcome { params: fr, discriminator: d, trace })
}

/// Fraction of correct domain calls (`d_src < 0.5`, `d_tgt > 0.5`) over the last `n` records.
pub fn discriminator_accuracy(trace: &[AdaptRecord], n: usize) -> f64 {
    let tail = &trace[trace.len().saturating_sub(n)..];
    if tail.is_empty() {
        return f64::NAN;
    }
    let hits: usize = tail.iter().map(|r| usize::from(r.d_src < 0.5) + usize::from(r.d_tgt > 0.5)).sum();
    hits as f64 / (2 * tail.len()) as f64
}

pub fn pretrain_csv(trace: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,ce,tv,total\n");
    for r in trace {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.ce, r.tv, r.total);
    }
    s
}

pub fn adapt_csv(trace: &[AdaptRecord]) -> String {
    let mut s = String::from("iteration,ce,tv,adv,total,d_src,d_tgt\n");
    for r in trace {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.iteration, r.ce, r.tv, r.adv, r.total, r.d_src, r.d_tgt);
    }
    s
}
