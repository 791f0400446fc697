//! Finite-difference verification of every differentiable operator and loss.
//!
//! Each case draws random small inputs, forms `L = Σ y ⊙ r` for a fixed random `r`,
//! and compares tape gradients with central differences in f64. The error of an
//! instance is `‖g_tape − g_fd‖ / max(‖g_tape‖ + ‖g_fd‖, 1e-6)` over all inputs.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::depth::BinIndexMap;
use crate::numerics::{Activation, NumericsError, PoolMode, Tape, Tensor, Var};
use crate::objectives::{adversarial_loss, ce_loss, softargmax, supervised_loss, total_adaptation_loss, tv_loss};
use crate::params::Bound;
use crate::stin::{Stin, StinConfig};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;

type BuildFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>>;

/// One random instance: inputs to differentiate and the graph to apply to them.
pub struct Instance {
    pub inputs: Vec<Tensor<f64>>,
    pub build: BuildFn,
}

pub struct OpCase {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> Instance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    /// Smooth instances checked.
    pub instances: usize,
    /// Instances rejected for sitting on a kink.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("op,instances,skipped,max_rel_err,passed\n");
        for c in &self.cases {
            s.push_str(&format!("{},{},{},{:e},{}\n", c.name, c.instances, c.skipped, c.max_rel_err, c.passed));
        }
        s
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22}{:>10}{:>9}{:>14}  result", "op", "instances", "skipped", "max rel err")?;
        for c in &self.cases {
            let verdict = if c.passed { "pass" } else { "FAIL" };
            writeln!(f, "{:<22}{:>10}{:>9}{:>14.3e}  {verdict}", c.name, c.instances, c.skipped, c.max_rel_err)?;
        }
        Ok(())
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Entries of magnitude at least `gap`, so kinks sit far from every sample.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// A shuffled ladder of well-separated values (no near-ties for max pooling).
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).expect("sized")
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn random_bins(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> BinIndexMap {
    BinIndexMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..t)).collect()).expect("sized")
}

fn case_conv(rng: &mut ChaCha8Rng) -> Instance {
    let (ci, co) = (dim(rng, 1, 3), dim(rng, 1, 3));
    let k = [2 * dim(rng, 0, 1) + 1, 2 * dim(rng, 0, 1) + 1, 2 * dim(rng, 0, 1) + 1];
    let pad = [k[0] / 2, rng.random_range(0..=k[1] / 2), k[2] / 2];
    let shape = [ci, dim(rng, 2, 5), dim(rng, 3, 4), dim(rng, 2, 4)];
    let x = rand_tensor(rng, &shape);
    let w = rand_tensor(rng, &[co, ci, k[0], k[1], k[2]]);
    let b = rand_tensor(rng, &[co]);
    Instance { inputs: vec![x, w, b], build: Box::new(move |t, v| t.conv3d(v[0], v[1], v[2], pad)) }
}

fn case_deconv(rng: &mut ChaCha8Rng) -> Instance {
    let (ci, co) = (dim(rng, 1, 3), dim(rng, 1, 3));
    let kt = dim(rng, 2, 4);
    let stride = [2, 1, 1];
    let pad = [rng.random_range(0..=(kt - 1) / 2), 1, rng.random_range(0..=1)];
    let shape = [ci, dim(rng, 1, 4), dim(rng, 2, 3), dim(rng, 2, 3)];
    let x = rand_tensor(rng, &shape);
    let w = rand_tensor(rng, &[ci, co, kt, 3, 3]);
    let b = rand_tensor(rng, &[co]);
    Instance { inputs: vec![x, w, b], build: Box::new(move |t, v| t.deconv3d(v[0], v[1], v[2], stride, pad)) }
}

fn case_pool(rng: &mut ChaCha8Rng, mode: PoolMode) -> Instance {
    let k = [dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 1, 2)];
    let shape = [dim(rng, 1, 3), k[0] * dim(rng, 1, 3), k[1] * dim(rng, 1, 2), k[2] * dim(rng, 1, 2)];
    let x = if mode == PoolMode::Max { distinct(rng, &shape) } else { rand_tensor(rng, &shape) };
    Instance { inputs: vec![x], build: Box::new(move |t, v| t.pool3d(v[0], mode, k)) }
}

fn case_group_norm(rng: &mut ChaCha8Rng) -> Instance {
    let groups = dim(rng, 1, 2);
    let c = groups * dim(rng, 1, 2);
    let shape = [c, dim(rng, 2, 4), dim(rng, 1, 3), dim(rng, 2, 3)];
    let x = rand_tensor(rng, &shape);
    let gamma = rand_tensor(rng, &[c]);
    let beta = rand_tensor(rng, &[c]);
    Instance { inputs: vec![x, gamma, beta], build: Box::new(move |t, v| t.group_norm(v[0], groups, v[1], v[2], 1e-5)) }
}

fn case_activation(rng: &mut ChaCha8Rng, kind: Activation) -> Instance {
    let shape = [1, dim(rng, 2, 8), dim(rng, 1, 5), dim(rng, 1, 5)];
    let x = if kind == Activation::Relu { away_from_zero(rng, &shape, 1e-3) } else { rand_tensor(rng, &shape) };
    Instance { inputs: vec![x], build: Box::new(move |t, v| t.activation(v[0], kind)) }
}

fn case_linear(rng: &mut ChaCha8Rng) -> Instance {
    let (n, m) = (dim(rng, 1, 8), dim(rng, 1, 5));
    let inputs = vec![rand_tensor(rng, &[n]), rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m])];
    Instance { inputs, build: Box::new(|t, v| t.linear(v[0], v[1], v[2])) }
}

fn case_concat(rng: &mut ChaCha8Rng) -> Instance {
    let rest = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
    let parts = dim(rng, 2, 4);
    let inputs = (0..parts)
        .map(|_| {
            let c = dim(rng, 1, 3);
            rand_tensor(rng, &[c, rest[0], rest[1], rest[2]])
        })
        .collect();
    Instance { inputs, build: Box::new(|t, v| t.concat_channels(v)) }
}

fn case_elementwise(rng: &mut ChaCha8Rng) -> Instance {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
    let s = rng.random_range(-2.0..2.0);
    let inputs = vec![rand_tensor(rng, &shape), rand_tensor(rng, &shape), rand_tensor(rng, &shape)];
    Instance {
        inputs,
        build: Box::new(move |t, v| {
            let p = t.mul(v[0], v[1])?;
            let q = t.add(p, v[2])?;
            let r = t.one_minus(v[1]);
            let q = t.sub(q, r)?;
            let q = t.scale(q, s);
            let flat = t.value(q).len();
            t.reshape(q, &[flat])
        }),
    }
}

fn logits(rng: &mut ChaCha8Rng) -> (Tensor<f64>, usize, usize, usize) {
    let (tb, h, w) = (dim(rng, 2, 8), dim(rng, 1, 4), dim(rng, 1, 4));
    (rand_tensor(rng, &[1, tb, h, w]), tb, h, w)
}

fn case_ce(rng: &mut ChaCha8Rng) -> Instance {
    let (x, tb, h, w) = logits(rng);
    let bins = random_bins(rng, tb, h, w);
    Instance {
        inputs: vec![x],
        build: Box::new(move |t, v| {
            let p = t.activation(v[0], Activation::SoftmaxTemporal)?;
            ce_loss(t, p, &bins)
        }),
    }
}

fn case_tv(rng: &mut ChaCha8Rng) -> Instance {
    let (h, w) = (dim(rng, 1, 5), dim(rng, 1, 5));
    // Neighbouring entries differ by at least 0.05.
    let z = distinct(rng, &[h, w]);
    Instance { inputs: vec![z], build: Box::new(|t, v| tv_loss(t, v[0])) }
}

fn case_softargmax(rng: &mut ChaCha8Rng) -> Instance {
    let (x, ..) = logits(rng);
    Instance {
        inputs: vec![x],
        build: Box::new(|t, v| {
            let p = t.activation(v[0], Activation::SoftmaxTemporal)?;
            softargmax(t, p, 80.0)
        }),
    }
}

fn case_supervised(rng: &mut ChaCha8Rng) -> Instance {
    let (x, tb, h, w) = logits(rng);
    let bins = random_bins(rng, tb, h, w);
    let lambda = rng.random_range(0.0..50.0);
    Instance {
        inputs: vec![x],
        build: Box::new(move |t, v| {
            let p = t.activation(v[0], Activation::SoftmaxTemporal)?;
            Ok(supervised_loss(t, p, &bins, 80.0, lambda)?.loss)
        }),
    }
}

fn probs(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::scalar(rng.random_range(0.02..0.98))
}

fn case_adversarial(rng: &mut ChaCha8Rng) -> Instance {
    Instance { inputs: vec![probs(rng), probs(rng)], build: Box::new(|t, v| adversarial_loss(t, v[0], v[1])) }
}

fn case_total(rng: &mut ChaCha8Rng) -> Instance {
    let lambda = rng.random_range(0.0..1.0);
    let inputs = vec![rand_tensor(rng, &[1]), probs(rng), probs(rng)];
    Instance {
        inputs,
        build: Box::new(move |t, v| {
            let adv = adversarial_loss(t, v[1], v[2])?;
            total_adaptation_loss(t, v[0], adv, lambda)
        }),
    }
}

/// Two-block network on `[1, 4, 2, 2]` inputs.
fn tiny_stin() -> Stin {
    let cfg = StinConfig {
        bins: 4,
        temporal_kernel: 3,
        spatial_kernel: 3,
        trunk_channels: vec![4, 4],
        pools: 1,
        patch: (2, 2),
        disc_pool: [1, 2, 2],
        disc_hidden: [3, 2],
    };
    Stin::new(cfg).expect("valid tiny config")
}

/// Input plus every parameter of a tiny STIN (random gamma/beta too, so no init symmetry).
fn stin_instance(
    rng: &mut ChaCha8Rng,
    head: fn(&Stin, &mut Tape<f64>, &Bound, Var) -> Result<Var, NumericsError>,
) -> Instance {
    let net = tiny_stin();
    let specs = net.config().parameter_specs();
    let mut inputs = vec![rand_tensor(rng, &[1, 4, 2, 2])];
    let paths: Vec<String> = specs.iter().map(|s| s.path.clone()).collect();
    inputs.extend(specs.iter().map(|s| rand_tensor(rng, &s.shape)));
    Instance {
        inputs,
        build: Box::new(move |t, v| {
            let bound = Bound::from_pairs(paths.iter().cloned().zip(v[1..].iter().copied()));
            head(&net, t, &bound, v[0])
        }),
    }
}

fn model_err(e: crate::stin::StinError) -> NumericsError {
    match e {
        crate::stin::StinError::Numerics(n) => n,
        other => NumericsError::InvalidArgument { op: "stin", detail: other.to_string() },
    }
}

fn case_st_block(rng: &mut ChaCha8Rng) -> Instance {
    stin_instance(rng, |net, t, p, x| net.st_block(t, p, 1, x).map_err(model_err))
}

fn case_stin_forward(rng: &mut ChaCha8Rng) -> Instance {
    stin_instance(rng, |net, t, p, x| net.forward(t, p, x).map_err(model_err))
}

fn case_discriminate(rng: &mut ChaCha8Rng) -> Instance {
    stin_instance(rng, |net, t, p, x| {
        let f = net.feature_extract(t, p, x).map_err(model_err)?;
        net.discriminate(t, p, f).map_err(model_err)
    })
}

pub fn cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "conv3d", make: case_conv },
        OpCase { name: "deconv3d", make: case_deconv },
        OpCase { name: "pool3d_max", make: |r| case_pool(r, PoolMode::Max) },
        OpCase { name: "pool3d_average", make: |r| case_pool(r, PoolMode::Average) },
        OpCase { name: "group_norm", make: case_group_norm },
        OpCase { name: "relu", make: |r| case_activation(r, Activation::Relu) },
        OpCase { name: "sigmoid", make: |r| case_activation(r, Activation::Sigmoid) },
        OpCase { name: "softmax_temporal", make: |r| case_activation(r, Activation::SoftmaxTemporal) },
        OpCase { name: "linear", make: case_linear },
        OpCase { name: "concat_channels", make: case_concat },
        OpCase { name: "elementwise", make: case_elementwise },
        OpCase { name: "ce_loss", make: case_ce },
        OpCase { name: "tv_loss", make: case_tv },
        OpCase { name: "softargmax", make: case_softargmax },
        OpCase { name: "supervised_loss", make: case_supervised },
        OpCase { name: "adversarial_loss", make: case_adversarial },
        OpCase { name: "total_adaptation_loss", make: case_total },
        OpCase { name: "st_block", make: case_st_block },
        OpCase { name: "stin_forward", make: case_stin_forward },
        OpCase { name: "stin_discriminate", make: case_discriminate },
    ]
}

fn weighted_loss(
    tape: &mut Tape<f64>,
    inst: &Instance,
    inputs: &[Tensor<f64>],
    weights: &mut Option<Tensor<f64>>,
    rng: &mut ChaCha8Rng,
    grad: bool,
) -> Result<(f64, Vec<Var>), NumericsError> {
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), grad)).collect();
    let y = (inst.build)(tape, &vars)?;
    let r = weights.get_or_insert_with(|| rand_tensor(rng, tape.shape(y))).clone();
    let r = tape.constant(r);
    let prod = tape.mul(y, r)?;
    let loss = tape.sum(prod);
    if grad {
        tape.backward(loss)?;
    }
    Ok((tape.value(loss).data()[0], vars))
}

/// Central differences at `h` and `h/2` disagreeing by more than this (relative) mark an
/// input that straddles a ReLU or max-pool kink.
const KINK_TOL: f64 = 1e-6;

/// Fresh instances drawn per requested instance before a case gives up on smooth points.
const MAX_DRAWS_PER_INSTANCE: usize = 5;

/// Relative error of one instance, or `None` when some input sits within `FD_STEP` of a
/// non-differentiable point and finite differences are meaningless there.
pub fn check_instance(inst: &Instance, rng: &mut ChaCha8Rng) -> Result<Option<f64>, NumericsError> {
    let mut weights = None;
    let mut tape = Tape::new();
    let (_, vars) = weighted_loss(&mut tape, inst, &inst.inputs, &mut weights, rng, true)?;
    let analytic: Vec<f64> = vars
        .iter()
        .zip(&inst.inputs)
        .flat_map(|(v, x)| tape.grad(*v).map_or_else(|| vec![0.0; x.len()], |g| g.data().to_vec()))
        .collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut inputs = inst.inputs.clone();
    for a in 0..inputs.len() {
        for k in 0..inputs[a].len() {
            let orig = inputs[a].data()[k];
            let mut central = |h: f64, inputs: &mut Vec<Tensor<f64>>| -> Result<f64, NumericsError> {
                let mut eval = |v: f64| -> Result<f64, NumericsError> {
                    inputs[a].data_mut()[k] = v;
                    let mut t = Tape::new();
                    Ok(weighted_loss(&mut t, inst, inputs, &mut weights, rng, false)?.0)
                };
                let d = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
                inputs[a].data_mut()[k] = orig;
                Ok(d)
            };
            let d = central(FD_STEP, &mut inputs)?;
            let d_half = central(FD_STEP / 2.0, &mut inputs)?;
            if (d - d_half).abs() > KINK_TOL * (d.abs() + 1.0) {
                return Ok(None);
            }
            numeric.push(d);
        }
    }
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(&numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    Ok(Some(diff / scale.max(1e-6)))
}

/// Checks `instances` smooth random instances; instances that straddle a kink are
/// redrawn and counted in `skipped`.
pub fn run_case(case: &OpCase, instances: usize, seed: u64) -> Result<CaseReport, NumericsError> {
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    let mut draw = 0u64;
    while checked < instances && draw < (instances * MAX_DRAWS_PER_INSTANCE) as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(crate::params::path_stream(case.name) ^ draw);
        draw += 1;
        let inst = (case.make)(&mut rng);
        match check_instance(&inst, &mut rng)? {
            Some(e) => {
                checked += 1;
                max_rel_err = if e.is_nan() { f64::INFINITY } else { max_rel_err.max(e) };
            }
            None => skipped += 1,
        }
    }
    let passed = checked == instances && max_rel_err < REL_TOL;
    Ok(CaseReport { name: case.name, instances: checked, skipped, max_rel_err, passed })
}

pub fn run_suite(instances: usize, seed: u64) -> Result<SuiteReport, NumericsError> {
    let cases = cases().iter().map(|c| run_case(c, instances, seed)).collect::<Result<_, _>>()?;
    Ok(SuiteReport { cases })
}
