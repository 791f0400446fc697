//! Training losses built on the tape so every term is differentiable.

use crate::depth::{bin_depth_m, BinIndexMap, SPEED_OF_LIGHT};
use crate::numerics::{NumericsError, Scalar, Tape, Var};

pub const LAMBDA_TV: f64 = 0.001;
pub const LAMBDA_A: f64 = 0.1;
/// Lower clamp of probabilities inside the cross-entropy log.
pub const CE_FLOOR: f64 = 1e-12;
/// Discriminator outputs are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Scalar loss on the tape plus its logged components.
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub tv: f64,
    pub adv: f64,
    pub total: f64,
}

fn item<F: Scalar>(tape: &Tape<F>, v: Var) -> f64 {
    tape.value(v).data()[0].as_f64()
}

fn cst<F: Scalar>(x: f64) -> F {
    F::from_f64_lossy(x)
}

/// `Σ_pixels −ln ĥ[z]` for a `[1, T, H, W]` distribution and per-pixel target bins.
pub fn ce_loss<F: Scalar>(tape: &mut Tape<F>, h_hat: Var, bins: &BinIndexMap) -> Result<Var, NumericsError> {
    let s = tape.shape(h_hat);
    if s.len() == 4 && (s[2], s[3]) != bins.dims() {
        return Err(NumericsError::ShapeMismatch {
            op: "ce_loss",
            detail: format!("prediction {s:?} vs labels {:?}", bins.dims()),
        });
    }
    let picked = tape.gather_temporal(h_hat, bins.bins())?;
    let logs = tape.log_clamped(picked, cst(CE_FLOOR), F::one());
    let total = tape.sum(logs);
    Ok(tape.scale(total, -F::one()))
}

/// Anisotropic total variation of an `[H, W]` map over in-bounds neighbour pairs.
pub fn tv_loss<F: Scalar>(tape: &mut Tape<F>, z_hat: Var) -> Result<Var, NumericsError> {
    let mut parts = [z_hat; 2];
    for (axis, part) in parts.iter_mut().enumerate() {
        let d = tape.diff2d(z_hat, axis)?;
        let a = tape.abs(d);
        *part = tape.sum(a);
    }
    tape.add(parts[0], parts[1])
}

/// Differentiable softargmax depth in meters, `[H, W]`, with 0-based bin indices.
pub fn softargmax<F: Scalar>(tape: &mut Tape<F>, h_hat: Var, delta_ps: f64) -> Result<Var, NumericsError> {
    tape.temporal_expectation(h_hat, cst(bin_depth_m(delta_ps, SPEED_OF_LIGHT)))
}

/// `ce + λ_TV · tv(softargmax(ĥ))`.
pub fn supervised_loss<F: Scalar>(
    tape: &mut Tape<F>,
    h_hat: Var,
    bins: &BinIndexMap,
    delta_ps: f64,
    lambda_tv: f64,
) -> Result<LossValue, NumericsError> {
    if !(lambda_tv >= 0.0) {
        return Err(NumericsError::InvalidArgument {
            op: "supervised_loss",
            detail: format!("lambda_tv = {lambda_tv}"),
        });
    }
    let ce = ce_loss(tape, h_hat, bins)?;
    let z = softargmax(tape, h_hat, delta_ps)?;
    let tv = tv_loss(tape, z)?;
    let weighted = tape.scale(tv, cst(lambda_tv));
    let loss = tape.add(ce, weighted)?;
    let breakdown = LossBreakdown { ce: item(tape, ce), tv: item(tape, tv), adv: 0.0, total: item(tape, loss) };
    Ok(LossValue { loss, breakdown })
}

/// `ln d_src − ln(1 − d_tgt)` with both probabilities clamped away from 0 and 1.
pub fn adversarial_loss<F: Scalar>(tape: &mut Tape<F>, d_src: Var, d_tgt: Var) -> Result<Var, NumericsError> {
    let (lo, hi) = (cst(PROB_CLAMP), cst(1.0 - PROB_CLAMP));
    let ls = tape.log_clamped(d_src, lo, hi);
    let q = tape.one_minus(d_tgt);
    let lt = tape.log_clamped(q, lo, hi);
    tape.sub(ls, lt)
}

/// `sup − λ_a · adv`.
pub fn total_adaptation_loss<F: Scalar>(
    tape: &mut Tape<F>,
    sup: Var,
    adv: Var,
    lambda_a: f64,
) -> Result<Var, NumericsError> {
    if !(lambda_a >= 0.0) {
        return Err(NumericsError::InvalidArgument {
            op: "total_adaptation_loss",
            detail: format!("lambda_a = {lambda_a}"),
        });
    }
    let weighted = tape.scale(adv, cst(lambda_a));
    tape.sub(sup, weighted)
}
