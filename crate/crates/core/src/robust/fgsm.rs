use crate::autograd::Real;
use crate::net::{ModelState, NetError};

use super::config::{FgsmConfig, TargetMode};

/// `sign` with `sign(0) = 0`.
fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Clamps `v` into `[x0 − ε, x0 + ε]`, nudging by one ulp where rounding of
/// the bound would leave `|v − x0| > ε`.
pub(crate) fn clamp_to_ball<T: Real>(v: T, x0: T, eps: T) -> T {
    let mut v = v.max(x0 - eps).min(x0 + eps);
    let eps64 = eps.to_f64().unwrap();
    while (v.to_f64().unwrap() - x0.to_f64().unwrap()).abs() > eps64 {
        v = v.step_toward(x0);
    }
    v
}

/// Largest `T` not above `eps`, so the ball in `T` never exceeds the
/// requested radius.
fn radius_below<T: Real>(eps: f64) -> T {
    let mut r = T::from_f64_lossy(eps);
    while r.to_f64().unwrap() > eps {
        r = r.step_toward(T::zero());
    }
    r
}

/// Iterated sign-gradient perturbation of a batch inside an ∞-norm ball.
///
/// Each of the `steps` iterations moves every voxel by `±alpha` (or not at all
/// where the gradient is exactly zero) and then clamps to the ball of radius
/// `epsilon` around the original input.
pub fn fgsm_attack<T: Real>(
    model: &ModelState<T>,
    batch: &[&[T]],
    labels: &[usize],
    cfg: &FgsmConfig,
) -> Result<Vec<Vec<T>>, NetError> {
    let (target, direction): (Vec<usize>, T) = match cfg.target_mode {
        TargetMode::AscendTrueLabel => (labels.to_vec(), T::one()),
        TargetMode::DescendAdverseLabel => (labels.iter().map(|&y| 1 - y.min(1)).collect(), -T::one()),
    };
    let alpha = T::from_f64_lossy(cfg.alpha);
    let eps = radius_below::<T>(cfg.epsilon);
    let mut adv: Vec<Vec<T>> = batch.iter().map(|x| x.to_vec()).collect();
    if cfg.alpha == 0.0 {
        return Ok(adv);
    }
    for _ in 0..cfg.steps {
        let refs: Vec<&[T]> = adv.iter().map(Vec::as_slice).collect();
        let grads = model.input_gradient(&refs, &target)?;
        for ((xa, x0), g) in adv.iter_mut().zip(batch).zip(&grads) {
            for ((v, &o), &gv) in xa.iter_mut().zip(x0.iter()).zip(g) {
                let s = sign(gv);
                if s != T::zero() {
                    *v = clamp_to_ball(*v + direction * alpha * s, o, eps);
                }
            }
        }
    }
    Ok(adv)
}
