//! Rectified-flow path `x_t = (1 - t) x + t eps`, its constant velocity
//! target `eps - x`, the regression loss, and the velocity-to-score
//! conversion used by the stochastic sampler.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Default lower clamp on `t` when dividing by it.
pub const DEFAULT_T_FLOOR: f64 = 1e-3;

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

/// One point on the straight path between a clean latent and its noise.
#[derive(Debug, Clone)]
pub struct FlowSample<E: Element> {
    pub x: Tensor<E>,
    pub eps: Tensor<E>,
    pub t: f64,
    pub x_t: Tensor<E>,
}

impl<E: Element> FlowSample<E> {
    pub fn new(x: Tensor<E>, eps: Tensor<E>, t: f64) -> Result<Self> {
        let x_t = interpolate(&x, &eps, t)?;
        Ok(Self { x, eps, t, x_t })
    }

    pub fn target(&self) -> Tensor<E> {
        velocity_target(&self.x, &self.eps).expect("shapes checked at construction")
    }
}

/// `(1 - t) x + t eps`. Returns `x` / `eps` bit-for-bit at `t = 0` / `t = 1`.
pub fn interpolate<E: Element>(x: &Tensor<E>, eps: &Tensor<E>, t: f64) -> Result<Tensor<E>> {
    check_t(t)?;
    x.same_shape(eps, "interpolate")?;
    if t == 0.0 {
        return Ok(x.clone());
    }
    if t == 1.0 {
        return Ok(eps.clone());
    }
    let (a, b) = (E::from_f64(1.0 - t), E::from_f64(t));
    x.zip_map(eps, "interpolate", |x, e| a * x + b * e)
}

/// Velocity regression target `eps - x`.
pub fn velocity_target<E: Element>(x: &Tensor<E>, eps: &Tensor<E>) -> Result<Tensor<E>> {
    eps.sub(x)
}

/// Mean over elements of `((eps - x) - v_pred)^2`.
pub fn flow_loss<E: Element>(v_pred: &Tensor<E>, x: &Tensor<E>, eps: &Tensor<E>) -> Result<f64> {
    let target = velocity_target(x, eps)?;
    v_pred.same_shape(&target, "flow_loss")?;
    let total: f64 = target
        .data()
        .iter()
        .zip(v_pred.data())
        .map(|(&y, &v)| {
            let d = (y - v).as_f64();
            d * d
        })
        .sum();
    Ok(total / target.len() as f64)
}

/// Clean-latent and noise estimates implied by a velocity at `(x_t, t)`:
/// `x_hat = x_t - t v`, `eps_hat = x_t + (1 - t) v`.
pub fn recover<E: Element>(v: &Tensor<E>, x_t: &Tensor<E>, t: f64) -> Result<(Tensor<E>, Tensor<E>)> {
    check_t(t)?;
    let x_hat = x_t.axpy(E::from_f64(-t), v)?;
    let eps_hat = x_t.axpy(E::from_f64(1.0 - t), v)?;
    Ok((x_hat, eps_hat))
}

/// Score of the conditional Gaussian `x_t | x_hat ~ N((1-t) x_hat, t^2 I)`
/// evaluated through the velocity: `-(x_t + (1 - t) v) / max(t, t_floor)`.
pub fn velocity_to_score<E: Element>(v: &Tensor<E>, x_t: &Tensor<E>, t: f64, t_floor: f64) -> Result<Tensor<E>> {
    check_t(t)?;
    if t_floor <= 0.0 {
        return Err(Error::InvalidArgument(format!("t_floor must be positive, got {t_floor}")));
    }
    let denom = t.max(t_floor);
    let (c, inv) = (E::from_f64(1.0 - t), E::from_f64(-1.0 / denom));
    x_t.zip_map(v, "velocity_to_score", |x, v| (x + c * v) * inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn interpolation_examples() {
        let x = t1(&[2.0, -0.0]);
        let e = t1(&[0.0, 5.0]);
        assert_eq!(interpolate(&x, &e, 0.0).unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(interpolate(&x, &e, 1.0).unwrap(), e);
        assert_eq!(interpolate(&t1(&[2.0]), &t1(&[0.0]), 0.5).unwrap().data(), &[1.0]);
        assert!(interpolate(&x, &e, 1.5).is_err());
        assert!(interpolate(&x, &t1(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn target_and_loss_examples() {
        assert_eq!(velocity_target(&t1(&[1.0]), &t1(&[3.0])).unwrap().data(), &[2.0]);
        let x = t1(&[0.5, 1.5]);
        assert!(velocity_target(&x, &x).unwrap().data().iter().all(|&v| v == 0.0));
        let e = t1(&[2.0, -1.0]);
        let exact = velocity_target(&x, &e).unwrap();
        assert_eq!(flow_loss(&exact, &x, &e).unwrap(), 0.0);
        let off = exact.map(|v| v + 1.0);
        assert_eq!(flow_loss(&off, &x, &e).unwrap(), 1.0);
    }

    #[test]
    fn score_examples() {
        let mut rng = SeededRng::new(4, 0);
        let eps: Tensor<f64> = rng.normal_tensor(&[8]);
        // t = 1: x_t = eps, any v -> score -x_t
        let v: Tensor<f64> = rng.normal_tensor(&[8]);
        let s = velocity_to_score(&v, &eps, 1.0, DEFAULT_T_FLOOR).unwrap();
        assert_eq!(s, eps.scale(-1.0));
        // exact velocity at t = 0.5 -> -eps / 0.5
        let x: Tensor<f64> = rng.normal_tensor(&[8]);
        let xt = interpolate(&x, &eps, 0.5).unwrap();
        let s = velocity_to_score(&velocity_target(&x, &eps).unwrap(), &xt, 0.5, DEFAULT_T_FLOOR).unwrap();
        assert!(s.max_abs_diff(&eps.scale(-2.0)).unwrap() < 1e-12);
        // t = 0 clamps
        let s = velocity_to_score(&v, &x, 0.0, 1e-3).unwrap();
        assert!(s.all_finite());
        let expect = x.add(&v).unwrap().scale(-1e3);
        assert!(s.max_abs_diff(&expect).unwrap() < 1e-9);
        assert!(velocity_to_score(&v, &x, 0.5, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn target_is_path_derivative(seed in any::<u64>(), t in 0.01f64..0.99) {
            // oracle: central difference of the path in t
            let mut rng = SeededRng::new(seed, 0);
            let x: Tensor<f64> = rng.normal_tensor(&[6]);
            let e: Tensor<f64> = rng.normal_tensor(&[6]);
            let h = 1e-3;
            let fd = interpolate(&x, &e, t + h).unwrap().sub(&interpolate(&x, &e, t - h).unwrap()).unwrap().scale(0.5 / h);
            prop_assert!(fd.max_abs_diff(&velocity_target(&x, &e).unwrap()).unwrap() <= 1e-6);
        }

        #[test]
        fn loss_nonnegative_zero_iff_exact(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed, 1);
            let x: Tensor<f64> = rng.normal_tensor(&[5]);
            let e: Tensor<f64> = rng.normal_tensor(&[5]);
            let v: Tensor<f64> = rng.normal_tensor(&[5]);
            prop_assert!(flow_loss(&v, &x, &e).unwrap() > 0.0);
            prop_assert_eq!(flow_loss(&velocity_target(&x, &e).unwrap(), &x, &e).unwrap(), 0.0);
        }

        #[test]
        fn recovered_pair_is_consistent(seed in any::<u64>(), t in 0.0f64..=1.0) {
            let mut rng = SeededRng::new(seed, 2);
            let v: Tensor<f64> = rng.normal_tensor(&[7]);
            let xt: Tensor<f64> = rng.normal_tensor(&[7]);
            let (xh, eh) = recover(&v, &xt, t).unwrap();
            prop_assert!(xh.axpy(t, &v).unwrap().max_abs_diff(&xt).unwrap() <= 1e-6);
            prop_assert!(eh.axpy(-(1.0 - t), &v).unwrap().max_abs_diff(&xt).unwrap() <= 1e-6);
        }

        #[test]
        fn score_is_linear(seed in any::<u64>(), t in 0.0f64..=1.0, a in -3.0f64..3.0) {
            let mut rng = SeededRng::new(seed, 3);
            let (v1, x1): (Tensor<f64>, Tensor<f64>) = (rng.normal_tensor(&[4]), rng.normal_tensor(&[4]));
            let (v2, x2): (Tensor<f64>, Tensor<f64>) = (rng.normal_tensor(&[4]), rng.normal_tensor(&[4]));
            let s = |v: &Tensor<f64>, x: &Tensor<f64>| velocity_to_score(v, x, t, DEFAULT_T_FLOOR).unwrap();
            let lhs = s(&v1.axpy(a, &v2).unwrap(), &x1.axpy(a, &x2).unwrap());
            let rhs = s(&v1, &x1).axpy(a, &s(&v2, &x2)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-9 * (1.0 + rhs.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))));
        }
    }
}
