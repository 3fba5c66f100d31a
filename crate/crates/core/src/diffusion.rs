//! Variance-preserving cosine diffusion: `x_t = cos(πt/2)·x0 + sin(πt/2)·ε`.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Array;

/// `α_t`, `σ_t` and their time derivatives at one `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleValues {
    pub alpha: f64,
    pub sigma: f64,
    pub d_alpha: f64,
    pub d_sigma: f64,
}

/// The cosine VP schedule. `α² + σ² = 1` for every `t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Schedule;

impl Schedule {
    pub fn eval(&self, t: f64) -> Result<ScheduleValues> {
        check_time(t)?;
        let (s, c) = (FRAC_PI_2 * t).sin_cos();
        Ok(ScheduleValues {
            alpha: c,
            sigma: s,
            d_alpha: -FRAC_PI_2 * s,
            d_sigma: FRAC_PI_2 * c,
        })
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("diffusion time {t} outside [0, 1]")));
    }
    Ok(())
}

/// A noisy sample `z` at diffusion time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionPoint {
    pub z: Array,
    pub t: f64,
}

impl DiffusionPoint {
    pub fn new(z: Array, t: f64) -> Result<Self> {
        check_time(t)?;
        Ok(Self { z, t })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    Epsilon,
    X0,
    Velocity,
}

/// A network output under one of the three parameterizations.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mode: PredictionMode,
    pub value: Array,
}

pub fn forward_diffuse(x0: &Array, t: f64, eps: &Array) -> Result<DiffusionPoint> {
    let s = Schedule.eval(t)?;
    x0.expect_same_shape(eps, "forward_diffuse")?;
    let z = x0.zip_map(eps, "forward_diffuse", |x, e| s.alpha * x + s.sigma * e)?;
    Ok(DiffusionPoint { z, t })
}

/// `v = α̇·x0 + σ̇·ε`, the time derivative of [`forward_diffuse`].
pub fn velocity_target(x0: &Array, eps: &Array, t: f64) -> Result<Array> {
    let s = Schedule.eval(t)?;
    x0.zip_map(eps, "velocity_target", |x, e| s.d_alpha * x + s.d_sigma * e)
}

/// Recovers the clean-sample estimate from a prediction in any mode.
pub fn to_x0(pred: &Prediction, point: &DiffusionPoint) -> Result<Array> {
    pred.value.expect_same_shape(&point.z, "to_x0")?;
    let s = Schedule.eval(point.t)?;
    match pred.mode {
        PredictionMode::X0 => Ok(pred.value.clone()),
        PredictionMode::Epsilon => {
            if s.alpha < 1e-8 {
                return Err(Error::Singular {
                    t: point.t,
                    detail: "epsilon prediction carries no signal where alpha vanishes",
                });
            }
            point
                .z
                .zip_map(&pred.value, "to_x0", |z, e| (z - s.sigma * e) / s.alpha)
        }
        PredictionMode::Velocity => {
            // σ̇z − σv = (σ̇α − σα̇)·x0, and σ̇α − σα̇ = π/2 on the cosine
            // schedule, so this never divides by zero.
            let den = s.d_sigma * s.alpha - s.sigma * s.d_alpha;
            point
                .z
                .zip_map(&pred.value, "to_x0", |z, v| (s.d_sigma * z - s.sigma * v) / den)
        }
    }
}

/// `ε̂ = (z − α·x̂0)/σ`; undefined at `t = 0`.
pub fn epsilon_from_x0(point: &DiffusionPoint, x0: &Array) -> Result<Array> {
    let s = Schedule.eval(point.t)?;
    if s.sigma == 0.0 {
        return Err(Error::Singular {
            t: point.t,
            detail: "noise estimate undefined where sigma vanishes",
        });
    }
    point
        .z
        .zip_map(x0, "epsilon_from_x0", |z, x| (z - s.alpha * x) / s.sigma)
}

/// Mean over elements of `(v_pred − v)²`.
pub fn flow_matching_loss(v_pred: &Array, x0: &Array, eps: &Array, t: f64) -> Result<f64> {
    let target = velocity_target(x0, eps, t)?;
    let diff = v_pred.sub(&target)?;
    Ok(diff.sq_norm() / diff.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const PI_2: f64 = std::f64::consts::FRAC_PI_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn schedule_endpoints() {
        let s0 = Schedule.eval(0.0).unwrap();
        assert_eq!((s0.alpha, s0.sigma, s0.d_alpha, s0.d_sigma), (1.0, 0.0, 0.0, PI_2));
        let s1 = Schedule.eval(1.0).unwrap();
        assert!(close(s1.alpha, 0.0, 1e-15));
        assert!(close(s1.sigma, 1.0, 1e-15));
        assert!(close(s1.d_alpha, -PI_2, 1e-15));
        assert!(close(s1.d_sigma, 0.0, 1e-15));
        let h = Schedule.eval(0.5).unwrap();
        assert!(close(h.alpha, 0.5f64.sqrt(), 1e-15));
        assert!(close(h.sigma, 0.5f64.sqrt(), 1e-15));
    }

    #[test]
    fn schedule_rejects_out_of_range() {
        assert!(Schedule.eval(-0.01).is_err());
        assert!(Schedule.eval(1.01).is_err());
        assert!(Schedule.eval(f64::NAN).is_err());
    }

    #[test]
    fn variance_preserving_on_grid() {
        for i in 0..1000 {
            let t = i as f64 / 999.0;
            let s = Schedule.eval(t).unwrap();
            assert!((s.alpha * s.alpha + s.sigma * s.sigma - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_endpoints() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let x0 = Array::randn(&[2, 3], &mut r);
        let eps = Array::randn(&[2, 3], &mut r);
        assert_eq!(forward_diffuse(&x0, 0.0, &eps).unwrap().z, x0);
        assert!(forward_diffuse(&x0, 1.0, &eps).unwrap().z.max_abs_diff(&eps) < 1e-15);
        let one = Array::scalar(1.0);
        let z = forward_diffuse(&one, 0.5, &one).unwrap().z;
        assert!(close(z.data()[0], 2f64.sqrt(), 1e-15));
        assert!(forward_diffuse(&x0, 0.5, &Array::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn velocity_examples() {
        let x0 = Array::scalar(3.7);
        assert_eq!(velocity_target(&x0, &Array::scalar(0.0), 0.0).unwrap().data()[0], 0.0);
        let v = velocity_target(&Array::scalar(0.0), &Array::scalar(1.0), 0.0).unwrap();
        assert_eq!(v.data()[0], PI_2);
    }

    #[test]
    fn velocity_is_time_derivative() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x0 = Array::randn(&[4], &mut r);
        let eps = Array::randn(&[4], &mut r);
        for t in [0.13, 0.5, 0.87] {
            let h = 1e-5;
            let zp = forward_diffuse(&x0, t + h, &eps).unwrap().z;
            let zm = forward_diffuse(&x0, t - h, &eps).unwrap().z;
            let fd = zp.sub(&zm).unwrap().scale(1.0 / (2.0 * h));
            let v = velocity_target(&x0, &eps, t).unwrap();
            assert!(fd.max_abs_diff(&v) < 1e-6);
        }
    }

    #[test]
    fn finite_difference_error_is_second_order() {
        let x0 = Array::scalar(0.8);
        let eps = Array::scalar(-1.3);
        let t = 0.4;
        let v = velocity_target(&x0, &eps, t).unwrap().data()[0];
        let err = |h: f64| {
            let zp = forward_diffuse(&x0, t + h, &eps).unwrap().z.data()[0];
            let zm = forward_diffuse(&x0, t - h, &eps).unwrap().z.data()[0];
            ((zp - zm) / (2.0 * h) - v).abs()
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((ratio - 4.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn x0_mode_is_identity() {
        let p = Prediction {
            mode: PredictionMode::X0,
            value: Array::full(&[2], 5.0),
        };
        let point = DiffusionPoint::new(Array::zeros(&[2]), 1.0).unwrap();
        assert_eq!(to_x0(&p, &point).unwrap(), p.value);
    }

    #[test]
    fn epsilon_mode_singular_at_pure_noise() {
        let p = Prediction {
            mode: PredictionMode::Epsilon,
            value: Array::zeros(&[2]),
        };
        let point = DiffusionPoint::new(Array::zeros(&[2]), 1.0).unwrap();
        assert!(matches!(to_x0(&p, &point), Err(Error::Singular { .. })));
    }

    #[test]
    fn round_trips() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x0 = Array::randn(&[3, 4], &mut r);
        let eps = Array::randn(&[3, 4], &mut r);
        for t in [0.1, 0.5, 0.9] {
            let point = forward_diffuse(&x0, t, &eps).unwrap();
            let from_eps = to_x0(
                &Prediction {
                    mode: PredictionMode::Epsilon,
                    value: eps.clone(),
                },
                &point,
            )
            .unwrap();
            assert!(from_eps.max_abs_diff(&x0) < 1e-12);
            let from_v = to_x0(
                &Prediction {
                    mode: PredictionMode::Velocity,
                    value: velocity_target(&x0, &eps, t).unwrap(),
                },
                &point,
            )
            .unwrap();
            assert!(from_v.max_abs_diff(&x0) < 1e-12);
            let back = epsilon_from_x0(&point, &x0).unwrap();
            assert!(back.max_abs_diff(&eps) < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x0 = Array::randn(&[2, 5], &mut r);
        let eps = Array::randn(&[2, 5], &mut r);
        let t = 0.3;
        let v = velocity_target(&x0, &eps, t).unwrap();
        assert_eq!(flow_matching_loss(&v, &x0, &eps, t).unwrap(), 0.0);
        let off = v.map(|x| x + 1.0);
        assert!(close(flow_matching_loss(&off, &x0, &eps, t).unwrap(), 1.0, 1e-12));

        let pred = Array::randn(&[2, 5], &mut r);
        let s = Schedule.eval(t).unwrap();
        let mut direct = 0.0;
        for i in 0..10 {
            let target = s.d_alpha * x0.data()[i] + s.d_sigma * eps.data()[i];
            direct += (pred.data()[i] - target).powi(2);
        }
        direct /= 10.0;
        assert!(close(flow_matching_loss(&pred, &x0, &eps, t).unwrap(), direct, 1e-12));
        assert!(flow_matching_loss(&pred, &x0, &Array::zeros(&[10]), t).is_err());
    }

    proptest! {
        #[test]
        fn parameterizations_agree(t in 0.001f64..0.999, seed in 0u64..1000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x0 = Array::randn(&[6], &mut r);
            let eps = Array::randn(&[6], &mut r);
            let point = forward_diffuse(&x0, t, &eps).unwrap();
            let modes = [
                (PredictionMode::X0, x0.clone()),
                (PredictionMode::Epsilon, eps.clone()),
                (PredictionMode::Velocity, velocity_target(&x0, &eps, t).unwrap()),
            ];
            let outs: Vec<Array> = modes
                .into_iter()
                .map(|(mode, value)| to_x0(&Prediction { mode, value }, &point).unwrap())
                .collect();
            prop_assert!(outs[0].max_abs_diff(&outs[1]) < 1e-10);
            prop_assert!(outs[0].max_abs_diff(&outs[2]) < 1e-10);
        }
    }
}
