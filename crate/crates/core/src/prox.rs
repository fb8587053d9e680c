//! Proximal maps: soft thresholding and Euclidean ball projection.

use crate::error::{contract, Result};
use crate::tensor::{self, Tensor};

/// Elementwise `sign(v) * max(|v| - tau, 0)`.
pub fn soft_threshold(v: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau >= 0.0) {
        return Err(contract(format!(
            "soft_threshold: tau must be >= 0, got {tau}"
        )));
    }
    Tensor::new(v.shape().to_vec(), soft_threshold_slice(v.data(), tau))
}

pub(crate) fn soft_threshold_slice(v: &[f64], tau: f64) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let m = a.abs() - tau;
            if m > 0.0 {
                m.copysign(a)
            } else {
                0.0
            }
        })
        .collect()
}

/// Projects `e` onto the closed ball `{x : ‖x - center‖ <= radius}`.
///
/// The returned point is guaranteed to lie inside the ball in floating
/// point, which makes the projection exactly idempotent.
pub fn project_l2_ball(e: &Tensor, center: &Tensor, radius: f64) -> Result<Tensor> {
    if e.len() != center.len() {
        return Err(contract(format!(
            "project_l2_ball: shapes {:?} and {:?} differ",
            e.shape(),
            center.shape()
        )));
    }
    if !(radius >= 0.0) {
        return Err(contract(format!(
            "project_l2_ball: radius must be >= 0, got {radius}"
        )));
    }
    Tensor::new(
        e.shape().to_vec(),
        project_ball_slice(e.data(), center.data(), radius),
    )
}

pub(crate) fn project_ball_slice(p: &[f64], c: &[f64], radius: f64) -> Vec<f64> {
    let d = tensor::sub(p, c);
    let n = tensor::norm2(&d);
    if n <= radius {
        return p.to_vec();
    }
    if radius == 0.0 {
        return c.to_vec();
    }
    let mut s = radius / n;
    loop {
        let out: Vec<f64> = c.iter().zip(&d).map(|(ci, di)| ci + s * di).collect();
        let dist = tensor::norm2(&tensor::sub(&out, c));
        if dist <= radius {
            return out;
        }
        s *= 1.0 - f64::EPSILON;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn soft_threshold_examples() {
        let v = Tensor::from_vec(vec![3.0, -0.5, -3.0]);
        assert_eq!(soft_threshold(&v, 1.0).unwrap().data(), &[2.0, 0.0, -2.0]);
        assert!(soft_threshold(&v, -0.1).is_err());
    }

    #[test]
    fn projection_examples() {
        let z = Tensor::zeros(&[2]);
        let on = Tensor::from_vec(vec![3.0, 4.0]);
        assert_eq!(project_l2_ball(&on, &z, 5.0).unwrap(), on);
        let out = project_l2_ball(&Tensor::from_vec(vec![6.0, 8.0]), &z, 5.0).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-15 && (out.data()[1] - 4.0).abs() < 1e-15);
        let c = Tensor::from_vec(vec![1.0, -1.0]);
        assert_eq!(project_l2_ball(&on, &c, 0.0).unwrap(), c);
        assert!(project_l2_ball(&on, &z, -1.0).is_err());
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, 5)
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(e in vec_strategy(), c in vec_strategy(), r in 0.0f64..8.0) {
            let e = Tensor::from_vec(e);
            let c = Tensor::from_vec(c);
            let once = project_l2_ball(&e, &c, r).unwrap();
            let twice = project_l2_ball(&once, &c, r).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.sub(&c).unwrap().norm() <= r);
        }

        #[test]
        fn soft_threshold_is_non_expansive(a in vec_strategy(), b in vec_strategy(), tau in 0.0f64..5.0) {
            let a = Tensor::from_vec(a);
            let b = Tensor::from_vec(b);
            let sa = soft_threshold(&a, tau).unwrap();
            let sb = soft_threshold(&b, tau).unwrap();
            prop_assert!(sa.sub(&sb).unwrap().norm() <= a.sub(&b).unwrap().norm() + 1e-12);
        }
    }
}
