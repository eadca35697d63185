//! Exposure-weighted Poisson deviance.

use crate::error::{PinError, Result};

/// `2 v (f - y - y log(f / y))`, read as `2 v f` when `y = 0`.
#[inline]
pub fn unit_deviance(prediction: f64, response: f64, exposure: f64) -> f64 {
    if response > 0.0 {
        2.0 * exposure * (prediction - response - response * (prediction / response).ln())
    } else {
        2.0 * exposure * prediction
    }
}

/// Average Poisson deviance over all rows.
pub fn poisson_deviance(predictions: &[f64], responses: &[f64], exposures: &[f64]) -> Result<f64> {
    if predictions.len() != responses.len() || predictions.len() != exposures.len() {
        return Err(PinError::Contract("deviance inputs differ in length".into()));
    }
    if predictions.is_empty() {
        return Err(PinError::Contract("deviance of an empty sample".into()));
    }
    let mut total = 0.0;
    for ((&f, &y), &v) in predictions.iter().zip(responses).zip(exposures) {
        if !(f > 0.0 && f.is_finite()) {
            return Err(PinError::Domain(format!("prediction {f} is not positive")));
        }
        if y.is_nan() || y < 0.0 || v.is_nan() || v <= 0.0 {
            return Err(PinError::Domain(format!("invalid response {y} or exposure {v}")));
        }
        total += unit_deviance(f, y, v);
    }
    Ok(total / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(poisson_deviance(&[0.3, 2.0], &[0.3, 2.0], &[1.0, 0.5]).unwrap(), 0.0);
        assert!((poisson_deviance(&[0.1], &[0.0], &[1.0]).unwrap() - 0.2).abs() < 1e-15);
        let expect = 2.0 * (2.0 - 1.0 - 2f64.ln());
        assert!((poisson_deviance(&[2.0], &[1.0], &[1.0]).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.613_705_638_880_109_4).abs() < 1e-15);
        assert!(poisson_deviance(&[0.0], &[1.0], &[1.0]).is_err());
        assert!(poisson_deviance(&[-1.0], &[1.0], &[1.0]).is_err());
        assert!(poisson_deviance(&[], &[], &[]).is_err());
    }

    #[test]
    fn non_negative_and_decreasing_towards_observation() {
        let y = 0.8;
        let mut prev = f64::INFINITY;
        for f in [4.0, 2.0, 1.5, 1.1, 0.9, 0.81] {
            let l = unit_deviance(f, y, 1.0);
            assert!(l >= 0.0 && l < prev);
            prev = l;
        }
        let mut prev = f64::INFINITY;
        for f in [0.01, 0.1, 0.4, 0.7, 0.79] {
            let l = unit_deviance(f, y, 1.0);
            assert!(l >= 0.0 && l < prev);
            prev = l;
        }
        for f in [1e-6, 0.5, 3.0] {
            assert!(unit_deviance(f, 0.0, 2.0) > 0.0);
        }
    }

    proptest! {
        #[test]
        fn unit_deviance_is_non_negative_and_zero_at_observation(
            f in 1e-6f64..50.0,
            y in 0f64..20.0,
            v in 1e-3f64..5.0,
        ) {
            prop_assert!(unit_deviance(f, y, v) >= -1e-12);
            if y > 0.0 {
                prop_assert!(unit_deviance(y, y, v).abs() < 1e-12);
            }
            // Linear in exposure.
            prop_assert!((unit_deviance(f, y, 2.0 * v) - 2.0 * unit_deviance(f, y, v)).abs() < 1e-9 * (1.0 + unit_deviance(f, y, v)));
        }
    }
}
