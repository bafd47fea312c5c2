use crate::error::{Error, Result};

fn check_tau(tau: f32) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("temperature must be > 0, got {tau}")))
    }
}

/// Temperature-softened softmax `σ(z/τ)`, computed with max subtraction.
pub fn softmax_tau(logits: &[f32], tau: f32) -> Result<Vec<f32>> {
    Ok(log_softmax_tau(logits, tau)?.into_iter().map(f32::exp).collect())
}

pub fn log_softmax_tau(logits: &[f32], tau: f32) -> Result<Vec<f32>> {
    check_tau(tau)?;
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Domain("logits must be finite".into()));
    }
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &z| m.max(z / tau));
    let lse = logits.iter().map(|&z| (z / tau - max).exp()).sum::<f32>().ln() + max;
    Ok(logits.iter().map(|&z| z / tau - lse).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_for_equal_logits() {
        for tau in [0.5, 1.0, 7.0] {
            let p = softmax_tau(&[0.0; 5], tau).unwrap();
            for v in p {
                assert!((v - 0.2).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn two_class_closed_forms() {
        let e = std::f64::consts::E;
        let p = softmax_tau(&[1.0, 0.0], 1.0).unwrap();
        assert!((p[0] as f64 - e / (e + 1.0)).abs() < 1e-6);
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        let p = softmax_tau(&[1.0, 0.0], 4.0).unwrap();
        let a = (0.25f64).exp();
        assert!((p[0] as f64 - a / (a + 1.0)).abs() < 1e-6);
        assert!((p[0] - 0.5622).abs() < 1e-4 && (p[1] - 0.4378).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_temperature() {
        assert!(softmax_tau(&[1.0], 0.0).is_err());
        assert!(softmax_tau(&[1.0], -2.0).is_err());
    }

    #[test]
    fn huge_temperature_is_nearly_uniform() {
        let p = softmax_tau(&[30.0, -12.0, 4.0, 0.5], 1e6).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn sums_to_one_and_keeps_argmax(
            z in prop::collection::vec(-50.0f32..50.0, 2..10),
            tau in 0.05f32..100.0,
        ) {
            let p = softmax_tau(&z, tau).unwrap();
            let s: f32 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            let am = |v: &[f32]| v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b });
            // only compare argmax when it is unambiguous in the original logits
            let mut sorted = z.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if sorted[0] - sorted[1] > 1e-3 * tau.max(1.0) {
                prop_assert_eq!(am(&p), am(&z));
            }
        }
    }
}
