//! Special functions against an independent implementation.

use approx::assert_relative_eq;
use evisteer::tensor::special::{digamma, lgamma, trigamma};
use proptest::prelude::*;

proptest! {
    #[test]
    fn digamma_agrees(x in 1e-3f64..1e3) {
        let want = statrs::function::gamma::digamma(x);
        prop_assert!((digamma(x) - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {}", digamma(x), want);
    }

    #[test]
    fn lgamma_agrees(x in 1e-3f64..1e3) {
        let want = statrs::function::gamma::ln_gamma(x);
        prop_assert!((lgamma(x) - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {}", lgamma(x), want);
    }

    #[test]
    fn trigamma_is_the_derivative_of_digamma(x in 0.05f64..200.0) {
        let h = 1e-5 * x.max(1.0);
        let fd = (statrs::function::gamma::digamma(x + h) - statrs::function::gamma::digamma(x - h)) / (2.0 * h);
        prop_assert!((trigamma(x) - fd).abs() <= 1e-6 * trigamma(x).abs());
    }
}

#[test]
fn special_points() {
    let euler = 0.577_215_664_901_532_9;
    assert_relative_eq!(digamma(1.0), -euler, max_relative = 1e-15);
    assert_relative_eq!(trigamma(1.0), std::f64::consts::PI.powi(2) / 6.0, max_relative = 1e-14);
    assert_relative_eq!(lgamma(0.5), 0.5 * std::f64::consts::PI.ln(), max_relative = 1e-14);
    assert_eq!(lgamma(1.0), 0.0);
    assert_eq!(lgamma(2.0), 0.0);
}
