//! Numerically stable scalar kernels for the logistic distribution.

use crate::tensor::Scalar;

/// Largest sub-pixel value; bins 0 and `MAX_LEVEL` carry the open tails.
pub const MAX_LEVEL: u8 = 255;

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// `ln σ(p) − σ(q)` for `p > q`, exact in floating point via
/// `σ(p) − σ(q) = (e^p − e^q) / ((1 + e^p)(1 + e^q))`.
fn log_sigmoid_diff<T: Scalar>(p: T, q: T) -> T {
    -softplus(-p) - softplus(q) + (-(q - p).exp_m1()).ln()
}

fn bin_edges<T: Scalar>(x: T, mu: T, log_s: T) -> (T, T, T) {
    let half = T::from_f64(0.5);
    let inv_s = (-log_s).exp();
    let centered = x - mu;
    ((centered + half) * inv_s, (centered - half) * inv_s, inv_s)
}

fn is_lower_edge<T: Scalar>(x: T) -> bool {
    x <= T::zero()
}

fn is_upper_edge<T: Scalar>(x: T) -> bool {
    x >= T::from_f64(MAX_LEVEL as f64)
}

/// `ln P(x)` for the unit bin `[x − ½, x + ½]` of a logistic(`mu`, `e^log_s`);
/// the bin at 0 extends to −∞ and the bin at 255 to +∞.
pub fn log_bin_mass<T: Scalar>(x: T, mu: T, log_s: T) -> T {
    let (upper, lower, _) = bin_edges(x, mu, log_s);
    if is_lower_edge(x) {
        -softplus(-upper)
    } else if is_upper_edge(x) {
        -softplus(lower)
    } else {
        log_sigmoid_diff(upper, lower)
    }
}

/// Partial derivatives of [`log_bin_mass`] with respect to `mu` and `log_s`.
pub fn log_bin_mass_grad<T: Scalar>(x: T, mu: T, log_s: T) -> (T, T) {
    let (upper, lower, inv_s) = bin_edges(x, mu, log_s);
    if is_lower_edge(x) {
        let w = sigmoid(-upper);
        (-w * inv_s, -upper * w)
    } else if is_upper_edge(x) {
        let w = sigmoid(lower);
        (w * inv_s, lower * w)
    } else {
        let (su, sl) = (sigmoid(-upper), sigmoid(lower));
        let dmu = -(su - sl) * inv_s;
        // (upper − lower) = inv_s, so the coupling term is inv_s / expm1(inv_s).
        let coupling = if inv_s > T::from_f64(1e-8) {
            inv_s / inv_s.exp_m1()
        } else {
            T::one()
        };
        let dls = -upper * su + lower * sl - coupling;
        (dmu, dls)
    }
}

/// `ln pdf` of the logistic density at `z`.
pub fn log_pdf<T: Scalar>(z: T, mu: T, log_s: T) -> T {
    let t = (z - mu) * (-log_s).exp();
    -t - log_s - T::from_f64(2.0) * softplus(-t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_and_softplus_are_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(-800.0f64), 0.0);
        assert_eq!(sigmoid(800.0f64), 1.0);
        assert_eq!(softplus(800.0f64), 800.0);
        assert!(softplus(-800.0f64) >= 0.0);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn log_bin_mass_matches_naive_difference_in_the_bulk() {
        for &(x, mu, s) in &[(100.0f64, 97.3f64, 4.0f64), (1.0, 3.0, 0.7), (254.0, 250.0, 2.0)] {
            let naive = (sigmoid((x + 0.5 - mu) / s) - sigmoid((x - 0.5 - mu) / s)).ln();
            let got = log_bin_mass(x, mu, f64::ln(s));
            assert!((naive - got).abs() < 1e-12, "{x} {mu} {s}: {naive} vs {got}");
        }
    }

    #[test]
    fn log_bin_mass_stays_finite_far_in_the_tails() {
        let ls = -7.0 + 127.5f64.ln();
        for &(x, mu) in &[(128.0, 1.0e4), (128.0, -1.0e4), (0.0, 1.0e4), (255.0, -1.0e4)] {
            let v = log_bin_mass(x, mu, ls);
            assert!(v.is_finite() && v < 0.0, "{x} {mu}: {v}");
        }
        let v32 = log_bin_mass(128.0f32, 9000.0, ls as f32);
        assert!(v32.is_finite());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let h = 1e-6;
        for &(x, mu, ls) in &[
            (0.0f64, 3.0f64, 0.5f64),
            (255.0, 250.0, 1.2),
            (17.0, 20.5, -0.3),
            (200.0, 20.0, 2.0),
            (128.0, 128.0, 6.0),
        ] {
            let (dmu, dls) = log_bin_mass_grad(x, mu, ls);
            let fmu = (log_bin_mass(x, mu + h, ls) - log_bin_mass(x, mu - h, ls)) / (2.0 * h);
            let fls = (log_bin_mass(x, mu, ls + h) - log_bin_mass(x, mu, ls - h)) / (2.0 * h);
            assert!((dmu - fmu).abs() <= 1e-6 * (1.0 + fmu.abs()), "{dmu} {fmu}");
            assert!((dls - fls).abs() <= 1e-6 * (1.0 + fls.abs()), "{dls} {fls}");
        }
    }

    #[test]
    fn pdf_at_mean_is_quarter_over_scale() {
        let s: f64 = 3.0;
        assert!((log_pdf(5.0, 5.0, s.ln()).exp() - 1.0 / (4.0 * s)).abs() < 1e-15);
    }
}
