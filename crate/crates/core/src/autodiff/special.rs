//! Error function and the GELU family with its derivatives.

use std::f64::consts::{PI, SQRT_2};

/// Error function (musl port via `libm`).
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() * (0.5 / PI).sqrt()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2))
}

/// The `order`-th derivative of `gelu(x) = x * Phi(x)`.
///
/// Orders 0 through 4 are closed-form; the autodiff graph only needs up to
/// two orders beyond the forward pass.
pub fn gelu_derivative(x: f64, order: u8) -> f64 {
    gelu_derivative_with(x, normal_cdf(x), normal_pdf(x), order)
}

/// [`gelu_derivative`] given precomputed `Phi(x)` and `phi(x)`.
pub fn gelu_derivative_with(x: f64, cdf: f64, pdf: f64, order: u8) -> f64 {
    match order {
        0 => x * cdf,
        1 => cdf + x * pdf,
        2 => pdf * (2.0 - x * x),
        3 => pdf * (x * x * x - 4.0 * x),
        4 => pdf * (-x * x * x * x + 7.0 * x * x - 4.0),
        _ => f64::NAN,
    }
}

pub const MAX_GELU_ORDER: u8 = 4;

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_2_SQRT_PI;

    /// Alternating Maclaurin series, fine for |x| <= 2 in f64.
    fn erf_maclaurin(x: f64) -> f64 {
        let mut sum = 0.0;
        let mut pow = x;
        let mut fact = 1.0;
        for n in 0..80 {
            if n > 0 {
                fact *= n as f64;
                pow *= x * x;
            }
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign * pow / (fact * (2 * n + 1) as f64);
        }
        FRAC_2_SQRT_PI * sum
    }

    #[test]
    fn erf_matches_independent_series() {
        for i in -200..=200 {
            let x = i as f64 / 100.0;
            assert!((erf(x) - erf_maclaurin(x)).abs() < 1e-13, "x={x}");
        }
    }

    #[test]
    fn erf_reference_values() {
        // Tabulated values (Abramowitz & Stegun, 15+ digits).
        let table = [
            (0.5, 0.520_499_877_813_046_5),
            (1.0, 0.842_700_792_949_714_9),
            (2.0, 0.995_322_265_018_952_7),
            (3.0, 0.999_977_909_503_001_4),
            (4.5, 0.999_999_999_803_383),
        ];
        for (x, v) in table {
            assert!((erf(x) - v).abs() < 1e-12, "x={x}: {} vs {v}", erf(x));
            assert!((erf(-x) + v).abs() < 1e-12);
        }
        assert_eq!(erf(0.0), 0.0);
        assert_eq!(erf(10.0), 1.0);
    }

    #[test]
    fn erf_is_continuous_across_branch_switch() {
        let below = erf(4.0);
        let above = erf(4.0 + 1e-12);
        assert!((below - above).abs() < 1e-14);
    }

    #[test]
    fn gelu_derivatives_match_finite_differences() {
        let h = 1e-5;
        for i in -30..=30 {
            let x = i as f64 / 10.0 + 0.013;
            for order in 0..MAX_GELU_ORDER {
                let fd = (gelu_derivative(x + h, order) - gelu_derivative(x - h, order)) / (2.0 * h);
                let an = gelu_derivative(x, order + 1);
                assert!((fd - an).abs() < 1e-8, "order {order} x {x}: {fd} vs {an}");
            }
        }
    }
}
