//! Small numeric helpers shared across modules.

/// Neumaier-compensated summation.
///
/// The result is insensitive to summand order to within a few ulps of the
/// largest partial sum, which the consensus and averaging code relies on.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Mean taken about the first element, so constant input is returned exactly.
pub fn compensated_mean(values: &[f64]) -> f64 {
    let Some(&shift) = values.first() else {
        return 0.0;
    };
    shift + compensated_sum(values.iter().map(|v| v - shift)) / values.len() as f64
}

/// Binomial coefficient C(n, k), saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// `|actual - expected| <= tol`, with a one-ulp-scale allowance so that a
/// decimal difference sitting exactly on the tolerance is accepted.
pub fn within(actual: f64, expected: f64, tol: f64) -> bool {
    (actual - expected).abs() <= tol + 1e-12
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_constant_input_is_exact() {
        for n in 1..40 {
            assert_eq!(compensated_mean(&vec![0.4; n]), 0.4);
            assert_eq!(compensated_mean(&vec![0.1; n]), 0.1);
        }
    }

    #[test]
    fn binomial_small_values() {
        assert_eq!(binomial(6, 3), 20);
        assert_eq!(binomial(19, 3), 969);
        assert_eq!(binomial(5, 0), 1);
        assert_eq!(binomial(3, 4), 0);
        assert_eq!(binomial(60, 30), 118_264_581_564_861_424);
    }

    #[test]
    fn compensated_sum_recovers_cancelled_terms() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(v), 2.0);
    }

    #[test]
    fn within_accepts_boundary() {
        assert!(within(0.1, 0.099, 1e-3));
        assert!(!within(0.1, 0.098, 1e-3));
    }
}
