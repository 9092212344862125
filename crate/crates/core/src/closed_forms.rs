//! Closed-form evaluations: competency averages, the limiting mean of the
//! EMA memory, and the conditional moments of the normalized consensus.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::MomentsError;
use crate::model::{CompetencyMatrix, SignalDistribution};
use crate::numeric::{compensated_mean, compensated_sum};

#[derive(Debug, Clone, PartialEq)]
pub struct CompetencyAverages {
    /// `C̄[·, j]`, one per dimension.
    pub col_means: Vec<f64>,
    /// `C̄[i, ·]`, one per perspective.
    pub row_means: Vec<f64>,
    pub global_mean: f64,
    /// Mean of the other `m - 1` column means; zero when `m = 1`.
    pub hat_c: Vec<f64>,
}

pub fn averages(competency: &CompetencyMatrix) -> CompetencyAverages {
    let c = competency.matrix();
    let (n, m) = c.shape();
    let col_means: Vec<f64> = (0..m)
        .map(|j| compensated_mean(c.column(j).as_slice()))
        .collect();
    let row_means: Vec<f64> = (0..n)
        .map(|i| compensated_mean(&(0..m).map(|j| c[(i, j)]).collect::<Vec<_>>()))
        .collect();
    let global_mean = compensated_mean(c.as_slice());
    let col_total = compensated_sum(col_means.iter().copied());
    let hat_c = col_means
        .iter()
        .map(|&cj| {
            if m == 1 {
                0.0
            } else {
                (col_total - cj) / (m - 1) as f64
            }
        })
        .collect();
    CompetencyAverages {
        col_means,
        row_means,
        global_mean,
        hat_c,
    }
}

/// Mixing weight `(m - k) / (k(m - 1) + m - k)`, taken as 0 when `k = m`
/// (this covers `m = k = 1`, where the ratio is 0/0 and the limit does not
/// depend on it).
pub fn eta(m: usize, k: usize) -> f64 {
    assert!(k >= 1 && k <= m, "eta needs 1 <= k <= m");
    if k == m {
        return 0.0;
    }
    let num = (m - k) as f64;
    num / ((k * (m - 1)) as f64 + num)
}

/// `R[i, j] = C̄[i, ·] - C̿` (constant along each row).
pub fn row_deviation(competency: &CompetencyMatrix) -> DMatrix<f64> {
    let avg = averages(competency);
    let (n, m) = competency.shape();
    DMatrix::from_fn(n, m, |i, _| avg.row_means[i] - avg.global_mean)
}

/// Limiting mean of the EMA memory:
/// `U[i,j] = (1/2 - η)(C̄[i,·] - C̿) + η (C[i,j] - C̄[·,j])`.
pub fn limit_expectation(competency: &CompetencyMatrix, k: usize) -> DMatrix<f64> {
    let avg = averages(competency);
    let (n, m) = competency.shape();
    let eta = eta(m, k);
    DMatrix::from_fn(n, m, |i, j| {
        (0.5 - eta) * (avg.row_means[i] - avg.global_mean)
            + eta * (competency[(i, j)] - avg.col_means[j])
    })
}

/// Which sign to use in front of `(k - 1) Ĉ_j` in the conditional mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SignVariant {
    /// `μ̄ - (C̄_j + (k-1) Ĉ_j) / k`, the expectation of the consensus
    /// expansion with zero column means in the memory.
    #[default]
    Derived,
    /// `μ̄ - (C̄_j - (k-1) Ĉ_j) / k`, kept for side-by-side comparison.
    #[serde(rename = "paper")]
    Printed,
}

impl SignVariant {
    pub fn label(self) -> &'static str {
        match self {
            Self::Derived => "derived",
            Self::Printed => "paper",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusMoments {
    pub cond_mean: f64,
    pub cond_var: f64,
    pub j: usize,
    pub variant: SignVariant,
}

fn check_dimension(m: usize, j: usize) -> Result<(), MomentsError> {
    if j >= m {
        return Err(MomentsError::DimensionOutOfRange { j, m });
    }
    Ok(())
}

/// `E[Ḡ | j ∈ S]` for zero-based dimension `j`.
pub fn conditional_mean(
    competency: &CompetencyMatrix,
    mu: &SignalDistribution,
    k: usize,
    j: usize,
    variant: SignVariant,
) -> Result<f64, MomentsError> {
    let m = competency.ncols();
    check_dimension(m, j)?;
    let avg = averages(competency);
    let others = if k > 1 {
        (k - 1) as f64 * avg.hat_c[j]
    } else {
        0.0
    };
    let inner = match variant {
        SignVariant::Derived => avg.col_means[j] + others,
        SignVariant::Printed => avg.col_means[j] - others,
    };
    Ok(mu.mean() - inner / k as f64)
}

/// `Var(Ḡ | j ∈ S) = σ²/k + (k-1)(m-k) / (k²(m-1)(m-2)) Σ_{r≠j} (C̄_r - Ĉ_j)²`.
///
/// The competency-spread term is exactly zero whenever `(k-1)(m-k) = 0`.
pub fn conditional_variance(
    competency: &CompetencyMatrix,
    mu: &SignalDistribution,
    k: usize,
    j: usize,
) -> Result<f64, MomentsError> {
    let m = competency.ncols();
    check_dimension(m, j)?;
    let signal_part = mu.variance() / k as f64;
    if k == 1 || k == m {
        return Ok(signal_part);
    }
    if m < 3 {
        return Err(MomentsError::DegenerateVariance { m });
    }
    let avg = averages(competency);
    let spread = compensated_sum(
        (0..m)
            .filter(|&r| r != j)
            .map(|r| (avg.col_means[r] - avg.hat_c[j]).powi(2)),
    );
    let coef = ((k - 1) * (m - k)) as f64 / ((k * k) as f64 * ((m - 1) * (m - 2)) as f64);
    Ok(signal_part + coef * spread)
}

pub fn consensus_moments(
    competency: &CompetencyMatrix,
    mu: &SignalDistribution,
    k: usize,
    j: usize,
    variant: SignVariant,
) -> Result<ConsensusMoments, MomentsError> {
    Ok(ConsensusMoments {
        cond_mean: conditional_mean(competency, mu, k, j, variant)?,
        cond_var: conditional_variance(competency, mu, k, j)?,
        j,
        variant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn generalist() -> CompetencyMatrix {
        CompetencyMatrix::from_rows(&[
            vec![0.95, 0.90, 0.85, 0.15, 0.10, 0.05],
            vec![0.50, 0.50, 0.50, 0.50, 0.50, 0.50],
            vec![0.05, 0.10, 0.15, 0.85, 0.90, 0.95],
        ])
        .unwrap()
    }

    /// Competency matrix whose column means are exactly `means` (n = 1).
    fn with_col_means(means: &[f64]) -> CompetencyMatrix {
        CompetencyMatrix::from_rows(&[means.to_vec()]).unwrap()
    }

    #[test]
    fn averages_of_constant_matrix() {
        let avg = averages(&CompetencyMatrix::constant(3, 5, 0.3).unwrap());
        for v in avg.col_means.iter().chain(&avg.row_means).chain(&avg.hat_c) {
            assert!((v - 0.3).abs() < 1e-15);
        }
        assert!((avg.global_mean - 0.3).abs() < 1e-15);
    }

    #[test]
    fn averages_of_generalist_matrix() {
        let avg = averages(&generalist());
        for r in &avg.row_means {
            assert!((r - 0.5).abs() < 1e-15);
        }
        assert!((avg.global_mean - 0.5).abs() < 1e-15);
    }

    #[test]
    fn averages_of_single_expert_matrix() {
        let c = CompetencyMatrix::single_expert(5, 19, 0, 13, 0.9, 0.5).unwrap();
        let avg = averages(&c);
        assert!((avg.col_means[13] - 0.58).abs() < 1e-15);
        for (j, v) in avg.col_means.iter().enumerate() {
            if j != 13 {
                assert!((v - 0.5).abs() < 1e-15);
            }
        }
        for j in 0..19 {
            let lhs = avg.hat_c[j] * 18.0 + avg.col_means[j];
            assert!((lhs - 19.0 * avg.global_mean).abs() < 1e-12);
        }
    }

    #[test]
    fn eta_values() {
        assert_eq!(eta(7, 7), 0.0);
        assert_eq!(eta(1, 1), 0.0);
        assert_eq!(eta(2, 1), 0.5);
        assert!((eta(19, 3) - 16.0 / 70.0).abs() < 1e-15);
        assert!((eta(6, 3) - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn single_dimension_limit_is_half_the_deviation() {
        let c = CompetencyMatrix::from_rows(&[vec![0.2], vec![0.6], vec![0.7]]).unwrap();
        let u = limit_expectation(&c, 1);
        assert!((u[(0, 0)] + 0.15).abs() < 1e-15);
        assert!((u[(1, 0)] - 0.05).abs() < 1e-15);
        assert!((u[(2, 0)] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn limit_expectation_examples() {
        let zero = limit_expectation(&CompetencyMatrix::constant(4, 3, 0.8).unwrap(), 2);
        assert!(zero.abs().max() < 1e-15);

        let u = limit_expectation(&generalist(), 3);
        assert!((u[(0, 0)] - 0.075).abs() < 1e-15);
        for col in u.column_iter() {
            assert!(col.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_mean_variants() {
        let c = with_col_means(&[0.2, 0.4, 0.6]);
        let mu = SignalDistribution::Uniform01;
        let derived = conditional_mean(&c, &mu, 2, 0, SignVariant::Derived).unwrap();
        assert!((derived - 0.15).abs() < 1e-15);
        let printed = conditional_mean(&c, &mu, 2, 0, SignVariant::Printed).unwrap();
        assert!((printed - 0.65).abs() < 1e-15);

        for variant in [SignVariant::Derived, SignVariant::Printed] {
            let v = conditional_mean(&c, &mu, 1, 2, variant).unwrap();
            assert!((v - (0.5 - 0.6)).abs() < 1e-15);
        }

        let constant = CompetencyMatrix::constant(3, 4, 0.3).unwrap();
        let v = conditional_mean(&constant, &mu, 3, 1, SignVariant::Derived).unwrap();
        assert!((v - 0.2).abs() < 1e-15);

        assert!(conditional_mean(&c, &mu, 2, 3, SignVariant::Derived).is_err());
    }

    #[test]
    fn conditional_variance_edges() {
        let mu = SignalDistribution::Uniform01;
        let c = with_col_means(&[0.1, 0.3, 0.5, 0.7]);
        let v1 = conditional_variance(&c, &mu, 1, 0).unwrap();
        assert!((v1 - 1.0 / 12.0).abs() < 1e-15);
        let v4 = conditional_variance(&c, &mu, 4, 0).unwrap();
        assert!((v4 - 1.0 / 48.0).abs() < 1e-15);
        let two = with_col_means(&[0.1, 0.9]);
        assert!((conditional_variance(&two, &mu, 2, 1).unwrap() - 1.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn conditional_variance_enumeration() {
        // j = 0 is active together with exactly one of 0.3, 0.5, 0.7, each with
        // probability 1/3; the deterministic part is -(0.1 + c)/2.
        let c = with_col_means(&[0.1, 0.3, 0.5, 0.7]);
        let mu = SignalDistribution::Uniform01;
        let parts: Vec<f64> = [0.3, 0.5, 0.7].iter().map(|x| -(0.1 + x) / 2.0).collect();
        let mean = parts.iter().sum::<f64>() / 3.0;
        let spread = parts.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / 3.0;
        let expected = 1.0 / 24.0 + spread;
        let got = conditional_variance(&c, &mu, 2, 0).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn variants_differ_by_twice_the_other_columns_term() {
        // Equal column means do not make the variants agree: they differ by
        // 2 (k-1) Ĉ_j / k, which vanishes only for k = 1 or Ĉ_j = 0.
        let c = CompetencyMatrix::constant(2, 5, 0.4).unwrap();
        let mu = SignalDistribution::Point { value: 0.7 };
        let a = consensus_moments(&c, &mu, 3, 2, SignVariant::Derived).unwrap();
        let b = consensus_moments(&c, &mu, 3, 2, SignVariant::Printed).unwrap();
        assert!((a.cond_mean - 0.3).abs() < 1e-15);
        assert!(a.cond_var.abs() < 1e-15);
        assert!((b.cond_mean - a.cond_mean - 2.0 * 2.0 * 0.4 / 3.0).abs() < 1e-15);
        assert_eq!(a.cond_var, b.cond_var);

        let zero_elsewhere = with_col_means(&[0.6, 0.0, 0.0, 0.0]);
        let a = conditional_mean(&zero_elsewhere, &mu, 3, 0, SignVariant::Derived).unwrap();
        let b = conditional_mean(&zero_elsewhere, &mu, 3, 0, SignVariant::Printed).unwrap();
        assert_eq!(a, b);
    }
}
