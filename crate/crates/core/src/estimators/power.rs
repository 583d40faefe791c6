use super::EstimateError;
use crate::num::Real;
use crate::special::{normal_cdf, normal_quantile};

/// Two-sided power of a two-sample z test with `n_treated_per_arm` treated
/// units in each arm.
///
/// Both rejection tails are counted, so a zero effect returns `alpha`.
pub fn power_at_treated_n<F: Real>(
    n_treated_per_arm: u64,
    effect: F,
    outcome_sd: F,
    alpha: F,
) -> Result<F, EstimateError> {
    if n_treated_per_arm < 2 {
        return Err(EstimateError::Domain("need at least 2 treated units per arm".into()));
    }
    if !(outcome_sd > F::zero() && outcome_sd.is_finite()) {
        return Err(EstimateError::Domain("outcome_sd must be positive".into()));
    }
    if !(alpha > F::zero() && alpha < F::one()) {
        return Err(EstimateError::Domain("alpha must lie in (0, 1)".into()));
    }
    if !effect.is_finite() {
        return Err(EstimateError::Domain("effect must be finite".into()));
    }
    let two = F::lit(2.0);
    let standardized = effect.abs() / (outcome_sd * (two / F::lit(n_treated_per_arm as f64)).sqrt());
    let critical = normal_quantile(F::one() - alpha / two);
    Ok(normal_cdf(standardized - critical) + normal_cdf(-standardized - critical))
}
