use crate::data::AuxiliarySet;
use crate::error::{param_err, Result};
use crate::models::GradientOracle;

/// Number of auxiliary points the model assigns their flipped label.
pub fn count_poisoned(model: &GradientOracle, aux: &AuxiliarySet) -> Result<usize> {
    let mut hits = 0;
    for (x, flipped) in aux.examples.iter() {
        if model.predict(x)? == flipped {
            hits += 1;
        }
    }
    Ok(hits)
}

/// Fraction of auxiliary points classified as their flipped label; 0 for an
/// empty set.
pub fn metrics_attack_accuracy(model: &GradientOracle, aux: &AuxiliarySet) -> Result<f64> {
    if aux.is_empty() {
        return Ok(0.0);
    }
    Ok(count_poisoned(model, aux)? as f64 / aux.len() as f64)
}

/// Outsized impact factor: poisoned points per unit of the attackers'
/// share of the training data.
pub fn metrics_oif(n_poisoned: usize, p_frac: f64, n_total_points: usize) -> Result<f64> {
    if !(p_frac > 0.0 && p_frac <= 1.0) {
        return param_err("OIF is undefined without compromised devices");
    }
    if n_total_points == 0 {
        return param_err("OIF needs a nonempty dataset");
    }
    Ok(n_poisoned as f64 / (p_frac * n_total_points as f64))
}
