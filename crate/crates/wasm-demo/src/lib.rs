//! Browser bindings for three demo operations: the linear closed forms,
//! the scenario oracle, and one simulated replication against its truth.

use medvar::mediation::decompose_linear_special_case;
use medvar::simulation::{
    draw_parameters, oracle_truth, run_scenario, EstimatorSettings, OutcomeType, SimulationConfig,
};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// `[omega0, omega1, omega2, omega3]` of the two-hospital linear model.
#[wasm_bindgen]
pub fn linear_components(b2: f64, b3: f64, b4: f64) -> Vec<f64> {
    decompose_linear_special_case(b2, b3, b4).to_vec()
}

fn config(n: usize, q: usize, sigma: f64, beta_m: f64, binary: bool, seed: u64) -> Result<SimulationConfig, JsError> {
    let outcome = if binary {
        OutcomeType::Binary
    } else {
        OutcomeType::Continuous
    };
    let c = SimulationConfig::new(n, q, sigma, beta_m, outcome, seed);
    c.validate().map_err(|e| JsError::new(&e.to_string()))?;
    Ok(c)
}

/// True components of a scenario as JSON.
#[wasm_bindgen]
pub fn scenario_truth(
    q: usize,
    sigma: f64,
    beta_m: f64,
    binary: bool,
    seed: u64,
    draws: usize,
) -> Result<String, JsError> {
    let c = config(q.max(2), q, sigma, beta_m, binary, seed)?;
    let params = draw_parameters(&c, 0);
    let o = oracle_truth(&c, &params, draws).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(json!({
        "omega": [o.omega0, o.omega1, o.omega2, o.omega3],
        "std_errors": &o.std_errors[..4],
        "casemix": o.casemix,
        "residual": o.residual,
    })
    .to_string())
}

/// Generates one dataset, fits fixed-effect models and returns the
/// estimate beside the truth.
#[wasm_bindgen]
pub fn replicate(
    n: usize,
    q: usize,
    sigma: f64,
    beta_m: f64,
    binary: bool,
    seed: u64,
    draws: usize,
) -> Result<String, JsError> {
    let c = config(n, q, sigma, beta_m, binary, seed)?;
    let settings = EstimatorSettings {
        oracle_draws: draws,
        ..EstimatorSettings::default()
    };
    let out = run_scenario(&c, 1, &settings).map_err(|e| JsError::new(&e.to_string()))?;
    let row = out
        .rows
        .first()
        .ok_or_else(|| JsError::new("the replication failed to fit"))?;
    let truth = out
        .summary
        .oracle
        .as_ref()
        .map(|o| [o.omega0, o.omega1, o.omega2, o.omega3]);
    Ok(json!({
        "estimate": row.estimate.omegas(),
        "truth": truth,
    })
    .to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn linear_components_add_up() {
        // [DERIVED] quarter squares of the path products
        let w = linear_components(0.3, 0.5, 0.4);
        assert!((w[1] - 0.25 * 0.2f64.powi(2)).abs() < 1e-15);
        assert!((w[0] - w[1] - w[2] - w[3]).abs() < 1e-15);
    }

    #[test]
    fn replicate_reports_truth_and_estimate() {
        // [TRIVIAL]
        let v: Value = serde_json::from_str(&replicate(2000, 4, 0.0, 3.0, false, 1, 100_000).unwrap()).unwrap();
        assert_eq!(v["estimate"].as_array().unwrap().len(), 4);
        let t: Value = serde_json::from_str(&scenario_truth(4, 0.0, 3.0, false, 1, 100_000).unwrap()).unwrap();
        assert_eq!(v["truth"], t["omega"]);
    }
}
