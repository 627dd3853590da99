//! Command implementations: each builds its domain objects from the config,
//! runs one library operation, and renders the results as named values with
//! provenance.

use std::collections::BTreeMap;

use num::ToPrimitive;
use serde_json::json;

use apcount::circle::{birch_prediction, singular_integral_j, singular_series};
use apcount::counter::{
    count_almost_prime_solutions, count_congruent_solutions, last_variable_accelerated_count,
    sieve_weighted_sum, WeightMode,
};
use apcount::padic::sigma_p_l;
use apcount::sieve::{
    euler_sieve_sum, predicted_main_term, MainTermRequest, SievePlan, SyntheticGamma, TableGamma,
    WeightFunction,
};
use apcount::verification;

use crate::config::ExperimentConfig;
use crate::report::ReportValue;
use crate::AppError;

pub struct ExecOutput {
    pub values: Vec<ReportValue>,
    pub warnings: Vec<String>,
    pub verify_failed: bool,
}

impl ExecOutput {
    fn new(values: Vec<ReportValue>, warnings: Vec<String>) -> Self {
        ExecOutput {
            values,
            warnings,
            verify_failed: false,
        }
    }
}

fn scanned(points: u128) -> u64 {
    u64::try_from(points).unwrap_or(u64::MAX)
}

pub fn execute(command: &str, config: &ExperimentConfig) -> Result<ExecOutput, AppError> {
    match command {
        "count" => run_count(config),
        "almost-prime" => run_almost_prime(config),
        "sieve-sum" => run_sieve_sum(config),
        "local" => run_local(config),
        "euler-sum" => run_euler_sum(config),
        "circle" => run_circle(config),
        "predict" => run_predict(config),
        "verify" => run_verify(),
        other => Err(AppError::Internal(format!("unknown command {}", other))),
    }
}

fn run_count(config: &ExperimentConfig) -> Result<ExecOutput, AppError> {
    let system = config.require_system()?;
    let v = config.require_target(system.r())?;
    let box_spec = config.require_box(system.n())?;
    let restriction = config.restriction(system.n())?;
    let budget = config.budget();
    let accelerated = config.accelerated.unwrap_or(false);
    let outcome = if accelerated {
        last_variable_accelerated_count(&system, &v, &box_spec, &restriction, &budget)?
    } else {
        count_congruent_solutions(&system, &v, &box_spec, &restriction, &budget)?
    };
    let values = vec![ReportValue {
        name: "count".into(),
        value: json!(outcome.count),
        provenance: json!({
            "method": if accelerated { "last-variable-accelerated" } else { "direct-enumeration" },
            "box_side": config.box_side,
            "dilation": restriction.modulus(),
            "points_scanned": scanned(outcome.points_scanned),
        }),
    }];
    Ok(ExecOutput::new(values, vec![]))
}

fn run_almost_prime(config: &ExperimentConfig) -> Result<ExecOutput, AppError> {
    let system = config.require_system()?;
    let family = config.require_family(system.n())?;
    let v = config.require_target(system.r())?;
    let box_spec = config.require_box(system.n())?;
    let eps = config.require_f64(config.eps, "eps")?;
    let budget = config.budget();
    let outcome = count_almost_prime_solutions(&system, &family, &v, &box_spec, eps, &budget)?;
    let mut warnings = vec![];
    if outcome.nonpositive_excluded > 0 {
        warnings.push(format!(
            "{} solutions had a nonpositive linear-form value and were excluded",
            outcome.nonpositive_excluded
        ));
    }
    let values = vec![ReportValue {
        name: "almost_prime_count".into(),
        value: json!(outcome.count),
        provenance: json!({
            "method": "direct-enumeration-with-roughness-filter",
            "box_side": config.box_side,
            "eps": eps,
            "points_scanned": scanned(outcome.points_scanned),
            "nonpositive_excluded": outcome.nonpositive_excluded,
        }),
    }];
    Ok(ExecOutput::new(values, warnings))
}

fn run_sieve_sum(config: &ExperimentConfig) -> Result<ExecOutput, AppError> {
    let system = config.require_system()?;
    let family = config.require_family(system.n())?;
    let v = config.require_target(system.r())?;
    let box_spec = config.require_box(system.n())?;
    let side = config
        .box_side
        .ok_or_else(|| AppError::Validation("config field `box_side` is required".into()))?;
    let m = family.m() as u32;
    let eps = config.require_f64(config.eps, "eps")?;
    let omega = config.omega.unwrap_or(1) as u64;
    let plan = match (config.r, config.eta) {
        (Some(r), _) => SievePlan::with_explicit_r(m, side, r, eps, omega)?,
        (None, Some(eta)) => SievePlan::from_exponents(m, side, eta, eps, omega)?,
        (None, None) => {
            return Err(AppError::Validation(
                "either `r` or `eta` is required to fix the truncation".into(),
            ))
        }
    };
    let mode = match config.mode.as_deref() {
        None | Some("lambda-squared") => WeightMode::LambdaSquared,
        Some("unweighted") => WeightMode::Unweighted,
        Some(other) => {
            return Err(AppError::Validation(format!(
                "unknown mode `{}` (expected lambda-squared or unweighted)",
                other
            )))
        }
    };
    if let Some(b) = &config.residue {
        if b.len() != family.m() {
            return Err(AppError::Validation(format!(
                "`residue` has {} entries, expected {}",
                b.len(),
                family.m()
            )));
        }
    }
    let budget = config.budget();
    let outcome = sieve_weighted_sum(
        &system,
        &family,
        &v,
        &box_spec,
        &plan,
        config.residue.as_deref(),
        config.q,
        mode,
        &budget,
    )?;
    let mut warnings = vec![];
    if outcome.zero_excluded > 0 {
        warnings.push(format!(
            "{} solutions had a vanishing linear-form value and were excluded",
            outcome.zero_excluded
        ));
    }
    let values = vec![ReportValue {
        name: "weighted_sum".into(),
        value: json!(outcome.value),
        provenance: json!({
            "method": "direct-enumeration-with-divisor-weights",
            "box_side": config.box_side,
            "r": plan.r(),
            "w": plan.w(),
            "eps": plan.eps(),
            "q": config.q,
            "mode": match mode { WeightMode::LambdaSquared => "lambda-squared", WeightMode::Unweighted => "unweighted" },
            "residue": config.residue,
            "points_scanned": scanned(outcome.points_scanned),
            "zero_excluded": outcome.zero_excluded,
        }),
    }];
    Ok(ExecOutput::new(values, warnings))
}

fn run_local(config: &ExperimentConfig) -> Result<ExecOutput, AppError> {
    let system = config.require_system()?;
    let v = config.require_target(system.r())?;
    let primes = config
        .primes
        .as_ref()
        .ok_or_else(|| AppError::Validation("config field `primes` is required".into()))?;
    let levels = config
        .levels
        .as_ref()
        .ok_or_else(|| AppError::Validation("config field `levels` is required".into()))?;
    let (d, s) = config.dilation_shift(system.n())?;
    let budget = config.budget();
    let mut values = vec![];
    for &p in primes {
        for &l in levels {
            let density = sigma_p_l(&system, &v, p, l, d, &s, &budget)?;
            values.push(ReportValue {
                name: format!("sigma(p={},l={})", p, l),
                value: json!(density.value.to_string()),
                provenance: json!({
                    "method": "exact-congruence-count",
                    "p": p,
                    "level": l,
                    "dilation": d,
                    "shift": s,
                    "approx": density.value.to_f64(),
                    "stabilized": density.stabilized,
                }),
            });
        }
    }
    Ok(ExecOutput::new(values, vec![]))
}

fn run_euler_sum(config: &ExperimentConfig) -> Result<ExecOutput, AppError> {
    let m = config.m.unwrap_or(1);
    let f = WeightFunction::new(m)?;
    let r = config.require_f64(config.r, "r")?;
    let omega = config
        .omega
        .ok_or_else(|| AppError::Validation("config field `omega` is required".into()))?
        as u64;
    let w = apcount::arith::primorial_u64(omega)?;
    let d_max = config.d_max.unwrap_or_else(|| {
        let r_sq = (r * r).min(u64::MAX as f64);
        r_sq as u64
    });
    let budget = config.budget();
    let (sum, gamma_label) = match &config.gamma_table {
        Some(map) => {
            let mut table = BTreeMap::new();
            for (key, &value) in map {
                let p: u64 = key.parse().map_err(|_| {
                    AppError::Validation(format!("gamma_table key `{}` is not a prime index", key))
                })?;
                table.insert(p, value);
            }
            let gamma = TableGamma::new(table);
            (
                euler_sieve_sum(&gamma, &f, r, w, config.q, d_max, &budget)?,
                format!("table({} primes)", map.len()),
            )
        }
        None => {
            let gamma = SyntheticGamma { m };
            (
                euler_sieve_sum(&gamma, &f, r, w, config.q, d_max, &budget)?,
                format!("synthetic m={}", m),
            )
        }
    };
    let predicted = predicted_main_term(&MainTermRequest::SieveSum {
        f: &f,
        w,
        r,
        q: config.q,
    })?;
    let shared = json!({
        "r": r,
        "w": w,
        "omega": omega,
        "q": config.q,
        "d_max": d_max,
        "gamma": gamma_label,
    });
    let values = vec![
        ReportValue {
            name: "euler_sieve_sum".into(),
            value: json!(sum),
            provenance: json!({ "method": "truncated-divisor-pair-sum", "parameters": shared }),
        },
        ReportValue {
            name: "predicted_main_term".into(),
            value: json!(predicted),
            provenance: json!({ "method": "first-order-main-term", "parameters": shared }),
        },
        ReportValue {
            name: "ratio".into(),
            value: json!(sum / predicted),
            provenance: json!({ "method": "euler_sieve_sum / predicted_main_term", "parameters": shared }),
        },
    ];
    Ok(ExecOutput::new(values, vec![]))
}

fn run_circle(config: &ExperimentConfig) -> Result<ExecOutput, AppError> {
    let system = config.require_system()?;
    let v = config.require_target(system.r())?;
    let q_max = config
        .q_max
        .ok_or_else(|| AppError::Validation("config field `q_max` is required".into()))?;
    let (d, s) = config.dilation_shift(system.n())?;
    let budget = config.budget();
    let series = singular_series(&system, &v, d, &s, q_max, &budget)?;
    let mut values = vec![ReportValue {
        name: "singular_series".into(),
        value: json!(series.value.re),
        provenance: json!({
            "method": "gauss-sum-series",
            "q_max": series.q_max,
            "imaginary_part": series.value.im,
            "tail_proxy": series.tail_proxy,
            "dilation": d,
            "shift": s,
        }),
    }];
    if let Some(u) = &config.u {
        let controls = config.integral_controls();
        let estimate = singular_integral_j(&system, u, &controls)?;
        values.push(ReportValue {
            name: "singular_integral".into(),
            value: json!(estimate.value),
            provenance: json!({
                "method": "slab-monte-carlo",
                "u": u,
                "delta": estimate.delta,
                "samples": estimate.samples,
                "seed": estimate.seed,
                "standard_error": estimate.standard_error,
                "halved_delta_value": estimate.halved_delta_value,
            }),
        });
    }
    Ok(ExecOutput::new(values, vec![]))
}

fn run_predict(config: &ExperimentConfig) -> Result<ExecOutput, AppError> {
    let system = config.require_system()?;
    let v = config.require_target(system.r())?;
    let side = config
        .box_side
        .ok_or_else(|| AppError::Validation("config field `box_side` is required".into()))?;
    let q_max = config
        .q_max
        .ok_or_else(|| AppError::Validation("config field `q_max` is required".into()))?;
    let (d, s) = config.dilation_shift(system.n())?;
    let controls = config.integral_controls();
    let budget = config.budget();
    let prediction = birch_prediction(&system, &v, side, d, &s, q_max, &controls, &budget)?;
    let values = vec![
        ReportValue {
            name: "prediction".into(),
            value: json!(prediction.value),
            provenance: json!({
                "method": "series-times-integral-times-scale",
                "box_side": side,
                "dilation": d,
                "shift": s,
                "q_max": q_max,
            }),
        },
        ReportValue {
            name: "singular_series".into(),
            value: json!(prediction.series.value.re),
            provenance: json!({
                "method": "gauss-sum-series",
                "q_max": prediction.series.q_max,
                "imaginary_part": prediction.series.value.im,
                "tail_proxy": prediction.series.tail_proxy,
            }),
        },
        ReportValue {
            name: "singular_integral".into(),
            value: json!(prediction.integral.value),
            provenance: json!({
                "method": "slab-monte-carlo",
                "delta": prediction.integral.delta,
                "samples": prediction.integral.samples,
                "seed": prediction.integral.seed,
                "standard_error": prediction.integral.standard_error,
            }),
        },
    ];
    Ok(ExecOutput::new(values, vec![]))
}

fn run_verify() -> Result<ExecOutput, AppError> {
    let outcomes = verification::run_all();
    let mut values = vec![];
    let mut all_passed = true;
    for outcome in &outcomes {
        eprintln!("{}", outcome.line());
        all_passed &= outcome.passed;
        values.push(ReportValue {
            name: outcome.name.into(),
            value: json!(if outcome.passed { "PASS" } else { "FAIL" }),
            provenance: json!({
                "criterion": outcome.id,
                "details": outcome.details,
            }),
        });
    }
    Ok(ExecOutput {
        values,
        warnings: vec![],
        verify_failed: !all_passed,
    })
}
