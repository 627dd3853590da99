//! Experiment configuration: the JSON schema, flag overrides, and
//! constructors for the domain objects the commands consume.
//!
//! Every tunable is optional at parse time; each command validates the
//! subset it needs and reports missing fields by name. Unknown fields are
//! rejected so that a typo cannot silently fall back to a default.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use apcount::circle::IntegralControls;
use apcount::counter::{BoxSpec, CongruenceRestriction};
use apcount::forms::{FormSystem, LinearFamily, TargetVector};
use apcount::Budget;

use crate::AppError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonomialSpec {
    pub exponents: Vec<u32>,
    pub coefficient: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub n: usize,
    pub k: u32,
    pub forms: Vec<Vec<MonomialSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_rank: Option<usize>,
}

/// One experiment. The `command` selector is optional in the file (the
/// subcommand on the command line fixes it); when present the two must
/// agree, which lets a config file pin the command it was written for.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemSpec>,
    /// Rows of the linear family, one row per form.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<Vec<Vec<i64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v: Option<Vec<i64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub box_side: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dilation: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift: Option<Vec<i64>>,
    /// Residue vector for the congruence class in weighted sums.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residue: Option<Vec<i64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub primes: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_max: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_max: Option<u64>,
    /// Scaled target for the singular integral.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<u64>,
    /// Explicit local-factor table keyed by prime (as a decimal string,
    /// since JSON object keys are strings).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_table: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget_ceiling: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Weight mode for sieve sums: "lambda-squared" (default) or "unweighted".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accelerated: Option<bool>,
    /// Optional CSV output path for the value table.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, AppError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            AppError::Validation(format!("cannot read config {}: {}", path.display(), e))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| AppError::Validation(format!("invalid config {}: {}", path.display(), e)))
    }

    /// Canonical string the cache key is derived from. Fields that do not
    /// affect the computed values (worker count, CSV destination) are
    /// cleared so they cannot split the key.
    pub fn cache_key_material(&self) -> String {
        let mut canon = self.clone();
        canon.workers = None;
        canon.csv = None;
        serde_json::to_string(&canon).unwrap_or_default()
    }

    pub fn require_system(&self) -> Result<FormSystem, AppError> {
        let spec = self
            .system
            .as_ref()
            .ok_or_else(|| AppError::Validation("config field `system` is required".into()))?;
        let forms: Vec<Vec<(Vec<u32>, i64)>> = spec
            .forms
            .iter()
            .map(|form| {
                form.iter()
                    .map(|m| (m.exponents.clone(), m.coefficient))
                    .collect()
            })
            .collect();
        Ok(FormSystem::from_integral_monomials(
            spec.n,
            spec.k,
            &forms,
            spec.declared_rank,
        )?)
    }

    pub fn require_family(&self, n: usize) -> Result<LinearFamily, AppError> {
        let rows = self
            .family
            .as_ref()
            .ok_or_else(|| AppError::Validation("config field `family` is required".into()))?;
        Ok(LinearFamily::new(n, rows.clone())?)
    }

    pub fn require_target(&self, r: usize) -> Result<TargetVector, AppError> {
        let v = self
            .v
            .as_ref()
            .ok_or_else(|| AppError::Validation("config field `v` is required".into()))?;
        Ok(TargetVector::new(v.clone(), r)?)
    }

    pub fn require_box(&self, dim: usize) -> Result<BoxSpec, AppError> {
        let side = self
            .box_side
            .ok_or_else(|| AppError::Validation("config field `box_side` is required".into()))?;
        Ok(BoxSpec::new(side, dim)?)
    }

    pub fn require_f64(&self, value: Option<f64>, name: &str) -> Result<f64, AppError> {
        value.ok_or_else(|| AppError::Validation(format!("config field `{}` is required", name)))
    }

    pub fn budget(&self) -> Budget {
        match self.budget_ceiling {
            Some(ceiling) => Budget::new(ceiling as u128),
            None => Budget::default(),
        }
    }

    /// Congruence restriction for the counting commands: either both of
    /// `dilation` and `shift` or neither.
    pub fn restriction(&self, dim: usize) -> Result<CongruenceRestriction, AppError> {
        match (self.dilation, &self.shift) {
            (None, None) => Ok(CongruenceRestriction::trivial(dim)),
            (Some(d), Some(s)) => {
                if s.len() != dim {
                    return Err(AppError::Validation(format!(
                        "`shift` has {} entries, expected {}",
                        s.len(),
                        dim
                    )));
                }
                Ok(CongruenceRestriction::new(d, s.clone())?)
            }
            _ => Err(AppError::Validation(
                "`dilation` and `shift` must be given together".into(),
            )),
        }
    }

    /// Dilation and shift for the local and circle commands, defaulting to
    /// the identity (d = 1, s = 0).
    pub fn dilation_shift(&self, dim: usize) -> Result<(u64, Vec<i64>), AppError> {
        let d = self.dilation.unwrap_or(1);
        let s = self.shift.clone().unwrap_or_else(|| vec![0; dim]);
        if s.len() != dim {
            return Err(AppError::Validation(format!(
                "`shift` has {} entries, expected {}",
                s.len(),
                dim
            )));
        }
        Ok((d, s))
    }

    pub fn integral_controls(&self) -> IntegralControls {
        let mut controls = IntegralControls::default();
        if let Some(scale) = self.delta_scale {
            controls.delta_scale = scale;
        }
        if let Some(samples) = self.samples {
            controls.samples = samples;
        }
        if let Some(seed) = self.seed {
            controls.seed = seed;
        }
        controls
    }
}

/// Command-line overrides. Every flag mirrors a config key; a flag that is
/// present wins over the file.
#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    /// Path to a JSON experiment config.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub v: Option<Vec<i64>>,
    #[arg(long)]
    pub box_side: Option<u64>,
    #[arg(long)]
    pub dilation: Option<u64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub shift: Option<Vec<i64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub residue: Option<Vec<i64>>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub omega: Option<u32>,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub m: Option<u32>,
    #[arg(long, value_delimiter = ',')]
    pub primes: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<u32>>,
    #[arg(long)]
    pub q: Option<u64>,
    #[arg(long)]
    pub q_max: Option<u64>,
    #[arg(long)]
    pub d_max: Option<u64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub u: Option<Vec<f64>>,
    #[arg(long)]
    pub delta_scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<u64>,
    #[arg(long)]
    pub budget_ceiling: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Weight mode for sieve sums: lambda-squared or unweighted.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub accelerated: Option<bool>,
    /// Write the value table to this CSV path as well.
    #[arg(long)]
    pub csv: Option<String>,
}

macro_rules! override_field {
    ($config:ident, $args:ident, $($field:ident),+ $(,)?) => {
        $(if $args.$field.is_some() {
            $config.$field = $args.$field.clone();
        })+
    };
}

impl ExperimentConfig {
    pub fn apply_flags(&mut self, args: &RunArgs) {
        override_field!(
            self,
            args,
            v,
            box_side,
            dilation,
            shift,
            residue,
            eps,
            eta,
            omega,
            r,
            m,
            primes,
            levels,
            q,
            q_max,
            d_max,
            u,
            delta_scale,
            seed,
            samples,
            budget_ceiling,
            workers,
            mode,
            accelerated,
            csv,
        );
    }
}
