//! Training-mix sampling ratios and training budget arithmetic.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::round2;

/// Tokens per parameter at the compute-optimal point.
pub const CHINCHILLA_TOKENS_PER_PARAM: f64 = 20.0;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("bucket {0:?} has zero unique tokens")]
    ZeroUnique(String),
    #[error("bucket {0:?} appears twice")]
    DuplicateBucket(String),
    #[error("no epoch limit for bucket {0:?}")]
    MissingLimit(String),
    #[error("{0} must be at least 1")]
    NonPositive(&'static str),
    #[error("{0} must be positive and finite")]
    InvalidValue(&'static str),
    #[error("PUE must be at least 1, got {0}")]
    InvalidPue(f64),
    #[error("hidden size {hidden} is not divisible by {heads} heads")]
    HeadMismatch { hidden: u64, heads: u64 },
    #[error("kv_heads {kv_heads} exceeds heads {heads}")]
    TooManyKvHeads { kv_heads: u64, heads: u64 },
    #[error("token count overflow")]
    Overflow,
}

/// Input row: unique tokens available and tokens wanted in the mix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketSpec {
    pub name: String,
    pub unique_tokens: u64,
    pub target_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixBucket {
    pub name: String,
    pub unique_tokens: u64,
    pub target_tokens: u64,
    pub sampling_ratio: f64,
    /// Passes over the bucket; equal to the sampling ratio under whole-corpus
    /// repetition with a fractional final pass.
    pub epochs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixPlan {
    pub buckets: Vec<MixBucket>,
    pub total_unique_tokens: u64,
    pub total_tokens: u64,
}

impl MixPlan {
    pub fn bucket(&self, name: &str) -> Option<&MixBucket> {
        self.buckets.iter().find(|b| b.name == name)
    }

    /// Target tokens recomputed from unique counts and ratios.
    pub fn recomputed_targets(&self) -> Vec<u64> {
        self.buckets.iter().map(|b| (b.unique_tokens as f64 * b.sampling_ratio).round() as u64).collect()
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<12} {:>16} {:>10} {:>16}\n", "bucket", "unique (B)", "ratio", "tokens (B)");
        for b in &self.buckets {
            out.push_str(&format!(
                "{:<12} {:>16.2} {:>10.2} {:>16.2}\n",
                b.name,
                b.unique_tokens as f64 / 1e9,
                round2(b.sampling_ratio),
                b.target_tokens as f64 / 1e9
            ));
        }
        out.push_str(&format!(
            "{:<12} {:>16.2} {:>10} {:>16.2}\n",
            "total",
            self.total_unique_tokens as f64 / 1e9,
            "",
            self.total_tokens as f64 / 1e9
        ));
        out
    }
}

/// Sampling ratio `target / unique` for every bucket, in input order.
pub fn solve_sampling_ratios(buckets: &[BucketSpec]) -> Result<MixPlan, PlanError> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(buckets.len());
    let mut total = 0u64;
    let mut total_unique = 0u64;
    for spec in buckets {
        if !seen.insert(spec.name.as_str()) {
            return Err(PlanError::DuplicateBucket(spec.name.clone()));
        }
        if spec.unique_tokens == 0 {
            return Err(PlanError::ZeroUnique(spec.name.clone()));
        }
        let ratio = spec.target_tokens as f64 / spec.unique_tokens as f64;
        total = total.checked_add(spec.target_tokens).ok_or(PlanError::Overflow)?;
        total_unique = total_unique.checked_add(spec.unique_tokens).ok_or(PlanError::Overflow)?;
        out.push(MixBucket {
            name: spec.name.clone(),
            unique_tokens: spec.unique_tokens,
            target_tokens: spec.target_tokens,
            sampling_ratio: ratio,
            epochs: ratio,
        });
    }
    Ok(MixPlan { buckets: out, total_unique_tokens: total_unique, total_tokens: total })
}

/// Convenience form taking `(name, unique)` and `(name, target)` lists that
/// must name the same buckets.
pub fn solve_from_maps(unique: &[(String, u64)], targets: &BTreeMap<String, u64>) -> Result<MixPlan, PlanError> {
    let specs = unique
        .iter()
        .map(|(name, u)| {
            let t = targets.get(name).copied().ok_or_else(|| PlanError::MissingLimit(name.clone()))?;
            Ok(BucketSpec { name: name.clone(), unique_tokens: *u, target_tokens: t })
        })
        .collect::<Result<Vec<_>, PlanError>>()?;
    solve_sampling_ratios(&specs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochWarning {
    pub bucket: String,
    pub epochs: f64,
    pub limit: f64,
    pub excess: f64,
}

/// One warning per bucket whose epoch count exceeds its limit.
pub fn check_epoch_budget(plan: &MixPlan, limits: &BTreeMap<String, f64>) -> Result<Vec<EpochWarning>, PlanError> {
    let mut warnings = Vec::new();
    for b in &plan.buckets {
        let &limit = limits.get(&b.name).ok_or_else(|| PlanError::MissingLimit(b.name.clone()))?;
        if b.epochs > limit {
            warnings.push(EpochWarning { bucket: b.name.clone(), epochs: b.epochs, limit, excess: b.epochs - limit });
        }
    }
    Ok(warnings)
}

/// Tokens consumed per optimizer step.
pub fn tokens_per_step(micro_batch: u64, seq_len: u64, grad_accum: u64, devices: u64) -> Result<u64, PlanError> {
    for (v, name) in
        [(micro_batch, "micro_batch"), (seq_len, "seq_len"), (grad_accum, "grad_accum"), (devices, "devices")]
    {
        if v == 0 {
            return Err(PlanError::NonPositive(name));
        }
    }
    micro_batch
        .checked_mul(grad_accum)
        .and_then(|x| x.checked_mul(devices))
        .and_then(|x| x.checked_mul(seq_len))
        .ok_or(PlanError::Overflow)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingBudget {
    pub total_steps: u64,
    pub total_flops: f64,
}

/// Step count and achieved compute from sustained throughput.
pub fn training_budget(
    tokens_total: u64,
    tokens_per_step: u64,
    mean_tflops: f64,
    gpu_hours: f64,
) -> Result<TrainingBudget, PlanError> {
    if tokens_per_step == 0 {
        return Err(PlanError::NonPositive("tokens_per_step"));
    }
    if !(mean_tflops.is_finite() && mean_tflops >= 0.0) {
        return Err(PlanError::InvalidValue("mean_tflops"));
    }
    if !(gpu_hours.is_finite() && gpu_hours >= 0.0) {
        return Err(PlanError::InvalidValue("gpu_hours"));
    }
    Ok(TrainingBudget {
        total_steps: tokens_total.div_ceil(tokens_per_step),
        total_flops: mean_tflops * 1e12 * gpu_hours * 3600.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub energy_mwh: f64,
    pub co2_tons: f64,
    pub co2_tons_with_pue: f64,
}

/// Energy from GPU hours at TDP, and emissions at a grid carbon intensity.
pub fn energy_carbon(
    gpu_hours: f64,
    tdp_watts: f64,
    grid_gco2_per_kwh: f64,
    pue: f64,
) -> Result<EnergyReport, PlanError> {
    for (v, name) in [(gpu_hours, "gpu_hours"), (tdp_watts, "tdp_watts"), (grid_gco2_per_kwh, "grid_gco2_per_kwh")] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(PlanError::InvalidValue(name));
        }
    }
    if !(pue >= 1.0 && pue.is_finite()) {
        return Err(PlanError::InvalidPue(pue));
    }
    let energy_wh = gpu_hours * tdp_watts;
    let energy_mwh = energy_wh / 1e6;
    let co2_tons = (energy_wh / 1e3) * grid_gco2_per_kwh / 1e6;
    Ok(EnergyReport { energy_mwh, co2_tons, co2_tons_with_pue: co2_tons * pue })
}

/// Decoder architecture with a gated three-matrix MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub layers: u64,
    pub hidden: u64,
    pub intermediate: u64,
    pub heads: u64,
    pub kv_heads: u64,
}

impl ModelArch {
    pub fn new(layers: u64, hidden: u64, intermediate: u64, heads: u64, kv_heads: u64) -> Self {
        Self { layers, hidden, intermediate, heads, kv_heads }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(PlanError::HeadMismatch { hidden: self.hidden, heads: self.heads });
        }
        if self.kv_heads > self.heads {
            return Err(PlanError::TooManyKvHeads { kv_heads: self.kv_heads, heads: self.heads });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> u64 {
        self.hidden / self.heads
    }
}

/// Non-embedding parameters: per layer, Q/K/V/O projections plus the three
/// MLP matrices. Norm weights and biases are not counted.
pub fn param_count(arch: &ModelArch) -> Result<u64, PlanError> {
    arch.validate()?;
    let h = arch.hidden;
    let attention = h * arch.head_dim() * (arch.heads + 2 * arch.kv_heads) + h * h;
    let mlp = 3 * h * arch.intermediate;
    Ok(arch.layers * (attention + mlp))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChinchillaReport {
    pub params: f64,
    pub tokens: f64,
    pub optimal_tokens: f64,
    pub tokens_per_param: f64,
    pub overtrain_factor: f64,
    pub inference_flops_per_token: f64,
}

pub fn chinchilla_check(params: f64, tokens: f64) -> Result<ChinchillaReport, PlanError> {
    if !(params.is_finite() && params > 0.0) {
        return Err(PlanError::InvalidValue("params"));
    }
    if !(tokens.is_finite() && tokens > 0.0) {
        return Err(PlanError::InvalidValue("tokens"));
    }
    let ratio = tokens / params;
    Ok(ChinchillaReport {
        params,
        tokens,
        optimal_tokens: CHINCHILLA_TOKENS_PER_PARAM * params,
        tokens_per_param: ratio,
        overtrain_factor: ratio / CHINCHILLA_TOKENS_PER_PARAM,
        inference_flops_per_token: 2.0 * params,
    })
}

/// Everything the budget command reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub tokens_per_step: u64,
    pub total_steps: u64,
    pub total_flops: f64,
    pub energy_mwh: f64,
    pub co2_tons: f64,
    pub co2_tons_with_pue: f64,
    pub params: Option<u64>,
    pub inference_flops_per_token: Option<f64>,
    pub chinchilla: Option<ChinchillaReport>,
}

impl fmt::Display for BudgetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {}", "tokens per step", self.tokens_per_step)?;
        writeln!(f, "{:<28} {}", "total steps", self.total_steps)?;
        writeln!(f, "{:<28} {:.3e}", "total FLOPs", self.total_flops)?;
        writeln!(f, "{:<28} {:.2}", "energy (MWh)", self.energy_mwh)?;
        writeln!(f, "{:<28} {:.2}", "CO2 (t)", self.co2_tons)?;
        writeln!(f, "{:<28} {:.2}", "CO2 with PUE (t)", self.co2_tons_with_pue)?;
        if let Some(p) = self.params {
            writeln!(f, "{:<28} {:.1}M", "non-embedding params", p as f64 / 1e6)?;
        }
        if let Some(c) = &self.chinchilla {
            writeln!(f, "{:<28} {:.3e}", "chinchilla-optimal tokens", c.optimal_tokens)?;
            writeln!(f, "{:<28} {:.1}", "tokens per parameter", c.tokens_per_param)?;
            writeln!(f, "{:<28} {:.1}", "overtraining factor", c.overtrain_factor)?;
            writeln!(f, "{:<28} {:.3e}", "inference FLOPs per token", c.inference_flops_per_token)?;
        }
        Ok(())
    }
}
