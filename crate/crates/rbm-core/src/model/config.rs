//! JSON configuration documents for [`SystemModel`].
//!
//! The document shape is strict: unknown fields anywhere are rejected.
//! Kernels and drifts are named functions with a `params` object, so new
//! catalog entries extend the schema without changing its layout.

use serde::{Deserialize, Serialize};

use super::kernel::{
    DriftField, InteractionKernel, KernelSpec, PairEntry, PairTable, RadialKernel,
};
use super::{Dynamics, InitialCondition, ModelParams, SpeciesSpec, SystemModel, WeightVector};
use crate::error::{RbmError, Result};

/// Top-level configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub p: usize,
    pub weights: WeightsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub species: Option<SpeciesConfig>,
    pub kernel: NamedFunction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<NamedFunction>,
    pub sigma: f64,
    pub dynamics: DynamicsConfig,
    #[serde(rename = "T")]
    pub t_final: f64,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightsConfig {
    /// Explicit per-particle weights.
    Array(Vec<f64>),
    Keyed(WeightsKeyed),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsKeyed {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniform: Option<f64>,
    /// `[lo, hi]`: i.i.d. uniform weights drawn from the master seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeded_range: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub charges: Option<Vec<i8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u32>>,
}

/// `{"name": ..., "params": {...}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedFunction {
    pub name: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub params: serde_json::Value,
}

impl NamedFunction {
    pub fn new(name: &str, params: serde_json::Value) -> Self {
        NamedFunction {
            name: name.to_string(),
            params,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DynamicsConfig {
    /// `"first"`.
    Name(String),
    Keyed(DynamicsKeyed),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsKeyed {
    pub second: SecondOrderConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecondOrderConfig {
    pub gamma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal: Option<NormalConfig>,
    /// Explicit positions, one `d`-vector per particle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalConfig {
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "default_std")]
    pub std: f64,
}

fn default_std() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearParams {
    gain: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianParams {
    amp: f64,
    width: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CosineParams {
    amp: f64,
    freq: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstantParams {
    value: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChargedParams {
    f: NamedFunction,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairwiseTableParams {
    entries: Vec<PairEntryConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairEntryConfig {
    a: u32,
    b: u32,
    f: NamedFunction,
}

fn parse_params<T: serde::de::DeserializeOwned>(nf: &NamedFunction) -> Result<T> {
    serde_json::from_value(nf.params.clone())
        .map_err(|e| RbmError::config(format!("bad params for '{}': {e}", nf.name)))
}

fn require_no_params(nf: &NamedFunction) -> Result<()> {
    let empty = nf.params.is_null()
        || nf.params.as_object().is_some_and(|o| o.is_empty());
    if empty {
        Ok(())
    } else {
        Err(RbmError::config(format!(
            "'{}' takes no params",
            nf.name
        )))
    }
}

fn parse_radial(nf: &NamedFunction) -> Result<RadialKernel> {
    match nf.name.as_str() {
        "linear" => {
            let p: LinearParams = parse_params(nf)?;
            Ok(RadialKernel::Linear { gain: p.gain })
        }
        "gaussian" => {
            let p: GaussianParams = parse_params(nf)?;
            if p.width == 0.0 || !p.width.is_finite() || !p.amp.is_finite() {
                return Err(RbmError::config("gaussian kernel needs finite amp and nonzero width"));
            }
            Ok(RadialKernel::Gaussian {
                amp: p.amp,
                width: p.width,
            })
        }
        "cosine" => {
            let p: CosineParams = parse_params(nf)?;
            Ok(RadialKernel::Cosine {
                amp: p.amp,
                freq: p.freq,
            })
        }
        "constant" => {
            let p: ConstantParams = parse_params(nf)?;
            Ok(RadialKernel::Constant { value: p.value })
        }
        other => Err(RbmError::config(format!(
            "unknown radial kernel '{other}' (expected linear, gaussian, cosine, or constant)"
        ))),
    }
}

fn parse_interaction(nf: &NamedFunction) -> Result<InteractionKernel> {
    match nf.name.as_str() {
        "zero" => {
            require_no_params(nf)?;
            Ok(InteractionKernel::Zero)
        }
        "charged" => {
            let p: ChargedParams = parse_params(nf)?;
            Ok(InteractionKernel::Charged(parse_radial(&p.f)?))
        }
        "pairwise_table" => {
            let p: PairwiseTableParams = parse_params(nf)?;
            let entries = p
                .entries
                .iter()
                .map(|e| {
                    Ok(PairEntry {
                        a: e.a,
                        b: e.b,
                        f: parse_radial(&e.f)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(InteractionKernel::PairwiseTable(PairTable::new(entries)))
        }
        _ => Ok(InteractionKernel::RadialSmooth(parse_radial(nf)?)),
    }
}

fn parse_drift(nf: &NamedFunction) -> Result<DriftField> {
    match nf.name.as_str() {
        "zero" => {
            require_no_params(nf)?;
            Ok(DriftField::Zero)
        }
        "linear" => {
            let p: LinearParams = parse_params(nf)?;
            Ok(DriftField::Linear { gain: p.gain })
        }
        other => Err(RbmError::config(format!(
            "unknown drift '{other}' (expected zero or linear)"
        ))),
    }
}

impl ModelConfig {
    /// Validates the document and builds the model. `master_seed` feeds the
    /// seeded weight range, if configured.
    pub fn build(&self, master_seed: u64) -> Result<SystemModel> {
        let weights = match &self.weights {
            WeightsConfig::Array(m) => WeightVector::new(m.clone())?,
            WeightsConfig::Keyed(k) => match (k.uniform, k.seeded_range) {
                (Some(m), None) => WeightVector::uniform(self.n, m)?,
                (None, Some([lo, hi])) => WeightVector::seeded_range(self.n, lo, hi, master_seed)?,
                _ => {
                    return Err(RbmError::config(
                        "weights must set exactly one of 'uniform' or 'seeded_range'",
                    ))
                }
            },
        };

        let species = match &self.species {
            None => SpeciesSpec::uniform(self.n),
            Some(s) => match (&s.labels, &s.charges) {
                (Some(labels), charges) => SpeciesSpec::new(labels.clone(), charges.clone())?,
                (None, Some(charges)) => SpeciesSpec::from_charges(charges.clone())?,
                (None, None) => SpeciesSpec::uniform(self.n),
            },
        };

        let interaction = parse_interaction(&self.kernel)?;
        let drift = match &self.drift {
            None => DriftField::Zero,
            Some(nf) => parse_drift(nf)?,
        };

        let dynamics = match &self.dynamics {
            DynamicsConfig::Name(name) if name == "first" => Dynamics::FirstOrder,
            DynamicsConfig::Name(name) => {
                return Err(RbmError::config(format!(
                    "unknown dynamics '{name}' (expected \"first\" or {{\"second\": {{\"gamma\": ...}}}})"
                )))
            }
            DynamicsConfig::Keyed(k) => Dynamics::SecondOrder {
                gamma: k.second.gamma,
            },
        };

        let initial = match &self.initial {
            None => InitialCondition::Normal { mean: 0.0, std: 1.0 },
            Some(init) => match (&init.normal, &init.positions) {
                (Some(n), None) => InitialCondition::Normal {
                    mean: n.mean,
                    std: n.std,
                },
                (None, Some(rows)) => {
                    let mut flat = Vec::with_capacity(self.n * self.d);
                    for (idx, row) in rows.iter().enumerate() {
                        if row.len() != self.d {
                            return Err(RbmError::config(format!(
                                "initial position {idx} has {} components, expected d = {}",
                                row.len(),
                                self.d
                            )));
                        }
                        flat.extend_from_slice(row);
                    }
                    InitialCondition::Positions(flat)
                }
                _ => {
                    return Err(RbmError::config(
                        "initial must set exactly one of 'normal' or 'positions'",
                    ))
                }
            },
        };

        ModelParams {
            dim: self.d,
            n_particles: self.n,
            batch_size: self.p,
            weights,
            species,
            kernel: KernelSpec::new(interaction, drift),
            sigma: self.sigma,
            dynamics,
            t_final: self.t_final,
            tau: self.tau,
            initial,
        }
        .build()
    }
}
