//! Experiment configuration (JSON).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assignment::BaselineStrategy;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_EP_WINDOW;
use crate::model::Topology;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Layer sizes, input dimension first and class count last.
    pub topology: Vec<usize>,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    #[serde(default)]
    pub fleet: FleetConfig,
    pub strategy: Strategy,
    /// Sub-layers per layer; defaults to 8 per hidden layer (capped at the
    /// width) and 1 for the output layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sublayers: Option<Vec<usize>>,
    pub rounds: usize,
    pub local: LocalConfig,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default = "default_ep_window")]
    pub ep_window: usize,
    #[serde(default)]
    pub sampling: SamplingConfig,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_ep_window() -> usize {
    DEFAULT_EP_WINDOW
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_samples: usize,
    pub validation_samples: usize,
    pub class_separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub num_clients: usize,
    /// Dirichlet concentration.
    pub alpha: f64,
}

/// Per-client training ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FleetConfig {
    Uniform {
        ratio: f64,
    },
    Ratios {
        ratios: Vec<f64>,
    },
    /// Tiers of clients sharing a ratio; client counts follow the fractions
    /// by largest remainder, tiers in listed order.
    Template {
        tiers: Vec<Tier>,
    },
}

impl Default for FleetConfig {
    fn default() -> Self {
        FleetConfig::Uniform { ratio: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tier {
    pub fraction: f64,
    pub ratio: f64,
}

impl FleetConfig {
    pub fn resolve(&self, num_clients: usize) -> Result<Vec<f64>> {
        let check = |path: String, r: f64| {
            if r > 0.0 && r <= 1.0 {
                Ok(())
            } else {
                Err(Error::config(path, format!("ratio {r} outside (0, 1]")))
            }
        };
        match self {
            FleetConfig::Uniform { ratio } => {
                check("fleet.ratio".into(), *ratio)?;
                Ok(vec![*ratio; num_clients])
            }
            FleetConfig::Ratios { ratios } => {
                if ratios.len() != num_clients {
                    return Err(Error::config(
                        "fleet.ratios",
                        format!("{} ratios for {num_clients} clients", ratios.len()),
                    ));
                }
                for (i, r) in ratios.iter().enumerate() {
                    check(format!("fleet.ratios[{i}]"), *r)?;
                }
                Ok(ratios.clone())
            }
            FleetConfig::Template { tiers } => {
                if tiers.is_empty() {
                    return Err(Error::config("fleet.tiers", "at least one tier required"));
                }
                for (i, t) in tiers.iter().enumerate() {
                    check(format!("fleet.tiers[{i}].ratio"), t.ratio)?;
                    if !(t.fraction >= 0.0) {
                        return Err(Error::config(format!("fleet.tiers[{i}].fraction"), "must be >= 0"));
                    }
                }
                let total: f64 = tiers.iter().map(|t| t.fraction).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::config("fleet.tiers", format!("fractions sum to {total}, expected 1")));
                }
                let counts = largest_remainder(&tiers.iter().map(|t| t.fraction).collect::<Vec<_>>(), num_clients);
                Ok(tiers.iter().zip(counts).flat_map(|(t, c)| std::iter::repeat_n(t.ratio, c)).collect())
            }
        }
    }
}

/// Integer counts summing to `total` proportional to `fractions`; ties go to
/// the earlier entry.
pub fn largest_remainder(fractions: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = fractions.iter().sum();
    let exact: Vec<f64> = fractions.iter().map(|f| f / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    FedAvg,
    FedPlt,
    FedDrop,
    HeteroFl,
    FedRolex,
    FedPmt,
}

impl Strategy {
    pub fn baseline(self) -> Option<BaselineStrategy> {
        match self {
            Strategy::FedDrop => Some(BaselineStrategy::FedDrop),
            Strategy::HeteroFl => Some(BaselineStrategy::HeteroFl),
            Strategy::FedRolex => Some(BaselineStrategy::FedRolex),
            Strategy::FedPmt => Some(BaselineStrategy::FedPmt),
            Strategy::FedAvg | Strategy::FedPlt => None,
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedavg" => Ok(Strategy::FedAvg),
            "fedplt" => Ok(Strategy::FedPlt),
            other => other.parse::<BaselineStrategy>().map(|b| match b {
                BaselineStrategy::FedDrop => Strategy::FedDrop,
                BaselineStrategy::HeteroFl => Strategy::HeteroFl,
                BaselineStrategy::FedRolex => Strategy::FedRolex,
                BaselineStrategy::FedPmt => Strategy::FedPmt,
            }),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::FedAvg => f.write_str("fedavg"),
            Strategy::FedPlt => f.write_str("fedplt"),
            other => other.baseline().expect("baseline").fmt(f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalMode {
    Epochs,
    Iterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalConfig {
    pub mode: LocalMode,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Every client participates.
    #[default]
    None,
    /// Budget counts clients (`Σ p_k = κ`).
    Ocs,
    /// Budget counts trained-parameter ratios (`Σ r_k p_k = κ`).
    OcsPlt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormSource {
    /// Norms of each client's most recent update.
    #[default]
    Stale,
    /// Every client trains first; norms of this round's updates.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default)]
    pub mode: SamplingMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub norms: NormSource,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn topology(&self) -> Result<Topology> {
        Topology::new(self.topology.clone()).map_err(|e| Error::config("topology", e.to_string()))
    }

    /// Per-client ratios after resolving the fleet; all ones for FedAvg.
    pub fn client_ratios(&self) -> Result<Vec<f64>> {
        let ratios = self.fleet.resolve(self.partition.num_clients)?;
        Ok(match self.strategy {
            Strategy::FedAvg => vec![1.0; ratios.len()],
            _ => ratios,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let topology = self.topology()?;
        if topology.num_classes() < 2 {
            return Err(Error::config("topology", "need at least 2 output classes"));
        }
        let d = &self.data;
        if d.train_samples < topology.num_classes() {
            return Err(Error::config("data.train_samples", "must be >= number of classes"));
        }
        if d.validation_samples == 0 {
            return Err(Error::config("data.validation_samples", "must be >= 1"));
        }
        if !(d.class_separation >= 0.0) || !d.class_separation.is_finite() {
            return Err(Error::config("data.class_separation", "must be finite and >= 0"));
        }
        if self.partition.num_clients == 0 {
            return Err(Error::config("partition.num_clients", "must be >= 1"));
        }
        if !(self.partition.alpha > 0.0) || !self.partition.alpha.is_finite() {
            return Err(Error::config("partition.alpha", "must be finite and > 0"));
        }
        let ratios = self.client_ratios()?;
        if let Some(s) = &self.sublayers {
            if s.len() != topology.num_layers() {
                return Err(Error::config(
                    "sublayers",
                    format!("{} entries for {} layers", s.len(), topology.num_layers()),
                ));
            }
            for (l, &h) in s.iter().enumerate() {
                if h == 0 || h > topology.units(l) {
                    return Err(Error::config(
                        format!("sublayers[{l}]"),
                        format!("must lie in 1..={}", topology.units(l)),
                    ));
                }
            }
        }
        if self.local.count == 0 {
            return Err(Error::config("local.count", "must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be finite and > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.ep_window == 0 {
            return Err(Error::config("ep_window", "must be >= 1"));
        }
        match (self.sampling.mode, self.sampling.kappa) {
            (SamplingMode::None, _) => {}
            (_, None) => return Err(Error::config("sampling.kappa", "required when sampling is enabled")),
            (mode, Some(kappa)) => {
                if !(kappa > 0.0) || !kappa.is_finite() {
                    return Err(Error::config("sampling.kappa", "must be finite and > 0"));
                }
                let capacity = match mode {
                    SamplingMode::Ocs => ratios.len() as f64,
                    _ => ratios.iter().sum(),
                };
                if kappa > capacity + 1e-12 {
                    return Err(Error::Infeasible(format!(
                        "sampling.kappa = {kappa} exceeds the total budget {capacity}"
                    )));
                }
            }
        }
        Ok(())
    }
}
