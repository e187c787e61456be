//! Run configuration: TOML schema, validation, and built-in presets.
//!
//! Unknown keys are rejected everywhere. The schema_version gate keeps old
//! configs from silently running under changed semantics.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::advantage::GroupAdvConfig;
use crate::divergence::{ScheduleMode, TrustRegionSchedule};
use crate::env::{EnvConfig, Router};
use crate::error::{Error, Result};
use crate::plugswap::AlignConfig;
use crate::trainer::{OrderSpec, PpoConfig, StagePlan, TrainMode};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
    pub env: EnvConfig,
    pub router: Router,
    #[serde(default)]
    pub team: TeamSection,
    pub plan: PlanSection,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub adv: GroupAdvConfig,
    #[serde(default)]
    pub cert: CertSection,
    #[serde(default)]
    pub compare: Option<CompareSection>,
    #[serde(default)]
    pub scale: Option<ScaleSection>,
    #[serde(default)]
    pub swap: Option<SwapSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum TeamInit {
    Uniform,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TeamSection {
    pub init: TeamInit,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    0.5
}

impl Default for TeamSection {
    fn default() -> Self {
        TeamSection {
            init: TeamInit::Uniform,
            init_scale: default_init_scale(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub mode: TrainMode,
    #[serde(default = "default_order")]
    pub order: OrderSpec,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub radii: Option<Vec<f64>>,
    #[serde(default)]
    pub schedule_mode: ScheduleMode,
    #[serde(default = "default_one")]
    pub inner_epochs: usize,
    #[serde(default = "default_one")]
    pub resample_k: usize,
    pub rollout_budget: usize,
    pub stages: usize,
}

fn default_order() -> OrderSpec {
    OrderSpec::Fixed
}

fn default_one() -> usize {
    1
}

impl PlanSection {
    /// Compiles the section into a StagePlan for a team of n agents.
    pub fn compile(&self, n_agents: usize) -> Result<StagePlan> {
        let radii = match (&self.radius, &self.radii) {
            (Some(r), None) => TrustRegionSchedule {
                radii: vec![*r; n_agents.max(1)],
                mode: self.schedule_mode,
            },
            (None, Some(rs)) => TrustRegionSchedule {
                radii: rs.clone(),
                mode: self.schedule_mode,
            },
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "set either plan.radius or plan.radii, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config("plan needs radius or radii".into()))
            }
        };
        let plan = StagePlan {
            mode: self.mode,
            order: self.order,
            radii,
            inner_epochs: self.inner_epochs,
            resample_k: self.resample_k,
            rollout_budget: self.rollout_budget,
        };
        plan.validate(n_agents)?;
        if self.stages == 0 {
            return Err(Error::Config("plan.stages must be >= 1".into()));
        }
        Ok(plan)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CertSection {
    #[serde(default = "default_delta_conf")]
    pub delta_conf: f64,
}

fn default_delta_conf() -> f64 {
    0.05
}

impl Default for CertSection {
    fn default() -> Self {
        CertSection {
            delta_conf: default_delta_conf(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub modes: Vec<TrainMode>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScaleSection {
    pub n_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub stages: usize,
    /// Prompt groups per within-stage update (scaled by n inside the sweep).
    pub groups_per_update: usize,
    #[serde(default)]
    pub family: ScaleFamily,
}

/// Homogeneous env family for the team-size sweep.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleFamily {
    /// Reward on the all-ones context of length n (pure coordination).
    AllOnes,
    /// Reward when exactly one agent plays token 1 (anti-coordination:
    /// each agent's best move depends on what the others just became).
    OneHot,
    /// Two rewarded patterns, all-ones worth more than all-zeros: the team
    /// must break the tie and commit together.
    #[default]
    Decoy,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SwapSection {
    pub swap_stage: usize,
    pub agent: usize,
    #[serde(default = "default_probe_size")]
    pub probe_size: usize,
    pub align: AlignConfig,
    /// Logit scale of the freshly random replacement.
    #[serde(default = "default_replacement_scale")]
    pub replacement_scale: f64,
}

fn default_probe_size() -> usize {
    50
}

fn default_replacement_scale() -> f64 {
    2.0
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.env.validate()?;
        self.ppo.validate()?;
        self.adv.validate()?;
        self.plan.compile(self.env.n_agents)?;
        if !(self.cert.delta_conf > 0.0 && self.cert.delta_conf < 1.0) {
            return Err(Error::Config("cert.delta_conf must lie in (0,1)".into()));
        }
        if let Some(compare) = &self.compare {
            if compare.modes.len() < 2 {
                return Err(Error::Config("compare needs >= 2 modes".into()));
            }
        }
        if let Some(scale) = &self.scale {
            if scale.n_values.len() < 4 {
                return Err(Error::Config(
                    "scale.n_values needs >= 4 team sizes for the exponent fit".into(),
                ));
            }
            if scale.seeds.is_empty() || scale.stages == 0 || scale.groups_per_update == 0 {
                return Err(Error::Config("scale section incomplete".into()));
            }
        }
        if let Some(swap) = &self.swap {
            swap.align.validate()?;
            if swap.swap_stage == 0 || swap.swap_stage >= self.plan.stages {
                return Err(Error::Config(
                    "swap.swap_stage must lie strictly inside the stage budget".into(),
                ));
            }
            if swap.agent >= self.env.n_agents {
                return Err(Error::Config("swap.agent out of range".into()));
            }
        }
        Ok(())
    }

    /// Stable hash of the canonical serialized config.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        let d = h.finalize();
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Built-in presets covering the acceptance scenarios.
pub fn preset(name: &str) -> Option<&'static str> {
    match name {
        "train-small" => Some(include_str!("../presets/train_small.toml")),
        "compare-modes" => Some(include_str!("../presets/compare_modes.toml")),
        "scale-sweep" => Some(include_str!("../presets/scale_sweep.toml")),
        "swap-demo" => Some(include_str!("../presets/swap_demo.toml")),
        _ => None,
    }
}

pub fn preset_names() -> &'static [&'static str] {
    &["train-small", "compare-modes", "scale-sweep", "swap-demo"]
}
