use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DeepKernelPolicy, DeepSetsPolicy, MetaBoPolicy, Policy, RandomPolicy};
use crate::acquisition::AcquisitionConfig;
use crate::error::{Error, Result};
use crate::trainer::Adam;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Deep kernel trained end to end by REINFORCE.
    Ours,
    /// Deep kernel fit by marginal likelihood only.
    Dkl,
    /// Plain RBF kernel on raw features fit by marginal likelihood.
    Gp,
    /// Deep-sets network trained by REINFORCE.
    Rl,
    /// Network over frozen-GP outputs trained by REINFORCE.
    Metabo,
    Random,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Ours,
        PolicyKind::Dkl,
        PolicyKind::Gp,
        PolicyKind::Rl,
        PolicyKind::Metabo,
        PolicyKind::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Ours => "ours",
            PolicyKind::Dkl => "dkl",
            PolicyKind::Gp => "gp",
            PolicyKind::Rl => "rl",
            PolicyKind::Metabo => "metabo",
            PolicyKind::Random => "random",
        }
    }

    /// Whether the policy is scored through a GP acquisition function.
    pub fn uses_acquisition(self) -> bool {
        matches!(self, PolicyKind::Ours | PolicyKind::Dkl | PolicyKind::Gp)
    }

    /// Whether the policy starts from a marginal-likelihood pretrained
    /// deep kernel.
    pub fn uses_pretraining(self) -> bool {
        matches!(self, PolicyKind::Ours | PolicyKind::Dkl)
    }

    /// Whether the policy is meta-trained by REINFORCE.
    pub fn is_meta_trained(self) -> bool {
        matches!(self, PolicyKind::Ours | PolicyKind::Rl | PolicyKind::Metabo)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown policy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Model {
    DeepKernel(DeepKernelPolicy),
    DeepSets(DeepSetsPolicy),
    MetaBo(MetaBoPolicy),
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub policy: PolicyKind,
    pub model: Model,
    #[serde(default)]
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn new(policy: PolicyKind, model: Model, optimizer: Option<Adam>) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            policy,
            model,
            optimizer,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let load_err = |message: String| Error::Load {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(load_err(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    /// Acquisition of a GP-scored model, if any.
    pub fn acquisition(&self) -> Option<AcquisitionConfig> {
        match &self.model {
            Model::DeepKernel(p) => Some(p.acquisition),
            _ => None,
        }
    }

    pub fn into_policy(self) -> Box<dyn Policy> {
        match self.model {
            Model::DeepKernel(p) => Box::new(p),
            Model::DeepSets(p) => Box::new(p),
            Model::MetaBo(p) => Box::new(p),
            Model::Random => Box::new(RandomPolicy),
        }
    }
}
