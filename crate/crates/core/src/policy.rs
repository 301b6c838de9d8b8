//! Versioned on-disk container for learned dosing policies.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterModel;
use crate::error::{Error, Result};
use crate::fqi::{ActionValue, TreeQModel};
use crate::mdp::{ActionSet, StateVec};
use crate::qlearning::RbfQModel;

pub const ARTIFACT_FORMAT: &str = "hbdose-policy";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PolicyModel {
    Fqi(TreeQModel),
    QLearning(RbfQModel),
}

impl PolicyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            PolicyModel::Fqi(_) => "fqi",
            PolicyModel::QLearning(_) => "ql",
        }
    }

    pub fn as_action_value(&self) -> &dyn ActionValue {
        match self {
            PolicyModel::Fqi(m) => m,
            PolicyModel::QLearning(m) => m,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyArtifact {
    pub format: String,
    pub version: u32,
    pub actions: ActionSet,
    /// Grouping the policy was trained with; new patients are assigned through it.
    pub cluster: ClusterModel,
    pub model: PolicyModel,
}

impl PolicyArtifact {
    pub fn new(actions: ActionSet, cluster: ClusterModel, model: PolicyModel) -> Result<Self> {
        let n = model.as_action_value().n_actions();
        if n != actions.len() {
            return Err(Error::Config(format!(
                "model has {n} actions but the action set has {}",
                actions.len()
            )));
        }
        Ok(PolicyArtifact {
            format: ARTIFACT_FORMAT.into(),
            version: ARTIFACT_VERSION,
            actions,
            cluster,
            model,
        })
    }

    /// Dose chosen greedily for `s`.
    pub fn dose(&self, s: &StateVec) -> f64 {
        self.actions.dose(self.model.as_action_value().greedy_action(s))
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        ciborium::into_writer(self, out).map_err(|e| Error::Artifact(e.to_string()))
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let artifact: PolicyArtifact = ciborium::from_reader(input).map_err(|e| Error::Artifact(e.to_string()))?;
        if artifact.format != ARTIFACT_FORMAT || artifact.version != ARTIFACT_VERSION {
            return Err(Error::Artifact(format!(
                "unsupported artifact {} v{} (expected {ARTIFACT_FORMAT} v{ARTIFACT_VERSION})",
                artifact.format, artifact.version
            )));
        }
        Ok(artifact)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        PolicyArtifact::read(BufReader::new(f))
    }
}
