//! Voting combiner over heterogeneous members.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_model, ModelArtifact, ModelSpec};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Voting {
    #[default]
    Soft,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberConfig {
    pub name: String,
    pub spec: ModelSpec,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl MemberConfig {
    pub fn new(name: impl Into<String>, spec: ModelSpec) -> Self {
        MemberConfig {
            name: name.into(),
            spec,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub name: String,
    /// Normalized so member weights sum to 1.
    pub weight: f64,
    pub model: ModelArtifact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub members: Vec<EnsembleMember>,
    pub voting: Voting,
}

impl EnsembleModel {
    /// Builds an ensemble from trained members, normalizing weights.
    pub fn new(members: Vec<(String, f64, ModelArtifact)>, voting: Voting) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::invalid(format!(
                "an ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        if let Some((name, w, _)) = members.iter().find(|m| !(m.1 > 0.0 && m.1.is_finite())) {
            return Err(Error::invalid(format!("member {name} has non-positive weight {w}")));
        }
        let d = members[0].2.n_features();
        if let Some((name, _, m)) = members.iter().find(|m| m.2.n_features() != d) {
            return Err(Error::invalid(format!(
                "member {name} expects {} features, others expect {d}",
                m.n_features()
            )));
        }
        let total: f64 = members.iter().map(|m| m.1).sum();
        Ok(EnsembleModel {
            members: members
                .into_iter()
                .map(|(name, w, model)| EnsembleMember {
                    name,
                    weight: w / total,
                    model,
                })
                .collect(),
            voting,
        })
    }

    pub fn proba_row(&self, x: &[f64]) -> [f64; 2] {
        let mut p1 = 0.0;
        for m in &self.members {
            let p = m.model.proba_row(x);
            p1 += m.weight
                * match self.voting {
                    Voting::Soft => p[1],
                    Voting::Hard => f64::from(super::hard_label(p)),
                };
        }
        let p1 = p1.clamp(0.0, 1.0);
        [1.0 - p1, p1]
    }

    pub fn member(&self, name: &str) -> Option<&ModelArtifact> {
        self.members.iter().find(|m| m.name == name).map(|m| &m.model)
    }
}

pub fn train_voting_ensemble(
    ds: &Dataset,
    member_configs: &[MemberConfig],
    voting: Voting,
) -> Result<EnsembleModel> {
    if member_configs.len() < 2 {
        return Err(Error::invalid("an ensemble needs at least 2 member configs"));
    }
    let trained: Vec<Result<ModelArtifact>> = member_configs
        .par_iter()
        .map(|c| train_model(&c.spec, ds))
        .collect();
    let mut members = Vec::new();
    for (cfg, res) in member_configs.iter().zip(trained) {
        match res {
            Ok(m) => members.push((cfg.name.clone(), cfg.weight, m)),
            Err(e) => log::warn!("dropping ensemble member {}: {e}", cfg.name),
        }
    }
    EnsembleModel::new(members, voting)
}
