//! Run configuration: one JSON document covering every stage, with
//! dot-path overrides and a stable content hash.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::codespace::{CodespaceConfig, PretrainConfig};
use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::numeric::RngSeed;
use crate::translator::TranslatorConfig;

/// Hex SHA-256 of the compact JSON encoding of `value`. Struct fields
/// serialize in declaration order and maps are ordered, so equal values give
/// equal hashes.
pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EgoPolicy {
    /// The configured ego modality only.
    Fixed,
    /// Every agent takes a turn as ego; AP is averaged over ego modalities.
    Alternating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollabConfig {
    pub ego: String,
    pub ego_policy: EgoPolicy,
    pub ego_dense: bool,
    pub late_threshold: f64,
    /// Heading noise (radians) applied alongside position noise in sweeps.
    pub pose_noise_heading: f64,
}

impl Default for CollabConfig {
    fn default() -> Self {
        Self {
            ego: "mB".into(),
            ego_policy: EgoPolicy::Fixed,
            ego_dense: false,
            late_threshold: 0.5,
            pose_noise_heading: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub codebook_sizes: Vec<usize>,
    /// Position noise levels in cells.
    pub pose_noise_cells: Vec<f64>,
    /// Modality counts for the parameter-scaling table.
    pub scaling_counts: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            codebook_sizes: vec![4, 8, 16, 32, 64],
            pose_noise_cells: vec![0.0, 0.5, 1.0, 2.0],
            scaling_counts: vec![2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: RngSeed,
    pub dataset: DatasetConfig,
    pub pretrain: PretrainConfig,
    pub codespace: CodespaceConfig,
    pub translator: TranslatorConfig,
    pub collab: CollabConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: RngSeed(7),
            dataset: DatasetConfig::default(),
            pretrain: PretrainConfig::default(),
            codespace: CodespaceConfig::default(),
            translator: TranslatorConfig::default(),
            collab: CollabConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

/// Short names accepted by [`set_path`] for frequently swept fields.
const ALIASES: &[(&str, &str)] = &[
    ("codespace.D", "codespace.codebook_size"),
    ("codespace.C_z", "codespace.code_dim"),
    ("translator.C_hid", "translator.hidden"),
];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let cs = &self.codespace;
        if cs.codebook_size < 2 || cs.codebook_size > 256 {
            return Err(Error::Config(format!(
                "codespace.codebook_size must be in 2..=256, got {}",
                cs.codebook_size
            )));
        }
        if cs.code_dim == 0 || !(cs.lr > 0.0) || cs.commitment < 0.0 || cs.lambda < 0.0 || !(cs.smooth_l1_beta > 0.0) {
            return Err(Error::Config("codespace parameters out of range".into()));
        }
        if !(self.pretrain.lr > 0.0) {
            return Err(Error::Config("pretrain.lr must be positive".into()));
        }
        self.translator.validate()?;
        if !self.dataset.modalities.iter().any(|m| m.id == self.collab.ego) {
            return Err(Error::Config(format!("collab.ego {} is not a configured modality", self.collab.ego)));
        }
        if !(0.0..=1.0).contains(&self.collab.late_threshold) || self.collab.pose_noise_heading < 0.0 {
            return Err(Error::Config("collab.late_threshold must be in [0, 1] and noise non-negative".into()));
        }
        let e = &self.experiment;
        if e.codebook_sizes.iter().any(|d| !(2..=256).contains(d)) {
            return Err(Error::Config("experiment.codebook_sizes must be in 2..=256".into()));
        }
        if e.pose_noise_cells.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("experiment.pose_noise_cells must be non-negative".into()));
        }
        if e.scaling_counts.iter().any(|n| *n < 2) {
            return Err(Error::Config("experiment.scaling_counts must be at least 2".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        hash_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        Ok(c)
    }

    /// Applies `path=value` overrides, e.g. `codespace.D=32`. Values are
    /// parsed as JSON and fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o} is not of the form path=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, path, value)?;
        }
        serde_json::from_value(v).map_err(|e| Error::Config(format!("override produced an invalid config: {e}")))
    }
}

/// Replaces the field at dot-separated `path` in a JSON document. Numeric
/// segments index arrays.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let path = ALIASES.iter().find(|(a, _)| *a == path).map(|(_, p)| *p).unwrap_or(path);
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let next = match cur {
            Value::Object(map) => map.get_mut(*part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|k| items.get_mut(k)),
            _ => None,
        }
        .ok_or_else(|| Error::Config(format!("unknown config field {path}")))?;
        if last {
            *next = value;
            return Ok(());
        }
        cur = next;
    }
    Err(Error::Config("empty override path".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates_and_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
        assert_eq!(c.hash().unwrap(), RunConfig::from_json(&text).unwrap().hash().unwrap());
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .with_overrides(&["codespace.D=32".into(), "collab.ego=mA".into(), "dataset.modalities.0.noise_sigma=0.5".into()])
            .unwrap();
        assert_eq!(c.codespace.codebook_size, 32);
        assert_eq!(c.collab.ego, "mA");
        assert_eq!(c.dataset.modalities[0].noise_sigma, 0.5);
        assert_ne!(c.hash().unwrap(), RunConfig::default().hash().unwrap());
        assert!(RunConfig::default().with_overrides(&["codespace.nope=1".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["codespace.D".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["codespace.D=\"x\"".into()]).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let c = RunConfig::default().with_overrides(&["codespace.D=1".into()]).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = RunConfig::default().with_overrides(&["collab.ego=mZ".into()]).unwrap();
        assert!(c.validate().is_err());
    }
}
