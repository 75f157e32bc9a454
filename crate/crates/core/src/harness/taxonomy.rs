//! Label sets and the merge rules applied when a manifest is loaded.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{PcqError, Result};
use crate::manifest::Manifest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTaxonomy {
    pub name: String,
    pub classes: Vec<String>,
    /// Raw label -> class name, applied before lookup.
    #[serde(default)]
    pub merge: BTreeMap<String, String>,
}

impl LabelTaxonomy {
    /// Four classes; "excited" folds into "happy".
    pub fn iemocap4() -> Self {
        LabelTaxonomy {
            name: "iemocap4".into(),
            classes: ["angry", "sad", "happy", "neutral"]
                .map(String::from)
                .to_vec(),
            merge: BTreeMap::from([("excited".to_string(), "happy".to_string())]),
        }
    }

    pub fn emodb7() -> Self {
        LabelTaxonomy {
            name: "emodb7".into(),
            classes: [
                "anger",
                "disgust",
                "fear",
                "happiness",
                "sadness",
                "surprise",
                "neutral",
            ]
            .map(String::from)
            .to_vec(),
            merge: BTreeMap::new(),
        }
    }

    pub fn custom(name: &str, classes: Vec<String>) -> Result<Self> {
        let t = LabelTaxonomy {
            name: name.to_string(),
            classes,
            merge: BTreeMap::new(),
        };
        t.validate()?;
        Ok(t)
    }

    /// `iemocap4`, `emodb7`, or `custom:a,b,c`.
    pub fn by_name(spec: &str) -> Result<Self> {
        match spec {
            "iemocap4" => Ok(Self::iemocap4()),
            "emodb7" => Ok(Self::emodb7()),
            s => match s.strip_prefix("custom:") {
                Some(list) => Self::custom(
                    "custom",
                    list.split(',').map(|c| c.trim().to_string()).collect(),
                ),
                None => Err(PcqError::Config(format!("unknown taxonomy {s:?}"))),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(PcqError::Config(
                "taxonomy needs at least two classes".into(),
            ));
        }
        let mut seen = HashSet::new();
        for c in &self.classes {
            if c.is_empty() || !seen.insert(c) {
                return Err(PcqError::Config(format!(
                    "bad or duplicate class name {c:?}"
                )));
            }
        }
        for target in self.merge.values() {
            if !seen.contains(target) {
                return Err(PcqError::Config(format!(
                    "merge target {target:?} is not a class"
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn canonical<'a>(&'a self, label: &'a str) -> &'a str {
        self.merge.get(label).map(String::as_str).unwrap_or(label)
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        let name = self.canonical(label);
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| PcqError::Data(format!("label {label:?} not in taxonomy {}", self.name)))
    }

    /// Rewrites merged labels in place and rejects unknown ones.
    pub fn apply(&self, manifest: &mut Manifest) -> Result<()> {
        for row in &mut manifest.rows {
            let idx = self.index_of(&row.label)?;
            row.label = self.classes[idx].clone();
        }
        Ok(())
    }
}
