//! Edit directions and their JSON files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DirectionProvenance {
    Prompts { pos_prompts: Vec<String>, neg_prompts: Vec<String>, n_per_prompt: usize },
    /// Imported from elsewhere; the only accepted label is `"external"`.
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditDirection {
    pub name: String,
    pub vector: Vec<f64>,
    pub provenance: DirectionProvenance,
}

impl EditDirection {
    /// Normalizes `vector` and wraps it as an external direction.
    pub fn external(name: &str, mut vector: Vec<f64>) -> Result<Self> {
        let n = norm(&vector);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::invalid("direction vector has zero or non-finite norm"));
        }
        vector.iter_mut().for_each(|v| *v /= n);
        Ok(EditDirection { name: name.to_string(), vector, provenance: DirectionProvenance::Label("external".into()) })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Error::format("direction", r);
        if self.vector.is_empty() {
            return Err(bad("empty vector".into()));
        }
        let n = norm(&self.vector);
        if !((n - 1.0).abs() <= 1e-6) {
            return Err(bad(format!("vector norm {n} is not 1")));
        }
        match &self.provenance {
            DirectionProvenance::Label(l) if l != "external" => Err(bad(format!("unknown provenance `{l}`"))),
            DirectionProvenance::Prompts { pos_prompts, neg_prompts, n_per_prompt }
                if pos_prompts.is_empty() || neg_prompts.is_empty() || *n_per_prompt == 0 =>
            {
                Err(bad("prompt provenance needs prompts on both sides".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: EditDirection = serde_json::from_str(text).map_err(|e| Error::format("direction", e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("direction serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
