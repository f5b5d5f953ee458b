use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::federation::LedgerSummary;
use crate::forest::{Forest, ForestConfig};

pub const MODEL_FORMAT: &str = "fedforest-model";
pub const MODEL_VERSION: u32 = 1;

/// Self-describing model file: the trees, the configuration that produced
/// them and the training communication totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub version: u32,
    pub config: ForestConfig,
    pub forest: Forest,
    pub ledger: Option<LedgerSummary>,
}

impl ModelDocument {
    pub fn new(forest: Forest, config: ForestConfig, ledger: Option<LedgerSummary>) -> Self {
        ModelDocument {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            config,
            forest,
            ledger,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| FedError::Model(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| FedError::Model(format!("malformed document: {e}")))?;
        match raw.get("format").and_then(|v| v.as_str()) {
            Some(MODEL_FORMAT) => {}
            other => return Err(FedError::Model(format!("unexpected format tag {other:?}"))),
        }
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(MODEL_VERSION) => {}
            other => return Err(FedError::Model(format!("unsupported model version {other:?}"))),
        }
        let doc: ModelDocument =
            serde_json::from_value(raw).map_err(|e| FedError::Model(format!("malformed document: {e}")))?;
        if doc.forest.trees.is_empty() {
            return Err(FedError::Model("model holds no trees".into()));
        }
        for tree in &doc.forest.trees {
            tree.validate()?;
        }
        Ok(doc)
    }
}
