//! Delivery of messages between the server and the simulated clients.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// `InProcess` hands messages over by value; `Serialized` encodes every
/// message to JSON and decodes it on the other side, so only what the schema
/// describes can cross the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    #[default]
    InProcess,
    Serialized,
}

impl Transport {
    pub fn carry<T: Serialize + DeserializeOwned + Clone>(&self, message: &T) -> Result<T> {
        match self {
            Transport::InProcess => Ok(message.clone()),
            Transport::Serialized => {
                let bytes = serde_json::to_vec(message)
                    .map_err(|e| FedError::InvalidData(format!("encoding message: {e}")))?;
                serde_json::from_slice(&bytes)
                    .map_err(|e| FedError::InvalidData(format!("decoding message: {e}")))
            }
        }
    }
}
