//! Client-local tables and pooled evaluation sets.

use std::collections::BTreeSet;

use crate::error::{FedError, Result};
use crate::impurity::TaskKind;

/// One client's local data: a row-major `n × d` feature matrix and outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    client_id: u32,
    d: usize,
    features: Vec<f64>,
    targets: Vec<f64>,
}

impl ClientShard {
    pub fn new(client_id: u32, d: usize, features: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(FedError::InvalidData("at least one feature is required".into()));
        }
        if features.len() != d * targets.len() {
            return Err(FedError::InvalidData(format!(
                "client {client_id}: {} feature values do not form {} rows of {d}",
                features.len(),
                targets.len()
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(FedError::InvalidData(format!(
                "client {client_id}: non-finite feature at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        Ok(ClientShard {
            client_id,
            d,
            features,
            targets,
        })
    }

    pub fn from_rows(client_id: u32, rows: &[Vec<f64>], targets: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.len() != targets.len() {
            return Err(FedError::InvalidData(format!(
                "client {client_id}: {} rows but {} targets",
                rows.len(),
                targets.len()
            )));
        }
        if let Some(bad) = rows.iter().position(|r| r.len() != d) {
            return Err(FedError::DimensionMismatch {
                expected: d,
                got: rows[bad].len(),
            });
        }
        ClientShard::new(client_id, d, rows.concat(), targets)
    }

    pub fn client_id(&self) -> u32 {
        self.client_id
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.features[i * self.d + j]
    }

    #[inline]
    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }
}

/// Checks that shards agree on dimension, have distinct ids, hold valid
/// targets and valid categorical codes. Returns `d`.
pub fn validate_shards(shards: &[ClientShard], task: TaskKind, categorical: &[usize]) -> Result<usize> {
    let first = shards
        .first()
        .ok_or_else(|| FedError::InvalidData("no client shards".into()))?;
    let d = first.d();
    let mut ids = BTreeSet::new();
    for shard in shards {
        if shard.d() != d {
            return Err(FedError::DimensionMismatch {
                expected: d,
                got: shard.d(),
            });
        }
        if !ids.insert(shard.client_id()) {
            return Err(FedError::InvalidData(format!(
                "duplicate client id {}",
                shard.client_id()
            )));
        }
        if shard.is_empty() {
            return Err(FedError::InvalidData(format!(
                "client {} holds no samples",
                shard.client_id()
            )));
        }
        for &y in shard.targets() {
            task.check_target(y)?;
        }
        for &j in categorical {
            if j >= d {
                return Err(FedError::InvalidConfig(format!(
                    "categorical feature {j} out of range for d = {d}"
                )));
            }
            for i in 0..shard.len() {
                let v = shard.value(i, j);
                if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                    return Err(FedError::InvalidData(format!(
                        "client {}: categorical feature {j} has non-code value {v} at row {i}",
                        shard.client_id()
                    )));
                }
            }
        }
    }
    Ok(d)
}

/// Pooled rows with their client indicator, used for held-out evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub d: usize,
    pub client_ids: Vec<u32>,
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Table {
    pub fn new(d: usize) -> Self {
        Table {
            d,
            ..Table::default()
        }
    }

    pub fn push(&mut self, client: u32, x: &[f64], y: f64) {
        debug_assert_eq!(x.len(), self.d);
        self.client_ids.push(client);
        self.features.extend_from_slice(x);
        self.targets.push(y);
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn from_shards(shards: &[ClientShard]) -> Self {
        let d = shards.first().map_or(0, ClientShard::d);
        let mut table = Table::new(d);
        for shard in shards {
            for i in 0..shard.len() {
                table.push(shard.client_id(), shard.row(i), shard.target(i));
            }
        }
        table
    }

    /// Regroups rows by client id, ascending, keeping row order.
    pub fn to_shards(&self) -> Result<Vec<ClientShard>> {
        let ids: BTreeSet<u32> = self.client_ids.iter().copied().collect();
        ids.into_iter()
            .map(|id| {
                let mut features = Vec::new();
                let mut targets = Vec::new();
                for i in (0..self.len()).filter(|&i| self.client_ids[i] == id) {
                    features.extend_from_slice(self.row(i));
                    targets.push(self.targets[i]);
                }
                ClientShard::new(id, self.d, features, targets)
            })
            .collect()
    }
}
