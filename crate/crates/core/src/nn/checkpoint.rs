//! Versioned JSON checkpoints.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::network::Network;
use super::optim::Optimizer;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "watchanxiety-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    /// `f32` or `f64`.
    pub precision: String,
    pub network: Network<T>,
    pub optimizer: Option<Optimizer<T>>,
}

fn precision<T: Scalar>() -> &'static str {
    if std::mem::size_of::<T>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(network: Network<T>, optimizer: Option<Optimizer<T>>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            precision: precision::<T>().into(),
            network,
            optimizer,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self>
    where
        T: DeserializeOwned,
    {
        let c: Checkpoint<T> = serde_json::from_str(s)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        if c.precision != precision::<T>() {
            return Err(Error::InvalidInput(format!(
                "checkpoint precision {} does not match {}",
                c.precision,
                precision::<T>()
            )));
        }
        c.network.config.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
