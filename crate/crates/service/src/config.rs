//! Versioned, atomically swapped detection configuration.

use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use anyhow::Context;
use chrono::{DateTime, Utc};
use serde::Serialize;
use trapsight::detector::{DetectionConfig, FieldError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigSnapshot {
    /// Starts at 1 and increases by one on every accepted update.
    pub version: u64,
    pub applied_at: DateTime<Utc>,
    pub config: DetectionConfig,
}

/// Holder of the current [`ConfigSnapshot`]. Readers clone an `Arc` and keep
/// using that snapshot for the whole frame.
#[derive(Debug)]
pub struct ConfigCell {
    current: RwLock<Arc<ConfigSnapshot>>,
    updates: Mutex<()>,
}

impl ConfigCell {
    pub fn new(config: DetectionConfig) -> Result<Self, Vec<FieldError>> {
        config.validate()?;
        Ok(Self {
            current: RwLock::new(Arc::new(ConfigSnapshot {
                version: 1,
                applied_at: Utc::now(),
                config,
            })),
            updates: Mutex::new(()),
        })
    }

    pub fn load(&self) -> Arc<ConfigSnapshot> {
        self.current.read().expect("config lock poisoned").clone()
    }

    /// Validates and installs `config`. On rejection the current snapshot,
    /// including its version, is unchanged.
    pub fn update(&self, config: DetectionConfig) -> Result<Arc<ConfigSnapshot>, Vec<FieldError>> {
        config.validate()?;
        let _serial = self.updates.lock().expect("config update lock poisoned");
        let next = Arc::new(ConfigSnapshot {
            version: self.load().version + 1,
            applied_at: Utc::now(),
            config,
        });
        *self.current.write().expect("config lock poisoned") = next.clone();
        Ok(next)
    }
}

/// Reads a config file; absent keys take their defaults.
pub fn load_config_file(path: &Path) -> anyhow::Result<DetectionConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))?;
    DetectionConfig::from_json_value(&value).map_err(|errs| {
        let detail = errs
            .iter()
            .map(|e| format!("{}: {}", e.field, e.message))
            .collect::<Vec<_>>()
            .join("; ");
        anyhow::anyhow!("{}: {detail}", path.display())
    })
}
