use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderModel;
use crate::error::{Error, Result};

pub const REGISTRY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub display_name: String,
    /// Unit-norm resting-state signature.
    pub signature: Vec<f32>,
    pub checkpoint_path: String,
    /// Device profile name.
    pub device: String,
    /// Seconds since the Unix epoch.
    pub created_at: f64,
}

impl UserProfile {
    pub fn signature_norm(&self) -> f64 {
        self.signature.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    /// Loads the user's checkpoint; fails when it is missing or its digest
    /// does not match the stored configuration.
    pub fn load_model(&self) -> Result<DecoderModel> {
        DecoderModel::load(Path::new(&self.checkpoint_path))
    }
}

/// Persistent set of known users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub version: u32,
    pub users: Vec<UserProfile>,
}

impl Default for Registry {
    fn default() -> Self {
        Self {
            version: REGISTRY_VERSION,
            users: Vec::new(),
        }
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reads `path`; a missing file is an empty registry.
    pub fn load(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::from_json(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.version != REGISTRY_VERSION {
            return Err(Error::Format(format!("unsupported registry version {}", r.version)));
        }
        Ok(r)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    /// Atomic replace of `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::atomic_write(path, self.to_json().as_bytes())
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn get(&self, user_id: &str) -> Option<&UserProfile> {
        self.users.iter().find(|u| u.user_id == user_id)
    }

    /// Inserts or replaces by `user_id`.
    pub fn upsert(&mut self, user: UserProfile) -> Result<()> {
        let n = user.signature_norm();
        if !user.signature.is_empty() && (n - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!("signature of `{}` has norm {n}", user.user_id)));
        }
        match self.users.iter_mut().find(|u| u.user_id == user.user_id) {
            Some(slot) => *slot = user,
            None => self.users.push(user),
        }
        Ok(())
    }

    /// Next free identifier of the form `U0001`.
    pub fn next_user_id(&self) -> String {
        let max = self
            .users
            .iter()
            .filter_map(|u| u.user_id.strip_prefix('U').and_then(|n| n.parse::<u32>().ok()))
            .max()
            .unwrap_or(0);
        format!("U{:04}", max + 1)
    }
}
