use serde::{Deserialize, Serialize};

use crate::personalization::registry::Registry;

pub const DEFAULT_IDENTITY_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IdentityResult {
    Known { user_id: String, cosine: f64 },
    /// No registered user reached the threshold. `best_cosine` is absent for
    /// an empty registry.
    Unknown { best_cosine: Option<f64> },
}

impl IdentityResult {
    pub fn user_id(&self) -> Option<&str> {
        match self {
            IdentityResult::Known { user_id, .. } => Some(user_id),
            IdentityResult::Unknown { .. } => None,
        }
    }
}

/// Cosine similarity in double precision; 0 when either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb).sqrt()
}

/// Nearest registered signature by cosine; ties go to the earlier user.
pub fn identify_user(signature: &[f32], registry: &Registry, threshold: f64) -> IdentityResult {
    let mut best: Option<(&str, f64)> = None;
    for u in &registry.users {
        if u.signature.len() != signature.len() {
            continue;
        }
        let c = cosine(signature, &u.signature);
        if best.map_or(true, |(_, b)| c > b) {
            best = Some((&u.user_id, c));
        }
    }
    match best {
        Some((id, c)) if c >= threshold => IdentityResult::Known {
            user_id: id.to_string(),
            cosine: c,
        },
        other => IdentityResult::Unknown {
            best_cosine: other.map(|(_, c)| c),
        },
    }
}
