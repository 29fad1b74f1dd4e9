//! Stable content hashes for configs and artifacts.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Canonical JSON form: object keys sorted, no whitespace.
pub fn canonical_json<S: Serialize + ?Sized>(value: &S) -> Result<String> {
    // serde_json's map type is ordered by key unless `preserve_order` is enabled.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

/// SHA-256 over the canonical JSON form, so field order never changes the hash.
pub fn config_hash<S: Serialize + ?Sized>(value: &S) -> Result<String> {
    Ok(hash_bytes(canonical_json(value)?.as_bytes()))
}

/// First 16 hex digits of [`config_hash`], for directory names and logs.
pub fn short_hash<S: Serialize + ?Sized>(value: &S) -> Result<String> {
    Ok(config_hash(value)?[..16].to_string())
}
