use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of a value's canonical JSON encoding.
pub fn json_hash<T: Serialize>(value: &T) -> crate::Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(bytes_hash(&bytes))
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
