//! Content-derived pallet identity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::Error;

/// SHA-256 digest identifying a sealed pallet image.
///
/// Rendered as 64 lowercase hexadecimal characters. Two sealed images share
/// an id exactly when their bytes are identical.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PalletId([u8; 32]);

impl PalletId {
    pub const LEN: usize = 32;

    pub const fn from_bytes(bytes: [u8; 32]) -> Self {
        PalletId(bytes)
    }

    pub const fn zero() -> Self {
        PalletId([0; 32])
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Hash arbitrary bytes into an id. Used for tests and fixtures; sealed
    /// images derive their id through [`crate::format`].
    pub fn digest(data: &[u8]) -> Self {
        PalletId(Sha256::digest(data).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First `n` hex characters, for display.
    pub fn short(&self, n: usize) -> String {
        let mut s = self.to_hex();
        s.truncate(n);
        s
    }

    /// True when `s` has the exact shape of a rendered id.
    pub fn looks_like_id(s: &str) -> bool {
        s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
    }
}

impl fmt::Display for PalletId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for PalletId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PalletId({})", self.short(12))
    }
}

impl FromStr for PalletId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        // Uppercase hex is rejected: the rendering is canonical.
        if !Self::looks_like_id(s) {
            return Err(Error::InvalidId(s.to_string()));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|_| Error::InvalidId(s.to_string()))?;
        Ok(PalletId(out))
    }
}

impl Serialize for PalletId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for PalletId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
