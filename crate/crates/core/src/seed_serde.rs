//! Serde adapters that store `u64` seeds as bit-cast `i64`, since the TOML
//! integer type is signed 64-bit. Seeds below 2^63 read back unchanged.

use serde::{Deserialize, Deserializer, Serializer};

pub fn serialize<S: Serializer>(seed: &u64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_i64(*seed as i64)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    Ok(i64::deserialize(d)? as u64)
}
