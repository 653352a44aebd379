//! Canonical byte encoding and content hashing.
//!
//! Every hashed value is first written into a self-delimiting byte form and
//! then digested with SHA-256. The byte form is fixed (see
//! `docs/canonical-encoding.md`) so golden digests are portable across hosts.
//!
//! | tag    | value                                                    |
//! |--------|----------------------------------------------------------|
//! | `0x01` | unsigned integer, 8 bytes big-endian                     |
//! | `0x02` | byte string, u64 BE length + raw bytes                   |
//! | `0x03` | UTF-8 string, u64 BE length + bytes                      |
//! | `0x04` | bool, one byte `0x00`/`0x01`                             |
//! | `0x05` | sequence, u64 BE count + items                           |
//! | `0x06` | map, u64 BE count + (key, value) pairs in key order      |
//! | `0x07` | record, type name (as `0x03`) + u64 BE field count + fields in declared order |
//! | `0x08` | option, `0x00` for none or `0x01` + value                |
//! | `0x09` | digest, 32 raw bytes                                     |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

const TAG_U64: u8 = 0x01;
const TAG_BYTES: u8 = 0x02;
const TAG_STR: u8 = 0x03;
const TAG_BOOL: u8 = 0x04;
const TAG_SEQ: u8 = 0x05;
const TAG_MAP: u8 = 0x06;
const TAG_RECORD: u8 = 0x07;
const TAG_OPTION: u8 = 0x08;
const TAG_DIGEST: u8 = 0x09;

/// A 256-bit digest over canonical content.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentHash([u8; 32]);

impl ContentHash {
    pub const fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First 12 hex characters, for human-facing tables.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..6])
    }

    /// Digest of raw bytes, without canonical framing.
    pub fn of_raw(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", self.short())
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid content hash {0:?}: expected 64 hex characters")]
pub struct ParseHashError(pub String);

impl FromStr for ContentHash {
    type Err = ParseHashError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|_| ParseHashError(s.to_string()))?;
        Ok(Self(out))
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Accumulates the canonical byte form of a value.
#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    fn len_prefix(&mut self, n: usize) {
        self.buf.extend_from_slice(&(n as u64).to_be_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.push(TAG_U64);
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.push(TAG_BYTES);
        self.len_prefix(v.len());
        self.buf.extend_from_slice(v);
    }

    pub fn str(&mut self, v: &str) {
        self.buf.push(TAG_STR);
        self.len_prefix(v.len());
        self.buf.extend_from_slice(v.as_bytes());
    }

    pub fn bool(&mut self, v: bool) {
        self.buf.push(TAG_BOOL);
        self.buf.push(v as u8);
    }

    pub fn digest(&mut self, v: &ContentHash) {
        self.buf.push(TAG_DIGEST);
        self.buf.extend_from_slice(&v.0);
    }

    pub fn seq<'a, T: Canonical + 'a>(&mut self, items: impl ExactSizeIterator<Item = &'a T>) {
        self.buf.push(TAG_SEQ);
        self.len_prefix(items.len());
        for item in items {
            item.encode(self);
        }
    }

    /// Map entries must already be in ascending key order.
    pub fn map<'a, V: Canonical + 'a>(
        &mut self,
        entries: impl ExactSizeIterator<Item = (&'a String, &'a V)>,
    ) {
        self.buf.push(TAG_MAP);
        self.len_prefix(entries.len());
        for (k, v) in entries {
            self.str(k);
            v.encode(self);
        }
    }

    pub fn option<T: Canonical>(&mut self, v: Option<&T>) {
        self.buf.push(TAG_OPTION);
        match v {
            None => self.buf.push(0),
            Some(inner) => {
                self.buf.push(1);
                inner.encode(self);
            }
        }
    }

    /// Opens a record; the caller must then encode exactly `fields` values.
    pub fn record(&mut self, type_name: &str, fields: usize) {
        self.buf.push(TAG_RECORD);
        self.str(type_name);
        self.len_prefix(fields);
    }
}

/// Values with a canonical byte form.
pub trait Canonical {
    fn encode(&self, enc: &mut Encoder);

    fn canonical_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.into_bytes()
    }
}

/// SHA-256 over the canonical byte form of `value`.
pub fn canonical_hash<T: Canonical + ?Sized>(value: &T) -> ContentHash {
    let mut enc = Encoder::new();
    value.encode(&mut enc);
    ContentHash::of_raw(&enc.into_bytes())
}

impl<T: Canonical + ?Sized> Canonical for &T {
    fn encode(&self, enc: &mut Encoder) {
        (**self).encode(enc)
    }
}

impl<T: Canonical + ?Sized> Canonical for Arc<T> {
    fn encode(&self, enc: &mut Encoder) {
        (**self).encode(enc)
    }
}

impl Canonical for u64 {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(*self)
    }
}

impl Canonical for u32 {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(u64::from(*self))
    }
}

impl Canonical for bool {
    fn encode(&self, enc: &mut Encoder) {
        enc.bool(*self)
    }
}

impl Canonical for str {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(self)
    }
}

impl Canonical for String {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(self)
    }
}

impl Canonical for [u8] {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(self)
    }
}

impl Canonical for ContentHash {
    fn encode(&self, enc: &mut Encoder) {
        enc.digest(self)
    }
}

impl<T: Canonical> Canonical for Vec<T> {
    fn encode(&self, enc: &mut Encoder) {
        enc.seq(self.iter())
    }
}

impl<T: Canonical> Canonical for Option<T> {
    fn encode(&self, enc: &mut Encoder) {
        enc.option(self.as_ref())
    }
}

impl<V: Canonical> Canonical for BTreeMap<String, V> {
    fn encode(&self, enc: &mut Encoder) {
        enc.map(self.iter())
    }
}

impl<T: Canonical + Ord> Canonical for BTreeSet<T> {
    fn encode(&self, enc: &mut Encoder) {
        enc.seq(self.iter())
    }
}

impl<A: Canonical, B: Canonical> Canonical for (A, B) {
    fn encode(&self, enc: &mut Encoder) {
        enc.record("tuple2", 2);
        self.0.encode(enc);
        self.1.encode(enc);
    }
}

impl<A: Canonical, B: Canonical, C: Canonical> Canonical for (A, B, C) {
    fn encode(&self, enc: &mut Encoder) {
        enc.record("tuple3", 3);
        self.0.encode(enc);
        self.1.encode(enc);
        self.2.encode(enc);
    }
}

/// Byte blobs are opaque content; `Vec<u8>` would otherwise encode as a
/// sequence of integers.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Blob(pub Arc<[u8]>);

impl Blob {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        Self(Arc::from(bytes.into().into_boxed_slice()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for Blob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Blob({} bytes)", self.0.len())
    }
}

impl From<&str> for Blob {
    fn from(s: &str) -> Self {
        Blob::new(s.as_bytes().to_vec())
    }
}

impl From<Vec<u8>> for Blob {
    fn from(v: Vec<u8>) -> Self {
        Blob::new(v)
    }
}

impl Canonical for Blob {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_map_has_fixed_digest() {
        let empty: BTreeMap<String, u64> = BTreeMap::new();
        assert_eq!(empty.canonical_bytes(), vec![TAG_MAP, 0, 0, 0, 0, 0, 0, 0, 0]);
        // sha256(06 00 00 00 00 00 00 00 00), computed with python hashlib
        assert_eq!(
            canonical_hash(&empty).to_hex(),
            "69c29c051218dbea38795b1cdfd816855c312a9cbc0b1daaa79bb9a0b895361a"
        );
    }

    #[test]
    fn length_prefix_disambiguates_concatenation() {
        let a = (String::from("ab"), String::from("c"));
        let b = (String::from("a"), String::from("bc"));
        assert_ne!(canonical_hash(&a), canonical_hash(&b));
    }

    #[test]
    fn map_order_is_key_order() {
        let mut m1 = BTreeMap::new();
        m1.insert("b".to_string(), 2u64);
        m1.insert("a".to_string(), 1u64);
        let mut m2 = BTreeMap::new();
        m2.insert("a".to_string(), 1u64);
        m2.insert("b".to_string(), 2u64);
        assert_eq!(m1.canonical_bytes(), m2.canonical_bytes());
        let bytes = m1.canonical_bytes();
        // key "a" encoded before key "b"
        let pos_a = bytes.windows(1).position(|w| w == b"a").unwrap();
        let pos_b = bytes.windows(1).position(|w| w == b"b").unwrap();
        assert!(pos_a < pos_b);
    }

    #[test]
    fn hex_round_trip() {
        let h = ContentHash::of_raw(b"abc");
        assert_eq!(
            h.to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(h.to_hex().parse::<ContentHash>().unwrap(), h);
        assert!("zz".parse::<ContentHash>().is_err());
    }

    #[test]
    fn blob_and_string_encode_differently() {
        assert_ne!(
            canonical_hash(&Blob::from("x")),
            canonical_hash(&String::from("x"))
        );
    }
}
