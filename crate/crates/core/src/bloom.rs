//! Bloom filter with the sizing rule used throughout the pipeline, plus the
//! bitwise merges that build dataset and join filters.
//!
//! Sizing: |BF| = ceil(-N ln p / (ln 2)^2) bits and h = round((|BF|/N) ln 2)
//! hash functions, h clamped to at least one. Membership uses double
//! hashing, so a filter is fully described by (|BF|, h, salt) and two
//! filters merge bit-for-bit iff those three match.
//!
//! Rejected variants: counting cells would buy deletion and invertible
//! cells enumeration, at several bits (or a whole key) per cell where this
//! pipeline only ever asks membership — and inverting can report "not
//! found" for a present key, i.e. a false negative the filtering stage must
//! never produce. Growable filters chain sub-filters of different sizes,
//! which breaks the fixed-size bitwise merges the dataset and join filters
//! are built from.

use crate::hashing::splitmix64;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BloomError {
    #[error("false-positive target must lie in (0, 1), got {0}")]
    InvalidFp(f64),
    #[error("capacity must be at least 1")]
    InvalidCapacity,
    #[error("filters are not merge-compatible: ({0} bits, h={1}, salt={2:#x}) vs ({3} bits, h={4}, salt={5:#x})")]
    Incompatible(u64, u32, u64, u64, u32, u64),
    #[error("blob too short or corrupt: {0}")]
    BadBlob(String),
}

/// Sizing inputs: expected insert count and target false-positive rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FilterParams {
    pub capacity: u64,
    pub target_fp: f64,
}

impl FilterParams {
    pub fn new(capacity: u64, target_fp: f64) -> Result<Self, BloomError> {
        if capacity == 0 {
            return Err(BloomError::InvalidCapacity);
        }
        if !(target_fp > 0.0 && target_fp < 1.0) {
            return Err(BloomError::InvalidFp(target_fp));
        }
        Ok(FilterParams {
            capacity,
            target_fp,
        })
    }
}

/// Bits and hash count for the given capacity and false-positive target.
///
/// Returns the raw formula values; [`BloomFilter::new`] additionally floors
/// the bit array at 8 bits.
pub fn size_for(params: FilterParams) -> Result<(u64, u32), BloomError> {
    let p = params.target_fp;
    if !(p > 0.0 && p < 1.0) {
        return Err(BloomError::InvalidFp(p));
    }
    let ln2 = std::f64::consts::LN_2;
    let bits = (-(params.capacity as f64) * p.ln() / (ln2 * ln2)).ceil() as u64;
    let bits = bits.max(1);
    let h = ((bits as f64 / params.capacity as f64) * ln2).round() as i64;
    let h = h.clamp(1, 64) as u32;
    Ok((bits, h))
}

/// Expected false-positive probability after `inserted` keys in a filter of
/// `bits` bits with `h` hash functions.
pub fn expected_fp(bits: u64, h: u32, inserted: u64) -> f64 {
    let exponent = -(h as f64) * inserted as f64 / bits as f64;
    (1.0 - exponent.exp()).powi(h as i32)
}

const BLOB_HEADER_BYTES: u64 = 32;
const BLOB_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BloomFilter {
    words: Vec<u64>,
    n_bits: u64,
    h: u32,
    salt: u64,
    n_inserted: u64,
}

impl BloomFilter {
    pub fn new(n_bits: u64, h: u32, salt: u64) -> Self {
        let n_bits = n_bits.max(8);
        let h = h.clamp(1, 64);
        let words = vec![0u64; n_bits.div_ceil(64) as usize];
        BloomFilter {
            words,
            n_bits,
            h,
            salt,
            n_inserted: 0,
        }
    }

    pub fn sized(params: FilterParams, salt: u64) -> Result<Self, BloomError> {
        let (bits, h) = size_for(params)?;
        Ok(BloomFilter::new(bits, h, salt))
    }

    pub fn n_bits(&self) -> u64 {
        self.n_bits
    }

    pub fn hash_count(&self) -> u32 {
        self.h
    }

    pub fn salt(&self) -> u64 {
        self.salt
    }

    pub fn n_inserted(&self) -> u64 {
        self.n_inserted
    }

    fn seeds(&self) -> (u64, u64) {
        (
            splitmix64(self.salt),
            splitmix64(self.salt ^ 0x517c_c1b7_2722_0a95),
        )
    }

    fn probe_indices(&self, key: u64) -> impl Iterator<Item = u64> + '_ {
        let (s1, s2) = self.seeds();
        let h1 = splitmix64(key ^ s1) % self.n_bits;
        let mut h2 = splitmix64(key ^ s2) % self.n_bits;
        if h2 == 0 {
            h2 = 1;
        }
        let n = self.n_bits as u128;
        (0..self.h as u128).map(move |i| ((h1 as u128 + i * h2 as u128) % n) as u64)
    }

    pub fn insert(&mut self, key: u64) {
        let idx: Vec<u64> = self.probe_indices(key).collect();
        for bit in idx {
            self.words[(bit / 64) as usize] |= 1u64 << (bit % 64);
        }
        self.n_inserted += 1;
    }

    pub fn contains(&self, key: u64) -> bool {
        self.probe_indices(key)
            .all(|bit| self.words[(bit / 64) as usize] & (1u64 << (bit % 64)) != 0)
    }

    pub fn compatible(&self, other: &BloomFilter) -> bool {
        self.n_bits == other.n_bits && self.h == other.h && self.salt == other.salt
    }

    fn check_compatible(&self, other: &BloomFilter) -> Result<(), BloomError> {
        if self.compatible(other) {
            Ok(())
        } else {
            Err(BloomError::Incompatible(
                self.n_bits,
                self.h,
                self.salt,
                other.n_bits,
                other.h,
                other.salt,
            ))
        }
    }

    /// Bitwise OR: contains every key either input contains.
    pub fn union(&self, other: &BloomFilter) -> Result<BloomFilter, BloomError> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (w, o) in out.words.iter_mut().zip(&other.words) {
            *w |= o;
        }
        out.n_inserted = self.n_inserted + other.n_inserted;
        Ok(out)
    }

    /// Bitwise AND: contains every key inserted into both inputs, and may
    /// contain compound false positives.
    pub fn intersect(&self, other: &BloomFilter) -> Result<BloomFilter, BloomError> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (w, o) in out.words.iter_mut().zip(&other.words) {
            *w &= o;
        }
        out.n_inserted = self.n_inserted.min(other.n_inserted);
        Ok(out)
    }

    /// Transfer size as charged by the analytic model: the raw bit array.
    pub fn model_bytes(&self) -> f64 {
        self.n_bits as f64 / 8.0
    }

    /// Transfer size on the simulated wire: 32-byte header plus bit array.
    pub fn wire_bytes(&self) -> u64 {
        BLOB_HEADER_BYTES + self.n_bits.div_ceil(8)
    }

    /// Little-endian blob: header (n_bits u64, h u32, version u32, salt u64,
    /// n_inserted u64) followed by the packed bit array.
    pub fn to_bytes(&self) -> Vec<u8> {
        let byte_len = self.n_bits.div_ceil(8) as usize;
        let mut out = Vec::with_capacity(32 + byte_len);
        out.extend_from_slice(&self.n_bits.to_le_bytes());
        out.extend_from_slice(&self.h.to_le_bytes());
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        out.extend_from_slice(&self.salt.to_le_bytes());
        out.extend_from_slice(&self.n_inserted.to_le_bytes());
        let mut bytes = vec![0u8; byte_len];
        for (i, w) in self.words.iter().enumerate() {
            let le = w.to_le_bytes();
            let start = i * 8;
            let end = (start + 8).min(byte_len);
            bytes[start..end].copy_from_slice(&le[..end - start]);
        }
        out.extend_from_slice(&bytes);
        out
    }

    pub fn from_bytes(blob: &[u8]) -> Result<BloomFilter, BloomError> {
        if blob.len() < 32 {
            return Err(BloomError::BadBlob(format!(
                "{} bytes is below the header size",
                blob.len()
            )));
        }
        let n_bits = u64::from_le_bytes(blob[0..8].try_into().unwrap());
        let h = u32::from_le_bytes(blob[8..12].try_into().unwrap());
        let version = u32::from_le_bytes(blob[12..16].try_into().unwrap());
        if version != BLOB_VERSION {
            return Err(BloomError::BadBlob(format!(
                "unsupported blob version {version}"
            )));
        }
        let salt = u64::from_le_bytes(blob[16..24].try_into().unwrap());
        let n_inserted = u64::from_le_bytes(blob[24..32].try_into().unwrap());
        let byte_len = n_bits.div_ceil(8) as usize;
        if blob.len() != 32 + byte_len {
            return Err(BloomError::BadBlob(format!(
                "expected {} payload bytes, found {}",
                byte_len,
                blob.len() - 32
            )));
        }
        let mut words = vec![0u64; n_bits.div_ceil(64) as usize];
        for (i, w) in words.iter_mut().enumerate() {
            let start = 32 + i * 8;
            let end = (start + 8).min(blob.len());
            let mut le = [0u8; 8];
            le[..end - start].copy_from_slice(&blob[start..end]);
            *w = u64::from_le_bytes(le);
        }
        Ok(BloomFilter {
            words,
            n_bits,
            h,
            salt,
            n_inserted,
        })
    }
}
