//! Content-addressed store of layer-`P` segment representations.
//!
//! Keys combine the model fingerprint, the parallel-layer count and a digest
//! of the segment's token ids, so representations from a different model or
//! depth can never be returned. Memory is bounded by a byte budget with LRU
//! eviction. Readers receive `Arc` snapshots that stay valid after eviction.
//!
//! Entry file layout (little-endian):
//!
//! ```text
//! "LAITC" | version u8 = 1 | fingerprint u64 | p u64 | token digest u64 |
//! rows u32 | cols u32 | rows*cols f32
//! ```

use std::path::Path;
use std::sync::{Arc, Mutex};

use lru::LruCache;
use serde::Serialize;

use crate::error::{FormatError, LaitError, Result};
use crate::io::{fnv1a64, write_atomic};
use crate::tensor::{Matrix, Scalar};
use crate::weights::Reader;

pub const ENTRY_MAGIC: &[u8; 5] = b"LAITC";
pub const ENTRY_VERSION: u8 = 1;
/// Fixed per-entry overhead used for budget accounting.
pub const ENTRY_OVERHEAD_BYTES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    pub model_fingerprint: u64,
    pub p_layers: u64,
    pub token_digest: u64,
}

impl CacheKey {
    pub fn to_bytes(&self) -> [u8; 24] {
        let mut out = [0u8; 24];
        out[..8].copy_from_slice(&self.model_fingerprint.to_le_bytes());
        out[8..16].copy_from_slice(&self.p_layers.to_le_bytes());
        out[16..].copy_from_slice(&self.token_digest.to_le_bytes());
        out
    }

    /// FNV-1a over the 24 key bytes; names the entry file on disk.
    pub fn combined_digest(&self) -> u64 {
        fnv1a64(&self.to_bytes())
    }

    pub fn file_name(&self) -> String {
        format!("{:016x}.laitc", self.combined_digest())
    }
}

/// FNV-1a 64 over the ids, each as a little-endian u32.
pub fn token_digest(token_ids: &[u32]) -> u64 {
    let bytes: Vec<u8> = token_ids.iter().flat_map(|t| t.to_le_bytes()).collect();
    fnv1a64(&bytes)
}

pub fn cache_key(model_fingerprint: u64, p_layers: usize, token_ids: &[u32]) -> Result<CacheKey> {
    if p_layers == 0 {
        return Err(LaitError::NothingCacheable);
    }
    Ok(CacheKey {
        model_fingerprint,
        p_layers: p_layers as u64,
        token_digest: token_digest(token_ids),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry<T = f32> {
    pub key: CacheKey,
    pub rep: Arc<Matrix<T>>,
    /// Full token ids, kept only when exact key verification is wanted.
    pub tokens: Option<Vec<u32>>,
    pub last_used: u64,
}

impl<T: Scalar> CacheEntry<T> {
    pub fn new(key: CacheKey, rep: Arc<Matrix<T>>) -> Result<Self> {
        if rep.rows() == 0 || rep.cols() == 0 {
            return Err(LaitError::shape("CacheEntry::new", "empty representation"));
        }
        Ok(Self {
            key,
            rep,
            tokens: None,
            last_used: 0,
        })
    }

    pub fn with_tokens(key: CacheKey, rep: Arc<Matrix<T>>, tokens: &[u32]) -> Result<Self> {
        let mut e = Self::new(key, rep)?;
        e.tokens = Some(tokens.to_vec());
        Ok(e)
    }

    pub fn bytes(&self) -> usize {
        ENTRY_OVERHEAD_BYTES + self.rep.rows() * self.rep.cols() * 4
    }
}

pub fn serialize_entry(entry: &CacheEntry<f32>) -> Vec<u8> {
    let rep = &entry.rep;
    let mut out = Vec::with_capacity(38 + rep.data().len() * 4);
    out.extend_from_slice(ENTRY_MAGIC);
    out.push(ENTRY_VERSION);
    out.extend_from_slice(&entry.key.to_bytes());
    out.extend_from_slice(&(rep.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(rep.cols() as u32).to_le_bytes());
    for v in rep.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn deserialize_entry(bytes: &[u8]) -> Result<CacheEntry<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(ENTRY_MAGIC.len())?;
    if magic != ENTRY_MAGIC {
        return Err(FormatError::BadMagic {
            expected: "LAITC",
            found: magic.to_vec(),
        }
        .into());
    }
    let version = r.u8()?;
    if version != ENTRY_VERSION {
        return Err(FormatError::Version {
            found: version as u32,
            expected: ENTRY_VERSION as u32,
        }
        .into());
    }
    let key = CacheKey {
        model_fingerprint: r.u64()?,
        p_layers: r.u64()?,
        token_digest: r.u64()?,
    };
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if rows == 0 || cols == 0 {
        return Err(FormatError::InvalidHeader(format!("empty {rows}x{cols} representation")).into());
    }
    let n = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| FormatError::InvalidHeader(format!("{rows}x{cols} overflows")))?;
    let payload = r.take(n)?;
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - r.pos).into());
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    CacheEntry::new(key, Arc::new(Matrix::new(rows, cols, data)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub insertions: u64,
    pub evictions: u64,
    pub evicted_bytes: u64,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

struct Stored<T> {
    rep: Arc<Matrix<T>>,
    tokens: Option<Vec<u32>>,
    bytes: usize,
    last_used: u64,
}

struct Inner<T> {
    lru: LruCache<CacheKey, Stored<T>>,
    resident: usize,
    tick: u64,
    stats: CacheStats,
}

/// Thread-safe, byte-budgeted LRU cache of segment representations.
pub struct RepCache<T = f32> {
    inner: Mutex<Inner<T>>,
    budget: usize,
    verify_tokens: bool,
}

impl<T: Scalar> RepCache<T> {
    pub fn new(budget_bytes: usize) -> Self {
        Self {
            inner: Mutex::new(Inner {
                lru: LruCache::unbounded(),
                resident: 0,
                tick: 0,
                stats: CacheStats::default(),
            }),
            budget: budget_bytes,
            verify_tokens: false,
        }
    }

    /// Also store token ids and compare them on lookup, so digest collisions
    /// read as misses.
    pub fn with_token_verification(mut self, on: bool) -> Self {
        self.verify_tokens = on;
        self
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner<T>> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Inserts or replaces an entry, evicting least recently used entries
    /// until the budget holds. Returns the number of evicted bytes.
    pub fn put(&self, entry: CacheEntry<T>) -> Result<usize> {
        let bytes = entry.bytes();
        if bytes > self.budget {
            return Err(LaitError::EntryTooLarge {
                bytes,
                budget: self.budget,
            });
        }
        let mut inner = self.lock();
        inner.tick += 1;
        let stored = Stored {
            rep: entry.rep,
            tokens: if self.verify_tokens { entry.tokens } else { None },
            bytes,
            last_used: inner.tick,
        };
        if let Some(old) = inner.lru.put(entry.key, stored) {
            inner.resident -= old.bytes;
        }
        inner.resident += bytes;
        inner.stats.insertions += 1;
        let mut evicted = 0;
        while inner.resident > self.budget {
            let (_, gone) = inner.lru.pop_lru().expect("resident bytes imply entries");
            inner.resident -= gone.bytes;
            evicted += gone.bytes;
            inner.stats.evictions += 1;
        }
        inner.stats.evicted_bytes += evicted as u64;
        Ok(evicted)
    }

    pub fn get(&self, key: &CacheKey) -> Option<Arc<Matrix<T>>> {
        self.lookup(key, None)
    }

    /// Lookup that, under token verification, also requires equal token ids.
    pub fn get_checked(&self, key: &CacheKey, tokens: &[u32]) -> Option<Arc<Matrix<T>>> {
        self.lookup(key, Some(tokens))
    }

    fn lookup(&self, key: &CacheKey, tokens: Option<&[u32]>) -> Option<Arc<Matrix<T>>> {
        let mut inner = self.lock();
        inner.tick += 1;
        let tick = inner.tick;
        let verify = self.verify_tokens;
        let found = match inner.lru.get_mut(key) {
            Some(s) if !verify || tokens.is_none() || s.tokens.as_deref() == tokens => {
                s.last_used = tick;
                Some(Arc::clone(&s.rep))
            }
            _ => None,
        };
        if found.is_some() {
            inner.stats.hits += 1;
        } else {
            inner.stats.misses += 1;
        }
        found
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.lock().lru.contains(key)
    }

    pub fn last_used(&self, key: &CacheKey) -> Option<u64> {
        self.lock().lru.peek(key).map(|s| s.last_used)
    }

    pub fn len(&self) -> usize {
        self.lock().lru.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resident_bytes(&self) -> usize {
        self.lock().resident
    }

    pub fn stats(&self) -> CacheStats {
        self.lock().stats
    }

    pub fn clear(&self) {
        let mut inner = self.lock();
        inner.lru.clear();
        inner.resident = 0;
    }

    /// Entries from least to most recently used.
    pub fn entries(&self) -> Vec<CacheEntry<T>> {
        let inner = self.lock();
        let mut out: Vec<CacheEntry<T>> = inner
            .lru
            .iter()
            .map(|(k, s)| CacheEntry {
                key: *k,
                rep: Arc::clone(&s.rep),
                tokens: s.tokens.clone(),
                last_used: s.last_used,
            })
            .collect();
        out.reverse();
        out
    }
}

impl RepCache<f32> {
    /// Writes one file per entry into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<usize> {
        std::fs::create_dir_all(dir)?;
        let entries = self.entries();
        for e in &entries {
            write_atomic(&dir.join(e.key.file_name()), &serialize_entry(e))?;
        }
        Ok(entries.len())
    }

    /// Loads every `*.laitc` file in `dir`, in file-name order.
    pub fn load_dir(&self, dir: &Path) -> Result<usize> {
        if !dir.exists() {
            return Ok(0);
        }
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "laitc"))
            .collect();
        paths.sort();
        let mut n = 0;
        for p in paths {
            let entry = deserialize_entry(&std::fs::read(&p)?)?;
            if entry.bytes() <= self.budget {
                self.put(entry)?;
                n += 1;
            }
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(rows: usize, seed: f32) -> Arc<Matrix<f32>> {
        Arc::new(Matrix::from_fn(rows, 4, |r, c| seed + r as f32 * 0.5 - c as f32 * 0.25))
    }

    fn key(d: u64) -> CacheKey {
        CacheKey {
            model_fingerprint: 7,
            p_layers: 2,
            token_digest: d,
        }
    }

    #[test]
    fn keys() {
        let a = cache_key(1, 3, &[5, 6]).unwrap();
        assert_eq!(a, cache_key(1, 3, &[5, 6]).unwrap());
        assert_ne!(a, cache_key(2, 3, &[5, 6]).unwrap());
        assert_ne!(a, cache_key(1, 4, &[5, 6]).unwrap());
        // digests computed offline with a byte-level FNV-1a
        assert_eq!(token_digest(&[1, 2]), 0xc9c2_8939_c996_68c6);
        assert_eq!(token_digest(&[2, 1]), 0x46c2_da3b_e7c3_1176);
        assert!(matches!(cache_key(1, 0, &[1]), Err(LaitError::NothingCacheable)));
    }

    #[test]
    fn get_put_round_trip() {
        let c = RepCache::<f32>::new(1 << 20);
        assert!(c.get(&key(1)).is_none());
        let r = rep(3, 1.5);
        c.put(CacheEntry::new(key(1), Arc::clone(&r)).unwrap()).unwrap();
        let got = c.get(&key(1)).unwrap();
        assert_eq!(got.data(), r.data());
        assert_eq!(c.resident_bytes(), 16 + 3 * 4 * 4);
        assert_eq!(c.stats().hits, 1);
        assert_eq!(c.stats().misses, 1);
    }

    #[test]
    fn lru_eviction_respects_touch() {
        let one = CacheEntry::new(key(0), rep(2, 0.0)).unwrap().bytes();
        let c = RepCache::<f32>::new(2 * one);
        c.put(CacheEntry::new(key(1), rep(2, 1.0)).unwrap()).unwrap();
        c.put(CacheEntry::new(key(2), rep(2, 2.0)).unwrap()).unwrap();
        assert!(c.get(&key(1)).is_some());
        let evicted = c.put(CacheEntry::new(key(3), rep(2, 3.0)).unwrap()).unwrap();
        assert_eq!(evicted, one);
        assert!(c.contains(&key(1)));
        assert!(!c.contains(&key(2)));
        assert!(c.contains(&key(3)));
        assert!(c.resident_bytes() <= c.budget());
    }

    #[test]
    fn oversized_entry_rejected() {
        let c = RepCache::<f32>::new(20);
        assert!(matches!(
            c.put(CacheEntry::new(key(1), rep(2, 0.0)).unwrap()),
            Err(LaitError::EntryTooLarge { .. })
        ));
    }

    #[test]
    fn duplicate_key_last_writer_wins() {
        let c = RepCache::<f32>::new(1 << 20);
        c.put(CacheEntry::new(key(1), rep(2, 0.0)).unwrap()).unwrap();
        c.put(CacheEntry::new(key(1), rep(3, 9.0)).unwrap()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.get(&key(1)).unwrap().rows(), 3);
        assert_eq!(c.resident_bytes(), 16 + 48);
    }

    #[test]
    fn snapshots_survive_eviction() {
        let one = CacheEntry::new(key(0), rep(2, 0.0)).unwrap().bytes();
        let c = RepCache::<f32>::new(one);
        c.put(CacheEntry::new(key(1), rep(2, 1.0)).unwrap()).unwrap();
        let held = c.get(&key(1)).unwrap();
        c.put(CacheEntry::new(key(2), rep(2, 2.0)).unwrap()).unwrap();
        assert!(!c.contains(&key(1)));
        assert_eq!(held.get(0, 0), 1.0);
    }

    #[test]
    fn token_verification_turns_collisions_into_misses() {
        let c = RepCache::<f32>::new(1 << 20).with_token_verification(true);
        c.put(CacheEntry::with_tokens(key(1), rep(2, 0.0), &[4, 5]).unwrap())
            .unwrap();
        assert!(c.get_checked(&key(1), &[4, 5]).is_some());
        assert!(c.get_checked(&key(1), &[5, 4]).is_none());
    }

    #[test]
    fn entry_serialization() {
        let e = CacheEntry::new(key(42), rep(3, -2.5)).unwrap();
        let bytes = serialize_entry(&e);
        assert_eq!(bytes.len(), 38 + 48);
        let back = deserialize_entry(&bytes).unwrap();
        assert_eq!(back.key, e.key);
        assert_eq!(back.rep, e.rep);

        let mut bad = bytes.clone();
        bad[1] = b'?';
        assert!(matches!(
            deserialize_entry(&bad),
            Err(LaitError::Format(FormatError::BadMagic { .. }))
        ));
        let mut bad = bytes.clone();
        bad[5] = 2;
        assert!(matches!(
            deserialize_entry(&bad),
            Err(LaitError::Format(FormatError::Version { .. }))
        ));
        assert!(matches!(
            deserialize_entry(&bytes[..bytes.len() - 1]),
            Err(LaitError::Format(FormatError::Truncated { .. }))
        ));
        assert!(matches!(deserialize_entry(&bytes[..3]), Err(LaitError::Format(_))));
        let mut bad = bytes;
        bad[30..34].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            deserialize_entry(&bad),
            Err(LaitError::Format(FormatError::InvalidHeader(_)))
        ));
        assert!(CacheEntry::new(key(1), Arc::new(Matrix::<f32>::zeros(0, 4))).is_err());
    }

    #[test]
    fn directory_persistence() {
        let dir = tempfile::tempdir().unwrap();
        let c = RepCache::<f32>::new(1 << 20);
        for i in 0..4 {
            c.put(CacheEntry::new(key(i), rep(2 + i as usize, i as f32)).unwrap())
                .unwrap();
        }
        assert_eq!(c.save_dir(dir.path()).unwrap(), 4);
        let d = RepCache::<f32>::new(1 << 20);
        assert_eq!(d.load_dir(dir.path()).unwrap(), 4);
        for i in 0..4 {
            assert_eq!(d.get(&key(i)).unwrap(), c.get(&key(i)).unwrap());
        }
    }

    #[test]
    fn concurrent_access_stays_within_budget() {
        let one = CacheEntry::new(key(0), rep(2, 0.0)).unwrap().bytes();
        let c = RepCache::<f32>::new(5 * one);
        std::thread::scope(|s| {
            for t in 0..4u64 {
                let c = &c;
                s.spawn(move || {
                    for i in 0..200u64 {
                        let k = key((t * 7 + i) % 13);
                        if c.get(&k).is_none() {
                            c.put(CacheEntry::new(k, rep(2, k.token_digest as f32)).unwrap())
                                .unwrap();
                        }
                        assert!(c.resident_bytes() <= c.budget());
                    }
                });
            }
        });
        for e in c.entries() {
            assert_eq!(e.rep.get(0, 0), e.key.token_digest as f32);
        }
    }
}
