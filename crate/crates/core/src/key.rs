//! Disposable per-image, per-epoch keys derived from a client-local secret.
//!
//! A key is the pair (block permutation, pixel permutation) plus the concrete
//! pinned positions that produced them. Derivation hashes
//! `(master secret, client id, image id, epoch)` into a ChaCha20 seed, so the
//! same context always yields the same key and nothing about the key has to
//! be stored. Pinned positions are re-drawn for every key.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::perm::{random_permutation, Permutation, Restriction, RestrictionSpec};

const DERIVE_TAG: &[u8] = b"permcollab/derive-key/v1";
const FINGERPRINT_TAG: &[u8] = b"permcollab/key-fingerprint/v1";

/// A 32-byte client-local secret. Deliberately not `Serialize`, and `Debug`
/// does not print it.
#[derive(Clone, PartialEq, Eq)]
pub struct MasterSecret([u8; 32]);

impl fmt::Debug for MasterSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MasterSecret(..)")
    }
}

impl MasterSecret {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        MasterSecret(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s.trim()).map_err(|e| Error::format("master secret", e.to_string()))?;
        let bytes: [u8; 32] = bytes
            .try_into()
            .map_err(|b: Vec<u8>| Error::format("master secret", format!("expected 32 bytes, got {}", b.len())))?;
        Ok(MasterSecret(bytes))
    }

    /// Stretches a small integer seed into a secret, for replayable runs.
    pub fn from_seed(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"permcollab/seed-secret/v1");
        h.update(seed.to_le_bytes());
        MasterSecret(h.finalize().into())
    }

    /// A throwaway secret from the thread-local CSPRNG.
    pub fn random() -> Self {
        MasterSecret(rand::rng().random())
    }

    pub fn expose(&self) -> &[u8; 32] {
        &self.0
    }
}

/// Everything a key is derived from.
#[derive(Debug, Clone, Copy)]
pub struct KeyDerivationContext<'a> {
    pub master_secret: &'a MasterSecret,
    pub client_id: u32,
    pub image_id: u64,
    pub epoch: u32,
}

impl KeyDerivationContext<'_> {
    fn seed(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(DERIVE_TAG);
        h.update(self.master_secret.0);
        h.update(self.client_id.to_le_bytes());
        h.update(self.image_id.to_le_bytes());
        h.update(self.epoch.to_le_bytes());
        h.finalize().into()
    }
}

/// Truncated SHA-256 of a serialized key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fingerprint(pub [u8; 16]);

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({self})")
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl Serialize for Fingerprint {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Fingerprint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 16] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("fingerprint must be 16 bytes"))?;
        Ok(Fingerprint(arr))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncryptionKey {
    p: usize,
    block_perm: Permutation,
    pixel_perm: Permutation,
    spec_bs: RestrictionSpec,
    spec_ps: RestrictionSpec,
}

impl EncryptionKey {
    pub fn from_parts(
        p: usize,
        block_perm: Permutation,
        pixel_perm: Permutation,
        spec_bs: RestrictionSpec,
        spec_ps: RestrictionSpec,
    ) -> Result<Self> {
        check_block_size(p, spec_ps.n())?;
        if !spec_bs.is_satisfied_by(&block_perm) {
            return Err(Error::InvalidPermutation(
                "block permutation violates its restriction".into(),
            ));
        }
        if !spec_ps.is_satisfied_by(&pixel_perm) {
            return Err(Error::InvalidPermutation(
                "pixel permutation violates its restriction".into(),
            ));
        }
        Ok(EncryptionKey {
            p,
            block_perm,
            pixel_perm,
            spec_bs,
            spec_ps,
        })
    }

    /// The key that leaves every image unchanged.
    pub fn identity(p: usize, n_blocks: u32, l_vec: u32) -> Result<Self> {
        EncryptionKey::from_parts(
            p,
            Permutation::identity(n_blocks),
            Permutation::identity(l_vec),
            RestrictionSpec::identity(n_blocks)?,
            RestrictionSpec::identity(l_vec)?,
        )
    }

    pub fn block_size(&self) -> usize {
        self.p
    }

    pub fn block_perm(&self) -> &Permutation {
        &self.block_perm
    }

    pub fn pixel_perm(&self) -> &Permutation {
        &self.pixel_perm
    }

    pub fn spec_bs(&self) -> &RestrictionSpec {
        &self.spec_bs
    }

    pub fn spec_ps(&self) -> &RestrictionSpec {
        &self.spec_ps
    }

    /// Layout: `u16 p`, block restriction, pixel restriction, block
    /// permutation, pixel permutation. Restrictions are `u32 n, u32 n_fixed,
    /// u32 positions...`; permutations use [`Permutation::write_bytes`].
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * (self.block_perm.len() + self.pixel_perm.len()));
        out.extend_from_slice(&(self.p as u16).to_le_bytes());
        self.spec_bs.write_bytes(&mut out);
        self.spec_ps.write_bytes(&mut out);
        self.block_perm.write_bytes(&mut out);
        self.pixel_perm.write_bytes(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut buf = bytes;
        if buf.len() < 2 {
            return Err(Error::format("key", "truncated"));
        }
        let p = u16::from_le_bytes([buf[0], buf[1]]) as usize;
        buf = &buf[2..];
        let spec_bs = RestrictionSpec::read_bytes(&mut buf)?;
        let spec_ps = RestrictionSpec::read_bytes(&mut buf)?;
        let block_perm = Permutation::read_bytes(&mut buf)?;
        let pixel_perm = Permutation::read_bytes(&mut buf)?;
        if !buf.is_empty() {
            return Err(Error::format("key", format!("{} trailing bytes", buf.len())));
        }
        EncryptionKey::from_parts(p, block_perm, pixel_perm, spec_bs, spec_ps)
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        h.update(FINGERPRINT_TAG);
        h.update(self.to_bytes());
        let digest = h.finalize();
        let mut fp = [0u8; 16];
        fp.copy_from_slice(&digest[..16]);
        Fingerprint(fp)
    }
}

fn check_block_size(p: usize, l_vec: u32) -> Result<()> {
    let area = p * p;
    if p == 0 || p > u16::MAX as usize || !(l_vec as usize).is_multiple_of(area) {
        return Err(Error::KeyMismatch(format!(
            "pixel permutation length {l_vec} is not a multiple of p^2 = {area}"
        )));
    }
    Ok(())
}

/// Derives the key for one image in one epoch. Pinned positions are sampled
/// first (blocks, then pixels), followed by the two permutations.
pub fn derive_key(
    ctx: &KeyDerivationContext<'_>,
    spec_bs: Restriction,
    spec_ps: Restriction,
    p: usize,
) -> Result<EncryptionKey> {
    check_block_size(p, spec_ps.n)?;
    let mut rng = ChaCha20Rng::from_seed(ctx.seed());
    let fixed_bs = spec_bs.sample(&mut rng);
    let fixed_ps = spec_ps.sample(&mut rng);
    let block_perm = random_permutation(&fixed_bs, &mut rng);
    let pixel_perm = random_permutation(&fixed_ps, &mut rng);
    Ok(EncryptionKey {
        p,
        block_perm,
        pixel_perm,
        spec_bs: fixed_bs,
        spec_ps: fixed_ps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyId {
    pub client_id: u32,
    pub image_id: u64,
    pub epoch: u32,
}

/// Client-side key cache. Never part of anything that is uploaded.
///
/// File layout (little-endian): magic `PCKC`, `u16` version, `u64` count,
/// then per entry `u32 client_id`, `u64 image_id`, `u32 epoch`,
/// `u32 key_len`, key bytes.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct KeyCache {
    entries: BTreeMap<KeyId, EncryptionKey>,
}

const CACHE_MAGIC: &[u8; 4] = b"PCKC";
const CACHE_VERSION: u16 = 1;

impl KeyCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: KeyId, key: EncryptionKey) {
        self.entries.insert(id, key);
    }

    pub fn get(&self, id: &KeyId) -> Option<&EncryptionKey> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&KeyId, &EncryptionKey)> {
        self.entries.iter()
    }

    pub fn extend(&mut self, other: KeyCache) {
        self.entries.extend(other.entries);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (id, key) in &self.entries {
            let kb = key.to_bytes();
            out.extend_from_slice(&id.client_id.to_le_bytes());
            out.extend_from_slice(&id.image_id.to_le_bytes());
            out.extend_from_slice(&id.epoch.to_le_bytes());
            out.extend_from_slice(&(kb.len() as u32).to_le_bytes());
            out.extend_from_slice(&kb);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |r: &str| Error::format("key cache", r.to_string());
        if bytes.len() < 14 || &bytes[..4] != CACHE_MAGIC {
            return Err(bad("missing PCKC header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CACHE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
        let mut buf = &bytes[14..];
        let mut cache = KeyCache::new();
        for _ in 0..count {
            if buf.len() < 20 {
                return Err(bad("truncated entry"));
            }
            let client_id = u32::from_le_bytes(buf[0..4].try_into().unwrap());
            let image_id = u64::from_le_bytes(buf[4..12].try_into().unwrap());
            let epoch = u32::from_le_bytes(buf[12..16].try_into().unwrap());
            let len = u32::from_le_bytes(buf[16..20].try_into().unwrap()) as usize;
            buf = &buf[20..];
            if buf.len() < len {
                return Err(bad("truncated key"));
            }
            let key = EncryptionKey::from_bytes(&buf[..len])?;
            buf = &buf[len..];
            cache.insert(
                KeyId {
                    client_id,
                    image_id,
                    epoch,
                },
                key,
            );
        }
        if !buf.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(cache)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        KeyCache::from_bytes(&fs::read(path)?)
    }
}
