//! CIFAR-10 ingestion, resizing, batch encryption and the PCED shard format.
//!
//! # PCED layout
//!
//! All integers little-endian.
//!
//! ```text
//! header (29 bytes)
//!   magic        4  "PCED"
//!   version      2  u16 = 1
//!   n_blocks     4  u32  N
//!   block_size   2  u16  p
//!   l_vec        4  u32  L = p*p*c
//!   height       2  u16
//!   width        2  u16
//!   channels     1  u8
//!   records      8  u64
//! record (41 + h*w*c bytes)
//!   image_id     8  u64
//!   client_id    4  u32
//!   epoch        4  u32
//!   label        1  u8
//!   payload      h*w*c encrypted bytes, row-major, channels interleaved
//!   fingerprint  16
//!   n_fixed_bs   4  u32
//!   n_fixed_ps   4  u32
//! ```
//!
//! No permutation data is ever written to a shard.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cipher::{block_geometry, encrypt, EncryptedImage, Geometry, ImageTensor};
use crate::error::{Error, Result};
use crate::key::{derive_key, Fingerprint, KeyCache, KeyDerivationContext, KeyId, MasterSecret};
use crate::perm::Restriction;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_RECORD_LEN: usize = 1 + CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS;
pub const CIFAR_CLASSES: u8 = 10;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PlainDataset {
    images: Vec<ImageTensor>,
    labels: Vec<u8>,
}

impl PlainDataset {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::LengthMismatch {
                expected: images.len(),
                actual: labels.len(),
            });
        }
        Ok(PlainDataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        self.labels.truncate(n);
    }

    pub fn extend(&mut self, other: PlainDataset) {
        self.images.extend(other.images);
        self.labels.extend(other.labels);
    }
}

/// Reads one CIFAR-10 binary batch: records of one label byte followed by
/// 1024 red, 1024 green and 1024 blue bytes.
pub fn read_cifar10_file(path: impl AsRef<Path>) -> Result<PlainDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    parse_cifar10(&bytes, &path.display().to_string())
}

pub fn parse_cifar10(bytes: &[u8], file: &str) -> Result<PlainDataset> {
    let err = |reason: String| Error::Cifar {
        file: file.to_string(),
        reason,
    };
    let whole = bytes.len() / CIFAR_RECORD_LEN;
    if !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        let offset = whole * CIFAR_RECORD_LEN;
        return Err(err(format!(
            "record {whole} at byte offset {offset} is truncated ({} of {CIFAR_RECORD_LEN} bytes)",
            bytes.len() - offset
        )));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::with_capacity(whole);
    let mut labels = Vec::with_capacity(whole);
    for (idx, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let label = rec[0];
        if label >= CIFAR_CLASSES {
            return Err(err(format!("record {idx} has label {label}, expected 0..=9")));
        }
        let planes = &rec[1..];
        let mut data = Vec::with_capacity(plane * CIFAR_CHANNELS);
        for px in 0..plane {
            data.extend((0..CIFAR_CHANNELS).map(|ch| planes[ch * plane + px]));
        }
        images.push(ImageTensor::new(CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS, data)?);
        labels.push(label);
    }
    PlainDataset::new(images, labels)
}

/// Writes 32x32x3 images in the CIFAR-10 binary layout.
pub fn write_cifar10_file(path: impl AsRef<Path>, ds: &PlainDataset) -> Result<()> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD_LEN);
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        if img.shape() != (CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS) {
            return Err(Error::Shape(format!("{img:?} is not a CIFAR-10 image")));
        }
        out.push(label);
        for ch in 0..CIFAR_CHANNELS {
            out.extend((0..plane).map(|px| img.data()[px * CIFAR_CHANNELS + ch]));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarSplit {
    Train,
    Test,
}

/// Loads `data_batch_1.bin` .. `data_batch_5.bin` or `test_batch.bin` from
/// the standard `cifar-10-batches-bin` directory.
pub fn ingest_cifar10_split(dir: impl AsRef<Path>, split: CifarSplit) -> Result<PlainDataset> {
    let dir = dir.as_ref();
    let names: Vec<String> = match split {
        CifarSplit::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        CifarSplit::Test => vec!["test_batch.bin".to_string()],
    };
    let mut ds = PlainDataset::default();
    let mut found = false;
    for name in names {
        let path = dir.join(&name);
        if path.is_file() {
            ds.extend(read_cifar10_file(&path)?);
            found = true;
        }
    }
    if !found {
        return Err(Error::Cifar {
            file: dir.display().to_string(),
            reason: format!("no {split:?} batches found"),
        });
    }
    Ok(ds)
}

/// Accepts a single batch file, or a directory (training batches if present,
/// otherwise the test batch).
pub fn ingest_cifar10(path: impl AsRef<Path>) -> Result<PlainDataset> {
    let path = path.as_ref();
    if path.is_file() {
        return read_cifar10_file(path);
    }
    ingest_cifar10_split(path, CifarSplit::Train).or_else(|_| ingest_cifar10_split(path, CifarSplit::Test))
}

/// Bilinear resize to `side x side` using pixel-centre alignment; source
/// coordinates are clamped at the borders and results rounded to nearest.
pub fn resize(x: &ImageTensor, side: usize) -> Result<ImageTensor> {
    if side == 0 {
        return Err(Error::Shape("resize target must be at least 1".into()));
    }
    let (h, w, c) = x.shape();
    if h == side && w == side {
        return Ok(x.clone());
    }
    let taps = |src_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = src_len as f64 / side as f64;
        (0..side)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(src_len - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let ys = taps(h);
    let xs = taps(w);
    let src = x.data();
    let mut out = Vec::with_capacity(side * side * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageTensor::new(side, side, c, out)
}

/// Image shape plus block size, as stored in a shard header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardGeometry {
    pub n_blocks: u32,
    pub p: u16,
    pub l_vec: u32,
    pub h: u16,
    pub w: u16,
    pub c: u8,
}

impl ShardGeometry {
    pub fn new(h: usize, w: usize, c: usize, p: usize) -> Result<Self> {
        if h > u16::MAX as usize || w > u16::MAX as usize || c > u8::MAX as usize || p > u16::MAX as usize {
            return Err(Error::Shape(format!("{h}x{w}x{c} with p = {p} does not fit the shard header")));
        }
        let (n, l) = block_geometry(h, w, c, p)?;
        Ok(ShardGeometry {
            n_blocks: n as u32,
            p: p as u16,
            l_vec: l as u32,
            h: h as u16,
            w: w as u16,
            c: c as u8,
        })
    }

    pub fn payload_len(&self) -> usize {
        self.h as usize * self.w as usize * self.c as usize
    }

    pub fn record_len(&self) -> usize {
        RECORD_OVERHEAD + self.payload_len()
    }

    pub fn image_geometry(&self) -> Geometry {
        Geometry {
            h: self.h as usize,
            w: self.w as usize,
            c: self.c as usize,
            p: self.p as usize,
        }
    }

    fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.n_blocks.to_le_bytes());
        out.extend_from_slice(&self.p.to_le_bytes());
        out.extend_from_slice(&self.l_vec.to_le_bytes());
        out.extend_from_slice(&self.h.to_le_bytes());
        out.extend_from_slice(&self.w.to_le_bytes());
        out.push(self.c);
    }

    /// Reads the 15 geometry bytes and checks they are self-consistent.
    pub fn read_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < GEOMETRY_LEN {
            return Err(Error::format("shard geometry", "truncated"));
        }
        let g = ShardGeometry {
            n_blocks: u32::from_le_bytes(b[0..4].try_into().unwrap()),
            p: u16::from_le_bytes(b[4..6].try_into().unwrap()),
            l_vec: u32::from_le_bytes(b[6..10].try_into().unwrap()),
            h: u16::from_le_bytes(b[10..12].try_into().unwrap()),
            w: u16::from_le_bytes(b[12..14].try_into().unwrap()),
            c: b[14],
        };
        let expected = ShardGeometry::new(g.h as usize, g.w as usize, g.c as usize, g.p as usize)
            .map_err(|e| Error::format("shard geometry", e.to_string()))?;
        if expected != g {
            return Err(Error::format(
                "shard geometry",
                format!("N = {}, L = {} inconsistent with {}x{}x{} and p = {}", g.n_blocks, g.l_vec, g.h, g.w, g.c, g.p),
            ));
        }
        Ok(g)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(GEOMETRY_LEN);
        self.write_bytes(&mut v);
        v
    }
}

pub const SHARD_MAGIC: &[u8; 4] = b"PCED";
pub const SHARD_VERSION: u16 = 1;
pub const GEOMETRY_LEN: usize = 15;
pub const SHARD_HEADER_LEN: usize = 4 + 2 + GEOMETRY_LEN + 8;
pub const RECORD_OVERHEAD: usize = 8 + 4 + 4 + 1 + 16 + 4 + 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardRecord {
    pub image_id: u64,
    pub client_id: u32,
    pub epoch: u32,
    pub label: u8,
    pub payload: Vec<u8>,
    pub key_fingerprint: Fingerprint,
    pub n_fixed_bs: u32,
    pub n_fixed_ps: u32,
}

impl ShardRecord {
    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.image_id.to_le_bytes());
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.push(self.label);
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&self.key_fingerprint.0);
        out.extend_from_slice(&self.n_fixed_bs.to_le_bytes());
        out.extend_from_slice(&self.n_fixed_ps.to_le_bytes());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(RECORD_OVERHEAD + self.payload.len());
        self.write_bytes(&mut v);
        v
    }

    /// Parses exactly one record of `g.record_len()` bytes.
    pub fn from_bytes(b: &[u8], g: &ShardGeometry) -> Result<Self> {
        if b.len() != g.record_len() {
            return Err(Error::format(
                "shard record",
                format!("expected {} bytes, got {}", g.record_len(), b.len()),
            ));
        }
        let pl = g.payload_len();
        let label = b[16];
        let tail = &b[17 + pl..];
        let rec = ShardRecord {
            image_id: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            client_id: u32::from_le_bytes(b[8..12].try_into().unwrap()),
            epoch: u32::from_le_bytes(b[12..16].try_into().unwrap()),
            label,
            payload: b[17..17 + pl].to_vec(),
            key_fingerprint: Fingerprint(tail[0..16].try_into().unwrap()),
            n_fixed_bs: u32::from_le_bytes(tail[16..20].try_into().unwrap()),
            n_fixed_ps: u32::from_le_bytes(tail[20..24].try_into().unwrap()),
        };
        if rec.n_fixed_bs > g.n_blocks || rec.n_fixed_ps > g.l_vec {
            return Err(Error::format(
                "shard record",
                format!("restriction ({}, {}) exceeds (N, L)", rec.n_fixed_bs, rec.n_fixed_ps),
            ));
        }
        Ok(rec)
    }

    pub fn id(&self) -> KeyId {
        KeyId {
            client_id: self.client_id,
            image_id: self.image_id,
            epoch: self.epoch,
        }
    }

    pub fn encrypted_image(&self, g: &ShardGeometry) -> Result<EncryptedImage> {
        Ok(EncryptedImage {
            image: ImageTensor::new(g.h as usize, g.w as usize, g.c as usize, self.payload.clone())?,
            key_fingerprint: self.key_fingerprint,
            restriction_bs: Restriction::new(g.n_blocks, self.n_fixed_bs)?,
            restriction_ps: Restriction::new(g.l_vec, self.n_fixed_ps)?,
        })
    }
}

/// An in-memory PCED shard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub geometry: ShardGeometry,
    pub records: Vec<ShardRecord>,
}

pub fn shard_header(g: &ShardGeometry, records: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(SHARD_HEADER_LEN);
    out.extend_from_slice(SHARD_MAGIC);
    out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
    g.write_bytes(&mut out);
    out.extend_from_slice(&records.to_le_bytes());
    out
}

pub fn parse_shard_header(b: &[u8]) -> Result<(ShardGeometry, u64)> {
    if b.len() < SHARD_HEADER_LEN {
        return Err(Error::format("shard header", format!("need {SHARD_HEADER_LEN} bytes, got {}", b.len())));
    }
    if &b[..4] != SHARD_MAGIC {
        return Err(Error::format("shard header", "bad magic"));
    }
    let version = u16::from_le_bytes([b[4], b[5]]);
    if version != SHARD_VERSION {
        return Err(Error::format("shard header", format!("unsupported version {version}")));
    }
    let g = ShardGeometry::read_bytes(&b[6..6 + GEOMETRY_LEN])?;
    let count = u64::from_le_bytes(b[6 + GEOMETRY_LEN..SHARD_HEADER_LEN].try_into().unwrap());
    Ok((g, count))
}

impl Shard {
    pub fn new(geometry: ShardGeometry) -> Self {
        Shard {
            geometry,
            records: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = shard_header(&self.geometry, self.records.len() as u64);
        out.reserve(self.records.len() * self.geometry.record_len());
        for r in &self.records {
            r.write_bytes(&mut out);
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let (geometry, count) = parse_shard_header(b)?;
        let body = &b[SHARD_HEADER_LEN..];
        let rl = geometry.record_len();
        if body.len() as u64 != count.saturating_mul(rl as u64) {
            return Err(Error::format(
                "shard",
                format!("header announces {count} records of {rl} bytes but body has {} bytes", body.len()),
            ));
        }
        let records = body
            .chunks_exact(rl)
            .map(|r| ShardRecord::from_bytes(r, &geometry))
            .collect::<Result<Vec<_>>>()?;
        Ok(Shard { geometry, records })
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Shard::from_bytes(&bytes)
    }
}

/// Append-only shard file. The record count in the header is rewritten on
/// every [`commit`](Self::commit).
pub struct ShardWriter {
    file: File,
    geometry: ShardGeometry,
    records: u64,
}

impl ShardWriter {
    pub fn create(path: impl AsRef<Path>, geometry: ShardGeometry) -> Result<Self> {
        let mut file = File::create(path)?;
        file.write_all(&shard_header(&geometry, 0))?;
        Ok(ShardWriter {
            file,
            geometry,
            records: 0,
        })
    }

    pub fn geometry(&self) -> &ShardGeometry {
        &self.geometry
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    /// Appends pre-validated record bytes (a whole number of records).
    pub fn append_raw(&mut self, bytes: &[u8]) -> Result<()> {
        let rl = self.geometry.record_len();
        if !bytes.len().is_multiple_of(rl) {
            return Err(Error::format("shard record", "partial record"));
        }
        self.file.seek(SeekFrom::End(0))?;
        self.file.write_all(bytes)?;
        self.records += (bytes.len() / rl) as u64;
        Ok(())
    }

    pub fn append(&mut self, r: &ShardRecord) -> Result<()> {
        self.append_raw(&r.to_bytes())
    }

    pub fn commit(&mut self) -> Result<()> {
        self.file.seek(SeekFrom::Start((SHARD_HEADER_LEN - 8) as u64))?;
        self.file.write_all(&self.records.to_le_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub sha256: String,
    pub records: u64,
    pub per_client: BTreeMap<u32, u64>,
}

/// JSON index over a set of shards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u16,
    pub geometry: ShardGeometry,
    pub shards: Vec<ShardEntry>,
    pub per_client: BTreeMap<u32, u64>,
    pub total_records: u64,
    /// Distinct `(N_bs, N_ps)` pairs present.
    pub restrictions: Vec<(u32, u32)>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn new(geometry: ShardGeometry) -> Self {
        DatasetManifest {
            format: "PCED".into(),
            version: SHARD_VERSION,
            geometry,
            shards: Vec::new(),
            per_client: BTreeMap::new(),
            total_records: 0,
            restrictions: Vec::new(),
        }
    }

    /// Adds a shard given its file name and bytes as stored.
    pub fn add_shard(&mut self, file: &str, bytes: &[u8]) -> Result<()> {
        let shard = Shard::from_bytes(bytes)?;
        if shard.geometry != self.geometry {
            return Err(Error::format("manifest", format!("{file} has a different geometry")));
        }
        let mut per_client = BTreeMap::new();
        let mut pairs: BTreeSet<(u32, u32)> = self.restrictions.iter().copied().collect();
        for r in &shard.records {
            *per_client.entry(r.client_id).or_insert(0) += 1;
            pairs.insert((r.n_fixed_bs, r.n_fixed_ps));
        }
        for (&c, &n) in &per_client {
            *self.per_client.entry(c).or_insert(0) += n;
        }
        self.total_records += shard.records.len() as u64;
        self.restrictions = pairs.into_iter().collect();
        self.shards.push(ShardEntry {
            file: file.to_string(),
            sha256: sha256_hex(bytes),
            records: shard.records.len() as u64,
            per_client,
        });
        Ok(())
    }

    /// Checks every listed shard under `dir` against its digest.
    pub fn verify(&self, dir: impl AsRef<Path>) -> Result<()> {
        for s in &self.shards {
            let bytes = fs::read(dir.as_ref().join(&s.file))?;
            if sha256_hex(&bytes) != s.sha256 {
                return Err(Error::format("manifest", format!("digest mismatch for {}", s.file)));
            }
        }
        Ok(())
    }

    pub fn shard_paths(&self, dir: impl AsRef<Path>) -> Vec<PathBuf> {
        self.shards.iter().map(|s| dir.as_ref().join(&s.file)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Settings for one client's encryption pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncryptConfig {
    pub client_id: u32,
    pub epoch: u32,
    pub p: usize,
    /// Images are resized to `side x side` before encryption.
    pub side: usize,
    pub n_fixed_bs: u32,
    pub n_fixed_ps: u32,
    /// Image id assigned to the first image; later images count up from it.
    pub first_image_id: u64,
}

impl EncryptConfig {
    /// The standard setting: 224x224 input, 16x16 blocks.
    pub fn vit(client_id: u32, epoch: u32, n_fixed_bs: u32, n_fixed_ps: u32) -> Self {
        EncryptConfig {
            client_id,
            epoch,
            p: 16,
            side: 224,
            n_fixed_bs,
            n_fixed_ps,
            first_image_id: 0,
        }
    }

    pub fn geometry(&self, c: usize) -> Result<ShardGeometry> {
        ShardGeometry::new(self.side, self.side, c, self.p)
    }

    pub fn restrictions(&self, g: &ShardGeometry) -> Result<(Restriction, Restriction)> {
        Ok((
            Restriction::new(g.n_blocks, self.n_fixed_bs)?,
            Restriction::new(g.l_vec, self.n_fixed_ps)?,
        ))
    }
}

pub struct EncryptedDataset {
    pub shard: Shard,
    /// Only filled when keys were requested.
    pub keys: KeyCache,
}

/// Resizes and encrypts every image with its own derived key. Keys are
/// dropped unless `keep_keys` is set.
pub fn encrypt_dataset(
    ds: &PlainDataset,
    secret: &MasterSecret,
    cfg: &EncryptConfig,
    keep_keys: bool,
) -> Result<EncryptedDataset> {
    let c = ds.images.first().map_or(CIFAR_CHANNELS, ImageTensor::channels);
    let geometry = cfg.geometry(c)?;
    let (rbs, rps) = cfg.restrictions(&geometry)?;
    let results = ds
        .images
        .par_iter()
        .zip(ds.labels.par_iter())
        .enumerate()
        .map(|(i, (img, &label))| {
            let image_id = cfg.first_image_id + i as u64;
            let ctx = KeyDerivationContext {
                master_secret: secret,
                client_id: cfg.client_id,
                image_id,
                epoch: cfg.epoch,
            };
            let key = derive_key(&ctx, rbs, rps, cfg.p)?;
            let resized = resize(img, cfg.side)?;
            let e = encrypt(&resized, &key)?;
            let record = ShardRecord {
                image_id,
                client_id: cfg.client_id,
                epoch: cfg.epoch,
                label,
                payload: e.image.into_data(),
                key_fingerprint: e.key_fingerprint,
                n_fixed_bs: cfg.n_fixed_bs,
                n_fixed_ps: cfg.n_fixed_ps,
            };
            Ok((record, keep_keys.then_some(key)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut shard = Shard::new(geometry);
    let mut keys = KeyCache::new();
    for (record, key) in results {
        if let Some(k) = key {
            keys.insert(record.id(), k);
        }
        shard.records.push(record);
    }
    Ok(EncryptedDataset { shard, keys })
}

fn png_color(c: usize) -> Result<png::ColorType> {
    Ok(match c {
        1 => png::ColorType::Grayscale,
        2 => png::ColorType::GrayscaleAlpha,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        _ => return Err(Error::Png(format!("{c} channels cannot be stored as PNG"))),
    })
}

/// Writes a lossless 8-bit PNG.
pub fn export_png(x: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, x.width() as u32, x.height() as u32);
    enc.set_color(png_color(x.channels())?);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer.write_image_data(x.data()).map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}

pub fn import_png(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let dec = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let c = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::Png(format!("unsupported color type {other:?}"))),
    };
    buf.truncate(info.buffer_size());
    ImageTensor::new(info.height as usize, info.width as usize, c, buf)
}

/// Pearson correlation between the byte values of two same-shape images.
pub fn correlation(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape("correlation needs equal shapes".into()));
    }
    let n = a.data().len() as f64;
    let mean = |d: &[u8]| d.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (ma, mb) = (mean(a.data()), mean(b.data()));
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}
