//! Block splitting, block scrambling and per-block pixel shuffling.
//!
//! Blocks are `p x p` tiles taken row-major over the block grid. Inside a
//! block, values are flattened row-major with channels interleaved, so a
//! block of a `c`-channel image is a vector of `L = p * p * c` bytes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::key::{Fingerprint, EncryptionKey};
use crate::perm::{Convention, Restriction};

/// An 8-bit image, row-major with interleaved channels.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ImageTensor {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageTensor({}x{}x{})", self.h, self.w, self.c)
    }
}

impl ImageTensor {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("degenerate image shape {h}x{w}x{c}")));
        }
        if data.len() != h * w * c {
            return Err(Error::LengthMismatch {
                expected: h * w * c,
                actual: data.len(),
            });
        }
        Ok(ImageTensor { h, w, c, data })
    }

    pub fn filled(h: usize, w: usize, c: usize, value: u8) -> Result<Self> {
        ImageTensor::new(h, w, c, vec![value; h * w * c])
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    /// Value at row `y`, column `x`, channel `ch` (0-based).
    pub fn at(&self, y: usize, x: usize, ch: usize) -> u8 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    /// Counts of each byte value.
    pub fn histogram(&self) -> [u64; 256] {
        let mut hist = [0u64; 256];
        for &v in &self.data {
            hist[v as usize] += 1;
        }
        hist
    }
}

/// `N` flattened blocks of `L` values each, stored contiguously.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSet {
    p: usize,
    n_blocks: usize,
    l_vec: usize,
    data: Vec<u8>,
}

impl BlockSet {
    pub fn new(p: usize, n_blocks: usize, l_vec: usize, data: Vec<u8>) -> Result<Self> {
        if p == 0 || n_blocks == 0 || l_vec == 0 {
            return Err(Error::Shape("block set dimensions must be positive".into()));
        }
        if data.len() != n_blocks * l_vec {
            return Err(Error::LengthMismatch {
                expected: n_blocks * l_vec,
                actual: data.len(),
            });
        }
        Ok(BlockSet { p, n_blocks, l_vec, data })
    }

    pub fn block_size(&self) -> usize {
        self.p
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn l_vec(&self) -> usize {
        self.l_vec
    }

    /// Block `i`, 0-based.
    pub fn block(&self, i: usize) -> &[u8] {
        &self.data[i * self.l_vec..(i + 1) * self.l_vec]
    }

    pub fn blocks(&self) -> impl ExactSizeIterator<Item = &[u8]> {
        self.data.chunks_exact(self.l_vec)
    }

    pub fn as_flat(&self) -> &[u8] {
        &self.data
    }
}

/// Number of blocks and block vector length for an image shape.
pub fn block_geometry(h: usize, w: usize, c: usize, p: usize) -> Result<(usize, usize)> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::Shape(format!("block size {p} does not divide {h}x{w}")));
    }
    Ok(((h / p) * (w / p), p * p * c))
}

pub fn split_blocks(x: &ImageTensor, p: usize) -> Result<BlockSet> {
    let (n_blocks, l_vec) = block_geometry(x.h, x.w, x.c, p)?;
    let row_len = p * x.c;
    let grid_w = x.w / p;
    let mut data = Vec::with_capacity(x.data.len());
    for b in 0..n_blocks {
        let (by, bx) = (b / grid_w, b % grid_w);
        for dy in 0..p {
            let start = ((by * p + dy) * x.w + bx * p) * x.c;
            data.extend_from_slice(&x.data[start..start + row_len]);
        }
    }
    Ok(BlockSet {
        p,
        n_blocks,
        l_vec,
        data,
    })
}

pub fn merge_blocks(b: &BlockSet, h: usize, w: usize, c: usize) -> Result<ImageTensor> {
    let p = b.p;
    let (n_blocks, l_vec) = block_geometry(h, w, c, p)?;
    if n_blocks != b.n_blocks || l_vec != b.l_vec {
        return Err(Error::Shape(format!(
            "{} blocks of length {} cannot form a {h}x{w}x{c} image with p = {p}",
            b.n_blocks, b.l_vec
        )));
    }
    let row_len = p * c;
    let grid_w = w / p;
    let mut data = vec![0u8; h * w * c];
    for (i, block) in b.blocks().enumerate() {
        let (by, bx) = (i / grid_w, i % grid_w);
        for (dy, row) in block.chunks_exact(row_len).enumerate() {
            let start = ((by * p + dy) * w + bx * p) * c;
            data[start..start + row_len].copy_from_slice(row);
        }
    }
    ImageTensor::new(h, w, c, data)
}

/// An encrypted image together with what is needed to check a candidate key.
/// The restrictions record only how many positions were pinned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedImage {
    pub image: ImageTensor,
    pub key_fingerprint: Fingerprint,
    pub restriction_bs: Restriction,
    pub restriction_ps: Restriction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub p: usize,
}

fn check_key(x: &ImageTensor, key: &EncryptionKey) -> Result<(usize, usize)> {
    let (n, l) = block_geometry(x.h, x.w, x.c, key.block_size())?;
    if key.block_perm().len() != n || key.pixel_perm().len() != l {
        return Err(Error::KeyMismatch(format!(
            "key is for N = {}, L = {} but image has N = {n}, L = {l}",
            key.block_perm().len(),
            key.pixel_perm().len()
        )));
    }
    Ok((n, l))
}

/// Scrambles blocks, then shuffles the values inside every block with the
/// same pixel permutation.
pub fn encrypt(x: &ImageTensor, key: &EncryptionKey) -> Result<EncryptedImage> {
    let (_, l) = check_key(x, key)?;
    let blocks = split_blocks(x, key.block_size())?;
    let scrambled = key.block_perm().apply_chunks(&blocks.data, l, Convention::Block)?;
    let mut shuffled = vec![0u8; scrambled.len()];
    for (src, dst) in scrambled.chunks_exact(l).zip(shuffled.chunks_exact_mut(l)) {
        key.pixel_perm().apply_into(src, dst, Convention::Pixel)?;
    }
    let out = BlockSet { data: shuffled, ..blocks };
    Ok(EncryptedImage {
        image: merge_blocks(&out, x.h, x.w, x.c)?,
        key_fingerprint: key.fingerprint(),
        restriction_bs: key.spec_bs().restriction(),
        restriction_ps: key.spec_ps().restriction(),
    })
}

/// Inverse of [`encrypt`]; refuses keys whose fingerprint does not match.
pub fn decrypt(e: &EncryptedImage, key: &EncryptionKey) -> Result<ImageTensor> {
    if key.fingerprint() != e.key_fingerprint {
        return Err(Error::FingerprintMismatch);
    }
    decrypt_unchecked(&e.image, key)
}

pub(crate) fn decrypt_unchecked(y: &ImageTensor, key: &EncryptionKey) -> Result<ImageTensor> {
    let (_, l) = check_key(y, key)?;
    let blocks = split_blocks(y, key.block_size())?;
    let pixel_inv = key.pixel_perm().inverse();
    let mut unshuffled = vec![0u8; blocks.data.len()];
    for (src, dst) in blocks.data.chunks_exact(l).zip(unshuffled.chunks_exact_mut(l)) {
        pixel_inv.apply_into(src, dst, Convention::Pixel)?;
    }
    let restored = key.block_perm().inverse().apply_chunks(&unshuffled, l, Convention::Block)?;
    merge_blocks(&BlockSet { data: restored, ..blocks }, y.h, y.w, y.c)
}
