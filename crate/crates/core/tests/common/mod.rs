#![allow(dead_code)]

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use permcollab::cipher::ImageTensor;
use permcollab::dataset::{encrypt_dataset, EncryptConfig, EncryptedDataset, PlainDataset};
use permcollab::MasterSecret;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image<R: RngCore>(rng: &mut R, h: usize, w: usize, c: usize) -> ImageTensor {
    let mut data = vec![0u8; h * w * c];
    rng.fill_bytes(&mut data);
    ImageTensor::new(h, w, c, data).unwrap()
}

/// A smooth, photo-like test picture: gradients plus a few soft discs.
pub fn smooth_image(side: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let discs: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..side as f64),
                rng.random_range(0.0..side as f64),
                rng.random_range(side as f64 / 8.0..side as f64 / 3.0),
                [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)],
            )
        })
        .collect();
    let mut data = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            for ch in 0..3 {
                let mut v = 40.0 + 120.0 * (x as f64 / side as f64) * (ch as f64 * 0.3 + 0.4) + 60.0 * (y as f64 / side as f64);
                for &(cx, cy, r, col) in &discs {
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    let wgt = (1.0 - d / r).clamp(0.0, 1.0);
                    v = v * (1.0 - wgt) + col[ch] * wgt;
                }
                data.push(v.clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageTensor::new(side, side, 3, data).unwrap()
}

pub fn cifar_like(n: usize, seed: u64) -> PlainDataset {
    let images = (0..n).map(|i| smooth_image(32, seed * 100_003 + i as u64)).collect();
    PlainDataset::new(images, (0..n).map(|i| (i % 10) as u8).collect()).unwrap()
}

pub fn client_upload_set(client_id: u32, n: usize, side: usize, p: usize, nbs: u32, nps: u32) -> (EncryptedDataset, MasterSecret) {
    let secret = MasterSecret::from_seed(1000 + client_id as u64);
    let cfg = EncryptConfig {
        client_id,
        epoch: 0,
        p,
        side,
        n_fixed_bs: nbs,
        n_fixed_ps: nps,
        first_image_id: 0,
    };
    let out = encrypt_dataset(&cifar_like(n, client_id as u64), &secret, &cfg, true).unwrap();
    (out, secret)
}

/// True if any pattern occurs in `haystack`. Patterns are indexed by their
/// last 16 bytes, then confirmed in full.
pub fn contains_any(haystack: &[u8], patterns: &[Vec<u8>]) -> bool {
    const W: usize = 16;
    let mut index: HashMap<&[u8], Vec<&[u8]>> = HashMap::new();
    for p in patterns {
        assert!(p.len() >= W);
        index.entry(&p[p.len() - W..]).or_default().push(p);
    }
    if haystack.len() < W {
        return false;
    }
    for end in W..=haystack.len() {
        if let Some(cands) = index.get(&haystack[end - W..end]) {
            for p in cands {
                if end >= p.len() && &haystack[end - p.len()..end] == *p {
                    return true;
                }
            }
        }
    }
    false
}

pub fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        if e.file_type().unwrap().is_file() {
            out.push((e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()));
        }
    }
    out
}

pub fn chi_square_critical(df: usize, alpha: f64) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    ChiSquared::new(df as f64).unwrap().inverse_cdf(1.0 - alpha)
}

pub fn chi_square(observed: &[u64], expected: &[f64]) -> f64 {
    observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
        .sum()
}

/// Lexicographic rank of every permutation of `values`, by brute-force
/// enumeration.
pub fn enumerate_ranks(values: &[u32]) -> HashMap<Vec<u32>, usize> {
    use itertools::Itertools;
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    sorted
        .iter()
        .copied()
        .permutations(sorted.len())
        .enumerate()
        .map(|(i, p)| (p, i))
        .collect()
}
