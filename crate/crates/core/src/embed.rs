//! The ViT input embedding, `z0 = [x_class; x1 E; ...; xN E] + E_pos`, and two
//! numeric checks of how block-wise encryption interacts with it:
//!
//! * pixel shuffling is absorbed by the patch embedding:
//!   `(x E_ps) E = x (E_ps E)` for every block;
//! * block scrambling is a token permutation: embedding the scrambled blocks
//!   equals permuting the plain patch tokens and then adding the (unpermuted)
//!   position embedding. The class token is untouched.

use ndarray::{s, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cipher::BlockSet;
use crate::error::{Error, Result};
use crate::perm::{random_permutation, Convention, Permutation, RestrictionSpec};

/// Absolute tolerance for both identities in `f64`.
pub const TOLERANCE: f64 = 1e-9;

/// Patch embedding weights, `L x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedding {
    pub weights: Array2<f64>,
}

/// Position embedding, `(N + 1) x D`; row 0 belongs to the class token.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionEmbedding {
    pub rows: Array2<f64>,
}

/// `N + 1` tokens of width `D`, class token first.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
}

impl PatchEmbedding {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Shape("patch embedding has non-finite weights".into()));
        }
        Ok(PatchEmbedding { weights })
    }

    /// Standard normal entries scaled by `1 / sqrt(L)`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, l_vec: usize, d: usize) -> Self {
        let scale = 1.0 / (l_vec as f64).sqrt();
        PatchEmbedding {
            weights: Array2::from_shape_fn((l_vec, d), |_| scale * normal(rng)),
        }
    }

    pub fn l_vec(&self) -> usize {
        self.weights.nrows()
    }

    pub fn d(&self) -> usize {
        self.weights.ncols()
    }
}

impl PositionEmbedding {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_tokens: usize, d: usize) -> Self {
        PositionEmbedding {
            rows: Array2::from_shape_fn((n_tokens, d), |_| normal(rng)),
        }
    }
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn token(&self, i: usize) -> ArrayView1<'_, f64> {
        self.tokens.row(i)
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Blocks as an `N x L` real matrix.
pub fn patch_matrix(b: &BlockSet) -> Array2<f64> {
    Array2::from_shape_fn((b.n_blocks(), b.l_vec()), |(i, j)| b.block(i)[j] as f64)
}

fn check_shapes(b: &BlockSet, pe: &PatchEmbedding, pos: &PositionEmbedding, class_token: &[f64]) -> Result<()> {
    let d = pe.d();
    if pe.l_vec() != b.l_vec() {
        return Err(Error::Shape(format!("patch embedding expects L = {}, blocks have L = {}", pe.l_vec(), b.l_vec())));
    }
    if pos.rows.dim() != (b.n_blocks() + 1, d) {
        return Err(Error::Shape(format!(
            "position embedding is {:?}, expected ({}, {d})",
            pos.rows.dim(),
            b.n_blocks() + 1
        )));
    }
    if class_token.len() != d {
        return Err(Error::Shape(format!("class token has width {}, expected {d}", class_token.len())));
    }
    Ok(())
}

fn with_class_token(patch_tokens: Array2<f64>, class_token: &[f64], pos: &PositionEmbedding) -> TokenSequence {
    let (n, d) = patch_tokens.dim();
    let mut tokens = Array2::zeros((n + 1, d));
    tokens.row_mut(0).assign(&ArrayView1::from(class_token));
    tokens.slice_mut(s![1.., ..]).assign(&patch_tokens);
    tokens += &pos.rows;
    TokenSequence { tokens }
}

pub fn embed(
    b: &BlockSet,
    pe: &PatchEmbedding,
    pos: &PositionEmbedding,
    class_token: &[f64],
) -> Result<TokenSequence> {
    check_shapes(b, pe, pos, class_token)?;
    Ok(with_class_token(patch_matrix(b).dot(&pe.weights), class_token, pos))
}

/// Outcome of one identity check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub identity: String,
    pub n_blocks: usize,
    pub l_vec: usize,
    pub d: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl VerificationReport {
    fn new(identity: &str, b: &BlockSet, d: usize, lhs: &Array2<f64>, rhs: &Array2<f64>) -> Self {
        let max_deviation = lhs
            .iter()
            .zip(rhs.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        VerificationReport {
            identity: identity.to_string(),
            n_blocks: b.n_blocks(),
            l_vec: b.l_vec(),
            d,
            max_deviation,
            tolerance: TOLERANCE,
            passed: max_deviation <= TOLERANCE,
        }
    }
}

pub const PIXEL_SHUFFLE_ABSORPTION: &str = "pixel_shuffle_absorption";
pub const BLOCK_SCRAMBLE_EQUIVALENCE: &str = "block_scramble_equivalence";

/// Compares shuffling each block then embedding against embedding with the
/// row-permuted weights `E_ps E`.
pub fn verify_pixel_shuffle_absorption(x: &BlockSet, u: &Permutation, pe: &PatchEmbedding) -> Result<VerificationReport> {
    if u.len() != x.l_vec() || pe.l_vec() != x.l_vec() {
        return Err(Error::Shape(format!(
            "pixel permutation of length {} and embedding with L = {} do not fit blocks with L = {}",
            u.len(),
            pe.l_vec(),
            x.l_vec()
        )));
    }
    let mut shuffled = Vec::with_capacity(x.as_flat().len());
    for blk in x.blocks() {
        shuffled.extend(u.apply(blk, Convention::Pixel)?.into_iter().map(f64::from));
    }
    let lhs = Array2::from_shape_vec((x.n_blocks(), x.l_vec()), shuffled)
        .expect("block data is N x L")
        .dot(&pe.weights);

    let l = x.l_vec();
    let e_ps = Array2::from_shape_vec((l, l), u.to_matrix(Convention::Pixel).to_dense())
        .expect("permutation matrix is square");
    let absorbed = e_ps.dot(&pe.weights);
    let rhs = patch_matrix(x).dot(&absorbed);
    Ok(VerificationReport::new(PIXEL_SHUFFLE_ABSORPTION, x, pe.d(), &lhs, &rhs))
}

/// Compares embedding the scrambled blocks against permuting the plain patch
/// tokens by `E_bs^T` before adding position embeddings.
pub fn verify_block_scramble_equivalence(
    x: &BlockSet,
    l: &Permutation,
    pe: &PatchEmbedding,
    pos: &PositionEmbedding,
    class_token: &[f64],
) -> Result<VerificationReport> {
    check_shapes(x, pe, pos, class_token)?;
    let n = x.n_blocks();
    if l.len() != n {
        return Err(Error::Shape(format!("block permutation has length {}, expected N = {n}", l.len())));
    }
    let scrambled = BlockSet::new(
        x.block_size(),
        n,
        x.l_vec(),
        l.apply_chunks(x.as_flat(), x.l_vec(), Convention::Block)?,
    )?;
    let lhs = embed(&scrambled, pe, pos, class_token)?;

    let plain_tokens = patch_matrix(x).dot(&pe.weights);
    let e_bs = Array2::from_shape_vec((n, n), l.to_matrix(Convention::Block).to_dense())
        .expect("permutation matrix is square");
    let permuted = e_bs.t().dot(&plain_tokens);
    let rhs = with_class_token(permuted, class_token, pos);
    Ok(VerificationReport::new(BLOCK_SCRAMBLE_EQUIVALENCE, x, pe.d(), &lhs.tokens, &rhs.tokens))
}

/// A random desk-scale problem for both checks.
#[derive(Debug, Clone)]
pub struct EmbedInstance {
    pub blocks: BlockSet,
    pub patch: PatchEmbedding,
    pub position: PositionEmbedding,
    pub class_token: Vec<f64>,
    pub block_perm: Permutation,
    pub pixel_perm: Permutation,
}

impl EmbedInstance {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_blocks: usize, p: usize, c: usize, d: usize) -> Result<Self> {
        let l_vec = p * p * c;
        let data: Vec<u8> = (0..n_blocks * l_vec).map(|_| rng.random()).collect();
        let blocks = BlockSet::new(p, n_blocks, l_vec, data)?;
        let block_perm = random_permutation(&RestrictionSpec::unrestricted(n_blocks as u32)?, rng);
        let pixel_perm = random_permutation(&RestrictionSpec::unrestricted(l_vec as u32)?, rng);
        Ok(EmbedInstance {
            patch: PatchEmbedding::random(rng, l_vec, d),
            position: PositionEmbedding::random(rng, n_blocks + 1, d),
            class_token: (0..d).map(|_| normal(rng)).collect(),
            blocks,
            block_perm,
            pixel_perm,
        })
    }

    /// Shapes drawn from `N <= 16`, `L = p^2 c <= 48`, `D <= 8`.
    pub fn random_small<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        let n = rng.random_range(1..=16);
        let p = [1usize, 2, 4][rng.random_range(0..3)];
        let c = [1usize, 3][rng.random_range(0..2)];
        let d = rng.random_range(1..=8);
        EmbedInstance::random(rng, n, p, c, d)
    }

    pub fn check_absorption(&self) -> Result<VerificationReport> {
        verify_pixel_shuffle_absorption(&self.blocks, &self.pixel_perm, &self.patch)
    }

    pub fn check_scramble(&self) -> Result<VerificationReport> {
        verify_block_scramble_equivalence(&self.blocks, &self.block_perm, &self.patch, &self.position, &self.class_token)
    }
}

/// Runs both checks over `trials` random instances and returns the worst
/// report for each identity.
pub fn run_trials<R: Rng + ?Sized>(rng: &mut R, trials: usize) -> Result<[VerificationReport; 2]> {
    let mut worst: Option<[VerificationReport; 2]> = None;
    for _ in 0..trials.max(1) {
        let inst = EmbedInstance::random_small(rng)?;
        let pair = [inst.check_absorption()?, inst.check_scramble()?];
        worst = Some(match worst {
            None => pair,
            Some(w) => {
                let [a, b] = pair;
                let [wa, wb] = w;
                [
                    if a.max_deviation > wa.max_deviation { a } else { wa },
                    if b.max_deviation > wb.max_deviation { b } else { wb },
                ]
            }
        });
    }
    Ok(worst.expect("at least one trial"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_tokens() {
        let b = BlockSet::new(1, 3, 2, vec![5, 6, 7, 8, 9, 10]).unwrap();
        let pe = PatchEmbedding::new(Array2::zeros((2, 4))).unwrap();
        let pos = PositionEmbedding { rows: Array2::zeros((4, 4)) };
        let z = embed(&b, &pe, &pos, &[0.0; 4]).unwrap();
        assert_eq!(z.len(), 4);
        assert!(z.tokens.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_case() {
        let b = BlockSet::new(1, 1, 1, vec![3]).unwrap();
        let pe = PatchEmbedding::new(array![[2.0]]).unwrap();
        let pos = PositionEmbedding { rows: array![[0.5], [1.0]] };
        let z = embed(&b, &pe, &pos, &[4.0]).unwrap();
        assert_eq!(z.token(0)[0], 4.5);
        assert_eq!(z.token(1)[0], 7.0);
    }

    #[test]
    fn shape_mismatches() {
        let b = BlockSet::new(1, 2, 3, vec![0; 6]).unwrap();
        let pe = PatchEmbedding::new(Array2::zeros((3, 2))).unwrap();
        let pos = PositionEmbedding { rows: Array2::zeros((3, 2)) };
        assert!(embed(&b, &pe, &pos, &[0.0; 3]).is_err());
        let bad_pos = PositionEmbedding { rows: Array2::zeros((2, 2)) };
        assert!(embed(&b, &pe, &bad_pos, &[0.0; 2]).is_err());
        let bad_pe = PatchEmbedding::new(Array2::zeros((4, 2))).unwrap();
        assert!(embed(&b, &bad_pe, &pos, &[0.0; 2]).is_err());
        assert!(verify_pixel_shuffle_absorption(&b, &Permutation::identity(4), &pe).is_err());
        assert!(verify_block_scramble_equivalence(&b, &Permutation::identity(3), &pe, &pos, &[0.0; 2]).is_err());
        assert!(PatchEmbedding::new(array![[f64::NAN]]).is_err());
    }

    #[test]
    fn identity_permutations_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inst = EmbedInstance::random(&mut rng, 4, 2, 3, 5).unwrap();
        let a = verify_pixel_shuffle_absorption(&inst.blocks, &Permutation::identity(12), &inst.patch).unwrap();
        assert_eq!(a.max_deviation, 0.0);
        let b = verify_block_scramble_equivalence(
            &inst.blocks,
            &Permutation::identity(4),
            &inst.patch,
            &inst.position,
            &inst.class_token,
        )
        .unwrap();
        assert_eq!(b.max_deviation, 0.0);
        assert!(a.passed && b.passed);
    }

    #[test]
    fn toy_block_scramble() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inst = EmbedInstance::random(&mut rng, 4, 2, 3, 5).unwrap();
        let l = Permutation::from_seq(&[2, 4, 1, 3]).unwrap();
        let r = verify_block_scramble_equivalence(&inst.blocks, &l, &inst.patch, &inst.position, &inst.class_token)
            .unwrap();
        assert!(r.max_deviation <= 1e-12, "{r:?}");
        assert_eq!(r.identity, BLOCK_SCRAMBLE_EQUIVALENCE);
    }

    #[test]
    fn random_absorption() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let inst = EmbedInstance::random(&mut rng, 4, 2, 3, 5).unwrap();
        let r = inst.check_absorption().unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!((r.n_blocks, r.l_vec, r.d), (4, 12, 5));
    }

    #[test]
    fn trials_report_worst_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let [a, b] = run_trials(&mut rng, 20).unwrap();
        assert!(a.passed && b.passed);
        assert_eq!(a.identity, PIXEL_SHUFFLE_ABSORPTION);
    }
}
