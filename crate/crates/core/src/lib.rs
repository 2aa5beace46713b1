//! Block-wise image encryption with disposable restricted-permutation keys,
//! and a one-shot protocol for pooling encrypted training data on an
//! untrusted server.
//!
//! * [`perm`]: permutations, restricted sampling, matrix views, keyspace counts
//! * [`cipher`]: block split/merge, block scrambling and pixel shuffling
//! * [`key`]: per-image, per-epoch key derivation and fingerprints
//! * [`embed`]: ViT input embedding and its compatibility checks
//! * [`dataset`]: CIFAR-10 input, resizing, PCED shards and manifests, PNG
//! * [`proto`]: wire protocol, server, client, cost model

pub mod cipher;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod key;
pub mod perm;
pub mod proto;

pub use cipher::{decrypt, encrypt, merge_blocks, split_blocks, BlockSet, EncryptedImage, ImageTensor};
pub use error::{Error, Result};
pub use key::{derive_key, EncryptionKey, Fingerprint, KeyCache, KeyDerivationContext, KeyId, MasterSecret};
pub use perm::{
    keyspace_size, random_permutation, Convention, Permutation, PermutationMatrix, Restriction, RestrictionSpec,
};
