//! Dual-domain watermarking of Gaussian latents.
//!
//! A multi-bit message is written into the signs of a diffusion model's
//! initial noise map ([`spatial`]) and a zero-bit ring pattern into its
//! low-frequency spectrum ([`freq`]). Detection scores from both domains are
//! combined by a small learned fuser ([`fusion`]); a trainable restorer
//! ([`restorer`]) undoes rotations and crops on the sign map before bits are
//! read back. [`stats`] provides exact false-positive control and
//! multi-user identification, and [`bench`] a latent-level benchmark.

pub mod bench;
pub mod error;
pub mod format;
pub mod freq;
pub mod fusion;
pub mod key;
pub mod latent;
pub mod nn;
pub mod pipeline;
pub mod restorer;
pub mod spatial;
pub mod stats;
pub mod transform;

pub use error::{Error, FormatError, Result};
pub use latent::{sample_gaussian, sign_map, LatentTensor, Shape, SignalMap};
pub use transform::{apply_transform, inverse_transform_estimate, TransformKind, TransformSpec};
