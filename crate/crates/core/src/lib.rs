//! Bounding-box conditioned progressive GAN augmentation for lesion
//! detection, at desk scale.
//!
//! The crate covers the whole loop: a procedural phantom corpus with rough
//! annotations ([`phantom`]), box conditioning masks ([`mask`]), the
//! conditional progressive GAN and its Wasserstein gradient-penalty loss
//! ([`gan`], [`trainer`]), an encoder-decoder baseline ([`img2img`]), a
//! single-stage grid detector ([`detector`]), sensitivity / false-positive
//! evaluation ([`metrics`]), the augmentation experiment matrix
//! ([`harness`]), t-SNE and confusion statistics ([`embed`]) and the
//! Visual Turing Test session model ([`vtt`]).
//!
//! The guide in `book/` walks through each piece; its snippets are compiled
//! and run as doc-tests of this crate.

pub mod bbox;
pub mod dataset;
pub mod detector;
pub mod embed;
pub mod error;
pub mod gan;
pub mod harness;
pub mod img2img;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod trainer;
pub mod vtt;

pub use bbox::{BoundingBox, BoxF};
pub use dataset::{ImageRecord, Provenance};
pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/phantoms.md")]
    mod phantoms {}
    #[doc = include_str!("../../../book/src/masks.md")]
    mod masks {}
    #[doc = include_str!("../../../book/src/gan.md")]
    mod gan {}
    #[doc = include_str!("../../../book/src/detector.md")]
    mod detector {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/embedding.md")]
    mod embedding {}
    #[doc = include_str!("../../../book/src/vtt.md")]
    mod vtt {}
}
