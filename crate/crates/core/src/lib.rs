//! Self-supervised learning with an intra-batch data mixing prior.
//!
//! Each training batch is mixed with its own reversed copy (Mixup, CutMix or
//! ResizeMix). The mixed images become extra positives: a *source* loss ties
//! every mixed image to its two source images weighted by the mixing
//! coefficient, and a *mixing* loss ties the two mixed images of a pair
//! together weighted by how much source content they share. Both a
//! contrastive (momentum encoder, InfoNCE) and a distillation (EMA teacher,
//! soft cross-entropy) flavour are provided.

pub mod tensor;
pub mod losses;
pub mod mixing;
pub mod model;
pub mod config;
pub mod data;
pub mod augment;
pub mod trainer;
pub mod evaluation;
pub mod metrics;
pub mod checkpoint;
