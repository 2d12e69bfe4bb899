//! Voxel-classification pipeline for lung nodule segmentation on CT volumes.
//!
//! The pipeline trains a dual-branch residual network on 2D patches sampled
//! around annotated nodules and segments new nodules by classifying every
//! voxel inside a seed box, propagating slice by slice from a starting slice.
//!
//! Modules follow the data flow:
//!
//! * [`volume`]: CT volume and binary mask storage, HU normalization,
//!   rater consensus, 2D boundary and connected-region primitives.
//! * [`patch`]: multi-view and multi-scale patch extraction with cubic
//!   spline rescaling.
//! * [`sampler`]: boundary-weighted training sample planning.
//! * [`net`]: the dual-branch residual classifier with central
//!   intensity pooling, forward/backward passes and checkpoints.
//! * [`trainer`]: cross-entropy training loop with step-decayed SGD
//!   momentum and early stopping.
//! * [`segmenter`]: seed-box slice classification, region selection and
//!   through-plane propagation.
//! * [`evaluator`]: overlap and surface-distance metrics plus report
//!   assembly.
//! * [`phantom`]: synthetic CT phantom generation with simulated raters,
//!   used for desk-scale validation of the whole pipeline.
//! * [`pipeline`]: orchestration shared by the command-line tool and the
//!   ablation harness.

pub mod config;
pub mod evaluator;
pub mod net;
pub mod patch;
pub mod phantom;
pub mod pipeline;
pub mod sampler;
pub mod segmenter;
pub mod trainer;
pub(crate) mod util;
pub mod volume;
