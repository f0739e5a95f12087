//! Rare-event detection for high-energy X-ray diffraction scans.
//!
//! The engine learns a self-supervised representation of Bragg peak patches
//! from a baseline scan, characterizes a reference scan as K cluster centers
//! in embedding space, and scores subsequent scans with a rare event
//! indicator (REI): the fraction of patches whose nearest-center assignment
//! is ambiguous. REI rises when peak shapes drift away from the reference
//! population (e.g., azimuthal smearing at the onset of plasticity) while
//! staying flat under benign changes.
//!
//! Pipeline stages, each with a module of its own:
//!
//! * [`frame_store`] — scan directories, dark subtraction, omega segments
//! * [`peak_extract`] — threshold + connected components -> peak patches
//! * [`tensor`] — dense tensors with reverse-mode autodiff
//! * [`byol`] — self-supervised encoder training (online/target scheme)
//! * [`cluster`] — reference K-means, REI scoring, partial and streaming modes
//! * [`tune`] — epoch selection and (K, t) sensitivity grid
//! * [`synth`] — ground-truth-labeled synthetic scan generator
//! * [`cli`] — subcommand orchestration, reports, run manifests
//!
//! The `examples/` directory walks through every capability end to end;
//! the `braggrei` binary exposes the same flows as subcommands.

pub mod byol;
pub mod cli;
pub mod cluster;
pub mod error;
pub mod frame_store;
pub mod peak_extract;
pub mod synth;
pub mod tensor;
pub mod tune;
pub mod util;

pub use error::{Error, Result};
