//! Lesion-level augmentation for 3D medical images.
//!
//! Each augmented output starts from an annotated training pair and a target
//! lesion load drawn from the dataset's load distribution. Below the target,
//! augmented lesions from a cross-dataset bank are inserted at locations drawn
//! from a spatial likelihood map; above it, existing lesions are removed by
//! fast-marching inpainting. Every output carries a provenance record that
//! reproduces it bit for bit.
//!
//! Module overview:
//! * [`grid`]: dense 3D grids, soft masks, mixing, shells and blur.
//! * [`io`]: NIfTI-1 and native volume files, manifests, provenance.
//! * [`lesions`]: connected components, lesion instances and the lesion bank.
//! * [`transform`]: per-lesion flip, rotation, scaling, elastic, brightness and noise.
//! * [`populate`]: insertion of an augmented lesion into a host.
//! * [`inpaint`]: lesion removal.
//! * [`loadmodel`]: likelihood map and load distributions.
//! * [`driver`]: episodes, dataset runs and replay.

pub mod driver;
pub mod error;
pub mod grid;
pub mod inpaint;
pub mod io;
pub mod lesions;
pub mod loadmodel;
pub mod populate;
pub mod transform;

pub use error::{Error, Result};
pub use grid::{BBox, BinaryMask, Grid, LabelMask, SoftMask, Volume3D};
