use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lesions::BankPolicy;
use crate::transform::TransformParams;

pub const PROVENANCE_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Target equals the current load; nothing was applied.
    None,
    Populate,
    Inpaint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetReached,
    IterationCap,
    NoProgress,
    NoLesionsLeft,
}

/// One applied lesion operation, in episode order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op_kind", rename_all = "snake_case")]
pub enum Operation {
    Populate {
        source_lesion_id: String,
        placement_center: [usize; 3],
        clipped: bool,
        transform_params: TransformParams,
        /// Lesion voxels written by this insertion (before union with the host mask).
        placed_voxels: usize,
    },
    Inpaint {
        /// `"<subject>#<k>"` where k is the component ordinal in the host mask at that step.
        source_lesion_id: String,
        /// A voxel of the removed component; identifies it on replay.
        anchor: [usize; 3],
        removed_voxels: usize,
    },
}

/// Settings that replay must reproduce to rebuild the lesion bank and re-run inpainting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplaySettings {
    pub lesion_class_id: u32,
    pub min_lesion_voxels: usize,
    pub bank_policy: BankPolicy,
    pub inpaint_radius: usize,
    pub blur_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub schema: u32,
    pub output_id: String,
    pub source_subject: String,
    pub v_initial: f64,
    pub v_target: f64,
    pub v_final: f64,
    pub branch: Branch,
    pub stop_reason: StopReason,
    pub operations: Vec<Operation>,
    pub rng_seed: u64,
    /// Per-output stream index derived from the run seed.
    pub rng_stream: u64,
    pub settings: ReplaySettings,
}

pub fn write_provenance(record: &ProvenanceRecord, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(record).expect("provenance serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_provenance(path: &Path) -> Result<ProvenanceRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Provenance(format!("{}: {e}", path.display())))?;
    match value.get("schema").and_then(|s| s.as_u64()) {
        Some(s) if s == PROVENANCE_SCHEMA as u64 => {}
        other => {
            return Err(Error::Provenance(format!(
                "{}: schema {:?} is not supported (expected {PROVENANCE_SCHEMA})",
                path.display(),
                other
            )))
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Provenance(format!("{}: {e}", path.display())))
}
