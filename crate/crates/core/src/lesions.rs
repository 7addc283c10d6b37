//! Lesion instances: connected-component decomposition of lesion masks, the
//! cross-dataset lesion bank, and lesion load accounting in mm³.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BBox, BinaryMask, Grid, Volume3D};
use crate::io;

/// One 26-connected set of lesion voxels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    /// Flat voxel indices in ascending order.
    pub voxels: Vec<usize>,
    pub bbox: BBox,
}

impl Component {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Full-size mask holding only this component.
    pub fn to_mask(&self, like: &BinaryMask) -> BinaryMask {
        let mut data = vec![false; like.len()];
        for &i in &self.voxels {
            data[i] = true;
        }
        Grid::from_parts_unchecked(like.dims(), like.spacing(), data)
    }
}

/// Maximal 26-connected components, ordered by the minimum corner of their
/// bounding box compared as (z, y, x), ties broken by first voxel in raster order.
pub fn connected_components_3d(mask: &BinaryMask) -> Vec<Component> {
    let [nx, ny, nz] = mask.dims();
    let data = mask.data();
    let mut visited = vec![false; data.len()];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    for start in 0..data.len() {
        if !data[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let c = mask.coords(start);
        let mut bbox = BBox { min: c, max: c };
        let mut voxels = Vec::new();
        while let Some(i) = stack.pop() {
            voxels.push(i);
            let [x, y, z] = mask.coords(i);
            bbox.include([x, y, z]);
            for qz in z.saturating_sub(1)..=(z + 1).min(nz - 1) {
                for qy in y.saturating_sub(1)..=(y + 1).min(ny - 1) {
                    for qx in x.saturating_sub(1)..=(x + 1).min(nx - 1) {
                        let j = qx + nx * (qy + ny * qz);
                        if data[j] && !visited[j] {
                            visited[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        voxels.sort_unstable();
        out.push(Component { voxels, bbox });
    }
    out.sort_by_key(|c| (c.bbox.min[2], c.bbox.min[1], c.bbox.min[0], c.voxels[0]));
    out
}

/// Lesion load in mm³: lesion voxel count times voxel volume.
pub fn measure_load(mask: &BinaryMask) -> f64 {
    load_of(mask.count(), mask.voxel_volume())
}

#[inline]
pub(crate) fn load_of(voxels: usize, voxel_volume: f64) -> f64 {
    voxels as f64 * voxel_volume
}

/// Mean and standard deviation of an image's foreground intensities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityStats {
    pub mean: f64,
    pub std: f64,
}

impl IntensityStats {
    /// Foreground is every voxel whose intensity differs from the image minimum
    /// (the background fill of skull-stripped or padded scans). Falls back to
    /// all voxels when fewer than two voxels qualify.
    pub fn foreground(image: &Volume3D) -> Self {
        let min = image.data().iter().copied().fold(f64::INFINITY, f64::min);
        let fg: Vec<f64> = image.data().iter().copied().filter(|&v| v != min).collect();
        let values: &[f64] = if fg.len() >= 2 { &fg } else { image.data() };
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionInstance {
    /// `"<subject>#<k>"`, k being the component ordinal in the subject's mask.
    pub id: String,
    pub source_subject: String,
    /// Tight inclusive box in the source grid.
    pub bbox: BBox,
    pub patch_intensity: Volume3D,
    pub patch_mask: BinaryMask,
    pub volume_mm3: f64,
    pub source_stats: IntensityStats,
}

impl LesionInstance {
    pub fn voxel_count(&self) -> usize {
        self.patch_mask.count()
    }
}

/// One instance per lesion component with at least `min_voxels` voxels.
pub fn extract_instances(
    image: &Volume3D,
    mask: &BinaryMask,
    subject: &str,
    min_voxels: usize,
) -> Result<Vec<LesionInstance>> {
    if !image.same_dims(mask) {
        return Err(Error::Shape(format!("image dims {:?} vs mask dims {:?}", image.dims(), mask.dims())));
    }
    let components = connected_components_3d(mask);
    if components.is_empty() {
        return Ok(Vec::new());
    }
    let stats = IntensityStats::foreground(image);
    let vv = mask.voxel_volume();
    let instances = components
        .iter()
        .enumerate()
        .filter(|(_, c)| c.len() >= min_voxels.max(1))
        .map(|(k, c)| {
            let ext = c.bbox.extent();
            let mut patch = vec![false; ext[0] * ext[1] * ext[2]];
            for &i in &c.voxels {
                let [x, y, z] = mask.coords(i);
                let (px, py, pz) = (x - c.bbox.min[0], y - c.bbox.min[1], z - c.bbox.min[2]);
                patch[px + ext[0] * (py + ext[1] * pz)] = true;
            }
            LesionInstance {
                id: format!("{subject}#{k}"),
                source_subject: subject.to_string(),
                bbox: c.bbox,
                patch_intensity: image.crop(&c.bbox),
                patch_mask: Grid::from_parts_unchecked(ext, mask.spacing(), patch),
                volume_mm3: load_of(c.len(), vv),
                source_stats: stats,
            }
        })
        .collect();
    Ok(instances)
}

/// Where populating draws its donor lesions from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BankPolicy {
    /// Any lesion of any training subject.
    #[default]
    Cross,
    /// Only lesions of the image being augmented.
    Same,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SamplePolicy<'a> {
    CrossImage,
    SameImage(&'a str),
}

#[derive(Clone, Debug, Default)]
pub struct LesionBank {
    instances: Vec<LesionInstance>,
    per_subject: BTreeMap<String, Vec<usize>>,
}

impl LesionBank {
    pub fn from_instances(instances: Vec<LesionInstance>) -> Result<Self> {
        let mut per_subject: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut ids = std::collections::HashSet::new();
        for (i, inst) in instances.iter().enumerate() {
            if !ids.insert(inst.id.as_str()) {
                return Err(Error::Contract(format!("duplicate lesion id '{}'", inst.id)));
            }
            per_subject.entry(inst.source_subject.clone()).or_default().push(i);
        }
        Ok(Self { instances, per_subject })
    }

    pub fn instances(&self) -> &[LesionInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&LesionInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn subject_instances(&self, subject: &str) -> &[usize] {
        self.per_subject.get(subject).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Smallest instance volume in mm³, `None` for an empty bank.
    pub fn min_volume(&self) -> Option<f64> {
        self.instances.iter().map(|i| i.volume_mm3).min_by(f64::total_cmp)
    }

    /// Uniform draw with replacement over the instances eligible under `policy`.
    pub fn sample_lesion<R: Rng + ?Sized>(&self, rng: &mut R, policy: &SamplePolicy) -> Result<&LesionInstance> {
        match policy {
            SamplePolicy::CrossImage => {
                if self.instances.is_empty() {
                    return Err(Error::NoEligibleLesion("lesion bank is empty".into()));
                }
                Ok(&self.instances[rng.random_range(0..self.instances.len())])
            }
            SamplePolicy::SameImage(subject) => {
                let eligible = self.subject_instances(subject);
                if eligible.is_empty() {
                    return Err(Error::NoEligibleLesion(format!("subject '{subject}' has no lesions")));
                }
                Ok(&self.instances[eligible[rng.random_range(0..eligible.len())]])
            }
        }
    }

    /// Writes every instance as native-format patches plus `index.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = Vec::with_capacity(self.instances.len());
        for (n, inst) in self.instances.iter().enumerate() {
            let image = format!("lesion_{n:05}_img");
            let mask = format!("lesion_{n:05}_mask");
            io::write_volume(&inst.patch_intensity, &dir.join(&image))?;
            io::write_mask(&inst.patch_mask.to_labels(1), &dir.join(&mask))?;
            index.push(BankIndexEntry {
                id: inst.id.clone(),
                source_subject: inst.source_subject.clone(),
                bbox: inst.bbox,
                volume_mm3: inst.volume_mm3,
                voxels: inst.voxel_count(),
                source_stats: inst.source_stats,
                image,
                mask,
            });
        }
        let path = dir.join("index.json");
        let text = serde_json::to_string_pretty(&index).expect("bank index serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: Vec<BankIndexEntry> =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let instances = index
            .into_iter()
            .map(|e| {
                let patch_intensity = io::read_volume(&dir.join(&e.image))?;
                let patch_mask = io::read_mask(&dir.join(&e.mask))?.binarize(1);
                if !patch_intensity.same_dims(&patch_mask) || patch_mask.count() != e.voxels {
                    return Err(Error::format(dir, format!("bank entry '{}' is inconsistent with its patches", e.id)));
                }
                Ok(LesionInstance {
                    id: e.id,
                    source_subject: e.source_subject,
                    bbox: e.bbox,
                    patch_intensity,
                    patch_mask,
                    volume_mm3: e.volume_mm3,
                    source_stats: e.source_stats,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_instances(instances)
    }
}

#[derive(Serialize, Deserialize)]
struct BankIndexEntry {
    id: String,
    source_subject: String,
    bbox: BBox,
    volume_mm3: f64,
    voxels: usize,
    source_stats: IntensityStats,
    image: String,
    mask: String,
}

/// Current and target load of an augmentation episode, both in mm³.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadState {
    pub v_cur: f64,
    pub v_tar: f64,
}

impl LoadState {
    pub fn new(v_cur: f64, v_tar: f64) -> Result<Self> {
        if !(v_cur.is_finite() && v_cur >= 0.0 && v_tar.is_finite() && v_tar >= 0.0) {
            return Err(Error::InvalidParameter(format!("loads must be finite and non-negative: {v_cur}, {v_tar}")));
        }
        Ok(Self { v_cur, v_tar })
    }
}
