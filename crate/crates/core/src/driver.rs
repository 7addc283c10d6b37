//! Augmentation episodes and dataset-level runs.
//!
//! One episode draws a target load, then either keeps inserting augmented
//! lesions until the host's load reaches the target, or keeps inpainting
//! random existing lesions until it drops to the target. Every output gets
//! its own RNG stream derived from `(seed, t)`, so the result does not depend
//! on the worker pool width, and a provenance record that replays it exactly.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Volume3D};
use crate::inpaint::{inpaint_voxels, InpaintSettings};
use crate::io::{
    self, load_manifest, Branch, DatasetManifest, Operation, ProvenanceRecord, ReplaySettings, StopReason,
    PROVENANCE_SCHEMA,
};
use crate::lesions::{
    connected_components_3d, extract_instances, load_of, measure_load, BankPolicy, Component, LesionBank,
    LesionInstance, SamplePolicy,
};
use crate::loadmodel::{load_or_build_map, LikelihoodMap, LoadDistribution, LoadKind, MapMode};
use crate::populate::{place_into, sample_placement};
use crate::transform::{augment_lesion, draw_params, TransformRanges};

/// Loop guards of one episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeLimits {
    pub max_iterations: usize,
    /// Consecutive populate iterations that add no lesion voxel before giving up.
    pub max_stalled: usize,
    pub max_redraws: usize,
    pub placement_tries: usize,
}

impl Default for EpisodeLimits {
    fn default() -> Self {
        Self { max_iterations: 500, max_stalled: 50, max_redraws: 10, placement_tries: 25 }
    }
}

impl EpisodeLimits {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.max_stalled == 0 || self.max_redraws == 0 || self.placement_tries == 0 {
            return Err(Error::Config(format!("episode limits must all be at least 1: {self:?}")));
        }
        Ok(())
    }
}

/// Settings that may come from a TOML pipeline file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineFile {
    pub transform: TransformRanges,
    pub limits: EpisodeLimits,
}

impl PipelineFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.transform.validate()?;
        cfg.limits.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    /// Gzipped NIfTI-1, 32-bit float images.
    #[default]
    Nifti,
    /// Raw little-endian blob plus JSON sidecar, 64-bit float images.
    Native,
}

impl OutputFormat {
    fn path(self, dir: &Path, stem: &str) -> PathBuf {
        match self {
            OutputFormat::Nifti => dir.join(format!("{stem}.nii.gz")),
            OutputFormat::Native => dir.join(stem),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AugmentationConfig {
    pub manifest: PathBuf,
    pub count: usize,
    pub dist: LoadKind,
    pub bank_policy: BankPolicy,
    pub transform: TransformRanges,
    pub limits: EpisodeLimits,
    pub inpaint: InpaintSettings,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub lesion_class_id: u32,
    pub modality_tag: String,
    pub min_lesion_voxels: usize,
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
    pub skip_failures: bool,
    pub map_mode: MapMode,
    /// Precomputed likelihood map; built from the manifest when absent.
    pub map_path: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub format: OutputFormat,
}

impl AugmentationConfig {
    pub fn new(manifest: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            count: 1,
            dist: LoadKind::Uniform,
            bank_policy: BankPolicy::Cross,
            transform: TransformRanges::default(),
            limits: EpisodeLimits::default(),
            inpaint: InpaintSettings::default(),
            seed: 0,
            out_dir: out_dir.into(),
            lesion_class_id: 1,
            modality_tag: String::new(),
            min_lesion_voxels: 1,
            jobs: 0,
            skip_failures: false,
            map_mode: MapMode::LesionSum,
            map_path: None,
            cache_dir: None,
            format: OutputFormat::Nifti,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("output count must be at least 1".into()));
        }
        self.transform.validate()?;
        self.limits.validate()?;
        self.inpaint.validate().map_err(|e| Error::Config(e.to_string()))
    }

    fn replay_settings(&self) -> ReplaySettings {
        ReplaySettings {
            lesion_class_id: self.lesion_class_id,
            min_lesion_voxels: self.min_lesion_voxels,
            bank_policy: self.bank_policy,
            inpaint_radius: self.inpaint.radius,
            blur_sigma: self.inpaint.blur_sigma,
        }
    }
}

/// Host pair of one episode.
#[derive(Clone, Copy, Debug)]
pub struct Host<'a> {
    pub subject: &'a str,
    pub image: &'a Volume3D,
    pub mask: &'a BinaryMask,
}

/// Shared, read-only inputs of an episode.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeContext<'a> {
    pub bank: &'a LesionBank,
    /// Required only when the populate branch runs.
    pub map: Option<&'a LikelihoodMap>,
    pub ranges: &'a TransformRanges,
    pub inpaint: InpaintSettings,
    pub policy: BankPolicy,
    pub limits: EpisodeLimits,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub image: Volume3D,
    pub mask: BinaryMask,
    pub branch: Branch,
    pub stop_reason: StopReason,
    pub operations: Vec<Operation>,
    pub v_initial: f64,
    pub v_target: f64,
    pub v_final: f64,
    /// Load after each applied operation.
    pub load_trace: Vec<f64>,
}

/// Samples a target from `dist` and runs the episode.
pub fn augment_one<R: Rng + ?Sized>(
    host: Host,
    ctx: &EpisodeContext,
    dist: &LoadDistribution,
    rng: &mut R,
) -> Result<Episode> {
    let v_tar = dist.sample(rng);
    run_episode(host, ctx, v_tar, rng)
}

/// Drives the host load toward `v_tar`: populate while below, inpaint while above.
pub fn run_episode<R: Rng + ?Sized>(host: Host, ctx: &EpisodeContext, v_tar: f64, rng: &mut R) -> Result<Episode> {
    if !host.image.same_dims(host.mask) {
        return Err(Error::Shape(format!("host image {:?} vs mask {:?}", host.image.dims(), host.mask.dims())));
    }
    if !(v_tar.is_finite() && v_tar >= 0.0) {
        return Err(Error::InvalidParameter(format!("target load must be finite and non-negative, got {v_tar}")));
    }
    let v_initial = measure_load(host.mask);
    let mut ep = Episode {
        image: host.image.clone(),
        mask: host.mask.clone(),
        branch: Branch::None,
        stop_reason: StopReason::TargetReached,
        operations: Vec::new(),
        v_initial,
        v_target: v_tar,
        v_final: v_initial,
        load_trace: Vec::new(),
    };
    if v_initial < v_tar {
        ep.branch = Branch::Populate;
        populate_loop(host.subject, ctx, rng, &mut ep)?;
    } else if v_initial > v_tar {
        ep.branch = Branch::Inpaint;
        inpaint_loop(host.subject, ctx, rng, &mut ep)?;
    }
    ep.v_final = measure_load(&ep.mask);
    Ok(ep)
}

fn populate_loop<R: Rng + ?Sized>(subject: &str, ctx: &EpisodeContext, rng: &mut R, ep: &mut Episode) -> Result<()> {
    let map = ctx.map.ok_or_else(|| Error::InvalidParameter("populating requires a likelihood map".into()))?;
    if map.dims() != ep.image.dims() {
        return Err(Error::Geometry {
            subject: subject.to_string(),
            detail: format!("host grid {:?} does not match the likelihood map {:?}", ep.image.dims(), map.dims()),
        });
    }
    let policy = match ctx.policy {
        BankPolicy::Cross => SamplePolicy::CrossImage,
        BankPolicy::Same => SamplePolicy::SameImage(subject),
    };
    let vv = ep.mask.voxel_volume();
    let mut count = ep.mask.count();
    let mut iterations = 0;
    let mut stalled = 0;
    while load_of(count, vv) < ep.v_target {
        if iterations == ctx.limits.max_iterations {
            ep.stop_reason = StopReason::IterationCap;
            return Ok(());
        }
        if stalled == ctx.limits.max_stalled {
            ep.stop_reason = StopReason::NoProgress;
            return Ok(());
        }
        iterations += 1;
        let lesion = ctx.bank.sample_lesion(rng, &policy)?;
        let mut drawn = None;
        for _ in 0..ctx.limits.max_redraws {
            let params = draw_params(rng, ctx.ranges);
            match augment_lesion(lesion, &params) {
                Ok(patch) => {
                    drawn = Some((params, patch));
                    break;
                }
                Err(Error::DegenerateTransform) => continue,
                Err(e) => return Err(e),
            }
        }
        let Some((params, (patch, patch_mask))) = drawn else {
            log::debug!("lesion {} degenerated under {} parameter draws", lesion.id, ctx.limits.max_redraws);
            stalled += 1;
            continue;
        };
        let placement = sample_placement(map, &patch_mask, subject, rng, ctx.limits.placement_tries)?;
        let region = match place_into(&mut ep.image, &mut ep.mask, &patch, &patch_mask, placement.center) {
            Ok(r) => r,
            Err(Error::Placement(msg)) => {
                log::debug!("placement of {} rejected: {msg}", lesion.id);
                stalled += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        count += region.newly_added;
        stalled = if region.newly_added == 0 { stalled + 1 } else { 0 };
        ep.operations.push(Operation::Populate {
            source_lesion_id: lesion.id.clone(),
            placement_center: placement.center,
            clipped: placement.clipped,
            transform_params: params,
            placed_voxels: region.voxels.len(),
        });
        ep.load_trace.push(load_of(count, vv));
    }
    ep.stop_reason = StopReason::TargetReached;
    Ok(())
}

fn inpaint_loop<R: Rng + ?Sized>(subject: &str, ctx: &EpisodeContext, rng: &mut R, ep: &mut Episode) -> Result<()> {
    let vv = ep.mask.voxel_volume();
    let mut count = ep.mask.count();
    // Removing a whole component never changes the others, so the component
    // list stays valid (and in order) as lesions are removed.
    let mut remaining: Vec<Component> = connected_components_3d(&ep.mask);
    let mut blocked = vec![false; remaining.len()];
    while load_of(count, vv) > ep.v_target {
        let eligible: Vec<usize> = (0..remaining.len()).filter(|&i| !blocked[i]).collect();
        if eligible.is_empty() {
            ep.stop_reason = StopReason::NoLesionsLeft;
            return Ok(());
        }
        let k = eligible[rng.random_range(0..eligible.len())];
        let comp = &remaining[k];
        match inpaint_voxels(&mut ep.image, &comp.voxels, comp.bbox, &ctx.inpaint) {
            Ok(()) => {}
            Err(Error::NoBoundarySeed { slice }) => {
                log::warn!("{subject}: lesion {k} fills axial slice {slice}; left in place");
                blocked[k] = true;
                continue;
            }
            Err(e) => return Err(e),
        }
        let mask = ep.mask.data_mut();
        for &i in &comp.voxels {
            mask[i] = false;
        }
        count -= comp.len();
        ep.operations.push(Operation::Inpaint {
            source_lesion_id: format!("{subject}#{k}"),
            anchor: ep.mask.coords(comp.voxels[0]),
            removed_voxels: comp.len(),
        });
        ep.load_trace.push(load_of(count, vv));
        remaining.remove(k);
        blocked.remove(k);
    }
    ep.stop_reason = StopReason::TargetReached;
    Ok(())
}

/// Re-applies recorded operations to a host pair. `lookup` resolves lesion ids.
pub fn apply_operations<'a>(
    image: &Volume3D,
    mask: &BinaryMask,
    operations: &[Operation],
    lookup: impl Fn(&str) -> Option<&'a LesionInstance>,
    inpaint: &InpaintSettings,
) -> Result<(Volume3D, BinaryMask)> {
    let mut image = image.clone();
    let mut mask = mask.clone();
    for (n, op) in operations.iter().enumerate() {
        match op {
            Operation::Populate { source_lesion_id, placement_center, transform_params, .. } => {
                let lesion = lookup(source_lesion_id).ok_or_else(|| {
                    Error::Provenance(format!("operation {n}: lesion '{source_lesion_id}' is not in the bank"))
                })?;
                let (patch, patch_mask) = augment_lesion(lesion, transform_params)?;
                place_into(&mut image, &mut mask, &patch, &patch_mask, *placement_center)?;
            }
            Operation::Inpaint { anchor, .. } => {
                if (0..3).any(|a| anchor[a] >= mask.dims()[a]) {
                    return Err(Error::Provenance(format!("operation {n}: anchor {anchor:?} is outside the grid")));
                }
                let target = mask.index(anchor[0], anchor[1], anchor[2]);
                let comp = connected_components_3d(&mask)
                    .into_iter()
                    .find(|c| c.voxels.binary_search(&target).is_ok())
                    .ok_or_else(|| Error::Provenance(format!("operation {n}: no lesion at anchor {anchor:?}")))?;
                inpaint_voxels(&mut image, &comp.voxels, comp.bbox, inpaint)?;
                let data = mask.data_mut();
                for &i in &comp.voxels {
                    data[i] = false;
                }
            }
        }
    }
    Ok((image, mask))
}

/// Everything loaded from a manifest that episodes read.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Volume3D>,
    pub masks: Vec<BinaryMask>,
    pub bank: LesionBank,
    pub loads: Vec<f64>,
}

impl Dataset {
    pub fn load(
        manifest_path: &Path,
        lesion_class_id: u32,
        modality_tag: &str,
        min_lesion_voxels: usize,
    ) -> Result<Self> {
        let manifest = load_manifest(manifest_path, lesion_class_id, modality_tag)?;
        let pairs = manifest
            .entries
            .par_iter()
            .map(|e| {
                let load = || -> Result<_> {
                    let image = io::read_volume(&e.image)?;
                    let mask = io::read_mask(&e.mask)?.binarize(lesion_class_id);
                    let instances = extract_instances(&image, &mask, &e.subject, min_lesion_voxels)?;
                    Ok((image, mask, instances))
                };
                load().map_err(|err| err.for_subject(&e.subject))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut images = Vec::with_capacity(pairs.len());
        let mut masks = Vec::with_capacity(pairs.len());
        let mut instances = Vec::new();
        for (image, mask, inst) in pairs {
            images.push(image);
            masks.push(mask);
            instances.extend(inst);
        }
        let mut loads: Vec<f64> = masks.iter().map(measure_load).collect();
        loads.sort_by(f64::total_cmp);
        let bank = LesionBank::from_instances(instances)?;
        Ok(Self { manifest, images, masks, bank, loads })
    }
}

/// Files written for one output.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputPaths {
    pub output_id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub provenance: PathBuf,
}

impl OutputPaths {
    pub fn new(dir: &Path, output_id: &str, format: OutputFormat) -> Self {
        Self {
            output_id: output_id.to_string(),
            image: format.path(dir, &format!("{output_id}_image")),
            mask: format.path(dir, &format!("{output_id}_mask")),
            provenance: dir.join(format!("{output_id}_prov.json")),
        }
    }
}

/// Per-output generator: stream `t` of the run seed.
pub fn output_rng(seed: u64, t: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t);
    rng
}

pub fn write_outputs(
    paths: &OutputPaths,
    image: &Volume3D,
    mask: &BinaryMask,
    class_id: u32,
    record: &ProvenanceRecord,
) -> Result<()> {
    io::write_volume(image, &paths.image)?;
    io::write_mask(&mask.to_labels(class_id), &paths.mask)?;
    io::write_provenance(record, &paths.provenance)
}

/// Runs `config.count` episodes and writes image, mask and provenance for each.
pub fn augment_dataset(config: &AugmentationConfig) -> Result<Vec<OutputPaths>> {
    config.validate()?;
    let data = Dataset::load(&config.manifest, config.lesion_class_id, &config.modality_tag, config.min_lesion_voxels)?;
    let dist = LoadDistribution::new(config.dist, &data.loads)?;
    let map = match &config.map_path {
        Some(p) => LikelihoodMap::from_weights(&io::read_volume(p)?)?,
        None => load_or_build_map(&data.manifest, config.map_mode, config.cache_dir.as_deref())?,
    };
    log::info!(
        "dataset: {} subjects, {} bank lesions, {} load support {:?}",
        data.images.len(),
        data.bank.len(),
        config.dist.name(),
        dist.support()
    );
    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let ctx = EpisodeContext {
        bank: &data.bank,
        map: Some(&map),
        ranges: &config.transform,
        inpaint: config.inpaint,
        policy: config.bank_policy,
        limits: config.limits,
    };
    let settings = config.replay_settings();
    let produce = |t: usize| -> Result<OutputPaths> {
        let mut rng = output_rng(config.seed, t as u64);
        let h = rng.random_range(0..data.images.len());
        let subject = data.manifest.entries[h].subject.as_str();
        let host = Host { subject, image: &data.images[h], mask: &data.masks[h] };
        let ep = augment_one(host, &ctx, &dist, &mut rng).map_err(|e| e.for_subject(subject))?;
        let output_id = format!("aug_{t:04}");
        let record = ProvenanceRecord {
            schema: PROVENANCE_SCHEMA,
            output_id: output_id.clone(),
            source_subject: subject.to_string(),
            v_initial: ep.v_initial,
            v_target: ep.v_target,
            v_final: ep.v_final,
            branch: ep.branch,
            stop_reason: ep.stop_reason,
            operations: ep.operations,
            rng_seed: config.seed,
            rng_stream: t as u64,
            settings: settings.clone(),
        };
        let paths = OutputPaths::new(&config.out_dir, &output_id, config.format);
        write_outputs(&paths, &ep.image, &ep.mask, config.lesion_class_id, &record)?;
        log::info!(
            "{output_id}: host {subject}, {:?} {:.1} -> {:.1} mm3 (target {:.1}), {} ops, {:?}",
            record.branch,
            record.v_initial,
            record.v_final,
            record.v_target,
            record.operations.len(),
            record.stop_reason
        );
        Ok(paths)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    let results: Vec<Result<OutputPaths>> = pool.install(|| (1..=config.count).into_par_iter().map(produce).collect());
    let mut outputs = Vec::with_capacity(results.len());
    for (t, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => outputs.push(p),
            Err(e) if config.skip_failures => log::warn!("output {} failed and was skipped: {e}", t + 1),
            Err(e) => return Err(e),
        }
    }
    Ok(outputs)
}

/// Subject part of a lesion id `"<subject>#<k>"`.
fn lesion_subject(id: &str) -> Option<&str> {
    id.rsplit_once('#').map(|(s, _)| s)
}

/// Rebuilds an output from its provenance record and the source manifest.
pub fn replay(record: &ProvenanceRecord, manifest_path: &Path) -> Result<(Volume3D, BinaryMask)> {
    if record.schema != PROVENANCE_SCHEMA {
        return Err(Error::Provenance(format!("schema {} is not supported", record.schema)));
    }
    let s = &record.settings;
    let manifest = load_manifest(manifest_path, s.lesion_class_id, "")?;
    let entry_of = |subject: &str| {
        manifest
            .entries
            .iter()
            .find(|e| e.subject == subject)
            .ok_or_else(|| Error::Provenance(format!("source subject '{subject}' is not in the manifest")))
    };
    let host = entry_of(&record.source_subject)?;
    let image = io::read_volume(&host.image)?;
    let mask = io::read_mask(&host.mask)?.binarize(s.lesion_class_id);

    let mut donors: Vec<&str> = record
        .operations
        .iter()
        .filter_map(|op| match op {
            Operation::Populate { source_lesion_id, .. } => lesion_subject(source_lesion_id),
            Operation::Inpaint { .. } => None,
        })
        .collect();
    donors.sort_unstable();
    donors.dedup();
    let mut instances: HashMap<String, LesionInstance> = HashMap::new();
    for subject in donors {
        let e = entry_of(subject)?;
        let img = io::read_volume(&e.image)?;
        let m = io::read_mask(&e.mask)?.binarize(s.lesion_class_id);
        for inst in extract_instances(&img, &m, subject, s.min_lesion_voxels)? {
            instances.insert(inst.id.clone(), inst);
        }
    }
    let inpaint = InpaintSettings { radius: s.inpaint_radius, blur_sigma: s.blur_sigma };
    apply_operations(&image, &mask, &record.operations, |id| instances.get(id), &inpaint)
}

/// Replays a record and writes the result under `out_dir` with the record's output id.
pub fn replay_to_dir(
    record: &ProvenanceRecord,
    manifest_path: &Path,
    out_dir: &Path,
    format: OutputFormat,
) -> Result<OutputPaths> {
    let (image, mask) = replay(record, manifest_path)?;
    let v = measure_load(&mask);
    if (v - record.v_final).abs() > 0.5 * mask.voxel_volume() {
        return Err(Error::Provenance(format!(
            "replayed load {v} differs from the recorded final load {}",
            record.v_final
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths = OutputPaths::new(out_dir, &record.output_id, format);
    write_outputs(&paths, &image, &mask, record.settings.lesion_class_id, record)?;
    Ok(paths)
}
