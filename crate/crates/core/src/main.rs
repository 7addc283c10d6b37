use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lesionforge::driver::{
    augment_dataset, output_rng, replay_to_dir, run_episode, write_outputs, AugmentationConfig, Dataset,
    EpisodeContext, EpisodeLimits, Host, OutputFormat, OutputPaths, PipelineFile,
};
use lesionforge::inpaint::{inpaint_lesion, InpaintSettings, DEFAULT_BLUR_SIGMA, DEFAULT_RADIUS};
use lesionforge::io::{self, Branch, Operation, ProvenanceRecord, ReplaySettings, StopReason, PROVENANCE_SCHEMA};
use lesionforge::lesions::{connected_components_3d, measure_load, BankPolicy, LesionBank};
use lesionforge::loadmodel::{
    build_likelihood_map, fit_load_distribution, render_load_svg, summarize_loads, LikelihoodMap, LoadKind, MapMode,
};
use lesionforge::transform::TransformRanges;
use lesionforge::{Error, Result};

#[derive(Parser)]
#[command(name = "lesionforge", version, about = "Lesion-level augmentation for 3D medical images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Produce augmented image/mask pairs from a dataset manifest.
    Augment(AugmentArgs),
    /// Insert augmented lesions into one image until it reaches a target load.
    Populate(PopulateArgs),
    /// Remove lesions from one image, by component index or down to a target load.
    Inpaint(InpaintArgs),
    /// Build the spatial lesion likelihood map of a dataset.
    BuildMap(BuildMapArgs),
    /// Report dataset lesion loads and the derived target samplers.
    Stats(StatsArgs),
    /// Re-create outputs from their provenance records.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct Common {
    /// Label value that marks lesion voxels.
    #[arg(long, default_value_t = 1)]
    lesion_class_id: u32,
    /// Output file format.
    #[arg(long, value_enum, default_value_t = OutputFormat::Nifti)]
    format: OutputFormat,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = BankPolicy::Cross)]
    bank_policy: BankPolicy,
    #[arg(long, value_enum, default_value_t = LoadKind::Uniform)]
    dist: LoadKind,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    min_lesion_voxels: usize,
    #[arg(long, default_value_t = DEFAULT_RADIUS)]
    inpaint_radius: usize,
    #[arg(long, default_value_t = DEFAULT_BLUR_SIGMA)]
    blur_sigma: f64,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Log failed outputs and continue instead of aborting.
    #[arg(long)]
    skip_failures: bool,
    /// TOML file overriding transform ranges and episode limits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Precomputed likelihood map (otherwise built from the manifest).
    #[arg(long)]
    map: Option<PathBuf>,
    /// `lesion` or `organ:<label>`.
    #[arg(long, default_value = "lesion")]
    map_mode: MapMode,
    /// Directory for the cached likelihood map.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long, default_value = "")]
    modality: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PopulateArgs {
    #[arg(long = "in")]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Lesion bank directory written by `stats --dump-bank`.
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    map: PathBuf,
    /// Target lesion load in mm³.
    #[arg(long)]
    target_load: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("what").required(true).args(["lesion_id", "target_load"])))]
struct InpaintArgs {
    #[arg(long = "in")]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Index of the lesion component (ordered by bounding-box corner z, y, x).
    #[arg(long)]
    lesion_id: Option<usize>,
    /// Target lesion load in mm³.
    #[arg(long)]
    target_load: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RADIUS)]
    inpaint_radius: usize,
    #[arg(long, default_value_t = DEFAULT_BLUR_SIGMA)]
    blur_sigma: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BuildMapArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `lesion` or `organ:<label>`.
    #[arg(long, default_value = "lesion")]
    mode: MapMode,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    lesion_class_id: u32,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON summary of loads and sampler supports.
    #[arg(long)]
    out: PathBuf,
    /// SVG histogram with the sampler supports.
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Also write the lesion bank to this directory.
    #[arg(long)]
    dump_bank: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    min_lesion_voxels: usize,
    #[arg(long, default_value_t = 1)]
    lesion_class_id: u32,
}

#[derive(Args)]
struct ReplayArgs {
    /// Provenance records to replay.
    #[arg(long, required = true, num_args = 1..)]
    provenance: Vec<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = OutputFormat::Nifti)]
    format: OutputFormat,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("LESIONFORGE_LOG", "info");
    env_logger::Builder::from_env(env)
        .format(|buf, record| {
            let line = serde_json::json!({
                "ts": buf.timestamp_millis().to_string(),
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn load_pipeline(path: Option<&Path>) -> Result<PipelineFile> {
    path.map(PipelineFile::load).transpose().map(Option::unwrap_or_default)
}

/// File name without `.nii`, `.nii.gz` or directory parts.
fn stem_of(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

fn augment(args: AugmentArgs) -> Result<()> {
    let pipeline = load_pipeline(args.config.as_deref())?;
    let mut cfg = AugmentationConfig::new(&args.manifest, &args.out);
    cfg.count = args.count;
    cfg.dist = args.dist;
    cfg.bank_policy = args.bank_policy;
    cfg.transform = pipeline.transform;
    cfg.limits = pipeline.limits;
    cfg.inpaint = InpaintSettings { radius: args.inpaint_radius, blur_sigma: args.blur_sigma };
    cfg.seed = args.seed;
    cfg.lesion_class_id = args.common.lesion_class_id;
    cfg.modality_tag = args.modality;
    cfg.min_lesion_voxels = args.min_lesion_voxels;
    cfg.jobs = args.jobs;
    cfg.skip_failures = args.skip_failures;
    cfg.map_mode = args.map_mode;
    cfg.map_path = args.map;
    cfg.cache_dir = args.cache_dir;
    cfg.format = args.common.format;
    let outputs = augment_dataset(&cfg)?;
    log::info!("wrote {} outputs to {}", outputs.len(), args.out.display());
    Ok(())
}

fn single_record(
    output_id: &str,
    subject: &str,
    ep: &lesionforge::driver::Episode,
    seed: u64,
    class_id: u32,
    inpaint: InpaintSettings,
) -> ProvenanceRecord {
    ProvenanceRecord {
        schema: PROVENANCE_SCHEMA,
        output_id: output_id.to_string(),
        source_subject: subject.to_string(),
        v_initial: ep.v_initial,
        v_target: ep.v_target,
        v_final: ep.v_final,
        branch: ep.branch,
        stop_reason: ep.stop_reason,
        operations: ep.operations.clone(),
        rng_seed: seed,
        rng_stream: 0,
        settings: ReplaySettings {
            lesion_class_id: class_id,
            min_lesion_voxels: 1,
            bank_policy: BankPolicy::Cross,
            inpaint_radius: inpaint.radius,
            blur_sigma: inpaint.blur_sigma,
        },
    }
}

fn populate(args: PopulateArgs) -> Result<()> {
    let pipeline = load_pipeline(args.config.as_deref())?;
    let class = args.common.lesion_class_id;
    let image = io::read_volume(&args.image)?;
    let mask = io::read_mask(&args.mask)?.binarize(class);
    let bank = LesionBank::load(&args.bank)?;
    let map = LikelihoodMap::from_weights(&io::read_volume(&args.map)?)?;
    let v_cur = measure_load(&mask);
    if args.target_load < v_cur {
        return Err(Error::Config(format!(
            "target load {} is below the current load {v_cur}; use `inpaint` to reduce it",
            args.target_load
        )));
    }
    let subject = stem_of(&args.image);
    let ranges: TransformRanges = pipeline.transform;
    let ctx = EpisodeContext {
        bank: &bank,
        map: Some(&map),
        ranges: &ranges,
        inpaint: InpaintSettings::default(),
        policy: BankPolicy::Cross,
        limits: pipeline.limits,
    };
    let host = Host { subject: &subject, image: &image, mask: &mask };
    let ep = run_episode(host, &ctx, args.target_load, &mut output_rng(args.seed, 0))?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    let output_id = format!("{subject}_populated");
    let record = single_record(&output_id, &subject, &ep, args.seed, class, ctx.inpaint);
    let paths = OutputPaths::new(&args.out, &output_id, args.common.format);
    write_outputs(&paths, &ep.image, &ep.mask, class, &record)?;
    log::info!("{subject}: {:.1} -> {:.1} mm3 with {} insertions", ep.v_initial, ep.v_final, ep.operations.len());
    Ok(())
}

fn inpaint(args: InpaintArgs) -> Result<()> {
    let class = args.common.lesion_class_id;
    let settings = InpaintSettings { radius: args.inpaint_radius, blur_sigma: args.blur_sigma };
    settings.validate().map_err(|e| Error::Config(e.to_string()))?;
    let image = io::read_volume(&args.image)?;
    let mask = io::read_mask(&args.mask)?.binarize(class);
    let subject = stem_of(&args.image);
    let bank = LesionBank::default();
    let ranges = TransformRanges::default();
    let ep = match (args.lesion_id, args.target_load) {
        (Some(k), _) => {
            let comps = connected_components_3d(&mask);
            let comp = comps.get(k).ok_or_else(|| {
                Error::Config(format!("lesion id {k} is out of range; the mask has {} lesions", comps.len()))
            })?;
            let (out_image, out_mask) = inpaint_lesion(&image, &comp.to_mask(&mask), &mask, &settings)?;
            let v_initial = measure_load(&mask);
            let v_final = measure_load(&out_mask);
            lesionforge::driver::Episode {
                image: out_image,
                mask: out_mask,
                branch: Branch::Inpaint,
                stop_reason: StopReason::TargetReached,
                operations: vec![Operation::Inpaint {
                    source_lesion_id: format!("{subject}#{k}"),
                    anchor: mask.coords(comp.voxels[0]),
                    removed_voxels: comp.len(),
                }],
                v_initial,
                v_target: v_final,
                v_final,
                load_trace: vec![v_final],
            }
        }
        (None, Some(target)) => {
            let v_cur = measure_load(&mask);
            if target > v_cur {
                return Err(Error::Config(format!(
                    "target load {target} exceeds the current load {v_cur}; use `populate` to raise it"
                )));
            }
            let ctx = EpisodeContext {
                bank: &bank,
                map: None,
                ranges: &ranges,
                inpaint: settings,
                policy: BankPolicy::Cross,
                limits: EpisodeLimits::default(),
            };
            let host = Host { subject: &subject, image: &image, mask: &mask };
            run_episode(host, &ctx, target, &mut output_rng(args.seed, 0))?
        }
        (None, None) => unreachable!("clap requires one of the two"),
    };
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    let output_id = format!("{subject}_inpainted");
    let record = single_record(&output_id, &subject, &ep, args.seed, class, settings);
    let paths = OutputPaths::new(&args.out, &output_id, args.common.format);
    write_outputs(&paths, &ep.image, &ep.mask, class, &record)?;
    log::info!("{subject}: {:.1} -> {:.1} mm3 with {} removals", ep.v_initial, ep.v_final, ep.operations.len());
    Ok(())
}

fn build_map(args: BuildMapArgs) -> Result<()> {
    let manifest = io::load_manifest(&args.manifest, args.lesion_class_id, "")?;
    let map = build_likelihood_map(&manifest, args.mode)?;
    io::write_volume(map.probs(), &args.out)?;
    log::info!("map over {} voxels written to {}", map.support().len(), args.out.display());
    Ok(())
}

fn stats(args: StatsArgs) -> Result<()> {
    let loads = match &args.dump_bank {
        Some(dir) => {
            let data = Dataset::load(&args.manifest, args.lesion_class_id, "", args.min_lesion_voxels)?;
            data.bank.save(dir)?;
            log::info!("lesion bank of {} instances written to {}", data.bank.len(), dir.display());
            data.loads
        }
        None => fit_load_distribution(&io::load_manifest(&args.manifest, args.lesion_class_id, "")?)?,
    };
    let summary = summarize_loads(&loads)?;
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&args.out, text + "\n").map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    if let Some(plot) = &args.plot {
        std::fs::write(plot, render_load_svg(&summary)).map_err(|e| Error::Io { path: plot.clone(), source: e })?;
    }
    Ok(())
}

fn replay(args: ReplayArgs) -> Result<()> {
    for p in &args.provenance {
        let record = io::read_provenance(p)?;
        let paths = replay_to_dir(&record, &args.manifest, &args.out, args.format)?;
        log::info!("replayed {} into {}", record.output_id, paths.image.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    let result = match cli.command {
        Command::Augment(a) => augment(a),
        Command::Populate(a) => populate(a),
        Command::Inpaint(a) => inpaint(a),
        Command::BuildMap(a) => build_map(a),
        Command::Stats(a) => stats(a),
        Command::Replay(a) => replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
