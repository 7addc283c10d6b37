//! Dataset-level statistics: the spatial lesion likelihood map and the
//! image-level lesion load distribution with its six target samplers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid, Spacing, Volume3D};
use crate::io::{self, DatasetManifest};
use crate::lesions::measure_load;

/// Normalized placement probabilities plus a sparse cumulative table for
/// inverse-CDF sampling.
#[derive(Clone, Debug)]
pub struct LikelihoodMap {
    probs: Volume3D,
    support: Vec<usize>,
    cumulative: Vec<f64>,
}

impl LikelihoodMap {
    /// Normalizes non-negative weights to sum 1.
    pub fn from_weights(weights: &Volume3D) -> Result<Self> {
        if let Some(w) = weights.data().iter().find(|w| **w < 0.0) {
            return Err(Error::InvalidParameter(format!("likelihood weights must be non-negative, found {w}")));
        }
        let total: f64 = weights.data().iter().sum();
        if total <= 0.0 {
            return Err(Error::EmptyMap);
        }
        let probs = weights.map(|w| w / total);
        let mut support = Vec::new();
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for (i, &p) in probs.data().iter().enumerate() {
            if p > 0.0 {
                acc += p;
                support.push(i);
                cumulative.push(acc);
            }
        }
        Ok(Self { probs, support, cumulative })
    }

    pub fn probs(&self) -> &Volume3D {
        &self.probs
    }

    pub fn dims(&self) -> Dims {
        self.probs.dims()
    }

    pub fn spacing(&self) -> Spacing {
        self.probs.spacing()
    }

    /// Flat indices of the nonzero voxels, ascending.
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// Inverse-CDF draw of one voxel.
    pub fn sample_voxel<R: Rng + ?Sized>(&self, rng: &mut R) -> [usize; 3] {
        let total = *self.cumulative.last().expect("map has support");
        let u = rng.random::<f64>() * total;
        let k = self.cumulative.partition_point(|&c| c <= u).min(self.support.len() - 1);
        self.probs.coords(self.support[k])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapMode {
    /// Sum of binarized lesion masks.
    LesionSum,
    /// Sum of indicators of one organ label.
    OrganLabel(u32),
}

impl std::str::FromStr for MapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lesion" => Ok(MapMode::LesionSum),
            _ => match s.strip_prefix("organ:").map(str::parse::<u32>) {
                Some(Ok(id)) => Ok(MapMode::OrganLabel(id)),
                _ => Err(Error::Config(format!("map mode must be 'lesion' or 'organ:<id>', got '{s}'"))),
            },
        }
    }
}

impl std::fmt::Display for MapMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MapMode::LesionSum => write!(f, "lesion"),
            MapMode::OrganLabel(id) => write!(f, "organ:{id}"),
        }
    }
}

/// Accumulates label indicators over every manifest entry and normalizes.
/// All masks must share one grid.
pub fn build_likelihood_map(manifest: &DatasetManifest, mode: MapMode) -> Result<LikelihoodMap> {
    let class = match mode {
        MapMode::LesionSum => manifest.lesion_class_id,
        MapMode::OrganLabel(id) => id,
    };
    let masks = manifest
        .entries
        .par_iter()
        .map(|e| io::read_mask(&e.mask).map(|m| m.binarize(class)).map_err(|err| err.for_subject(&e.subject)))
        .collect::<Result<Vec<_>>>()?;
    let first = &masks[0];
    let mut counts = vec![0u32; first.len()];
    for (mask, entry) in masks.iter().zip(&manifest.entries) {
        if !mask.same_geometry(first) {
            return Err(Error::Geometry {
                subject: entry.subject.clone(),
                detail: format!(
                    "mask grid {:?} / {:?} differs from the dataset grid {:?} / {:?}",
                    mask.dims(),
                    mask.spacing(),
                    first.dims(),
                    first.spacing()
                ),
            });
        }
        for (c, &m) in counts.iter_mut().zip(mask.data()) {
            *c += m as u32;
        }
    }
    let weights = Grid::new(first.dims(), first.spacing(), counts.into_iter().map(f64::from).collect())?;
    LikelihoodMap::from_weights(&weights)
}

/// Cached map file for a manifest, keyed by the manifest content hash and mode.
pub fn map_cache_path(cache_dir: &Path, manifest: &DatasetManifest, mode: MapMode) -> PathBuf {
    let tag = match mode {
        MapMode::LesionSum => format!("lesion{}", manifest.lesion_class_id),
        MapMode::OrganLabel(id) => format!("organ{id}"),
    };
    cache_dir.join(format!("map_{}_{tag}", &manifest.content_hash[..16]))
}

/// Reuses a cached map when present, otherwise builds and stores it.
pub fn load_or_build_map(manifest: &DatasetManifest, mode: MapMode, cache_dir: Option<&Path>) -> Result<LikelihoodMap> {
    let Some(dir) = cache_dir else {
        return build_likelihood_map(manifest, mode);
    };
    let path = map_cache_path(dir, manifest, mode);
    if io::native_paths(&path).0.exists() {
        log::debug!("using cached likelihood map {}", path.display());
        return LikelihoodMap::from_weights(&io::read_volume(&path)?);
    }
    let map = build_likelihood_map(manifest, mode)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_volume(map.probs(), &path)?;
    Ok(map)
}

/// Per-image lesion loads (mm³) of the dataset, ascending.
pub fn fit_load_distribution(manifest: &DatasetManifest) -> Result<Vec<f64>> {
    if manifest.entries.is_empty() {
        return Err(Error::Manifest("no annotated images".into()));
    }
    let mut loads = manifest
        .entries
        .par_iter()
        .map(|e| {
            io::read_mask(&e.mask)
                .map(|m| measure_load(&m.binarize(manifest.lesion_class_id)))
                .map_err(|err| err.for_subject(&e.subject))
        })
        .collect::<Result<Vec<_>>>()?;
    loads.sort_by(f64::total_cmp);
    Ok(loads)
}

/// Percentile `q` in [0, 100] of ascending `sorted`, linear interpolation between closest ranks.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty list");
    let h = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LoadKind {
    Low,
    Medium,
    High,
    #[default]
    Uniform,
    Gaussian,
    Real,
}

impl LoadKind {
    pub const ALL: [LoadKind; 6] =
        [LoadKind::Low, LoadKind::Medium, LoadKind::High, LoadKind::Uniform, LoadKind::Gaussian, LoadKind::Real];

    /// Percentile bounds of the uniform kinds.
    pub fn percentile_bounds(self) -> Option<(f64, f64)> {
        match self {
            LoadKind::Low => Some((5.0, 25.0)),
            LoadKind::Medium => Some((37.5, 62.5)),
            LoadKind::High => Some((75.0, 95.0)),
            LoadKind::Uniform => Some((5.0, 95.0)),
            LoadKind::Gaussian | LoadKind::Real => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LoadKind::Low => "low",
            LoadKind::Medium => "medium",
            LoadKind::High => "high",
            LoadKind::Uniform => "uniform",
            LoadKind::Gaussian => "gaussian",
            LoadKind::Real => "real",
        }
    }
}

const GAUSSIAN_MAX_TRIES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct LoadDistribution {
    kind: LoadKind,
    loads: Vec<f64>,
    lo: f64,
    hi: f64,
    mean: f64,
    std: f64,
}

impl LoadDistribution {
    pub fn new(kind: LoadKind, loads: &[f64]) -> Result<Self> {
        if loads.is_empty() {
            return Err(Error::InvalidParameter("load distribution needs at least one load".into()));
        }
        if let Some(v) = loads.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidParameter(format!("dataset loads must be finite and non-negative, got {v}")));
        }
        let mut sorted = loads.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let var = if sorted.len() > 1 {
            sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let (lo, hi) = match kind.percentile_bounds() {
            Some((a, b)) => (percentile(&sorted, a), percentile(&sorted, b)),
            None => (sorted[0], sorted[sorted.len() - 1]),
        };
        Ok(Self { kind, loads: sorted, lo, hi, mean, std: var.sqrt() })
    }

    pub fn kind(&self) -> LoadKind {
        self.kind
    }

    pub fn dataset_loads(&self) -> &[f64] {
        &self.loads
    }

    /// Closed support of the draws; the Gaussian kind reports `[0, ∞)`.
    pub fn support(&self) -> (f64, f64) {
        match self.kind {
            LoadKind::Gaussian => (0.0, f64::INFINITY),
            _ => (self.lo, self.hi),
        }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            LoadKind::Real => self.loads[rng.random_range(0..self.loads.len())],
            LoadKind::Gaussian => {
                for _ in 0..GAUSSIAN_MAX_TRIES {
                    let z: f64 = rng.sample(StandardNormal);
                    let v = self.mean + self.std * z;
                    if v >= 0.0 {
                        return v;
                    }
                }
                0.0
            }
            _ if self.lo < self.hi => rng.random_range(self.lo..=self.hi),
            _ => self.lo,
        }
    }
}

pub fn sample_target_load<R: Rng + ?Sized>(dist: &LoadDistribution, rng: &mut R) -> f64 {
    dist.sample(rng)
}

/// Summary written by `lesionforge stats`.
#[derive(Clone, Debug, Serialize)]
pub struct LoadSummary {
    pub loads: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub samplers: Vec<SamplerSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SamplerSummary {
    pub kind: LoadKind,
    pub lo: f64,
    pub hi: Option<f64>,
}

pub fn summarize_loads(loads: &[f64]) -> Result<LoadSummary> {
    let samplers = LoadKind::ALL
        .iter()
        .map(|&k| {
            let d = LoadDistribution::new(k, loads)?;
            let (lo, hi) = d.support();
            Ok(SamplerSummary { kind: k, lo, hi: hi.is_finite().then_some(hi) })
        })
        .collect::<Result<Vec<_>>>()?;
    let d = LoadDistribution::new(LoadKind::Gaussian, loads)?;
    Ok(LoadSummary { loads: d.dataset_loads().to_vec(), mean: d.mean(), std: d.std(), samplers })
}

/// Static SVG: histogram of dataset loads with each sampler's support drawn
/// as a horizontal bar beneath it.
pub fn render_load_svg(summary: &LoadSummary) -> String {
    const W: f64 = 720.0;
    const PLOT_H: f64 = 260.0;
    const LEFT: f64 = 90.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 30.0;
    const BINS: usize = 20;
    let loads = &summary.loads;
    let max_load = loads.iter().copied().fold(0.0, f64::max);
    let gauss_hi = summary.mean + 3.0 * summary.std;
    let x_max = max_load.max(gauss_hi).max(1.0);
    let sx = |v: f64| LEFT + (v / x_max) * (W - LEFT - RIGHT);

    let mut counts = [0usize; BINS];
    for &v in loads {
        let b = ((v / x_max) * BINS as f64) as usize;
        counts[b.min(BINS - 1)] += 1;
    }
    let peak = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    let bar_rows = summary.samplers.len() as f64;
    let h = TOP + PLOT_H + 40.0 + bar_rows * 22.0 + 30.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<text x="{LEFT}" y="18">Dataset lesion load (mm³), n = {}</text>"#, loads.len());
    let bin_w = (W - LEFT - RIGHT) / BINS as f64;
    for (b, &c) in counts.iter().enumerate() {
        let bh = c as f64 / peak * PLOT_H;
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#8aa9c9" stroke="#34506e"/>"##,
            LEFT + b as f64 * bin_w,
            TOP + PLOT_H - bh,
            bin_w,
            bh
        );
    }
    let axis_y = TOP + PLOT_H;
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{axis_y}" x2="{}" y2="{axis_y}" stroke="black"/>"#, W - RIGHT);
    for k in 0..=4 {
        let v = x_max * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.0}</text>"#, sx(v), axis_y + 16.0);
    }
    let colors = ["#2b8a3e", "#e67700", "#c92a2a", "#1864ab", "#862e9c", "#495057"];
    for (row, sampler) in summary.samplers.iter().enumerate() {
        let y = axis_y + 40.0 + row as f64 * 22.0;
        let (lo, hi) = match sampler.hi {
            Some(hi) => (sampler.lo, hi),
            None => ((summary.mean - 2.0 * summary.std).max(0.0), summary.mean + 2.0 * summary.std),
        };
        let color = colors[row % colors.len()];
        let _ = writeln!(s, r#"<text x="8" y="{:.2}">{}</text>"#, y + 4.0, sampler.kind.name());
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="10" fill="{color}" fill-opacity="0.7"/>"#,
            sx(lo),
            y - 5.0,
            (sx(hi) - sx(lo)).max(1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn percentile_examples() {
        let five = [10.0, 20.0, 30.0, 40.0, 50.0];
        assert_eq!(percentile(&five, 25.0), 20.0);
        let hundred: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((percentile(&hundred, 5.0) - 5.95).abs() < 1e-12);
        assert!((percentile(&hundred, 25.0) - 25.75).abs() < 1e-12);
        assert_eq!(percentile(&[7.0], 95.0), 7.0);
        assert_eq!(percentile(&five, 100.0), 50.0);
        assert_eq!(percentile(&five, 0.0), 10.0);
    }

    #[test]
    fn real_and_singleton() {
        let d = LoadDistribution::new(LoadKind::Real, &[42.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| d.sample(&mut rng) == 42.0));
        for k in LoadKind::ALL {
            let d = LoadDistribution::new(k, &[42.0]).unwrap();
            if k != LoadKind::Gaussian {
                assert_eq!(d.sample(&mut rng), 42.0);
            }
        }
        assert!(LoadDistribution::new(LoadKind::Low, &[]).is_err());
        assert!(LoadDistribution::new(LoadKind::Low, &[-1.0]).is_err());
    }

    #[test]
    fn low_draws_stay_in_percentile_band() {
        let loads: Vec<f64> = (1..=100).map(f64::from).collect();
        let d = LoadDistribution::new(LoadKind::Low, &loads).unwrap();
        let (lo, hi) = d.support();
        assert!((lo - 5.95).abs() < 1e-12 && (hi - 25.75).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let v = d.sample(&mut rng);
            assert!(v >= lo && v <= hi);
        }
    }

    #[test]
    fn supports_nest_inside_uniform() {
        let loads: Vec<f64> = (0..57).map(|i| ((i * 37) % 101) as f64 * 3.5).collect();
        let (ulo, uhi) = LoadDistribution::new(LoadKind::Uniform, &loads).unwrap().support();
        for k in [LoadKind::Low, LoadKind::Medium, LoadKind::High] {
            let (lo, hi) = LoadDistribution::new(k, &loads).unwrap().support();
            assert!(ulo <= lo && lo <= hi && hi <= uhi, "{k:?}");
        }
    }

    #[test]
    fn gaussian_truncates_at_zero() {
        let d = LoadDistribution::new(LoadKind::Gaussian, &[0.0, 0.0, 0.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..5000).all(|_| d.sample(&mut rng) >= 0.0));
    }

    #[test]
    fn map_normalizes_and_samples_support() {
        let w =
            Grid::from_fn([5, 4, 3], [1.0; 3], |x, y, z| if x == 2 && y == 1 && z == 0 { 3.0 } else { 0.0 }).unwrap();
        let map = LikelihoodMap::from_weights(&w).unwrap();
        assert_eq!(map.probs().get(2, 1, 0), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!((0..200).all(|_| map.sample_voxel(&mut rng) == [2, 1, 0]));

        let two = Grid::from_fn([4, 1, 1], [1.0; 3], |x, _, _| if x == 0 || x == 3 { 1.0 } else { 0.0 }).unwrap();
        let map = LikelihoodMap::from_weights(&two).unwrap();
        assert_eq!(map.probs().data(), &[0.5, 0.0, 0.0, 0.5]);

        let zero = Grid::filled([3, 3, 3], [1.0; 3], 0.0).unwrap();
        assert!(matches!(LikelihoodMap::from_weights(&zero), Err(Error::EmptyMap)));
    }

    #[test]
    fn map_mode_parsing() {
        assert_eq!("lesion".parse::<MapMode>().unwrap(), MapMode::LesionSum);
        assert_eq!("organ:7".parse::<MapMode>().unwrap(), MapMode::OrganLabel(7));
        assert!("organ:x".parse::<MapMode>().is_err());
        assert_eq!(MapMode::OrganLabel(3).to_string(), "organ:3");
    }

    #[test]
    fn svg_lists_every_sampler() {
        let loads: Vec<f64> = (0..30).map(|i| i as f64 * 10.0).collect();
        let svg = render_load_svg(&summarize_loads(&loads).unwrap());
        assert!(svg.starts_with("<svg"));
        for k in LoadKind::ALL {
            assert!(svg.contains(&format!(">{}</text>", k.name())));
        }
    }
}
