//! Fixtures and statistics helpers shared by the integration test targets.

#![allow(dead_code)]

pub mod fmm_oracle;

use std::path::{Path, PathBuf};

use lesionforge::grid::{BinaryMask, Grid, Volume3D};
use lesionforge::io::{write_mask, write_volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Upper 1% point of the chi-square distribution with 999 degrees of freedom.
pub const CHI2_999_Q99: f64 = 1105.9169575045823;
/// Upper 1% point of the chi-square distribution with 199 degrees of freedom.
pub const CHI2_199_Q99: f64 = 248.32859572006595;
/// Upper 1% point of the chi-square distribution with 9 degrees of freedom.
pub const CHI2_9_Q99: f64 = 21.665994333461924;
/// Upper 1% point of the Kolmogorov distribution; divide by sqrt(n).
pub const KOLMOGOROV_Q99: f64 = 1.6276236115189502;

/// Largest gap between the empirical CDF of `samples` and `cdf`.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

pub fn ks_uniform_passes(samples: &mut [f64], lo: f64, hi: f64) -> (bool, f64, f64) {
    let d = ks_statistic(samples, |x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0));
    let crit = KOLMOGOROV_Q99 / (samples.len() as f64).sqrt();
    (d <= crit, d, crit)
}

pub fn chi_square(counts: &[u64], expected: &[f64]) -> f64 {
    counts.iter().zip(expected).map(|(&c, &e)| (c as f64 - e).powi(2) / e).sum()
}

/// Whether `hits` of `n` Bernoulli(p) trials lie within three standard deviations.
pub fn within_three_sigma(hits: u64, n: u64, p: f64) -> bool {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (hits as f64 - mean).abs() <= 3.0 * sd
}

pub fn ball(dims: [usize; 3], center: [f64; 3], radius: f64) -> BinaryMask {
    Grid::from_fn(dims, [1.0; 3], |x, y, z| {
        let d = [x as f64 - center[0], y as f64 - center[1], z as f64 - center[2]];
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= radius * radius
    })
    .unwrap()
}

/// A brain-like phantom: textured ellipsoid of "tissue" on a zero background
/// with `lesions` bright spherical lesions inside it.
pub fn phantom(dims: [usize; 3], lesions: usize, radius: (f64, f64), rng: &mut ChaCha8Rng) -> (Volume3D, BinaryMask) {
    let c = [(dims[0] as f64 - 1.0) / 2.0, (dims[1] as f64 - 1.0) / 2.0, (dims[2] as f64 - 1.0) / 2.0];
    let semi = [dims[0] as f64 * 0.42, dims[1] as f64 * 0.42, dims[2] as f64 * 0.42];
    let inside = |x: f64, y: f64, z: f64| {
        let q = [(x - c[0]) / semi[0], (y - c[1]) / semi[1], (z - c[2]) / semi[2]];
        q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= 1.0
    };
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut image = Grid::from_fn(dims, [1.0; 3], |x, y, z| {
        if inside(x as f64, y as f64, z as f64) {
            100.0 + 8.0 * ((x as f64 * 0.37 + phase).sin() + (y as f64 * 0.23).cos() + (z as f64 * 0.31 + phase).sin())
        } else {
            0.0
        }
    })
    .unwrap();
    let mut mask = image.like(false);
    for _ in 0..lesions {
        let r = rng.random_range(radius.0..=radius.1);
        let center = loop {
            let p = [
                rng.random_range(0.0..dims[0] as f64),
                rng.random_range(0.0..dims[1] as f64),
                rng.random_range(0.0..dims[2] as f64),
            ];
            let q = [(p[0] - c[0]) / (semi[0] - r), (p[1] - c[1]) / (semi[1] - r), (p[2] - c[2]) / (semi[2] - r)];
            if q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= 1.0 {
                break p;
            }
        };
        let b = ball(dims, center, r);
        let contrast: f64 = rng.random_range(50.0..80.0);
        let (img, m) = (image.clone(), mask.clone());
        image = Grid::from_fn(dims, [1.0; 3], |x, y, z| {
            let v = img.get(x, y, z);
            if b.get(x, y, z) {
                v + contrast
            } else {
                v
            }
        })
        .unwrap();
        mask = Grid::from_fn(dims, [1.0; 3], |x, y, z| m.get(x, y, z) || b.get(x, y, z)).unwrap();
    }
    (image, mask)
}

pub struct SyntheticDataset {
    pub subjects: usize,
    pub dims: [usize; 3],
    pub lesions: (usize, usize),
    pub radius: (f64, f64),
    pub seed: u64,
    pub extension: &'static str,
    /// Fixed per-subject lesion counts; overrides `lesions` and `subjects` when set.
    pub counts: Option<Vec<usize>>,
}

impl Default for SyntheticDataset {
    fn default() -> Self {
        Self {
            subjects: 6,
            dims: [40, 40, 32],
            lesions: (0, 6),
            radius: (1.5, 3.5),
            seed: 1,
            extension: ".nii.gz",
            counts: None,
        }
    }
}

/// Writes a synthetic co-registered dataset and its manifest; returns the manifest path.
pub fn write_dataset(dir: &Path, layout: &SyntheticDataset) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(layout.seed);
    let mut lines = String::new();
    let subjects = layout.counts.as_ref().map_or(layout.subjects, Vec::len);
    for s in 0..subjects {
        let n = match &layout.counts {
            Some(c) => c[s],
            None => rng.random_range(layout.lesions.0..=layout.lesions.1),
        };
        let (image, mask) = phantom(layout.dims, n, layout.radius, &mut rng);
        let img_name = format!("sub{s:02}_img{}", layout.extension);
        let seg_name = format!("sub{s:02}_seg{}", layout.extension);
        write_volume(&image, &dir.join(&img_name)).unwrap();
        write_mask(&mask.to_labels(1), &dir.join(&seg_name)).unwrap();
        lines.push_str(&format!("{{\"image\":\"{img_name}\",\"mask\":\"{seg_name}\",\"subject\":\"sub{s:02}\"}}\n"));
    }
    let manifest = dir.join("dataset.jsonl");
    std::fs::write(&manifest, lines).unwrap();
    manifest
}

/// Sorted (relative path, bytes) of every file below `dir`.
pub fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}
