//! Lesion-level augmentation of a single lesion patch.
//!
//! Spatial steps (flip, rotate, scale, elastic) are composed into one inverse
//! map and applied in a single resampling pass: intensities are trilinear,
//! the mask is nearest-neighbour. Brightness then noise follow, inside the
//! mask only. All geometry is in voxel units.
//!
//! Noise is defined in z-score units of the donor image's foreground: a draw
//! `z ~ N(0, noise_std)` adds `z * foreground_std` in raw intensity units.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid, Volume3D};
use crate::lesions::{IntensityStats, LesionInstance};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Flip,
    Rotate,
    Scale,
    Elastic,
    Brightness,
    Noise,
}

/// Order in which the augmentations are composed.
pub const APPLIED_ORDER: [Step; 6] =
    [Step::Flip, Step::Rotate, Step::Scale, Step::Elastic, Step::Brightness, Step::Noise];

/// Sampling ranges and probabilities of the per-lesion augmentation steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformRanges {
    pub flip_p: f64,
    pub rotate_p: f64,
    pub rotate_deg: [f64; 2],
    pub scale: [f64; 2],
    pub elastic_sigma: [f64; 2],
    pub elastic_grid: usize,
    pub elastic_span: f64,
    pub brightness: [f64; 2],
    /// Standard deviation of the additive noise in z-score units; 0 disables it.
    pub noise_std: f64,
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            rotate_p: 0.5,
            rotate_deg: [1.0, 89.0],
            scale: [0.5, 1.8],
            elastic_sigma: [3.0, 7.0],
            elastic_grid: 4,
            elastic_span: 1.25,
            brightness: [0.9, 1.1],
            noise_std: 1.0,
        }
    }
}

impl TransformRanges {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be a probability, got {p}")))
            }
        };
        let range = |name: &str, r: [f64; 2], min: f64| {
            if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && r[0] >= min {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} range {r:?} is invalid")))
            }
        };
        prob("flip_p", self.flip_p)?;
        prob("rotate_p", self.rotate_p)?;
        range("rotate_deg", self.rotate_deg, 0.0)?;
        range("scale", self.scale, f64::MIN_POSITIVE)?;
        range("elastic_sigma", self.elastic_sigma, 0.0)?;
        range("brightness", self.brightness, 0.0)?;
        if self.elastic_grid < 2 {
            return Err(Error::Config(format!("elastic_grid must be at least 2, got {}", self.elastic_grid)));
        }
        if !(self.elastic_span.is_finite() && self.elastic_span > 0.0) {
            return Err(Error::Config(format!("elastic_span must be positive, got {}", self.elastic_span)));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std must be non-negative, got {}", self.noise_std)));
        }
        Ok(())
    }
}

/// Random deformation grid: `grid³` control points, each with a displacement in voxels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    pub sigma: f64,
    pub grid: usize,
    /// Control grid extent relative to the pre-deformation output box.
    pub span: f64,
    /// x-fastest control point order.
    pub displacements: Vec<[f64; 3]>,
}

impl ElasticParams {
    pub fn none() -> Self {
        Self { sigma: 0.0, grid: 2, span: 1.0, displacements: vec![[0.0; 3]; 8] }
    }

    fn is_identity(&self) -> bool {
        self.displacements.iter().all(|d| d.iter().all(|&c| c == 0.0))
    }

    fn max_abs(&self) -> [f64; 3] {
        let mut m = [0.0f64; 3];
        for d in &self.displacements {
            for a in 0..3 {
                m[a] = m[a].max(d[a].abs());
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub flip: [bool; 3],
    /// Signed angle in degrees per axis, `None` when that rotation is inactive.
    pub rotate_deg: [Option<f64>; 3],
    pub scale: [f64; 3],
    pub elastic: ElasticParams,
    pub brightness: f64,
    pub noise_seed: u64,
    pub noise_std: f64,
}

impl TransformParams {
    pub fn identity() -> Self {
        Self {
            flip: [false; 3],
            rotate_deg: [None; 3],
            scale: [1.0; 3],
            elastic: ElasticParams::none(),
            brightness: 1.0,
            noise_seed: 0,
            noise_std: 0.0,
        }
    }
}

/// Draws one parameter set. Each flip and rotation axis is independently
/// active with its probability; active rotations get a random sign.
pub fn draw_params<R: Rng + ?Sized>(rng: &mut R, ranges: &TransformRanges) -> TransformParams {
    let uniform = |rng: &mut R, r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..=r[1]) };
    let flip = [rng.random_bool(ranges.flip_p), rng.random_bool(ranges.flip_p), rng.random_bool(ranges.flip_p)];
    let mut rotate_deg = [None; 3];
    for r in rotate_deg.iter_mut() {
        if rng.random_bool(ranges.rotate_p) {
            let magnitude = uniform(rng, ranges.rotate_deg);
            *r = Some(if rng.random_bool(0.5) { -magnitude } else { magnitude });
        }
    }
    let scale = [uniform(rng, ranges.scale), uniform(rng, ranges.scale), uniform(rng, ranges.scale)];
    let sigma = uniform(rng, ranges.elastic_sigma);
    let g = ranges.elastic_grid;
    let displacements = (0..g * g * g)
        .map(|_| {
            let mut d = [0.0; 3];
            for c in d.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *c = z * sigma;
            }
            d
        })
        .collect();
    let brightness = uniform(rng, ranges.brightness);
    let noise_seed = rng.random::<u64>();
    TransformParams {
        flip,
        rotate_deg,
        scale,
        elastic: ElasticParams { sigma, grid: g, span: ranges.elastic_span, displacements },
        brightness,
        noise_seed,
        noise_std: ranges.noise_std,
    }
}

type Mat3 = [[f64; 3]; 3];

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn apply(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn rotation(axis: usize, degrees: f64) -> Mat3 {
    let (s, c) = degrees.to_radians().sin_cos();
    match axis {
        0 => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        1 => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        _ => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

/// Forward linear part (scale ∘ rotate ∘ flip) and its inverse.
fn linear_maps(params: &TransformParams) -> Result<(Mat3, Mat3)> {
    if params.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidParameter(format!("scale factors must be positive, got {:?}", params.scale)));
    }
    let mut flip = IDENTITY;
    for a in 0..3 {
        if params.flip[a] {
            flip[a][a] = -1.0;
        }
    }
    // x rotation is applied first.
    let mut rot = IDENTITY;
    let mut rot_t = IDENTITY;
    for a in 0..3 {
        if let Some(deg) = params.rotate_deg[a] {
            let r = rotation(a, deg);
            rot = matmul(&r, &rot);
            let mut t = r;
            for i in 0..3 {
                for j in 0..3 {
                    t[i][j] = r[j][i];
                }
            }
            rot_t = matmul(&rot_t, &t);
        }
    }
    let mut scale = IDENTITY;
    let mut scale_inv = IDENTITY;
    for a in 0..3 {
        scale[a][a] = params.scale[a];
        scale_inv[a][a] = 1.0 / params.scale[a];
    }
    let forward = matmul(&scale, &matmul(&rot, &flip));
    let inverse = matmul(&flip, &matmul(&rot_t, &scale_inv));
    Ok((forward, inverse))
}

/// Trilinear displacement lookup on the control grid, clamped at its border.
struct DisplacementField<'a> {
    params: &'a ElasticParams,
    origin: [f64; 3],
    step: [f64; 3],
}

impl DisplacementField<'_> {
    fn at(&self, u: [f64; 3]) -> [f64; 3] {
        let g = self.params.grid;
        let mut i0 = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let s = if self.step[a] > 0.0 { (u[a] - self.origin[a]) / self.step[a] } else { 0.0 };
            let s = s.clamp(0.0, (g - 1) as f64);
            let f = (s.floor() as usize).min(g - 2);
            i0[a] = f;
            t[a] = s - f as f64;
        }
        let mut out = [0.0; 3];
        for corner in 0..8 {
            let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let w = (0..3).map(|a| if o[a] == 1 { t[a] } else { 1.0 - t[a] }).product::<f64>();
            if w == 0.0 {
                continue;
            }
            let idx = (i0[0] + o[0]) + g * ((i0[1] + o[1]) + g * (i0[2] + o[2]));
            let d = self.params.displacements[idx];
            for a in 0..3 {
                out[a] += w * d[a];
            }
        }
        out
    }
}

fn trilinear(vol: &Volume3D, p: [f64; 3]) -> f64 {
    let dims = vol.dims();
    let mut i0 = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let c = p[a].clamp(0.0, (dims[a] - 1) as f64);
        let f = c.floor() as usize;
        i0[a] = f.min(dims[a] - 1);
        t[a] = c - i0[a] as f64;
    }
    if t == [0.0; 3] {
        return vol.get(i0[0], i0[1], i0[2]);
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let w = (0..3).map(|a| if o[a] == 1 { t[a] } else { 1.0 - t[a] }).product::<f64>();
        if w == 0.0 {
            continue;
        }
        let q = [(i0[0] + o[0]).min(dims[0] - 1), (i0[1] + o[1]).min(dims[1] - 1), (i0[2] + o[2]).min(dims[2] - 1)];
        acc += w * vol.get(q[0], q[1], q[2]);
    }
    acc
}

/// Resamples the patch through flip, rotate, scale and elastic in one pass.
/// The output is cropped to the tight box of the transformed mask.
pub fn apply_spatial(patch: &Volume3D, mask: &BinaryMask, params: &TransformParams) -> Result<(Volume3D, BinaryMask)> {
    if !patch.same_dims(mask) {
        return Err(Error::Shape(format!("patch {:?} vs mask {:?}", patch.dims(), mask.dims())));
    }
    if mask.count() == 0 {
        return Err(Error::InvalidParameter("cannot transform an empty lesion patch".into()));
    }
    let el = &params.elastic;
    if el.grid < 2 || el.displacements.len() != el.grid.pow(3) {
        return Err(Error::InvalidParameter(format!(
            "elastic grid {} needs {} displacements, got {}",
            el.grid,
            el.grid.pow(3),
            el.displacements.len()
        )));
    }
    let (forward, inverse) = linear_maps(params)?;
    let n = patch.dims();
    let c_in = [(n[0] - 1) as f64 / 2.0, (n[1] - 1) as f64 / 2.0, (n[2] - 1) as f64 / 2.0];

    // Half extent of the source box (voxel edges) after the linear map.
    let mut half = [0.0f64; 3];
    for corner in 0..8 {
        let v = [
            if corner & 1 == 1 { 0.5 } else { -0.5 } * n[0] as f64,
            if corner & 2 == 2 { 0.5 } else { -0.5 } * n[1] as f64,
            if corner & 4 == 4 { 0.5 } else { -0.5 } * n[2] as f64,
        ];
        let w = apply(&forward, v);
        for a in 0..3 {
            half[a] = half[a].max(w[a].abs());
        }
    }
    let elastic = !el.is_identity();
    let margin = if elastic { el.max_abs() } else { [0.0; 3] };
    let mut out_dims = [0usize; 3];
    for a in 0..3 {
        out_dims[a] = ((2.0 * (half[a] + margin[a]) - 1e-9).ceil() as usize).max(1);
    }
    let c_out = [(out_dims[0] - 1) as f64 / 2.0, (out_dims[1] - 1) as f64 / 2.0, (out_dims[2] - 1) as f64 / 2.0];
    let field = DisplacementField {
        params: el,
        origin: [-el.span * half[0], -el.span * half[1], -el.span * half[2]],
        step: [
            2.0 * el.span * half[0] / (el.grid - 1) as f64,
            2.0 * el.span * half[1] / (el.grid - 1) as f64,
            2.0 * el.span * half[2] / (el.grid - 1) as f64,
        ],
    };

    let total = out_dims[0] * out_dims[1] * out_dims[2];
    let mut values = Vec::with_capacity(total);
    let mut support = Vec::with_capacity(total);
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let mut u = [x as f64 - c_out[0], y as f64 - c_out[1], z as f64 - c_out[2]];
                if elastic {
                    let d = field.at(u);
                    u = [u[0] + d[0], u[1] + d[1], u[2] + d[2]];
                }
                let s = apply(&inverse, u);
                let p = [c_in[0] + s[0], c_in[1] + s[1], c_in[2] + s[2]];
                values.push(trilinear(patch, p));
                let r = [p[0].round(), p[1].round(), p[2].round()];
                let inside = (0..3).all(|a| r[a] >= 0.0 && r[a] <= (n[a] - 1) as f64);
                support.push(inside && mask.get(r[0] as usize, r[1] as usize, r[2] as usize));
            }
        }
    }
    let out_mask = Grid::from_parts_unchecked(out_dims, mask.spacing(), support);
    let bbox = out_mask.bbox().ok_or(Error::DegenerateTransform)?;
    let out_vol = Grid::from_parts_unchecked(out_dims, patch.spacing(), values);
    Ok((out_vol.crop(&bbox), out_mask.crop(&bbox)))
}

/// Brightness then additive noise, on mask voxels only.
pub fn apply_intensity(
    patch: &Volume3D,
    mask: &BinaryMask,
    params: &TransformParams,
    stats: &IntensityStats,
) -> Result<Volume3D> {
    if !patch.same_dims(mask) {
        return Err(Error::Shape(format!("patch {:?} vs mask {:?}", patch.dims(), mask.dims())));
    }
    if !(stats.std.is_finite() && stats.std > 0.0) {
        return Err(Error::InvalidParameter(format!("normalization std must be positive, got {}", stats.std)));
    }
    let mut noise = ChaCha8Rng::seed_from_u64(params.noise_seed);
    let data = patch
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| {
            if !m {
                return v;
            }
            let mut out = v * params.brightness;
            if params.noise_std > 0.0 {
                let z: f64 = noise.sample(StandardNormal);
                out += z * params.noise_std * stats.std;
            }
            out
        })
        .collect();
    Grid::new(patch.dims(), patch.spacing(), data)
}

/// Full lesion-level augmentation of a bank instance: spatial, then intensity.
pub fn augment_lesion(instance: &LesionInstance, params: &TransformParams) -> Result<(Volume3D, BinaryMask)> {
    let (vol, mask) = apply_spatial(&instance.patch_intensity, &instance.patch_mask, params)?;
    let vol = apply_intensity(&vol, &mask, params, &instance.source_stats)?;
    Ok((vol, mask))
}
