//! Lesion removal: Telea fast-marching inpainting of each axial slice, then a
//! Gaussian blend on the dilated lesion boundary to restore continuity along z.
//!
//! Marching details:
//! * pixels outside the hole start KNOWN with `T = 0`; those 4-adjacent to the
//!   hole form the initial band;
//! * the band is a min-heap on `(T, raster index)` with lazy deletion;
//! * `T` comes from the first-order upwind quadratic on the 4-neighbourhood,
//!   using KNOWN neighbours only;
//! * a hole pixel is filled once, when it enters the band, from every
//!   non-hole pixel within `radius` (KNOWN or already in the band).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{gaussian_blur_3d, gaussian_kernel, mask_subtract, shell_of, BBox, BinaryMask, Volume3D};

pub const DEFAULT_RADIUS: usize = 5;
pub const DEFAULT_BLUR_SIGMA: f64 = 1.0;

const DIR_EPS: f64 = 1e-6;
const GRAD_T_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelState {
    Known,
    Band,
    Inside,
}

#[derive(Clone, Copy, Debug)]
struct BandEntry {
    t: f64,
    idx: usize,
}

impl PartialEq for BandEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for BandEntry {}

impl PartialOrd for BandEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for BandEntry {
    // Reversed so that `BinaryHeap` pops the smallest (T, idx) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then_with(|| other.idx.cmp(&self.idx))
    }
}

/// Order in which pixels were finalized, with their arrival times.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MarchTrace {
    pub pops: Vec<(usize, f64)>,
}

struct Marcher<'a> {
    nx: usize,
    ny: usize,
    radius: isize,
    state: Vec<PixelState>,
    t: Vec<f64>,
    values: &'a mut [f64],
}

impl Marcher<'_> {
    #[inline]
    fn valued(&self, x: isize, y: isize) -> Option<usize> {
        if x < 0 || y < 0 || x >= self.nx as isize || y >= self.ny as isize {
            return None;
        }
        let i = x as usize + self.nx * y as usize;
        (self.state[i] != PixelState::Inside).then_some(i)
    }

    #[inline]
    fn known_t(&self, x: isize, y: isize) -> Option<f64> {
        if x < 0 || y < 0 || x >= self.nx as isize || y >= self.ny as isize {
            return None;
        }
        let i = x as usize + self.nx * y as usize;
        (self.state[i] == PixelState::Known).then_some(self.t[i])
    }

    fn solve(&self, x: isize, y: isize) -> f64 {
        let pair = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => {
                let d = a - b;
                if d.abs() >= 1.0 {
                    1.0 + a.min(b)
                } else {
                    (a + b + (2.0 - d * d).sqrt()) / 2.0
                }
            }
            (Some(a), None) => 1.0 + a,
            (None, Some(b)) => 1.0 + b,
            (None, None) => f64::INFINITY,
        };
        let (l, r) = (self.known_t(x - 1, y), self.known_t(x + 1, y));
        let (u, d) = (self.known_t(x, y - 1), self.known_t(x, y + 1));
        pair(l, u).min(pair(r, u)).min(pair(l, d)).min(pair(r, d))
    }

    /// One-sided or central difference of `field` along an axis over valued pixels.
    fn difference(&self, field: &[f64], x: isize, y: isize, dx: isize, dy: isize, center: f64) -> f64 {
        match (self.valued(x - dx, y - dy), self.valued(x + dx, y + dy)) {
            (Some(a), Some(b)) => (field[b] - field[a]) / 2.0,
            (None, Some(b)) => field[b] - center,
            (Some(a), None) => center - field[a],
            (None, None) => 0.0,
        }
    }

    fn fill(&mut self, x: isize, y: isize) {
        let p = x as usize + self.nx * y as usize;
        let tp = self.t[p];
        let gtx = self.difference(&self.t, x, y, 1, 0, tp);
        let gty = self.difference(&self.t, x, y, 0, 1, tp);
        let gnorm = (gtx * gtx + gty * gty).sqrt();
        let r = self.radius;
        let r2 = r * r;
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for oy in -r..=r {
            for ox in -r..=r {
                if ox * ox + oy * oy > r2 || (ox == 0 && oy == 0) {
                    continue;
                }
                let (qx, qy) = (x + ox, y + oy);
                let Some(q) = self.valued(qx, qy) else { continue };
                let (rx, ry) = ((x - qx) as f64, (y - qy) as f64);
                let len2 = rx * rx + ry * ry;
                let dir =
                    if gnorm < GRAD_T_EPS { 1.0 } else { ((gtx * rx + gty * ry) / (gnorm * len2.sqrt())).max(DIR_EPS) };
                let dst = 1.0 / len2;
                let lev = 1.0 / (1.0 + (self.t[q] - tp).abs());
                let w = dir * dst * lev;
                let iq = self.values[q];
                let gix = self.difference(self.values, qx, qy, 1, 0, iq);
                let giy = self.difference(self.values, qx, qy, 0, 1, iq);
                acc += w * (iq + gix * rx + giy * ry);
                wsum += w;
            }
        }
        self.values[p] = acc / wsum;
    }
}

fn march(
    values: &[f64],
    hole: &[bool],
    dims: [usize; 2],
    radius: usize,
    trace: Option<&mut MarchTrace>,
) -> Result<Vec<f64>> {
    let [nx, ny] = dims;
    if values.len() != nx * ny || hole.len() != nx * ny {
        return Err(Error::Shape(format!(
            "slice {nx}x{ny} with {} values and {} mask entries",
            values.len(),
            hole.len()
        )));
    }
    if radius == 0 {
        return Err(Error::InvalidParameter("inpaint radius must be at least 1".into()));
    }
    if let Some(v) = values.iter().zip(hole).find(|(v, h)| !**h && !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("slice contains a non-finite value {}", v.0)));
    }
    let mut out = values.to_vec();
    if !hole.iter().any(|&h| h) {
        return Ok(out);
    }
    if hole.iter().all(|&h| h) {
        return Err(Error::NoBoundarySeed { slice: 0 });
    }

    let mut state: Vec<PixelState> =
        hole.iter().map(|&h| if h { PixelState::Inside } else { PixelState::Known }).collect();
    let t: Vec<f64> = hole.iter().map(|&h| if h { f64::INFINITY } else { 0.0 }).collect();
    let mut heap = BinaryHeap::new();
    for y in 0..ny {
        for x in 0..nx {
            let i = x + nx * y;
            if hole[i] {
                continue;
            }
            let touches = (x > 0 && hole[i - 1])
                || (x + 1 < nx && hole[i + 1])
                || (y > 0 && hole[i - nx])
                || (y + 1 < ny && hole[i + nx]);
            if touches {
                state[i] = PixelState::Band;
                heap.push(BandEntry { t: 0.0, idx: i });
            }
        }
    }

    let mut m = Marcher { nx, ny, radius: radius as isize, state, t, values: &mut out };
    let mut trace = trace;
    while let Some(BandEntry { t, idx }) = heap.pop() {
        if m.state[idx] != PixelState::Band || m.t[idx] != t {
            continue;
        }
        m.state[idx] = PixelState::Known;
        if let Some(tr) = trace.as_deref_mut() {
            tr.pops.push((idx, t));
        }
        let (x, y) = ((idx % nx) as isize, (idx / nx) as isize);
        for (dx, dy) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
            let (qx, qy) = (x + dx, y + dy);
            if qx < 0 || qy < 0 || qx >= nx as isize || qy >= ny as isize {
                continue;
            }
            let q = qx as usize + nx * qy as usize;
            match m.state[q] {
                PixelState::Inside => {
                    m.t[q] = m.solve(qx, qy);
                    m.fill(qx, qy);
                    m.state[q] = PixelState::Band;
                    heap.push(BandEntry { t: m.t[q], idx: q });
                }
                PixelState::Band => {
                    let s = m.solve(qx, qy);
                    if s < m.t[q] {
                        m.t[q] = s;
                        heap.push(BandEntry { t: s, idx: q });
                    }
                }
                PixelState::Known => {}
            }
        }
    }
    Ok(out)
}

/// Fills the `hole` pixels of an x-fastest `dims[0]` × `dims[1]` slice.
/// Pixels outside the hole are returned unchanged.
pub fn inpaint_slice(values: &[f64], hole: &[bool], dims: [usize; 2], radius: usize) -> Result<Vec<f64>> {
    march(values, hole, dims, radius, None)
}

/// [`inpaint_slice`] that also reports the marching order.
pub fn inpaint_slice_traced(
    values: &[f64],
    hole: &[bool],
    dims: [usize; 2],
    radius: usize,
) -> Result<(Vec<f64>, MarchTrace)> {
    let mut trace = MarchTrace::default();
    let out = march(values, hole, dims, radius, Some(&mut trace))?;
    Ok((out, trace))
}

/// Slice index, filled crop values and the crop's hole mask.
type FilledSlice = (usize, Vec<f64>, Vec<bool>);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InpaintSettings {
    pub radius: usize,
    /// Blend sigma in voxels; 0 disables the boundary blend.
    pub blur_sigma: f64,
}

impl Default for InpaintSettings {
    fn default() -> Self {
        Self { radius: DEFAULT_RADIUS, blur_sigma: DEFAULT_BLUR_SIGMA }
    }
}

impl InpaintSettings {
    pub fn validate(&self) -> Result<()> {
        if self.radius == 0 {
            return Err(Error::InvalidParameter("inpaint radius must be at least 1".into()));
        }
        if !(self.blur_sigma.is_finite() && self.blur_sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!("blur sigma must be non-negative, got {}", self.blur_sigma)));
        }
        Ok(())
    }
}

/// Inpaints one lesion given as ascending flat voxel indices with its tight box.
/// Only lesion voxels and the dilated boundary shell are written.
pub(crate) fn inpaint_voxels(
    image: &mut Volume3D,
    lesion: &[usize],
    bbox: BBox,
    settings: &InpaintSettings,
) -> Result<()> {
    settings.validate()?;
    if lesion.is_empty() {
        return Ok(());
    }
    let dims = image.dims();
    let [nx, ny, _] = dims;

    // Lesion membership on the box grown by one voxel (room for the dilation).
    let b1 = bbox.expanded(1, dims);
    let e1 = b1.extent();
    let mut local = vec![false; e1[0] * e1[1] * e1[2]];
    for &i in lesion {
        let c = image.coords(i);
        local[(c[0] - b1.min[0]) + e1[0] * ((c[1] - b1.min[1]) + e1[1] * (c[2] - b1.min[2]))] = true;
    }
    let in_lesion = |x: usize, y: usize, z: usize| {
        b1.contains([x, y, z]) && local[(x - b1.min[0]) + e1[0] * ((y - b1.min[1]) + e1[1] * (z - b1.min[2]))]
    };

    // Per-slice marching on a crop large enough for the stencil and gradients.
    let margin = settings.radius + 1;
    let x0 = bbox.min[0].saturating_sub(margin);
    let x1 = (bbox.max[0] + margin).min(nx - 1);
    let y0 = bbox.min[1].saturating_sub(margin);
    let y1 = (bbox.max[1] + margin).min(ny - 1);
    let (cw, ch) = (x1 - x0 + 1, y1 - y0 + 1);
    let src = image.data();
    let results: Vec<Result<Option<FilledSlice>>> = (bbox.min[2]..=bbox.max[2])
        .into_par_iter()
        .map(|z| {
            let mut vals = Vec::with_capacity(cw * ch);
            let mut hole = Vec::with_capacity(cw * ch);
            for y in y0..=y1 {
                let row = nx * (y + ny * z);
                vals.extend_from_slice(&src[row + x0..=row + x1]);
                hole.extend((x0..=x1).map(|x| in_lesion(x, y, z)));
            }
            if !hole.iter().any(|&h| h) {
                return Ok(None);
            }
            let filled = inpaint_slice(&vals, &hole, [cw, ch], settings.radius).map_err(|e| match e {
                Error::NoBoundarySeed { .. } => Error::NoBoundarySeed { slice: z },
                other => other,
            })?;
            Ok(Some((z, filled, hole)))
        })
        .collect();
    let mut slices = Vec::with_capacity(results.len());
    for r in results {
        if let Some(s) = r? {
            slices.push(s);
        }
    }
    let data = image.data_mut();
    for (z, filled, hole) in slices {
        for cy in 0..ch {
            for cx in 0..cw {
                let ci = cx + cw * cy;
                if hole[ci] {
                    data[(x0 + cx) + nx * ((y0 + cy) + ny * z)] = filled[ci];
                }
            }
        }
    }

    if settings.blur_sigma == 0.0 {
        return Ok(());
    }
    // Dilated shell on the local box, then a local blur exact on that box.
    let shell = shell_of(e1, &local);
    let mut blend = shell.clone();
    for lz in 0..e1[2] {
        for ly in 0..e1[1] {
            for lx in 0..e1[0] {
                if !shell[lx + e1[0] * (ly + e1[1] * lz)] {
                    continue;
                }
                for (dx, dy, dz) in [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)] {
                    let (qx, qy, qz) = (lx as isize + dx, ly as isize + dy, lz as isize + dz);
                    if qx >= 0
                        && qy >= 0
                        && qz >= 0
                        && (qx as usize) < e1[0]
                        && (qy as usize) < e1[1]
                        && (qz as usize) < e1[2]
                    {
                        blend[qx as usize + e1[0] * (qy as usize + e1[1] * qz as usize)] = true;
                    }
                }
            }
        }
    }
    let kernel_radius = gaussian_kernel(settings.blur_sigma)?.len() / 2;
    let b2 = b1.expanded(kernel_radius, dims);
    let blurred = gaussian_blur_3d(&image.crop(&b2), settings.blur_sigma)?;
    let e2 = b2.extent();
    let data = image.data_mut();
    for lz in 0..e1[2] {
        for ly in 0..e1[1] {
            for lx in 0..e1[0] {
                if !blend[lx + e1[0] * (ly + e1[1] * lz)] {
                    continue;
                }
                let (x, y, z) = (b1.min[0] + lx, b1.min[1] + ly, b1.min[2] + lz);
                let bi = (x - b2.min[0]) + e2[0] * ((y - b2.min[1]) + e2[1] * (z - b2.min[2]));
                data[x + nx * (y + ny * z)] = blurred.data()[bi];
            }
        }
    }
    Ok(())
}

/// Removes `lesion_mask` from the image and from `full_mask`.
pub fn inpaint_lesion(
    image: &Volume3D,
    lesion_mask: &BinaryMask,
    full_mask: &BinaryMask,
    settings: &InpaintSettings,
) -> Result<(Volume3D, BinaryMask)> {
    if !image.same_dims(lesion_mask) || !image.same_dims(full_mask) {
        return Err(Error::Shape(format!(
            "image {:?}, lesion mask {:?}, full mask {:?}",
            image.dims(),
            lesion_mask.dims(),
            full_mask.dims()
        )));
    }
    let bbox = lesion_mask.bbox().ok_or_else(|| Error::InvalidParameter("lesion mask to inpaint is empty".into()))?;
    let remaining = mask_subtract(full_mask, lesion_mask)?;
    let voxels: Vec<usize> = lesion_mask.data().iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    let mut out = image.clone();
    inpaint_voxels(&mut out, &voxels, bbox, settings)?;
    Ok((out, remaining))
}

/// Dilated boundary shell of a lesion: the voxels the blend may touch.
pub fn blend_region(lesion_mask: &BinaryMask) -> BinaryMask {
    crate::grid::dilate_6(&crate::grid::boundary_shell(lesion_mask))
}

#[cfg(test)]
#[path = "../tests/common/fmm_oracle.rs"]
mod oracle;
