//! Insertion of an augmented lesion patch into a host image.
//!
//! The patch is anchored by its rounded mask centroid, cropped to the host
//! grid, blended into the host intensities with the soft weights of the
//! cropped support and united into the host mask. Voxels outside the placed
//! support are never written.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{mix_value, soft_weights_of, BBox, BinaryMask, Grid, Volume3D};
use crate::loadmodel::LikelihoodMap;

pub const DEFAULT_PLACEMENT_TRIES: usize = 25;

#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub center: [usize; 3],
    /// Part of the patch support falls outside the host grid.
    pub clipped: bool,
    pub host_subject: String,
}

/// What one insertion wrote into the host.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedRegion {
    /// Host-grid box of the placed support, `None` for an empty patch.
    pub bbox: Option<BBox>,
    /// Flat host indices of the placed support, ascending.
    pub voxels: Vec<usize>,
    /// Placed voxels that were background in the host mask before insertion.
    pub newly_added: usize,
}

/// Rounded centroid of a patch mask, in patch coordinates.
pub fn mask_anchor(mask: &BinaryMask) -> Option<[usize; 3]> {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for (i, &m) in mask.data().iter().enumerate() {
        if m {
            let c = mask.coords(i);
            for a in 0..3 {
                sum[a] += c[a] as f64;
            }
            n += 1;
        }
    }
    (n > 0).then(|| {
        let mut a = [0usize; 3];
        for k in 0..3 {
            a[k] = (sum[k] / n as f64).round() as usize;
        }
        a
    })
}

/// Host coordinate of patch voxel `p` when the anchor lands on `center`.
#[inline]
fn to_host(p: [usize; 3], anchor: [usize; 3], center: [usize; 3]) -> [isize; 3] {
    [
        center[0] as isize + p[0] as isize - anchor[0] as isize,
        center[1] as isize + p[1] as isize - anchor[1] as isize,
        center[2] as isize + p[2] as isize - anchor[2] as isize,
    ]
}

fn in_grid(h: [isize; 3], dims: [usize; 3]) -> bool {
    (0..3).all(|a| h[a] >= 0 && (h[a] as usize) < dims[a])
}

/// Number of patch support voxels that stay inside a grid of `dims` when
/// anchored at `center`.
pub fn retained_voxels(patch_mask: &BinaryMask, anchor: [usize; 3], center: [usize; 3], dims: [usize; 3]) -> usize {
    patch_mask
        .data()
        .iter()
        .enumerate()
        .filter(|(i, &m)| m && in_grid(to_host(patch_mask.coords(*i), anchor, center), dims))
        .count()
}

/// In-place insertion. `host_image` and `host_mask` are left untouched on error.
pub fn place_into(
    host_image: &mut Volume3D,
    host_mask: &mut BinaryMask,
    patch: &Volume3D,
    patch_mask: &BinaryMask,
    center: [usize; 3],
) -> Result<PlacedRegion> {
    let dims = host_image.dims();
    if !host_image.same_dims(host_mask) {
        return Err(Error::Shape(format!("host image {:?} vs host mask {:?}", dims, host_mask.dims())));
    }
    if !patch.same_dims(patch_mask) {
        return Err(Error::Shape(format!("patch {:?} vs patch mask {:?}", patch.dims(), patch_mask.dims())));
    }
    if (0..3).any(|a| center[a] >= dims[a]) {
        return Err(Error::Placement(format!("center {center:?} lies outside the host grid {dims:?}")));
    }
    let Some(anchor) = mask_anchor(patch_mask) else {
        return Ok(PlacedRegion { bbox: None, voxels: Vec::new(), newly_added: 0 });
    };

    let mut bbox: Option<BBox> = None;
    for (i, &m) in patch_mask.data().iter().enumerate() {
        if !m {
            continue;
        }
        let h = to_host(patch_mask.coords(i), anchor, center);
        if in_grid(h, dims) {
            let c = [h[0] as usize, h[1] as usize, h[2] as usize];
            match bbox.as_mut() {
                Some(b) => b.include(c),
                None => bbox = Some(BBox { min: c, max: c }),
            }
        }
    }
    let bbox =
        bbox.ok_or_else(|| Error::Placement(format!("patch support falls entirely outside the host at {center:?}")))?;

    // Placed support and patch values on the local box.
    let ext = bbox.extent();
    let local_len = ext[0] * ext[1] * ext[2];
    let mut support = vec![false; local_len];
    let mut values = vec![0.0; local_len];
    for (i, &m) in patch_mask.data().iter().enumerate() {
        if !m {
            continue;
        }
        let h = to_host(patch_mask.coords(i), anchor, center);
        if !in_grid(h, dims) {
            continue;
        }
        let l = [h[0] as usize - bbox.min[0], h[1] as usize - bbox.min[1], h[2] as usize - bbox.min[2]];
        let li = l[0] + ext[0] * (l[1] + ext[1] * l[2]);
        support[li] = true;
        values[li] = patch.data()[i];
    }
    let weights = soft_weights_of(ext, &support);

    let mut voxels = Vec::new();
    let mut newly_added = 0;
    let img = host_image.data_mut();
    for lz in 0..ext[2] {
        for ly in 0..ext[1] {
            for lx in 0..ext[0] {
                let li = lx + ext[0] * (ly + ext[1] * lz);
                if !support[li] {
                    continue;
                }
                let hi = (bbox.min[0] + lx) + dims[0] * ((bbox.min[1] + ly) + dims[1] * (bbox.min[2] + lz));
                img[hi] = mix_value(img[hi], values[li], weights[li]);
                voxels.push(hi);
            }
        }
    }
    let mask = host_mask.data_mut();
    for &hi in &voxels {
        if !mask[hi] {
            mask[hi] = true;
            newly_added += 1;
        }
    }
    Ok(PlacedRegion { bbox: Some(bbox), voxels, newly_added })
}

/// Pure insertion: returns the mixed image, the united mask and the placed support.
pub fn place_lesion(
    host_image: &Volume3D,
    host_mask: &BinaryMask,
    patch: &Volume3D,
    patch_mask: &BinaryMask,
    center: [usize; 3],
) -> Result<(Volume3D, BinaryMask, BinaryMask)> {
    let mut image = host_image.clone();
    let mut mask = host_mask.clone();
    let region = place_into(&mut image, &mut mask, patch, patch_mask, center)?;
    let mut placed = vec![false; host_mask.len()];
    for &i in &region.voxels {
        placed[i] = true;
    }
    Ok((image, mask, Grid::from_parts_unchecked(host_mask.dims(), host_mask.spacing(), placed)))
}

/// Draws a placement center from the map. A draw is retried when more than
/// half of the patch support would fall outside the grid; after `max_tries`
/// the last draw is kept.
pub fn sample_placement<R: Rng + ?Sized>(
    map: &LikelihoodMap,
    patch_mask: &BinaryMask,
    host_subject: &str,
    rng: &mut R,
    max_tries: usize,
) -> Result<Placement> {
    if max_tries == 0 {
        return Err(Error::InvalidParameter("placement needs at least one try".into()));
    }
    let total = patch_mask.count();
    let anchor = mask_anchor(patch_mask).unwrap_or([0; 3]);
    let mut last = None;
    for _ in 0..max_tries {
        let center = map.sample_voxel(rng);
        let kept = retained_voxels(patch_mask, anchor, center, map.dims());
        let placement = Placement { center, clipped: kept < total, host_subject: host_subject.to_string() };
        if 2 * kept >= total {
            return Ok(placement);
        }
        last = Some(placement);
    }
    Ok(last.expect("at least one draw"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{boundary_shell, BOUNDARY_WEIGHT};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn host(n: usize) -> (Volume3D, BinaryMask) {
        let img = Grid::from_fn([n, n, n], [1.0; 3], |x, y, z| (x * 3 + y * 5 + z * 7) as f64).unwrap();
        (img, Grid::filled([n, n, n], [1.0; 3], false).unwrap())
    }

    #[test]
    fn empty_patch_leaves_host_unchanged() {
        let (img, mask) = host(6);
        let patch = Grid::filled([2, 2, 2], [1.0; 3], 9.0).unwrap();
        let pm = Grid::filled([2, 2, 2], [1.0; 3], false).unwrap();
        let (oi, om, placed) = place_lesion(&img, &mask, &patch, &pm, [3, 3, 3]).unwrap();
        assert_eq!(oi, img);
        assert_eq!(om, mask);
        assert_eq!(placed.count(), 0);
    }

    #[test]
    fn single_voxel_uses_boundary_weight() {
        let (img, mask) = host(6);
        let patch = Grid::filled([1, 1, 1], [1.0; 3], 100.0).unwrap();
        let pm = Grid::filled([1, 1, 1], [1.0; 3], true).unwrap();
        let (oi, om, _) = place_lesion(&img, &mask, &patch, &pm, [2, 3, 4]).unwrap();
        let before = img.get(2, 3, 4);
        let expected = before * (1.0 - BOUNDARY_WEIGHT) + 100.0 * BOUNDARY_WEIGHT;
        assert_eq!(oi.get(2, 3, 4), expected);
        assert!((oi.get(2, 3, 4) - (0.34 * before + 66.0)).abs() < 1e-9);
        assert_eq!(om.count(), 1);
        for (i, (&a, &b)) in oi.data().iter().zip(img.data()).enumerate() {
            if i != img.index(2, 3, 4) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn overlap_is_counted_once() {
        let (img, mut mask) = host(8);
        for x in 2..5 {
            let i = mask.index(x, 4, 4);
            mask.data_mut()[i] = true;
        }
        let patch = Grid::filled([3, 1, 1], [1.0; 3], 1.0).unwrap();
        let pm = patch.like(true);
        let mut oi = img.clone();
        let mut om = mask.clone();
        let region = place_into(&mut oi, &mut om, &patch, &pm, [4, 4, 4]).unwrap();
        assert_eq!(region.voxels.len(), 3);
        assert_eq!(region.newly_added, 1);
        assert_eq!(om.count(), 4);
    }

    #[test]
    fn cropping_at_the_border() {
        let (img, mask) = host(5);
        let patch = Grid::filled([3, 3, 3], [1.0; 3], 50.0).unwrap();
        let pm = patch.like(true);
        let (oi, om, placed) = place_lesion(&img, &mask, &patch, &pm, [0, 0, 0]).unwrap();
        assert_eq!(placed.count(), 8);
        assert_eq!(om, placed);
        // Every cropped voxel lies on the host border or the support edge, so all are boundary.
        assert_eq!(boundary_shell(&placed).count(), 8);
        assert_eq!(oi.get(0, 0, 0), mix_value(img.get(0, 0, 0), 50.0, BOUNDARY_WEIGHT));
        assert!(place_lesion(&img, &mask, &patch, &pm, [5, 0, 0]).is_err());
    }

    #[test]
    fn interior_gets_full_weight() {
        let (img, mask) = host(9);
        let patch = Grid::filled([3, 3, 3], [1.0; 3], -4.0).unwrap();
        let pm = patch.like(true);
        let (oi, _, _) = place_lesion(&img, &mask, &patch, &pm, [4, 4, 4]).unwrap();
        assert_eq!(oi.get(4, 4, 4), -4.0);
        assert_eq!(oi.get(3, 4, 4), mix_value(img.get(3, 4, 4), -4.0, BOUNDARY_WEIGHT));
    }

    #[test]
    fn placement_from_single_voxel_map() {
        let w = Grid::from_fn([6, 6, 6], [1.0; 3], |x, y, z| if (x, y, z) == (1, 2, 3) { 1.0 } else { 0.0 }).unwrap();
        let map = LikelihoodMap::from_weights(&w).unwrap();
        let pm = Grid::filled([1, 1, 1], [1.0; 3], true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let p = sample_placement(&map, &pm, "h", &mut rng, 25).unwrap();
            assert_eq!(p.center, [1, 2, 3]);
            assert!(!p.clipped);
        }
    }

    #[test]
    fn clipped_fallback_after_budget() {
        // Only corner voxels carry mass, so most of a 5³ patch always falls outside.
        let w = Grid::from_fn([6, 6, 6], [1.0; 3], |x, y, z| if x + y + z == 0 { 1.0 } else { 0.0 }).unwrap();
        let map = LikelihoodMap::from_weights(&w).unwrap();
        let pm = Grid::filled([5, 5, 5], [1.0; 3], true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_placement(&map, &pm, "h", &mut rng, 3).unwrap();
        assert_eq!(p.center, [0, 0, 0]);
        assert!(p.clipped);
        assert!(sample_placement(&map, &pm, "h", &mut rng, 0).is_err());
    }
}
