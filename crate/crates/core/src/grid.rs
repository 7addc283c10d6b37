//! Dense 3D grids and the voxelwise algebra used by the populate and inpaint
//! branches.
//!
//! Layout is row-major with x fastest: `index = x + nx * (y + ny * z)`. This
//! layout is also the on-disk order of both supported file formats.

use crate::error::{Error, Result};

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];

/// Weight of lesion boundary voxels in the soft mixing mask.
pub const BOUNDARY_WEIGHT: f64 = 0.66;
/// Weight of lesion interior voxels in the soft mixing mask.
pub const INTERIOR_WEIGHT: f64 = 1.0;

pub trait VoxelValue: Copy + PartialEq + Default + Send + Sync + std::fmt::Debug {
    fn is_valid(self) -> bool {
        true
    }
}

impl VoxelValue for f64 {
    fn is_valid(self) -> bool {
        self.is_finite()
    }
}
impl VoxelValue for u32 {}
impl VoxelValue for bool {}

/// A dense scalar grid with anisotropic voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    dims: Dims,
    spacing: Spacing,
    data: Vec<T>,
}

/// Intensity volume.
pub type Volume3D = Grid<f64>;
/// Integer label map as stored on disk.
pub type LabelMask = Grid<u32>;
/// Lesion / not-lesion map obtained by binarizing a [`LabelMask`].
pub type BinaryMask = Grid<bool>;

impl<T: VoxelValue> Grid<T> {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<T>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::InvalidGrid(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                n
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_valid()) {
            return Err(Error::InvalidGrid(format!("non-finite value at voxel {i}")));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: T) -> Result<Self> {
        check_geometry(dims, spacing)?;
        Self::new(dims, spacing, vec![value; dims[0] * dims[1] * dims[2]])
    }

    /// Same geometry as `self`, every voxel set to `value`.
    pub fn like<U: VoxelValue>(&self, value: U) -> Grid<U> {
        Grid { dims: self.dims, spacing: self.spacing, data: vec![value; self.data.len()] }
    }

    /// Builds a grid of the same geometry from a per-voxel function of the coordinates.
    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        check_geometry(dims, spacing)?;
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> bool {
        self.dims == other.dims
    }

    /// Dims equal and spacing equal within 1e-5 relative.
    pub fn same_geometry<U>(&self, other: &Grid<U>) -> bool {
        self.dims == other.dims
            && self.spacing.iter().zip(other.spacing.iter()).all(|(a, b)| (a - b).abs() <= 1e-5 * a.abs().max(b.abs()))
    }

    /// Copy of the voxels inside `bbox` (inclusive). Spacing is kept.
    pub fn crop(&self, bbox: &BBox) -> Grid<T> {
        let dims = bbox.extent();
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in bbox.min[2]..=bbox.max[2] {
            for y in bbox.min[1]..=bbox.max[1] {
                let start = self.index(bbox.min[0], y, z);
                data.extend_from_slice(&self.data[start..start + dims[0]]);
            }
        }
        Grid { dims, spacing: self.spacing, data }
    }

    pub fn map<U: VoxelValue>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { dims: self.dims, spacing: self.spacing, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Crate-internal constructor for data already known to satisfy the invariants.
    pub(crate) fn from_parts_unchecked(dims: Dims, spacing: Spacing, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), dims[0] * dims[1] * dims[2]);
        Self { dims, spacing, data }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Tight bounding box of the set voxels, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let mut bbox: Option<BBox> = None;
        for (i, _) in self.data.iter().enumerate().filter(|(_, &v)| v) {
            let c = self.coords(i);
            match bbox.as_mut() {
                Some(b) => b.include(c),
                None => bbox = Some(BBox { min: c, max: c }),
            }
        }
        bbox
    }

    /// Labels with `class_id` on set voxels and 0 elsewhere.
    pub fn to_labels(&self, class_id: u32) -> LabelMask {
        self.map(|v| if v { class_id } else { 0 })
    }
}

impl LabelMask {
    /// Lesion voxel ⟺ label equals `class_id`.
    pub fn binarize(&self, class_id: u32) -> BinaryMask {
        self.map(|v| v == class_id)
    }
}

fn check_geometry(dims: Dims, spacing: Spacing) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidGrid(format!("dims must be positive, got {dims:?}")));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidGrid(format!("spacing must be positive and finite, got {spacing:?}")));
    }
    Ok(())
}

/// Inclusive voxel bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BBox {
    pub fn include(&mut self, c: [usize; 3]) {
        for a in 0..3 {
            self.min[a] = self.min[a].min(c[a]);
            self.max[a] = self.max[a].max(c[a]);
        }
    }

    pub fn extent(&self) -> Dims {
        [self.max[0] - self.min[0] + 1, self.max[1] - self.min[1] + 1, self.max[2] - self.min[2] + 1]
    }

    pub fn contains(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| c[a] >= self.min[a] && c[a] <= self.max[a])
    }

    /// Grown by `margin` voxels on every side and clipped to `dims`.
    pub fn expanded(&self, margin: usize, dims: Dims) -> BBox {
        let mut out = *self;
        for a in 0..3 {
            out.min[a] = self.min[a].saturating_sub(margin);
            out.max[a] = (self.max[a] + margin).min(dims[a] - 1);
        }
        out
    }
}

/// Mixing weights of a placed lesion: 0 outside its support, [`BOUNDARY_WEIGHT`]
/// on the boundary shell, [`INTERIOR_WEIGHT`] strictly inside.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask(Grid<f64>);

impl SoftMask {
    pub fn dims(&self) -> Dims {
        self.0.dims
    }

    pub fn weights(&self) -> &[f64] {
        &self.0.data
    }

    pub fn as_grid(&self) -> &Grid<f64> {
        &self.0
    }
}

/// Soft-weighted blend at one voxel: `base * (1 - w) + overlay * w`. Zero and unit weights return the
/// corresponding operand unchanged.
#[inline]
pub fn mix_value(base: f64, overlay: f64, weight: f64) -> f64 {
    if weight == 0.0 {
        base
    } else if weight == 1.0 {
        overlay
    } else {
        base * (1.0 - weight) + overlay * weight
    }
}

pub fn elementwise_mix(base: &Volume3D, overlay: &Volume3D, weights: &SoftMask) -> Result<Volume3D> {
    if !base.same_dims(overlay) || base.dims != weights.dims() {
        return Err(Error::Shape(format!(
            "mix operands have dims {:?}, {:?}, {:?}",
            base.dims,
            overlay.dims,
            weights.dims()
        )));
    }
    let data =
        base.data.iter().zip(&overlay.data).zip(weights.weights()).map(|((&b, &o), &w)| mix_value(b, o, w)).collect();
    Ok(Grid::from_parts_unchecked(base.dims, base.spacing, data))
}

fn check_same_dims<A, B>(a: &Grid<A>, b: &Grid<B>, what: &str) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!("{what}: dims {:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

pub fn mask_union(base: &BinaryMask, placed: &BinaryMask) -> Result<BinaryMask> {
    check_same_dims(base, placed, "mask_union")?;
    let data = base.data.iter().zip(&placed.data).map(|(&a, &b)| a || b).collect();
    Ok(Grid::from_parts_unchecked(base.dims, base.spacing, data))
}

/// `base \ removed`; `removed` must be a subset of `base`.
pub fn mask_subtract(base: &BinaryMask, removed: &BinaryMask) -> Result<BinaryMask> {
    check_same_dims(base, removed, "mask_subtract")?;
    if let Some(i) = base.data.iter().zip(&removed.data).position(|(&a, &b)| b && !a) {
        return Err(Error::Contract(format!("removed mask is not a subset of base (voxel {:?})", base.coords(i))));
    }
    let data = base.data.iter().zip(&removed.data).map(|(&a, &b)| a && !b).collect();
    Ok(Grid::from_parts_unchecked(base.dims, base.spacing, data))
}

const FACE_NEIGHBORS: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

/// Boundary shell over a raw x-fastest buffer. Out-of-grid neighbours count as outside.
pub(crate) fn shell_of(dims: Dims, mask: &[bool]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let mut out = vec![false; mask.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if !mask[i] {
                    continue;
                }
                out[i] = x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == nx
                    || y + 1 == ny
                    || z + 1 == nz
                    || !mask[i - 1]
                    || !mask[i + 1]
                    || !mask[i - nx]
                    || !mask[i + nx]
                    || !mask[i - nx * ny]
                    || !mask[i + nx * ny];
            }
        }
    }
    out
}

/// Lesion voxels with at least one face neighbour outside the mask; voxels on
/// the grid border are always boundary.
pub fn boundary_shell(mask: &BinaryMask) -> BinaryMask {
    Grid::from_parts_unchecked(mask.dims, mask.spacing, shell_of(mask.dims, &mask.data))
}

/// One step of dilation with the 6-neighbourhood.
pub fn dilate_6(mask: &BinaryMask) -> BinaryMask {
    let [nx, ny, nz] = mask.dims;
    let mut out = mask.data.clone();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask.data[mask.index(x, y, z)] {
                    continue;
                }
                for d in FACE_NEIGHBORS {
                    let (qx, qy, qz) = (x as isize + d[0], y as isize + d[1], z as isize + d[2]);
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize || qz >= nz as isize {
                        continue;
                    }
                    out[qx as usize + nx * (qy as usize + ny * qz as usize)] = true;
                }
            }
        }
    }
    Grid::from_parts_unchecked(mask.dims, mask.spacing, out)
}

pub(crate) fn soft_weights_of(dims: Dims, mask: &[bool]) -> Vec<f64> {
    let shell = shell_of(dims, mask);
    mask.iter()
        .zip(&shell)
        .map(|(&m, &s)| match (m, s) {
            (false, _) => 0.0,
            (true, true) => BOUNDARY_WEIGHT,
            (true, false) => INTERIOR_WEIGHT,
        })
        .collect()
}

pub fn soft_mask_from(mask: &BinaryMask) -> SoftMask {
    SoftMask(Grid::from_parts_unchecked(mask.dims, mask.spacing, soft_weights_of(mask.dims, &mask.data)))
}

/// Normalized 1D Gaussian taps, truncated at `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("blur sigma must be positive and finite, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    Ok(taps)
}

/// Separable Gaussian blur along x, y and z with edge replication.
pub fn gaussian_blur_3d(vol: &Volume3D, sigma_voxels: f64) -> Result<Volume3D> {
    let kernel = gaussian_kernel(sigma_voxels)?;
    let mut data = vol.data.clone();
    let mut scratch = vec![0.0; data.len()];
    for axis in 0..3 {
        convolve_axis(vol.dims, &data, &mut scratch, &kernel, axis);
        std::mem::swap(&mut data, &mut scratch);
    }
    Ok(Grid::from_parts_unchecked(vol.dims, vol.spacing, data))
}

fn convolve_axis(dims: Dims, src: &[f64], dst: &mut [f64], kernel: &[f64], axis: usize) {
    let radius = (kernel.len() / 2) as isize;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let n = dims[axis] as isize;
    let [nx, ny, nz] = dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let pos = [x, y, z][axis] as isize;
                let line_start = i - pos as usize * stride;
                let mut acc = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let j = (pos + k as isize - radius).clamp(0, n - 1) as usize;
                    acc += w * src[line_start + j * stride];
                }
                dst[i] = acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(dims: Dims, on: &[[usize; 3]]) -> BinaryMask {
        let mut m = Grid::filled(dims, [1.0; 3], false).unwrap();
        for c in on {
            let i = m.index(c[0], c[1], c[2]);
            m.data_mut()[i] = true;
        }
        m
    }

    fn cube(dims: Dims, lo: usize, hi: usize) -> BinaryMask {
        Grid::from_fn(dims, [1.0; 3], |x, y, z| {
            (lo..=hi).contains(&x) && (lo..=hi).contains(&y) && (lo..=hi).contains(&z)
        })
        .unwrap()
    }

    #[test]
    fn rejects_bad_geometry_and_values() {
        assert!(Grid::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Grid::new([2, 2, 2], [1.0, 0.0, 1.0], vec![0.0; 8]).is_err());
        assert!(Grid::new([2, 2, 0], [1.0; 3], Vec::<f64>::new()).is_err());
        let mut data = vec![0.0; 8];
        data[3] = f64::NAN;
        assert!(Grid::new([2, 2, 2], [1.0; 3], data).is_err());
    }

    #[test]
    fn mix_examples() {
        let base = Grid::new([3, 1, 1], [1.0; 3], vec![0.0, 10.0, 7.0]).unwrap();
        let over = Grid::new([3, 1, 1], [1.0; 3], vec![5.0, 20.0, 9.0]).unwrap();
        let w = SoftMask(Grid::new([3, 1, 1], [1.0; 3], vec![1.0, 0.66, 0.0]).unwrap());
        let out = elementwise_mix(&base, &over, &w).unwrap();
        assert_eq!(out.data()[0], 5.0);
        assert!((out.data()[1] - 16.6).abs() < 1e-12);
        assert_eq!(out.data()[2], 7.0);

        let zero = SoftMask(base.like(0.0));
        assert_eq!(elementwise_mix(&base, &over, &zero).unwrap(), base);

        let bad = Grid::filled([2, 1, 1], [1.0; 3], 0.0).unwrap();
        assert!(matches!(elementwise_mix(&base, &bad, &w), Err(Error::Shape(_))));
    }

    #[test]
    fn union_and_subtract_examples() {
        let base = mask_from([4, 4, 4], &[[1, 1, 1], [2, 2, 2]]);
        let empty = base.like(false);
        assert_eq!(mask_union(&base, &empty).unwrap(), base);
        assert_eq!(mask_union(&empty, &base).unwrap().count(), 2);
        let single = mask_from([4, 4, 4], &[[1, 1, 1]]);
        let u = mask_union(&single, &single).unwrap();
        assert_eq!(u.count(), 1);

        assert_eq!(mask_subtract(&base, &base).unwrap().count(), 0);
        assert_eq!(mask_subtract(&base, &empty).unwrap(), base);
        let on: Vec<[usize; 3]> = (0..10).map(|i| [i % 5, i / 5, 0]).collect();
        let ten = mask_from([5, 5, 5], &on);
        let four = mask_from([5, 5, 5], &on[..4]);
        assert_eq!(mask_subtract(&ten, &four).unwrap().count(), 6);
        let outside = mask_from([5, 5, 5], &[[4, 4, 4]]);
        assert!(matches!(mask_subtract(&ten, &outside), Err(Error::Contract(_))));
    }

    // Brute force: a lesion voxel is boundary when any of its six face
    // neighbours is out of grid or unset.
    fn shell_oracle(m: &BinaryMask) -> Vec<bool> {
        let d = m.dims();
        let mut out = vec![false; m.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let [x, y, z] = m.coords(i);
            if !m.data()[i] {
                continue;
            }
            for off in FACE_NEIGHBORS {
                let q = [x as isize + off[0], y as isize + off[1], z as isize + off[2]];
                let inside = (0..3).all(|a| q[a] >= 0 && q[a] < d[a] as isize);
                if !inside || !m.get(q[0] as usize, q[1] as usize, q[2] as usize) {
                    *o = true;
                }
            }
        }
        out
    }

    #[test]
    fn shell_examples() {
        let single = mask_from([3, 3, 3], &[[1, 1, 1]]);
        assert_eq!(boundary_shell(&single), single);

        let c = cube([5, 5, 5], 1, 3);
        let shell = boundary_shell(&c);
        assert_eq!(shell.data(), shell_oracle(&c).as_slice());
        assert_eq!(shell.count(), 26);
        assert!(!shell.get(2, 2, 2) && c.get(2, 2, 2));

        let empty = Grid::filled([3, 3, 3], [1.0; 3], false).unwrap();
        assert_eq!(boundary_shell(&empty).count(), 0);

        // Grid border voxels are boundary even when the whole grid is set.
        let full = Grid::filled([3, 3, 3], [1.0; 3], true).unwrap();
        assert_eq!(boundary_shell(&full).count(), 26);
    }

    #[test]
    fn soft_mask_examples() {
        let single = mask_from([3, 3, 3], &[[1, 1, 1]]);
        let w = soft_mask_from(&single);
        assert_eq!(w.weights()[single.index(1, 1, 1)], 0.66);
        assert_eq!(w.weights().iter().filter(|&&v| v != 0.0).count(), 1);

        let c = cube([5, 5, 5], 1, 3);
        let w = soft_mask_from(&c);
        let shell = shell_oracle(&c);
        for i in 0..c.len() {
            let expected = if !c.data()[i] {
                0.0
            } else if shell[i] {
                0.66
            } else {
                1.0
            };
            assert_eq!(w.weights()[i], expected);
        }
        assert_eq!(w.weights()[c.index(2, 2, 2)], 1.0);

        let empty = c.like(false);
        assert!(soft_mask_from(&empty).weights().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blur_constant_and_errors() {
        let v = Grid::filled([6, 5, 4], [1.0; 3], 3.25).unwrap();
        let b = gaussian_blur_3d(&v, 1.3).unwrap();
        assert!(b.data().iter().all(|x| (x - 3.25).abs() < 1e-6));
        assert!(gaussian_blur_3d(&v, 0.0).is_err());
        assert!(gaussian_blur_3d(&v, -1.0).is_err());
        assert!(gaussian_blur_3d(&v, f64::NAN).is_err());
    }

    #[test]
    fn blur_impulse_center_is_kernel_cubed() {
        // Truncated σ=1 kernel written out by hand: taps at -3..=3.
        let raw: Vec<f64> = (-3i32..=3).map(|i| (-(i * i) as f64 / 2.0).exp()).collect();
        let g0 = raw[3] / raw.iter().sum::<f64>();
        let mut v = Grid::filled([9, 9, 9], [1.0; 3], 0.0).unwrap();
        let c = v.index(4, 4, 4);
        v.data_mut()[c] = 1.0;
        let b = gaussian_blur_3d(&v, 1.0).unwrap();
        assert!((b.data()[c] - g0 * g0 * g0).abs() < 1e-15);
        let total: f64 = b.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn blur_semigroup_on_smooth_input() {
        let sigma = 1.5;
        let v = Grid::from_fn([40, 40, 40], [1.0; 3], |x, y, z| {
            let r2 = [x, y, z].iter().map(|&c| (c as f64 - 19.5).powi(2)).sum::<f64>();
            10.0 + 5.0 * (-r2 / (2.0 * 6.0 * 6.0)).exp()
        })
        .unwrap();
        let twice = gaussian_blur_3d(&gaussian_blur_3d(&v, sigma).unwrap(), sigma).unwrap();
        let once = gaussian_blur_3d(&v, sigma * 2f64.sqrt()).unwrap();
        for (a, b) in twice.data().iter().zip(once.data()) {
            assert!((a - b).abs() <= 1e-3 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn dilation_of_single_voxel() {
        let single = mask_from([3, 3, 3], &[[1, 1, 1]]);
        assert_eq!(dilate_6(&single).count(), 7);
        let corner = mask_from([3, 3, 3], &[[0, 0, 0]]);
        assert_eq!(dilate_6(&corner).count(), 4);
    }

    fn arb_mask(dims: Dims) -> impl Strategy<Value = BinaryMask> {
        prop::collection::vec(any::<bool>(), dims[0] * dims[1] * dims[2])
            .prop_map(move |d| Grid::new(dims, [1.0; 3], d).unwrap())
    }

    proptest! {
        #[test]
        fn union_laws(a in arb_mask([4, 3, 3]), b in arb_mask([4, 3, 3]), c in arb_mask([4, 3, 3])) {
            prop_assert_eq!(mask_union(&a, &b).unwrap(), mask_union(&b, &a).unwrap());
            prop_assert_eq!(
                mask_union(&mask_union(&a, &b).unwrap(), &c).unwrap(),
                mask_union(&a, &mask_union(&b, &c).unwrap()).unwrap()
            );
            prop_assert_eq!(mask_union(&a, &a).unwrap(), a.clone());
            // Disjoint part of b round-trips through union then subtract.
            let disjoint = Grid::new(a.dims(), a.spacing(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| y && !x).collect()).unwrap();
            prop_assert_eq!(mask_subtract(&mask_union(&a, &disjoint).unwrap(), &disjoint).unwrap(), a.clone());
        }

        #[test]
        fn shell_matches_oracle_and_weights_are_discrete(m in arb_mask([5, 4, 3])) {
            let shell = boundary_shell(&m);
            let expected = shell_oracle(&m);
            prop_assert_eq!(shell.data(), expected.as_slice());
            let w = soft_mask_from(&m);
            prop_assert!(w.weights().iter().all(|&v| v == 0.0 || v == 0.66 || v == 1.0));
            for (i, &v) in w.weights().iter().enumerate() {
                prop_assert_eq!(v != 0.0, m.data()[i]);
            }
        }

        #[test]
        fn mix_is_between_operands(
            b in prop::collection::vec(-100.0f64..100.0, 8),
            o in prop::collection::vec(-100.0f64..100.0, 8),
            m in arb_mask([2, 2, 2]),
        ) {
            let base = Grid::new([2, 2, 2], [1.0; 3], b).unwrap();
            let over = Grid::new([2, 2, 2], [1.0; 3], o).unwrap();
            let out = elementwise_mix(&base, &over, &soft_mask_from(&m)).unwrap();
            for i in 0..8 {
                let lo = base.data()[i].min(over.data()[i]);
                let hi = base.data()[i].max(over.data()[i]);
                prop_assert!(out.data()[i] >= lo - 1e-12 && out.data()[i] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn crop_and_bbox() {
        let c = cube([6, 6, 6], 2, 3);
        let b = c.bbox().unwrap();
        assert_eq!(b, BBox { min: [2; 3], max: [3; 3] });
        let cropped = c.crop(&b);
        assert_eq!(cropped.dims(), [2, 2, 2]);
        assert!(cropped.data().iter().all(|&v| v));
        assert!(c.like(false).bbox().is_none());
    }
}
