use lesionforge::grid::{mask_subtract, mask_union, BinaryMask, Grid, Volume3D};
use lesionforge::inpaint::{blend_region, inpaint_lesion, InpaintSettings};
use lesionforge::lesions::{connected_components_3d, extract_instances, measure_load};
use lesionforge::loadmodel::LikelihoodMap;
use lesionforge::populate::place_lesion;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DIMS: [usize; 3] = [10, 9, 7];
const N: usize = 10 * 9 * 7;

fn mask_strategy(density: f64) -> impl Strategy<Value = BinaryMask> {
    proptest::collection::vec(proptest::bool::weighted(density), N)
        .prop_map(|d| Grid::new(DIMS, [1.0, 1.5, 2.0], d).unwrap())
}

fn image_strategy() -> impl Strategy<Value = Volume3D> {
    proptest::collection::vec(-50.0f64..250.0, N).prop_map(|d| Grid::new(DIMS, [1.0, 1.5, 2.0], d).unwrap())
}

/// A mask confined to the box 2..=6, 2..=6, 1..=5 so no axial slice is fully covered.
fn interior_mask_strategy() -> impl Strategy<Value = BinaryMask> {
    mask_strategy(0.3).prop_map(|m| {
        Grid::from_fn(DIMS, m.spacing(), |x, y, z| {
            (2..=6).contains(&x) && (2..=6).contains(&y) && (1..=5).contains(&z) && m.get(x, y, z)
        })
        .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn subtracting_a_disjoint_union_restores_the_base(a in mask_strategy(0.2), b in mask_strategy(0.2)) {
        let b_only = Grid::from_fn(DIMS, a.spacing(), |x, y, z| b.get(x, y, z) && !a.get(x, y, z)).unwrap();
        let u = mask_union(&a, &b_only).unwrap();
        prop_assert_eq!(u.count(), a.count() + b_only.count());
        prop_assert_eq!(mask_subtract(&u, &b_only).unwrap(), a);
    }

    #[test]
    fn components_partition_the_mask(m in mask_strategy(0.25)) {
        let comps = connected_components_3d(&m);
        let mut seen = vec![false; m.len()];
        for c in &comps {
            for &i in &c.voxels {
                prop_assert!(m.data()[i]);
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        prop_assert_eq!(seen.as_slice(), m.data());
        for w in comps.windows(2) {
            let (a, b) = (w[0].bbox.min, w[1].bbox.min);
            prop_assert!((a[2], a[1], a[0], w[0].voxels[0]) < (b[2], b[1], b[0], w[1].voxels[0]));
        }
    }

    #[test]
    fn instance_volumes_sum_to_the_load(img in image_strategy(), m in mask_strategy(0.15)) {
        let inst = extract_instances(&img, &m, "s", 1).unwrap();
        let total: f64 = inst.iter().map(|i| i.volume_mm3).sum();
        prop_assert!((total - measure_load(&m)).abs() < 1e-9);
        for i in &inst {
            prop_assert!(i.id.starts_with("s#"));
            prop_assert_eq!(i.patch_mask.dims(), i.bbox.extent());
        }
    }

    #[test]
    fn placement_accounts_for_every_voxel(
        img in image_strategy(),
        host in mask_strategy(0.1),
        patch in mask_strategy(0.4),
        center in (0usize..10, 0usize..9, 0usize..7),
    ) {
        let patch = patch.crop(&lesionforge::BBox { min: [0, 0, 0], max: [3, 3, 2] });
        prop_assume!(patch.count() > 0);
        let values = Grid::filled(patch.dims(), patch.spacing(), 777.0).unwrap();
        let c = [center.0, center.1, center.2];
        if let Ok((out, mask, placed)) = place_lesion(&img, &host, &values, &patch, c) {
            let added = placed.data().iter().zip(host.data()).filter(|(&p, &h)| p && !h).count();
            prop_assert_eq!(mask.count(), host.count() + added);
            prop_assert_eq!(mask_union(&host, &placed).unwrap(), mask);
            for i in 0..out.len() {
                if !placed.data()[i] {
                    prop_assert_eq!(out.data()[i], img.data()[i]);
                } else {
                    let (lo, hi) = (img.data()[i].min(777.0), img.data()[i].max(777.0));
                    prop_assert!(out.data()[i] >= lo - 1e-9 && out.data()[i] <= hi + 1e-9);
                }
            }
        }
    }

    #[test]
    fn inpainting_only_touches_the_lesion_and_its_blend_band(
        img in image_strategy(),
        lesion in interior_mask_strategy(),
        other in mask_strategy(0.1),
        sigma in prop_oneof![Just(0.0), 0.5f64..2.0],
    ) {
        prop_assume!(lesion.count() > 0);
        let full = mask_union(&lesion, &other).unwrap();
        let settings = InpaintSettings { radius: 3, blur_sigma: sigma };
        let (out, remaining) = inpaint_lesion(&img, &lesion, &full, &settings).unwrap();
        prop_assert_eq!(remaining, mask_subtract(&full, &lesion).unwrap());
        let band = blend_region(&lesion);
        for i in 0..out.len() {
            prop_assert!(out.data()[i].is_finite());
            if !lesion.data()[i] && (sigma == 0.0 || !band.data()[i]) {
                prop_assert_eq!(out.data()[i], img.data()[i]);
            }
        }
    }

    #[test]
    fn map_draws_stay_on_the_support(weights in proptest::collection::vec(prop_oneof![3 => Just(0.0), 1 => 0.1f64..5.0], N), seed in any::<u64>()) {
        let w = Grid::new(DIMS, [1.0; 3], weights).unwrap();
        prop_assume!(w.data().iter().any(|&v| v > 0.0));
        let map = LikelihoodMap::from_weights(&w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let [x, y, z] = map.sample_voxel(&mut rng);
            prop_assert!(w.get(x, y, z) > 0.0);
        }
    }
}
