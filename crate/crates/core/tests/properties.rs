use chroma::color::{downsample, lab_to_rgb, rgb_to_gray, rgb_to_lab, upsample2};
use chroma::dataset::Ray;
use chroma::field::{render_rays, Aabb, RenderOptions, SparseVoxelGrid};
use chroma::image::{ColorSpace, ImageBuf};
use chroma::metrics::{consistency_error, mean_chroma_magnitude, warp_image, ConsistencyMode, WarpField};
use chroma::teacher::jitter_lab;
use nalgebra::Vector3;
use proptest::prelude::*;

fn unit() -> impl Strategy<Value = f64> {
    0.0f64..=1.0
}

fn image(w: usize, h: usize) -> impl Strategy<Value = ImageBuf> {
    proptest::collection::vec(0.0f32..=1.0, w * h * 3)
        .prop_map(move |data| ImageBuf::from_vec(w, h, ColorSpace::Srgb, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lab_round_trip(r in unit(), g in unit(), b in unit()) {
        let (back, clipped) = lab_to_rgb(rgb_to_lab([r, g, b]));
        prop_assert!(!clipped);
        for (x, y) in back.iter().zip([r, g, b]) {
            prop_assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn gray_is_a_convex_mix(r in unit(), g in unit(), b in unit()) {
        let y = rgb_to_gray([r, g, b]);
        prop_assert!(y >= r.min(g).min(b) - 1e-12 && y <= r.max(g).max(b) + 1e-12);
    }

    #[test]
    fn jitter_keeps_lightness_and_chroma_scales_with_gain(
        l in 10.0f64..90.0, a in -60.0f64..60.0, b in -60.0f64..60.0,
        hue in -180.0f64..180.0, gain in 0.5f64..1.5,
    ) {
        let out = jitter_lab([l, a, b], hue, gain);
        prop_assert_eq!(out[0], l);
        prop_assert!((out[1].hypot(out[2]) - gain * a.hypot(b)).abs() < 1e-9);
    }

    #[test]
    fn downsample_preserves_the_mean(img in image(8, 4)) {
        let small = downsample(&img, 2).unwrap();
        prop_assert!((small.mean() - img.mean()).abs() < 1e-5);
        prop_assert_eq!(small.dims(), (4, 2));
    }

    #[test]
    fn upsample_then_downsample_is_identity_for_plateaus(img in image(4, 4)) {
        // Block-replicated images survive a 2× round trip exactly.
        let big = ImageBuf::from_fn(8, 8, ColorSpace::Srgb, |x, y| {
            let p = img.pixel(x / 2, y / 2);
            [p[0], p[1], p[2]]
        });
        let back = downsample(&big, 2).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        prop_assert_eq!(upsample2(&img).dims(), (8, 8));
    }

    #[test]
    fn consistency_is_symmetric_and_quadratic(a in image(6, 5), b in image(6, 5)) {
        let mask = vec![true; 30];
        for mode in [ConsistencyMode::Full, ConsistencyMode::Chroma] {
            let ab = consistency_error(&a, &b, &mask, mode).unwrap();
            let ba = consistency_error(&b, &a, &mask, mode).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        }
        let shifted = ImageBuf::from_vec(6, 5, ColorSpace::Srgb, a.data().iter().map(|v| v + 0.1).collect()).unwrap();
        let doubled = ImageBuf::from_vec(6, 5, ColorSpace::Srgb, a.data().iter().map(|v| v + 0.2).collect()).unwrap();
        let e1 = consistency_error(&a, &shifted, &mask, ConsistencyMode::Full).unwrap();
        let e2 = consistency_error(&a, &doubled, &mask, ConsistencyMode::Full).unwrap();
        prop_assert!((e2 - 4.0 * e1).abs() < 1e-6);
    }

    #[test]
    fn masked_pixels_do_not_matter(a in image(5, 5), noise in image(5, 5), bits in proptest::collection::vec(any::<bool>(), 25)) {
        prop_assume!(bits.iter().any(|&m| m));
        let warped = warp_image(&a, &WarpField::identity(5, 5)).unwrap();
        let mut perturbed = warped.clone();
        for (i, keep) in bits.iter().enumerate() {
            if !keep {
                let n = noise.at(i).to_vec();
                perturbed.data_mut()[i * 3..i * 3 + 3].copy_from_slice(&n);
            }
        }
        for mode in [ConsistencyMode::Full, ConsistencyMode::Chroma] {
            let x = consistency_error(&a, &warped, &bits, mode).unwrap();
            let y = consistency_error(&a, &perturbed, &bits, mode).unwrap();
            prop_assert_eq!(x, y);
        }
    }

    #[test]
    fn chroma_magnitude_is_homogeneous(
        labs in proptest::collection::vec((40.0f64..70.0, -15.0f64..15.0, -15.0f64..15.0), 16),
        gain in 0.5f64..1.5,
    ) {
        let from_lab = |k: f64| {
            let data = labs.iter().flat_map(|&(l, a, b)| lab_to_rgb([l, k * a, k * b]).0.map(|v| v as f32)).collect();
            ImageBuf::from_vec(4, 4, ColorSpace::Srgb, data).unwrap()
        };
        let (m0, m1) = (mean_chroma_magnitude(&from_lab(1.0)), mean_chroma_magnitude(&from_lab(gain)));
        prop_assert!((m1 - gain * m0).abs() < 1e-3 * m0.max(1.0), "{} vs {}", m1, m0);
    }

    #[test]
    fn transmittance_telescopes_on_random_grids(
        seed in any::<u64>(),
        ox in -3.0f64..3.0, oy in -3.0f64..3.0,
        tx in -0.8f64..0.8, ty in -0.8f64..0.8, tz in -0.8f64..0.8,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g = SparseVoxelGrid::new([5; 3], Aabb::cube(1.0), 3, 1, 0.0).unwrap();
        g.density_mut().iter_mut().for_each(|v| *v = rng.gen_range(-3.0..4.0));
        g.sh_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let origin = Vector3::new(ox, oy, 3.0);
        let ray = Ray::new(origin, Vector3::new(tx, ty, tz) - origin);
        let opts = RenderOptions { min_transmittance: 0.0, ..RenderOptions::for_grid(&g) };
        let s = render_rays(&g, &[ray], &opts)[0];
        prop_assert!((s.opacity + s.transmittance - 1.0).abs() < 1e-6);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&s.opacity));
    }
}
