use pds_core::metrics::{masked_l1, psnr, region_l1, ssim, SsimConfig};
use pds_core::net::PerceptionArch;
use pds_core::net::PerceptionNet;
use pds_core::pdm::loss_pa;
use pds_core::refine::{loss_mic, tri_planar_means, TriPlanes};
use pds_core::schedule::{build_schedule, forward_marginal, forward_step, reverse_step};
use pds_core::volume::{
    load_nifti, normalize, save_nifti, segment_lengths, segment_time_axis, AtlasMask, DatasetConfig, NiftiImage,
    Series4, Volume3,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const GRID: f64 = 1.0 / (1u64 << 20) as f64;

/// Values on the 2^-20 grid in [0, 1); sums and power-of-two means stay exact.
fn dyadic(dims: [usize; 3], seed: u64) -> Volume3 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Volume3::from_fn(dims, |_, _, _| rng.gen_range(0..1u64 << 20) as f64 * GRID)
}

fn uniform(dims: [usize; 3], seed: u64) -> Volume3 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Volume3::from_fn(dims, |_, _, _| rng.gen::<f64>())
}

fn random_mask(dims: [usize; 3], k: u16, seed: u64) -> AtlasMask {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = dims.iter().product::<usize>();
    let mut labels: Vec<u16> = (0..n).map(|_| rng.gen_range(0..=k)).collect();
    for r in 1..=k {
        labels[r as usize - 1] = r;
    }
    AtlasMask::new(dims, labels, k).unwrap()
}

fn pow2_dims() -> impl Strategy<Value = [usize; 3]> {
    prop::array::uniform3(prop::sample::select(vec![2usize, 4, 8]))
}

fn planes_eq(a: &TriPlanes, b: &TriPlanes) -> bool {
    a.axial == b.axial && a.sagittal == b.sagittal && a.coronal == b.coronal
}

/// Adds `+d` / `-d` in a checkerboard over the 2x2x2 block at `(x, y, z)`.
fn balanced(vol: &Volume3, at: [usize; 3], d: f64) -> Volume3 {
    let mut out = vol.clone();
    for k in 0..2 {
        for j in 0..2 {
            for i in 0..2 {
                let (x, y, z) = (at[0] + i, at[1] + j, at[2] + k);
                let s = if (i + j + k) % 2 == 0 { d } else { -d };
                out.set(x, y, z, vol.get(x, y, z) + s);
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bar_is_the_running_product(t_max in 1usize..1000, lo in 1e-5f64..1e-3, span in 0.0f64..0.05) {
        let s = build_schedule(t_max, lo, lo + span).unwrap();
        let mut prod = 1.0;
        for t in 1..=t_max {
            prod *= 1.0 - s.beta(t);
            prop_assert!((s.alpha_bar(t) - prod).abs() <= 1e-12);
            prop_assert!((s.gamma(t).powi(2) + s.alpha_bar(t) - 1.0).abs() <= 1e-12);
            for v in [s.beta(t), s.alpha(t), s.alpha_bar(t), s.gamma(t), s.sigma(t)] {
                prop_assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn exact_noise_step_matches_closed_form(t in 2usize..=50, seed in any::<u64>()) {
        let s = build_schedule(50, 1e-4, 2e-2).unwrap();
        let x0 = uniform([3, 2, 2], seed).map(|v| 20.0 * v - 10.0);
        let eps = uniform([3, 2, 2], seed ^ 1).map(|v| 20.0 * v - 10.0);
        let xt = forward_marginal(&x0, t, &eps, &s).unwrap();
        let out = reverse_step(&xt, &eps, t, &Volume3::zeros([3, 2, 2]), &s).unwrap();
        let (ab_prev, a, g) = (s.alpha_bar(t - 1), s.alpha(t), s.gamma(t));
        for i in 0..x0.len() {
            let want = ab_prev.sqrt() * x0.data()[i] + a.sqrt() * (1.0 - ab_prev) / g * eps.data()[i];
            prop_assert!(out.data()[i].is_finite());
            prop_assert!((out.data()[i] - want).abs() <= 1e-10 * want.abs().max(1.0));
        }
        let z = uniform([3, 2, 2], seed ^ 2);
        prop_assert!(forward_step(&x0, t, &z, &s).unwrap().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tri_planar_means_commute_with_affine_maps(
        dims in pow2_dims(),
        seed in any::<u64>(),
        a in -64i32..64,
        b in -64i32..64,
    ) {
        let (a, b) = (a as f64 / 16.0, b as f64 / 16.0);
        let x = dyadic(dims, seed);
        let lhs = tri_planar_means(&x.map(|v| a * v + b));
        let mut rhs = tri_planar_means(&x);
        for p in [&mut rhs.axial, &mut rhs.sagittal, &mut rhs.coronal] {
            for v in &mut p.data {
                *v = a * *v + b;
            }
        }
        prop_assert!(planes_eq(&lhs, &rhs));
    }

    #[test]
    fn region_sizes_weight_region_l1_back_to_foreground_l1(
        dims in prop::array::uniform3(2usize..6),
        k in 1u16..5,
        seed in any::<u64>(),
    ) {
        prop_assume!(dims.iter().product::<usize>() >= k as usize);
        let (a, b) = (dyadic(dims, seed), dyadic(dims, seed ^ 9));
        let mask = random_mask(dims, k, seed ^ 3);
        let per = region_l1(&a, &b, &mask).unwrap();
        let mut weighted = 0.0;
        for (r, v) in &per {
            let size = mask.labels().iter().filter(|&&l| l == *r).count();
            weighted += v * size as f64;
        }
        let fg = mask.labels().iter().filter(|&&l| l > 0).count();
        let global = masked_l1(&a, &b, &mask).unwrap();
        prop_assert!((weighted / fg as f64 - global).abs() <= 1e-15);
        let ids: Vec<u16> = per.keys().copied().collect();
        prop_assert!(ids.iter().all(|&r| r >= 1 && r <= k));
    }

    #[test]
    fn psnr_is_symmetric_and_decreasing_in_mse(seed in any::<u64>(), scale in 0.01f64..0.5, grow in 1.01f64..3.0) {
        let a = uniform([4, 4, 4], seed);
        let d = uniform([4, 4, 4], seed ^ 5).map(|v| scale * (v - 0.5));
        let b = a.zip_map(&d, |x, e| x + e).unwrap();
        let c = a.zip_map(&d, |x, e| x + grow * e).unwrap();
        let p_ab = psnr(&a, &b, 1.0).unwrap();
        prop_assert_eq!(p_ab, psnr(&b, &a, 1.0).unwrap());
        prop_assert!(psnr(&a, &c, 1.0).unwrap() < p_ab);
        prop_assert!(p_ab >= 0.0);
    }

    #[test]
    fn ssim_is_symmetric_bounded_and_one_on_identity(dims in prop::array::uniform3(2usize..10), seed in any::<u64>()) {
        let cfg = SsimConfig::default();
        let (a, b) = (uniform(dims, seed), uniform(dims, seed ^ 7));
        let s_ab = ssim(&a, &b, &cfg).unwrap();
        let s_ba = ssim(&b, &a, &cfg).unwrap();
        prop_assert!((s_ab - s_ba).abs() <= 1e-15);
        prop_assert!((-1.0..=1.0).contains(&s_ab));
        prop_assert_eq!(ssim(&a, &a, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn normalize_is_idempotent(dims in prop::array::uniform3(1usize..6), seed in any::<u64>(), scale in 0.1f64..100.0) {
        let v = uniform(dims, seed).map(|x| scale * x - 3.0);
        let once = normalize(&v);
        let twice = normalize(&once);
        prop_assert_eq!(twice.data(), once.data());
    }

    #[test]
    fn weighted_segment_means_reconstruct_the_time_mean(nt in 1usize..12, n_seg in 1usize..12, seed in any::<u64>()) {
        prop_assume!(n_seg <= nt);
        let frames: Vec<Volume3> = (0..nt).map(|i| dyadic([2, 2, 2], seed.wrapping_add(i as u64))).collect();
        let series = Series4::new(frames.clone()).unwrap();
        let segs = segment_time_axis(&series, n_seg).unwrap();
        let lens = segment_lengths(nt, n_seg);
        for i in 0..8 {
            let want: f64 = frames.iter().map(|f| f.data()[i]).sum::<f64>() / nt as f64;
            let got: f64 = segs.iter().zip(&lens).map(|(s, &l)| s.data()[i] * l as f64).sum::<f64>() / nt as f64;
            prop_assert!((got - want).abs() <= 1e-15);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn balanced_block_perturbation_preserves_planes_and_mic(
        exp in 1usize..3,
        seed in any::<u64>(),
        d in 1u64..1024,
        at in prop::array::uniform3(0usize..8),
    ) {
        let n = 4 << exp >> 1;
        let at = at.map(|c| c % (n - 1));
        let x = dyadic([n; 3], seed);
        let y = balanced(&x, at, d as f64 * GRID);
        prop_assert!(planes_eq(&tri_planar_means(&x), &tri_planar_means(&y)));
        let m = PerceptionNet::new(&PerceptionArch { widths: vec![4], ..PerceptionArch::default() }).unwrap();
        let target = dyadic([n; 3], seed ^ 1);
        let before = loss_mic(&m, &x, &target).unwrap();
        let after = loss_mic(&m, &y, &target).unwrap();
        prop_assert!((before - after).abs() <= 1e-12);
        prop_assert!(before >= 0.0);
        prop_assert_eq!(loss_mic(&m, &x, &x).unwrap(), 0.0);
    }

    #[test]
    fn loss_pa_ignores_everything_outside_the_mask(seed in any::<u64>(), k in 1u16..4) {
        let (df, dd) = ([4, 4, 4], [4, 4, 2]);
        let (mf, md) = (random_mask(df, k, seed), random_mask(dd, k, seed ^ 1));
        let vols: Vec<Volume3> = (0..4)
            .map(|i| uniform(if i < 2 { df } else { dd }, seed ^ (10 + i)))
            .collect();
        let mask_out = |v: &Volume3, m: &AtlasMask, s: u64| {
            let mut rng = ChaCha20Rng::seed_from_u64(s);
            let mut w = v.clone();
            for (x, &l) in w.data_mut().iter_mut().zip(m.labels()) {
                let noise: f64 = rng.gen_range(-100.0..100.0);
                *x = if l == 0 { noise } else { *x };
            }
            w
        };
        let project = |v: &Volume3, m: &AtlasMask| pds_core::pdm::pattern_project(v, m).unwrap();
        let base = loss_pa(
            &project(&vols[0], &mf), &project(&vols[1], &mf),
            &project(&vols[2], &md), &project(&vols[3], &md),
        ).unwrap();
        let edited = loss_pa(
            &project(&mask_out(&vols[0], &mf, seed ^ 20), &mf), &project(&mask_out(&vols[1], &mf, seed ^ 21), &mf),
            &project(&mask_out(&vols[2], &md, seed ^ 22), &md), &project(&mask_out(&vols[3], &md, seed ^ 23), &md),
        ).unwrap();
        prop_assert_eq!(base, edited);
    }

    #[test]
    fn nifti_round_trip_is_exact_at_float32(dims in prop::array::uniform3(1usize..7), nt in 1usize..4, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Volume3> = (0..nt)
            .map(|i| uniform(dims, seed ^ i as u64).map(|v| (v as f32) as f64).with_spacing([1.5, 2.0, 0.5]))
            .collect();
        let image = if nt == 1 {
            NiftiImage::from(frames[0].clone())
        } else {
            NiftiImage::Series(Series4::new(frames.clone()).unwrap())
        };
        let path = dir.path().join("v.nii");
        save_nifti(&image, &path).unwrap();
        let back = load_nifti(&path).unwrap();
        prop_assert_eq!(back.dims(), dims);
        let got: Vec<Volume3> = match back {
            NiftiImage::Volume(v) => vec![v],
            NiftiImage::Series(s) => s.frames().to_vec(),
        };
        prop_assert_eq!(got.len(), nt);
        for (g, w) in got.iter().zip(&frames) {
            prop_assert_eq!(g.data(), w.data());
            prop_assert_eq!(g.spacing(), w.spacing());
        }
    }

    #[test]
    fn phantom_generation_is_a_pure_function_of_its_config(seed in any::<u64>()) {
        let cfg = DatasetConfig { dims: [8, 8, 8], k_regions: 3, seed, ..DatasetConfig::default() };
        let (a, ma, _) = cfg.generate().unwrap();
        let (b, mb, _) = cfg.generate().unwrap();
        prop_assert_eq!(ma, mb);
        for (p, q) in a.iter().zip(&b) {
            prop_assert_eq!(p.f_vol.data(), q.f_vol.data());
            prop_assert_eq!(p.d_vol.data(), q.d_vol.data());
        }
    }
}
