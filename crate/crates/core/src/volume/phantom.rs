//! Synthetic paired fMRI-like/dMRI-like phantoms with atlas-coupled region patterns.
//!
//! The anatomy (ellipsoidal support and region blobs) depends only on the
//! config seed, so every subject of a dataset shares one atlas. Subject seeds
//! drive the smooth intensity field and the per-region offsets.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{voxel_count, AtlasMask, ClassTag, Dims, ModalityPair, Volume3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub k_regions: usize,
    pub class_tag: ClassTag,
    pub offset_scale: f64,
    /// Anatomy seed shared by all subjects built from this config.
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            k_regions: 8,
            class_tag: ClassTag::NC,
            offset_scale: 0.15,
            seed: 0,
        }
    }
}

/// A cohort of phantom subjects sharing one atlas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub dims: Dims,
    pub k_regions: usize,
    pub offset_scale: f64,
    pub seed: u64,
    /// Subject count per class; subjects are emitted in NC, MCI, AD order.
    pub class_mix: BTreeMap<ClassTag, usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let p = PhantomConfig::default();
        Self {
            dims: p.dims,
            k_regions: p.k_regions,
            offset_scale: p.offset_scale,
            seed: p.seed,
            class_mix: BTreeMap::from([(ClassTag::AD, 4)]),
        }
    }
}

impl DatasetConfig {
    pub fn phantom(&self, class_tag: ClassTag) -> PhantomConfig {
        PhantomConfig {
            dims: self.dims,
            k_regions: self.k_regions,
            class_tag,
            offset_scale: self.offset_scale,
            seed: self.seed,
        }
    }

    /// `(class, subject seed)` for every subject, in emission order.
    pub fn subjects(&self) -> Vec<(ClassTag, u64)> {
        let mut out = Vec::new();
        for (&tag, &n) in &self.class_mix {
            for _ in 0..n {
                let i = out.len() as u64;
                out.push((tag, subject_seed(self.seed, i)));
            }
        }
        out
    }

    /// Builds every subject plus the shared masks.
    pub fn generate(&self) -> Result<(Vec<ModalityPair>, AtlasMask, AtlasMask)> {
        let mut pairs = Vec::new();
        let mut masks = None;
        for (i, (tag, seed)) in self.subjects().into_iter().enumerate() {
            let (mut pair, mf, md) = make_phantom_pair(seed, &self.phantom(tag))?;
            pair.subject_id = format!("sub-{i:03}");
            pairs.push(pair);
            masks.get_or_insert((mf, md));
        }
        let (mf, md) = match masks {
            Some(m) => m,
            None => {
                let a = build_atlas(&self.phantom(ClassTag::NC))?;
                (a.mask.clone(), a.mask)
            }
        };
        Ok((pairs, mf, md))
    }
}

/// SplitMix64 finalizer used to derive independent seeds.
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn subject_seed(dataset_seed: u64, index: u64) -> u64 {
    mix_seed(dataset_seed ^ 0x5EED_0F_5B1EC7, index)
}

struct Atlas {
    support: Vec<bool>,
    /// normalized ellipsoidal radius per voxel (< 1 inside the support)
    radius: Vec<f64>,
    mask: AtlasMask,
}

fn build_atlas(cfg: &PhantomConfig) -> Result<Atlas> {
    let dims = cfg.dims;
    let n = voxel_count(dims);
    if n == 0 {
        return Err(Error::InvalidArgument("phantom dims must be nonzero".into()));
    }
    if cfg.k_regions > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "k_regions = {} exceeds the label range",
            cfg.k_regions
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(cfg.seed, 0xA71A5));
    let center: [f64; 3] =
        std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0 + rng.gen_range(-0.5..0.5));
    let semi: [f64; 3] =
        std::array::from_fn(|a| (0.42 * dims[a] as f64 * rng.gen_range(0.95..1.05)).max(0.75));

    let mut support = vec![false; n];
    let mut radius = vec![0.0; n];
    let mut inside = Vec::new();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = x + dims[0] * (y + dims[1] * z);
                let p = [x as f64, y as f64, z as f64];
                let r2: f64 = (0..3).map(|a| ((p[a] - center[a]) / semi[a]).powi(2)).sum();
                radius[i] = r2.sqrt();
                if r2 < 1.0 {
                    support[i] = true;
                    inside.push(i);
                }
            }
        }
    }
    let k = cfg.k_regions;
    if k > inside.len() {
        return Err(Error::InvalidArgument(format!(
            "k_regions = {k} exceeds the {} voxels inside the phantom support",
            inside.len()
        )));
    }

    let min_dim = dims.iter().copied().min().unwrap_or(1) as f64;
    let blob_radius = (0.13 * min_dim).max(1.0);
    let coords = |i: usize| {
        [
            (i % dims[0]) as f64,
            ((i / dims[0]) % dims[1]) as f64,
            (i / (dims[0] * dims[1])) as f64,
        ]
    };
    for _attempt in 0..64 {
        // Region centers are drawn from inner support voxels.
        let inner: Vec<usize> = inside.iter().copied().filter(|&i| radius[i] < 0.7).collect();
        let pool = if inner.len() >= k { &inner } else { &inside };
        let mut centers: Vec<[f64; 3]> = Vec::with_capacity(k);
        let mut used = std::collections::HashSet::new();
        while centers.len() < k {
            let i = pool[rng.gen_range(0..pool.len())];
            if used.insert(i) {
                centers.push(coords(i));
            }
        }
        let mut labels = vec![0u16; n];
        for &i in &inside {
            let p = coords(i);
            let mut best = None;
            for (r, c) in centers.iter().enumerate() {
                let d2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                if d2 <= blob_radius * blob_radius && best.map_or(true, |(_, bd)| d2 < bd) {
                    best = Some((r, d2));
                }
            }
            if let Some((r, _)) = best {
                labels[i] = r as u16 + 1;
            }
        }
        if let Ok(mask) = AtlasMask::new(dims, labels, k as u16) {
            return Ok(Atlas {
                support,
                radius,
                mask,
            });
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not place {k} non-empty regions in dims {dims:?}"
    )))
}

/// Per-region activation offsets `(fMRI-like, dMRI-like)` for one subject.
///
/// The sample correlation across regions equals the class tag's target
/// correlation (positive for NC, negative for MCI/AD) whenever `k >= 3`.
pub fn region_offsets(subject_seed: u64, cfg: &PhantomConfig) -> (Vec<f64>, Vec<f64>) {
    let k = cfg.k_regions;
    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(subject_seed, 0x0FF5E7));
    let rho = cfg.class_tag.offset_correlation();
    let s = cfg.offset_scale;
    if k == 0 {
        return (vec![], vec![]);
    }
    if k == 1 {
        let g: f64 = rng.sample(StandardNormal);
        return (vec![s * g], vec![s * rho * g]);
    }
    let draw = |rng: &mut ChaCha20Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let m = v.iter().sum::<f64>() / k as f64;
        v.into_iter().map(|x| x - m).collect()
    };
    let unit = |v: Vec<f64>| -> Vec<f64> {
        let sd = (v.iter().map(|x| x * x).sum::<f64>() / k as f64).sqrt();
        if sd > 1e-12 {
            v.into_iter().map(|x| x / sd).collect()
        } else {
            vec![0.0; k]
        }
    };
    let u = unit(draw(&mut rng));
    let mut w = draw(&mut rng);
    let proj = w.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() / k as f64;
    w.iter_mut().zip(&u).for_each(|(a, b)| *a -= proj * b);
    let w = unit(w);
    let c = (1.0 - rho * rho).sqrt();
    let f = u.iter().map(|x| s * x).collect();
    let d = u.iter().zip(&w).map(|(a, b)| s * (rho * a + c * b)).collect();
    (f, d)
}

/// Builds one subject's paired volumes and the two (shared-anatomy) atlas masks.
pub fn make_phantom_pair(
    subject_seed: u64,
    cfg: &PhantomConfig,
) -> Result<(ModalityPair, AtlasMask, AtlasMask)> {
    let atlas = build_atlas(cfg)?;
    let dims = cfg.dims;
    let (off_f, off_d) = region_offsets(subject_seed, cfg);
    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(subject_seed, 0xF1E1D));

    // low-frequency subject-specific modulation
    let waves: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let k: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.5..2.0));
            (k, rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.02..0.05))
        })
        .collect();

    let n = voxel_count(dims);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let labels = atlas.mask.labels();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = x + dims[0] * (y + dims[1] * z);
                if !atlas.support[i] {
                    continue;
                }
                let rho = atlas.radius[i];
                let p = [
                    x as f64 / dims[0] as f64,
                    y as f64 / dims[1] as f64,
                    z as f64 / dims[2] as f64,
                ];
                let wave: f64 = waves
                    .iter()
                    .map(|(k, phase, amp)| {
                        amp * (std::f64::consts::TAU * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2])
                            + phase)
                            .cos()
                    })
                    .sum();
                let base = 0.4 + 0.3 * (1.0 - rho * rho) + wave;
                let d_base = 0.2 + 0.6 * (std::f64::consts::PI * base).sin().powi(2);
                let (of, od) = match labels[i] {
                    0 => (0.0, 0.0),
                    l => (off_f[l as usize - 1], off_d[l as usize - 1]),
                };
                f[i] = (base + of).clamp(0.0, 1.0);
                d[i] = (d_base + od).clamp(0.0, 1.0);
            }
        }
    }
    let pair = ModalityPair {
        f_vol: Volume3::from_raw(dims, [1.0; 3], f),
        d_vol: Volume3::from_raw(dims, [1.0; 3], d),
        subject_id: format!("seed-{subject_seed}"),
        class_tag: cfg.class_tag,
    };
    Ok((pair, atlas.mask.clone(), atlas.mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn small(tag: ClassTag) -> PhantomConfig {
        PhantomConfig {
            dims: [16, 16, 16],
            class_tag: tag,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = make_phantom_pair(3, &small(ClassTag::AD)).unwrap();
        let b = make_phantom_pair(3, &small(ClassTag::AD)).unwrap();
        assert_eq!(a, b);
        let c = make_phantom_pair(4, &small(ClassTag::AD)).unwrap();
        assert_ne!(a.0.f_vol, c.0.f_vol);
        assert_eq!(a.1, c.1, "atlas depends only on the config seed");
    }

    #[test]
    fn background_is_zero_and_values_in_unit_range() {
        let cfg = small(ClassTag::NC);
        let atlas = build_atlas(&cfg).unwrap();
        let (pair, mf, md) = make_phantom_pair(11, &cfg).unwrap();
        assert_eq!(mf, md);
        for i in 0..pair.f_vol.len() {
            if !atlas.support[i] {
                assert_eq!(mf.labels()[i], 0);
                assert_eq!(pair.f_vol.data()[i], 0.0);
                assert_eq!(pair.d_vol.data()[i], 0.0);
            }
        }
        for v in pair.f_vol.data().iter().chain(pair.d_vol.data()) {
            assert!((0.0..=1.0).contains(v));
        }
        assert_eq!(mf.n_regions(), 8);
    }

    #[test]
    fn offset_correlation_sign_follows_class() {
        for seed in 0..20 {
            let (f, d) = region_offsets(seed, &small(ClassTag::NC));
            assert!(corr(&f, &d) > 0.0);
            let (f, d) = region_offsets(seed, &small(ClassTag::AD));
            assert!(corr(&f, &d) < 0.0);
            let (f, d) = region_offsets(seed, &small(ClassTag::MCI));
            assert!(corr(&f, &d) < 0.0);
        }
    }

    #[test]
    fn region_means_carry_the_offsets() {
        // Offsets are visible in the data: the region mean difference between
        // two subjects tracks their offset difference.
        let cfg = small(ClassTag::AD);
        let (pair, mask, _) = make_phantom_pair(5, &cfg).unwrap();
        let (of, _) = region_offsets(5, &cfg);
        let mut sums = vec![0.0; 9];
        let mut counts = vec![0usize; 9];
        for (i, &l) in mask.labels().iter().enumerate() {
            sums[l as usize] += pair.f_vol.data()[i];
            counts[l as usize] += 1;
        }
        let means: Vec<f64> = (1..=8).map(|r| sums[r] / counts[r] as f64).collect();
        assert!(corr(&means, &of) > 0.5);
    }

    #[test]
    fn too_many_regions_is_an_error() {
        let cfg = PhantomConfig {
            dims: [3, 3, 3],
            k_regions: 500,
            ..Default::default()
        };
        assert!(make_phantom_pair(0, &cfg).is_err());
    }

    #[test]
    fn dataset_subjects_follow_class_mix() {
        let cfg = DatasetConfig {
            dims: [12, 12, 12],
            k_regions: 4,
            class_mix: BTreeMap::from([(ClassTag::NC, 2), (ClassTag::AD, 2)]),
            ..Default::default()
        };
        let (pairs, mf, _) = cfg.generate().unwrap();
        let tags: Vec<_> = pairs.iter().map(|p| p.class_tag).collect();
        assert_eq!(tags, vec![ClassTag::NC, ClassTag::NC, ClassTag::AD, ClassTag::AD]);
        assert_eq!(mf.n_regions(), 4);
    }
}
