//! Image-quality and region-fidelity metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::volume::{AtlasMask, Dims, Volume3};

/// `10 log10(peak^2 / MSE)`; identical inputs give `+inf`.
pub fn psnr(a: &Volume3, b: &Volume3, peak: f64) -> Result<f64> {
    a.ensure_same_dims(b, "psnr")?;
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("psnr peak must be positive, got {peak}")));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimConfig {
    pub sigma: f64,
    /// Window support is `2 * radius + 1` voxels per axis.
    pub radius: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            sigma: 1.5,
            radius: 3,
            c1: 1e-4,
            c2: 9e-4,
        }
    }
}

fn gaussian(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let w: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering: the output covers every window that fits.
fn filter_valid(data: &[f64], dims: Dims, w: &[f64]) -> (Vec<f64>, Dims) {
    let k = w.len();
    let mut cur = data.to_vec();
    let mut d = dims;
    for axis in 0..3 {
        let mut nd = d;
        nd[axis] = d[axis] + 1 - k;
        let stride = match axis {
            0 => 1,
            1 => d[0],
            _ => d[0] * d[1],
        };
        let mut out = vec![0.0; nd[0] * nd[1] * nd[2]];
        for z in 0..nd[2] {
            for y in 0..nd[1] {
                for x in 0..nd[0] {
                    let base = x + d[0] * (y + d[1] * z);
                    let mut s = 0.0;
                    for (j, wj) in w.iter().enumerate() {
                        s += wj * cur[base + j * stride];
                    }
                    out[x + nd[0] * (y + nd[1] * z)] = s;
                }
            }
        }
        cur = out;
        d = nd;
    }
    (cur, d)
}

fn ssim_term(mu_a: f64, mu_b: f64, saa: f64, sbb: f64, sab: f64, cfg: &SsimConfig) -> f64 {
    let va = saa - mu_a * mu_a;
    let vb = sbb - mu_b * mu_b;
    let cov = sab - mu_a * mu_b;
    ((2.0 * mu_a * mu_b + cfg.c1) * (2.0 * cov + cfg.c2)) / ((mu_a * mu_a + mu_b * mu_b + cfg.c1) * (va + vb + cfg.c2))
}

/// Mean of the local SSIM map under a Gaussian window. Volumes smaller than
/// the window on any axis use one global window instead.
pub fn ssim(a: &Volume3, b: &Volume3, cfg: &SsimConfig) -> Result<f64> {
    a.ensure_same_dims(b, "ssim")?;
    let dims = a.dims();
    let support = 2 * cfg.radius + 1;
    let (x, y) = (a.data(), b.data());
    let aa: Vec<f64> = x.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = y.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    if dims.iter().any(|&n| n < support) {
        let n = x.len() as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
        return Ok(ssim_term(mean(x), mean(y), mean(&aa), mean(&bb), mean(&ab), cfg));
    }
    let w = gaussian(cfg.sigma, cfg.radius);
    let (mu_a, _) = filter_valid(x, dims, &w);
    let (mu_b, _) = filter_valid(y, dims, &w);
    let (saa, _) = filter_valid(&aa, dims, &w);
    let (sbb, _) = filter_valid(&bb, dims, &w);
    let (sab, _) = filter_valid(&ab, dims, &w);
    let total: f64 = (0..mu_a.len())
        .map(|i| ssim_term(mu_a[i], mu_b[i], saa[i], sbb[i], sab[i], cfg))
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// Mean absolute error per nonzero region label. Empty regions are omitted.
pub fn region_l1(a: &Volume3, b: &Volume3, mask: &AtlasMask) -> Result<BTreeMap<u16, f64>> {
    a.ensure_same_dims(b, "region_l1")?;
    if a.dims() != mask.dims() {
        return Err(Error::DimMismatch(format!(
            "region_l1: volume {:?} vs mask {:?}",
            a.dims(),
            mask.dims()
        )));
    }
    let mut acc: BTreeMap<u16, (f64, usize)> = BTreeMap::new();
    for ((x, y), &l) in a.data().iter().zip(b.data()).zip(mask.labels()) {
        if l > 0 {
            let e = acc.entry(l).or_default();
            e.0 += (x - y).abs();
            e.1 += 1;
        }
    }
    for r in 1..=mask.n_regions() {
        if !acc.contains_key(&r) {
            log::warn!("region {r} has no voxels; omitted from region_l1");
        }
    }
    Ok(acc.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect())
}

/// Mean absolute error over all foreground voxels.
pub fn masked_l1(a: &Volume3, b: &Volume3, mask: &AtlasMask) -> Result<f64> {
    a.ensure_same_dims(b, "masked_l1")?;
    if a.dims() != mask.dims() {
        return Err(Error::DimMismatch(format!(
            "masked_l1: volume {:?} vs mask {:?}",
            a.dims(),
            mask.dims()
        )));
    }
    let (mut s, mut n) = (0.0, 0usize);
    for ((x, y), &l) in a.data().iter().zip(b.data()).zip(mask.labels()) {
        if l > 0 {
            s += (x - y).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("mask has no foreground voxels".into()));
    }
    Ok(s / n as f64)
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("invalid psnr value `{t}`"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityReport {
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub ssim_percent: f64,
    /// Keyed by region label as a string.
    pub region_l1: BTreeMap<String, f64>,
    pub dims: Dims,
}

/// PSNR (peak 1), SSIM and, when a mask is given, per-region L1.
pub fn evaluate(gen: &Volume3, reference: &Volume3, mask: Option<&AtlasMask>) -> Result<QualityReport> {
    if gen.dims() != reference.dims() {
        return Err(Error::DimMismatch(format!(
            "generated volume is {:?} but reference is {:?}",
            gen.dims(),
            reference.dims()
        )));
    }
    let s = ssim(gen, reference, &SsimConfig::default())?;
    let region_l1 = match mask {
        Some(m) => region_l1(gen, reference, m)?
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        None => BTreeMap::new(),
    };
    Ok(QualityReport {
        psnr_db: psnr(gen, reference, 1.0)?,
        ssim: s,
        ssim_percent: 100.0 * s,
        region_l1,
        dims: gen.dims(),
    })
}
