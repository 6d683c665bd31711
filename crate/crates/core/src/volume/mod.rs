//! Volume containers, time-axis segmentation, normalization and resampling.
//!
//! Every grid uses an x-fastest linear layout: voxel `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`.

mod nifti;
mod phantom;
pub(crate) use phantom::mix_seed;

pub use nifti::{load_nifti, save_nifti, NiftiImage};
pub use phantom::{make_phantom_pair, region_offsets, DatasetConfig, PhantomConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts along x, y, z.
pub type Dims = [usize; 3];

/// Number of voxels in a grid of the given dims.
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// A scalar 3D grid with voxel spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl Volume3 {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != voxel_count(dims) {
            return Err(Error::DimMismatch(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("volume voxel {i}"),
            });
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    /// Builds a volume from data known to be finite and correctly sized.
    pub(crate) fn from_raw(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), voxel_count(dims));
        Self {
            dims,
            spacing,
            data,
        }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        Self::from_raw(dims, [1.0; 3], vec![value; voxel_count(dims)])
    }

    /// Evaluates `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::from_raw(dims, [1.0; 3], data)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(
            self.dims,
            self.spacing,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Combines two volumes voxelwise; errors when dims differ.
    pub fn zip_map(&self, other: &Volume3, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_dims(other, "zip_map")?;
        Ok(Self::from_raw(
            self.dims,
            self.spacing,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn ensure_same_dims(&self, other: &Volume3, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }
}

/// A time (or gradient-direction) series of equally shaped 3D frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Series4 {
    dims: Dims,
    spacing: [f64; 3],
    frames: Vec<Volume3>,
}

impl Series4 {
    pub fn new(frames: Vec<Volume3>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidArgument("a series needs at least one frame".into()))?;
        let (dims, spacing) = (first.dims(), first.spacing());
        if let Some(i) = frames.iter().position(|f| f.dims() != dims) {
            return Err(Error::DimMismatch(format!(
                "frame {i} has dims {:?}, expected {:?}",
                frames[i].dims(),
                dims
            )));
        }
        Ok(Self {
            dims,
            spacing,
            frames,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn nt(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[Volume3] {
        &self.frames
    }
}

/// Integer region labels over a grid; 0 is background, regions are `1..=k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasMask {
    dims: Dims,
    labels: Vec<u16>,
    n_regions: u16,
}

impl AtlasMask {
    /// Validates that every label is in `0..=n_regions` and every region is non-empty.
    pub fn new(dims: Dims, labels: Vec<u16>, n_regions: u16) -> Result<Self> {
        if labels.len() != voxel_count(dims) {
            return Err(Error::DimMismatch(format!(
                "mask has {} labels for dims {:?}",
                labels.len(),
                dims
            )));
        }
        let mut counts = vec![0usize; n_regions as usize + 1];
        for &l in &labels {
            if l > n_regions {
                return Err(Error::InvalidArgument(format!(
                    "label {l} exceeds declared region count {n_regions}"
                )));
            }
            counts[l as usize] += 1;
        }
        if let Some(r) = (1..=n_regions as usize).find(|&r| counts[r] == 0) {
            return Err(Error::InvalidArgument(format!("region {r} has no voxels")));
        }
        Ok(Self {
            dims,
            labels,
            n_regions,
        })
    }

    /// Interprets a label volume (e.g. loaded from NIfTI); labels are rounded,
    /// and the region count is the largest label present.
    pub fn from_volume(vol: &Volume3) -> Result<Self> {
        let mut labels = Vec::with_capacity(vol.len());
        for &v in vol.data() {
            let r = v.round();
            if !(0.0..=u16::MAX as f64).contains(&r) || (v - r).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "mask value {v} is not a nonnegative integer label"
                )));
            }
            labels.push(r as u16);
        }
        let k = labels.iter().copied().max().unwrap_or(0);
        Self::new(vol.dims(), labels, k)
    }

    /// All-foreground (`label 1`) or all-background mask.
    pub fn uniform(dims: Dims, foreground: bool) -> Self {
        let (l, k) = if foreground { (1, 1) } else { (0, 0) };
        Self {
            dims,
            labels: vec![l; voxel_count(dims)],
            n_regions: k,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn n_regions(&self) -> u16 {
        self.n_regions
    }

    /// 1.0 where the label is nonzero, else 0.0.
    pub fn binary(&self) -> Vec<f64> {
        self.labels
            .iter()
            .map(|&l| if l > 0 { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn to_volume(&self) -> Volume3 {
        Volume3::from_raw(
            self.dims,
            [1.0; 3],
            self.labels.iter().map(|&l| l as f64).collect(),
        )
    }

    /// Nearest-neighbour resampling onto another grid.
    pub fn resample_nearest(&self, dims: Dims) -> AtlasMask {
        if dims == self.dims {
            return self.clone();
        }
        let src = self.dims;
        let pick = |i: usize, n_dst: usize, n_src: usize| {
            let c = ((i as f64 + 0.5) * n_src as f64 / n_dst as f64).floor() as usize;
            c.min(n_src - 1)
        };
        let mut labels = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            let sz = pick(z, dims[2], src[2]);
            for y in 0..dims[1] {
                let sy = pick(y, dims[1], src[1]);
                for x in 0..dims[0] {
                    let sx = pick(x, dims[0], src[0]);
                    labels.push(self.labels[sx + src[0] * (sy + src[1] * sz)]);
                }
            }
        }
        // Small regions may vanish under downsampling; keep the declared count
        // only when every region survives.
        let k = self.n_regions;
        AtlasMask::new(dims, labels.clone(), k).unwrap_or_else(|_| {
            let k = labels.iter().copied().max().unwrap_or(0);
            AtlasMask {
                dims,
                labels,
                n_regions: k,
            }
        })
    }
}

/// Diagnostic group analog attached to a phantom subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassTag {
    NC,
    MCI,
    AD,
}

impl ClassTag {
    /// Target correlation between the two modalities' region offsets.
    pub fn offset_correlation(self) -> f64 {
        match self {
            ClassTag::NC => 0.8,
            ClassTag::MCI => -0.5,
            ClassTag::AD => -0.8,
        }
    }
}

/// Which modality is synthesized from which.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Synthesize the fMRI-like volume from the dMRI-like one.
    #[serde(rename = "d2f")]
    DToF,
    /// Synthesize the dMRI-like volume from the fMRI-like one.
    #[serde(rename = "f2d")]
    FToD,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::DToF, Direction::FToD];

    pub fn target(self) -> Modality {
        match self {
            Direction::DToF => Modality::F,
            Direction::FToD => Modality::D,
        }
    }

    pub fn source(self) -> Modality {
        match self {
            Direction::DToF => Modality::D,
            Direction::FToD => Modality::F,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::DToF => "d2f",
            Direction::FToD => "f2d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "d2f" | "d->f" | "DToF" => Ok(Direction::DToF),
            "f2d" | "f->d" | "FToD" => Ok(Direction::FToD),
            _ => Err(Error::Config(format!(
                "unknown direction `{s}` (expected d2f or f2d)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// fMRI-like
    F,
    /// dMRI-like
    D,
}

impl Modality {
    pub fn suffix(self) -> &'static str {
        match self {
            Modality::F => "f",
            Modality::D => "d",
        }
    }
}

/// A subject's paired fMRI-like and dMRI-like volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityPair {
    pub f_vol: Volume3,
    pub d_vol: Volume3,
    pub subject_id: String,
    pub class_tag: ClassTag,
}

impl ModalityPair {
    pub fn get(&self, m: Modality) -> &Volume3 {
        match m {
            Modality::F => &self.f_vol,
            Modality::D => &self.d_vol,
        }
    }
}

/// Partitions the frames into `n_segments` contiguous runs and averages each.
///
/// Run lengths differ by at most one; the longer runs come first.
pub fn segment_time_axis(series: &Series4, n_segments: usize) -> Result<Vec<Volume3>> {
    let nt = series.nt();
    if n_segments == 0 || n_segments > nt {
        return Err(Error::InvalidArgument(format!(
            "n_segments must be in 1..={nt}, got {n_segments}"
        )));
    }
    let base = nt / n_segments;
    let extra = nt % n_segments;
    let mut out = Vec::with_capacity(n_segments);
    let mut start = 0;
    for s in 0..n_segments {
        let len = base + usize::from(s < extra);
        let run = &series.frames()[start..start + len];
        let mut acc = vec![0.0; voxel_count(series.dims())];
        for frame in run {
            for (a, &v) in acc.iter_mut().zip(frame.data()) {
                *a += v;
            }
        }
        let inv = 1.0 / len as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        out.push(Volume3::from_raw(series.dims(), series.spacing(), acc));
        start += len;
    }
    Ok(out)
}

/// Run lengths used by [`segment_time_axis`].
pub fn segment_lengths(nt: usize, n_segments: usize) -> Vec<usize> {
    let base = nt / n_segments;
    let extra = nt % n_segments;
    (0..n_segments)
        .map(|s| base + usize::from(s < extra))
        .collect()
}

/// Affine map of `[min, max]` onto `[0, 1]`; constant volumes become zeros.
pub fn normalize(vol: &Volume3) -> Volume3 {
    let (lo, hi) = vol.min_max();
    let range = hi - lo;
    if range <= 0.0 || vol.is_empty() {
        return Volume3::from_raw(vol.dims, vol.spacing, vec![0.0; vol.len()]);
    }
    let mut out = vol.map(|v| (v - lo) / range);
    // Pin the endpoints so the map is exactly idempotent.
    for (o, &v) in out.data.iter_mut().zip(&vol.data) {
        if v == hi {
            *o = 1.0;
        }
    }
    out
}

/// Trilinear resampling onto a new grid, aligning voxel centers.
///
/// Equal dims return an exact copy.
pub fn resample_trilinear(vol: &Volume3, dims: Dims) -> Volume3 {
    if vol.dims() == dims {
        return vol.clone();
    }
    let src = vol.dims();
    let coord = |i: usize, n_dst: usize, n_src: usize| -> (usize, usize, f64) {
        let c = ((i as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n_src - 1);
        (lo, hi, c - lo as f64)
    };
    let spacing = [
        vol.spacing[0] * src[0] as f64 / dims[0] as f64,
        vol.spacing[1] * src[1] as f64 / dims[1] as f64,
        vol.spacing[2] * src[2] as f64 / dims[2] as f64,
    ];
    let mut data = Vec::with_capacity(voxel_count(dims));
    for z in 0..dims[2] {
        let (z0, z1, wz) = coord(z, dims[2], src[2]);
        for y in 0..dims[1] {
            let (y0, y1, wy) = coord(y, dims[1], src[1]);
            for x in 0..dims[0] {
                let (x0, x1, wx) = coord(x, dims[0], src[0]);
                let g = |x, y, z| vol.get(x, y, z);
                let c00 = g(x0, y0, z0) * (1.0 - wx) + g(x1, y0, z0) * wx;
                let c10 = g(x0, y1, z0) * (1.0 - wx) + g(x1, y1, z0) * wx;
                let c01 = g(x0, y0, z1) * (1.0 - wx) + g(x1, y0, z1) * wx;
                let c11 = g(x0, y1, z1) * (1.0 - wx) + g(x1, y1, z1) * wx;
                let c0 = c00 * (1.0 - wy) + c10 * wy;
                let c1 = c01 * (1.0 - wy) + c11 * wy;
                data.push(c0 * (1.0 - wz) + c1 * wz);
            }
        }
    }
    Volume3::from_raw(dims, spacing, data)
}
