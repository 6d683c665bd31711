//! Tissue refinement and the tri-planar microstructure loss.

use std::path::PathBuf;

use rayon::prelude::*;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::loss::l1_with_grad;
use crate::net::{
    Checkpoint, LossBreakdown, PerceptionArch, PerceptionNet, RefineArch, RefineNets, Tensor,
};
use crate::train::{self, TrainConfig, TrainState};
use crate::volume::{resample_trilinear, voxel_count, Dims, Direction, Volume3};

/// A 2D map stored `data[i + dims[0] * j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub dims: [usize; 2],
    pub data: Vec<f64>,
}

impl Plane {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i + self.dims[0] * j]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Means along z (axial, `nx x ny`), x (sagittal, `ny x nz`) and y (coronal, `nx x nz`).
#[derive(Debug, Clone, PartialEq)]
pub struct TriPlanes {
    pub axial: Plane,
    pub sagittal: Plane,
    pub coronal: Plane,
}

fn planes_of(dims: Dims, data: &[f64]) -> TriPlanes {
    let [nx, ny, nz] = dims;
    let mut ax = vec![0.0; nx * ny];
    let mut sag = vec![0.0; ny * nz];
    let mut cor = vec![0.0; nx * nz];
    for z in 0..nz {
        for y in 0..ny {
            let row = &data[nx * (y + ny * z)..nx * (y + ny * z + 1)];
            for (x, &v) in row.iter().enumerate() {
                ax[x + nx * y] += v;
                sag[y + ny * z] += v;
                cor[x + nx * z] += v;
            }
        }
    }
    let scale = |v: &mut Vec<f64>, n: usize| v.iter_mut().for_each(|a| *a /= n as f64);
    scale(&mut ax, nz);
    scale(&mut sag, nx);
    scale(&mut cor, ny);
    TriPlanes {
        axial: Plane { dims: [nx, ny], data: ax },
        sagittal: Plane { dims: [ny, nz], data: sag },
        coronal: Plane { dims: [nx, nz], data: cor },
    }
}

pub fn tri_planar_means(vol: &Volume3) -> TriPlanes {
    planes_of(vol.dims(), vol.data())
}

/// Side of the square canvas the planes are zero-padded onto.
fn canvas_side(dims: Dims) -> usize {
    dims.into_iter().max().unwrap_or(0)
}

/// Planes stacked as channels `[coronal, axial, sagittal]` on an `S x S x 1` grid.
fn planes_tensor(dims: Dims, p: &TriPlanes) -> Tensor {
    let s = canvas_side(dims);
    let mut t = Tensor::zeros([s, s, 1], 3);
    for (ch, plane) in [&p.coronal, &p.axial, &p.sagittal].into_iter().enumerate() {
        let [w, h] = plane.dims;
        for j in 0..h {
            for i in 0..w {
                t.data[(i + s * j) * 3 + ch] = plane.get(i, j);
            }
        }
    }
    t
}

/// Pulls a gradient on the stacked planes back to the volume voxels.
fn planes_tensor_backward(dims: Dims, g: &Tensor) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let s = canvas_side(dims);
    let at = |i: usize, j: usize, ch: usize| g.data[(i + s * j) * 3 + ch];
    let mut out = vec![0.0; voxel_count(dims)];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                out[x + nx * (y + ny * z)] =
                    at(x, z, 0) / ny as f64 + at(x, y, 1) / nz as f64 + at(y, z, 2) / nx as f64;
            }
        }
    }
    out
}

/// Feature vector of `M` over the tri-planar means of a volume.
pub fn mic_features(m: &PerceptionNet, dims: Dims, data: &[f64]) -> Result<Vec<f64>> {
    m.features(&planes_tensor(dims, &planes_of(dims, data)))
}

/// `L_mic` against precomputed target features, with the gradient with
/// respect to `gen` scaled by `weight`.
pub fn mic_loss_grad(
    m: &PerceptionNet,
    dims: Dims,
    gen: &[f64],
    target_features: &[f64],
    weight: f64,
) -> Result<(f64, Vec<f64>)> {
    let planes = planes_tensor(dims, &planes_of(dims, gen));
    let (feats, cache) = m.forward_cached(&planes)?;
    let (loss, g_feats) = l1_with_grad(&feats, target_features, weight)?;
    if weight == 0.0 {
        return Ok((loss, vec![0.0; gen.len()]));
    }
    let g_planes = m.input_gradient(&cache, &g_feats);
    Ok((loss, planes_tensor_backward(dims, &g_planes)))
}

/// L1 distance between `M`'s features of the tri-planar means of `gen` and `tar`.
pub fn loss_mic(m: &PerceptionNet, gen: &Volume3, tar: &Volume3) -> Result<f64> {
    gen.ensure_same_dims(tar, "loss_mic")?;
    let a = mic_features(m, gen.dims(), gen.data())?;
    let b = mic_features(m, tar.dims(), tar.data())?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// `B(gen) + U(source)`, resampling `source` onto the grid of `gen` if needed.
pub fn tissue_forward(nets: &RefineNets, gen: &Volume3, source: &Volume3) -> Result<Volume3> {
    let src = resample_trilinear(source, gen.dims());
    let (y, _) = nets.forward_cached(&Tensor::from_volume(gen), &Tensor::from_volume(&src))?;
    Volume3::new(gen.dims(), gen.spacing(), y.data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Weights {
    pub tis_l1: f64,
    pub tis_mic: f64,
    /// Weight of the standalone microstructure term added on top of both directions.
    pub mic: f64,
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Self {
            tis_l1: 1.0,
            tis_mic: 1.0,
            mic: 1.0,
        }
    }
}

/// One refinement network pair per direction.
#[derive(Debug, Clone)]
pub struct RefinePair {
    pub d2f: RefineNets,
    pub f2d: RefineNets,
}

impl RefinePair {
    pub fn new(arch: &RefineArch, seed: u64) -> Result<Self> {
        Ok(Self {
            d2f: RefineNets::new(arch, seed)?,
            f2d: RefineNets::new(arch, seed.wrapping_add(0x100))?,
        })
    }

    pub fn get(&self, dir: Direction) -> &RefineNets {
        match dir {
            Direction::DToF => &self.d2f,
            Direction::FToD => &self.f2d,
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.d2f.flat_params();
        v.extend(self.f2d.flat_params());
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.d2f.param_count();
        if flat.len() != n + self.f2d.param_count() {
            return Err(Error::DimMismatch(format!(
                "refine parameter vector has {} entries, expected {}",
                flat.len(),
                n + self.f2d.param_count()
            )));
        }
        self.d2f.set_flat_params(&flat[..n]);
        self.f2d.set_flat_params(&flat[n..]);
        Ok(())
    }

    pub fn add_to_checkpoint(&self, ck: &mut Checkpoint) -> Result<()> {
        for dir in Direction::BOTH {
            let n = self.get(dir);
            ck.add_network(&format!("refine.{}.backbone", dir.label()), &n.backbone)?;
            ck.add_network(&format!("refine.{}.projector", dir.label()), &n.projector)?;
        }
        Ok(())
    }

    pub fn load_from_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        for dir in Direction::BOTH {
            let n = match dir {
                Direction::DToF => &mut self.d2f,
                Direction::FToD => &mut self.f2d,
            };
            ck.load_network(&format!("refine.{}.backbone", dir.label()), &mut n.backbone)?;
            ck.load_network(&format!("refine.{}.projector", dir.label()), &mut n.projector)?;
        }
        Ok(())
    }
}

/// Inputs for one refinement direction, all on the target grid.
#[derive(Debug, Clone)]
pub struct TissueSample {
    /// Stage-1 synthesized target volume.
    pub gen: Volume3,
    /// Observed source volume resampled to the target grid.
    pub source: Volume3,
    pub target: Volume3,
}

impl TissueSample {
    pub fn new(gen: Volume3, source: &Volume3, target: Volume3) -> Result<Self> {
        gen.ensure_same_dims(&target, "tissue sample")?;
        let source = resample_trilinear(source, gen.dims());
        Ok(Self { gen, source, target })
    }
}

/// Both directions of one subject: `[d2f, f2d]`.
pub type Stage2Item = [TissueSample; 2];

/// Stage-2 breakdown and the gradient for `RefinePair::flat_params`.
pub fn stage2_loss_and_grad(
    nets: &RefinePair,
    m: &PerceptionNet,
    item: &Stage2Item,
    w: &Stage2Weights,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let nd = nets.d2f.param_count();
    let mut grads = vec![0.0; nd + nets.f2d.param_count()];
    let mut b = LossBreakdown::default();
    let mut mic_sum = 0.0;
    for (k, dir) in Direction::BOTH.into_iter().enumerate() {
        let s = &item[k];
        let net = nets.get(dir);
        let (y, cache) = net.forward_cached(&Tensor::from_volume(&s.gen), &Tensor::from_volume(&s.source))?;
        let dims = y.dims;
        let suffix = dir.target().suffix();
        let (l1, mut gy) = l1_with_grad(&y.data, s.target.data(), w.tis_l1)?;
        let tar_feats = mic_features(m, dims, s.target.data())?;
        let (mic, g_mic) = mic_loss_grad(m, dims, &y.data, &tar_feats, w.tis_mic + w.mic)?;
        for (a, g) in gy.iter_mut().zip(&g_mic) {
            *a += g;
        }
        b.push(&format!("tis_l1_{suffix}"), l1, w.tis_l1)?;
        b.push(&format!("tis_mic_{suffix}"), mic, w.tis_mic)?;
        mic_sum += mic;
        let gy = Tensor { dims, c: 1, data: gy };
        let slot = if k == 0 { &mut grads[..nd] } else { &mut grads[nd..] };
        net.backward(&cache, &gy, slot);
    }
    b.push("mic", mic_sum, w.mic)?;
    Ok((b, grads))
}

pub fn stage2_loss(nets: &RefinePair, m: &PerceptionNet, item: &Stage2Item, w: &Stage2Weights) -> Result<LossBreakdown> {
    Ok(stage2_loss_and_grad(nets, m, item, w)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub refine: RefineArch,
    pub perception: PerceptionArch,
    pub weights: Stage2Weights,
    pub train: TrainConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            refine: RefineArch::default(),
            perception: PerceptionArch::default(),
            weights: Stage2Weights::default(),
            train: TrainConfig {
                iterations: 1000,
                ..TrainConfig::default()
            },
        }
    }
}

/// Mean stage-2 loss and gradient over a batch of subjects drawn with replacement.
fn batch_objective(
    nets: &RefinePair,
    m: &PerceptionNet,
    items: &[Stage2Item],
    cfg: &Stage2Config,
    rng: &mut impl Rng,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let picks: Vec<usize> = (0..cfg.train.batch_size).map(|_| rng.gen_range(0..items.len())).collect();
    let parts: Vec<(LossBreakdown, Vec<f64>)> = picks
        .par_iter()
        .map(|&i| stage2_loss_and_grad(nets, m, &items[i], &cfg.weights))
        .collect::<Result<_>>()?;
    Ok(train::reduce_batch(parts))
}

/// Trains both refinement pairs; the stage-1 outputs in `items` stay fixed.
pub fn train_stage2<S>(
    nets: &mut RefinePair,
    items: &[Stage2Item],
    cfg: &Stage2Config,
    state: Option<TrainState>,
    save: S,
) -> Result<TrainState>
where
    S: FnMut(&TrainState) -> Result<PathBuf>,
{
    if items.is_empty() {
        return Err(Error::InvalidArgument("stage-2 training needs at least one subject".into()));
    }
    let m = PerceptionNet::new(&cfg.perception)?;
    let mut state = state.unwrap_or_else(|| TrainState::new(nets.flat_params(), cfg.train.optimizer));
    let mut scratch = nets.clone();
    train::run(
        &mut state,
        &cfg.train,
        |p, rng| {
            scratch.set_flat_params(p)?;
            batch_objective(&scratch, &m, items, cfg, rng)
        },
        save,
    )?;
    nets.set_flat_params(&state.params)?;
    Ok(state)
}
