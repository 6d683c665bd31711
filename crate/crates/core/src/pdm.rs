//! Pattern-aware dual-modal diffusion: the stage-1 objective, the
//! pattern-aware loss and the cross-modal sampling loop.
//!
//! For direction `d2f` the target chain lives on the fMRI grid, the noise
//! estimator `eps_theta` predicts the fMRI noise and the dMRI volume, noised to
//! the same level, is the conditioning input. `f2d` mirrors it.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::loss::l1_with_grad;
use crate::net::{
    Checkpoint, DenoiserArch, DenoiserNet, LossBreakdown, Network, PerceptionArch, PerceptionNet, Tensor,
};
use crate::refine::{mic_features, mic_loss_grad, Stage2Item, TissueSample};
use crate::schedule::{forward_marginal, reverse_step, NoiseSchedule, ScheduleConfig};
use crate::train::{self, TrainConfig, TrainState};
use crate::volume::{mix_seed, resample_trilinear, AtlasMask, Dims, Direction, Modality, ModalityPair, Volume3};

/// Width and depth of one encoder-decoder; channel counts are fixed by the role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetShape {
    pub widths: Vec<usize>,
    pub res_units: usize,
    pub attention: bool,
    pub time_embed_dim: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        let d = DenoiserArch::default();
        Self {
            widths: d.widths,
            res_units: d.res_units,
            attention: d.attention,
            time_embed_dim: d.time_embed_dim,
        }
    }
}

impl NetShape {
    pub fn arch(&self, in_channels: usize) -> DenoiserArch {
        DenoiserArch {
            in_channels,
            out_channels: 1,
            widths: self.widths.clone(),
            res_units: self.res_units,
            attention: self.attention,
            time_embed_dim: self.time_embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Weights {
    pub noise_l1: f64,
    pub noise_mic: f64,
    pub pattern_l1: f64,
    pub pattern_mic: f64,
    pub l_pa: f64,
    /// Drop the `pattern_l1` terms, which compare the same volumes as `l_pa`.
    pub dedupe_pattern: bool,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Self {
            noise_l1: 1.0,
            noise_mic: 1.0,
            pattern_l1: 1.0,
            pattern_mic: 1.0,
            l_pa: 1.0,
            dedupe_pattern: false,
        }
    }
}

impl Stage1Weights {
    fn pattern_l1_weight(&self) -> f64 {
        if self.dedupe_pattern {
            0.0
        } else {
            self.pattern_l1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub schedule: ScheduleConfig,
    pub eps_theta: NetShape,
    pub eps_s: NetShape,
    pub perception: PerceptionArch,
    pub weights: Stage1Weights,
    /// When false the pattern estimator and all pattern terms are removed.
    pub pattern_aware: bool,
    pub train: TrainConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            eps_theta: NetShape::default(),
            eps_s: NetShape::default(),
            perception: PerceptionArch::default(),
            weights: Stage1Weights::default(),
            pattern_aware: true,
            train: TrainConfig::default(),
        }
    }
}

/// Noise estimators and (optionally) pattern estimators, indexed `[d2f, f2d]`.
#[derive(Debug, Clone)]
pub struct Stage1Nets {
    pub eps_theta: [DenoiserNet; 2],
    pub eps_s: Option<[DenoiserNet; 2]>,
}

fn slot(dir: Direction) -> usize {
    match dir {
        Direction::DToF => 0,
        Direction::FToD => 1,
    }
}

impl Stage1Nets {
    pub fn new(cfg: &Stage1Config, seed: u64) -> Result<Self> {
        let theta_in = if cfg.pattern_aware { 3 } else { 2 };
        let theta = |k: u64| DenoiserNet::new(&cfg.eps_theta.arch(theta_in), mix_seed(seed, k));
        let eps_s = if cfg.pattern_aware {
            let s = |k: u64| DenoiserNet::new(&cfg.eps_s.arch(1), mix_seed(seed, k));
            Some([s(2)?, s(3)?])
        } else {
            None
        };
        Ok(Self {
            eps_theta: [theta(0)?, theta(1)?],
            eps_s,
        })
    }

    pub fn pattern_aware(&self) -> bool {
        self.eps_s.is_some()
    }

    pub fn theta(&self, dir: Direction) -> &DenoiserNet {
        &self.eps_theta[slot(dir)]
    }

    pub fn pattern(&self, dir: Direction) -> Option<&DenoiserNet> {
        self.eps_s.as_ref().map(|s| &s[slot(dir)])
    }

    fn all(&self) -> Vec<&DenoiserNet> {
        let mut v: Vec<&DenoiserNet> = self.eps_theta.iter().collect();
        if let Some(s) = &self.eps_s {
            v.extend(s.iter());
        }
        v
    }

    fn all_mut(&mut self) -> Vec<&mut DenoiserNet> {
        let mut v: Vec<&mut DenoiserNet> = self.eps_theta.iter_mut().collect();
        if let Some(s) = &mut self.eps_s {
            v.extend(s.iter_mut());
        }
        v
    }

    /// Offsets of each net in the flat vector, ordered theta d2f, theta f2d, eps_s d2f, eps_s f2d.
    fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        let mut out = Vec::new();
        for n in self.all() {
            out.push(acc);
            acc += n.param_count();
        }
        out.push(acc);
        out
    }

    pub fn param_count(&self) -> usize {
        self.all().iter().map(|n| n.param_count()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.all().iter().flat_map(|n| n.params().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimMismatch(format!(
                "stage-1 parameter vector has {} entries, expected {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for n in self.all_mut() {
            let k = n.param_count();
            n.params_mut().copy_from_slice(&flat[at..at + k]);
            at += k;
        }
        Ok(())
    }

    pub fn add_to_checkpoint(&self, ck: &mut Checkpoint) -> Result<()> {
        for dir in Direction::BOTH {
            ck.add_network(&format!("stage1.{}.eps_theta", dir.label()), self.theta(dir))?;
            if let Some(s) = self.pattern(dir) {
                ck.add_network(&format!("stage1.{}.eps_s", dir.label()), s)?;
            }
        }
        Ok(())
    }

    pub fn load_from_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        for dir in Direction::BOTH {
            let k = slot(dir);
            ck.load_network(&format!("stage1.{}.eps_theta", dir.label()), &mut self.eps_theta[k])?;
            if let Some(s) = &mut self.eps_s {
                ck.load_network(&format!("stage1.{}.eps_s", dir.label()), &mut s[k])?;
            }
        }
        Ok(())
    }
}

/// `P_x` and `P_n` for one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternPair {
    pub p_x: Volume3,
    pub p_n: Volume3,
    pub direction: Direction,
}

/// Voxelwise product with the binarized mask.
pub fn pattern_project(x_t: &Volume3, mask: &AtlasMask) -> Result<Volume3> {
    if x_t.dims() != mask.dims() {
        return Err(Error::DimMismatch(format!(
            "volume {:?} vs mask {:?}",
            x_t.dims(),
            mask.dims()
        )));
    }
    let data = x_t.data().iter().zip(mask.binary()).map(|(v, m)| v * m).collect();
    Volume3::new(x_t.dims(), x_t.spacing(), data)
}

/// `P_n`: the pattern estimator applied to the masked cross-modal noisy
/// volume, resampled to the target grid, with its output masked as well.
pub fn pattern_estimate(eps_s: &DenoiserNet, x_cross_t: &Volume3, mask: &AtlasMask, t: usize) -> Result<Volume3> {
    let input = pattern_project(&resample_trilinear(x_cross_t, mask.dims()), mask)?;
    let y = eps_s.forward(&Tensor::from_volume(&input), t as f64)?;
    pattern_project(&Volume3::new(mask.dims(), x_cross_t.spacing(), y.data)?, mask)
}

/// Sum over both directions of the mean absolute difference between `P_x` and `P_n`.
pub fn loss_pa(px_f: &Volume3, pn_f: &Volume3, px_d: &Volume3, pn_d: &Volume3) -> Result<f64> {
    px_f.ensure_same_dims(pn_f, "loss_pa fMRI")?;
    px_d.ensure_same_dims(pn_d, "loss_pa dMRI")?;
    let mae = |a: &Volume3, b: &Volume3| {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    };
    Ok(mae(px_f, pn_f) + mae(px_d, pn_d))
}

/// One subject at one noise level with its sampled noises.
#[derive(Debug, Clone)]
pub struct Stage1Batch<'a> {
    pub pair: &'a ModalityPair,
    pub t: usize,
    pub eps_f: Volume3,
    pub eps_d: Volume3,
    pub mask_f: &'a AtlasMask,
    pub mask_d: &'a AtlasMask,
}

fn standard_normal(dims: Dims, rng: &mut impl Rng) -> Volume3 {
    Volume3::from_fn(dims, |_, _, _| rng.sample(StandardNormal))
}

impl<'a> Stage1Batch<'a> {
    /// Draws `eps_f` then `eps_d` from a generator seeded with `seed`.
    pub fn sample(
        pair: &'a ModalityPair,
        t: usize,
        seed: u64,
        mask_f: &'a AtlasMask,
        mask_d: &'a AtlasMask,
    ) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let eps_f = standard_normal(pair.f_vol.dims(), &mut rng);
        let eps_d = standard_normal(pair.d_vol.dims(), &mut rng);
        Self {
            pair,
            t,
            eps_f,
            eps_d,
            mask_f,
            mask_d,
        }
    }

    fn validate(&self) -> Result<()> {
        self.pair.f_vol.ensure_same_dims(&self.eps_f, "fMRI noise")?;
        self.pair.d_vol.ensure_same_dims(&self.eps_d, "dMRI noise")?;
        if self.mask_f.dims() != self.eps_f.dims() || self.mask_d.dims() != self.eps_d.dims() {
            return Err(Error::DimMismatch("mask dims differ from their modality".into()));
        }
        Ok(())
    }

    fn eps(&self, m: Modality) -> &Volume3 {
        match m {
            Modality::F => &self.eps_f,
            Modality::D => &self.eps_d,
        }
    }

    fn mask(&self, m: Modality) -> &AtlasMask {
        match m {
            Modality::F => self.mask_f,
            Modality::D => self.mask_d,
        }
    }
}

/// Per-direction terms before they are assembled into the breakdown.
struct DirectionTerms {
    noise_l1: f64,
    noise_mic: f64,
    pattern: Option<(f64, f64)>,
    pair: Option<PatternPair>,
}

fn direction_terms(
    nets: &Stage1Nets,
    m: &PerceptionNet,
    batch: &Stage1Batch,
    sched: &NoiseSchedule,
    w: &Stage1Weights,
    dir: Direction,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Result<DirectionTerms> {
    let (tm, sm) = (dir.target(), dir.source());
    let t = batch.t;
    let tgt_t = forward_marginal(batch.pair.get(tm), t, batch.eps(tm), sched)?;
    let src_t = forward_marginal(batch.pair.get(sm), t, batch.eps(sm), sched)?;
    let dims = tgt_t.dims();
    let src_r = resample_trilinear(&src_t, dims);
    let mask = batch.mask(tm);
    let theta = nets.theta(dir);

    let pattern = match nets.pattern(dir) {
        Some(s) => {
            let input = pattern_project(&src_r, mask)?;
            let (y, cache) = s.forward_cached(&Tensor::from_volume(&input), t as f64)?;
            let pn = pattern_project(&Volume3::new(dims, tgt_t.spacing(), y.data)?, mask)?;
            let px = pattern_project(&tgt_t, mask)?;
            Some((s, cache, px, pn))
        }
        None => None,
    };

    let mut channels = vec![&tgt_t, &src_r];
    if let Some((_, _, _, pn)) = &pattern {
        channels.push(pn);
    }
    let (pred, theta_cache) = theta.forward_cached(&Tensor::stack(&channels)?, t as f64)?;
    let eps = batch.eps(tm);
    let (noise_l1, mut g_pred) = l1_with_grad(&pred.data, eps.data(), w.noise_l1)?;
    let eps_feats = mic_features(m, dims, eps.data())?;
    let (noise_mic, g_mic) = mic_loss_grad(m, dims, &pred.data, &eps_feats, w.noise_mic)?;
    add_into(&mut g_pred, &g_mic);

    let mut out = DirectionTerms {
        noise_l1,
        noise_mic,
        pattern: None,
        pair: None,
    };
    let Some((s, s_cache, px, pn)) = pattern else {
        if let Some((g_theta, _)) = grads {
            theta.backward(&theta_cache, &Tensor { dims, c: 1, data: g_pred }, g_theta, false);
        }
        return Ok(out);
    };

    let (pat_l1, mut g_pn) = l1_with_grad(pn.data(), px.data(), w.pattern_l1_weight() + w.l_pa)?;
    let px_feats = mic_features(m, dims, px.data())?;
    let (pat_mic, g_pmic) = mic_loss_grad(m, dims, pn.data(), &px_feats, w.pattern_mic)?;
    out.pattern = Some((pat_l1, pat_mic));

    if let Some((g_theta, g_s)) = grads {
        let g_in = theta
            .backward(&theta_cache, &Tensor { dims, c: 1, data: g_pred }, g_theta, true)
            .expect("input gradient requested");
        add_into(&mut g_pn, &g_pmic);
        for ((g, &from_theta), mk) in g_pn.iter_mut().zip(g_in.data.iter().skip(2).step_by(3)).zip(mask.binary()) {
            *g = (*g + from_theta) * mk;
        }
        s.backward(&s_cache, &Tensor { dims, c: 1, data: g_pn }, g_s, false);
    }
    out.pair = Some(PatternPair {
        p_x: px,
        p_n: pn,
        direction: dir,
    });
    Ok(out)
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn assemble(terms: &[DirectionTerms; 2], w: &Stage1Weights) -> Result<LossBreakdown> {
    let mut b = LossBreakdown::default();
    let sfx = |k: usize| Direction::BOTH[k].target().suffix();
    for k in 0..2 {
        b.push(&format!("noise_l1_{}", sfx(k)), terms[k].noise_l1, w.noise_l1)?;
    }
    for k in 0..2 {
        b.push(&format!("noise_mic_{}", sfx(k)), terms[k].noise_mic, w.noise_mic)?;
    }
    if let [Some(a), Some(c)] = [terms[0].pattern, terms[1].pattern] {
        let p = [a, c];
        for k in 0..2 {
            b.push(&format!("pattern_l1_{}", sfx(k)), p[k].0, w.pattern_l1_weight())?;
        }
        for k in 0..2 {
            b.push(&format!("pattern_mic_{}", sfx(k)), p[k].1, w.pattern_mic)?;
        }
        b.push("l_pa", p[0].0 + p[1].0, w.l_pa)?;
    }
    Ok(b)
}

/// Stage-1 breakdown and gradient for [`Stage1Nets::flat_params`].
pub fn stage1_loss_and_grad(
    nets: &Stage1Nets,
    batch: &Stage1Batch,
    m: &PerceptionNet,
    sched: &NoiseSchedule,
    w: &Stage1Weights,
) -> Result<(LossBreakdown, Vec<f64>)> {
    batch.validate()?;
    let off = nets.offsets();
    let mut grads = vec![0.0; nets.param_count()];
    let (theta_g, s_g) = grads.split_at_mut(off[2]);
    let (g_theta_d2f, g_theta_f2d) = theta_g.split_at_mut(off[1]);
    let (g_s_d2f, g_s_f2d) = s_g.split_at_mut(off.get(3).map_or(0, |o| o - off[2]));
    let t0 = direction_terms(nets, m, batch, sched, w, Direction::DToF, Some((g_theta_d2f, g_s_d2f)))?;
    let t1 = direction_terms(nets, m, batch, sched, w, Direction::FToD, Some((g_theta_f2d, g_s_f2d)))?;
    Ok((assemble(&[t0, t1], w)?, grads))
}

pub fn stage1_loss(
    nets: &Stage1Nets,
    batch: &Stage1Batch,
    m: &PerceptionNet,
    sched: &NoiseSchedule,
    w: &Stage1Weights,
) -> Result<LossBreakdown> {
    batch.validate()?;
    let t0 = direction_terms(nets, m, batch, sched, w, Direction::DToF, None)?;
    let t1 = direction_terms(nets, m, batch, sched, w, Direction::FToD, None)?;
    assemble(&[t0, t1], w)
}

/// `P_x`/`P_n` of both directions for a batch, or `None` without pattern estimators.
pub fn pattern_pairs(
    nets: &Stage1Nets,
    batch: &Stage1Batch,
    m: &PerceptionNet,
    sched: &NoiseSchedule,
) -> Result<Option<[PatternPair; 2]>> {
    let w = Stage1Weights::default();
    let a = direction_terms(nets, m, batch, sched, &w, Direction::DToF, None)?;
    let b = direction_terms(nets, m, batch, sched, &w, Direction::FToD, None)?;
    Ok(a.pair.zip(b.pair).map(|(x, y)| [x, y]))
}

/// Trains all stage-1 networks from `state` (or from scratch) up to
/// `cfg.train.iterations`.
pub fn train_stage1<S>(
    nets: &mut Stage1Nets,
    data: &[ModalityPair],
    masks: (&AtlasMask, &AtlasMask),
    cfg: &Stage1Config,
    state: Option<TrainState>,
    save: S,
) -> Result<TrainState>
where
    S: FnMut(&TrainState) -> Result<PathBuf>,
{
    if data.is_empty() {
        return Err(Error::InvalidArgument("stage-1 training needs at least one subject".into()));
    }
    if nets.pattern_aware() != cfg.pattern_aware {
        return Err(Error::Config("networks do not match the pattern_aware setting".into()));
    }
    let sched = cfg.schedule.build()?;
    let m = PerceptionNet::new(&cfg.perception)?;
    let mut state = state.unwrap_or_else(|| TrainState::new(nets.flat_params(), cfg.train.optimizer));
    let mut scratch = nets.clone();
    train::run(
        &mut state,
        &cfg.train,
        |p, rng| {
            scratch.set_flat_params(p)?;
            let draws: Vec<(usize, usize, u64)> = (0..cfg.train.batch_size)
                .map(|_| (rng.gen_range(0..data.len()), rng.gen_range(1..=sched.steps()), rng.gen()))
                .collect();
            let parts = draws
                .par_iter()
                .map(|&(i, t, seed)| {
                    let batch = Stage1Batch::sample(&data[i], t, seed, masks.0, masks.1);
                    stage1_loss_and_grad(&scratch, &batch, &m, &sched, &cfg.weights)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(train::reduce_batch(parts))
        },
        save,
    )?;
    nets.set_flat_params(&state.params)?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Stochastic,
    MeanOnly,
}

/// Anything that can predict the target-chain noise at step `t` given the
/// current chain and the noised source on the target grid.
pub trait NoiseEstimator: Sync {
    fn estimate(&self, dir: Direction, x_t: &Volume3, source_t: &Volume3, t: usize) -> Result<Volume3>;
}

/// Trained stage-1 networks with the atlas masks needed by the pattern estimators.
pub struct Stage1Model<'a> {
    pub nets: &'a Stage1Nets,
    pub mask_f: &'a AtlasMask,
    pub mask_d: &'a AtlasMask,
}

impl NoiseEstimator for Stage1Model<'_> {
    fn estimate(&self, dir: Direction, x_t: &Volume3, source_t: &Volume3, t: usize) -> Result<Volume3> {
        let mask = match dir.target() {
            Modality::F => self.mask_f,
            Modality::D => self.mask_d,
        };
        let mut channels = vec![x_t, source_t];
        let pn = match self.nets.pattern(dir) {
            Some(s) => Some(pattern_estimate(s, source_t, mask, t)?),
            None => None,
        };
        if let Some(p) = &pn {
            channels.push(p);
        }
        let y = self.nets.theta(dir).forward(&Tensor::stack(&channels)?, t as f64)?;
        Volume3::new(x_t.dims(), x_t.spacing(), y.data)
    }
}

/// Synthesizes the target modality of `dir` from the observed `source`.
///
/// Each step re-noises the clean source to level `t` with fresh noise, so the
/// result depends only on the estimator, the inputs, the schedule and `seed`.
pub fn sample_pair<E: NoiseEstimator>(
    est: &E,
    dir: Direction,
    source: &Volume3,
    target_dims: Dims,
    sched: &NoiseSchedule,
    seed: u64,
    mode: SampleMode,
) -> Result<Volume3> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut x = standard_normal(target_dims, &mut rng).with_spacing(source.spacing());
    for t in (1..=sched.steps()).rev() {
        let eps_src = standard_normal(source.dims(), &mut rng);
        let src_t = resample_trilinear(&forward_marginal(source, t, &eps_src, sched)?, target_dims);
        let eps_hat = est.estimate(dir, &x, &src_t, t)?;
        let z = if mode == SampleMode::Stochastic && t > 1 {
            standard_normal(target_dims, &mut rng)
        } else {
            Volume3::zeros(target_dims)
        };
        x = reverse_step(&x, &eps_hat, t, &z, sched)?;
    }
    Ok(x.clamp(0.0, 1.0))
}

/// Seed used by [`stage2_items`] for one subject and direction.
pub fn synthesis_seed(seed: u64, subject: usize, dir: Direction) -> u64 {
    mix_seed(seed, (subject as u64) << 1 | slot(dir) as u64)
}

/// Stage-1 syntheses of both directions for every subject, the fixed inputs
/// of stage-2 training.
pub fn stage2_items<E: NoiseEstimator>(
    est: &E,
    data: &[ModalityPair],
    sched: &NoiseSchedule,
    seed: u64,
    mode: SampleMode,
) -> Result<Vec<Stage2Item>> {
    let jobs: Vec<(usize, Direction)> = (0..data.len())
        .flat_map(|i| Direction::BOTH.into_iter().map(move |d| (i, d)))
        .collect();
    let gens = jobs
        .par_iter()
        .map(|&(i, dir)| {
            let p = &data[i];
            let target = p.get(dir.target());
            sample_pair(est, dir, p.get(dir.source()), target.dims(), sched, synthesis_seed(seed, i, dir), mode)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut gens = gens.into_iter();
    data.iter()
        .map(|p| {
            let mut sample = |dir: Direction| {
                TissueSample::new(
                    gens.next().expect("one synthesis per job"),
                    p.get(dir.source()),
                    p.get(dir.target()).clone(),
                )
            };
            Ok([sample(Direction::DToF)?, sample(Direction::FToD)?])
        })
        .collect()
}
