//! On-disk layout of datasets and checkpoints written by the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::net::Checkpoint;
use crate::pdm::{SampleMode, Stage1Config, Stage1Nets};
use crate::refine::{RefinePair, Stage2Config};
use crate::train::{self, TrainState};
use crate::volume::{load_nifti, AtlasMask, ClassTag, DatasetConfig, ModalityPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    pub class_tag: ClassTag,
    /// File names relative to the dataset directory.
    pub f: PathBuf,
    pub d: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub dataset: DatasetConfig,
    pub subjects: Vec<SubjectEntry>,
    pub mask_f: PathBuf,
    pub mask_d: PathBuf,
}

fn load_volume(path: &Path) -> Result<crate::volume::Volume3> {
    load_nifti(path)?.into_volume()
}

pub fn load_mask(path: &Path) -> Result<AtlasMask> {
    AtlasMask::from_volume(&load_volume(path)?)
}

/// Reads a directory written by `pds phantom`.
pub fn load_dataset(dir: &Path) -> Result<(Vec<ModalityPair>, AtlasMask, AtlasMask)> {
    let index_path = dir.join(super::DATASET_INDEX);
    let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text).map_err(|e| Error::json(&index_path, e))?;
    if index.subjects.is_empty() {
        return Err(Error::InvalidArgument(format!("{} lists no subjects", index_path.display())));
    }
    let pairs = index
        .subjects
        .iter()
        .map(|s| {
            Ok(ModalityPair {
                f_vol: load_volume(&dir.join(&s.f))?,
                d_vol: load_volume(&dir.join(&s.d))?,
                subject_id: s.id.clone(),
                class_tag: s.class_tag,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mask_f = load_mask(&dir.join(&index.mask_f))?;
    let mask_d = load_mask(&dir.join(&index.mask_d))?;
    for p in &pairs {
        if p.f_vol.dims() != mask_f.dims() || p.d_vol.dims() != mask_d.dims() {
            return Err(Error::DimMismatch(format!("subject {} does not match the mask grids", p.subject_id)));
        }
    }
    Ok((pairs, mask_f, mask_d))
}

fn push_mask(ck: &mut Checkpoint, name: &str, mask: &AtlasMask) -> Result<()> {
    let d = mask.dims();
    ck.push(name, d.to_vec(), mask.labels().iter().map(|&l| l as f64).collect())
}

fn read_mask(ck: &Checkpoint, name: &str) -> Result<AtlasMask> {
    let e = ck.require(name)?;
    let dims: [usize; 3] = e
        .shape
        .clone()
        .try_into()
        .map_err(|_| Error::Checkpoint(format!("entry `{name}` is not 3D")))?;
    let labels: Vec<u16> = e.data.iter().map(|&v| v as u16).collect();
    let k = labels.iter().copied().max().unwrap_or(0);
    AtlasMask::new(dims, labels, k)
}

fn meta_field<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: &str) -> Result<T> {
    let v = ck
        .meta
        .get(key)
        .cloned()
        .ok_or_else(|| Error::Checkpoint(format!("metadata has no `{key}`")))?;
    serde_json::from_value(v).map_err(|e| Error::Checkpoint(format!("metadata `{key}`: {e}")))
}

fn expect_kind(ck: &Checkpoint, kind: &str) -> Result<()> {
    match ck.meta.get("kind").and_then(|k| k.as_str()) {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {other:?}"))),
    }
}

/// Stage-1 nets at `state.params`, the masks and the resumable training state.
pub(crate) fn stage1_checkpoint(
    cfg: &Stage1Config,
    template: &Stage1Nets,
    masks: (&AtlasMask, &AtlasMask),
    state: &TrainState,
) -> Result<Checkpoint> {
    let mut nets = template.clone();
    nets.set_flat_params(&state.params)?;
    let mut ck = Checkpoint::new(json!({ "kind": "stage1", "stage1": cfg }));
    nets.add_to_checkpoint(&mut ck)?;
    push_mask(&mut ck, "mask.f", masks.0)?;
    push_mask(&mut ck, "mask.d", masks.1)?;
    train::write_state(&mut ck, state)?;
    Ok(ck)
}

pub struct Stage1Bundle {
    pub config: Stage1Config,
    pub nets: Stage1Nets,
    pub mask_f: AtlasMask,
    pub mask_d: AtlasMask,
    pub checkpoint: Checkpoint,
}

fn stage1_from(ck: Checkpoint, cfg: Stage1Config) -> Result<Stage1Bundle> {
    let mut nets = Stage1Nets::new(&cfg, cfg.train.seed)?;
    nets.load_from_checkpoint(&ck)?;
    Ok(Stage1Bundle {
        config: cfg,
        nets,
        mask_f: read_mask(&ck, "mask.f")?,
        mask_d: read_mask(&ck, "mask.d")?,
        checkpoint: ck,
    })
}

pub fn load_stage1(path: &Path) -> Result<Stage1Bundle> {
    let ck = Checkpoint::load(path)?;
    expect_kind(&ck, "stage1")?;
    let cfg = meta_field(&ck, "stage1")?;
    stage1_from(ck, cfg)
}

pub(crate) fn stage2_checkpoint(
    s1: &Stage1Bundle,
    cfg: &Stage2Config,
    mode: SampleMode,
    template: &RefinePair,
    state: &TrainState,
) -> Result<Checkpoint> {
    let mut refine = template.clone();
    refine.set_flat_params(&state.params)?;
    let mut ck = Checkpoint::new(json!({
        "kind": "stage2",
        "stage1": s1.config,
        "stage2": cfg,
        "sample_mode": mode,
    }));
    s1.nets.add_to_checkpoint(&mut ck)?;
    push_mask(&mut ck, "mask.f", &s1.mask_f)?;
    push_mask(&mut ck, "mask.d", &s1.mask_d)?;
    refine.add_to_checkpoint(&mut ck)?;
    train::write_state(&mut ck, state)?;
    Ok(ck)
}

pub struct Stage2Bundle {
    pub stage1: Stage1Bundle,
    pub config: Stage2Config,
    pub sample_mode: SampleMode,
    pub refine: RefinePair,
}

pub fn load_stage2(path: &Path) -> Result<Stage2Bundle> {
    let ck = Checkpoint::load(path)?;
    expect_kind(&ck, "stage2")?;
    let s1_cfg: Stage1Config = meta_field(&ck, "stage1")?;
    let config: Stage2Config = meta_field(&ck, "stage2")?;
    let sample_mode = meta_field(&ck, "sample_mode")?;
    let mut refine = RefinePair::new(&config.refine, config.train.seed)?;
    refine.load_from_checkpoint(&ck)?;
    Ok(Stage2Bundle {
        stage1: stage1_from(ck, s1_cfg)?,
        config,
        sample_mode,
        refine,
    })
}
