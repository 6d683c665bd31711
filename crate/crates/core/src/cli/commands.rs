use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::store::{self, load_dataset, load_mask, load_stage1, load_stage2, DatasetIndex, SubjectEntry};
use super::CommonArgs;
use crate::error::{Error, Result};
use crate::manifest::{RunManifest, RunStatus};
use crate::metrics::evaluate as quality_report;
use crate::net::PerceptionNet;
use crate::pdm::{sample_pair, stage2_items, train_stage1 as run_stage1, SampleMode, Stage1Config, Stage1Model, Stage1Nets};
use crate::refine::{tissue_forward, train_stage2 as run_stage2, RefinePair, Stage2Config};
use crate::train::{read_state, TrainState};
use crate::volume::{load_nifti, save_nifti, DatasetConfig, Direction, Modality, NiftiImage, Volume3};

pub const DATASET_INDEX: &str = "index.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfigFile {
    #[serde(default)]
    pub dataset: DatasetConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1File {
    /// Directory written by `pds phantom`.
    pub data: PathBuf,
    #[serde(default)]
    pub stage1: Stage1Config,
}

fn stochastic() -> SampleMode {
    SampleMode::Stochastic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2File {
    pub data: PathBuf,
    pub stage1_checkpoint: PathBuf,
    #[serde(default)]
    pub stage2: Stage2Config,
    /// How the frozen stage-1 nets synthesize the refinement inputs.
    #[serde(default = "stochastic")]
    pub sample_mode: SampleMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesizeConfig {
    /// A stage-2 checkpoint.
    pub checkpoint: PathBuf,
    pub source: PathBuf,
    pub direction: Direction,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "stochastic")]
    pub sample_mode: SampleMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub generated: PathBuf,
    pub reference: PathBuf,
    #[serde(default)]
    pub mask: Option<PathBuf>,
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn base_dir(config: &Path) -> PathBuf {
    match config.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Config paths are relative to the config file.
fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn out_path(args: &CommonArgs, default: &str) -> PathBuf {
    args.out.clone().unwrap_or_else(|| base_dir(&args.config).join(default))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config types serialize to JSON")
}

fn reject_pre_refine(args: &CommonArgs, command: &str) -> Result<()> {
    if args.pre_refine {
        return Err(Error::Config(format!("--pre-refine is only valid for synthesize, not {command}")));
    }
    Ok(())
}

pub fn phantom(args: &CommonArgs) -> Result<()> {
    reject_pre_refine(args, "phantom")?;
    let mut cfg: PhantomConfigFile = read_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.dataset.seed = s;
    }
    let (pairs, mask_f, mask_d) = cfg.dataset.generate().map_err(as_config)?;
    let out = out_path(args, "phantom");
    create_dir(&out)?;
    let started = Instant::now();
    let mut manifest = RunManifest::new("phantom", to_value(&cfg));
    manifest.seeds.insert("dataset".into(), cfg.dataset.seed);

    let mut subjects = Vec::new();
    for p in &pairs {
        let entry = SubjectEntry {
            id: p.subject_id.clone(),
            class_tag: p.class_tag,
            f: format!("{}_f.nii", p.subject_id).into(),
            d: format!("{}_d.nii", p.subject_id).into(),
        };
        for (name, vol) in [(&entry.f, &p.f_vol), (&entry.d, &p.d_vol)] {
            save_nifti(&NiftiImage::from(vol.clone()), out.join(name))?;
            manifest.outputs.push(out.join(name));
        }
        subjects.push(entry);
    }
    for (name, mask) in [("mask_f.nii", &mask_f), ("mask_d.nii", &mask_d)] {
        save_nifti(&NiftiImage::from(mask.to_volume()), out.join(name))?;
        manifest.outputs.push(out.join(name));
    }
    let index = DatasetIndex {
        dataset: cfg.dataset.clone(),
        subjects,
        mask_f: "mask_f.nii".into(),
        mask_d: "mask_d.nii".into(),
    };
    let index_path = out.join(DATASET_INDEX);
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&index_path, e))?;
    std::fs::write(&index_path, text).map_err(|e| Error::io(&index_path, e))?;
    manifest.outputs.push(index_path);
    manifest.status = RunStatus::Completed;
    manifest.save(&out.join(MANIFEST_FILE), started.elapsed().as_secs_f64())?;
    log::info!("wrote {} subjects to {}", pairs.len(), out.display());
    Ok(())
}

/// An existing manifest in `out` is resumed when its config matches the
/// new one everywhere except the iteration count at `iterations_ptr`.
fn prepare_run(out: &Path, command: &str, config: &Value, iterations_ptr: &str) -> Result<(RunManifest, Option<PathBuf>)> {
    let path = out.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok((RunManifest::new(command, config.clone()), None));
    }
    let mut old = RunManifest::load(&path)?;
    let strip = |v: &Value| {
        let mut v = v.clone();
        if let Some(x) = v.pointer_mut(iterations_ptr) {
            *x = Value::Null;
        }
        v
    };
    if old.command != command || strip(&old.config) != strip(config) {
        return Err(Error::Config(format!(
            "{} already holds a different {} run; choose another --out",
            out.display(),
            old.command
        )));
    }
    old.config = config.clone();
    old.status = RunStatus::Running;
    let latest = old.latest_checkpoint().map(Path::to_path_buf);
    Ok((old, latest))
}

fn resume_state(path: &Path, cfg: &crate::train::TrainConfig) -> Result<TrainState> {
    let state = read_state(&crate::net::Checkpoint::load(path)?, cfg.optimizer)?;
    if state.iteration > cfg.iterations {
        return Err(Error::Config(format!(
            "checkpoint {} is at iteration {}, beyond the requested {}",
            path.display(),
            state.iteration,
            cfg.iterations
        )));
    }
    Ok(state)
}

/// Shared tail of both training commands: status bookkeeping and the final copy.
fn finish_training(
    outcome: Result<TrainState>,
    manifest: &mut RunManifest,
    manifest_path: &Path,
    final_path: &Path,
    elapsed: f64,
) -> Result<()> {
    match outcome {
        Ok(_) => {
            let latest = manifest
                .latest_checkpoint()
                .ok_or_else(|| Error::Checkpoint("training finished without a checkpoint".into()))?
                .to_path_buf();
            std::fs::copy(&latest, final_path).map_err(|e| Error::io(final_path, e))?;
            if !manifest.outputs.iter().any(|p| p == final_path) {
                manifest.outputs.push(final_path.to_path_buf());
            }
            manifest.status = RunStatus::Completed;
            manifest.save(manifest_path, elapsed)
        }
        Err(e) => {
            if matches!(e, Error::Diverged { .. } | Error::NonFinite { .. }) {
                manifest.status = RunStatus::Diverged;
                manifest.save(manifest_path, elapsed)?;
            }
            Err(e)
        }
    }
}

pub fn train_stage1(args: &CommonArgs) -> Result<()> {
    reject_pre_refine(args, "train-stage1")?;
    let mut file: Stage1File = read_config(&args.config)?;
    if let Some(s) = args.seed {
        file.stage1.train.seed = s;
    }
    let cfg = file.stage1.clone();
    let seed = cfg.train.seed;
    cfg.train.validate().map_err(as_config)?;
    let sched = cfg.schedule.build().map_err(as_config)?;
    PerceptionNet::new(&cfg.perception).map_err(as_config)?;
    let template = Stage1Nets::new(&cfg, seed).map_err(as_config)?;

    let data_dir = resolve(&base_dir(&args.config), &file.data);
    let (pairs, mask_f, mask_d) = load_dataset(&data_dir)?;
    let out = out_path(args, "stage1");
    create_dir(&out)?;
    let (mut manifest, latest) = prepare_run(&out, "train-stage1", &to_value(&file), "/stage1/train/iterations")?;
    let prior = manifest.wall_clock_s;
    let started = Instant::now();
    let state = latest.map(|p| resume_state(&p, &cfg.train)).transpose()?;
    let mut nets = template.clone();
    if let Some(s) = &state {
        nets.set_flat_params(&s.params)?;
        log::info!("resuming stage 1 at iteration {}", s.iteration);
    }
    manifest.seeds.insert("train".into(), seed);
    manifest.seeds.insert("init".into(), seed);
    manifest.schedule = Some(to_value(sched.config()));
    manifest.inputs.insert("data".into(), data_dir);
    let manifest_path = out.join(MANIFEST_FILE);
    manifest.save(&manifest_path, prior)?;

    let outcome = run_stage1(&mut nets, &pairs, (&mask_f, &mask_d), &cfg, state, |s| {
        let path = out.join(format!("stage1-{:06}.pdsc", s.iteration));
        store::stage1_checkpoint(&cfg, &template, (&mask_f, &mask_d), s)?.save(&path)?;
        manifest.add_checkpoint(path.clone());
        manifest.loss_traces.insert("stage1".into(), s.trace.clone());
        manifest.save(&manifest_path, prior + started.elapsed().as_secs_f64())?;
        log::info!(
            "stage 1 iteration {}: loss {:.5}",
            s.iteration,
            s.trace.total.last().copied().unwrap_or(f64::NAN)
        );
        Ok(path)
    });
    let elapsed = prior + started.elapsed().as_secs_f64();
    finish_training(outcome, &mut manifest, &manifest_path, &out.join("stage1.pdsc"), elapsed)
}

pub fn train_stage2(args: &CommonArgs) -> Result<()> {
    reject_pre_refine(args, "train-stage2")?;
    let mut file: Stage2File = read_config(&args.config)?;
    if let Some(s) = args.seed {
        file.stage2.train.seed = s;
    }
    let cfg = file.stage2.clone();
    let seed = cfg.train.seed;
    cfg.train.validate().map_err(as_config)?;
    PerceptionNet::new(&cfg.perception).map_err(as_config)?;
    let template = RefinePair::new(&cfg.refine, seed).map_err(as_config)?;

    let base = base_dir(&args.config);
    let data_dir = resolve(&base, &file.data);
    let (pairs, _, _) = load_dataset(&data_dir)?;
    let s1_path = resolve(&base, &file.stage1_checkpoint);
    if !s1_path.exists() {
        return Err(Error::Checkpoint(format!("missing stage-1 checkpoint {}", s1_path.display())));
    }
    let s1 = load_stage1(&s1_path)?;
    let out = out_path(args, "stage2");
    create_dir(&out)?;
    let (mut manifest, latest) = prepare_run(&out, "train-stage2", &to_value(&file), "/stage2/train/iterations")?;
    let prior = manifest.wall_clock_s;
    let started = Instant::now();
    let state = latest.map(|p| resume_state(&p, &cfg.train)).transpose()?;
    manifest.seeds.insert("train".into(), seed);
    manifest.seeds.insert("synthesis".into(), seed);
    manifest.schedule = Some(to_value(&s1.config.schedule));
    manifest.inputs.insert("data".into(), data_dir);
    manifest.inputs.insert("stage1_checkpoint".into(), s1_path);
    if let Some(t) = s1.checkpoint.meta.get("train").and_then(|t| t.get("trace")) {
        if let Ok(trace) = serde_json::from_value(t.clone()) {
            manifest.loss_traces.insert("stage1".into(), trace);
        }
    }
    let manifest_path = out.join(MANIFEST_FILE);
    manifest.save(&manifest_path, prior)?;

    let sched = s1.config.schedule.build()?;
    let model = Stage1Model {
        nets: &s1.nets,
        mask_f: &s1.mask_f,
        mask_d: &s1.mask_d,
    };
    let items = stage2_items(&model, &pairs, &sched, seed, file.sample_mode)?;
    let mut refine = template.clone();
    if let Some(s) = &state {
        refine.set_flat_params(&s.params)?;
        log::info!("resuming stage 2 at iteration {}", s.iteration);
    }
    let outcome = run_stage2(&mut refine, &items, &cfg, state, |s| {
        let path = out.join(format!("stage2-{:06}.pdsc", s.iteration));
        store::stage2_checkpoint(&s1, &cfg, file.sample_mode, &template, s)?.save(&path)?;
        manifest.add_checkpoint(path.clone());
        manifest.loss_traces.insert("stage2".into(), s.trace.clone());
        manifest.save(&manifest_path, prior + started.elapsed().as_secs_f64())?;
        log::info!(
            "stage 2 iteration {}: loss {:.5}",
            s.iteration,
            s.trace.total.last().copied().unwrap_or(f64::NAN)
        );
        Ok(path)
    });
    let elapsed = prior + started.elapsed().as_secs_f64();
    finish_training(outcome, &mut manifest, &manifest_path, &out.join("stage2.pdsc"), elapsed)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn synthesize(args: &CommonArgs) -> Result<()> {
    let mut cfg: SynthesizeConfig = read_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let base = base_dir(&args.config);
    let ck_path = resolve(&base, &cfg.checkpoint);
    let src_path = resolve(&base, &cfg.source);
    let bundle = load_stage2(&ck_path)?;
    let source = load_nifti(&src_path)?.into_volume()?;
    let s1 = &bundle.stage1;
    let mask_of = |m: Modality| match m {
        Modality::F => &s1.mask_f,
        Modality::D => &s1.mask_d,
    };
    let dir = cfg.direction;
    if source.dims() != mask_of(dir.source()).dims() {
        return Err(Error::DimMismatch(format!(
            "direction {} expects a source on the {:?} grid, got {:?}",
            dir.label(),
            mask_of(dir.source()).dims(),
            source.dims()
        )));
    }
    let started = Instant::now();
    let sched = s1.config.schedule.build()?;
    let model = Stage1Model {
        nets: &s1.nets,
        mask_f: &s1.mask_f,
        mask_d: &s1.mask_d,
    };
    let target_dims = mask_of(dir.target()).dims();
    let gen = sample_pair(&model, dir, &source, target_dims, &sched, cfg.seed, cfg.sample_mode)?;
    let refined = tissue_forward(bundle.refine.get(dir), &gen, &source)?;

    let out = out_path(args, &format!("synth-{}.nii", dir.label()));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut manifest = RunManifest::new("synthesize", to_value(&cfg));
    manifest.seeds.insert("sampling".into(), cfg.seed);
    manifest.schedule = Some(to_value(&s1.config.schedule));
    manifest.inputs.insert("checkpoint".into(), ck_path);
    manifest.inputs.insert("source".into(), src_path);
    save_nifti(&NiftiImage::from(refined), &out)?;
    manifest.outputs.push(out.clone());
    if args.pre_refine {
        let pre = with_suffix(&out, "-pre.nii");
        save_nifti(&NiftiImage::from(gen), &pre)?;
        manifest.outputs.push(pre);
    }
    manifest.status = RunStatus::Completed;
    manifest.save(&with_suffix(&out, ".manifest.json"), started.elapsed().as_secs_f64())
}

pub fn evaluate(args: &CommonArgs) -> Result<()> {
    reject_pre_refine(args, "evaluate")?;
    let cfg: EvaluateConfig = read_config(&args.config)?;
    let started = Instant::now();
    let base = base_dir(&args.config);
    let load = |p: &Path| -> Result<Volume3> { load_nifti(resolve(&base, p))?.into_volume() };
    let gen = load(&cfg.generated)?;
    let reference = load(&cfg.reference)?;
    let mask = cfg.mask.as_ref().map(|p| load_mask(&resolve(&base, p))).transpose()?;
    let report = quality_report(&gen, &reference, mask.as_ref())?;
    let out = out_path(args, "report.json");
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::json(&out, e))?;
    std::fs::write(&out, &text).map_err(|e| Error::io(&out, e))?;
    let mut manifest = RunManifest::new("evaluate", to_value(&cfg));
    manifest.inputs.insert("generated".into(), resolve(&base, &cfg.generated));
    manifest.inputs.insert("reference".into(), resolve(&base, &cfg.reference));
    if let Some(m) = &cfg.mask {
        manifest.inputs.insert("mask".into(), resolve(&base, m));
    }
    manifest.reports.push(to_value(&report));
    manifest.outputs.push(out.clone());
    manifest.status = RunStatus::Completed;
    manifest.save(&with_suffix(&out, ".manifest.json"), started.elapsed().as_secs_f64())?;
    println!("{text}");
    Ok(())
}
