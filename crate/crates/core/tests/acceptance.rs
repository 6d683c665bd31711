//! One test per acceptance criterion. Each writes a single
//! `criterion N: PASS|FAIL ...` line to stderr before asserting.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pds_core::cli::{self, EXIT_OK};
use pds_core::manifest::RunManifest;
use pds_core::metrics::{masked_l1, psnr, ssim, SsimConfig};
use pds_core::net::{
    finite_difference_check, grad_check, BackboneInit, BackboneNet, DenoiserArch, DenoiserNet, LossKind, LossSpec,
    Network, PerceptionArch, PerceptionNet, RefineArch, Tensor, GRAD_CHECK_STEP,
};
use pds_core::pdm::{
    loss_pa, pattern_estimate, pattern_project, sample_pair, stage1_loss, stage1_loss_and_grad, stage2_items,
    train_stage1, NetShape, NoiseEstimator, SampleMode, Stage1Batch, Stage1Config, Stage1Model, Stage1Nets,
};
use pds_core::refine::{
    loss_mic, stage2_loss, stage2_loss_and_grad, tissue_forward, train_stage2, tri_planar_means, RefinePair,
    Stage2Config, Stage2Weights, TissueSample,
};
use pds_core::schedule::{build_schedule, forward_marginal, forward_step, reverse_step, NoiseSchedule};
use pds_core::volume::{
    load_nifti, save_nifti, AtlasMask, ClassTag, DatasetConfig, Dims, Direction, ModalityPair, NiftiImage, Series4,
    Volume3,
};
use pds_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};

/// Writes straight to stderr so the line shows up even for passing tests.
fn report(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn uniform(dims: Dims, r: &mut ChaCha20Rng, lo: f64, hi: f64) -> Volume3 {
    Volume3::from_fn(dims, |_, _, _| r.gen_range(lo..hi))
}

fn gaussian(dims: Dims, r: &mut ChaCha20Rng) -> Volume3 {
    Volume3::from_fn(dims, |_, _, _| r.sample(StandardNormal))
}

fn random_mask(dims: Dims, k: u16, r: &mut ChaCha20Rng) -> AtlasMask {
    let n: usize = dims.iter().product();
    let mut labels: Vec<u16> = (0..n).map(|_| r.gen_range(0..=k)).collect();
    for l in 1..=k {
        labels[l as usize - 1] = l;
    }
    AtlasMask::new(dims, labels, k).unwrap()
}

fn randomize<N: Network>(net: &mut N, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for p in net.params_mut() {
        *p = r.gen_range(-scale..scale);
    }
}

#[test]
fn criterion_01_schedule_algebra() {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for t_max in [1usize, 3, 50, 1000] {
        let s = build_schedule(t_max, 1e-4, 2e-2).unwrap();
        let mut prod = 1.0;
        let mut r = rng(t_max as u64);
        for t in 1..=t_max {
            prod *= 1.0 - s.beta(t);
            worst = worst.max((s.alpha_bar(t) - prod).abs());
            worst = worst.max((s.gamma(t).powi(2) + s.alpha_bar(t) - 1.0).abs());

            let x0 = uniform([2, 2, 2], &mut r, 0.0, 1.0);
            let eps = gaussian([2, 2, 2], &mut r);
            let xt = forward_marginal(&x0, t, &eps, &s).unwrap();
            let out = reverse_step(&xt, &eps, t, &Volume3::zeros([2, 2, 2]), &s).unwrap();
            let ab_prev = s.alpha_bar(t - 1);
            let c = s.alpha(t).sqrt() * (1.0 - ab_prev) / s.gamma(t);
            for i in 0..8 {
                let want = ab_prev.sqrt() * x0.data()[i] + c * eps.data()[i];
                worst = worst.max((out.data()[i] - want).abs());
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    report(1, worst < 1e-10 && secs < 1.0, &format!("max error {worst:.2e}, {secs:.3}s"));
}

fn gradient_checks() -> Vec<(&'static str, f64)> {
    let dims = [4, 4, 4];
    let mut r = rng(21);
    let mut out = Vec::new();

    let theta_shape = NetShape {
        widths: vec![2, 3],
        time_embed_dim: 4,
        attention: true,
        ..NetShape::default()
    };
    let s_shape = NetShape {
        attention: false,
        ..theta_shape.clone()
    };
    let mut theta = DenoiserNet::new(&theta_shape.arch(3), 1).unwrap();
    randomize(&mut theta, 2, 0.4);
    let x = Tensor {
        dims,
        c: 3,
        data: (0..3 * 64).map(|_| r.gen_range(-1.0..1.0)).collect(),
    };
    let spec = LossSpec {
        kind: LossKind::Mse,
        target: Tensor::from_volume(&uniform(dims, &mut r, -1.0, 1.0)),
        t: 17.0,
    };
    out.push(("eps_theta (attention)", grad_check(&theta, &x, &spec, 96).unwrap()));

    let mut eps_s = DenoiserNet::new(&s_shape.arch(1), 3).unwrap();
    randomize(&mut eps_s, 4, 0.4);
    let x1 = Tensor::from_volume(&uniform(dims, &mut r, -1.0, 1.0));
    out.push(("eps_s", grad_check(&eps_s, &x1, &spec, 96).unwrap()));

    let mut b = BackboneNet::new(3, BackboneInit::Identity, 5).unwrap();
    randomize(&mut b, 6, 0.4);
    out.push(("backbone B", grad_check(&b, &x1, &spec, 96).unwrap()));

    let mut u = DenoiserNet::new(
        &DenoiserArch {
            widths: vec![2, 3],
            time_embed_dim: 0,
            ..DenoiserArch::default()
        },
        7,
    )
    .unwrap();
    randomize(&mut u, 8, 0.4);
    let spec0 = LossSpec { t: 0.0, ..spec.clone() };
    out.push(("projector U", grad_check(&u, &x1, &spec0, 96).unwrap()));

    for pattern_aware in [true, false] {
        let cfg = Stage1Config {
            eps_theta: theta_shape.clone(),
            eps_s: s_shape.clone(),
            perception: PerceptionArch {
                widths: vec![3],
                ..PerceptionArch::default()
            },
            pattern_aware,
            ..Stage1Config::default()
        };
        let mut nets = Stage1Nets::new(&cfg, 9).unwrap();
        let p: Vec<f64> = (0..nets.param_count()).map(|_| r.gen_range(-0.3..0.3)).collect();
        nets.set_flat_params(&p).unwrap();
        let (data, mf, md) = tiny_dataset([4, 4, 4], 1, 3);
        let batch = Stage1Batch::sample(&data[0], 23, 10, &mf, &md);
        let m = PerceptionNet::new(&cfg.perception).unwrap();
        let sched = cfg.schedule.build().unwrap();
        let (_, g) = stage1_loss_and_grad(&nets, &batch, &m, &sched, &cfg.weights).unwrap();
        let mut probe = nets.clone();
        let err = finite_difference_check(&p, &g, 128, 11, GRAD_CHECK_STEP, |q| {
            probe.set_flat_params(q)?;
            Ok(stage1_loss(&probe, &batch, &m, &sched, &cfg.weights)?.total)
        })
        .unwrap();
        out.push((if pattern_aware { "stage-1 loss" } else { "stage-1 loss, pattern terms off" }, err));
    }

    let arch = RefineArch {
        backbone_width: 2,
        backbone_init: BackboneInit::Identity,
        projector: DenoiserArch {
            widths: vec![2],
            time_embed_dim: 0,
            ..DenoiserArch::default()
        },
    };
    let mut pair = RefinePair::new(&arch, 12).unwrap();
    let p: Vec<f64> = pair.flat_params().iter().map(|_| r.gen_range(-0.4..0.4)).collect();
    pair.set_flat_params(&p).unwrap();
    let m = PerceptionNet::new(&PerceptionArch {
        widths: vec![3],
        ..PerceptionArch::default()
    })
    .unwrap();
    let mut vol = || uniform(dims, &mut r, 0.0, 1.0);
    let item = [
        TissueSample::new(vol(), &vol(), vol()).unwrap(),
        TissueSample::new(vol(), &vol(), vol()).unwrap(),
    ];
    let w = Stage2Weights::default();
    let (_, g) = stage2_loss_and_grad(&pair, &m, &item, &w).unwrap();
    let mut probe = pair.clone();
    let err = finite_difference_check(&p, &g, 128, 13, GRAD_CHECK_STEP, |q| {
        probe.set_flat_params(q)?;
        Ok(stage2_loss(&probe, &m, &item, &w)?.total)
    })
    .unwrap();
    out.push(("stage-2 loss", err));
    out
}

#[test]
fn criterion_02_gradient_verification() {
    let started = Instant::now();
    let checks = gradient_checks();
    let secs = started.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    let detail: Vec<String> = checks.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    report(2, worst < 1e-4 && secs < 120.0, &format!("[{}], {secs:.1}s", detail.join(", ")));
}

#[test]
fn criterion_03_distributional_consistency() {
    let started = Instant::now();
    let s = build_schedule(50, 1e-4, 2e-2).unwrap();
    let n = 10_000;
    let dims = [2, 2, 2];
    let mut r = rng(31);
    let x0 = uniform(dims, &mut r, 0.0, 1.0);
    let mut worst = 0.0f64;
    for t in [1usize, 7, 50] {
        let mut iter_samples: Vec<Vec<f64>> = (0..8).map(|_| Vec::with_capacity(n)).collect();
        let mut shot_samples: Vec<Vec<f64>> = (0..8).map(|_| Vec::with_capacity(n)).collect();
        for _ in 0..n {
            let mut x = x0.clone();
            for step in 1..=t {
                x = forward_step(&x, step, &gaussian(dims, &mut r), &s).unwrap();
            }
            let y = forward_marginal(&x0, t, &gaussian(dims, &mut r), &s).unwrap();
            for i in 0..8 {
                iter_samples[i].push(x.data()[i]);
                shot_samples[i].push(y.data()[i]);
            }
        }
        for i in 0..8 {
            let (m1, v1, k1) = moments(&iter_samples[i]);
            let (m2, v2, k2) = moments(&shot_samples[i]);
            let se_mean = ((v1 + v2) / n as f64).sqrt();
            let se_var = ((k1 - v1 * v1 + k2 - v2 * v2) / n as f64).sqrt();
            worst = worst.max((m1 - m2).abs() / se_mean).max((v1 - v2).abs() / se_var);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    report(3, worst < 3.0 && secs < 60.0, &format!("largest gap {worst:.2} standard errors, {secs:.1}s"));
}

/// Mean, variance and fourth central moment.
fn moments(x: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    let k = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
    (m, v, k)
}

const GRID: f64 = 1.0 / (1u64 << 20) as f64;

fn dyadic(dims: Dims, r: &mut ChaCha20Rng) -> Volume3 {
    Volume3::from_fn(dims, |_, _, _| r.gen_range(0..1u64 << 20) as f64 * GRID)
}

#[test]
fn criterion_04_projection_invariance() {
    let m = PerceptionNet::new(&PerceptionArch::default()).unwrap();
    let mut r = rng(41);
    let (mut planes_ok, mut worst) = (0, 0.0f64);
    for _ in 0..100 {
        let dims = [8, 8, [4, 8, 16][r.gen_range(0..3)]];
        let x = dyadic(dims, &mut r);
        let target = dyadic(dims, &mut r);
        let at = [r.gen_range(0..7), r.gen_range(0..7), r.gen_range(0..dims[2] - 1)];
        let d = r.gen_range(1..4096) as f64 * GRID;
        let mut y = x.clone();
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    let s = if (i + j + k) % 2 == 0 { d } else { -d };
                    let (a, b, c) = (at[0] + i, at[1] + j, at[2] + k);
                    y.set(a, b, c, x.get(a, b, c) + s);
                }
            }
        }
        let (p, q) = (tri_planar_means(&x), tri_planar_means(&y));
        if p.axial == q.axial && p.sagittal == q.sagittal && p.coronal == q.coronal {
            planes_ok += 1;
        }
        let diff = (loss_mic(&m, &x, &target).unwrap() - loss_mic(&m, &y, &target).unwrap()).abs();
        worst = worst.max(diff);
    }
    report(
        4,
        planes_ok == 100 && worst <= 1e-12,
        &format!("planes exact in {planes_ok}/100, max mic change {worst:.1e}"),
    );
}

#[test]
fn criterion_05_mask_locality() {
    let mut r = rng(51);
    let shape = NetShape {
        widths: vec![2, 3],
        time_embed_dim: 4,
        ..NetShape::default()
    };
    let mut unchanged = 0;
    for case in 0..100 {
        let (df, dd) = ([4, 4, 4], [4, 4, [2, 4, 8][case % 3]]);
        let (mf, md) = (random_mask(df, 3, &mut r), random_mask(dd, 2, &mut r));
        let mut nets = [
            DenoiserNet::new(&shape.arch(1), case as u64).unwrap(),
            DenoiserNet::new(&shape.arch(1), case as u64 + 1000).unwrap(),
        ];
        for (k, n) in nets.iter_mut().enumerate() {
            randomize(n, (case * 2 + k) as u64, 0.5);
        }
        let t = r.gen_range(1..=50);
        let inputs = [
            uniform(df, &mut r, -2.0, 2.0),
            uniform(df, &mut r, -2.0, 2.0),
            uniform(dd, &mut r, -2.0, 2.0),
            uniform(dd, &mut r, -2.0, 2.0),
        ];
        let lpa = |v: &[Volume3]| -> f64 {
            let px_f = pattern_project(&v[0], &mf).unwrap();
            let pn_f = pattern_estimate(&nets[0], &v[1], &mf, t).unwrap();
            let px_d = pattern_project(&v[2], &md).unwrap();
            let pn_d = pattern_estimate(&nets[1], &v[3], &md, t).unwrap();
            loss_pa(&px_f, &pn_f, &px_d, &pn_d).unwrap()
        };
        let base = lpa(&inputs);
        let mut edited = inputs.clone();
        for (k, v) in edited.iter_mut().enumerate() {
            let mask = if k < 2 { &mf } else { &md };
            for (x, &l) in v.data_mut().iter_mut().zip(mask.labels()) {
                if l == 0 {
                    *x = r.gen_range(-1e3..1e3);
                }
            }
        }
        if lpa(&edited) == base {
            unchanged += 1;
        }
    }
    report(5, unchanged == 100, &format!("loss_pa bitwise unchanged in {unchanged}/100 cases"));
}

struct Planted {
    x0: Volume3,
    sched: NoiseSchedule,
}

impl NoiseEstimator for Planted {
    fn estimate(&self, _: Direction, x_t: &Volume3, _: &Volume3, t: usize) -> Result<Volume3> {
        let (a, g) = (self.sched.alpha_bar(t).sqrt(), self.sched.gamma(t));
        x_t.zip_map(&self.x0, |x, x0| (x - a * x0) / g)
    }
}

#[test]
fn criterion_06_planted_noise_sampling() {
    let sched = build_schedule(10, 1e-4, 2e-2).unwrap();
    let mut r = rng(61);
    let mut worst = 0.0f64;
    for case in 0..5 {
        let x0 = uniform([8, 8, 8], &mut r, 0.0, 1.0);
        let source = uniform([8, 8, 4], &mut r, 0.0, 1.0);
        let oracle = Planted {
            x0: x0.clone(),
            sched: sched.clone(),
        };
        let out = sample_pair(&oracle, Direction::DToF, &source, [8, 8, 8], &sched, case, SampleMode::MeanOnly).unwrap();
        let mae = out.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x0.len() as f64;
        worst = worst.max(mae);
    }
    report(6, worst < 1e-6, &format!("max MAE {worst:.1e} over 5 cases"));
}

fn tiny_dataset(dims: Dims, n: usize, k: usize) -> (Vec<ModalityPair>, AtlasMask, AtlasMask) {
    DatasetConfig {
        dims,
        k_regions: k,
        class_mix: BTreeMap::from([(ClassTag::AD, n)]),
        ..DatasetConfig::default()
    }
    .generate()
    .unwrap()
}

const SEEDS: [u64; 3] = [0, 1, 2];
const SMOOTHING: usize = 100;

struct SeedRun {
    loss_ratio: f64,
    l1_pattern: f64,
    l1_ablated: f64,
    psnr_stage1: f64,
    psnr_refined: f64,
}

fn held_out_l1(items: &[[TissueSample; 2]], masks: [&AtlasMask; 2]) -> f64 {
    let mut total = 0.0;
    for it in items {
        for k in 0..2 {
            total += masked_l1(&it[k].gen, &it[k].target, masks[k]).unwrap();
        }
    }
    total / (2 * items.len()) as f64
}

fn desk_run(seed: u64, train: &[ModalityPair], test: &[ModalityPair], mf: &AtlasMask, md: &AtlasMask) -> SeedRun {
    let masks = [mf, md];
    let stage1 = |pattern_aware: bool| {
        let mut cfg = Stage1Config {
            pattern_aware,
            ..Stage1Config::default()
        };
        cfg.train.seed = seed;
        let mut nets = Stage1Nets::new(&cfg, seed).unwrap();
        let state = train_stage1(&mut nets, train, (mf, md), &cfg, None, |_| Ok(PathBuf::new())).unwrap();
        (cfg, nets, state)
    };

    let (cfg, nets, state) = stage1(true);
    let (first, last) = state.trace.smoothed_endpoints(SMOOTHING).unwrap();
    let sched = cfg.schedule.build().unwrap();
    let model = Stage1Model { nets: &nets, mask_f: mf, mask_d: md };
    let held_out = stage2_items(&model, test, &sched, seed, SampleMode::Stochastic).unwrap();
    let l1_pattern = held_out_l1(&held_out, masks);

    let mut c2 = Stage2Config::default();
    c2.train.seed = seed;
    let train_items = stage2_items(&model, train, &sched, seed, SampleMode::Stochastic).unwrap();
    let mut refine = RefinePair::new(&c2.refine, seed).unwrap();
    train_stage2(&mut refine, &train_items, &c2, None, |_| Ok(PathBuf::new())).unwrap();
    let (mut p0, mut p1) = (0.0, 0.0);
    for it in &held_out {
        for (k, dir) in Direction::BOTH.into_iter().enumerate() {
            let refined = tissue_forward(refine.get(dir), &it[k].gen, &it[k].source).unwrap();
            p0 += psnr(&it[k].gen, &it[k].target, 1.0).unwrap();
            p1 += psnr(&refined, &it[k].target, 1.0).unwrap();
        }
    }
    let n = (2 * held_out.len()) as f64;

    let (cfg_off, nets_off, _) = stage1(false);
    let sched_off = cfg_off.schedule.build().unwrap();
    let model_off = Stage1Model { nets: &nets_off, mask_f: mf, mask_d: md };
    let ablated = stage2_items(&model_off, test, &sched_off, seed, SampleMode::Stochastic).unwrap();

    SeedRun {
        loss_ratio: last / first,
        l1_pattern,
        l1_ablated: held_out_l1(&ablated, masks),
        psnr_stage1: p0 / n,
        psnr_refined: p1 / n,
    }
}

/// Full-size pipeline on 32^3 phantoms with default settings; subjects 4..8
/// of one atlas are held out for evaluation.
#[test]
fn criterion_07_end_to_end_desk_run() {
    let started = Instant::now();
    let (all, mf, md) = DatasetConfig {
        class_mix: BTreeMap::from([(ClassTag::AD, 8)]),
        ..DatasetConfig::default()
    }
    .generate()
    .unwrap();
    let (train, test) = all.split_at(4);
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| desk_run(s, train, test, &mf, &md)).collect();
    let mean = |f: fn(&SeedRun) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;

    let worst_ratio = runs.iter().map(|r| r.loss_ratio).fold(0.0, f64::max);
    let lift = mean(|r| r.psnr_refined) - mean(|r| r.psnr_stage1);
    let (l1_on, l1_off) = (mean(|r| r.l1_pattern), mean(|r| r.l1_ablated));
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let core_minutes = minutes * cores as f64;

    let a = worst_ratio < 0.7;
    let b = lift >= 1.0;
    let c = l1_on <= l1_off;
    let budget = core_minutes <= 240.0;
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "ratio {:.3} psnr {:.2}->{:.2} l1 {:.4}/{:.4}",
                r.loss_ratio, r.psnr_stage1, r.psnr_refined, r.l1_pattern, r.l1_ablated
            )
        })
        .collect();
    report(
        7,
        a && b && c && budget,
        &format!(
            "(a) worst smoothed ratio {worst_ratio:.3} {}; (b) refined lift {lift:.2} dB {}; \
             (c) masked L1 {l1_on:.4} vs ablated {l1_off:.4} {}; runtime {minutes:.1} min x {cores} cores {}; seeds [{}]",
            ok(a),
            ok(b),
            ok(c),
            ok(budget),
            per_seed.join("; ")
        ),
    );
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "failed"
    }
}

fn write_json(path: &Path, v: &Value) -> PathBuf {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_path_buf()
}

fn pds(args: &[&str]) -> i32 {
    let mut full = vec!["pds"];
    full.extend_from_slice(args);
    cli::run(full)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Re-runs a command from the config and seeds its manifest recorded.
fn replay(command: &str, manifest: &Path, dir: &Path, out: &Path, extra: &[&str]) {
    let m = RunManifest::load(manifest).unwrap();
    assert_eq!(m.command, command);
    let cfg = write_json(&dir.join(format!("replay-{command}.json")), &m.config);
    let mut args = vec![command, "--config", p(&cfg), "--out", p(out)];
    args.extend_from_slice(extra);
    assert_eq!(pds(&args), EXIT_OK, "replay of {command} failed");
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> bool {
    names.iter().all(|n| std::fs::read(a.join(n)).unwrap() == std::fs::read(b.join(n)).unwrap())
}

#[test]
fn criterion_08_determinism_from_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let nets = json!({ "widths": [2, 3], "time_embed_dim": 4 });
    let phantom = write_json(
        &root.join("phantom.json"),
        &json!({ "dataset": { "dims": [8, 8, 8], "k_regions": 3, "class_mix": { "NC": 1, "MCI": 1, "AD": 1 } } }),
    );
    let (d1, d2) = (root.join("data1"), root.join("data2"));
    assert_eq!(pds(&["phantom", "--config", p(&phantom), "--out", p(&d1), "--seed", "11"]), EXIT_OK);
    replay("phantom", &d1.join("manifest.json"), root, &d2, &[]);
    let mut files: Vec<String> = std::fs::read_dir(&d1)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    files.sort();
    let names: Vec<&str> = files.iter().map(String::as_str).collect();
    let mut checks = vec![("phantom", same_files(&d1, &d2, &names))];

    let s1 = write_json(
        &root.join("s1.json"),
        &json!({ "data": d1, "stage1": {
            "schedule": { "T": 8 }, "eps_theta": nets, "eps_s": nets,
            "perception": { "widths": [3] }, "train": { "iterations": 4, "checkpoint_every": 2, "seed": 5 }
        }}),
    );
    let (r1, r2) = (root.join("s1a"), root.join("s1b"));
    assert_eq!(pds(&["train-stage1", "--config", p(&s1), "--out", p(&r1)]), EXIT_OK);
    replay("train-stage1", &r1.join("manifest.json"), root, &r2, &[]);
    checks.push((
        "train-stage1",
        same_files(&r1, &r2, &["stage1-000002.pdsc", "stage1-000004.pdsc", "stage1.pdsc"]),
    ));

    let s2 = write_json(
        &root.join("s2.json"),
        &json!({ "data": d1, "stage1_checkpoint": r1.join("stage1.pdsc"), "stage2": {
            "refine": { "backbone_width": 2, "projector": { "widths": [2], "time_embed_dim": 0 } },
            "perception": { "widths": [3] }, "train": { "iterations": 2, "checkpoint_every": 1, "seed": 6 }
        }}),
    );
    let (q1, q2) = (root.join("s2a"), root.join("s2b"));
    assert_eq!(pds(&["train-stage2", "--config", p(&s2), "--out", p(&q1)]), EXIT_OK);
    replay("train-stage2", &q1.join("manifest.json"), root, &q2, &[]);
    checks.push(("train-stage2", same_files(&q1, &q2, &["stage2-000001.pdsc", "stage2.pdsc"])));

    let synth = write_json(
        &root.join("synth.json"),
        &json!({ "checkpoint": q1.join("stage2.pdsc"), "source": d1.join("sub-001_f.nii"), "direction": "f2d", "seed": 4 }),
    );
    let (o1, o2) = (root.join("o1"), root.join("o2"));
    assert_eq!(pds(&["synthesize", "--config", p(&synth), "--out", p(&o1.join("out.nii")), "--pre-refine"]), EXIT_OK);
    replay("synthesize", &o1.join("out.manifest.json"), root, &o2.join("out.nii"), &["--pre-refine"]);
    checks.push(("synthesize", same_files(&o1, &o2, &["out.nii", "out-pre.nii"])));

    let eval = write_json(
        &root.join("eval.json"),
        &json!({ "generated": o1.join("out.nii"), "reference": d1.join("sub-001_d.nii"), "mask": d1.join("mask_d.nii") }),
    );
    let (e1, e2) = (root.join("e1"), root.join("e2"));
    assert_eq!(pds(&["evaluate", "--config", p(&eval), "--out", p(&e1.join("report.json"))]), EXIT_OK);
    replay("evaluate", &e1.join("report.manifest.json"), root, &e2.join("report.json"), &[]);
    checks.push(("evaluate", same_files(&e1, &e2, &["report.json"])));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(
        8,
        failed.is_empty(),
        &format!("{} commands replayed bitwise, mismatches {failed:?}", checks.len()),
    );
}

#[test]
fn criterion_09_nifti_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(91);
    let mut exact = 0;
    for case in 0..20 {
        let dims = [r.gen_range(1..12), r.gen_range(1..12), r.gen_range(1..12)];
        let spacing = [r.gen_range(0.5..3.0), r.gen_range(0.5..3.0), r.gen_range(0.5..3.0)].map(|s: f64| s as f32 as f64);
        let frame = |r: &mut ChaCha20Rng| {
            Volume3::from_fn(dims, |_, _, _| r.gen_range(-1e3f32..1e3) as f64).with_spacing(spacing)
        };
        let frames: Vec<Volume3> = (0..if case % 4 == 0 { 1 + case / 4 + 1 } else { 1 }).map(|_| frame(&mut r)).collect();
        let image = if frames.len() > 1 {
            NiftiImage::Series(Series4::new(frames.clone()).unwrap())
        } else {
            NiftiImage::from(frames[0].clone())
        };
        let path = dir.path().join(format!("v{case}.nii"));
        save_nifti(&image, &path).unwrap();
        let back = load_nifti(&path).unwrap();
        let got: Vec<Volume3> = match back {
            NiftiImage::Volume(v) => vec![v],
            NiftiImage::Series(s) => s.frames().to_vec(),
        };
        let same = got.len() == frames.len()
            && got.iter().zip(&frames).all(|(g, w)| {
                g.dims() == w.dims()
                    && g.spacing() == w.spacing()
                    && g.data().iter().zip(w.data()).all(|(a, b)| (*a as f32).to_bits() == (*b as f32).to_bits())
            });
        if same {
            exact += 1;
        }
    }
    report(9, exact == 20, &format!("{exact}/20 volumes bit-exact, 5 of them 4D series"));
}

#[test]
fn criterion_10_metrics() {
    let mut r = rng(101);
    let cfg = SsimConfig::default();
    let x = uniform([9, 9, 9], &mut r, 0.0, 1.0);
    let self_ssim = ssim(&x, &x, &cfg).unwrap();

    let mut worst = 0.0f64;
    for (a, b) in [(0.2, 0.7), (0.5, 0.5), (0.0, 1.0), (0.9, 0.3)] {
        let closed = (2.0 * a * b + cfg.c1) / (a * a + b * b + cfg.c1);
        for dims in [[3, 3, 3], [8, 8, 8]] {
            let got = ssim(&Volume3::filled(dims, a), &Volume3::filled(dims, b), &cfg).unwrap();
            worst = worst.max((got - closed).abs());
        }
    }

    let zeros = Volume3::zeros([4, 4, 4]);
    let mut one_hot = Volume3::zeros([10, 10, 1]);
    one_hot.set(3, 7, 0, 1.0);
    let p20 = psnr(&Volume3::zeros([10, 10, 1]), &one_hot, 1.0).unwrap();
    let p0 = psnr(&zeros, &Volume3::filled([4, 4, 4], 1.0), 1.0).unwrap();
    let pinf = psnr(&x, &x, 1.0).unwrap();
    let pass = self_ssim == 1.0 && worst < 1e-6 && p20 == 20.0 && p0 == 0.0 && pinf == f64::INFINITY;
    report(
        10,
        pass,
        &format!("ssim(x,x) = {self_ssim}, constant closed-form error {worst:.1e}, psnr {p20} dB / {p0} dB / {pinf}"),
    );
}
