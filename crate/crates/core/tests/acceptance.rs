//! Acceptance criteria for the toolkit, one test per criterion.
//!
//! Each test prints a single `criterion N: PASS|FAIL` line. A process-wide
//! lock runs the criteria one at a time so wall-clock limits are measured
//! without contention.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::{Matrix2xX, Matrix3xX, Rotation3, UnitQuaternion, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skelterp::baseline::{fit_baseline, FitInput, FitOptions};
use skelterp::camera::{pack_theta, project, projection_jacobian, CameraPose, Keypoints2D};
use skelterp::harness::{Experiment, ExperimentConfig, SweepTable};
use skelterp::heatmap::{corrupt_salt_pepper, decode_argmax, NoiseConfig};
use skelterp::metrics::{average_error, pck_curve, pcp, retrieve_nearest, rmse_recall_curve, rmse_structure, RetrievalMode};
use skelterp::nn::{
    refine_heatmaps, reprojection_loss, reprojection_loss_grad, train_refiner, Interpreter, MlpModel, RefinerConfig,
};
use skelterp::skeleton::{Shape3D, SkeletonSpec, StructParams};
use skelterp::synth::{sample_instance, RenderSettings, SampleRecord, SamplingRanges};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, pass: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn instances(spec: &SkeletonSpec, count: usize, seed: u64) -> Vec<SampleRecord> {
    let ranges = SamplingRanges::for_spec(spec);
    let render = RenderSettings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample_instance(spec, &ranges, &render, &mut rng).unwrap().0).collect()
}

/// Independent projection: shape from the bases, rotation from nalgebra's
/// exponential map, then the pinhole divide.
fn oracle_project(spec: &SkeletonSpec, theta: &[f64]) -> Vec<f64> {
    let k = spec.n_bases();
    let mut y = Matrix3xX::zeros(spec.n_keypoints());
    for (a, b) in theta[..k].iter().zip(spec.base_shapes()) {
        y += b * *a;
    }
    let r = Rotation3::new(Vector3::new(theta[k], theta[k + 1], theta[k + 2]));
    let t = Vector3::new(theta[k + 3], theta[k + 4], theta[k + 5]);
    let f = theta[k + 6];
    let mut out = Vec::with_capacity(2 * y.ncols());
    for c in y.column_iter() {
        let p = r * c + t;
        out.push(f * p.x / p.z);
        out.push(f * p.y / p.z);
    }
    out
}

#[test]
fn criterion_1_projection_gradient_check() {
    let _g = serial();
    let start = Instant::now();
    let step = 1e-5;
    let mut worst = 0.0f64;
    for (s, spec) in [SkeletonSpec::chair(), SkeletonSpec::tetrapod()].iter().enumerate() {
        for rec in instances(spec, 50, 100 + s as u64) {
            let jac = projection_jacobian(spec, &rec.params, &rec.pose).unwrap().matrix;
            let theta = pack_theta(&rec.params, &rec.pose);
            for j in 0..theta.len() {
                let mut plus = theta.clone();
                let mut minus = theta.clone();
                plus[j] += step;
                minus[j] -= step;
                let xp = oracle_project(spec, plus.as_slice());
                let xm = oracle_project(spec, minus.as_slice());
                for r in 0..xp.len() {
                    let fd = (xp[r] - xm[r]) / (2.0 * step);
                    let a = jac[(r, j)];
                    worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1.0));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        1,
        worst < 1e-6 && elapsed < Duration::from_secs(10),
        &format!("max relative error {worst:.3e} over 100 instances in {elapsed:.2?}"),
    );
}

#[test]
fn criterion_2_similarity_gauge() {
    let _g = serial();
    let spec = SkeletonSpec::chair();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for rec in instances(&spec, 100, 200) {
        let s: f64 = rng.random_range(0.1..10.0);
        let scaled = Shape3D::new(&rec.y_clean.coords * s);
        let pose = CameraPose {
            t: rec.pose.t * s,
            ..rec.pose
        };
        let a = project(&scaled, &pose).unwrap();
        let b = project(&rec.y_clean, &rec.pose).unwrap();
        worst = worst.max((a.coords - b.coords).abs().max());
    }
    report(2, worst < 1e-9, &format!("max deviation {worst:.3e} over 100 pairs"));
}

#[test]
fn criterion_3_baseline_identifiability() {
    let _g = serial();
    let spec = SkeletonSpec::chair();
    let opts = FitOptions::default();
    let records = instances(&spec, 200, 300);
    let mut good_rmse = 0;
    let mut good_residual = 0;
    let mut slowest = Duration::ZERO;
    for rec in &records {
        let x = project(&rec.y_clean, &rec.pose).unwrap();
        let vis = vec![true; spec.n_keypoints()];
        let start = Instant::now();
        let fit = fit_baseline(FitInput::Keypoints(&x, &vis), &spec, &opts);
        slowest = slowest.max(start.elapsed());
        if let Ok(fit) = fit {
            if rmse_structure(&fit.params, &rec.params, &spec).unwrap() < 0.01 {
                good_rmse += 1;
            }
            if fit.residual < 1e-10 {
                good_residual += 1;
            }
        }
    }
    let n = records.len() as f64;
    let (r, q) = (good_rmse as f64 / n, good_residual as f64 / n);
    report(
        3,
        r >= 0.90 && q >= 0.95 && slowest < Duration::from_secs(2),
        &format!("rmse<0.01 on {:.1}%, residual<1e-10 on {:.1}%, slowest {slowest:.2?}", 100.0 * r, 100.0 * q),
    );
}

fn param(m: &Interpreter<f64>, l: usize, w: Option<(usize, usize)>, b: Option<usize>) -> f64 {
    match (w, b) {
        (Some(ij), _) => m.mlp.layers[l].weight[ij],
        (_, Some(i)) => m.mlp.layers[l].bias[i],
        _ => unreachable!(),
    }
}

fn set_param(m: &mut Interpreter<f64>, l: usize, w: Option<(usize, usize)>, b: Option<usize>, v: f64) {
    match (w, b) {
        (Some(ij), _) => m.mlp.layers[l].weight[ij] = v,
        (_, Some(i)) => m.mlp.layers[l].bias[i] = v,
        _ => unreachable!(),
    }
}

#[test]
fn criterion_4_stage3_backprop_exactness() {
    let _g = serial();
    let start = Instant::now();
    let spec = SkeletonSpec::chair();
    let render = RenderSettings {
        geometry: skelterp::heatmap::GridGeometry::new(16, 12, 0.125).unwrap(),
        sigma: 1.0,
    };
    let k = spec.n_bases();
    let n_in = render.geometry.cells() * spec.n_keypoints();
    let mut mlp = MlpModel::<f64>::new(&[n_in, 64, 32, k + 7], 4).unwrap();
    // outputs centred on a plausible camera so depths stay positive
    mlp.target_norm.mean = vec![0.0; k + 7];
    mlp.target_norm.mean[0] = 1.0;
    mlp.target_norm.mean[k + 5] = 3.0;
    mlp.target_norm.mean[k + 6] = 2.0f64.ln();
    mlp.target_norm.scale = vec![0.3; k + 7];
    let interp = Interpreter::new(mlp, render.geometry, k, false).unwrap();
    let records = instances(&spec, 4, 400);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = Array2::from_shape_fn((records.len(), n_in), |_| rng.random_range(0.0..1.0));
    let labels: Vec<(&Keypoints2D, &[bool])> = records.iter().map(|r| (&r.x, r.visibility.as_slice())).collect();
    let (_, grads) = reprojection_loss_grad(&interp, &spec, &inputs, &labels, 1.0);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut probe = interp.clone();
    for (l, g) in grads.layers.iter().enumerate() {
        let entries = g
            .weight
            .indexed_iter()
            .map(|((i, j), v)| (Some((i, j)), None, *v))
            .chain(g.bias.indexed_iter().map(|(i, v)| (None, Some(i), *v)));
        for (w, b, analytic) in entries {
            let orig = param(&probe, l, w, b);
            set_param(&mut probe, l, w, b, orig + h);
            let lp = reprojection_loss(&probe, &spec, &inputs, &labels, 1.0);
            set_param(&mut probe, l, w, b, orig - h);
            let lm = reprojection_loss(&probe, &spec, &inputs, &labels, 1.0);
            set_param(&mut probe, l, w, b, orig);
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0));
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    report(
        4,
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        &format!("max relative error {worst:.3e} over {checked} parameters in {elapsed:.2?}"),
    );
}

struct Profile {
    _dir: tempfile::TempDir,
    exp: Experiment,
    table: SweepTable,
    elapsed: Duration,
}

/// gen, train and sweep for a config file, in a temporary output directory.
fn run_profile(name: &str) -> Profile {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::load(config_path(name)).unwrap();
    cfg.out = dir.path().to_path_buf();
    let exp = Experiment::new(cfg, "acceptance").unwrap();
    let start = Instant::now();
    exp.gen().unwrap();
    exp.train().unwrap();
    let table = exp.sweep().unwrap();
    Profile {
        _dir: dir,
        exp,
        table,
        elapsed: start.elapsed(),
    }
}

fn smoke() -> &'static Profile {
    static SMOKE: OnceLock<Profile> = OnceLock::new();
    SMOKE.get_or_init(|| run_profile("smoke.toml"))
}

/// Levels at which the interpreter does not strictly beat the baseline on
/// both average recalls.
fn ordering_failures(table: &SweepTable, levels: &[f64]) -> Vec<String> {
    let mut failures = Vec::new();
    for &l in levels {
        for metric in ["structure_avg_recall", "azimuth_avg_recall"] {
            let a = table.scalar(l, "interpreter", metric).unwrap();
            let b = table.scalar(l, "baseline", metric).unwrap();
            if !(a > b) {
                failures.push(format!("{metric}@{l}: {a:.4} vs {b:.4}"));
            }
        }
    }
    failures
}

fn summary(table: &SweepTable, levels: &[f64]) -> String {
    levels
        .iter()
        .map(|&l| {
            let v = |m, k| table.scalar(l, m, k).unwrap();
            format!(
                "[{l}: structure {:.3}/{:.3} azimuth {:.3}/{:.3}]",
                v("interpreter", "structure_avg_recall"),
                v("baseline", "structure_avg_recall"),
                v("interpreter", "azimuth_avg_recall"),
                v("baseline", "azimuth_avg_recall")
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn criterion_5_noise_ordering_smoke() {
    let _g = serial();
    let p = smoke();
    let c = &p.exp.config;
    assert_eq!((c.data.train_count, c.data.test_count), (3000, 300));
    let failures = ordering_failures(&p.table, &[0.20]);
    report(
        5,
        failures.is_empty() && p.elapsed < Duration::from_secs(600),
        &format!(
            "smoke 3000/300 in {:.1?} {} {}",
            p.elapsed,
            summary(&p.table, &[0.20]),
            failures.join("; ")
        ),
    );
}

#[test]
fn criterion_5_noise_ordering_full() {
    let _g = serial();
    let p = run_profile("full.toml");
    let c = &p.exp.config;
    assert_eq!((c.data.train_count, c.data.test_count), (30_000, 1_000));
    assert_eq!(c.noise_levels, vec![0.0, 0.02, 0.05, 0.10, 0.20]);
    let levels: Vec<f64> = c.noise_levels.iter().copied().filter(|&l| l >= 0.10).collect();
    let failures = ordering_failures(&p.table, &levels);
    report(
        5,
        failures.is_empty() && p.elapsed < Duration::from_secs(7200),
        &format!(
            "full 30000/1000 in {:.1?} {} {}",
            p.elapsed,
            summary(&p.table, &c.noise_levels),
            failures.join("; ")
        ),
    );
}

#[test]
fn criterion_6_finetune_benefit() {
    let _g = serial();
    let p = smoke();
    p.exp.finetune().unwrap();
    let text = std::fs::read_to_string(p.exp.path("finetune-summary.csv")).unwrap();
    let field = |key: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(&format!("{key},"))).unwrap();
        line.split(',').nth(1).unwrap().parse().unwrap()
    };
    let (before, after) = (field("before"), field("after"));
    report(
        6,
        after < before,
        &format!("held-out reprojection error {before:.5} -> {after:.5}"),
    );
}

#[test]
fn criterion_7_refiner_benefit() {
    let _g = serial();
    let p = smoke();
    let train = skelterp::synth::Dataset::load(p.exp.path("dataset.skelds")).unwrap();
    let test = skelterp::synth::Dataset::load(p.exp.path("dataset-test.skelds")).unwrap();
    let refiner = train_refiner(&train, &RefinerConfig::default()).unwrap().model;
    let error = |x: &Keypoints2D, gt: &SampleRecord| -> (f64, usize) {
        let mut sum = 0.0;
        let mut n = 0;
        for i in (0..gt.x.n_keypoints()).filter(|&i| gt.visibility[i]) {
            sum += (x.coords.column(i) - gt.x.coords.column(i)).norm();
            n += 1;
        }
        (sum, n)
    };
    let (mut before, mut after, mut n) = (0.0, 0.0, 0usize);
    for (i, rec) in test.records.iter().enumerate() {
        let noisy = corrupt_salt_pepper(
            &test.heatmaps(i),
            &NoiseConfig {
                level: 0.10,
                seed: 7_000 + i as u64,
            },
        );
        let (b, m) = error(&decode_argmax(&noisy).0, rec);
        let (a, _) = error(&decode_argmax(&refine_heatmaps(&refiner, &noisy).unwrap()).0, rec);
        before += b;
        after += a;
        n += m;
    }
    let (before, after) = (before / n as f64, after / n as f64);
    report(
        7,
        after <= before,
        &format!("mean argmax error at noise 0.10: {before:.4} before, {after:.4} after refinement"),
    );
}

fn random_keypoints(rng: &mut ChaCha8Rng, n: usize) -> Keypoints2D {
    // quarter-unit lattice so distances regularly land exactly on thresholds
    Keypoints2D::new(Matrix2xX::from_fn(n, |_, _| rng.random_range(-8i32..=8) as f64 * 0.25))
}

fn brute_distance(a: &Keypoints2D, b: &Keypoints2D, i: usize) -> f64 {
    let dx = a.coords[(0, i)] - b.coords[(0, i)];
    let dy = a.coords[(1, i)] - b.coords[(1, i)];
    (dx * dx + dy * dy).sqrt()
}

fn brute_pck(pred: &[Keypoints2D], gt: &[Keypoints2D], norm: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&r| {
            let (mut hit, mut total) = (0usize, 0usize);
            for inst in 0..gt.len() {
                for i in 0..gt[inst].n_keypoints() {
                    total += 1;
                    if brute_distance(&pred[inst], &gt[inst], i) <= r * norm[inst] {
                        hit += 1;
                    }
                }
            }
            hit as f64 / total as f64
        })
        .collect()
}

fn brute_pcp(pred: &[Keypoints2D], gt: &[Keypoints2D], tau: &[f64]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for inst in 0..gt.len() {
        for (i, t) in tau.iter().enumerate() {
            total += 1;
            if brute_distance(&pred[inst], &gt[inst], i) <= 1.5 * t {
                hit += 1;
            }
        }
    }
    hit as f64 / total as f64
}

fn brute_ae(pred: &[Keypoints2D], gt: &[Keypoints2D]) -> f64 {
    let (mut sum, mut total) = (0.0, 0usize);
    for inst in 0..gt.len() {
        for i in 0..gt[inst].n_keypoints() {
            let d = brute_distance(&pred[inst], &gt[inst], i);
            sum += if d > 5.0 { 5.0 } else { d };
            total += 1;
        }
    }
    sum / total as f64
}

/// Structure RMSE after centring each shape and dividing by its bounding-box diagonal.
fn brute_rmse(spec: &SkeletonSpec, a: &StructParams, b: &StructParams) -> f64 {
    let canon = |p: &StructParams| {
        let n = spec.n_keypoints();
        let mut pts = vec![[0.0f64; 3]; n];
        for (w, basis) in p.alpha.iter().zip(spec.base_shapes()) {
            for (i, pt) in pts.iter_mut().enumerate() {
                for d in 0..3 {
                    pt[d] += w * basis[(d, i)];
                }
            }
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut mean = [0.0; 3];
        for pt in &pts {
            for d in 0..3 {
                lo[d] = lo[d].min(pt[d]);
                hi[d] = hi[d].max(pt[d]);
                mean[d] += pt[d] / n as f64;
            }
        }
        let diag = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2)).sqrt();
        pts.iter().map(|p| [0, 1, 2].map(|d| (p[d] - mean[d]) / diag)).collect::<Vec<_>>()
    };
    let (ca, cb) = (canon(a), canon(b));
    let sq: f64 = ca.iter().zip(&cb).map(|(p, q)| (0..3).map(|d| (p[d] - q[d]).powi(2)).sum::<f64>()).sum();
    (sq / (3 * ca.len()) as f64).sqrt()
}

fn brute_retrieve(
    query: &(StructParams, CameraPose),
    db: &[(StructParams, CameraPose)],
    mode: RetrievalMode,
    k: usize,
) -> Vec<usize> {
    let dist = |e: &(StructParams, CameraPose)| match mode {
        RetrievalMode::ByStructure => {
            e.0.alpha.iter().zip(&query.0.alpha).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        }
        RetrievalMode::ByViewpoint => {
            // relative rotation angle from unit quaternions, well conditioned near zero
            let a = UnitQuaternion::from_scaled_axis(query.1.omega);
            let b = UnitQuaternion::from_scaled_axis(e.1.omega);
            let rel = a.inverse() * b;
            2.0 * rel.imag().norm().atan2(rel.w.abs())
        }
    };
    let d: Vec<f64> = db.iter().map(dist).collect();
    let mut taken = vec![false; db.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(db.len()) {
        let mut best: Option<usize> = None;
        for i in 0..db.len() {
            if !taken[i] && best.is_none_or(|b| d[i] < d[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

#[test]
fn criterion_8_metric_oracles() {
    let _g = serial();
    let start = Instant::now();
    let spec = SkeletonSpec::chair();
    let k = spec.n_bases();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = Vec::new();
    let thresholds: Vec<f64> = (1..=10).map(|i| i as f64 * 0.05).collect();
    for case in 0..1000 {
        let inst = rng.random_range(1..6);
        let n = rng.random_range(1..12);
        let gt: Vec<_> = (0..inst).map(|_| random_keypoints(&mut rng, n)).collect();
        let pred: Vec<_> = (0..inst).map(|_| random_keypoints(&mut rng, n)).collect();
        let norm: Vec<f64> = (0..inst).map(|_| rng.random_range(1..8) as f64).collect();
        let tau: Vec<f64> = (0..n).map(|_| rng.random_range(1..8) as f64 * 0.25).collect();

        if pck_curve(&pred, &gt, &norm, &thresholds).unwrap().values != brute_pck(&pred, &gt, &norm, &thresholds) {
            mismatches.push(format!("pck case {case}"));
        }
        if pcp(&pred, &gt, &tau).unwrap() != brute_pcp(&pred, &gt, &tau) {
            mismatches.push(format!("pcp case {case}"));
        }
        if average_error(&pred, &gt, 5.0).unwrap() != brute_ae(&pred, &gt) {
            mismatches.push(format!("ae case {case}"));
        }

        let pairs: Vec<(StructParams, StructParams)> = (0..rng.random_range(1..20))
            .map(|_| {
                let mut draw = || {
                    let mut a: Vec<f64> = (0..k).map(|_| rng.random_range(-0.6..0.6)).collect();
                    a[0] = 1.0;
                    StructParams::new(a)
                };
                (draw(), draw())
            })
            .collect();
        let lib: Vec<f64> = pairs.iter().map(|(a, b)| rmse_structure(a, b, &spec).unwrap()).collect();
        let brute: Vec<f64> = pairs.iter().map(|(a, b)| brute_rmse(&spec, a, b)).collect();
        let rmse_grid: Vec<f64> = (1..=20).map(|i| i as f64 / 100.0).collect();
        let brute_recall: Vec<f64> = rmse_grid
            .iter()
            .map(|t| brute.iter().filter(|v| **v <= *t).count() as f64 / brute.len() as f64)
            .collect();
        if rmse_recall_curve(&lib, &rmse_grid).unwrap().values != brute_recall
            || lib.iter().zip(&brute).any(|(a, b)| (a - b).abs() > 1e-12)
        {
            mismatches.push(format!("rmse_recall case {case}"));
        }

        let mut db: Vec<(StructParams, CameraPose)> = (0..rng.random_range(1..25))
            .map(|_| {
                let mut a: Vec<f64> = (0..k).map(|_| rng.random_range(-0.6..0.6)).collect();
                a[0] = 1.0;
                let omega = Vector3::new(
                    rng.random_range(-1.8..1.8),
                    rng.random_range(-1.8..1.8),
                    rng.random_range(-1.8..1.8),
                );
                (StructParams::new(a), CameraPose::new(omega, Vector3::new(0.0, 0.0, 3.0), 2.0).unwrap())
            })
            .collect();
        // duplicates force exact ties, which must break towards the lower index
        for _ in 0..rng.random_range(0..4) {
            let j = rng.random_range(0..db.len());
            db.push(db[j].clone());
        }
        let query = db[rng.random_range(0..db.len())].clone();
        let kk = rng.random_range(1..8);
        for mode in [RetrievalMode::ByStructure, RetrievalMode::ByViewpoint] {
            let got: Vec<usize> = retrieve_nearest((&query.0, &query.1), &db, mode, kk)
                .unwrap()
                .into_iter()
                .map(|(i, _)| i)
                .collect();
            if got != brute_retrieve(&query, &db, mode, kk) {
                mismatches.push(format!("retrieval {mode:?} case {case}"));
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        8,
        mismatches.is_empty() && elapsed < Duration::from_secs(30),
        &format!(
            "5 metric families x 1000 cases in {elapsed:.2?}, {} mismatches {}",
            mismatches.len(),
            mismatches.iter().take(5).cloned().collect::<Vec<_>>().join(", ")
        ),
    );
}

#[test]
fn criterion_9_determinism() {
    let _g = serial();
    let bin = env!("CARGO_BIN_EXE_skelterp");
    let config = config_path("determinism.toml");
    let run = |dir: &Path| {
        for cmd in ["gen", "train", "sweep"] {
            let status = Command::new(bin)
                .args([cmd, "--single-thread", "--seed", "11", "--config"])
                .arg(&config)
                .arg("--out")
                .arg(dir)
                .env("RUST_LOG", "warn")
                .status()
                .unwrap();
            assert!(status.success(), "{cmd} failed");
        }
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path());
    run(b.path());
    let mut compared = Vec::new();
    let mut differing = Vec::new();
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    for name in names {
        if std::fs::read(a.path().join(&name)).unwrap() != std::fs::read(b.path().join(&name)).unwrap() {
            differing.push(name.clone());
        }
        compared.push(name);
    }
    report(
        9,
        differing.is_empty() && compared.iter().any(|n| n == "sweep.csv"),
        &format!("compared {} differing {:?}", compared.join(" "), differing),
    );
}
