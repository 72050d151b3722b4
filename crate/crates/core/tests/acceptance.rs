//! Acceptance suite: one pass/fail line per criterion.
//!
//! `cargo test --release --test acceptance` runs everything; pass criterion
//! numbers to run a subset, e.g. `-- 1 2 3`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semsplat::dataio::{generate_synthetic, SyntheticSceneSpec};
use semsplat::image::{Image, LabelMap, IGNORE_LABEL};
use semsplat::mapper::{covisibility_iou, is_keyframe, regularization_loss, MappingConfig};
use semsplat::metrics::{ate_rmse_positions, psnr, seg_scores, ssim, PSNR_CAP};
use semsplat::pipeline::{run, PipelineConfig, RunReport};
use semsplat::rasterizer::camera::so3_exp;
use semsplat::rasterizer::{
    apply_pose_delta, render, render_backward, render_reference, CameraIntrinsics, Pose, RenderFlags,
};
use semsplat::scene::{logit, normalize_quat, Gaussian, GaussianMap, VisibilityRecord};
use semsplat::semantics::{optimize_semantics, predict_labels, SemanticConfig, SemanticMode, SemanticState};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_vec3(rng: &mut impl Rng, lo: f64, hi: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi))
}

fn rand_quat(rng: &mut impl Rng) -> [f64; 4] {
    normalize_quat(&[
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ])
}

fn rand_image(rng: &mut impl Rng, w: usize, h: usize, c: usize) -> Image {
    Image::from_vec(w, h, c, (0..w * h * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 1

fn random_scene(seed: u64, n: usize, nf: usize) -> (GaussianMap, Pose, CameraIntrinsics) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = CameraIntrinsics::new(60.0, 60.0, 31.5, 31.5, 64, 64);
    let pose = Pose::new(so3_exp(&rand_vec3(&mut rng, -0.3, 0.3)), rand_vec3(&mut rng, -0.2, 0.2));
    let inv = pose.inverse();
    let gs = (0..n)
        .map(|_| {
            let cam = Vector3::new(
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
                rng.random_range(1.5..3.0),
            );
            Gaussian {
                position: inv.transform(&cam),
                rotation: rand_quat(&mut rng),
                log_scale: rand_vec3(&mut rng, -3.5, -1.5),
                opacity_logit: rng.random_range(-2.0..4.0),
                color: rand_vec3(&mut rng, 0.0, 1.0),
                feature: (0..nf).map(|_| rng.random_range(-1.0..1.0)).collect(),
            }
        })
        .collect();
    let mut map = GaussianMap::new(nf);
    map.append_gaussians(gs).unwrap();
    (map, pose, intr)
}

fn c1_oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let n = 10 + (seed as usize * 7) % 41;
        let (map, pose, intr) = random_scene(seed, n, 4);
        let a = render(&map, &pose, &intr, RenderFlags::WITH_FEATURES).map_err(|e| e.to_string())?;
        let b = render_reference(&map, &pose, &intr, true);
        for d in [
            max_abs_diff(&a.color, &b.color),
            max_abs_diff(&a.depth, &b.depth),
            max_abs_diff(&a.alpha, &b.alpha),
            max_abs_diff(a.features.as_ref().unwrap(), b.features.as_ref().unwrap()),
        ] {
            worst = worst.max(d);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(
        worst <= 1e-5 && secs < 10.0,
        format!("max abs diff {worst:.2e} (<= 1e-5), {secs:.2} s (< 10 s)"),
    )
}

// ---------------------------------------------------------------- 2

/// Wide semi-transparent splats covering the image, so no per-pixel
/// threshold flips inside the difference step.
fn smooth_scene(seed: u64) -> (GaussianMap, Pose, CameraIntrinsics) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = CameraIntrinsics::new(30.0, 30.0, 15.5, 11.5, 32, 24);
    let pose = Pose::new(so3_exp(&rand_vec3(&mut rng, -0.3, 0.3)), rand_vec3(&mut rng, -0.2, 0.2));
    let inv = pose.inverse();
    let gs = (0..10)
        .map(|i| {
            let cam = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.4..0.4),
                1.8 + 0.15 * i as f64 + rng.random_range(0.0..0.05),
            );
            Gaussian {
                position: inv.transform(&cam),
                rotation: rand_quat(&mut rng),
                log_scale: rand_vec3(&mut rng, 0.2, 0.6),
                opacity_logit: logit(rng.random_range(0.18..0.5)),
                color: rand_vec3(&mut rng, 0.0, 1.0),
                feature: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            }
        })
        .collect();
    let mut map = GaussianMap::new(3);
    map.append_gaussians(gs).unwrap();
    (map, pose, intr)
}

fn dot(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn c2_gradients() -> Outcome {
    let h = 1e-4;
    let mut checked = 0usize;
    let mut worst_rel: f64 = 0.0;
    let mut failures = Vec::new();
    for seed in 0..10u64 {
        let (map, pose, intr) = smooth_scene(seed);
        let (w, ht) = (intr.width, intr.height);
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let wc = rand_image(&mut rng, w, ht, 3);
        let wd = rand_image(&mut rng, w, ht, 1);
        let wf = rand_image(&mut rng, w, ht, 3);
        let flags = RenderFlags::WITH_FEATURES;
        let loss = |m: &GaussianMap, p: &Pose| {
            let o = render(m, p, &intr, flags).unwrap();
            (dot(&o.color, &wc) + dot(&o.depth, &wd), dot(o.features.as_ref().unwrap(), &wf))
        };
        let out = render(&map, &pose, &intr, flags).unwrap();
        let (geo, pg) = render_backward(&map, &pose, &intr, flags, &out, &wc, &wd, None, true).unwrap();
        let zc = Image::zeros(w, ht, 3);
        let zd = Image::zeros(w, ht, 1);
        let (feat, _) = render_backward(&map, &pose, &intr, flags, &out, &zc, &zd, Some(&wf), false).unwrap();
        let feat = feat.feature.unwrap();

        let mut check = |an: f64, num: f64, what: &str| {
            checked += 1;
            let ok = if num.abs() < 1e-3 {
                (an - num).abs() <= 1e-7
            } else {
                let rel = (an - num).abs() / num.abs();
                worst_rel = worst_rel.max(rel);
                rel <= 1e-4
            };
            if !ok {
                failures.push(format!("seed {seed} {what}: {an} vs {num}"));
            }
        };
        let fd = |edit: &dyn Fn(&mut Gaussian, f64), i: usize, feature: bool| {
            let mut mp = map.clone();
            edit(&mut mp.gaussians[i], h);
            let mut mm = map.clone();
            edit(&mut mm.gaussians[i], -h);
            let (lp, lm) = (loss(&mp, &pose), loss(&mm, &pose));
            if feature {
                (lp.1 - lm.1) / (2.0 * h)
            } else {
                (lp.0 - lm.0) / (2.0 * h)
            }
        };
        for i in 0..map.len() {
            for k in 0..3 {
                check(geo.position[i][k], fd(&|g, d| g.position[k] += d, i, false), "position");
                check(geo.log_scale[i][k], fd(&|g, d| g.log_scale[k] += d, i, false), "log_scale");
                check(geo.color[i][k], fd(&|g, d| g.color[k] += d, i, false), "color");
                check(feat[i * 3 + k], fd(&|g, d| g.feature[k] += d, i, true), "feature");
            }
            for k in 0..4 {
                check(geo.rotation[i][k], fd(&|g, d| g.rotation[k] += d, i, false), "rotation");
            }
            check(geo.opacity_logit[i], fd(&|g, d| g.opacity_logit += d, i, false), "opacity_logit");
        }
        let pg = pg.unwrap();
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let num = (loss(&map, &apply_pose_delta(&pose, &d)).0 - loss(&map, &apply_pose_delta(&pose, &(-d))).0)
                / (2.0 * h);
            check(pg[k], num, "pose");
        }
    }
    ensure(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{checked} gradient entries, worst relative error {worst_rel:.2e} (<= 1e-4)")
        } else {
            format!("{} of {checked} entries off, first: {}", failures.len(), failures[0])
        },
    )
}

// ---------------------------------------------------------------- 3

fn c3_isolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut nonzero_features = 0;
    for seed in 0..10 {
        let (map, pose, intr) = random_scene(100 + seed, 40, 6);
        let out = render(&map, &pose, &intr, RenderFlags::WITH_FEATURES).unwrap();
        let gf = rand_image(&mut rng, 64, 64, 6);
        let (g, p) = render_backward(
            &map,
            &pose,
            &intr,
            RenderFlags::WITH_FEATURES,
            &out,
            &Image::zeros(64, 64, 3),
            &Image::zeros(64, 64, 1),
            Some(&gf),
            true,
        )
        .unwrap();
        if !g.geometry_is_zero() || p.unwrap().iter().any(|&v| v != 0.0) {
            return Err(format!("scene {seed}: non-feature gradient is not exactly 0.0"));
        }
        nonzero_features += g.feature.unwrap().iter().filter(|&&v| v != 0.0).count();
    }
    ensure(
        nonzero_features > 0,
        format!("all non-feature and pose gradients == 0.0 on 10 scenes; {nonzero_features} nonzero feature grads"),
    )
}

// ---------------------------------------------------------------- pipeline runs

struct Runs {
    root: tempfile::TempDir,
    cache: BTreeMap<String, (RunReport, f64)>,
}

impl Runs {
    fn new() -> Self {
        Self {
            root: tempfile::tempdir().unwrap(),
            cache: BTreeMap::new(),
        }
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }

    /// Runs `cfg` once per name, writing exports under the run's directory.
    fn get(&mut self, name: &str, mut cfg: PipelineConfig) -> Result<&(RunReport, f64), String> {
        if !self.cache.contains_key(name) {
            cfg.output_dir = Some(self.dir(name));
            let t = Instant::now();
            let r = run(&cfg).map_err(|e| format!("{name}: {e}"))?;
            let secs = t.elapsed().as_secs_f64();
            eprintln!("    run {name}: {secs:.1} s, {} keyframes, {} gaussians", r.keyframes.len(), r.map.len());
            self.cache.insert(name.to_string(), (r, secs));
        }
        Ok(&self.cache[name])
    }

    fn base(&mut self) -> Result<&(RunReport, f64), String> {
        self.get("base", PipelineConfig::default())
    }
}

fn cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn c4_slam_loop(runs: &mut Runs) -> Outcome {
    let cfg = PipelineConfig::default();
    let spec = &cfg.dataset.synthetic;
    let orbit = (spec.frame_count, spec.num_gaussians, 2.0 * spec.orbit_radius);
    let (r, secs) = runs.base()?;
    let ate = r.metrics.ate_rmse_cm.ok_or("no ATE")?;
    let p = r.metrics.mean_keyframe_psnr;
    ensure(
        orbit == (100, 500, 2.0) && cfg.single_thread && ate <= 1.0 && p >= 30.0 && *secs <= 600.0,
        format!(
            "ATE {ate:.3} cm (<= 1.0), keyframe PSNR {p:.2} dB (>= 30), {secs:.0} s on {} core(s) (<= 600 s), {} keyframes",
            cores(),
            r.keyframes.len()
        ),
    )
}

fn c5_semantic_gt(runs: &mut Runs) -> Outcome {
    let (r, _) = runs.base()?;
    let miou = r.metrics.miou.ok_or("no segmentation metrics")?;
    let acc = r.metrics.accuracy.ok_or("no segmentation metrics")?;
    ensure(
        miou >= 95.0 && acc >= 99.0,
        format!("mIoU {miou:.2}% (>= 95), Acc {acc:.2}% (>= 99)"),
    )
}

fn c6_textual(runs: &mut Runs) -> Outcome {
    let mut cfg = PipelineConfig::default();
    cfg.semantics.mode = SemanticMode::Textual;
    let intr = cfg.dataset.synthetic.intrinsics;
    cfg.semantics.head_width = intr.width;
    cfg.semantics.head_height = intr.height;
    assert_eq!(cfg.dataset.prior_corruption, 0.1);
    let (r, _) = runs.get("textual", cfg)?;
    let acc = r.metrics.accuracy.ok_or("no segmentation metrics")?;
    ensure(acc >= 95.0, format!("argmax recovers {acc:.2}% of valid pixels (>= 95)"))
}

/// Mean mIoU over every tenth frame of the default sequence, rendered at the
/// run's own pose estimates. Unlike the keyframe-view metric, the view set is
/// the same for every run.
fn common_view_miou(r: &RunReport, frames: &[semsplat::dataio::Frame], intr: &CameraIntrinsics, c: usize) -> f64 {
    let views: Vec<usize> = (0..frames.len()).step_by(10).collect();
    let total: f64 = views
        .iter()
        .map(|&k| {
            let out = render(&r.map, &r.trajectory[k].pose, intr, RenderFlags::WITH_FEATURES).unwrap();
            let pred = predict_labels(out.features.as_ref().unwrap(), c).unwrap();
            seg_scores(&pred, frames[k].gt_label.as_ref().unwrap(), c).unwrap().miou
        })
        .sum();
    total / views.len() as f64
}

fn c7_ablation(runs: &mut Runs) -> Outcome {
    let spec = PipelineConfig::default().dataset.synthetic;
    let scene = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let mut grid = BTreeMap::new();
    for (ri, rho) in [1.0 / 64.0, 1.0 / 16.0].into_iter().enumerate() {
        for (ti, tau) in [0.8, 0.95].into_iter().enumerate() {
            let mut cfg = PipelineConfig::default();
            cfg.mapping.rho_pc = rho;
            cfg.mapping.tau_thresh = tau;
            let name = if cfg == PipelineConfig::default() {
                "base".to_string()
            } else {
                format!("rho{ri}_tau{ti}")
            };
            let (r, secs) = runs.get(&name, cfg)?;
            let miou = common_view_miou(r, &scene.frames, &scene.intrinsics, spec.num_classes);
            grid.insert((ri, ti), (r.metrics.ate_rmse_cm.unwrap_or(f64::NAN), miou, r.map.len(), *secs));
        }
    }
    let mut bad = Vec::new();
    for t in 0..2 {
        let (lo, hi) = (grid[&(0, t)], grid[&(1, t)]);
        if !(hi.0 <= lo.0) {
            bad.push(format!("tau#{t}: ATE {:.3} -> {:.3} as rho grows", lo.0, hi.0));
        }
        if !(hi.2 > lo.2) {
            bad.push(format!("tau#{t}: gaussians {} -> {} as rho grows", lo.2, hi.2));
        }
        if !(hi.3 > lo.3) {
            bad.push(format!("tau#{t}: runtime {:.0} -> {:.0} s as rho grows", lo.3, hi.3));
        }
    }
    for r in 0..2 {
        let (lo, hi) = (grid[&(r, 0)], grid[&(r, 1)]);
        if !(hi.1 >= lo.1) {
            bad.push(format!("rho#{r}: mIoU {:.4} -> {:.4} as tau grows", lo.1, hi.1));
        }
        if !(hi.2 > lo.2) {
            bad.push(format!("rho#{r}: gaussians {} -> {} as tau grows", lo.2, hi.2));
        }
        if !(hi.3 > lo.3) {
            bad.push(format!("rho#{r}: runtime {:.0} -> {:.0} s as tau grows", lo.3, hi.3));
        }
    }
    let table: Vec<String> = grid
        .iter()
        .map(|((r, t), v)| {
            format!(
                "(rho {}, tau {}) ATE {:.3} mIoU {:.3} n {} {:.0}s",
                ["1/64", "1/16"][*r],
                [0.8, 0.95][*t],
                v.0,
                v.1,
                v.2,
                v.3
            )
        })
        .collect();
    if bad.is_empty() {
        Ok(table.join("; "))
    } else {
        Err(format!("{} | {}", bad.join(", "), table.join("; ")))
    }
}

fn scale_variance(map: &GaussianMap) -> Vector3<f64> {
    let n = map.len() as f64;
    let s: Vec<Vector3<f64>> = map.gaussians.iter().map(|g| g.scale()).collect();
    let mean = s.iter().sum::<Vector3<f64>>() / n;
    s.iter().map(|v| (v - mean).component_mul(&(v - mean))).sum::<Vector3<f64>>() / n
}

fn c8_regularization(runs: &mut Runs) -> Outcome {
    let mut cfg = PipelineConfig::default();
    cfg.mapping.lambda_r = 0.0;
    let without = scale_variance(&runs.get("lambda_r0", cfg)?.0.map);
    let with = scale_variance(&runs.base()?.0.map);
    // Analytic side: zero gradient iff all scales are equal.
    let mut equal = GaussianMap::new(0);
    let g = Gaussian::isotropic(Vector3::zeros(), 0.05, 0.5, Vector3::zeros(), 0);
    equal.append_gaussians(vec![g.clone(); 5]).unwrap();
    let zero_when_equal = regularization_loss(&equal).1.iter().all(|v| v.iter().all(|&x| x == 0.0));
    equal.gaussians[2].log_scale.x += 0.1;
    let nonzero_otherwise = regularization_loss(&equal).1.iter().any(|v| v.iter().any(|&x| x != 0.0));
    ensure(
        (0..3).all(|k| with[k] < without[k]) && zero_when_equal && nonzero_otherwise,
        format!(
            "scale variance lambda_r=10 [{:.3e} {:.3e} {:.3e}] vs lambda_r=0 [{:.3e} {:.3e} {:.3e}]; gradient zero iff equal: {}",
            with.x,
            with.y,
            with.z,
            without.x,
            without.y,
            without.z,
            zero_when_equal && nonzero_otherwise
        ),
    )
}

// ---------------------------------------------------------------- 9

/// Rigid alignment by Horn's closed-form quaternion method.
fn horn_ate(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
    let n = est.len() as f64;
    let ce = est.iter().sum::<Vector3<f64>>() / n;
    let cg = gt.iter().sum::<Vector3<f64>>() / n;
    let mut s = Matrix3::zeros();
    for (e, g) in est.iter().zip(gt) {
        s += (e - ce) * (g - cg).transpose();
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    #[rustfmt::skip]
    let nmat = Matrix4::new(
        sxx + syy + szz, syz - szy,        szx - sxz,        sxy - syx,
        syz - szy,       sxx - syy - szz,  sxy + syx,        szx + sxz,
        szx - sxz,       sxy + syx,        -sxx + syy - szz, syz + szy,
        sxy - syx,       szx + sxz,        syz + szy,        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(nmat);
    let k = eig.eigenvalues.imax();
    let q = eig.eigenvectors.column(k);
    let r = semsplat::scene::quat_to_matrix(&[q[0], q[1], q[2], q[3]]);
    let sq: f64 = est.iter().zip(gt).map(|(e, g)| (r * (e - ce) + cg - g).norm_squared()).sum();
    100.0 * (sq / n).sqrt()
}

fn psnr_oracle(a: &Image, b: &Image) -> f64 {
    let n = a.data().len() as f64;
    let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Mean SSIM over every fully inside 11x11 window, averaged over channels.
fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let mut k = [[0.0; 11]; 11];
    let mut ks = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            ks += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0.0;
    for c in 0..ch {
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (i, row) in k.iter().enumerate() {
                    for (j, kv) in row.iter().enumerate() {
                        let wgt = kv / ks;
                        let (va, vb) = (a.at(x0 + j, y0 + i, c), b.at(x0 + j, y0 + i, c));
                        ma += wgt * va;
                        mb += wgt * vb;
                        saa += wgt * va * va;
                        sbb += wgt * vb * vb;
                        sab += wgt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
    }
    total / count
}

/// Accuracy and mIoU, in percent, from an explicit confusion matrix; classes absent
/// from both maps are left out of the mean.
fn seg_oracle(pred: &[u8], gt: &[u8], c: usize) -> (f64, f64) {
    let mut cm = vec![vec![0usize; c]; c];
    for (&p, &g) in pred.iter().zip(gt) {
        if g == IGNORE_LABEL || g as usize >= c {
            continue;
        }
        if (p as usize) < c {
            cm[g as usize][p as usize] += 1;
        }
    }
    let valid = gt.iter().filter(|&&g| g != IGNORE_LABEL && (g as usize) < c).count();
    let tp: usize = (0..c).map(|i| cm[i][i]).sum();
    let mut ious = Vec::new();
    for i in 0..c {
        let row: usize = cm[i].iter().sum();
        let col: usize = (0..c).map(|j| cm[j][i]).sum();
        let union = row + col - cm[i][i];
        if union > 0 {
            ious.push(cm[i][i] as f64 / union as f64);
        }
    }
    (100.0 * tp as f64 / valid as f64, 100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
}

fn c9_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut d_ate, mut d_psnr, mut d_ssim, mut d_seg, mut d_rigid): (f64, f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..100 {
        let n = rng.random_range(3..40);
        let gt: Vec<Vector3<f64>> = (0..n).map(|_| rand_vec3(&mut rng, -2.0, 2.0)).collect();
        let r = so3_exp(&rand_vec3(&mut rng, -3.0, 3.0));
        let t = rand_vec3(&mut rng, -5.0, 5.0);
        let est: Vec<Vector3<f64>> = gt.iter().map(|g| r * g + t + rand_vec3(&mut rng, -0.05, 0.05)).collect();
        let ate = ate_rmse_positions(&est, &gt).map_err(|e| e.to_string())?;
        d_ate = d_ate.max((ate - horn_ate(&est, &gt)).abs());
        let r2 = so3_exp(&rand_vec3(&mut rng, -3.0, 3.0));
        let t2 = rand_vec3(&mut rng, -5.0, 5.0);
        let moved: Vec<Vector3<f64>> = est.iter().map(|e| r2 * e + t2).collect();
        d_rigid = d_rigid.max((ate_rmse_positions(&moved, &gt).unwrap() - ate).abs());

        let (w, h) = (rng.random_range(11..30), rng.random_range(11..30));
        let a = Image::from_vec(w, h, 3, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap();
        let noise = rng.random_range(0.0..0.2);
        let b = Image::from_vec(
            w,
            h,
            3,
            a.data().iter().map(|v| (v + rng.random_range(-noise..=noise)).clamp(0.0, 1.0)).collect(),
        )
        .unwrap();
        d_psnr = d_psnr.max((psnr(&a, &b).unwrap() - psnr_oracle(&a, &b)).abs());
        d_ssim = d_ssim.max((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs());

        let c = rng.random_range(2..9);
        let len = w * h;
        let gl: Vec<u8> = (0..len)
            .map(|_| if rng.random_bool(0.1) { IGNORE_LABEL } else { rng.random_range(0..c) as u8 })
            .collect();
        let pl: Vec<u8> = gl
            .iter()
            .map(|&g| if g != IGNORE_LABEL && rng.random_bool(0.7) { g } else { rng.random_range(0..c) as u8 })
            .collect();
        let s = seg_scores(
            &LabelMap { width: w, height: h, data: pl.clone() },
            &LabelMap { width: w, height: h, data: gl.clone() },
            c,
        )
        .unwrap();
        let (oa, om) = seg_oracle(&pl, &gl, c);
        d_seg = d_seg.max((s.accuracy - oa).abs()).max((s.miou - om).abs());
    }
    ensure(
        d_ate <= 1e-9 && d_psnr <= 1e-9 && d_ssim <= 1e-9 && d_seg <= 1e-12 && d_rigid <= 1e-9,
        format!(
            "100 cases, max |diff|: ate {d_ate:.1e}, psnr {d_psnr:.1e}, ssim {d_ssim:.1e}, seg {d_seg:.1e}; rigid invariance {d_rigid:.1e} (<= 1e-9)"
        ),
    )
}

// ---------------------------------------------------------------- 10

fn c10_determinism(runs: &mut Runs) -> Outcome {
    runs.base()?;
    runs.get("base_again", PipelineConfig::default())?;
    let mut same = Vec::new();
    for f in ["trajectory.txt", "map.txt"] {
        let read = |d: &Path| std::fs::read(d.join(f)).map_err(|e| format!("{f}: {e}"));
        let (a, b) = (read(&runs.dir("base"))?, read(&runs.dir("base_again"))?);
        if a != b {
            return Err(format!("{f} differs between identical runs"));
        }
        same.push(format!("{f} {} bytes", a.len()));
    }
    Ok(format!("byte-identical: {}", same.join(", ")))
}

// ---------------------------------------------------------------- 11

fn c11_keyframes() -> Outcome {
    let cfg = MappingConfig::default();
    let tau = cfg.tau_thresh;
    let boundary = !is_keyframe(tau, &cfg) && is_keyframe(tau - f64::EPSILON, &cfg) && is_keyframe(tau - 1e-9, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(0..300);
        let p = rng.random::<f64>();
        let a: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
        let oracle = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let got = covisibility_iou(&VisibilityRecord::from_bits(0, &a), &VisibilityRecord::from_bits(1, &b));
        worst = worst.max((got - oracle).abs());
    }
    ensure(
        boundary && worst == 0.0,
        format!("iou = tau -> false, tau - eps -> true: {boundary}; popcount oracle max |diff| {worst:e} over 1000 records"),
    )
}

// ---------------------------------------------------------------- 12

fn c12_forgetting() -> Outcome {
    let spec = SyntheticSceneSpec::default();
    let scene = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let feature_dim = PipelineConfig::default().feature_dim;
    let mut map = GaussianMap::new(feature_dim);
    let gs = scene
        .map
        .gaussians
        .iter()
        .map(|g| Gaussian {
            feature: vec![0.0; feature_dim],
            ..g.clone()
        })
        .collect();
    map.append_gaussians(gs).unwrap();
    let cfg = SemanticConfig {
        num_classes: spec.num_classes,
        ..SemanticConfig::default()
    };
    let mut state = SemanticState::new(&cfg, feature_dim, 0).map_err(|e| e.to_string())?;
    let intr = scene.intrinsics;
    let keyframes: Vec<usize> = (0..10).map(|k| k * spec.frame_count / 10).collect();
    let accuracy = |map: &GaussianMap| -> f64 {
        let f = &scene.frames[keyframes[0]];
        let out = render(map, &f.gt_pose.unwrap(), &intr, RenderFlags::WITH_FEATURES).unwrap();
        let pred = predict_labels(out.features.as_ref().unwrap(), cfg.num_classes).unwrap();
        seg_scores(&pred, f.gt_label.as_ref().unwrap(), cfg.num_classes).unwrap().accuracy
    };
    let mut after_first = 0.0;
    for (i, &k) in keyframes.iter().enumerate() {
        let f = &scene.frames[k];
        optimize_semantics(&mut map, f, &f.gt_pose.unwrap(), &intr, &cfg, &mut state, i == 0)
            .map_err(|e| e.to_string())?;
        if i == 0 {
            after_first = accuracy(&map);
        }
    }
    let end = accuracy(&map);
    let drop = (after_first - end) / after_first;
    ensure(
        drop < 0.05,
        format!(
            "keyframe 1 accuracy {after_first:.2}% after its optimization, {end:.2}% after 10 keyframes (relative drop {:.2}% < 5%)",
            100.0 * drop
        ),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut runs = Runs::new();
    type Criterion<'a> = (usize, &'a str, Box<dyn Fn(&mut Runs) -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        (1, "rasterizer oracle equivalence", Box::new(|_| c1_oracle_equivalence())),
        (2, "gradient correctness", Box::new(|_| c2_gradients())),
        (3, "feature-gradient isolation", Box::new(|_| c3_isolation())),
        (4, "synthetic SLAM loop", Box::new(c4_slam_loop)),
        (5, "semantic GT mode", Box::new(c5_semantic_gt)),
        (6, "textual mode", Box::new(c6_textual)),
        (7, "ablation directions", Box::new(c7_ablation)),
        (8, "regularization", Box::new(c8_regularization)),
        (9, "metrics oracles", Box::new(|_| c9_metrics())),
        (10, "determinism", Box::new(c10_determinism)),
        (11, "keyframe logic", Box::new(|_| c11_keyframes())),
        (12, "forgetting guard", Box::new(|_| c12_forgetting())),
    ];
    let mut failed = 0;
    for (id, name, f) in &criteria {
        if !wanted.is_empty() && !wanted.contains(id) {
            continue;
        }
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(|| f(&mut runs)))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())))));
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("PASS [{id:2}] {name}: {d} ({secs:.1} s)"),
            Err(d) => {
                failed += 1;
                println!("FAIL [{id:2}] {name}: {d} ({secs:.1} s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
