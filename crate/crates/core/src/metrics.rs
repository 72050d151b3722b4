//! Trajectory, image and segmentation metrics.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap, IGNORE_LABEL};
use crate::rasterizer::Pose;

pub const PSNR_CAP: f64 = 100.0;

/// Rigid transform `(R, t)` minimizing `Σ |R·a_i + t − b_i|²`.
pub fn align_rigid(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(format!("alignment of {} and {} points", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vector3<f64>>() / n;
    let cb = b.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        h += (p - ca) * (q - cb).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    Ok((r, cb - r * ca))
}

/// ATE RMSE in centimeters between camera centers after rigid alignment of
/// the estimate onto the ground truth.
pub fn ate_rmse_positions(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    if est.len() != gt.len() {
        return Err(Error::dim(format!("trajectory lengths {} and {}", est.len(), gt.len())));
    }
    if est.len() < 2 {
        return Err(Error::dim("ATE needs at least two poses"));
    }
    let (r, t) = align_rigid(est, gt)?;
    let sq: f64 = est.iter().zip(gt).map(|(e, g)| (r * e + t - g).norm_squared()).sum();
    Ok(100.0 * (sq / est.len() as f64).sqrt())
}

/// ATE over world-to-camera poses, compared through their camera centers.
pub fn ate_rmse(est: &[Pose], gt: &[Pose]) -> Result<f64> {
    let c = |p: &[Pose]| p.iter().map(Pose::center).collect::<Vec<_>>();
    ate_rmse_positions(&c(est), &c(gt))
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::dim(format!(
            "image shapes {}x{}x{} and {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit-range images, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    if a.data().is_empty() {
        return Err(Error::dim("empty image"));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WIN] {
    let mut k = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "valid" filtering of one channel.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WIN]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WIN;
    let oh = h + 1 - SSIM_WIN;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WIN).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WIN).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ 1.5) over the valid
/// region, averaged over channels and window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    if w < SSIM_WIN || h < SSIM_WIN {
        return Err(Error::dim(format!("ssim needs at least {SSIM_WIN}x{SSIM_WIN} pixels")));
    }
    let k = gaussian_kernel();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        let pa: Vec<f64> = (0..w * h).map(|p| a.data()[p * ch + c]).collect();
        let pb: Vec<f64> = (0..w * h).map(|p| b.data()[p * ch + c]).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let aa = filter_valid(&prod(&pa, &pa), w, h, &k);
        let bb = filter_valid(&prod(&pb, &pb), w, h, &k);
        let ab = filter_valid(&prod(&pa, &pb), w, h, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    /// Percent of non-ignored pixels labelled correctly.
    pub accuracy: f64,
    pub miou: f64,
    /// Percent IoU per class; `None` when the class occurs in neither map.
    pub per_class_iou: Vec<Option<f64>>,
}

/// Pixel accuracy and mean IoU over `num_classes` classes. Pixels whose
/// ground truth is the ignore label are excluded; predictions outside the
/// class range count as wrong.
pub fn seg_scores(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<SegScores> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::dim("label maps differ in shape"));
    }
    let mut tp = vec![0u64; num_classes];
    let mut fp = vec![0u64; num_classes];
    let mut fneg = vec![0u64; num_classes];
    let (mut correct, mut valid) = (0u64, 0u64);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if g == IGNORE_LABEL || g as usize >= num_classes {
            continue;
        }
        valid += 1;
        if p == g {
            correct += 1;
            tp[g as usize] += 1;
        } else {
            fneg[g as usize] += 1;
            if (p as usize) < num_classes {
                fp[p as usize] += 1;
            }
        }
    }
    let per_class_iou: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let denom = tp[c] + fp[c] + fneg[c];
            (denom > 0).then(|| 100.0 * tp[c] as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let accuracy = if valid == 0 {
        0.0
    } else {
        100.0 * correct as f64 / valid as f64
    };
    Ok(SegScores {
        accuracy,
        miou,
        per_class_iou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, UnitQuaternion, Matrix4};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Horn's closed-form quaternion alignment.
    fn horn_rmse(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
        let n = est.len() as f64;
        let ce = est.iter().sum::<Vector3<f64>>() / n;
        let cg = gt.iter().sum::<Vector3<f64>>() / n;
        let mut s = Matrix3::zeros();
        for (a, b) in est.iter().zip(gt) {
            s += (a - ce) * (b - cg).transpose();
        }
        let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
        let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
        let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
        let nmat = Matrix4::new(
            sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
            syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
            szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
            sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
        );
        let eig = nmat.symmetric_eigen();
        let (imax, _) = eig.eigenvalues.argmax();
        let q = eig.eigenvectors.column(imax);
        let r = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]))
            .to_rotation_matrix()
            .into_inner();
        let t = cg - r * ce;
        let sq: f64 = est.iter().zip(gt).map(|(a, b)| (r * a + t - b).norm_squared()).sum();
        100.0 * (sq / n).sqrt()
    }

    fn random_rigid(rng: &mut impl Rng) -> (Matrix3<f64>, Vector3<f64>) {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let r = Rotation3::new(axis * 2.0).into_inner();
        let t = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        (r, t)
    }

    #[test]
    fn ate_identity_and_rigid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt: Vec<Vector3<f64>> = (0..20)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        assert!(ate_rmse_positions(&gt, &gt).unwrap() < 1e-9);
        let (r, t) = random_rigid(&mut rng);
        let moved: Vec<_> = gt.iter().map(|p| r * p + t).collect();
        assert!(ate_rmse_positions(&moved, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn ate_square_matches_horn() {
        let gt = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let mut est = gt.clone();
        est[2].x += 0.1;
        let a = ate_rmse_positions(&est, &gt).unwrap();
        let b = horn_rmse(&est, &gt);
        assert!(a > 0.0);
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn ate_random_matches_horn() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = rng.random_range(3..40);
            let gt: Vec<Vector3<f64>> = (0..n)
                .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
                .collect();
            let (r, t) = random_rigid(&mut rng);
            let est: Vec<_> = gt
                .iter()
                .map(|p| r * p + t + Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0))
                .collect();
            assert!((ate_rmse_positions(&est, &gt).unwrap() - horn_rmse(&est, &gt)).abs() < 1e-9);
        }
    }

    #[test]
    fn ate_errors() {
        let p = vec![Vector3::zeros(); 3];
        assert!(ate_rmse_positions(&p, &p[..2]).is_err());
        assert!(ate_rmse_positions(&p[..1], &p[..1]).is_err());
    }

    #[test]
    fn ate_on_poses_uses_centers() {
        let gt: Vec<Pose> = (0..5)
            .map(|i| Pose::look_at(&Vector3::new(i as f64, 1.0, 0.5), &Vector3::zeros(), &Vector3::z()))
            .collect();
        assert!(ate_rmse(&gt, &gt).unwrap() < 1e-12);
    }

    proptest! {
        #[test]
        fn ate_common_transform_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt: Vec<Vector3<f64>> = (0..10)
                .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let est: Vec<_> = gt.iter().map(|p| p + Vector3::new(rng.random_range(-0.1..0.1), 0.0, rng.random_range(-0.1..0.1))).collect();
            let (r, t) = random_rigid(&mut rng);
            let a = ate_rmse_positions(&est, &gt).unwrap();
            let tr = |v: &[Vector3<f64>]| v.iter().map(|p| r * p + t).collect::<Vec<_>>();
            let b = ate_rmse_positions(&tr(&est), &tr(&gt)).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    fn random_image(rng: &mut impl Rng, w: usize, h: usize, c: usize) -> Image {
        Image::from_vec(w, h, c, (0..w * h * c).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(8, 8, 3, 0.4);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(8, 8, 3, 0.5);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Image::filled(8, 7, 3, 0.4)).is_err());
    }

    #[test]
    fn psnr_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_image(&mut rng, 17, 13, 3);
        let b = random_image(&mut rng, 17, 13, 3);
        let mut s = 0.0;
        for i in 0..a.data().len() {
            let d = a.data()[i] - b.data()[i];
            s += d * d;
        }
        let want = -10.0 * (s / a.data().len() as f64).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    /// Direct 2-D window sums, no separability.
    fn ssim_reference(a: &Image, b: &Image) -> f64 {
        let mut k2 = [[0.0; 11]; 11];
        let mut sum = 0.0;
        for (i, row) in k2.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / 4.5).exp();
                sum += *v;
            }
        }
        let (w, h, ch) = (a.width(), a.height(), a.channels());
        let mut total = 0.0;
        let mut n = 0;
        for c in 0..ch {
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wgt = k2[i][j] / sum;
                            let va = a.at(x + j, y + i, c);
                            let vb = b.at(x + j, y + i, c);
                            ma += wgt * va;
                            mb += wgt * vb;
                            saa += wgt * va * va;
                            sbb += wgt * vb * vb;
                            sab += wgt * va * vb;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    total += ((2.0 * ma * mb + c1) * (2.0 * (sab - ma * mb) + c2))
                        / ((ma * ma + mb * mb + c1) * (saa - ma * ma + sbb - mb * mb + c2));
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn ssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_image(&mut rng, 24, 20, 3);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let neg = Image::from_vec(24, 20, 3, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &neg).unwrap() < 1.0);
        let b = random_image(&mut rng, 24, 20, 3);
        assert!((ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs() < 1e-6);
        assert!(ssim(&a, &Image::zeros(5, 5, 3)).is_err());
    }

    fn labels(w: usize, h: usize, data: Vec<u8>) -> LabelMap {
        LabelMap { width: w, height: h, data }
    }

    #[test]
    fn seg_examples() {
        let gt = labels(4, 1, vec![0, 0, 1, 1]);
        let s = seg_scores(&gt, &gt, 2).unwrap();
        assert_eq!((s.accuracy, s.miou), (100.0, 100.0));
        let s = seg_scores(&labels(4, 1, vec![0; 4]), &gt, 2).unwrap();
        assert_eq!(s.accuracy, 50.0);
        assert_eq!(s.per_class_iou, vec![Some(50.0), Some(0.0)]);
        assert_eq!(s.miou, 25.0);
        // Class 2 absent from both maps is excluded; ignore pixels skipped.
        let gt = labels(3, 1, vec![0, 1, IGNORE_LABEL]);
        let s = seg_scores(&labels(3, 1, vec![0, 1, 0]), &gt, 3).unwrap();
        assert_eq!(s.per_class_iou[2], None);
        assert_eq!((s.accuracy, s.miou), (100.0, 100.0));
    }

    #[test]
    fn seg_matches_confusion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let c = rng.random_range(2..7usize);
            let n = 300;
            let gt: Vec<u8> = (0..n)
                .map(|_| if rng.random_bool(0.1) { IGNORE_LABEL } else { rng.random_range(0..c) as u8 })
                .collect();
            let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..c) as u8).collect();
            let mut conf = vec![vec![0u64; c]; c];
            for (p, g) in pred.iter().zip(&gt) {
                if *g != IGNORE_LABEL {
                    conf[*g as usize][*p as usize] += 1;
                }
            }
            let total: u64 = conf.iter().flatten().sum();
            let diag: u64 = (0..c).map(|i| conf[i][i]).sum();
            let mut ious = Vec::new();
            for k in 0..c {
                let row: u64 = conf[k].iter().sum();
                let col: u64 = (0..c).map(|i| conf[i][k]).sum();
                let u = row + col - conf[k][k];
                if u > 0 {
                    ious.push(100.0 * conf[k][k] as f64 / u as f64);
                }
            }
            let s = seg_scores(&labels(n, 1, pred), &labels(n, 1, gt), c).unwrap();
            assert!((s.accuracy - 100.0 * diag as f64 / total as f64).abs() < 1e-12);
            assert!((s.miou - ious.iter().sum::<f64>() / ious.len() as f64).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn seg_relabel_equivariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = 4usize;
            let gt: Vec<u8> = (0..100).map(|_| rng.random_range(0..c) as u8).collect();
            let pred: Vec<u8> = (0..100).map(|_| rng.random_range(0..c) as u8).collect();
            let perm = [2u8, 0, 3, 1];
            let m = |v: &[u8]| v.iter().map(|&x| perm[x as usize]).collect::<Vec<_>>();
            let a = seg_scores(&labels(100, 1, pred.clone()), &labels(100, 1, gt.clone()), c).unwrap();
            let b = seg_scores(&labels(100, 1, m(&pred)), &labels(100, 1, m(&gt)), c).unwrap();
            prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
            prop_assert!((a.miou - b.miou).abs() < 1e-9);
            for k in 0..c {
                prop_assert_eq!(a.per_class_iou[k], b.per_class_iou[perm[k] as usize]);
            }
        }
    }
}
