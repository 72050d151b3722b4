use std::cmp::Ordering;

use rayon::prelude::*;

use super::project::{project_cached, ProjectionCache};
use super::{
    note_feature_allocation, CameraIntrinsics, Contribution, Pose, RenderAux, RenderFlags,
    RenderOutput, Splat, TileContribs, ALPHA_MAX, ALPHA_MIN, TILE_SIZE, TRANSMITTANCE_MIN,
    VISIBLE_TRANSMITTANCE,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::{sigmoid, GaussianMap, VisibilityRecord};

/// Projects, culls and depth-sorts the map. Splat ids are positions in the
/// returned vectors.
pub(crate) fn build_splats(
    map: &GaussianMap,
    pose: &Pose,
    intr: &CameraIntrinsics,
) -> (Vec<Splat>, Vec<ProjectionCache>) {
    let projected: Vec<Option<(Splat, ProjectionCache)>> = map
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let cache = project_cached(g, pose, intr);
            if !cache.in_frustum || cache.degenerate {
                return None;
            }
            let opacity = sigmoid(g.opacity_logit);
            // Exact support: α·G >= 1/255  <=>  Mahalanobis² <= 2 ln(255 α).
            let reach = 255.0 * opacity;
            if reach <= 1.0 {
                return None;
            }
            let k2 = 2.0 * reach.ln();
            let rx = (k2 * cache.cov2d[(0, 0)]).sqrt();
            let ry = (k2 * cache.cov2d[(1, 1)]).sqrt();
            let (u, v) = (cache.mean2d.x, cache.mean2d.y);
            let w_max = (intr.width - 1) as f64;
            let h_max = (intr.height - 1) as f64;
            let x0 = (u - rx).floor().max(0.0);
            let x1 = (u + rx).ceil().min(w_max);
            let y0 = (v - ry).floor().max(0.0);
            let y1 = (v + ry).ceil().min(h_max);
            if x0 > x1 || y0 > y1 {
                return None;
            }
            let a = &cache.conic;
            let splat = Splat {
                gaussian: i,
                mean: [u, v],
                conic: [a[(0, 0)], 0.5 * (a[(0, 1)] + a[(1, 0)]), a[(1, 1)]],
                opacity,
                depth: cache.cam_mean.z,
                rect: (x0 as usize, y0 as usize, x1 as usize, y1 as usize),
            };
            Some((splat, cache))
        })
        .collect();
    let mut both: Vec<(Splat, ProjectionCache)> = projected.into_iter().flatten().collect();
    both.sort_by(|a, b| {
        a.0.depth
            .partial_cmp(&b.0.depth)
            .unwrap_or(Ordering::Equal)
            .then(a.0.gaussian.cmp(&b.0.gaussian))
    });
    both.into_iter().unzip()
}

struct TileResult {
    color: Vec<f64>,
    depth: Vec<f64>,
    alpha: Vec<f64>,
    features: Vec<f64>,
    contribs: TileContribs,
    visible: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
fn composite_tile(
    x0: usize,
    y0: usize,
    width: usize,
    height: usize,
    list: Vec<u32>,
    splats: &[Splat],
    map: &GaussianMap,
    flags: RenderFlags,
) -> TileResult {
    let n = width * height;
    let nf = if flags.render_features { map.feature_dim() } else { 0 };
    let mut color = vec![0.0; n * 3];
    let mut depth = vec![0.0; n];
    let mut alpha = vec![0.0; n];
    let mut features = vec![0.0; n * nf];
    let mut offsets = Vec::with_capacity(n + 1);
    let mut entries = Vec::new();
    let mut visible = Vec::new();
    offsets.push(0u32);
    for ly in 0..height {
        let py = (y0 + ly) as f64;
        for lx in 0..width {
            let px = (x0 + lx) as f64;
            let p = ly * width + lx;
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let mut d = 0.0;
            for (slot, &sid) in list.iter().enumerate() {
                let s = &splats[sid as usize];
                let (power, _, _) = s.power(px, py);
                if power > 0.0 {
                    continue;
                }
                let a = (s.opacity * power.exp()).min(ALPHA_MAX);
                if a < ALPHA_MIN {
                    continue;
                }
                let t_next = t * (1.0 - a);
                if t_next < TRANSMITTANCE_MIN {
                    break;
                }
                let w = a * t;
                let g = &map.gaussians[s.gaussian];
                c[0] += g.color[0] * w;
                c[1] += g.color[1] * w;
                c[2] += g.color[2] * w;
                d += s.depth * w;
                if nf > 0 {
                    let out = &mut features[p * nf..(p + 1) * nf];
                    for (o, f) in out.iter_mut().zip(&g.feature) {
                        *o += f * w;
                    }
                }
                if flags.record_visibility && t > VISIBLE_TRANSMITTANCE {
                    visible.push(s.gaussian);
                }
                entries.push(Contribution {
                    slot: slot as u32,
                    alpha: a,
                    transmittance: t,
                });
                t = t_next;
            }
            color[p * 3..p * 3 + 3].copy_from_slice(&c);
            depth[p] = d;
            alpha[p] = 1.0 - t;
            offsets.push(entries.len() as u32);
        }
    }
    TileResult {
        color,
        depth,
        alpha,
        features,
        contribs: TileContribs {
            x0,
            y0,
            width,
            height,
            splats: list,
            offsets,
            entries,
        },
        visible,
    }
}

/// Tiled forward render.
pub fn render(
    map: &GaussianMap,
    pose: &Pose,
    intr: &CameraIntrinsics,
    flags: RenderFlags,
) -> Result<RenderOutput> {
    let nf = map.feature_dim();
    if flags.render_features && nf == 0 {
        return Err(Error::dim("feature rendering requested on a map with feature_dim 0"));
    }
    if let Some(g) = map.gaussians.iter().find(|g| g.feature.len() != nf) {
        return Err(Error::dim(format!(
            "gaussian feature length {} != map feature_dim {nf}",
            g.feature.len()
        )));
    }
    let (w, h) = (intr.width, intr.height);
    let (splats, caches) = build_splats(map, pose, intr);

    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);
    let mut lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (sid, s) in splats.iter().enumerate() {
        let (x0, y0, x1, y1) = s.rect;
        for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                lists[ty * tiles_x + tx].push(sid as u32);
            }
        }
    }

    let results: Vec<TileResult> = lists
        .into_par_iter()
        .enumerate()
        .map(|(ti, list)| {
            let (tx, ty) = (ti % tiles_x, ti / tiles_x);
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let tw = TILE_SIZE.min(w - x0);
            let th = TILE_SIZE.min(h - y0);
            composite_tile(x0, y0, tw, th, list, &splats, map, flags)
        })
        .collect();

    let mut color = Image::zeros(w, h, 3);
    let mut depth = Image::zeros(w, h, 1);
    let mut alpha = Image::zeros(w, h, 1);
    let mut features = if flags.render_features {
        note_feature_allocation();
        Some(Image::zeros(w, h, nf))
    } else {
        None
    };
    let mut visibility = flags
        .record_visibility
        .then(|| VisibilityRecord::new(0, map.len()));
    let mut tiles = Vec::with_capacity(results.len());
    for r in results {
        let tc = &r.contribs;
        for ly in 0..tc.height {
            for lx in 0..tc.width {
                let p = ly * tc.width + lx;
                let gi = (tc.y0 + ly) * w + tc.x0 + lx;
                color.pixel_mut(gi).copy_from_slice(&r.color[p * 3..p * 3 + 3]);
                depth.data_mut()[gi] = r.depth[p];
                alpha.data_mut()[gi] = r.alpha[p];
                if let Some(f) = features.as_mut() {
                    f.pixel_mut(gi).copy_from_slice(&r.features[p * nf..(p + 1) * nf]);
                }
            }
        }
        if let Some(v) = visibility.as_mut() {
            for &g in &r.visible {
                v.set(g);
            }
        }
        tiles.push(r.contribs);
    }

    Ok(RenderOutput {
        color,
        depth,
        alpha,
        features,
        visibility,
        aux: RenderAux {
            splats,
            caches,
            tiles,
            map_len: map.len(),
            feature_dim: nf,
        },
    })
}

/// Images produced by the brute-force compositor.
#[derive(Clone, Debug)]
pub struct ReferenceOutput {
    pub color: Image,
    pub depth: Image,
    pub alpha: Image,
    pub features: Option<Image>,
    pub visibility: VisibilityRecord,
    /// Per pixel, the Gaussian with the largest compositing weight.
    pub dominant: Vec<Option<usize>>,
}

/// Untiled per-pixel compositor over the full depth-sorted splat list.
///
/// Serves as the correctness reference for [`render`] and as the renderer
/// of synthetic ground truth.
pub fn render_reference(
    map: &GaussianMap,
    pose: &Pose,
    intr: &CameraIntrinsics,
    render_features: bool,
) -> ReferenceOutput {
    let (w, h) = (intr.width, intr.height);
    let nf = map.feature_dim();
    let (splats, _) = build_splats(map, pose, intr);
    let mut color = Image::zeros(w, h, 3);
    let mut depth = Image::zeros(w, h, 1);
    let mut alpha = Image::zeros(w, h, 1);
    let mut features = render_features.then(|| Image::zeros(w, h, nf));
    let mut visibility = VisibilityRecord::new(0, map.len());
    let mut dominant = vec![None; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut transmittance = 1.0;
            let mut best = 0.0;
            for s in &splats {
                let dx = x as f64 - s.mean[0];
                let dy = y as f64 - s.mean[1];
                let [ca, cb, cc] = s.conic;
                let power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy);
                if power > 0.0 {
                    continue;
                }
                let a = (s.opacity * power.exp()).min(ALPHA_MAX);
                if a < ALPHA_MIN {
                    continue;
                }
                if transmittance * (1.0 - a) < TRANSMITTANCE_MIN {
                    break;
                }
                let weight = a * transmittance;
                let g = &map.gaussians[s.gaussian];
                for ch in 0..3 {
                    color.data_mut()[p * 3 + ch] += g.color[ch] * weight;
                }
                depth.data_mut()[p] += s.depth * weight;
                if let Some(f) = features.as_mut() {
                    for (o, v) in f.pixel_mut(p).iter_mut().zip(&g.feature) {
                        *o += v * weight;
                    }
                }
                if transmittance > VISIBLE_TRANSMITTANCE {
                    visibility.set(s.gaussian);
                }
                if weight > best {
                    best = weight;
                    dominant[p] = Some(s.gaussian);
                }
                transmittance *= 1.0 - a;
            }
            alpha.data_mut()[p] = 1.0 - transmittance;
        }
    }
    ReferenceOutput {
        color,
        depth,
        alpha,
        features,
        visibility,
        dominant,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasterizer::testutil::random_scene;
    use crate::scene::Gaussian;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &Image, b: &Image) -> f64 {
        assert!(a.same_shape(b));
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn centered(z: f64, opacity_logit: f64, color: Vector3<f64>) -> Gaussian {
        let mut g = Gaussian::isotropic(Vector3::new(0.0, 0.0, z), 0.05, 0.5, color, 0);
        g.opacity_logit = opacity_logit;
        g
    }

    fn small_cam() -> CameraIntrinsics {
        CameraIntrinsics::new(50.0, 50.0, 16.0, 16.0, 33, 33)
    }

    #[test]
    fn single_opaque_splat() {
        let mut map = GaussianMap::new(0);
        map.append_gaussians(vec![centered(2.0, 30.0, Vector3::new(1.0, 0.0, 0.0))])
            .unwrap();
        let out = render(&map, &Pose::identity(), &small_cam(), RenderFlags::GEOMETRY).unwrap();
        let p = 16 * 33 + 16;
        let c = out.color.pixel(p);
        assert!((c[0] - 0.99).abs() < 1e-12 && c[1] == 0.0 && c[2] == 0.0);
        assert!((out.depth.data()[p] - 0.99 * 2.0).abs() < 1e-12);
        assert!((out.alpha.data()[p] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn two_coincident_splats() {
        let mut map = GaussianMap::new(0);
        map.append_gaussians(vec![
            centered(2.0, 0.0, Vector3::new(1.0, 1.0, 1.0)),
            centered(3.0, 30.0, Vector3::zeros()),
        ])
        .unwrap();
        let out = render(&map, &Pose::identity(), &small_cam(), RenderFlags::GEOMETRY).unwrap();
        let p = 16 * 33 + 16;
        for c in out.color.pixel(p) {
            assert!((c - 0.5).abs() < 1e-12, "{c}");
        }
    }

    #[test]
    fn tiled_matches_reference() {
        for seed in 0..10 {
            let (map, pose, intr) = random_scene(seed, 30, 6);
            let out = render(&map, &pose, &intr, RenderFlags { render_features: true, record_visibility: true }).unwrap();
            let r = render_reference(&map, &pose, &intr, true);
            assert!(max_abs_diff(&out.color, &r.color) <= 1e-12, "seed {seed}");
            assert!(max_abs_diff(&out.depth, &r.depth) <= 1e-12);
            assert!(max_abs_diff(&out.alpha, &r.alpha) <= 1e-12);
            assert!(max_abs_diff(out.features.as_ref().unwrap(), r.features.as_ref().unwrap()) <= 1e-12);
            assert_eq!(out.visibility.as_ref().unwrap(), &r.visibility);
            assert!(out.alpha.data().iter().any(|&a| a > 0.5), "seed {seed} renders something");
        }
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..5 {
            let (map, pose, intr) = random_scene(100 + seed, 30, 3);
            let base = render(&map, &pose, &intr, RenderFlags::WITH_FEATURES).unwrap();
            let mut shuffled = map.clone();
            shuffled.gaussians.shuffle(&mut rng);
            let out = render(&shuffled, &pose, &intr, RenderFlags::WITH_FEATURES).unwrap();
            assert!(max_abs_diff(&base.color, &out.color) <= 1e-6);
            assert!(max_abs_diff(&base.depth, &out.depth) <= 1e-6);
            assert!(max_abs_diff(&base.alpha, &out.alpha) <= 1e-6);
            assert!(max_abs_diff(base.features.as_ref().unwrap(), out.features.as_ref().unwrap()) <= 1e-6);
        }
    }

    #[test]
    fn features_off_is_bitwise_identical() {
        let (map, pose, intr) = random_scene(5, 40, 4);
        let on = render(&map, &pose, &intr, RenderFlags::WITH_FEATURES).unwrap();
        let off = render(&map, &pose, &intr, RenderFlags::GEOMETRY).unwrap();
        assert!(off.features.is_none());
        assert_eq!(on.color, off.color);
        assert_eq!(on.depth, off.depth);
        assert_eq!(on.alpha, off.alpha);
    }

    #[test]
    fn feature_dim_errors() {
        let (mut map, pose, intr) = random_scene(1, 3, 0);
        assert!(matches!(
            render(&map, &pose, &intr, RenderFlags::WITH_FEATURES),
            Err(Error::Dimension(_))
        ));
        map.gaussians[0].feature = vec![1.0];
        assert!(matches!(render(&map, &pose, &intr, RenderFlags::GEOMETRY), Err(Error::Dimension(_))));
    }

    #[test]
    fn empty_map_renders_black() {
        let map = GaussianMap::new(2);
        let out = render(&map, &Pose::identity(), &small_cam(), RenderFlags::WITH_VISIBILITY).unwrap();
        assert!(out.color.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.visibility.unwrap().len(), 0);
    }

    #[test]
    fn occluded_splat_not_visible() {
        let mut map = GaussianMap::new(0);
        let mut front = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.5, 0.5, Vector3::zeros(), 0);
        front.opacity_logit = 30.0;
        let back = Gaussian::isotropic(Vector3::new(0.0, 0.0, 4.0), 0.05, 0.9, Vector3::zeros(), 0);
        map.append_gaussians(vec![front, back]).unwrap();
        let out = render(&map, &Pose::identity(), &small_cam(), RenderFlags::WITH_VISIBILITY).unwrap();
        let v = out.visibility.unwrap();
        assert!(v.get(0));
        assert!(!v.get(1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn alpha_and_depth_bounds(seed in 0u64..10_000) {
            let (map, pose, intr) = random_scene(seed, 20, 0);
            let out = render(&map, &pose, &intr, RenderFlags::GEOMETRY).unwrap();
            for (a, d) in out.alpha.data().iter().zip(out.depth.data()) {
                prop_assert!((0.0..=1.0).contains(a));
                if *a > 0.0 {
                    prop_assert!(*d >= 0.0);
                }
            }
        }
    }
}
