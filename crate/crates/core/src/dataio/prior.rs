use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Frame;
use crate::error::{Error, Result};
use crate::image::{read_planar, write_planar, Image, IGNORE_LABEL};

/// Reads a planar float feature map (`GSFF` header).
pub fn load_prior_features(path: &Path) -> Result<Image> {
    read_planar(path)
}

/// Settings for turning label maps into noisy per-pixel query embeddings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorSynthesis {
    pub width: usize,
    pub height: usize,
    /// Fraction of labeled pixels replaced by a zero vector or a wrong query.
    pub corruption: f64,
    pub seed: u64,
}

/// Writes `priorXXXXXX.gsff` for every frame with labels and points the
/// frame's `prior_feature_path` at it.
///
/// Each labeled pixel carries the query embedding of its class, except for a
/// `corruption` fraction that is zeroed or swapped for another class's
/// query with equal probability. Ignored pixels are zero. Labels are sampled
/// nearest-neighbor at the prior resolution.
pub fn synthesize_textual_priors(
    frames: &mut [Frame],
    queries: &[Vec<f64>],
    cfg: &PriorSynthesis,
    dir: &Path,
) -> Result<()> {
    if queries.is_empty() {
        return Err(Error::Config("no query embeddings".into()));
    }
    let m = queries[0].len();
    if queries.iter().any(|q| q.len() != m) {
        return Err(Error::dim("query embeddings differ in length"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for frame in frames.iter_mut() {
        let Some(labels) = &frame.gt_label else { continue };
        let mut img = Image::zeros(cfg.width, cfg.height, m);
        for y in 0..cfg.height {
            let sy = ((y as f64 + 0.5) * labels.height as f64 / cfg.height as f64) as usize;
            for x in 0..cfg.width {
                let sx = ((x as f64 + 0.5) * labels.width as f64 / cfg.width as f64) as usize;
                let l = labels.at(sx.min(labels.width - 1), sy.min(labels.height - 1));
                let u: f64 = rng.random();
                let alt: usize = rng.random_range(0..queries.len());
                let zero: bool = rng.random();
                if l == IGNORE_LABEL || (l as usize) >= queries.len() {
                    continue;
                }
                let q = if u < cfg.corruption {
                    if zero || queries.len() == 1 {
                        continue;
                    }
                    let wrong = if alt == l as usize { (alt + 1) % queries.len() } else { alt };
                    &queries[wrong]
                } else {
                    &queries[l as usize]
                };
                img.pixel_mut(y * cfg.width + x).copy_from_slice(q);
            }
        }
        let path = dir.join(format!("prior{:06}.gsff", frame.frame_id));
        write_planar(&img, &path)?;
        frame.prior_feature_path = Some(path);
    }
    Ok(())
}
