//! Feature-field optimization under label or prior-feature supervision.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{load_prior_features, Frame};
use crate::error::{Error, Result};
use crate::image::{Image, LabelMap, IGNORE_LABEL};
use crate::optimizer::{adam_step, AdamState};
use crate::rasterizer::{render, render_backward, CameraIntrinsics, Pose, RenderFlags};
use crate::scene::GaussianMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticMode {
    GroundTruth,
    Textual,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticConfig {
    pub mode: SemanticMode,
    pub num_classes: usize,
    pub prior_dim: usize,
    pub init_iterations: usize,
    /// Iterations per later keyframe; `None` picks 3 for labels, 1 for priors.
    pub kf_iterations: Option<usize>,
    pub feature_lr: f64,
    pub head_lr: f64,
    pub head_width: usize,
    pub head_height: usize,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            mode: SemanticMode::GroundTruth,
            num_classes: 8,
            prior_dim: 512,
            init_iterations: 10,
            kf_iterations: None,
            feature_lr: 0.01,
            head_lr: 0.01,
            head_width: 480,
            head_height: 360,
        }
    }
}

impl SemanticConfig {
    pub fn keyframe_iterations(&self) -> usize {
        self.kf_iterations.unwrap_or(match self.mode {
            SemanticMode::GroundTruth => 3,
            SemanticMode::Textual => 1,
        })
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        match self.mode {
            SemanticMode::GroundTruth if self.num_classes == 0 || self.num_classes > feature_dim => Err(Error::Config(
                format!("{} classes need 1..={feature_dim} feature channels", self.num_classes),
            )),
            SemanticMode::Textual if self.prior_dim == 0 || self.head_width == 0 || self.head_height == 0 => {
                Err(Error::Config("textual mode needs a positive prior size".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Softmax cross-entropy over the first `num_classes` channels, averaged over
/// pixels whose label is not ignored. Returns the loss and its gradient.
pub fn semantic_loss_gt(features: &Image, labels: &LabelMap, num_classes: usize) -> Result<(f64, Image)> {
    let n = features.channels();
    if num_classes == 0 || num_classes > n {
        return Err(Error::Config(format!("{num_classes} classes with {n} feature channels")));
    }
    if labels.width != features.width() || labels.height != features.height() {
        return Err(Error::dim("label map and feature image differ in size"));
    }
    let mut grad = Image::zeros(features.width(), features.height(), n);
    let valid: Vec<usize> = (0..labels.data.len())
        .filter(|&p| (labels.data[p] as usize) < num_classes)
        .collect();
    if valid.is_empty() {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / valid.len() as f64;
    let mut loss = 0.0;
    for &p in &valid {
        let f = &features.pixel(p)[..num_classes];
        let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = f.iter().map(|v| (v - m).exp()).sum();
        let y = labels.data[p] as usize;
        loss += z.ln() + m - f[y];
        let g = grad.pixel_mut(p);
        for c in 0..num_classes {
            g[c] = inv * ((f[c] - m).exp() / z - if c == y { 1.0 } else { 0.0 });
        }
    }
    Ok((loss * inv, grad))
}

/// Per-pixel argmax over the first `num_classes` channels, lowest index on ties.
pub fn predict_labels(features: &Image, num_classes: usize) -> Result<LabelMap> {
    if num_classes == 0 || num_classes > features.channels() || num_classes > IGNORE_LABEL as usize {
        return Err(Error::Config(format!(
            "{num_classes} classes with {} feature channels",
            features.channels()
        )));
    }
    let data = (0..features.num_pixels())
        .map(|p| argmax(&features.pixel(p)[..num_classes]) as u8)
        .collect();
    Ok(LabelMap {
        width: features.width(),
        height: features.height(),
        data,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// 1×1 linear map from rendered features to prior space followed by a
/// bilinear resize to the prior resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureHead {
    /// `M × N`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub out_width: usize,
    pub out_height: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradients {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Source taps `(i0, i1, w0, w1)` for half-pixel-centered linear resampling.
fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let l = s - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

impl FeatureHead {
    /// Uniform weights in `±1/√N`, zero bias.
    pub fn random(prior_dim: usize, feature_dim: usize, out_width: usize, out_height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (feature_dim.max(1) as f64).sqrt();
        Self {
            weight: DMatrix::from_fn(prior_dim, feature_dim, |_, _| rng.random_range(-bound..bound)),
            bias: DVector::zeros(prior_dim),
            out_width,
            out_height,
        }
    }

    pub fn prior_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bias.len() != self.prior_dim() {
            return Err(Error::dim("head bias length differs from its weight rows"));
        }
        if self.weight.iter().chain(self.bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite head parameter".into()));
        }
        Ok(())
    }

    fn check_input(&self, features: &Image) -> Result<()> {
        if features.channels() != self.feature_dim() {
            return Err(Error::dim(format!(
                "head expects {} channels, got {}",
                self.feature_dim(),
                features.channels()
            )));
        }
        if features.num_pixels() == 0 {
            return Err(Error::dim("empty feature image"));
        }
        Ok(())
    }

    fn as_matrix(features: &Image) -> DMatrix<f64> {
        DMatrix::from_column_slice(features.channels(), features.num_pixels(), features.data())
    }
}

/// Applies the head; the result is `out_width × out_height × M`.
pub fn apply_head(head: &FeatureHead, features: &Image) -> Result<Image> {
    head.check_input(features)?;
    let mut lin = &head.weight * FeatureHead::as_matrix(features);
    for mut col in lin.column_iter_mut() {
        col += &head.bias;
    }
    let m = head.prior_dim();
    let (w, h) = (features.width(), features.height());
    let tx = resize_taps(w, head.out_width);
    let ty = resize_taps(h, head.out_height);
    let mut out = Image::zeros(head.out_width, head.out_height, m);
    for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        for (x, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            let o = out.pixel_mut(y * head.out_width + x);
            for (sy, wy) in [(y0, wy0), (y1, wy1)] {
                for (sx, wx) in [(x0, wx0), (x1, wx1)] {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let src = lin.column(sy * w + sx);
                    for c in 0..m {
                        o[c] += wgt * src[c];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a loss on the head output with respect to the input
/// features and the head parameters.
pub fn apply_head_backward(head: &FeatureHead, features: &Image, dl_dout: &Image) -> Result<(Image, HeadGradients)> {
    head.check_input(features)?;
    let m = head.prior_dim();
    dl_dout.check_shape(head.out_width, head.out_height, m, "head output gradient")?;
    let (w, h) = (features.width(), features.height());
    let tx = resize_taps(w, head.out_width);
    let ty = resize_taps(h, head.out_height);
    let mut dlin = DMatrix::<f64>::zeros(m, w * h);
    for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        for (x, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            let g = dl_dout.pixel(y * head.out_width + x);
            for (sy, wy) in [(y0, wy0), (y1, wy1)] {
                for (sx, wx) in [(x0, wx0), (x1, wx1)] {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let mut col = dlin.column_mut(sy * w + sx);
                    for c in 0..m {
                        col[c] += wgt * g[c];
                    }
                }
            }
        }
    }
    let f = FeatureHead::as_matrix(features);
    let weight = &dlin * f.transpose();
    let bias = dlin.column_sum();
    let df = head.weight.transpose() * &dlin;
    let dfeat = Image::from_vec(w, h, head.feature_dim(), df.as_slice().to_vec())?;
    Ok((dfeat, HeadGradients { weight, bias }))
}

#[derive(Clone, Debug)]
pub struct TextualLoss {
    pub loss: f64,
    pub dl_dfeature: Image,
    pub head: HeadGradients,
}

/// Mean absolute difference between the head output and the prior map.
pub fn semantic_loss_textual(features: &Image, prior: &Image, head: &FeatureHead) -> Result<TextualLoss> {
    prior.check_shape(head.out_width, head.out_height, head.prior_dim(), "prior feature map")?;
    let out = apply_head(head, features)?;
    let inv = 1.0 / out.data().len() as f64;
    let mut loss = 0.0;
    let grad: Vec<f64> = out
        .data()
        .iter()
        .zip(prior.data())
        .map(|(o, p)| {
            let d = o - p;
            loss += d.abs();
            if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            }
        })
        .collect();
    let dout = Image::from_vec(out.width(), out.height(), out.channels(), grad)?;
    let (dl_dfeature, head_grad) = apply_head_backward(head, features, &dout)?;
    Ok(TextualLoss {
        loss: loss * inv,
        dl_dfeature,
        head: head_grad,
    })
}

/// Text labels with unit-norm query embeddings, one row per label.
#[derive(Clone, Debug, PartialEq)]
pub struct TextQuerySet {
    pub labels: Vec<String>,
    pub vectors: DMatrix<f64>,
}

impl TextQuerySet {
    /// Normalizes each embedding; zero or ragged rows are rejected.
    pub fn new(labels: Vec<String>, embeddings: &[Vec<f64>]) -> Result<Self> {
        if labels.len() != embeddings.len() {
            return Err(Error::dim("label and embedding counts differ"));
        }
        let m = embeddings.first().map_or(0, Vec::len);
        if embeddings.iter().any(|e| e.len() != m) {
            return Err(Error::dim("query embeddings differ in length"));
        }
        let mut vectors = DMatrix::zeros(embeddings.len(), m);
        for (i, e) in embeddings.iter().enumerate() {
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Numeric(format!("query {i} has no direction")));
            }
            for (j, v) in e.iter().enumerate() {
                vectors[(i, j)] = v / norm;
            }
        }
        Ok(Self { labels, vectors })
    }

    /// The first `count` standard basis vectors of dimension `dim`.
    pub fn orthonormal(labels: Vec<String>, dim: usize) -> Result<Self> {
        if labels.len() > dim {
            return Err(Error::dim(format!("{} orthonormal queries in {dim} dimensions", labels.len())));
        }
        let rows: Vec<Vec<f64>> = (0..labels.len())
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::new(labels, &rows)
    }

    /// Dense orthonormal embeddings: the Q factor of a seeded random
    /// `dim × count` matrix. Every channel carries signal, as in real text
    /// embeddings.
    pub fn random_orthonormal(labels: Vec<String>, dim: usize, seed: u64) -> Result<Self> {
        let count = labels.len();
        if count > dim {
            return Err(Error::dim(format!("{count} orthonormal queries in {dim} dimensions")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(dim, count, |_, _| rng.random_range(-1.0..1.0));
        let q = a.qr().q();
        let rows: Vec<Vec<f64>> = q.column_iter().map(|c| c.iter().copied().collect()).collect();
        Self::new(labels, &rows)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Row-major copies of the embeddings.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.vectors.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

/// Softmax over the dot products of a prior-space feature with every query.
pub fn label_probability(feature: &[f64], queries: &TextQuerySet) -> Result<Vec<f64>> {
    if queries.is_empty() {
        return Err(Error::Config("empty query set".into()));
    }
    if feature.len() != queries.dim() {
        return Err(Error::dim(format!("feature of length {} vs queries of {}", feature.len(), queries.dim())));
    }
    let logits: Vec<f64> = queries
        .vectors
        .row_iter()
        .map(|q| q.iter().zip(feature).map(|(a, b)| a * b).sum())
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Most probable query label per pixel of the head output.
pub fn predict_labels_textual(features: &Image, head: &FeatureHead, queries: &TextQuerySet) -> Result<LabelMap> {
    let out = apply_head(head, features)?;
    let data = (0..out.num_pixels())
        .map(|p| label_probability(out.pixel(p), queries).map(|pr| argmax(&pr) as u8))
        .collect::<Result<Vec<u8>>>()?;
    Ok(LabelMap {
        width: out.width(),
        height: out.height(),
        data,
    })
}

/// Deterministic display color for a class index.
pub fn label_color(class: u8) -> [u8; 3] {
    if class == IGNORE_LABEL {
        return [0, 0, 0];
    }
    let h = (class as u32).wrapping_mul(2_654_435_761);
    [(h >> 24) as u8 | 0x40, (h >> 16) as u8 | 0x40, (h >> 8) as u8 | 0x40]
}

/// Writes `index name r g b` lines for every label.
pub fn write_legend(names: &[String], path: &Path) -> Result<()> {
    let mut s = String::new();
    for (i, name) in names.iter().enumerate() {
        let [r, g, b] = label_color(i as u8);
        let _ = writeln!(s, "{i} {name} {r} {g} {b}");
    }
    let _ = writeln!(s, "{IGNORE_LABEL} ignore 0 0 0");
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Optimizer moments and, in prior mode, the head being trained.
#[derive(Clone, Debug)]
pub struct SemanticState {
    pub features: AdamState,
    pub head: Option<FeatureHead>,
    head_weight: AdamState,
    head_bias: AdamState,
}

impl SemanticState {
    pub fn new(cfg: &SemanticConfig, feature_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate(feature_dim)?;
        let head = (cfg.mode == SemanticMode::Textual)
            .then(|| FeatureHead::random(cfg.prior_dim, feature_dim, cfg.head_width, cfg.head_height, seed));
        Ok(Self::with_head(head))
    }

    pub fn with_head(head: Option<FeatureHead>) -> Self {
        let (nw, nb) = head.as_ref().map_or((0, 0), |h| (h.weight.len(), h.bias.len()));
        Self {
            features: AdamState::new(0),
            head,
            head_weight: AdamState::new(nw),
            head_bias: AdamState::new(nb),
        }
    }
}

/// Runs feature-only optimization on one keyframe and returns the number of
/// iterations executed. Geometry, appearance and pose are never touched.
#[allow(clippy::too_many_arguments)]
pub fn optimize_semantics(
    map: &mut GaussianMap,
    frame: &Frame,
    pose: &Pose,
    intr: &CameraIntrinsics,
    cfg: &SemanticConfig,
    state: &mut SemanticState,
    is_initial: bool,
) -> Result<usize> {
    let nf = map.feature_dim();
    cfg.validate(nf)?;
    let prior = match cfg.mode {
        SemanticMode::GroundTruth => {
            if frame.gt_label.is_none() {
                return Err(Error::Config(format!("frame {} has no labels", frame.frame_id)));
            }
            None
        }
        SemanticMode::Textual => {
            let path = frame
                .prior_feature_path
                .as_ref()
                .ok_or_else(|| Error::Config(format!("frame {} has no prior features", frame.frame_id)))?;
            if state.head.is_none() {
                return Err(Error::Config("textual mode needs a feature head".into()));
            }
            Some(load_prior_features(path)?)
        }
    };
    let iterations = if is_initial {
        cfg.init_iterations
    } else {
        cfg.keyframe_iterations()
    };
    let n = map.len();
    state.features.grow(n * nf);
    let zero_color = Image::zeros(intr.width, intr.height, 3);
    let zero_depth = Image::zeros(intr.width, intr.height, 1);
    for _ in 0..iterations {
        let out = render(map, pose, intr, RenderFlags::WITH_FEATURES)?;
        let feats = out.features.as_ref().expect("features requested");
        let (loss, dlf, head_grad) = match &prior {
            None => {
                let labels = frame.gt_label.as_ref().expect("checked above");
                let (l, g) = semantic_loss_gt(feats, labels, cfg.num_classes)?;
                (l, g, None)
            }
            Some(p) => {
                let t = semantic_loss_textual(feats, p, state.head.as_ref().expect("checked above"))?;
                (t.loss, t.dl_dfeature, Some(t.head))
            }
        };
        if !loss.is_finite() {
            log::warn!("non-finite semantic loss on frame {}", frame.frame_id);
            continue;
        }
        let (g, _) = render_backward(map, pose, intr, RenderFlags::WITH_FEATURES, &out, &zero_color, &zero_depth, Some(&dlf), false)?;
        let gf = g.feature.expect("feature gradient requested");
        let mut params: Vec<f64> = map.gaussians.iter().flat_map(|g| g.feature.iter().copied()).collect();
        adam_step(&mut params, &gf, &mut state.features, cfg.feature_lr)?;
        for (gau, chunk) in map.gaussians.iter_mut().zip(params.chunks_exact(nf)) {
            gau.feature.copy_from_slice(chunk);
        }
        if let (Some(hg), Some(head)) = (head_grad, state.head.as_mut()) {
            adam_step(head.weight.as_mut_slice(), hg.weight.as_slice(), &mut state.head_weight, cfg.head_lr)?;
            adam_step(head.bias.as_mut_slice(), hg.bias.as_slice(), &mut state.head_bias, cfg.head_lr)?;
        }
    }
    Ok(iterations)
}
