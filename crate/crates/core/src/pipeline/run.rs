use std::fs;
use std::path::Path;
use std::sync::mpsc::sync_channel;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use super::config::{DatasetKind, PipelineConfig};
use super::snapshot::MapSnapshot;
use crate::dataio::{
    export_keyframes, export_trajectory, generate_synthetic, load_replica_like, load_tum_sequence,
    synthesize_textual_priors, Frame, PriorSynthesis, TrajectoryEntry,
};
use crate::error::{Error, Result};
use crate::image::{write_label_png, write_rgb_png, LabelMap};
use crate::mapper::{
    covisibility_iou, is_keyframe, optimize_map, seed_gaussians, KeyframeEntry, KeyframeWindow, MapOptimizer,
};
use crate::metrics::{ate_rmse, psnr, seg_scores, ssim};
use crate::rasterizer::{render, CameraIntrinsics, Pose, RenderFlags};
use crate::scene::{GaussianMap, VisibilityRecord};
use crate::semantics::{
    optimize_semantics, predict_labels, predict_labels_textual, write_legend, FeatureHead, SemanticConfig,
    SemanticMode, SemanticState, TextQuerySet,
};
use crate::tracker::{extrapolate_pose, track_frame};

/// Frames and camera of one run, plus whatever label information the
/// dataset provides.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub frames: Vec<Arc<Frame>>,
    pub intrinsics: CameraIntrinsics,
    pub num_classes: Option<usize>,
    pub label_names: Vec<String>,
    pub queries: Option<TextQuerySet>,
}

impl Sequence {
    pub fn new(frames: Vec<Frame>, intrinsics: CameraIntrinsics) -> Self {
        Self {
            frames: frames.into_iter().map(Arc::new).collect(),
            intrinsics,
            num_classes: None,
            label_names: Vec::new(),
            queries: None,
        }
    }
}

/// Class names used for synthetic scenes: the table, then one per object.
pub fn synthetic_label_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|c| if c == 0 { "table".to_string() } else { format!("object{c}") })
        .collect()
}

/// Loads or generates the configured dataset. Synthetic runs in prior mode
/// write their priors under `output_dir/priors`.
pub fn load_sequence(cfg: &PipelineConfig) -> Result<Sequence> {
    let ds = &cfg.dataset;
    let mut seq = match ds.kind {
        DatasetKind::Synthetic => {
            let scene = generate_synthetic(&ds.synthetic)?;
            let c = ds.synthetic.num_classes;
            let mut frames = scene.frames;
            let mut queries = None;
            if cfg.semantics_enabled && cfg.semantics.mode == SemanticMode::Textual {
                let dir = cfg
                    .output_dir
                    .as_ref()
                    .ok_or_else(|| Error::Config("synthetic priors need output_dir".into()))?
                    .join("priors");
                let q = TextQuerySet::random_orthonormal(synthetic_label_names(c), cfg.semantics.prior_dim, ds.synthetic.seed)?;
                synthesize_textual_priors(
                    &mut frames,
                    &q.rows(),
                    &PriorSynthesis {
                        width: cfg.semantics.head_width,
                        height: cfg.semantics.head_height,
                        corruption: ds.prior_corruption,
                        seed: ds.synthetic.seed,
                    },
                    &dir,
                )?;
                queries = Some(q);
            }
            let mut s = Sequence::new(frames, scene.intrinsics);
            s.num_classes = Some(c);
            s.label_names = synthetic_label_names(c);
            s.queries = queries;
            s
        }
        DatasetKind::Tum => {
            let root = ds.path.as_ref().expect("validated");
            let tum = load_tum_sequence(root)?;
            let intr = ds
                .intrinsics
                .or(tum.intrinsics)
                .ok_or_else(|| Error::Config("TUM sequence without intrinsics".into()))?;
            Sequence::new(tum.frames, intr)
        }
        DatasetKind::Replica => {
            let root = ds.path.as_ref().expect("validated");
            let (frames, side) = load_replica_like(root)?;
            let intr = ds
                .intrinsics
                .or(side.camera)
                .ok_or_else(|| Error::Config("replica sequence without intrinsics".into()))?;
            Sequence::new(frames, intr)
        }
    };
    if seq.frames.is_empty() {
        return Err(Error::Format("sequence has no frames".into()));
    }
    if let Some(i) = ds.intrinsics {
        seq.intrinsics = i;
    }
    Ok(seq)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct KeyframeReport {
    pub frame_id: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub accuracy: Option<f64>,
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub ate_rmse_cm: Option<f64>,
    pub mean_keyframe_psnr: f64,
    pub mean_keyframe_ssim: f64,
    pub accuracy: Option<f64>,
    pub miou: Option<f64>,
    pub num_frames: usize,
    pub num_keyframes: usize,
    pub num_gaussians: usize,
    pub tracking_failures: usize,
    pub mean_tracking_iterations: f64,
    pub skipped_map_iterations: u64,
    pub runtime_seconds: f64,
}

impl RunMetrics {
    /// `key=value` lines; absent metrics are omitted.
    pub fn to_key_values(&self) -> String {
        let mut lines = Vec::new();
        let mut put = |k: &str, v: String| lines.push(format!("{k}={v}"));
        if let Some(a) = self.ate_rmse_cm {
            put("ate_rmse_cm", format!("{a:.6}"));
        }
        put("mean_keyframe_psnr", format!("{:.6}", self.mean_keyframe_psnr));
        put("mean_keyframe_ssim", format!("{:.6}", self.mean_keyframe_ssim));
        if let Some(a) = self.accuracy {
            put("accuracy", format!("{a:.6}"));
        }
        if let Some(m) = self.miou {
            put("miou", format!("{m:.6}"));
        }
        put("num_frames", self.num_frames.to_string());
        put("num_keyframes", self.num_keyframes.to_string());
        put("num_gaussians", self.num_gaussians.to_string());
        put("tracking_failures", self.tracking_failures.to_string());
        put("mean_tracking_iterations", format!("{:.3}", self.mean_tracking_iterations));
        put("skipped_map_iterations", self.skipped_map_iterations.to_string());
        put("runtime_seconds", format!("{:.3}", self.runtime_seconds));
        lines.join("\n") + "\n"
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    /// Estimated world-to-camera pose of every frame.
    pub trajectory: Vec<TrajectoryEntry>,
    pub keyframes: Vec<(usize, Pose)>,
    pub map: GaussianMap,
    pub head: Option<FeatureHead>,
    pub metrics: RunMetrics,
    pub per_keyframe: Vec<KeyframeReport>,
}

struct KeyframeJob {
    frame: Arc<Frame>,
    pose: Pose,
    visibility: VisibilityRecord,
}

/// State owned by the mapping side: working map, window and optimizers.
struct MappingWorker<'a> {
    cfg: &'a PipelineConfig,
    sem_cfg: SemanticConfig,
    intr: CameraIntrinsics,
    map: GaussianMap,
    window: KeyframeWindow,
    opt: MapOptimizer,
    sem: Option<SemanticState>,
    keyframes: Vec<(usize, Pose)>,
}

impl<'a> MappingWorker<'a> {
    fn new(cfg: &'a PipelineConfig, sem_cfg: SemanticConfig, intr: CameraIntrinsics) -> Result<Self> {
        let sem = if cfg.semantics_enabled {
            Some(SemanticState::new(&sem_cfg, cfg.feature_dim, cfg.seed)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            sem_cfg,
            intr,
            map: GaussianMap::new(cfg.feature_dim),
            window: KeyframeWindow::new(cfg.mapping.window_len),
            opt: MapOptimizer::default(),
            sem,
            keyframes: Vec::new(),
        })
    }

    /// Seed, optimize geometry, then semantics, then refresh the keyframe's
    /// visibility record against the updated map.
    fn process(&mut self, job: KeyframeJob) -> Result<()> {
        let first = self.window.is_empty();
        let frame = job.frame;
        let rendered = render(&self.map, &job.pose, &self.intr, RenderFlags::GEOMETRY)?;
        let seeds = seed_gaussians(&frame, &job.pose, &self.intr, &self.map, &rendered, &self.cfg.mapping, self.cfg.seed);
        let seeded = seeds.len();
        self.map.append_gaussians(seeds)?;
        self.window.push(KeyframeEntry {
            frame_id: frame.frame_id,
            frame: Arc::clone(&frame),
            pose: job.pose,
            visibility: job.visibility,
        })?;
        let iterations = if first {
            self.cfg.mapping.init_iterations
        } else {
            self.cfg.mapping.kf_iterations
        };
        let stats = optimize_map(
            &mut self.map,
            &self.window,
            &self.intr,
            &self.cfg.mapping,
            &self.cfg.learning_rates,
            &mut self.opt,
            iterations,
        )?;
        if let Some(sem) = self.sem.as_mut() {
            optimize_semantics(&mut self.map, &frame, &job.pose, &self.intr, &self.sem_cfg, sem, first)?;
        }
        let mut record = render(&self.map, &job.pose, &self.intr, RenderFlags::WITH_VISIBILITY)?
            .visibility
            .expect("visibility requested");
        record.frame_id = frame.frame_id;
        self.map.record_visibility(record.clone());
        if let Some(e) = self.window.newest_mut() {
            e.visibility = record;
        }
        self.keyframes.push((frame.frame_id, job.pose));
        log::info!(
            "keyframe {}: +{} gaussians ({} total), map loss {:.5}",
            frame.frame_id,
            seeded,
            self.map.len(),
            stats.last_loss
        );
        Ok(())
    }
}

/// Per-frame pose estimation and keyframe decisions.
struct TrackingSide<'a> {
    cfg: &'a PipelineConfig,
    intr: CameraIntrinsics,
    poses: Vec<Pose>,
    /// Record of the last keyframe this side sent, until the mapper's
    /// refreshed record supersedes it.
    pending: Option<VisibilityRecord>,
    failures: usize,
    iterations: usize,
    tracked: usize,
}

impl<'a> TrackingSide<'a> {
    fn new(cfg: &'a PipelineConfig, intr: CameraIntrinsics) -> Self {
        Self {
            cfg,
            intr,
            poses: Vec::new(),
            pending: None,
            failures: 0,
            iterations: 0,
            tracked: 0,
        }
    }

    /// Returns the keyframe job if `frame` becomes one.
    fn step(&mut self, map: &GaussianMap, frame: &Arc<Frame>) -> Option<KeyframeJob> {
        if self.poses.is_empty() {
            let pose = frame.gt_pose.unwrap_or_else(Pose::identity);
            self.poses.push(pose);
            let visibility = VisibilityRecord::new(frame.frame_id, 0);
            self.pending = Some(visibility.clone());
            return Some(KeyframeJob {
                frame: Arc::clone(frame),
                pose,
                visibility,
            });
        }
        let n = self.poses.len();
        let init = if n >= 2 {
            extrapolate_pose(&self.poses[n - 2], &self.poses[n - 1])
        } else {
            self.poses[n - 1]
        };
        let result = match track_frame(map, frame, &self.intr, &init, &self.cfg.tracking, &self.cfg.learning_rates) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("frame {}: tracking failed ({e}); using the predicted pose", frame.frame_id);
                self.failures += 1;
                self.poses.push(init);
                return None;
            }
        };
        self.tracked += 1;
        self.iterations += result.iterations_used;
        let mut visibility = result.visibility;
        visibility.frame_id = frame.frame_id;
        self.poses.push(result.pose);
        let published = map.visibility_records.values().next_back();
        let reference = match (published, &self.pending) {
            (Some(p), Some(q)) if q.frame_id > p.frame_id => q,
            (Some(p), _) => p,
            (None, Some(q)) => q,
            (None, None) => return None,
        };
        let iou = covisibility_iou(&visibility, reference);
        log::debug!("frame {}: iou {:.3}, {} iterations", frame.frame_id, iou, result.iterations_used);
        if !is_keyframe(iou, &self.cfg.mapping) {
            return None;
        }
        self.pending = Some(visibility.clone());
        Some(KeyframeJob {
            frame: Arc::clone(frame),
            pose: result.pose,
            visibility,
        })
    }
}

/// Loads the configured dataset and runs it.
pub fn run(cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    let seq = load_sequence(cfg)?;
    let report = run_sequence(cfg, &seq)?;
    if let Some(dir) = &cfg.output_dir {
        write_outputs(&report, cfg, &seq, dir)?;
    }
    Ok(report)
}

fn semantic_config_for(cfg: &PipelineConfig, seq: &Sequence) -> Result<SemanticConfig> {
    let mut s = cfg.semantics;
    if let Some(c) = seq.num_classes {
        s.num_classes = c;
    }
    if cfg.semantics_enabled {
        s.validate(cfg.feature_dim)?;
    }
    Ok(s)
}

/// Tracks and maps an already loaded sequence.
pub fn run_sequence(cfg: &PipelineConfig, seq: &Sequence) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let sem_cfg = semantic_config_for(cfg, seq)?;
    let intr = seq.intrinsics;
    let mut tracker = TrackingSide::new(cfg, intr);
    let snapshot = MapSnapshot::new(GaussianMap::new(cfg.feature_dim));
    let mut worker = MappingWorker::new(cfg, sem_cfg, intr)?;

    if cfg.single_thread {
        for frame in &seq.frames {
            let snap = snapshot.load();
            if let Some(job) = tracker.step(&snap.map, frame) {
                worker.process(job)?;
                snapshot.publish(worker.map.clone());
            }
        }
    } else {
        let (tx, rx) = sync_channel::<KeyframeJob>(cfg.queue_capacity);
        worker = std::thread::scope(|s| -> Result<MappingWorker> {
            let snap_ref = &snapshot;
            let handle = s.spawn(move || -> Result<MappingWorker> {
                let mut w = worker;
                for job in rx {
                    w.process(job)?;
                    snap_ref.publish(w.map.clone());
                }
                Ok(w)
            });
            let mut sent_ok = true;
            for (i, frame) in seq.frames.iter().enumerate() {
                if i == 1 {
                    // Nothing to track against until the first map exists.
                    snapshot.wait_for(1);
                }
                let snap = snapshot.load();
                if let Some(job) = tracker.step(&snap.map, frame) {
                    if tx.send(job).is_err() {
                        sent_ok = false;
                        break;
                    }
                }
            }
            drop(tx);
            let w = handle.join().map_err(|_| Error::Config("mapping thread panicked".into()))??;
            if !sent_ok {
                return Err(Error::Config("mapping thread stopped early".into()));
            }
            Ok(w)
        })?;
    }

    let trajectory: Vec<TrajectoryEntry> = seq
        .frames
        .iter()
        .zip(&tracker.poses)
        .map(|(f, p)| TrajectoryEntry {
            timestamp: f.timestamp,
            pose: *p,
        })
        .collect();
    let head = worker.sem.as_ref().and_then(|s| s.head.clone());
    let mut report = RunReport {
        trajectory,
        keyframes: worker.keyframes.clone(),
        map: worker.map,
        head,
        metrics: RunMetrics::default(),
        per_keyframe: Vec::new(),
    };
    evaluate(&mut report, cfg, &sem_cfg, seq)?;
    report.metrics.tracking_failures = tracker.failures;
    report.metrics.mean_tracking_iterations = if tracker.tracked > 0 {
        tracker.iterations as f64 / tracker.tracked as f64
    } else {
        0.0
    };
    report.metrics.skipped_map_iterations = worker.opt.skipped_iterations;
    report.metrics.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Nearest-neighbor resampling of a label map.
fn resample_labels(l: &LabelMap, width: usize, height: usize) -> LabelMap {
    let data = (0..height)
        .flat_map(|y| {
            let sy = (((y as f64 + 0.5) * l.height as f64 / height as f64) as usize).min(l.height - 1);
            (0..width).map(move |x| {
                let sx = (((x as f64 + 0.5) * l.width as f64 / width as f64) as usize).min(l.width - 1);
                l.data[sy * l.width + sx]
            })
        })
        .collect();
    LabelMap { width, height, data }
}

/// Predicted labels at the frame resolution for a keyframe render, when the
/// run has a way to produce them.
pub fn predicted_labels(
    features: &crate::image::Image,
    sem_cfg: &SemanticConfig,
    head: Option<&FeatureHead>,
    queries: Option<&TextQuerySet>,
) -> Result<Option<LabelMap>> {
    match sem_cfg.mode {
        SemanticMode::GroundTruth => predict_labels(features, sem_cfg.num_classes).map(Some),
        SemanticMode::Textual => match (head, queries) {
            (Some(h), Some(q)) => {
                let l = predict_labels_textual(features, h, q)?;
                Ok(Some(resample_labels(&l, features.width(), features.height())))
            }
            _ => Ok(None),
        },
    }
}

fn evaluate(report: &mut RunReport, cfg: &PipelineConfig, sem_cfg: &SemanticConfig, seq: &Sequence) -> Result<()> {
    let m = &mut report.metrics;
    m.num_frames = seq.frames.len();
    m.num_keyframes = report.keyframes.len();
    m.num_gaussians = report.map.len();
    let gt: Option<Vec<Pose>> = seq.frames.iter().map(|f| f.gt_pose).collect();
    if let Some(gt) = gt {
        if gt.len() >= 2 {
            let est: Vec<Pose> = report.trajectory.iter().map(|e| e.pose).collect();
            m.ate_rmse_cm = Some(ate_rmse(&est, &gt)?);
        }
    }
    let flags = if cfg.semantics_enabled {
        RenderFlags::WITH_FEATURES
    } else {
        RenderFlags::GEOMETRY
    };
    let num_classes = match sem_cfg.mode {
        SemanticMode::GroundTruth => sem_cfg.num_classes,
        SemanticMode::Textual => seq.queries.as_ref().map_or(0, TextQuerySet::len),
    };
    let (mut pred_all, mut gt_all) = (Vec::new(), Vec::new());
    for &(id, pose) in &report.keyframes {
        let frame = seq
            .frames
            .iter()
            .find(|f| f.frame_id == id)
            .expect("keyframe comes from the sequence");
        let out = render(&report.map, &pose, &seq.intrinsics, flags)?;
        let mut kr = KeyframeReport {
            frame_id: id,
            psnr: psnr(&out.color, &frame.rgb)?,
            ssim: ssim(&out.color, &frame.rgb).unwrap_or(f64::NAN),
            ..KeyframeReport::default()
        };
        if let (Some(feats), Some(labels)) = (&out.features, &frame.gt_label) {
            if let Some(pred) = predicted_labels(feats, sem_cfg, report.head.as_ref(), seq.queries.as_ref())? {
                let s = seg_scores(&pred, labels, num_classes)?;
                kr.accuracy = Some(s.accuracy);
                kr.miou = Some(s.miou);
                pred_all.extend(pred.data);
                gt_all.extend(labels.data.iter().copied());
            }
        }
        report.per_keyframe.push(kr);
    }
    let k = report.per_keyframe.len().max(1) as f64;
    m.mean_keyframe_psnr = report.per_keyframe.iter().map(|r| r.psnr).sum::<f64>() / k;
    m.mean_keyframe_ssim = report.per_keyframe.iter().map(|r| r.ssim).sum::<f64>() / k;
    if !pred_all.is_empty() {
        let n = pred_all.len();
        let pooled = seg_scores(
            &LabelMap {
                width: n,
                height: 1,
                data: pred_all,
            },
            &LabelMap {
                width: n,
                height: 1,
                data: gt_all,
            },
            num_classes,
        )?;
        m.accuracy = Some(pooled.accuracy);
        m.miou = Some(pooled.miou);
    }
    Ok(())
}

/// Writes the trajectory, keyframe list, map, metrics and keyframe renders.
pub fn write_outputs(report: &RunReport, cfg: &PipelineConfig, seq: &Sequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    export_trajectory(&report.trajectory, &dir.join("trajectory.txt"))?;
    export_keyframes(&report.keyframes, &dir.join("keyframes.txt"))?;
    report.map.save(&dir.join("map.txt"))?;
    let kv = dir.join("metrics.txt");
    fs::write(&kv, report.metrics.to_key_values()).map_err(|e| Error::io(&kv, e))?;
    let js = dir.join("metrics.json");
    let json = serde_json::json!({
        "metrics": report.metrics,
        "keyframes": report.per_keyframe,
    });
    fs::write(&js, serde_json::to_string_pretty(&json).expect("plain data serializes") + "\n")
        .map_err(|e| Error::io(&js, e))?;
    let kdir = dir.join("keyframes");
    fs::create_dir_all(&kdir).map_err(|e| Error::io(&kdir, e))?;
    let sem_cfg = semantic_config_for(cfg, seq)?;
    let flags = if cfg.semantics_enabled {
        RenderFlags::WITH_FEATURES
    } else {
        RenderFlags::GEOMETRY
    };
    for &(id, pose) in &report.keyframes {
        let out = render(&report.map, &pose, &seq.intrinsics, flags)?;
        write_rgb_png(&out.color, &kdir.join(format!("render_{id:06}.png")))?;
        if let Some(feats) = &out.features {
            if let Some(l) = predicted_labels(feats, &sem_cfg, report.head.as_ref(), seq.queries.as_ref())? {
                write_label_png(&l, &kdir.join(format!("labels_{id:06}.png")))?;
            }
        }
    }
    if cfg.semantics_enabled && !seq.label_names.is_empty() {
        write_legend(&seq.label_names, &kdir.join("legend.txt"))?;
    }
    Ok(())
}
