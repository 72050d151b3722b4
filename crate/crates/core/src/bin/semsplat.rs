use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use semsplat::dataio::{
    generate_synthetic, parse_trajectory, read_trajectory, write_replica_like, ReplicaSidecar, SyntheticSceneSpec,
    TrajectoryEntry,
};
use semsplat::image::{write_label_png, write_rgb_png};
use semsplat::metrics::ate_rmse;
use semsplat::pipeline::{run, PipelineConfig};
use semsplat::rasterizer::{render, CameraIntrinsics, RenderFlags};
use semsplat::scene::GaussianMap;

#[derive(Parser)]
#[command(name = "semsplat", version, about = "Semantic RGB-D SLAM on Gaussian splats")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track and map a sequence.
    Run {
        /// TOML pipeline configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "dual_thread")]
        single_thread: bool,
        /// Map on a separate thread (results depend on timing).
        #[arg(long)]
        dual_thread: bool,
        #[arg(long)]
        no_semantics: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// ATE RMSE between two trajectory files.
    Eval {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Render an exported map from one camera pose.
    Render {
        #[arg(long)]
        map: PathBuf,
        /// Camera-to-world `tx ty tz qx qy qz qw`.
        #[arg(long, allow_hyphen_values = true)]
        pose: String,
        #[arg(long)]
        out: PathBuf,
        /// `fx fy cx cy width height`; the synthetic camera by default.
        #[arg(long, allow_hyphen_values = true)]
        intrinsics: Option<String>,
        /// Also write predicted labels from the first N feature channels.
        #[arg(long)]
        labels: Option<usize>,
    },
    /// Generate a synthetic sequence in the Replica-like layout.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_intrinsics(s: &str) -> Result<CameraIntrinsics> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .context("intrinsics must be numbers")?;
    if v.len() != 6 {
        bail!("expected `fx fy cx cy width height`, got {} values", v.len());
    }
    let intr = CameraIntrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize);
    intr.validate()?;
    Ok(intr)
}

/// Pairs estimate and ground truth by index when lengths agree, otherwise by
/// nearest timestamp within 20 ms.
fn associate(est: &[TrajectoryEntry], gt: &[TrajectoryEntry]) -> (Vec<TrajectoryEntry>, Vec<TrajectoryEntry>) {
    if est.len() == gt.len() {
        return (est.to_vec(), gt.to_vec());
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    for e in est {
        let best = gt
            .iter()
            .min_by(|x, y| (x.timestamp - e.timestamp).abs().total_cmp(&(y.timestamp - e.timestamp).abs()));
        if let Some(g) = best.filter(|g| (g.timestamp - e.timestamp).abs() <= 0.02) {
            a.push(*e);
            b.push(*g);
        }
    }
    (a, b)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            single_thread,
            dual_thread,
            no_semantics,
            seed,
            out,
        } => {
            let mut cfg = match &config {
                Some(p) => PipelineConfig::load(p)?,
                None => PipelineConfig::default(),
            };
            if single_thread {
                cfg.single_thread = true;
            }
            if dual_thread {
                cfg.single_thread = false;
            }
            if no_semantics {
                cfg.semantics_enabled = false;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.output_dir = Some(out.clone());
            let report = run(&cfg)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
            print!("{}", report.metrics.to_key_values());
        }
        Command::Eval { traj, gt } => {
            let est = read_trajectory(&traj)?;
            let gt = read_trajectory(&gt)?;
            let (e, g) = associate(&est, &gt);
            if e.len() < 2 {
                bail!("fewer than two associated poses");
            }
            let poses = |v: &[TrajectoryEntry]| v.iter().map(|t| t.pose).collect::<Vec<_>>();
            println!("pairs={}", e.len());
            println!("ate_rmse_cm={:.6}", ate_rmse(&poses(&e), &poses(&g))?);
        }
        Command::Render {
            map,
            pose,
            out,
            intrinsics,
            labels,
        } => {
            let map = GaussianMap::load(&map)?;
            let entries = parse_trajectory(&format!("0 {pose}\n"))?;
            let Some(entry) = entries.first() else {
                bail!("could not parse pose");
            };
            let intr = match intrinsics {
                Some(s) => parse_intrinsics(&s)?,
                None => SyntheticSceneSpec::default().intrinsics,
            };
            let flags = if labels.is_some() {
                RenderFlags::WITH_FEATURES
            } else {
                RenderFlags::GEOMETRY
            };
            let img = render(&map, &entry.pose, &intr, flags)?;
            write_rgb_png(&img.color, &out)?;
            if let (Some(c), Some(f)) = (labels, &img.features) {
                let l = semsplat::semantics::predict_labels(f, c)?;
                write_label_png(&l, &out.with_extension("labels.png"))?;
            }
        }
        Command::Synth { spec, out } => {
            let spec = match &spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str::<SyntheticSceneSpec>(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => SyntheticSceneSpec::default(),
            };
            let scene = generate_synthetic(&spec)?;
            let sidecar = ReplicaSidecar {
                depth_scale: spec.depth_scale,
                camera: Some(scene.intrinsics),
            };
            write_replica_like(&out, &scene.frames, &sidecar)?;
            scene.map.save(&out.join("gt_map.txt"))?;
            println!("frames={}", scene.frames.len());
            println!("gaussians={}", scene.map.len());
        }
    }
    Ok(())
}
