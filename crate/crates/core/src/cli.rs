//! Command-line entry point. Numeric output goes to stdout as CSV or
//! key=value lines; human-readable progress goes to stderr.

use crate::checkpoint::Checkpoint;
use crate::config::load_config;
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::metrics::{psnr, ssim};
use crate::model::TrainedModel;
use crate::render::RenderOptions;
use crate::scene::{Label, SceneDataset};
use crate::scene_io::{load_scene, save_scene, write_ppm};
use crate::synth::{cloud_at_time, generate_scene, MotionKind, SynthSpec};
use crate::train::{train, Stage1State, Stage2State, TrainConfig};
use crate::rng::Rng;
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "dash", about = "Dynamic Gaussian splatting with a 4D hash deformation field", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// Scene directory.
    #[arg(long)]
    scene: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    /// Key/value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (1 = fully serial); falls back to DASH_THREADS.
    #[arg(long)]
    threads: Option<usize>,
    /// Force single-threaded deterministic mode.
    #[arg(long)]
    deterministic: bool,
    #[arg(long = "iters-stage1")]
    iters_stage1: Option<u64>,
    #[arg(long = "iters-stage2")]
    iters_stage2: Option<u64>,
    /// Ablation: skip decomposition, 4D field covers everything.
    #[arg(long)]
    no_decomposition: bool,
    /// Ablation: no density control for dynamic Gaussians.
    #[arg(long)]
    no_dynamic_density_control: bool,
    /// Ablation: drop the smooth regularizer.
    #[arg(long)]
    no_smooth_reg: bool,
    /// Baseline: no deformation at all, plain static fitting.
    #[arg(long)]
    static_baseline: bool,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
}

impl TrainFlags {
    fn build_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            cfg = load_config(path, cfg)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if self.deterministic {
            cfg.threads = 1;
        }
        if let Some(n) = self.iters_stage1 {
            cfg.stage1_iters = n;
        }
        if let Some(n) = self.iters_stage2 {
            cfg.stage2_iters = n;
        }
        if let Some(n) = self.checkpoint_interval {
            cfg.checkpoint_interval = n;
        }
        cfg.ablation.no_decomposition |= self.no_decomposition;
        cfg.ablation.no_dynamic_density_control |= self.no_dynamic_density_control;
        cfg.ablation.no_smooth_reg |= self.no_smooth_reg;
        cfg.ablation.static_baseline |= self.static_baseline;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory.
    Synth {
        /// Scene preset; currently `orbit-64`.
        #[arg(long, default_value = "orbit-64")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        static_count: Option<usize>,
        #[arg(long)]
        dynamic_count: Option<usize>,
        #[arg(long)]
        cameras: Option<usize>,
        #[arg(long)]
        held_out: Option<usize>,
        #[arg(long)]
        timestamps: Option<usize>,
        #[arg(long)]
        resolution: Option<u32>,
        /// Motion kinds for the dynamic clusters (circular|linear|sinusoidal).
        #[arg(long, value_delimiter = ',')]
        motion: Vec<String>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run stage 1 + stage 2 end to end.
    Train(TrainFlags),
    /// Run stage 1 only and save the decomposition checkpoint.
    TrainDecompose(TrainFlags),
    /// Run stage 2 from a stage-1 checkpoint.
    TrainDeform {
        #[command(flatten)]
        flags: TrainFlags,
        /// Stage-1 checkpoint with the decomposed cloud.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render frames for requested views and times.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// View ids, comma separated; all scene views when omitted.
        #[arg(long, value_delimiter = ',')]
        views: Vec<u32>,
        /// Times in [0,1], comma separated; scene timestamps when omitted.
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// PSNR/SSIM against the scene's stored frames (CSV on stdout).
    Eval {
        #[arg(long)]
        scene: PathBuf,
        /// Checkpoint to evaluate; mutually exclusive with --gt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the scene's own ground truth (self-consistency).
        #[arg(long)]
        gt: bool,
        /// Restrict to held-out views.
        #[arg(long)]
        held_out_only: bool,
        /// Also write the CSV to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Repeated-render throughput report (key=value on stdout).
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 100)]
        repeats: usize,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Red/black dynamic-static label visualization.
    InspectLabels {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Camera view id to project through.
        #[arg(long, default_value_t = 0)]
        view: u32,
    },
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap prints usage itself; exit 2 for usage errors
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: code={} msg={}", e.code(), e);
            1
        }
    }
}

fn resolve_thread_flag(threads: Option<usize>) -> usize {
    crate::parallel::resolve_threads(threads.unwrap_or(0))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            preset,
            out,
            seed,
            static_count,
            dynamic_count,
            cameras,
            held_out,
            timestamps,
            resolution,
            motion,
            threads,
        } => {
            if preset != "orbit-64" {
                return Err(Error::InvalidParameter(format!("unknown preset {preset}")));
            }
            let mut spec = SynthSpec::orbit_64(seed);
            if let Some(v) = static_count {
                spec.static_count = v;
            }
            if let Some(v) = dynamic_count {
                spec.dynamic_count = v;
            }
            if let Some(v) = cameras {
                spec.ring_cameras = v;
            }
            if let Some(v) = held_out {
                spec.held_out_cameras = v;
            }
            if let Some(v) = timestamps {
                spec.timestamps = v;
            }
            if let Some(v) = resolution {
                spec.resolution = v;
            }
            if !motion.is_empty() {
                spec.clusters = motion
                    .iter()
                    .map(|m| match m.as_str() {
                        "circular" => Ok(MotionKind::Circular),
                        "linear" => Ok(MotionKind::Linear),
                        "sinusoidal" => Ok(MotionKind::Sinusoidal),
                        other => Err(Error::InvalidParameter(format!("unknown motion kind {other}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
            }
            spec.render_threads = resolve_thread_flag(threads);
            let dataset = generate_scene(&spec)?;
            save_scene(&dataset, &out)?;
            let (s, d) = dataset.ground_truth.as_ref().map(|g| g.cloud.label_counts()).unwrap_or((0, 0));
            println!("scene={} views={} static={} dynamic={}", out.display(), dataset.views.len(), s, d);
            Ok(())
        }
        Command::Train(flags) => {
            let cfg = flags.build_config()?;
            let dataset = load_scene(&flags.scene)?;
            fs::create_dir_all(&flags.out)?;
            let csv_path = flags.out.join("metrics.csv");
            let mut csv = fs::File::create(&csv_path)?;
            writeln!(csv, "iteration,stage,total,l1,dssim,static_loss,smooth_loss,static_count,dynamic_count")?;
            let ck_dir = flags.out.clone();
            let mut global_iter = 0u64;
            let result = train(
                &cfg,
                &dataset,
                |lb| {
                    global_iter += 1;
                    let _ = writeln!(
                        csv,
                        "{},{},{},{},{},{},{},{},{}",
                        global_iter, lb.stage, lb.total, lb.l1, lb.dssim, lb.static_term, lb.smooth_term,
                        lb.static_count, lb.dynamic_count
                    );
                },
                |ck| {
                    let _ = ck.save(&ck_dir.join("model.ckpt"));
                },
            )?;
            let ck_path = flags.out.join("model.ckpt");
            let (s, d) = result.model.cloud.label_counts();
            println!(
                "checkpoint={} metrics={} gaussians={} static={} dynamic={}",
                ck_path.display(),
                csv_path.display(),
                result.model.cloud.len(),
                s,
                d
            );
            Ok(())
        }
        Command::TrainDecompose(flags) => {
            let cfg = flags.build_config()?;
            let dataset = load_scene(&flags.scene)?;
            fs::create_dir_all(&flags.out)?;
            let csv_path = flags.out.join("metrics.csv");
            let mut csv = fs::File::create(&csv_path)?;
            writeln!(csv, "iteration,stage,total,l1,dssim,static_loss,smooth_loss,static_count,dynamic_count")?;
            let mut rng = Rng::seed_from(cfg.seed);
            let mut s1 = Stage1State::new(&cfg, &dataset, &mut rng)?;
            for _ in 0..cfg.stage1_iters {
                let lb = s1.stage1_step(&cfg, &dataset)?;
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{}",
                    lb.iteration, lb.stage, lb.total, lb.l1, lb.dssim, lb.static_term, lb.smooth_term,
                    lb.static_count, lb.dynamic_count
                )?;
            }
            s1.freeze_labels(&cfg)?;
            let model = s1.into_model(&dataset, &cfg);
            let ck_path = flags.out.join("stage1.ckpt");
            model.to_checkpoint().save(&ck_path)?;
            let (s, d) = model.cloud.label_counts();
            println!("checkpoint={} static={} dynamic={}", ck_path.display(), s, d);
            Ok(())
        }
        Command::TrainDeform { flags, checkpoint } => {
            let cfg = flags.build_config()?;
            let dataset = load_scene(&flags.scene)?;
            let prev = TrainedModel::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            fs::create_dir_all(&flags.out)?;
            let csv_path = flags.out.join("metrics.csv");
            let mut csv = fs::File::create(&csv_path)?;
            writeln!(csv, "iteration,stage,total,l1,dssim,static_loss,smooth_loss,static_count,dynamic_count")?;
            let mut rng = Rng::seed_from(cfg.seed);
            // stage 1 already consumed forks 1 and 2 of the seed stream in a
            // full run; fork the same tags so a split run stays reproducible
            let _ = rng.fork(1);
            let _ = rng.fork(2);
            let mut s2 = Stage2State::new(&cfg, &dataset, prev.cloud, &mut rng)?;
            for _ in 0..cfg.stage2_iters {
                let lb = s2.stage2_step(&cfg, &dataset)?;
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{}",
                    lb.iteration, lb.stage, lb.total, lb.l1, lb.dssim, lb.static_term, lb.smooth_term,
                    lb.static_count, lb.dynamic_count
                )?;
            }
            let model = s2.into_model(&dataset, &cfg, prev.stage1, prev.iterations.0);
            let ck_path = flags.out.join("model.ckpt");
            model.to_checkpoint().save(&ck_path)?;
            println!("checkpoint={}", ck_path.display());
            Ok(())
        }
        Command::Render { checkpoint, scene, out, views, times, threads } => {
            let model = TrainedModel::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let dataset = load_scene(&scene)?;
            fs::create_dir_all(&out)?;
            let threads = resolve_thread_flag(threads);
            let mut count = 0usize;
            let mut seen_cams = std::collections::HashSet::new();
            for v in &dataset.views {
                if !views.is_empty() && !views.contains(&v.view_id) {
                    continue;
                }
                // each camera once; times come from the flag or the view list
                if !times.is_empty() && !seen_cams.insert(v.view_id) {
                    continue;
                }
                let t_list: Vec<f64> = if times.is_empty() { vec![v.time] } else { times.clone() };
                for &t in &t_list {
                    let img = model.render_at(&v.camera, t, threads)?;
                    let name = format!("render_{:03}_{:03}.ppm", v.view_id, (t * 1000.0).round() as u32);
                    write_ppm(&out.join(&name), &img.to_image())?;
                    count += 1;
                }
            }
            println!("frames={count} out={}", out.display());
            Ok(())
        }
        Command::Eval { scene, checkpoint, gt, held_out_only, out, threads } => {
            let dataset = load_scene(&scene)?;
            let threads = resolve_thread_flag(threads);
            let mut rows = String::from("view,t,psnr,ssim\n");
            let model = match (&checkpoint, gt) {
                (Some(_), true) => {
                    return Err(Error::InvalidParameter("--checkpoint and --gt are mutually exclusive".into()))
                }
                (Some(path), false) => Some(TrainedModel::from_checkpoint(&Checkpoint::load(path)?)?),
                (None, true) => None,
                (None, false) => {
                    return Err(Error::InvalidParameter("eval needs --checkpoint or --gt".into()))
                }
            };
            let gt_ref = dataset.ground_truth.as_ref();
            if model.is_none() && gt_ref.is_none() {
                return Err(Error::InvalidParameter("scene has no ground truth for --gt".into()));
            }
            let (w, h) = (
                dataset.views[0].camera.width as usize,
                dataset.views[0].camera.height as usize,
            );
            let mut mean_psnr = 0.0;
            let mut finite = 0usize;
            let mut count = 0usize;
            for v in &dataset.views {
                if held_out_only && !v.held_out {
                    continue;
                }
                let rendered = match &model {
                    Some(m) => m.render_at(&v.camera, v.time, threads)?,
                    None => {
                        let cloud = cloud_at_time(gt_ref.unwrap(), v.time);
                        crate::render::render(
                            &cloud,
                            &v.camera,
                            &RenderOptions { background: dataset.background, threads },
                        )?
                    }
                };
                // compare in the stored 8-bit domain
                let quantized = rendered.to_image();
                let a = pixels_of(&quantized);
                let b = pixels_of(&v.image);
                let p = psnr(&a, &b, w, h)?;
                let s = ssim(&a, &b, w, h)?;
                rows.push_str(&format!("{},{},{},{}\n", v.view_id, v.time, p, s));
                if p.is_finite() {
                    mean_psnr += p;
                    finite += 1;
                }
                count += 1;
            }
            print!("{rows}");
            if let Some(path) = out {
                fs::write(path, &rows)?;
            }
            if finite > 0 {
                eprintln!("evaluated {count} views, mean finite PSNR {:.3}", mean_psnr / finite as f64);
            } else {
                eprintln!("evaluated {count} views, all PSNR infinite");
            }
            Ok(())
        }
        Command::Bench { checkpoint, scene, repeats, threads } => {
            let model = TrainedModel::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let dataset = load_scene(&scene)?;
            let threads = resolve_thread_flag(threads);
            let repeats = repeats.max(100);
            let cam = &dataset.views[0].camera;
            // warm-up render outside the timed section
            let _ = model.render_at(cam, 0.0, threads)?;
            let start = Instant::now();
            for i in 0..repeats {
                let t = i as f64 / repeats as f64;
                let _ = model.render_at(cam, t, threads)?;
            }
            let wall = start.elapsed().as_secs_f64();
            println!(
                "renders={} gaussians={} width={} height={} threads={} wall_seconds={:.4} renders_per_second={:.2}",
                repeats,
                model.cloud.len(),
                cam.width,
                cam.height,
                threads,
                wall,
                repeats as f64 / wall
            );
            Ok(())
        }
        Command::InspectLabels { checkpoint, scene, out, view } => {
            let model = TrainedModel::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let dataset = load_scene(&scene)?;
            let cam = &dataset
                .views
                .iter()
                .find(|v| v.view_id == view)
                .ok_or_else(|| Error::InvalidParameter(format!("no view {view} in scene")))?
                .camera;
            let (w, h) = (cam.width as i64, cam.height as i64);
            let mut img = crate::scene::Image::new(cam.width, cam.height);
            img.data.iter_mut().for_each(|b| *b = 255);
            for i in 0..model.cloud.len() {
                let p_cam = cam.world_to_camera(model.cloud.positions[i]);
                if p_cam.z <= cam.near {
                    continue;
                }
                let px = (cam.fx * p_cam.x / p_cam.z + cam.cx).round() as i64;
                let py = (cam.fy * p_cam.y / p_cam.z + cam.cy).round() as i64;
                let color: [u8; 3] = match model.cloud.labels[i] {
                    Label::Dynamic => [220, 20, 20],
                    Label::Static => [10, 10, 10],
                };
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let (x, y) = (px + dx, py + dy);
                        if x >= 0 && x < w && y >= 0 && y < h {
                            let o = ((y * w + x) * 3) as usize;
                            img.data[o..o + 3].copy_from_slice(&color);
                        }
                    }
                }
            }
            write_ppm(&out, &img)?;
            let (s, d) = model.cloud.label_counts();
            println!("labels={} static={} dynamic={}", out.display(), s, d);
            Ok(())
        }
    }
}

fn pixels_of(img: &crate::scene::Image) -> Vec<Vec3> {
    img.data
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0))
        .collect()
}

/// Convenience wrapper for eval from other code paths.
pub fn eval_dataset(model: &TrainedModel, dataset: &SceneDataset, held_out_only: bool, threads: usize) -> Result<Vec<(u32, f64, f64, f64)>> {
    let (w, h) = (
        dataset.views[0].camera.width as usize,
        dataset.views[0].camera.height as usize,
    );
    let mut rows = Vec::new();
    for v in &dataset.views {
        if held_out_only && !v.held_out {
            continue;
        }
        let rendered = model.render_at(&v.camera, v.time, threads)?;
        let a = pixels_of(&rendered.to_image());
        let b = pixels_of(&v.image);
        rows.push((v.view_id, v.time, psnr(&a, &b, w, h)?, ssim(&a, &b, w, h)?));
    }
    Ok(rows)
}

pub fn scene_dir_is_valid(path: &Path) -> bool {
    path.join("meta.json").is_file()
}
