//! Synthetic dynamic-scene generator. Scenes are rendered with the project's
//! own renderer, so stored frames are reproducible bit-for-bit from the
//! ground truth they ship with.

use crate::error::{Error, Result};
use crate::math::{logit, Vec3};
use crate::render::{render, RenderOptions};
use crate::rng::Rng;
use crate::scene::{
    Aabb, Camera, GaussianCloud, GroundTruth, Label, SceneDataset, SceneView, TrajectorySpec,
};
use crate::math::Quat;

/// Closed-form position at time t. Circular motion rotates in the xy-plane
/// about its own center (the base point only seeds the generator); the other
/// kinds displace the base point directly.
pub fn trajectory_position(spec: &TrajectorySpec, base: Vec3, t: f64) -> Vec3 {
    match spec {
        TrajectorySpec::Static => base,
        TrajectorySpec::Linear { velocity } => base + *velocity * t,
        TrajectorySpec::Circular { center, radius, angular_rate, phase } => {
            let ang = std::f64::consts::TAU * angular_rate * t + phase;
            Vec3::new(center.x + radius * ang.cos(), center.y + radius * ang.sin(), center.z)
        }
        TrajectorySpec::Sinusoidal { amplitude, frequency, axis } => {
            base + *axis * (*amplitude * (std::f64::consts::TAU * frequency * t).sin())
        }
    }
}

/// Ground-truth cloud with every dynamic Gaussian moved to its position at t.
pub fn cloud_at_time(gt: &GroundTruth, t: f64) -> GaussianCloud {
    let mut cloud = gt.cloud.clone();
    for i in 0..cloud.len() {
        cloud.positions[i] = trajectory_position(&gt.trajectories[i], gt.cloud.positions[i], t);
    }
    cloud
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MotionKind {
    Circular,
    Linear,
    Sinusoidal,
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub static_count: usize,
    pub dynamic_count: usize,
    /// Training cameras, evenly spaced on a ring.
    pub ring_cameras: usize,
    /// Held-out cameras interleaved on the same ring.
    pub held_out_cameras: usize,
    pub timestamps: usize,
    pub resolution: u32,
    pub seed: u64,
    /// One coherent moving cluster per entry.
    pub clusters: Vec<MotionKind>,
    /// Revolutions per unit time for circular clusters.
    pub orbit_rate: f64,
    /// Sampling range for per-axis Gaussian scales (world units).
    pub scale_range: (f64, f64),
    pub background: Vec3,
    pub render_threads: usize,
}

impl SynthSpec {
    /// The desk-scale benchmark scene: one orbiting cluster, 8+1 cameras,
    /// 16 timestamps, 64x64 frames.
    pub fn orbit_64(seed: u64) -> SynthSpec {
        SynthSpec {
            static_count: 400,
            dynamic_count: 100,
            ring_cameras: 8,
            held_out_cameras: 1,
            timestamps: 16,
            resolution: 64,
            seed,
            clusters: vec![MotionKind::Circular],
            orbit_rate: 0.25,
            scale_range: (0.05, 0.11),
            background: Vec3::ZERO,
            render_threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ring_cameras + self.held_out_cameras < 2 {
            return Err(Error::InvalidParameter("need at least 2 cameras".into()));
        }
        if self.resolution < 16 {
            return Err(Error::InvalidParameter("resolution must be >= 16".into()));
        }
        if self.timestamps < 2 {
            return Err(Error::InvalidParameter("need at least 2 timestamps".into()));
        }
        if self.dynamic_count > 0 && self.clusters.is_empty() {
            return Err(Error::InvalidParameter("dynamic Gaussians need at least one cluster".into()));
        }
        Ok(())
    }
}

const SCENE_HALF_EXTENT: f64 = 1.2;

/// Every trajectory must stay inside the box over the whole time range
/// (probed at 65 evenly spaced times).
pub fn check_trajectories_in_bbox(
    cloud: &GaussianCloud,
    trajectories: &[TrajectorySpec],
    bbox: &Aabb,
) -> Result<()> {
    for i in 0..cloud.len() {
        for step in 0..=64 {
            let t = step as f64 / 64.0;
            let p = trajectory_position(&trajectories[i], cloud.positions[i], t);
            if !bbox.contains(p) {
                return Err(Error::Generation(format!(
                    "trajectory of Gaussian {i} leaves the bounding box at t = {t}"
                )));
            }
        }
    }
    Ok(())
}

fn ring_camera(angle: f64, resolution: u32) -> Camera {
    let eye = Vec3::new(4.0 * angle.cos(), 4.0 * angle.sin(), 1.5);
    Camera::look_at(
        eye,
        Vec3::new(0.0, 0.0, 0.1),
        Vec3::new(0.0, 0.0, 1.0),
        resolution as f64,
        resolution,
        resolution,
        0.1,
    )
}

fn sample_cluster(
    rng: &mut Rng,
    kind: MotionKind,
    count: usize,
    orbit_rate: f64,
    positions: &mut Vec<Vec3>,
    trajectories: &mut Vec<TrajectorySpec>,
) {
    // cluster anchor on a mid-radius annulus, kept away from the walls
    let anchor_angle = rng.range(0.0, std::f64::consts::TAU);
    let anchor_r = rng.range(0.45, 0.6);
    let anchor = Vec3::new(anchor_r * anchor_angle.cos(), anchor_r * anchor_angle.sin(), rng.range(-0.1, 0.3));
    let ball = 0.22;
    for _ in 0..count {
        // rejection-free ball sample via normalized normal * cbrt(u)
        let dir = Vec3::new(rng.normal(), rng.normal(), rng.normal()).normalized();
        let p = anchor + dir * (ball * rng.uniform().cbrt());
        positions.push(p);
        trajectories.push(match kind {
            MotionKind::Circular => {
                let radius = (p.x * p.x + p.y * p.y).sqrt();
                TrajectorySpec::Circular {
                    center: Vec3::new(0.0, 0.0, p.z),
                    radius,
                    angular_rate: orbit_rate,
                    phase: p.y.atan2(p.x),
                }
            }
            MotionKind::Linear => TrajectorySpec::Linear { velocity: anchor * -0.8 },
            MotionKind::Sinusoidal => TrajectorySpec::Sinusoidal {
                amplitude: 0.3,
                frequency: 1.0,
                axis: Vec3::new(0.0, 0.0, 1.0),
            },
        });
    }
}

/// Build the ground-truth cloud, render every (camera, timestamp) frame with
/// the project renderer, and return the dataset with its ground truth.
pub fn generate_scene(spec: &SynthSpec) -> Result<SceneDataset> {
    spec.validate()?;
    let mut rng = Rng::seed_from(spec.seed);
    let bbox = Aabb::new(Vec3::splat(-SCENE_HALF_EXTENT), Vec3::splat(SCENE_HALF_EXTENT));

    let total = spec.static_count + spec.dynamic_count;
    let mut positions = Vec::with_capacity(total);
    let mut trajectories = Vec::with_capacity(total);

    // static backdrop scattered through the box interior
    for _ in 0..spec.static_count {
        positions.push(Vec3::new(
            rng.range(-1.05, 1.05),
            rng.range(-1.05, 1.05),
            rng.range(-1.05, 1.05),
        ));
        trajectories.push(TrajectorySpec::Static);
    }

    // dynamic clusters
    if spec.dynamic_count > 0 {
        let per = spec.dynamic_count / spec.clusters.len();
        let mut left = spec.dynamic_count;
        for (ci, kind) in spec.clusters.iter().enumerate() {
            let count = if ci + 1 == spec.clusters.len() { left } else { per };
            left -= count;
            sample_cluster(&mut rng, *kind, count, spec.orbit_rate, &mut positions, &mut trajectories);
        }
    }

    let mut labels = vec![Label::Static; spec.static_count];
    labels.extend(std::iter::repeat(Label::Dynamic).take(spec.dynamic_count));

    let mut log_scales = Vec::with_capacity(total);
    let mut rotations = Vec::with_capacity(total);
    let mut opacity_logits = Vec::with_capacity(total);
    let mut colors = Vec::with_capacity(total);
    for i in 0..total {
        log_scales.push(Vec3::new(
            rng.range(spec.scale_range.0.ln(), spec.scale_range.1.ln()),
            rng.range(spec.scale_range.0.ln(), spec.scale_range.1.ln()),
            rng.range(spec.scale_range.0.ln(), spec.scale_range.1.ln()),
        ));
        let q = Quat::new(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        rotations.push(if q.norm() < 1e-9 { Quat::IDENTITY } else { q.normalized() });
        opacity_logits.push(logit(rng.range(0.55, 0.95)));
        colors.push(if labels[i] == Label::Dynamic {
            // warm, bright cluster against a cooler backdrop
            Vec3::new(rng.range(0.75, 0.98), rng.range(0.35, 0.6), rng.range(0.05, 0.25))
        } else {
            Vec3::new(rng.range(0.1, 0.6), rng.range(0.2, 0.7), rng.range(0.3, 0.85))
        });
    }

    let cloud = GaussianCloud { positions, log_scales, rotations, opacity_logits, colors, labels };
    cloud.validate()?;

    check_trajectories_in_bbox(&cloud, &trajectories, &bbox)?;

    let gt = GroundTruth { cloud, trajectories };

    // cameras: training ring plus interleaved held-out positions
    let mut cameras = Vec::new();
    for c in 0..spec.ring_cameras {
        let angle = std::f64::consts::TAU * c as f64 / spec.ring_cameras as f64;
        cameras.push((ring_camera(angle, spec.resolution), false));
    }
    for c in 0..spec.held_out_cameras {
        let angle = std::f64::consts::TAU * (c as f64 + 0.5) / spec.ring_cameras.max(1) as f64;
        cameras.push((ring_camera(angle, spec.resolution), true));
    }

    // training cameras sample the timeline endpoints-inclusive; held-out
    // cameras sit between those times so evaluation probes both novel views
    // and novel times
    let opts = RenderOptions { background: spec.background, threads: spec.render_threads };
    let mut views = Vec::new();
    for (view_id, (camera, held_out)) in cameras.iter().enumerate() {
        for ti in 0..spec.timestamps {
            let t = if *held_out {
                (ti as f64 + 0.5) / spec.timestamps as f64
            } else {
                ti as f64 / (spec.timestamps - 1) as f64
            };
            let frame_cloud = cloud_at_time(&gt, t);
            let rendered = render(&frame_cloud, camera, &opts)?;
            views.push(SceneView {
                view_id: view_id as u32,
                time: t,
                held_out: *held_out,
                camera: camera.clone(),
                image: rendered.to_image(),
            });
        }
    }

    let dataset = SceneDataset { views, bbox, background: spec.background, ground_truth: Some(gt) };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_closed_forms() {
        let base = Vec3::new(0.5, 0.25, -0.5);
        assert_eq!(trajectory_position(&TrajectorySpec::Static, base, 0.7), base);

        let lin = TrajectorySpec::Linear { velocity: Vec3::new(1.0, 0.0, 0.0) };
        assert_eq!(
            trajectory_position(&lin, Vec3::ZERO, 0.25),
            Vec3::new(0.25, 0.0, 0.0)
        );
        let p1 = trajectory_position(&lin, base, 1.0);
        let p0 = trajectory_position(&lin, base, 0.0);
        assert!((p1 - p0 - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);

        // sine at phase 3*pi/2 (t = 0.75 with frequency 1): base - amplitude * axis
        let sin = TrajectorySpec::Sinusoidal { amplitude: 0.3, frequency: 1.0, axis: Vec3::new(0.0, 0.0, 1.0) };
        let p = trajectory_position(&sin, base, 0.75);
        assert!((p - (base - Vec3::new(0.0, 0.0, 0.3))).norm() < 1e-12);

        // circular periodicity: period = 1 / angular_rate
        let circ = TrajectorySpec::Circular { center: Vec3::ZERO, radius: 0.4, angular_rate: 2.0, phase: 0.3 };
        let a = trajectory_position(&circ, base, 0.1);
        let b = trajectory_position(&circ, base, 0.6);
        assert!((a - b).norm() < 1e-6, "period 0.5 for two revolutions per unit time");
    }

    #[test]
    fn static_scene_frames_identical_across_time() {
        let mut spec = SynthSpec::orbit_64(3);
        spec.static_count = 40;
        spec.dynamic_count = 0;
        spec.clusters.clear();
        spec.ring_cameras = 2;
        spec.held_out_cameras = 0;
        spec.timestamps = 3;
        spec.resolution = 24;
        let ds = generate_scene(&spec).unwrap();
        for cam_id in 0..2u32 {
            let frames: Vec<_> = ds.views.iter().filter(|v| v.view_id == cam_id).collect();
            assert_eq!(frames.len(), 3);
            for f in &frames[1..] {
                assert_eq!(f.image, frames[0].image, "static scene must not change over time");
            }
        }
    }

    #[test]
    fn generated_scene_is_self_consistent() {
        // re-rendering the ground truth reproduces the stored frames bit-exactly
        let mut spec = SynthSpec::orbit_64(7);
        spec.static_count = 30;
        spec.dynamic_count = 10;
        spec.ring_cameras = 2;
        spec.held_out_cameras = 1;
        spec.timestamps = 4;
        spec.resolution = 32;
        let ds = generate_scene(&spec).unwrap();
        let gt = ds.ground_truth.as_ref().unwrap();
        let opts = RenderOptions { background: ds.background, threads: 1 };
        for v in &ds.views {
            let cloud = cloud_at_time(gt, v.time);
            let img = render(&cloud, &v.camera, &opts).unwrap().to_image();
            assert_eq!(img, v.image);
        }
        // labels partition and match the counts
        let (s, d) = gt.cloud.label_counts();
        assert_eq!((s, d), (30, 10));
    }

    #[test]
    fn generation_deterministic() {
        let mut spec = SynthSpec::orbit_64(11);
        spec.static_count = 20;
        spec.dynamic_count = 5;
        spec.ring_cameras = 2;
        spec.held_out_cameras = 0;
        spec.timestamps = 2;
        spec.resolution = 16;
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn escaping_trajectory_rejected() {
        let mut spec = SynthSpec::orbit_64(13);
        spec.static_count = 5;
        spec.dynamic_count = 5;
        spec.ring_cameras = 2;
        spec.held_out_cameras = 0;
        spec.timestamps = 2;
        spec.resolution = 16;
        spec.clusters = vec![MotionKind::Linear];
        let ds = generate_scene(&spec).unwrap();
        let mut gt = ds.ground_truth.unwrap();
        let last = gt.trajectories.len() - 1;
        gt.trajectories[last] = TrajectorySpec::Linear { velocity: Vec3::new(100.0, 0.0, 0.0) };
        match check_trajectories_in_bbox(&gt.cloud, &gt.trajectories, &ds.bbox) {
            Err(Error::Generation(_)) => {}
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SynthSpec::orbit_64(1);
        spec.ring_cameras = 1;
        spec.held_out_cameras = 0;
        assert!(generate_scene(&spec).is_err());
        let mut spec = SynthSpec::orbit_64(1);
        spec.resolution = 8;
        assert!(generate_scene(&spec).is_err());
    }
}
