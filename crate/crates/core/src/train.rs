//! Two-stage training: decomposition (stage 1) with the linear motion
//! extractor and static constraint, then the spatio-temporal deformation
//! field (stage 2) with smooth regularization.

use crate::checkpoint::Checkpoint;
use crate::decomp::{
    clamp_opacity, classify, density_control, motion_threshold, static_loss, static_loss_grad,
    DecompositionConfig, DensityControlConfig, GradAccumulator,
};
use crate::deform::{
    apply_deformation, DeformationDelta, SpaceTimePoint, Stage1Grads, Stage1Model, Stage2Grads,
    Stage2Model,
};
use crate::error::{Error, Result};
use crate::hashgrid::{HashGridConfig, HashGridEncoder, TableGrads};
use crate::math::{logit, Vec3};
use crate::metrics::{dssim_loss_with_grad, l1_loss, l1_loss_grad};
use crate::model::TrainedModel;
use crate::nn::{AdamParams, AdamState, MlpOptimizer};
use crate::render::{render_backward, CloudGrads, RenderOptions};
use crate::rng::Rng;
use crate::scene::{GaussianCloud, Label, SceneDataset, UnitNormalizer};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// D-SSIM mix (lambda_c).
    pub dssim_mix: f64,
    /// Static constraint weight (lambda_s).
    pub static_weight: f64,
    /// Smooth regularization weight (lambda_r).
    pub smooth_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { dssim_mix: 0.2, static_weight: 0.1, smooth_weight: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dssim_mix) {
            return Err(Error::InvalidParameter("dssim mix must be in [0,1)".into()));
        }
        if self.static_weight < 0.0 || self.smooth_weight < 0.0 {
            return Err(Error::InvalidParameter("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothRegConfig {
    /// Perturbation half-width per spatial axis.
    pub spatial_half_width: Vec3,
    /// Perturbation half-width along time.
    pub time_half_width: f64,
    /// Probes drawn per iteration.
    pub samples_per_iter: usize,
}

impl SmoothRegConfig {
    /// Half a voxel at the finest level in every dimension.
    pub fn for_grid(grid: &HashGridConfig) -> SmoothRegConfig {
        let eps = 1.0 / (2.0 * grid.finest as f64);
        SmoothRegConfig { spatial_half_width: Vec3::splat(eps), time_half_width: eps, samples_per_iter: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.spatial_half_width;
        if w.x <= 0.0 || w.y <= 0.0 || w.z <= 0.0 || self.time_half_width <= 0.0 {
            return Err(Error::InvalidParameter("perturbation half-widths must be positive".into()));
        }
        Ok(())
    }
}

/// Squared feature distance between the encodings of x and x + eps, with
/// gradients (scaled by `grad_scale`) flowing to the tables through both
/// evaluations.
pub fn smooth_reg_with(
    enc: &HashGridEncoder,
    x: &SpaceTimePoint,
    eps: [f64; 4],
    grads: &mut TableGrads,
    grad_scale: f64,
) -> Result<f64> {
    let a_in = x.to_array();
    let b_in = [a_in[0] + eps[0], a_in[1] + eps[1], a_in[2] + eps[2], a_in[3] + eps[3]];
    let a = enc.encode(&a_in)?;
    let b = enc.encode(&b_in)?;
    let mut loss = 0.0;
    let mut up_a = vec![0.0; a.len()];
    let mut up_b = vec![0.0; a.len()];
    for k in 0..a.len() {
        let d = a[k] - b[k];
        loss += d * d;
        up_a[k] = 2.0 * d * grad_scale;
        up_b[k] = -2.0 * d * grad_scale;
    }
    if grad_scale != 0.0 {
        let mut dx = [0.0; 4];
        enc.encode_backward_into(&a_in, &up_a, grads, &mut dx)?;
        enc.encode_backward_into(&b_in, &up_b, grads, &mut dx)?;
    }
    Ok(loss)
}

/// Draw eps and evaluate the regularizer at x.
pub fn smooth_reg(
    enc: &HashGridEncoder,
    x: &SpaceTimePoint,
    cfg: &SmoothRegConfig,
    rng: &mut Rng,
    grads: &mut TableGrads,
    grad_scale: f64,
) -> Result<f64> {
    let w = cfg.spatial_half_width;
    let eps = [
        rng.range(-w.x, w.x),
        rng.range(-w.y, w.y),
        rng.range(-w.z, w.z),
        rng.range(-cfg.time_half_width, cfg.time_half_width),
    ];
    smooth_reg_with(enc, x, eps, grads, grad_scale)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub position: f64,
    /// Stage-1 position lr (decomposition needs slow geometry so the motion
    /// extractor, not position drift, explains the time-varying residual).
    pub position_stage1: f64,
    /// Position lr decays exponentially to this multiple over each stage.
    pub position_final_mult: f64,
    /// Position lr is additionally scaled by the scene extent norm.
    pub position_scale_by_extent: bool,
    pub opacity: f64,
    /// Stage-1 opacity lr: fading a misplaced Gaussian must stay slower than
    /// the motion extractor's learning or the decomposition signal dies.
    pub opacity_stage1: f64,
    pub scale: f64,
    pub rotation: f64,
    pub color: f64,
    pub network: f64,
    pub tables: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            position_stage1: 2e-5,
            position_final_mult: 0.01,
            position_scale_by_extent: true,
            opacity: 5e-2,
            opacity_stage1: 2e-4,
            scale: 5e-3,
            rotation: 1e-3,
            color: 2.5e-3,
            network: 3e-3,
            tables: 2e-2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Skip stage 1 and label everything dynamic (the 4D field covers the
    /// whole scene); stage 2 runs the combined budget.
    pub no_decomposition: bool,
    /// Leave the dynamic group out of density control.
    pub no_dynamic_density_control: bool,
    /// Drop the smooth regularizer (identical to smooth_weight = 0).
    pub no_smooth_reg: bool,
    /// No deformation at all: plain static fitting over the combined budget.
    pub static_baseline: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1_iters: u64,
    pub stage2_iters: u64,
    pub seed: u64,
    pub threads: usize,
    pub weights: LossWeights,
    pub smooth_samples: usize,
    pub decomp: DecompositionConfig,
    pub density_static: DensityControlConfig,
    pub density_dynamic: DensityControlConfig,
    /// Density control is active in [start, stop) fractions of each stage.
    pub densify_start_frac: f64,
    pub densify_stop_frac: f64,
    /// Run density control during stage 1 (decomposition quality on small
    /// scenes benefits from frozen structure, so profiles may disable it).
    pub stage1_densify: bool,
    pub grid3d: HashGridConfig,
    pub grid4d: HashGridConfig,
    pub hidden_width: usize,
    pub feature_width: usize,
    pub lr: LearningRates,
    pub ablation: AblationFlags,
    /// Position noise on init, as a fraction of the bbox extent norm.
    pub init_noise_frac: f64,
    /// Fraction of the ground-truth points used for initialization; sparse
    /// starts leave real work for density control.
    pub init_subsample_frac: f64,
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_iters: 6000,
            stage2_iters: 14000,
            seed: 0,
            threads: 1,
            weights: LossWeights::default(),
            smooth_samples: 8,
            decomp: DecompositionConfig::default(),
            density_static: DensityControlConfig::default(),
            density_dynamic: DensityControlConfig::default(),
            densify_start_frac: 0.1,
            densify_stop_frac: 0.8,
            stage1_densify: true,
            grid3d: HashGridConfig::default_3d(),
            grid4d: HashGridConfig::default_4d(),
            hidden_width: 64,
            feature_width: 32,
            lr: LearningRates::default(),
            ablation: AblationFlags::default(),
            init_noise_frac: 0.01,
            init_subsample_frac: 1.0,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    /// Tuned profile for the orbit-64 benchmark scene: slow stage-1
    /// geometry, a coarse spatially-coherent 3D grid, a generous dynamic
    /// percentile, and density control left to stage 2.
    pub fn orbit64_profile(seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            decomp: DecompositionConfig {
                top_percent: 45.0,
                relabel_interval: 250,
                warmup_iters: 3500,
                static_weight: 0.03,
            },
            weights: LossWeights { dssim_mix: 0.2, static_weight: 0.03, smooth_weight: 0.01 },
            grid3d: HashGridConfig::new(3, 6, 8, 64, 1 << 13, 2),
            grid4d: HashGridConfig::new(4, 10, 8, 96, 1 << 10, 2),
            density_static: DensityControlConfig { densify_grad_threshold: 5e-4, ..Default::default() },
            density_dynamic: DensityControlConfig { densify_grad_threshold: 5e-4, ..Default::default() },
            densify_start_frac: 0.05,
            densify_stop_frac: 0.7,
            stage1_densify: false,
            stage1_iters: 4000,
            stage2_iters: 3500,
            init_subsample_frac: 0.7,
            ..Default::default()
        }
    }

    /// Stage-1 decomposition benchmark profile: a dense start and a longer
    /// schedule, tuned for label quality rather than end-to-end speed.
    pub fn orbit64_decomposition_profile(seed: u64) -> TrainConfig {
        TrainConfig {
            stage1_iters: 5000,
            init_subsample_frac: 1.0,
            ..Self::orbit64_profile(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage1_iters == 0 && self.stage2_iters == 0 {
            return Err(Error::InvalidParameter("need at least one training iteration".into()));
        }
        self.weights.validate()?;
        self.decomp.validate()?;
        self.density_static.validate()?;
        self.density_dynamic.validate()?;
        self.grid3d.validate()?;
        self.grid4d.validate()?;
        Ok(())
    }
}

/// Per-iteration loss report. The total obeys the stage's loss formula
/// exactly: (1-lc) l1 + lc dssim + ls static_term (stage 1) or
/// (1-lc) l1 + lc dssim + lr smooth_term (stage 2).
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub stage: u8,
    pub iteration: u64,
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
    pub static_term: f64,
    pub smooth_term: f64,
    pub static_count: usize,
    pub dynamic_count: usize,
}

/// Adam over the five cloud parameter groups.
struct CloudOptimizer {
    positions: AdamState,
    log_scales: AdamState,
    rotations: AdamState,
    opacity: AdamState,
    colors: AdamState,
}

impl CloudOptimizer {
    fn new(n: usize) -> CloudOptimizer {
        CloudOptimizer {
            positions: AdamState::new(3 * n),
            log_scales: AdamState::new(3 * n),
            rotations: AdamState::new(4 * n),
            opacity: AdamState::new(n),
            colors: AdamState::new(3 * n),
        }
    }

    fn step(
        &mut self,
        cloud: &mut GaussianCloud,
        grads: &CloudGrads,
        lr: &LearningRates,
        position_lr: f64,
        opacity_lr: f64,
    ) -> Result<()> {
        let n = cloud.len();
        let mut buf3 = vec![0.0; 3 * n];
        let mut gbuf3 = vec![0.0; 3 * n];

        let pack3 = |src: &[Vec3], dst: &mut [f64]| {
            for (i, v) in src.iter().enumerate() {
                dst[3 * i] = v.x;
                dst[3 * i + 1] = v.y;
                dst[3 * i + 2] = v.z;
            }
        };
        let unpack3 = |src: &[f64], dst: &mut [Vec3]| {
            for (i, v) in dst.iter_mut().enumerate() {
                *v = Vec3::new(src[3 * i], src[3 * i + 1], src[3 * i + 2]);
            }
        };

        pack3(&cloud.positions, &mut buf3);
        pack3(&grads.positions, &mut gbuf3);
        self.positions.apply(&AdamParams::with_lr(position_lr), &mut buf3, &gbuf3)?;
        unpack3(&buf3, &mut cloud.positions);

        pack3(&cloud.log_scales, &mut buf3);
        pack3(&grads.log_scales, &mut gbuf3);
        self.log_scales.apply(&AdamParams::with_lr(lr.scale), &mut buf3, &gbuf3)?;
        unpack3(&buf3, &mut cloud.log_scales);

        pack3(&cloud.colors, &mut buf3);
        pack3(&grads.colors, &mut gbuf3);
        self.colors.apply(&AdamParams::with_lr(lr.color), &mut buf3, &gbuf3)?;
        unpack3(&buf3, &mut cloud.colors);

        let mut buf4 = vec![0.0; 4 * n];
        let mut gbuf4 = vec![0.0; 4 * n];
        for (i, q) in cloud.rotations.iter().enumerate() {
            buf4[4 * i..4 * i + 4].copy_from_slice(&q.to_array());
        }
        for (i, q) in grads.rotations.iter().enumerate() {
            gbuf4[4 * i..4 * i + 4].copy_from_slice(&q.to_array());
        }
        self.rotations.apply(&AdamParams::with_lr(lr.rotation), &mut buf4, &gbuf4)?;
        for (i, q) in cloud.rotations.iter_mut().enumerate() {
            *q = crate::math::Quat::new(buf4[4 * i], buf4[4 * i + 1], buf4[4 * i + 2], buf4[4 * i + 3]);
        }

        self.opacity.apply(&AdamParams::with_lr(opacity_lr), &mut cloud.opacity_logits, &grads.opacity_logits)?;
        Ok(())
    }

    fn remap(&mut self, sources: &[Option<usize>]) {
        self.positions = self.positions.remap(sources, 3);
        self.log_scales = self.log_scales.remap(sources, 3);
        self.rotations = self.rotations.remap(sources, 4);
        self.opacity = self.opacity.remap(sources, 1);
        self.colors = self.colors.remap(sources, 3);
    }
}

/// Initial trainable cloud: a (possibly subsampled) set of ground-truth
/// positions plus isotropic noise, randomized opacity/scale/color (synthetic
/// regime). Without ground truth, positions are sampled uniformly inside the
/// box. The second return value maps each member to the ground-truth index
/// it was seeded from.
pub fn init_cloud(
    dataset: &SceneDataset,
    noise_frac: f64,
    subsample_frac: f64,
    rng: &mut Rng,
) -> (GaussianCloud, Vec<usize>) {
    let extent_norm = dataset.bbox.extent().norm();
    let noise = noise_frac * extent_norm;
    let (positions, gt_map): (Vec<Vec3>, Vec<usize>) = match &dataset.ground_truth {
        Some(gt) => {
            let total = gt.cloud.len();
            let keep = ((subsample_frac.clamp(0.0, 1.0) * total as f64).ceil() as usize).clamp(1, total);
            // deterministic stride-free subsample: draw without replacement
            let mut order: Vec<usize> = (0..total).collect();
            for i in (1..total).rev() {
                order.swap(i, rng.index(i + 1));
            }
            let mut chosen: Vec<usize> = order.into_iter().take(keep).collect();
            chosen.sort_unstable();
            let positions = chosen
                .iter()
                .map(|&i| {
                    let candidate =
                        gt.cloud.positions[i] + Vec3::new(rng.normal(), rng.normal(), rng.normal()) * noise;
                    candidate.cwise_max(dataset.bbox.min).cwise_min(dataset.bbox.max)
                })
                .collect();
            (positions, chosen)
        }
        None => (
            (0..500)
                .map(|_| {
                    Vec3::new(
                        rng.range(dataset.bbox.min.x, dataset.bbox.max.x),
                        rng.range(dataset.bbox.min.y, dataset.bbox.max.y),
                        rng.range(dataset.bbox.min.z, dataset.bbox.max.z),
                    )
                })
                .collect(),
            (0..500).collect(),
        ),
    };
    let n = positions.len();
    let base_scale = 0.02 * extent_norm;
    let cloud = GaussianCloud {
        positions,
        log_scales: (0..n)
            .map(|_| Vec3::splat((base_scale * rng.range(0.6, 1.6)).ln()))
            .collect(),
        rotations: (0..n).map(|_| crate::math::Quat::IDENTITY).collect(),
        opacity_logits: (0..n).map(|_| logit(rng.range(0.35, 0.65))).collect(),
        colors: (0..n).map(|_| Vec3::new(rng.uniform(), rng.uniform(), rng.uniform())).collect(),
        labels: vec![Label::Static; n],
    };
    (cloud, gt_map)
}

fn image_pixels(img: &crate::scene::Image) -> Vec<Vec3> {
    img.data
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0))
        .collect()
}

fn exp_decay_lr(lr0: f64, final_mult: f64, iter: u64, total: u64) -> f64 {
    if total <= 1 {
        return lr0;
    }
    let frac = iter as f64 / (total - 1) as f64;
    lr0 * final_mult.powf(frac)
}

/// Image-loss evaluation shared by both stages: renders with gradients and
/// returns (l1, dssim, upstream-driven cloud grads, rendered pixels).
fn image_loss_backward(
    cloud: &GaussianCloud,
    view: &crate::scene::SceneView,
    weights: &LossWeights,
    opts: &RenderOptions,
) -> Result<(f64, f64, CloudGrads)> {
    let (w, h) = (view.camera.width as usize, view.camera.height as usize);
    let target = image_pixels(&view.image);
    // two passes: forward once for the loss gradients, then backward
    let forward = crate::render::render(cloud, &view.camera, opts)?;
    let l1 = l1_loss(&forward.pixels, &target, w, h)?;
    let l1_grad = l1_loss_grad(&forward.pixels, &target, w, h)?;
    let (dssim, dssim_grad) = dssim_loss_with_grad(&forward.pixels, &target, w, h)?;
    let upstream: Vec<Vec3> = l1_grad
        .iter()
        .zip(&dssim_grad)
        .map(|(a, b)| *a * (1.0 - weights.dssim_mix) + *b * weights.dssim_mix)
        .collect();
    let (_, grads) = render_backward(cloud, &view.camera, opts, &upstream)?;
    Ok((l1, dssim, grads))
}

pub struct Stage1State {
    pub cloud: GaussianCloud,
    pub model: Option<Stage1Model>,
    pub iteration: u64,
    /// Maps each current Gaussian to the ground-truth index it was seeded
    /// from (identity when the dataset has no ground truth).
    pub origins: Vec<usize>,
    /// Set once the first relabel has produced a meaningful static set; the
    /// static constraint stays off before that (the all-static init labels
    /// are placeholders, not a decomposition).
    pub labels_established: bool,
    cloud_opt: CloudOptimizer,
    feature_opt: Option<MlpOptimizer>,
    head_opt: Option<MlpOptimizer>,
    table_opt: Option<AdamState>,
    grads: Option<Stage1Grads>,
    accum: GradAccumulator,
    rng: Rng,
    normalizer: UnitNormalizer,
}

impl Stage1State {
    pub fn new(cfg: &TrainConfig, dataset: &SceneDataset, rng: &mut Rng) -> Result<Stage1State> {
        let mut init_rng = rng.fork(1);
        let (cloud, gt_map) = init_cloud(dataset, cfg.init_noise_frac, cfg.init_subsample_frac, &mut init_rng);
        let model = if cfg.ablation.static_baseline {
            None
        } else {
            Some(Stage1Model::new(cfg.grid3d.clone(), cfg.feature_width, cfg.hidden_width, &mut init_rng)?)
        };
        let n = cloud.len();
        let normalizer = UnitNormalizer::from_bbox(&dataset.bbox);
        Ok(Stage1State {
            origins: gt_map,
            labels_established: false,
            cloud_opt: CloudOptimizer::new(n),
            feature_opt: model.as_ref().map(|m| MlpOptimizer::new(&m.feature_mlp)),
            head_opt: model.as_ref().map(|m| MlpOptimizer::new(&m.motion_head)),
            table_opt: model.as_ref().map(|m| AdamState::new(m.encoder.param_count())),
            grads: model.as_ref().map(Stage1Grads::zeros_like),
            model,
            accum: GradAccumulator::new(n),
            cloud,
            iteration: 0,
            rng: rng.fork(2),
            normalizer,
        })
    }

    /// One optimization step of Eq.-style stage-1 training: deform all
    /// positions linearly, render, combine image loss with the static
    /// constraint, update everything, and run relabel / density control at
    /// their intervals.
    pub fn stage1_step(&mut self, cfg: &TrainConfig, dataset: &SceneDataset) -> Result<LossBreakdown> {
        let train_views = dataset.training_views();
        let view = &dataset.views[train_views[self.rng.index(train_views.len())]];
        let t = view.time;
        let n = self.cloud.len();
        let opts = RenderOptions { background: dataset.background, threads: cfg.threads };

        // forward deltas (world units)
        let mut deltas_world = vec![Vec3::ZERO; n];
        let mut p_norms = vec![Vec3::ZERO; n];
        if let Some(model) = &self.model {
            for i in 0..n {
                let pn = self.normalizer.to_unit(self.cloud.positions[i]).clamp01();
                p_norms[i] = pn;
                let dn = model.stage1_delta(pn)?;
                deltas_world[i] = self.normalizer.delta_to_world(dn);
            }
        }

        // deformed view for rendering
        let mut deformed = self.cloud.clone();
        for i in 0..n {
            deformed.positions[i] = crate::deform::linear_position(self.cloud.positions[i], deltas_world[i], t);
        }

        let (l1, dssim, mut cloud_grads) = image_loss_backward(&deformed, view, &cfg.weights, &opts)?;

        // static constraint over the currently-static set; before the first
        // relabel there is no static set yet
        let static_set: Vec<usize> = if self.labels_established {
            (0..n).filter(|&i| self.cloud.labels[i] == Label::Static).collect()
        } else {
            Vec::new()
        };
        let static_deltas: Vec<Vec3> = static_set.iter().map(|&i| deltas_world[i]).collect();
        let ls = static_loss(&static_deltas);

        let weights = &cfg.weights;
        let total = (1.0 - weights.dssim_mix) * l1 + weights.dssim_mix * dssim + weights.static_weight * ls;
        if !total.is_finite() {
            eprintln!(
                "diagnostic: stage1 iter {} loss breakdown l1={l1} dssim={dssim} ls={ls} n={n}",
                self.iteration
            );
            return Err(Error::NonFiniteLoss(self.iteration));
        }

        // backward through the motion extractor
        if let Some(model) = &self.model {
            let grads = self.grads.as_mut().expect("grads follow model");
            grads.clear();
            let n_static = static_set.len();
            let is_static: Vec<bool> = if self.labels_established {
                self.cloud.labels.iter().map(|&l| l == Label::Static).collect()
            } else {
                vec![false; n]
            };
            for i in 0..n {
                // d(total)/d(delta_world_i)
                let mut up = cloud_grads.positions[i] * t;
                if is_static[i] && weights.static_weight > 0.0 {
                    up += static_loss_grad(deltas_world[i], n_static) * weights.static_weight;
                }
                if up == Vec3::ZERO {
                    continue;
                }
                let up_norm = self.normalizer.delta_to_world(up); // chain d/d(delta_norm) = extent .* d/d(delta_world)
                let d_pn = model.stage1_delta_backward(p_norms[i], up_norm, grads)?;
                // encoder input path back to the canonical position
                cloud_grads.positions[i] += d_pn.cwise_div(self.normalizer.extent);
            }
            let model = self.model.as_mut().expect("checked above");
            let hp_net = AdamParams::with_lr(cfg.lr.network);
            self.feature_opt.as_mut().unwrap().step(&hp_net, &mut model.feature_mlp, &grads.feature_mlp)?;
            self.head_opt.as_mut().unwrap().step(&hp_net, &mut model.motion_head, &grads.motion_head)?;
            let flat_grads: Vec<f64> = grads.tables.per_level.iter().flatten().copied().collect();
            let mut flat: Vec<f64> = model.encoder.tables.iter().flatten().copied().collect();
            self.table_opt.as_mut().unwrap().apply(&AdamParams::with_lr(cfg.lr.tables), &mut flat, &flat_grads)?;
            let mut off = 0;
            for table in &mut model.encoder.tables {
                let len = table.len();
                table.copy_from_slice(&flat[off..off + len]);
                off += len;
            }
        }

        // cloud update
        self.accum.accumulate(&cloud_grads.positions);
        let extent_mult = if cfg.lr.position_scale_by_extent { self.normalizer.extent.norm() } else { 1.0 };
        let pos_lr = exp_decay_lr(cfg.lr.position_stage1 * extent_mult, cfg.lr.position_final_mult, self.iteration, cfg.stage1_iters);
        self.cloud_opt.step(&mut self.cloud, &cloud_grads, &cfg.lr, pos_lr, cfg.lr.opacity_stage1)?;

        self.iteration += 1;
        let iter = self.iteration;

        // relabeling after warmup
        if self.model.is_some()
            && iter >= cfg.decomp.warmup_iters
            && (iter - cfg.decomp.warmup_iters) % cfg.decomp.relabel_interval == 0
        {
            let mags: Vec<f64> = deltas_world.iter().map(|d| d.norm()).collect();
            let tau = motion_threshold(&mags, cfg.decomp.top_percent)?;
            let fresh = classify(&mags, tau);
            // labels are sticky: the predicted motion of a dynamic Gaussian
            // oscillates, so one quiet phase must not flip it back
            for (old, new) in self.cloud.labels.iter_mut().zip(fresh) {
                if new == Label::Dynamic {
                    *old = Label::Dynamic;
                }
            }
            self.labels_established = true;
        }

        // density control window
        let lo = (cfg.stage1_iters as f64 * cfg.densify_start_frac) as u64;
        let hi = (cfg.stage1_iters as f64 * cfg.densify_stop_frac) as u64;
        if cfg.stage1_densify && iter >= lo && iter < hi && iter % cfg.density_static.densify_interval == 0 {
            let dyn_cfg = if cfg.ablation.no_dynamic_density_control { None } else { Some(&cfg.density_dynamic) };
            let outcome = density_control(&self.cloud, &self.accum, Some(&cfg.density_static), dyn_cfg, &mut self.rng)?;
            self.cloud = outcome.cloud;
            self.cloud_opt.remap(&outcome.sources);
            self.origins = outcome.ancestors.iter().map(|&a| self.origins[a]).collect();
            self.accum.reset(self.cloud.len());
        }
        if cfg.stage1_densify && iter >= lo && iter < hi && iter % cfg.density_static.opacity_reset_interval == 0 {
            let only = if cfg.ablation.no_dynamic_density_control { Some(Label::Static) } else { None };
            clamp_opacity(&mut self.cloud, 0.01, only);
            self.cloud_opt.opacity.zero_moments();
        }

        let (sc, dc) = self.cloud.label_counts();
        Ok(LossBreakdown {
            stage: 1,
            iteration: iter,
            total,
            l1,
            dssim,
            static_term: ls,
            smooth_term: 0.0,
            static_count: sc,
            dynamic_count: dc,
        })
    }

    /// Final labels from the last computed motion magnitudes.
    pub fn freeze_labels(&mut self, cfg: &TrainConfig) -> Result<()> {
        let Some(model) = &self.model else {
            return Ok(());
        };
        let n = self.cloud.len();
        let mut mags = vec![0.0; n];
        for i in 0..n {
            let pn = self.normalizer.to_unit(self.cloud.positions[i]).clamp01();
            let dn = model.stage1_delta(pn)?;
            mags[i] = self.normalizer.delta_to_world(dn).norm();
        }
        let tau = motion_threshold(&mags, cfg.decomp.top_percent)?;
        let fresh = classify(&mags, tau);
        for (old, new) in self.cloud.labels.iter_mut().zip(fresh) {
            if new == Label::Dynamic {
                *old = Label::Dynamic;
            }
        }
        Ok(())
    }
}

impl Stage1State {
    /// Package the stage-1 outputs (decomposed cloud plus extractor).
    pub fn into_model(self, dataset: &SceneDataset, _cfg: &TrainConfig) -> TrainedModel {
        TrainedModel {
            cloud: self.cloud,
            stage1: self.model,
            stage2: None,
            bbox: dataset.bbox,
            background: dataset.background,
            iterations: (self.iteration, 0),
        }
    }
}

pub struct Stage2State {
    pub cloud: GaussianCloud,
    pub model: Option<Stage2Model>,
    pub iteration: u64,
    cloud_opt: CloudOptimizer,
    trunk_opt: Option<MlpOptimizer>,
    pos_head_opt: Option<MlpOptimizer>,
    rot_head_opt: Option<MlpOptimizer>,
    scale_head_opt: Option<MlpOptimizer>,
    table_opt: Option<AdamState>,
    grads: Option<Stage2Grads>,
    accum: GradAccumulator,
    rng: Rng,
    normalizer: UnitNormalizer,
    smooth: SmoothRegConfig,
}

impl Stage2State {
    /// Stage 2 trains a fresh field; labels and cloud carry over from
    /// stage 1.
    pub fn new(cfg: &TrainConfig, dataset: &SceneDataset, cloud: GaussianCloud, rng: &mut Rng) -> Result<Stage2State> {
        let mut init_rng = rng.fork(3);
        let model = if cfg.ablation.static_baseline {
            None
        } else {
            Some(Stage2Model::new(cfg.grid4d.clone(), cfg.feature_width, cfg.hidden_width, &mut init_rng)?)
        };
        let n = cloud.len();
        let mut smooth = SmoothRegConfig::for_grid(&cfg.grid4d);
        smooth.samples_per_iter = cfg.smooth_samples;
        Ok(Stage2State {
            cloud_opt: CloudOptimizer::new(n),
            trunk_opt: model.as_ref().map(|m| MlpOptimizer::new(&m.feature_mlp)),
            pos_head_opt: model.as_ref().map(|m| MlpOptimizer::new(&m.position_head)),
            rot_head_opt: model.as_ref().map(|m| MlpOptimizer::new(&m.rotation_head)),
            scale_head_opt: model.as_ref().map(|m| MlpOptimizer::new(&m.scale_head)),
            table_opt: model.as_ref().map(|m| AdamState::new(m.encoder.param_count())),
            grads: model.as_ref().map(Stage2Grads::zeros_like),
            model,
            accum: GradAccumulator::new(n),
            cloud,
            iteration: 0,
            rng: rng.fork(4),
            normalizer: UnitNormalizer::from_bbox(&dataset.bbox),
            smooth,
        })
    }

    pub fn stage2_step(&mut self, cfg: &TrainConfig, dataset: &SceneDataset) -> Result<LossBreakdown> {
        let train_views = dataset.training_views();
        let view = &dataset.views[train_views[self.rng.index(train_views.len())]];
        let t = view.time;
        let n = self.cloud.len();
        let opts = RenderOptions { background: dataset.background, threads: cfg.threads };
        let weights = &cfg.weights;

        let dyn_idx: Vec<usize> = self.cloud.dynamic_indices();
        let deform_active = self.model.is_some() && !dyn_idx.is_empty();
        let smooth_active = deform_active && !cfg.ablation.no_smooth_reg && weights.smooth_weight > 0.0;

        // forward deltas for the dynamic set
        let mut deltas = Vec::with_capacity(dyn_idx.len());
        let mut points = Vec::with_capacity(dyn_idx.len());
        if deform_active {
            let model = self.model.as_ref().unwrap();
            for &i in &dyn_idx {
                let x = SpaceTimePoint {
                    position: self.normalizer.to_unit(self.cloud.positions[i]).clamp01(),
                    time: t,
                };
                deltas.push(model.stage2_delta(&x)?);
                points.push(x);
            }
        }
        let deformed = if deform_active {
            apply_deformation(&self.cloud, &dyn_idx, &deltas, self.normalizer.extent)?
        } else {
            self.cloud.clone()
        };

        let (l1, dssim, mut cloud_grads) = image_loss_backward(&deformed, view, weights, &opts)?;

        // smooth regularization over probes drawn from this batch's dynamic
        // positions; gradients go to the tables only
        let mut lr_term = 0.0;
        if smooth_active {
            let model = self.model.as_ref().unwrap();
            let grads = self.grads.as_mut().unwrap();
            let samples = self.smooth.samples_per_iter.max(1);
            grads.clear();
            let scale = weights.smooth_weight / samples as f64;
            for _ in 0..samples {
                let j = self.rng.index(points.len());
                lr_term += smooth_reg(&model.encoder, &points[j], &self.smooth, &mut self.rng, &mut grads.tables, scale)?;
            }
            lr_term /= samples as f64;
        } else if let Some(grads) = self.grads.as_mut() {
            grads.clear();
        }

        let total = (1.0 - weights.dssim_mix) * l1 + weights.dssim_mix * dssim + weights.smooth_weight * lr_term;
        if !total.is_finite() {
            eprintln!(
                "diagnostic: stage2 iter {} loss breakdown l1={l1} dssim={dssim} lr={lr_term} n={n}",
                self.iteration
            );
            return Err(Error::NonFiniteLoss(self.iteration));
        }

        // decoder backward for the dynamic set
        if deform_active {
            let model = self.model.as_ref().unwrap();
            let grads = self.grads.as_mut().unwrap();
            for (k, &i) in dyn_idx.iter().enumerate() {
                let upstream = DeformationDelta {
                    position: self.normalizer.delta_to_world(cloud_grads.positions[i]),
                    rotation: cloud_grads.rotations[i],
                    log_scale: cloud_grads.log_scales[i],
                };
                let dx = model.stage2_delta_backward(&points[k], &upstream, grads)?;
                // encoder input path back to the canonical position
                cloud_grads.positions[i] += Vec3::new(dx[0], dx[1], dx[2]).cwise_div(self.normalizer.extent);
            }
            let model = self.model.as_mut().unwrap();
            let hp_net = AdamParams::with_lr(cfg.lr.network);
            self.trunk_opt.as_mut().unwrap().step(&hp_net, &mut model.feature_mlp, &grads.feature_mlp)?;
            self.pos_head_opt.as_mut().unwrap().step(&hp_net, &mut model.position_head, &grads.position_head)?;
            self.rot_head_opt.as_mut().unwrap().step(&hp_net, &mut model.rotation_head, &grads.rotation_head)?;
            self.scale_head_opt.as_mut().unwrap().step(&hp_net, &mut model.scale_head, &grads.scale_head)?;
            let flat_grads: Vec<f64> = grads.tables.per_level.iter().flatten().copied().collect();
            let mut flat: Vec<f64> = model.encoder.tables.iter().flatten().copied().collect();
            self.table_opt.as_mut().unwrap().apply(&AdamParams::with_lr(cfg.lr.tables), &mut flat, &flat_grads)?;
            let mut off = 0;
            for table in &mut model.encoder.tables {
                let len = table.len();
                table.copy_from_slice(&flat[off..off + len]);
                off += len;
            }
        }

        self.accum.accumulate(&cloud_grads.positions);
        let extent_mult = if cfg.lr.position_scale_by_extent { self.normalizer.extent.norm() } else { 1.0 };
        let pos_lr = exp_decay_lr(cfg.lr.position * extent_mult, cfg.lr.position_final_mult, self.iteration, cfg.stage2_iters);
        self.cloud_opt.step(&mut self.cloud, &cloud_grads, &cfg.lr, pos_lr, cfg.lr.opacity)?;

        self.iteration += 1;
        let iter = self.iteration;

        let lo = (cfg.stage2_iters as f64 * cfg.densify_start_frac) as u64;
        let hi = (cfg.stage2_iters as f64 * cfg.densify_stop_frac) as u64;
        if iter >= lo && iter < hi {
            let static_due = iter % cfg.density_static.densify_interval == 0;
            let dynamic_due = !cfg.ablation.no_dynamic_density_control
                && iter % cfg.density_dynamic.densify_interval == 0;
            if static_due || dynamic_due {
                let outcome = density_control(
                    &self.cloud,
                    &self.accum,
                    static_due.then_some(&cfg.density_static),
                    dynamic_due.then_some(&cfg.density_dynamic),
                    &mut self.rng,
                )?;
                self.cloud = outcome.cloud;
                self.cloud_opt.remap(&outcome.sources);
                self.accum.reset(self.cloud.len());
            }
        }
        if iter >= lo && iter < hi && iter % cfg.density_static.opacity_reset_interval == 0 {
            let only = if cfg.ablation.no_dynamic_density_control { Some(Label::Static) } else { None };
            clamp_opacity(&mut self.cloud, 0.01, only);
            self.cloud_opt.opacity.zero_moments();
        }

        let (sc, dc) = self.cloud.label_counts();
        Ok(LossBreakdown {
            stage: 2,
            iteration: iter,
            total,
            l1,
            dssim,
            static_term: 0.0,
            smooth_term: lr_term,
            static_count: sc,
            dynamic_count: dc,
        })
    }
}

impl Stage2State {
    pub fn into_model(
        self,
        dataset: &SceneDataset,
        _cfg: &TrainConfig,
        stage1: Option<Stage1Model>,
        stage1_iters: u64,
    ) -> TrainedModel {
        TrainedModel {
            cloud: self.cloud,
            stage1,
            stage2: self.model,
            bbox: dataset.bbox,
            background: dataset.background,
            iterations: (stage1_iters, self.iteration),
        }
    }
}

/// Mean feature-space distance E||G4D(x) - G4D(x + eps)|| over probe
/// points, with eps drawn like the smooth regularizer's perturbations.
pub fn feature_smoothness_metric(
    enc: &HashGridEncoder,
    probes: &[SpaceTimePoint],
    cfg: &SmoothRegConfig,
    rng: &mut Rng,
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::InvalidParameter("need at least one probe".into()));
    }
    let w = cfg.spatial_half_width;
    let mut acc = 0.0;
    for x in probes {
        let a_in = x.to_array();
        let b_in = [
            a_in[0] + rng.range(-w.x, w.x),
            a_in[1] + rng.range(-w.y, w.y),
            a_in[2] + rng.range(-w.z, w.z),
            a_in[3] + rng.range(-cfg.time_half_width, cfg.time_half_width),
        ];
        let a = enc.encode(&a_in)?;
        let b = enc.encode(&b_in)?;
        acc += a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    }
    Ok(acc / probes.len() as f64)
}

pub struct TrainResult {
    pub model: TrainedModel,
    pub stage1_final: Option<LossBreakdown>,
    pub stage2_final: Option<LossBreakdown>,
}

/// Run both stages to completion. `on_iter` receives every per-iteration
/// loss breakdown (the CSV log); `on_checkpoint` fires at the configured
/// interval and at completion.
pub fn train(
    cfg: &TrainConfig,
    dataset: &SceneDataset,
    mut on_iter: impl FnMut(&LossBreakdown),
    mut on_checkpoint: impl FnMut(&Checkpoint),
) -> Result<TrainResult> {
    cfg.validate()?;
    dataset.validate()?;
    let mut rng = Rng::seed_from(cfg.seed);

    // the decomposition ablation skips stage 1 outright; stage 2 keeps its
    // configured budget
    let (stage1_iters, stage2_iters) = if cfg.ablation.no_decomposition {
        (0, cfg.stage2_iters)
    } else {
        (cfg.stage1_iters, cfg.stage2_iters)
    };
    let mut stage_cfg = cfg.clone();
    stage_cfg.stage1_iters = stage1_iters;
    stage_cfg.stage2_iters = stage2_iters;

    let mut s1 = Stage1State::new(&stage_cfg, dataset, &mut rng)?;
    let mut stage1_final = None;
    for _ in 0..stage1_iters {
        let lb = s1.stage1_step(&stage_cfg, dataset)?;
        on_iter(&lb);
        stage1_final = Some(lb);
    }
    if stage1_iters > 0 {
        s1.freeze_labels(&stage_cfg)?;
    }
    let stage1_trained = stage1_iters > 0;

    let mut cloud = s1.cloud.clone();
    if cfg.ablation.no_decomposition {
        cloud.labels = vec![Label::Dynamic; cloud.len()];
    } else if cfg.ablation.static_baseline {
        cloud.labels = vec![Label::Static; cloud.len()];
    }

    let stage1_model = s1.model.take();
    let mut s2 = Stage2State::new(&stage_cfg, dataset, cloud, &mut rng)?;
    let mut stage2_final = None;
    for i in 0..stage2_iters {
        let lb = s2.stage2_step(&stage_cfg, dataset)?;
        on_iter(&lb);
        stage2_final = Some(lb);
        if cfg.checkpoint_interval > 0 && (i + 1) % cfg.checkpoint_interval == 0 {
            let model = TrainedModel {
                cloud: s2.cloud.clone(),
                stage1: stage1_model.clone(),
                stage2: s2.model.clone(),
                bbox: dataset.bbox,
                background: dataset.background,
                iterations: (stage1_iters, i + 1),
            };
            on_checkpoint(&model.to_checkpoint());
        }
    }

    let model = TrainedModel {
        cloud: s2.cloud.clone(),
        stage1: if stage1_trained { stage1_model } else { None },
        stage2: s2.model.clone(),
        bbox: dataset.bbox,
        background: dataset.background,
        iterations: (stage1_iters, stage2_iters),
    };
    on_checkpoint(&model.to_checkpoint());
    Ok(TrainResult { model, stage1_final, stage2_final })
}
