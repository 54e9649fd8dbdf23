//! Self-supervised dynamic/static decomposition and the decoupled adaptive
//! density control that treats the two groups independently.

use crate::error::{Error, Result};
use crate::math::{logit, sigmoid, Vec3};
use crate::rng::Rng;
use crate::scene::{GaussianCloud, Label};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionConfig {
    /// Top percentile classified dynamic.
    pub top_percent: f64,
    pub relabel_interval: u64,
    pub warmup_iters: u64,
    /// Static-constraint weight.
    pub static_weight: f64,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        DecompositionConfig {
            top_percent: 20.0,
            relabel_interval: 1000,
            warmup_iters: 3000,
            static_weight: 0.1,
        }
    }
}

impl DecompositionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_percent > 0.0 && self.top_percent < 100.0) {
            return Err(Error::InvalidParameter(format!(
                "top percentile must be in (0, 100), got {}",
                self.top_percent
            )));
        }
        if self.relabel_interval == 0 {
            return Err(Error::InvalidParameter("relabel interval must be >= 1".into()));
        }
        Ok(())
    }
}

/// Nearest-rank (100-k)th percentile of the motion magnitudes: the value at
/// rank ceil((100-k) * N / 100) of the ascending sort. Ties fall static, so
/// at most ceil(k*N/100) values strictly exceed the threshold.
pub fn motion_threshold(magnitudes: &[f64], top_percent: f64) -> Result<f64> {
    if magnitudes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if magnitudes.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite motion magnitude".into()));
    }
    let mut sorted = magnitudes.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let rank = ((100.0 - top_percent) * n as f64 / 100.0).ceil() as usize;
    let rank = rank.clamp(1, n);
    Ok(sorted[rank - 1])
}

/// Dynamic iff strictly above the threshold.
pub fn classify(magnitudes: &[f64], threshold: f64) -> Vec<Label> {
    magnitudes
        .iter()
        .map(|&m| if m > threshold { Label::Dynamic } else { Label::Static })
        .collect()
}

/// Mean Euclidean norm of the static-set deltas; empty set contributes 0.
pub fn static_loss(static_deltas: &[Vec3]) -> f64 {
    if static_deltas.is_empty() {
        return 0.0;
    }
    static_deltas.iter().map(|d| d.norm()).sum::<f64>() / static_deltas.len() as f64
}

/// d(static_loss)/d(delta_i) for a static set member.
pub fn static_loss_grad(delta: Vec3, set_size: usize) -> Vec3 {
    let n = delta.norm();
    if n < 1e-300 || set_size == 0 {
        Vec3::ZERO
    } else {
        delta / (n * set_size as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityControlConfig {
    /// Mean positional-gradient magnitude that triggers clone/split.
    pub densify_grad_threshold: f64,
    /// Activated opacity below which a Gaussian is pruned.
    pub opacity_prune_threshold: f64,
    pub densify_interval: u64,
    pub opacity_reset_interval: u64,
    /// World-unit scale above which a Gaussian splits instead of cloning.
    pub scale_split_threshold: f64,
}

impl Default for DensityControlConfig {
    fn default() -> Self {
        DensityControlConfig {
            densify_grad_threshold: 2e-4,
            opacity_prune_threshold: 0.005,
            densify_interval: 400,
            opacity_reset_interval: 3000,
            scale_split_threshold: 0.05,
        }
    }
}

impl DensityControlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.densify_grad_threshold <= 0.0
            || self.opacity_prune_threshold <= 0.0
            || self.scale_split_threshold <= 0.0
        {
            return Err(Error::InvalidParameter("density control thresholds must be positive".into()));
        }
        if self.densify_interval == 0 || self.opacity_reset_interval == 0 {
            return Err(Error::InvalidParameter("density control intervals must be >= 1".into()));
        }
        Ok(())
    }
}

/// Accumulated positional-gradient magnitudes between density events.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    pub norm_sum: Vec<f64>,
    pub count: Vec<u64>,
}

impl GradAccumulator {
    pub fn new(n: usize) -> GradAccumulator {
        GradAccumulator { norm_sum: vec![0.0; n], count: vec![0; n] }
    }

    pub fn accumulate(&mut self, position_grads: &[Vec3]) {
        debug_assert_eq!(position_grads.len(), self.norm_sum.len());
        for (i, g) in position_grads.iter().enumerate() {
            self.norm_sum[i] += g.norm();
            self.count[i] += 1;
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.norm_sum[i] / self.count[i] as f64
        }
    }

    pub fn reset(&mut self, n: usize) {
        self.norm_sum.clear();
        self.norm_sum.resize(n, 0.0);
        self.count.clear();
        self.count.resize(n, 0);
    }
}

/// Where each post-densification Gaussian came from: `sources` is `Some(old)`
/// for entries that keep the optimizer moments of `old` and `None` for fresh
/// children; `ancestors` maps every entry (children included) to the index it
/// descends from, which keeps ground-truth correspondence alive across
/// structural edits.
#[derive(Clone, Debug)]
pub struct DensityOutcome {
    pub cloud: GaussianCloud,
    pub sources: Vec<Option<usize>>,
    pub ancestors: Vec<usize>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// One clone/split/prune sweep. Each label group uses its own config; a group
/// with `None` is left untouched (the dynamic-control ablation). Children
/// inherit the parent's label.
pub fn density_control(
    cloud: &GaussianCloud,
    accum: &GradAccumulator,
    static_cfg: Option<&DensityControlConfig>,
    dynamic_cfg: Option<&DensityControlConfig>,
    rng: &mut Rng,
) -> Result<DensityOutcome> {
    if accum.norm_sum.len() != cloud.len() {
        return Err(Error::ShapeMismatch(format!(
            "accumulator covers {} Gaussians, cloud has {}",
            accum.norm_sum.len(),
            cloud.len()
        )));
    }
    if let Some(c) = static_cfg {
        c.validate()?;
    }
    if let Some(c) = dynamic_cfg {
        c.validate()?;
    }

    let mut out = GaussianCloud {
        positions: Vec::new(),
        log_scales: Vec::new(),
        rotations: Vec::new(),
        opacity_logits: Vec::new(),
        colors: Vec::new(),
        labels: Vec::new(),
    };
    let mut sources = Vec::new();
    let mut ancestors = Vec::new();
    let (mut cloned, mut split, mut pruned) = (0usize, 0usize, 0usize);

    let push = |cloud_src: &GaussianCloud,
                i: usize,
                src: Option<usize>,
                position: Vec3,
                log_scale: Vec3,
                out: &mut GaussianCloud,
                sources: &mut Vec<Option<usize>>,
                ancestors: &mut Vec<usize>| {
        out.positions.push(position);
        out.log_scales.push(log_scale);
        out.rotations.push(cloud_src.rotations[i]);
        out.opacity_logits.push(cloud_src.opacity_logits[i]);
        out.colors.push(cloud_src.colors[i]);
        out.labels.push(cloud_src.labels[i]);
        sources.push(src);
        ancestors.push(i);
    };

    for i in 0..cloud.len() {
        let cfg = match cloud.labels[i] {
            Label::Static => static_cfg,
            Label::Dynamic => dynamic_cfg,
        };
        let Some(cfg) = cfg else {
            // group not under control: carried over verbatim
            push(cloud, i, Some(i), cloud.positions[i], cloud.log_scales[i], &mut out, &mut sources, &mut ancestors);
            continue;
        };
        if cloud.activated_opacity(i) < cfg.opacity_prune_threshold {
            pruned += 1;
            continue;
        }
        let scale = cloud.activated_scale(i);
        if accum.mean(i) > cfg.densify_grad_threshold {
            if scale.max_component() > cfg.scale_split_threshold {
                // split: two children at offsets sampled from the Gaussian's
                // own shape, scales divided by 1.6, parent dropped
                split += 1;
                let rot = cloud.rotations[i].to_rotation();
                let shrunk = cloud.log_scales[i] - Vec3::splat(1.6f64.ln());
                for _ in 0..2 {
                    let local = Vec3::new(
                        rng.normal() * scale.x,
                        rng.normal() * scale.y,
                        rng.normal() * scale.z,
                    );
                    let offset = rot.mul_vec(local);
                    push(cloud, i, None, cloud.positions[i] + offset, shrunk, &mut out, &mut sources, &mut ancestors);
                }
            } else {
                // clone: verbatim copy alongside the original
                cloned += 1;
                push(cloud, i, Some(i), cloud.positions[i], cloud.log_scales[i], &mut out, &mut sources, &mut ancestors);
                push(cloud, i, None, cloud.positions[i], cloud.log_scales[i], &mut out, &mut sources, &mut ancestors);
            }
        } else {
            push(cloud, i, Some(i), cloud.positions[i], cloud.log_scales[i], &mut out, &mut sources, &mut ancestors);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidParameter("density control pruned every Gaussian".into()));
    }
    Ok(DensityOutcome { cloud: out, sources, ancestors, cloned, split, pruned })
}

/// Clamp opacity logits so activated opacity <= ceiling (the periodic 3DGS
/// opacity reset). Returns how many entries changed.
pub fn clamp_opacity(cloud: &mut GaussianCloud, ceiling: f64, labels_to_reset: Option<Label>) -> usize {
    let max_logit = logit(ceiling);
    let mut changed = 0;
    for i in 0..cloud.len() {
        if let Some(only) = labels_to_reset {
            if cloud.labels[i] != only {
                continue;
            }
        }
        if sigmoid(cloud.opacity_logits[i]) > ceiling {
            cloud.opacity_logits[i] = max_logit;
            changed += 1;
        }
    }
    changed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Quat;

    #[test]
    fn threshold_nearest_rank() {
        let mags: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        let tau = motion_threshold(&mags, 20.0).unwrap();
        assert_eq!(tau, 8.0);
        let labels = classify(&mags, tau);
        let dynamic: Vec<f64> = mags
            .iter()
            .zip(&labels)
            .filter(|(_, l)| **l == Label::Dynamic)
            .map(|(m, _)| *m)
            .collect();
        assert_eq!(dynamic, vec![9.0, 10.0]);
    }

    #[test]
    fn threshold_all_equal_gives_empty_dynamic_set() {
        let mags = vec![0.5; 20];
        let tau = motion_threshold(&mags, 20.0).unwrap();
        let labels = classify(&mags, tau);
        assert!(labels.iter().all(|&l| l == Label::Static));
    }

    #[test]
    fn threshold_near_hundred_percent() {
        let mags = vec![3.0, 1.0, 2.0, 5.0, 4.0];
        let tau = motion_threshold(&mags, 99.9).unwrap();
        assert_eq!(tau, 1.0, "threshold collapses to the minimum");
        let labels = classify(&mags, tau);
        let dyn_count = labels.iter().filter(|&&l| l == Label::Dynamic).count();
        assert_eq!(dyn_count, 4, "all but the minimum dynamic");
    }

    #[test]
    fn threshold_rejects_empty_and_non_finite() {
        assert!(motion_threshold(&[], 20.0).is_err());
        assert!(motion_threshold(&[1.0, f64::NAN], 20.0).is_err());
    }

    #[test]
    fn threshold_monotone_in_percentile() {
        let mut rng = Rng::seed_from(50);
        let mags: Vec<f64> = (0..200).map(|_| rng.uniform() * 10.0).collect();
        let mut prev_count = 0;
        for k in [5.0, 10.0, 20.0, 40.0, 60.0, 80.0, 95.0] {
            let tau = motion_threshold(&mags, k).unwrap();
            let count = classify(&mags, tau).iter().filter(|&&l| l == Label::Dynamic).count();
            assert!(count >= prev_count, "k {k}: {count} < {prev_count}");
            assert!(count <= ((k * mags.len() as f64) / 100.0).ceil() as usize);
            prev_count = count;
        }
    }

    #[test]
    fn classification_scale_equivariant() {
        let mut rng = Rng::seed_from(51);
        let mags: Vec<f64> = (0..100).map(|_| rng.uniform()).collect();
        let tau = motion_threshold(&mags, 30.0).unwrap();
        let base = classify(&mags, tau);
        for c in [0.001, 0.5, 7.0, 4096.0] {
            let scaled: Vec<f64> = mags.iter().map(|m| m * c).collect();
            let tau_c = motion_threshold(&scaled, 30.0).unwrap();
            assert_eq!(classify(&scaled, tau_c), base, "c = {c}");
        }
    }

    #[test]
    fn classify_extremes() {
        let mags = vec![0.1, 0.7, 3.0];
        assert!(classify(&mags, f64::INFINITY).iter().all(|&l| l == Label::Static));
        assert!(classify(&mags, -1.0).iter().all(|&l| l == Label::Dynamic));
        assert_eq!(classify(&[0.5, 2.0], 1.0), vec![Label::Static, Label::Dynamic]);
    }

    #[test]
    fn static_loss_cases() {
        assert_eq!(static_loss(&[Vec3::ZERO, Vec3::ZERO]), 0.0);
        assert_eq!(static_loss(&[]), 0.0);
        let set = [Vec3::new(3.0, 4.0, 0.0), Vec3::ZERO];
        assert_eq!(static_loss(&set), 2.5);
        // homogeneity
        let scaled: Vec<Vec3> = set.iter().map(|d| *d * 3.0).collect();
        assert!((static_loss(&scaled) - 7.5).abs() < 1e-12);
    }

    #[test]
    fn static_loss_grad_matches_finite_differences() {
        let set = [Vec3::new(0.3, -0.4, 0.5), Vec3::new(-0.1, 0.2, 0.05)];
        let g = static_loss_grad(set[0], set.len());
        let h = 1e-7;
        for axis in 0..3 {
            let mut dp = set[0].to_array();
            let mut dm = set[0].to_array();
            dp[axis] += h;
            dm[axis] -= h;
            let lp = static_loss(&[Vec3::from_array(dp), set[1]]);
            let lm = static_loss(&[Vec3::from_array(dm), set[1]]);
            let fd = (lp - lm) / (2.0 * h);
            let got = g.to_array()[axis];
            assert!((fd - got).abs() < 1e-6, "axis {axis}: {fd} vs {got}");
        }
    }

    fn control_cloud() -> GaussianCloud {
        GaussianCloud {
            positions: vec![Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            log_scales: vec![Vec3::splat(-3.0), Vec3::splat(-3.0), Vec3::splat(-3.0)],
            rotations: vec![Quat::IDENTITY; 3],
            opacity_logits: vec![2.0, 2.0, 2.0],
            colors: vec![Vec3::splat(0.5); 3],
            labels: vec![Label::Static, Label::Dynamic, Label::Dynamic],
        }
    }

    #[test]
    fn density_control_noop_below_thresholds() {
        let cloud = control_cloud();
        let accum = GradAccumulator::new(3);
        let cfg = DensityControlConfig::default();
        let mut rng = Rng::seed_from(1);
        let out = density_control(&cloud, &accum, Some(&cfg), Some(&cfg), &mut rng).unwrap();
        assert_eq!(out.cloud.len(), 3);
        assert_eq!(out.cloud, cloud);
    }

    #[test]
    fn density_control_prunes_transparent() {
        let mut cloud = control_cloud();
        cloud.opacity_logits[1] = -10.0; // activated ~ 4.5e-5
        let accum = GradAccumulator::new(3);
        let cfg = DensityControlConfig::default();
        let mut rng = Rng::seed_from(2);
        let out = density_control(&cloud, &accum, Some(&cfg), Some(&cfg), &mut rng).unwrap();
        assert_eq!(out.cloud.len(), 2);
        assert_eq!(out.pruned, 1);
    }

    #[test]
    fn density_control_clones_small_high_gradient() {
        let cloud = control_cloud();
        let mut accum = GradAccumulator::new(3);
        accum.accumulate(&[Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), Vec3::ZERO]);
        let cfg = DensityControlConfig { densify_grad_threshold: 0.5, ..Default::default() };
        let mut rng = Rng::seed_from(3);
        let out = density_control(&cloud, &accum, Some(&cfg), Some(&cfg), &mut rng).unwrap();
        assert_eq!(out.cloud.len(), 4);
        assert_eq!(out.cloned, 1);
        // the child inherits the dynamic label
        let dyn_count = out.cloud.labels.iter().filter(|&&l| l == Label::Dynamic).count();
        assert_eq!(dyn_count, 3);
    }

    #[test]
    fn density_control_splits_large_high_gradient() {
        let mut cloud = control_cloud();
        cloud.log_scales[1] = Vec3::splat(0.0); // scale 1.0 >> split threshold
        let mut accum = GradAccumulator::new(3);
        accum.accumulate(&[Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), Vec3::ZERO]);
        let cfg = DensityControlConfig { densify_grad_threshold: 0.5, ..Default::default() };
        let mut rng = Rng::seed_from(4);
        let out = density_control(&cloud, &accum, Some(&cfg), Some(&cfg), &mut rng).unwrap();
        assert_eq!(out.cloud.len(), 4, "parent replaced by two children");
        assert_eq!(out.split, 1);
        // children got shrunk scales
        let expected = 0.0 - 1.6f64.ln();
        let shrunk = out.cloud.log_scales.iter().filter(|s| (s.x - expected).abs() < 1e-12).count();
        assert_eq!(shrunk, 2);
    }

    #[test]
    fn density_control_group_isolation() {
        // sentinel thresholds: static config would clone anything, dynamic
        // config is inert; only static entries may change
        let cloud = control_cloud();
        let mut accum = GradAccumulator::new(3);
        accum.accumulate(&[Vec3::new(1.0, 0.0, 0.0); 3]);
        let eager = DensityControlConfig { densify_grad_threshold: 1e-9, ..Default::default() };
        let inert = DensityControlConfig { densify_grad_threshold: 1e9, ..Default::default() };
        let mut rng = Rng::seed_from(5);
        let out = density_control(&cloud, &accum, Some(&eager), Some(&inert), &mut rng).unwrap();
        // 1 static cloned -> 4 total; both dynamics untouched
        assert_eq!(out.cloud.len(), 4);
        let dyn_count = out.cloud.labels.iter().filter(|&&l| l == Label::Dynamic).count();
        assert_eq!(dyn_count, 2);
        for v in &out.cloud.positions {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn density_control_disabled_group_is_carried_verbatim() {
        let mut cloud = control_cloud();
        cloud.opacity_logits[1] = -10.0; // would be pruned if dynamic were controlled
        let accum = GradAccumulator::new(3);
        let cfg = DensityControlConfig::default();
        let mut rng = Rng::seed_from(6);
        let out = density_control(&cloud, &accum, Some(&cfg), None, &mut rng).unwrap();
        assert_eq!(out.cloud.len(), 3);
        assert_eq!(out.pruned, 0);
    }

    #[test]
    fn opacity_clamp() {
        let mut cloud = control_cloud();
        let changed = clamp_opacity(&mut cloud, 0.01, None);
        assert_eq!(changed, 3);
        for i in 0..3 {
            assert!(cloud.activated_opacity(i) <= 0.01 + 1e-12);
        }
    }
}
