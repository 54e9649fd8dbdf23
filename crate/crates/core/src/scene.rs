//! Core domain types: Gaussian clouds, cameras, datasets.

use crate::error::{Error, Result};
use crate::math::{sigmoid, Mat3, Quat, Vec3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Static,
    Dynamic,
}

/// Trainable per-Gaussian parameters plus a dynamic/static label.
///
/// Scales are stored as logs (activated by exp), opacity as a logit
/// (activated by sigmoid), rotations as raw wxyz quaternions that are
/// renormalized whenever a covariance is assembled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianCloud {
    pub positions: Vec<Vec3>,
    pub log_scales: Vec<Vec3>,
    pub rotations: Vec<Quat>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<Vec3>,
    pub labels: Vec<Label>,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::InvalidParameter("cloud has no Gaussians".into()));
        }
        if self.log_scales.len() != n
            || self.rotations.len() != n
            || self.opacity_logits.len() != n
            || self.colors.len() != n
            || self.labels.len() != n
        {
            return Err(Error::ShapeMismatch(format!(
                "cloud arrays disagree on length (positions = {n})"
            )));
        }
        for i in 0..n {
            if !self.positions[i].is_finite()
                || !self.log_scales[i].is_finite()
                || !self.rotations[i].is_finite()
                || !self.opacity_logits[i].is_finite()
                || !self.colors[i].is_finite()
            {
                return Err(Error::InvalidParameter(format!("non-finite parameter at index {i}")));
            }
        }
        Ok(())
    }

    pub fn activated_scale(&self, i: usize) -> Vec3 {
        self.log_scales[i].map(f64::exp)
    }

    pub fn activated_opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn dynamic_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == Label::Dynamic).collect()
    }

    pub fn label_counts(&self) -> (usize, usize) {
        let d = self.labels.iter().filter(|&&l| l == Label::Dynamic).count();
        (self.len() - d, d)
    }
}

/// Sigma = R S S^T R^T for activated scale s and rotation r.
///
/// Built as M M^T with M = R diag(s), which is symmetric to the last bit.
pub fn covariance_from(scale: Vec3, rotation: Quat) -> Result<Mat3> {
    if !scale.is_finite() || !rotation.is_finite() {
        return Err(Error::InvalidParameter("non-finite scale or rotation".into()));
    }
    if scale.x <= 0.0 || scale.y <= 0.0 || scale.z <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "scale must be positive, got ({}, {}, {})",
            scale.x, scale.y, scale.z
        )));
    }
    let r = rotation.to_rotation();
    let m = r * Mat3::diag(scale);
    Ok(m * m.transpose())
}

/// Pinhole camera; rotation/translation map world to camera space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidParameter("focal lengths must be positive".into()));
        }
        if self.near <= 0.0 {
            return Err(Error::InvalidParameter("near plane must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("image dimensions must be positive".into()));
        }
        let rtr = self.rotation.transpose() * self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (rtr.m[i][j] - want).abs() > 1e-5 {
                    return Err(Error::InvalidParameter("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    /// Camera placed at `eye` looking toward `target`; +y of `up` maps to
    /// image -v (rows grow downward).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fx: f64, width: u32, height: u32, near: f64) -> Camera {
        let fwd = (target - eye).normalized();
        let right = fwd.cross(up).normalized();
        let down = fwd.cross(right).normalized();
        let rotation = Mat3::from_rows([right.to_array(), down.to_array(), fwd.to_array()]);
        let translation = -rotation.mul_vec(eye);
        Camera {
            rotation,
            translation,
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            near,
        }
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Aabb {
        Aabb { min, max }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    pub fn contains_strictly(&self, p: Vec3) -> bool {
        p.x > self.min.x
            && p.x < self.max.x
            && p.y > self.min.y
            && p.y < self.max.y
            && p.z > self.min.z
            && p.z < self.max.z
    }

    /// Grown by `frac` of the half extent on every side.
    pub fn with_margin(&self, frac: f64) -> Aabb {
        let c = self.center();
        let h = self.extent() * 0.5 * (1.0 + frac);
        Aabb::new(c - h, c + h)
    }
}

/// Maps world positions into the unit cube through a margined bounding box.
/// Hash encoders assume a unit domain, so every encoder query goes through
/// one of these.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitNormalizer {
    pub origin: Vec3,
    pub extent: Vec3,
}

impl UnitNormalizer {
    pub const MARGIN: f64 = 0.05;

    pub fn from_bbox(bbox: &Aabb) -> UnitNormalizer {
        let m = bbox.with_margin(Self::MARGIN);
        UnitNormalizer { origin: m.min, extent: m.extent() }
    }

    pub fn to_unit(&self, p: Vec3) -> Vec3 {
        (p - self.origin).cwise_div(self.extent)
    }

    pub fn to_world(&self, u: Vec3) -> Vec3 {
        self.origin + u.cwise_mul(self.extent)
    }

    /// Scale a unit-domain delta into world units.
    pub fn delta_to_world(&self, d: Vec3) -> Vec3 {
        d.cwise_mul(self.extent)
    }
}

/// 8-bit RGB image, row-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Image {
        Image { width, height, data: vec![0; (width * height * 3) as usize] }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| b as f64 / 255.0).collect()
    }

    pub fn from_f64(width: u32, height: u32, values: &[f64]) -> Image {
        assert_eq!(values.len(), (width * height * 3) as usize);
        let data = values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Image { width, height, data }
    }
}

/// Closed-form motion descriptors for synthetic ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TrajectorySpec {
    Static,
    Linear { velocity: Vec3 },
    Circular { center: Vec3, radius: f64, angular_rate: f64, phase: f64 },
    Sinusoidal { amplitude: f64, frequency: f64, axis: Vec3 },
}

/// Ground truth carried by synthetic scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub cloud: GaussianCloud,
    pub trajectories: Vec<TrajectorySpec>,
}

/// One posed image with its normalized timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneView {
    pub view_id: u32,
    pub time: f64,
    pub held_out: bool,
    pub camera: Camera,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub views: Vec<SceneView>,
    pub bbox: Aabb,
    pub background: Vec3,
    pub ground_truth: Option<GroundTruth>,
}

impl SceneDataset {
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (w, h) = (self.views[0].image.width, self.views[0].image.height);
        for v in &self.views {
            if v.image.width != w || v.image.height != h {
                return Err(Error::DimensionMismatch(format!(
                    "view {} image is {}x{}, expected {}x{}",
                    v.view_id, v.image.width, v.image.height, w, h
                )));
            }
            if !(0.0..=1.0).contains(&v.time) {
                return Err(Error::InvalidParameter(format!(
                    "view {} timestamp {} outside [0,1]",
                    v.view_id, v.time
                )));
            }
            v.camera.validate()?;
        }
        if let Some(gt) = &self.ground_truth {
            gt.cloud.validate()?;
            for p in &gt.cloud.positions {
                if !self.bbox.contains_strictly(*p) {
                    return Err(Error::InvalidParameter(
                        "bounding box does not strictly contain all positions".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn training_views(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| !self.views[i].held_out).collect()
    }

    pub fn held_out_views(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.views[i].held_out).collect()
    }
}
