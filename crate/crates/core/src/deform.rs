//! Deformation models: the stage-1 motion extractor with its linear motion
//! model, and the stage-2 spatio-temporal field with a multi-head decoder.

use crate::error::{Error, Result};
use crate::hashgrid::{HashGridConfig, HashGridEncoder, TableGrads};
use crate::math::{Quat, Vec3};
use crate::nn::{FinalInit, Mlp, MlpGrads};
use crate::rng::Rng;
use crate::scene::GaussianCloud;

/// Normalized position plus normalized time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpaceTimePoint {
    pub position: Vec3,
    pub time: f64,
}

impl SpaceTimePoint {
    pub fn to_array(self) -> [f64; 4] {
        [self.position.x, self.position.y, self.position.z, self.time]
    }
}

/// Motion extractor: 3D encoder, feature net, positional head.
#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub encoder: HashGridEncoder,
    pub feature_mlp: Mlp,
    pub motion_head: Mlp,
}

#[derive(Clone, Debug)]
pub struct Stage1Grads {
    pub tables: TableGrads,
    pub feature_mlp: MlpGrads,
    pub motion_head: MlpGrads,
}

impl Stage1Grads {
    pub fn zeros_like(m: &Stage1Model) -> Stage1Grads {
        Stage1Grads {
            tables: TableGrads::zeros_like(&m.encoder),
            feature_mlp: MlpGrads::zeros_like(&m.feature_mlp),
            motion_head: MlpGrads::zeros_like(&m.motion_head),
        }
    }

    pub fn clear(&mut self) {
        self.tables.clear();
        self.feature_mlp.clear();
        self.motion_head.clear();
    }
}

impl Stage1Model {
    pub fn new(grid: HashGridConfig, feature_width: usize, hidden: usize, rng: &mut Rng) -> Result<Stage1Model> {
        if grid.dims != 3 {
            return Err(Error::InvalidParameter("stage-1 encoder must be 3D".into()));
        }
        let encoder = HashGridEncoder::new(grid, rng)?;
        let in_dim = encoder.config.output_len();
        let feature_mlp = Mlp::new(&[in_dim, hidden, feature_width], FinalInit::Random, rng);
        let motion_head = Mlp::new(&[feature_width, hidden, 3], FinalInit::Zero, rng);
        Ok(Stage1Model { encoder, feature_mlp, motion_head })
    }

    /// Per-Gaussian motion delta in the normalized domain.
    pub fn stage1_delta(&self, p_norm: Vec3) -> Result<Vec3> {
        if !p_norm.is_finite() {
            return Err(Error::InvalidParameter("non-finite stage-1 input".into()));
        }
        let enc = self.encoder.encode(&p_norm.to_array())?;
        let feat = self.feature_mlp.forward(&enc)?;
        let d = self.motion_head.forward(&feat)?;
        Ok(Vec3::new(d[0], d[1], d[2]))
    }

    /// Backward through head, feature net and encoder. Returns the gradient
    /// with respect to the normalized input position.
    pub fn stage1_delta_backward(&self, p_norm: Vec3, upstream: Vec3, grads: &mut Stage1Grads) -> Result<Vec3> {
        let enc = self.encoder.encode(&p_norm.to_array())?;
        let (feat, feat_cache) = self.feature_mlp.forward_cached(&enc)?;
        let (_, head_cache) = self.motion_head.forward_cached(&feat)?;
        let d_feat = self.motion_head.backward(&head_cache, &upstream.to_array(), &mut grads.motion_head)?;
        let d_enc = self.feature_mlp.backward(&feat_cache, &d_feat, &mut grads.feature_mlp)?;
        let mut dx = [0.0; 3];
        self.encoder.encode_backward_into(&p_norm.to_array(), &d_enc, &mut grads.tables, &mut dx)?;
        Ok(Vec3::from_array(dx))
    }
}

/// p(t) = p + t * dp.
pub fn linear_position(p: Vec3, delta: Vec3, t: f64) -> Vec3 {
    p + delta * t
}

/// Offsets produced by the stage-2 decoder heads.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DeformationDelta {
    /// Normalized-domain positional offset.
    pub position: Vec3,
    /// Additive quaternion increment, wxyz.
    pub rotation: Quat,
    /// Log-scale increment.
    pub log_scale: Vec3,
}

impl DeformationDelta {
    pub fn is_finite(&self) -> bool {
        self.position.is_finite() && self.rotation.is_finite() && self.log_scale.is_finite()
    }
}

/// Spatio-temporal deformation field: 4D encoder, shared feature net, and
/// three decoder heads for position, rotation and scale.
#[derive(Clone, Debug)]
pub struct Stage2Model {
    pub encoder: HashGridEncoder,
    pub feature_mlp: Mlp,
    pub position_head: Mlp,
    pub rotation_head: Mlp,
    pub scale_head: Mlp,
}

#[derive(Clone, Debug)]
pub struct Stage2Grads {
    pub tables: TableGrads,
    pub feature_mlp: MlpGrads,
    pub position_head: MlpGrads,
    pub rotation_head: MlpGrads,
    pub scale_head: MlpGrads,
}

impl Stage2Grads {
    pub fn zeros_like(m: &Stage2Model) -> Stage2Grads {
        Stage2Grads {
            tables: TableGrads::zeros_like(&m.encoder),
            feature_mlp: MlpGrads::zeros_like(&m.feature_mlp),
            position_head: MlpGrads::zeros_like(&m.position_head),
            rotation_head: MlpGrads::zeros_like(&m.rotation_head),
            scale_head: MlpGrads::zeros_like(&m.scale_head),
        }
    }

    pub fn clear(&mut self) {
        self.tables.clear();
        self.feature_mlp.clear();
        self.position_head.clear();
        self.rotation_head.clear();
        self.scale_head.clear();
    }
}

impl Stage2Model {
    pub fn new(grid: HashGridConfig, feature_width: usize, hidden: usize, rng: &mut Rng) -> Result<Stage2Model> {
        if grid.dims != 4 {
            return Err(Error::InvalidParameter("stage-2 encoder must be 4D".into()));
        }
        let encoder = HashGridEncoder::new(grid, rng)?;
        let in_dim = encoder.config.output_len();
        let feature_mlp = Mlp::new(&[in_dim, hidden, feature_width], FinalInit::Random, rng);
        let position_head = Mlp::new(&[feature_width, hidden, 3], FinalInit::Zero, rng);
        let rotation_head = Mlp::new(&[feature_width, hidden, 4], FinalInit::Zero, rng);
        let scale_head = Mlp::new(&[feature_width, hidden, 3], FinalInit::Zero, rng);
        Ok(Stage2Model { encoder, feature_mlp, position_head, rotation_head, scale_head })
    }

    pub fn stage2_delta(&self, x: &SpaceTimePoint) -> Result<DeformationDelta> {
        if !x.position.is_finite() || !x.time.is_finite() {
            return Err(Error::InvalidParameter("non-finite stage-2 input".into()));
        }
        let enc = self.encoder.encode(&x.to_array())?;
        let feat = self.feature_mlp.forward(&enc)?;
        let dp = self.position_head.forward(&feat)?;
        let dr = self.rotation_head.forward(&feat)?;
        let ds = self.scale_head.forward(&feat)?;
        Ok(DeformationDelta {
            position: Vec3::new(dp[0], dp[1], dp[2]),
            rotation: Quat::new(dr[0], dr[1], dr[2], dr[3]),
            log_scale: Vec3::new(ds[0], ds[1], ds[2]),
        })
    }

    /// Backward through all three heads and the shared trunk. Returns the
    /// gradient with respect to the 4D input (position, time).
    pub fn stage2_delta_backward(
        &self,
        x: &SpaceTimePoint,
        upstream: &DeformationDelta,
        grads: &mut Stage2Grads,
    ) -> Result<[f64; 4]> {
        let enc = self.encoder.encode(&x.to_array())?;
        let (feat, trunk_cache) = self.feature_mlp.forward_cached(&enc)?;
        let (_, pos_cache) = self.position_head.forward_cached(&feat)?;
        let (_, rot_cache) = self.rotation_head.forward_cached(&feat)?;
        let (_, scale_cache) = self.scale_head.forward_cached(&feat)?;

        let d_feat_p = self.position_head.backward(&pos_cache, &upstream.position.to_array(), &mut grads.position_head)?;
        let d_feat_r = self.rotation_head.backward(&rot_cache, &upstream.rotation.to_array(), &mut grads.rotation_head)?;
        let d_feat_s = self.scale_head.backward(&scale_cache, &upstream.log_scale.to_array(), &mut grads.scale_head)?;
        let d_feat: Vec<f64> = (0..feat.len()).map(|i| d_feat_p[i] + d_feat_r[i] + d_feat_s[i]).collect();
        let d_enc = self.feature_mlp.backward(&trunk_cache, &d_feat, &mut grads.feature_mlp)?;
        let mut dx = [0.0; 4];
        self.encoder.encode_backward_into(&x.to_array(), &d_enc, &mut grads.tables, &mut dx)?;
        Ok(dx)
    }
}

/// Apply per-Gaussian deltas to the dynamic subset: positions shift by the
/// world-scaled offset, quaternions are incremented additively (renormalized
/// later at covariance assembly), log-scales are incremented. Opacity, color
/// and every static Gaussian are untouched. Returns a new view.
pub fn apply_deformation(
    cloud: &GaussianCloud,
    dynamic_indices: &[usize],
    deltas: &[DeformationDelta],
    world_scale: Vec3,
) -> Result<GaussianCloud> {
    if dynamic_indices.len() != deltas.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} indices but {} deltas",
            dynamic_indices.len(),
            deltas.len()
        )));
    }
    let mut out = cloud.clone();
    for (&i, d) in dynamic_indices.iter().zip(deltas) {
        if i >= cloud.len() {
            return Err(Error::InvalidParameter(format!("dynamic index {i} out of range")));
        }
        out.positions[i] += d.position.cwise_mul(world_scale);
        out.rotations[i] = out.rotations[i] + d.rotation;
        out.log_scales[i] += d.log_scale;
    }
    Ok(out)
}
