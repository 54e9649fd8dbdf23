//! Live model state and its checkpoint packing.

use crate::checkpoint::{Checkpoint, CheckpointMeta, MlpWidths, NamedArray, Stage2Widths, CHECKPOINT_VERSION};
use crate::deform::{apply_deformation, SpaceTimePoint, Stage1Model, Stage2Model};
use crate::error::{Error, Result};
use crate::hashgrid::HashGridEncoder;
use crate::math::{Quat, Vec3};
use crate::nn::{DenseLayer, Mlp};
use crate::render::{render, RenderOptions, RenderedImage};
use crate::scene::{Aabb, Camera, GaussianCloud, UnitNormalizer};

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub cloud: GaussianCloud,
    pub stage1: Option<Stage1Model>,
    pub stage2: Option<Stage2Model>,
    pub bbox: Aabb,
    pub background: Vec3,
    pub iterations: (u64, u64),
}

fn push_mlp_arrays(arrays: &mut Vec<NamedArray>, prefix: &str, mlp: &Mlp) {
    for (li, layer) in mlp.layers.iter().enumerate() {
        arrays.push(NamedArray::from_f64(
            format!("{prefix}.layer{li}.weights"),
            vec![layer.out_dim as u32, layer.in_dim as u32],
            layer.weights.iter().copied(),
        ));
        arrays.push(NamedArray::from_f64(
            format!("{prefix}.layer{li}.biases"),
            vec![layer.out_dim as u32],
            layer.biases.iter().copied(),
        ));
    }
}

fn push_grid_arrays(arrays: &mut Vec<NamedArray>, prefix: &str, enc: &HashGridEncoder) {
    for (l, table) in enc.tables.iter().enumerate() {
        arrays.push(NamedArray::from_f64(
            format!("{prefix}.level{l}"),
            vec![enc.config.table_size, enc.config.features as u32],
            table.iter().copied(),
        ));
    }
}

fn load_mlp(ck: &Checkpoint, prefix: &str, widths: &[usize]) -> Result<Mlp> {
    let mut layers = Vec::new();
    for (li, w) in widths.windows(2).enumerate() {
        let (in_dim, out_dim) = (w[0], w[1]);
        let wa = ck.array(&format!("{prefix}.layer{li}.weights"))?;
        let ba = ck.array(&format!("{prefix}.layer{li}.biases"))?;
        if wa.data.len() != in_dim * out_dim || ba.data.len() != out_dim {
            return Err(Error::ShapeMismatch(format!("{prefix} layer {li} shape disagrees with meta")));
        }
        layers.push(DenseLayer { weights: wa.to_f64(), biases: ba.to_f64(), in_dim, out_dim });
    }
    Ok(Mlp { layers })
}

fn load_grid(ck: &Checkpoint, prefix: &str, cfg: &crate::hashgrid::HashGridConfig) -> Result<HashGridEncoder> {
    cfg.validate()?;
    let mut tables = Vec::with_capacity(cfg.levels);
    for l in 0..cfg.levels {
        let a = ck.array(&format!("{prefix}.level{l}"))?;
        let want = cfg.table_size as usize * cfg.features;
        if a.data.len() != want {
            return Err(Error::ShapeMismatch(format!("{prefix} level {l} has {} entries, expected {want}", a.data.len())));
        }
        tables.push(a.to_f64());
    }
    Ok(HashGridEncoder { config: cfg.clone(), tables })
}

impl TrainedModel {
    pub fn normalizer(&self) -> UnitNormalizer {
        UnitNormalizer::from_bbox(&self.bbox)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let n = self.cloud.len() as u32;
        let mut arrays = vec![
            NamedArray::from_f64(
                "cloud.positions",
                vec![n, 3],
                self.cloud.positions.iter().flat_map(|v| v.to_array()),
            ),
            NamedArray::from_f64(
                "cloud.log_scales",
                vec![n, 3],
                self.cloud.log_scales.iter().flat_map(|v| v.to_array()),
            ),
            NamedArray::from_f64(
                "cloud.rotations",
                vec![n, 4],
                self.cloud.rotations.iter().flat_map(|q| q.to_array()),
            ),
            NamedArray::from_f64(
                "cloud.opacity_logits",
                vec![n],
                self.cloud.opacity_logits.iter().copied(),
            ),
            NamedArray::from_f64(
                "cloud.colors",
                vec![n, 3],
                self.cloud.colors.iter().flat_map(|v| v.to_array()),
            ),
        ];
        let mut meta = CheckpointMeta {
            labels: self.cloud.labels.clone(),
            bbox: self.bbox,
            background: self.background,
            grid3d: None,
            grid4d: None,
            stage1_widths: None,
            stage2_widths: None,
            iterations: self.iterations,
        };
        if let Some(s1) = &self.stage1 {
            meta.grid3d = Some(s1.encoder.config.clone());
            meta.stage1_widths = Some(MlpWidths {
                feature: s1.feature_mlp.widths(),
                head: s1.motion_head.widths(),
            });
            push_grid_arrays(&mut arrays, "stage1.grid", &s1.encoder);
            push_mlp_arrays(&mut arrays, "stage1.feature_mlp", &s1.feature_mlp);
            push_mlp_arrays(&mut arrays, "stage1.motion_head", &s1.motion_head);
        }
        if let Some(s2) = &self.stage2 {
            meta.grid4d = Some(s2.encoder.config.clone());
            meta.stage2_widths = Some(Stage2Widths {
                feature: s2.feature_mlp.widths(),
                position_head: s2.position_head.widths(),
                rotation_head: s2.rotation_head.widths(),
                scale_head: s2.scale_head.widths(),
            });
            push_grid_arrays(&mut arrays, "stage2.grid", &s2.encoder);
            push_mlp_arrays(&mut arrays, "stage2.feature_mlp", &s2.feature_mlp);
            push_mlp_arrays(&mut arrays, "stage2.position_head", &s2.position_head);
            push_mlp_arrays(&mut arrays, "stage2.rotation_head", &s2.rotation_head);
            push_mlp_arrays(&mut arrays, "stage2.scale_head", &s2.scale_head);
        }
        Checkpoint { version: CHECKPOINT_VERSION, meta, arrays }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<TrainedModel> {
        let pos = ck.array("cloud.positions")?;
        let n = pos.shape.first().copied().unwrap_or(0) as usize;
        if n == 0 {
            return Err(Error::ShapeMismatch("checkpoint cloud is empty".into()));
        }
        let to_vec3 = |a: &NamedArray| -> Vec<Vec3> {
            a.data.chunks_exact(3).map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect()
        };
        let positions = to_vec3(pos);
        let log_scales = to_vec3(ck.array("cloud.log_scales")?);
        let rotations: Vec<Quat> = ck
            .array("cloud.rotations")?
            .data
            .chunks_exact(4)
            .map(|c| Quat::new(c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64))
            .collect();
        let opacity_logits = ck.array("cloud.opacity_logits")?.to_f64();
        let colors = to_vec3(ck.array("cloud.colors")?);
        if ck.meta.labels.len() != n {
            return Err(Error::ShapeMismatch("label count disagrees with cloud".into()));
        }
        let cloud = GaussianCloud {
            positions,
            log_scales,
            rotations,
            opacity_logits,
            colors,
            labels: ck.meta.labels.clone(),
        };
        cloud.validate()?;

        let stage1 = match (&ck.meta.grid3d, &ck.meta.stage1_widths) {
            (Some(g), Some(w)) => Some(Stage1Model {
                encoder: load_grid(ck, "stage1.grid", g)?,
                feature_mlp: load_mlp(ck, "stage1.feature_mlp", &w.feature)?,
                motion_head: load_mlp(ck, "stage1.motion_head", &w.head)?,
            }),
            _ => None,
        };
        let stage2 = match (&ck.meta.grid4d, &ck.meta.stage2_widths) {
            (Some(g), Some(w)) => Some(Stage2Model {
                encoder: load_grid(ck, "stage2.grid", g)?,
                feature_mlp: load_mlp(ck, "stage2.feature_mlp", &w.feature)?,
                position_head: load_mlp(ck, "stage2.position_head", &w.position_head)?,
                rotation_head: load_mlp(ck, "stage2.rotation_head", &w.rotation_head)?,
                scale_head: load_mlp(ck, "stage2.scale_head", &w.scale_head)?,
            }),
            _ => None,
        };
        Ok(TrainedModel {
            cloud,
            stage1,
            stage2,
            bbox: ck.meta.bbox,
            background: ck.meta.background,
            iterations: ck.meta.iterations,
        })
    }

    /// Deform the dynamic subset to time t (identity when no stage-2 field
    /// is present) and return the cloud to be rendered.
    pub fn cloud_at_time(&self, t: f64) -> Result<GaussianCloud> {
        let Some(s2) = &self.stage2 else {
            return Ok(self.cloud.clone());
        };
        let norm = self.normalizer();
        let dyn_idx = self.cloud.dynamic_indices();
        let mut deltas = Vec::with_capacity(dyn_idx.len());
        for &i in &dyn_idx {
            let x = SpaceTimePoint { position: norm.to_unit(self.cloud.positions[i]).clamp01(), time: t };
            deltas.push(s2.stage2_delta(&x)?);
        }
        apply_deformation(&self.cloud, &dyn_idx, &deltas, norm.extent)
    }

    pub fn render_at(&self, cam: &Camera, t: f64, threads: usize) -> Result<RenderedImage> {
        let cloud = self.cloud_at_time(t)?;
        render(&cloud, cam, &RenderOptions { background: self.background, threads })
    }
}
