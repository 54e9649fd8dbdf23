//! Scene directory serialization: `meta.json` plus P6 PPM frames.

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::scene::{Aabb, Camera, GroundTruth, Image, SceneDataset, SceneView};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const SCENE_FORMAT_VERSION: u32 = 1;

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut buf = Vec::with_capacity(img.data.len() + 32);
    write!(buf, "P6\n{} {}\n255\n", img.width, img.height)?;
    buf.extend_from_slice(&img.data);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    parse_ppm(&bytes)
}

fn ppm_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b' ' | b'\t' | b'\r' | b'\n' => *pos += 1,
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::MalformedHeader("truncated PPM header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_ppm(bytes: &[u8]) -> Result<Image> {
    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // '#' comments allowed, then a single whitespace byte before the payload.
    let mut pos = 0usize;
    let magic = ppm_token(bytes, &mut pos)?;
    if magic != "P6" {
        return Err(Error::MalformedHeader(format!("expected P6, got {magic}")));
    }
    let width: u32 = ppm_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::MalformedHeader("bad width".into()))?;
    let height: u32 = ppm_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::MalformedHeader("bad height".into()))?;
    let maxval: u32 = ppm_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::MalformedHeader("bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::MalformedHeader(format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace separating header from payload
    let need = (width as usize) * (height as usize) * 3;
    if bytes.len() < pos + need {
        return Err(Error::UnexpectedEof);
    }
    Ok(Image { width, height, data: bytes[pos..pos + need].to_vec() })
}

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    version: u32,
    width: u32,
    height: u32,
    bbox: Aabb,
    background: Vec3,
    views: Vec<ViewMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<GroundTruth>,
}

#[derive(Serialize, Deserialize)]
struct ViewMeta {
    view_id: u32,
    time: f64,
    held_out: bool,
    camera: Camera,
    frame: String,
}

fn frame_name(view_id: u32, frame_idx: usize) -> String {
    format!("frames/{:03}_{:03}.ppm", view_id, frame_idx)
}

pub fn save_scene(dataset: &SceneDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir.join("frames"))?;
    let mut views = Vec::with_capacity(dataset.views.len());
    for (idx, v) in dataset.views.iter().enumerate() {
        let frame = frame_name(v.view_id, idx);
        write_ppm(&dir.join(&frame), &v.image)?;
        views.push(ViewMeta {
            view_id: v.view_id,
            time: v.time,
            held_out: v.held_out,
            camera: v.camera.clone(),
            frame,
        });
    }
    let meta = SceneMeta {
        version: SCENE_FORMAT_VERSION,
        width: dataset.views[0].image.width,
        height: dataset.views[0].image.height,
        bbox: dataset.bbox,
        background: dataset.background,
        views,
        ground_truth: dataset.ground_truth.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    // Ground-truth labels are also exported standalone for visualization tools.
    if let Some(gt) = &dataset.ground_truth {
        fs::write(dir.join("labels.json"), serde_json::to_string(&gt.cloud.labels)?)?;
    }
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<SceneDataset> {
    let meta_raw = fs::read_to_string(dir.join("meta.json"))?;
    let meta: SceneMeta = serde_json::from_str(&meta_raw)?;
    if meta.version != SCENE_FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: meta.version, expected: SCENE_FORMAT_VERSION });
    }
    if meta.views.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut views = Vec::with_capacity(meta.views.len());
    for vm in meta.views {
        let image = read_ppm(&dir.join(&vm.frame))?;
        if image.width != meta.width || image.height != meta.height {
            return Err(Error::DimensionMismatch(format!(
                "{} is {}x{}, metadata says {}x{}",
                vm.frame, image.width, image.height, meta.width, meta.height
            )));
        }
        views.push(SceneView {
            view_id: vm.view_id,
            time: vm.time,
            held_out: vm.held_out,
            camera: vm.camera,
            image,
        });
    }
    let dataset = SceneDataset {
        views,
        bbox: meta.bbox,
        background: meta.background,
        ground_truth: meta.ground_truth,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Quat;
    use crate::scene::{GaussianCloud, Label};
    use crate::scene::TrajectorySpec;

    fn tiny_dataset() -> SceneDataset {
        let cam = Camera::look_at(
            Vec3::new(0.0, 0.0, -4.0),
            Vec3::ZERO,
            Vec3::new(0.0, 1.0, 0.0),
            80.0,
            8,
            8,
            0.1,
        );
        let mut img = Image::new(8, 8);
        for (i, b) in img.data.iter_mut().enumerate() {
            *b = (i % 251) as u8;
        }
        let cloud = GaussianCloud {
            positions: vec![Vec3::new(0.1, 0.0, 0.0), Vec3::new(-0.2, 0.1, 0.3)],
            log_scales: vec![Vec3::splat(-2.0); 2],
            rotations: vec![Quat::IDENTITY; 2],
            opacity_logits: vec![1.0, 0.5],
            colors: vec![Vec3::new(0.9, 0.1, 0.1), Vec3::new(0.2, 0.8, 0.3)],
            labels: vec![Label::Static, Label::Dynamic],
        };
        SceneDataset {
            views: vec![
                SceneView { view_id: 0, time: 0.0, held_out: false, camera: cam.clone(), image: img.clone() },
                SceneView { view_id: 1, time: 1.0, held_out: true, camera: cam, image: img },
            ],
            bbox: Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0)),
            background: Vec3::ZERO,
            ground_truth: Some(GroundTruth {
                cloud,
                trajectories: vec![TrajectorySpec::Static, TrajectorySpec::Linear {
                    velocity: Vec3::new(0.1, 0.0, 0.0),
                }],
            }),
        }
    }

    #[test]
    fn ppm_round_trip() {
        let dir = std::env::temp_dir().join("dash_ppm_test");
        fs::create_dir_all(&dir).unwrap();
        let mut img = Image::new(5, 3);
        for (i, b) in img.data.iter_mut().enumerate() {
            *b = (i * 7 % 256) as u8;
        }
        let p = dir.join("x.ppm");
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn scene_round_trip_bit_exact() {
        let dir = std::env::temp_dir().join("dash_scene_roundtrip");
        let _ = fs::remove_dir_all(&dir);
        let ds = tiny_dataset();
        save_scene(&ds, &dir).unwrap();
        let back = load_scene(&dir).unwrap();
        assert_eq!(ds, back);
        // byte-level stability of a second save
        let dir2 = std::env::temp_dir().join("dash_scene_roundtrip2");
        let _ = fs::remove_dir_all(&dir2);
        save_scene(&back, &dir2).unwrap();
        let a = fs::read(dir.join("meta.json")).unwrap();
        let b = fs::read(dir2.join("meta.json")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_rejected() {
        let dir = std::env::temp_dir().join("dash_scene_empty");
        let ds = SceneDataset {
            views: vec![],
            bbox: Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0)),
            background: Vec3::ZERO,
            ground_truth: None,
        };
        match save_scene(&ds, &dir) {
            Err(Error::EmptyDataset) => {}
            other => panic!("expected empty dataset error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_detected() {
        let dir = std::env::temp_dir().join("dash_scene_dimmismatch");
        let _ = fs::remove_dir_all(&dir);
        let ds = tiny_dataset();
        save_scene(&ds, &dir).unwrap();
        // overwrite one frame with different dimensions
        let small = Image::new(4, 4);
        write_ppm(&dir.join("frames/000_000.ppm"), &small).unwrap();
        match load_scene(&dir) {
            Err(Error::DimensionMismatch(_)) => {}
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_detected() {
        let dir = std::env::temp_dir().join("dash_scene_version");
        let _ = fs::remove_dir_all(&dir);
        save_scene(&tiny_dataset(), &dir).unwrap();
        let meta = fs::read_to_string(dir.join("meta.json")).unwrap();
        fs::write(dir.join("meta.json"), meta.replace("\"version\": 1", "\"version\": 99")).unwrap();
        match load_scene(&dir) {
            Err(Error::VersionMismatch { found: 99, expected: 1 }) => {}
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn malformed_ppm_header() {
        let dir = std::env::temp_dir().join("dash_ppm_bad");
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.ppm");
        fs::write(&p, b"P5\n2 2\n255\n0000").unwrap();
        match read_ppm(&p) {
            Err(Error::MalformedHeader(_)) => {}
            other => panic!("expected malformed header, got {other:?}"),
        }
        fs::write(&p, b"P6\n9 9\n255\n00").unwrap();
        match read_ppm(&p) {
            Err(Error::UnexpectedEof) => {}
            other => panic!("expected EOF error, got {other:?}"),
        }
    }
}
