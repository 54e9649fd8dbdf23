//! Differentiable pinhole splatting renderer.
//!
//! Forward: project every Gaussian to the camera plane, depth-sort, and
//! alpha-blend per pixel with exact per-pixel evaluation inside each
//! splat's 3-sigma ellipse. Backward: exact reverse-mode gradients for all
//! five Gaussian parameter groups; gradients through the depth ordering are
//! ignored (standard splatting practice).

use crate::error::{Error, Result};
use crate::math::{sigmoid, Mat2x3, Mat3, Quat, Sym2, Vec3};
use crate::parallel::parallel_chunks;
use crate::scene::{covariance_from, Camera, GaussianCloud};

/// Diagonal floor added to the camera-plane covariance (anti-aliasing
/// convention, in squared pixels).
pub const COV_PIXEL_FLOOR: f64 = 0.3;
/// Alpha ceiling per contribution.
pub const ALPHA_MAX: f64 = 0.99;
/// Contributions below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Blending stops once transmittance drops below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Mahalanobis-squared cutoff: 3 sigma.
pub const ELLIPSE_CUTOFF: f64 = 9.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub background: Vec3,
    /// Worker count; 0 defers to DASH_THREADS (default 1).
    pub threads: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { background: Vec3::ZERO, threads: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct RenderedImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<Vec3>,
    /// Per-pixel accumulated alpha (1 - final transmittance).
    pub alpha: Vec<f64>,
    /// Splats dropped because their floored covariance was still singular.
    pub skipped_singular: usize,
}

impl RenderedImage {
    pub fn to_image(&self) -> crate::scene::Image {
        let flat: Vec<f64> = self
            .pixels
            .iter()
            .flat_map(|p| [p.x, p.y, p.z])
            .collect();
        crate::scene::Image::from_f64(self.width, self.height, &flat)
    }
}

/// A Gaussian after projection to the camera plane.
#[derive(Clone, Debug)]
pub struct ProjectedGaussian {
    pub index: usize,
    pub mean: [f64; 2],
    pub cov: Sym2,
    pub inv_cov: Sym2,
    pub depth: f64,
    pub opacity: f64,
    pub color: Vec3,
    // cached intermediates for the backward pass
    pub mean_cam: Vec3,
    pub cov_cam: Mat3,
    bbox: [i64; 4],
}

/// Sigma' = J (W Sigma W^T) J^T for an arbitrary Jacobian (the unit test
/// exercises the truncation Jacobian; the renderer the perspective one).
pub fn camera_plane_covariance(cov_world: Mat3, view_rot: Mat3, j: Mat2x3) -> Sym2 {
    let cov_cam = view_rot * cov_world * view_rot.transpose();
    j.sandwich(cov_cam)
}

fn perspective_jacobian(cam: &Camera, mean_cam: Vec3) -> Mat2x3 {
    let z = mean_cam.z;
    let z2 = z * z;
    Mat2x3::from_rows([
        [cam.fx / z, 0.0, -cam.fx * mean_cam.x / z2],
        [0.0, cam.fy / z, -cam.fy * mean_cam.y / z2],
    ])
}

/// Project one Gaussian; `None` when culled (behind the near plane) or the
/// floored covariance is still singular.
pub fn project(
    index: usize,
    position: Vec3,
    log_scale: Vec3,
    rotation: Quat,
    opacity_logit: f64,
    color: Vec3,
    cam: &Camera,
) -> Result<Option<ProjectedGaussian>> {
    let mean_cam = cam.world_to_camera(position);
    if !mean_cam.is_finite() {
        return Err(Error::InvalidParameter("non-finite position in renderer".into()));
    }
    if mean_cam.z <= cam.near {
        return Ok(None);
    }
    let mean = [
        cam.fx * mean_cam.x / mean_cam.z + cam.cx,
        cam.fy * mean_cam.y / mean_cam.z + cam.cy,
    ];
    let scale = log_scale.map(f64::exp);
    let cov_world = covariance_from(scale, rotation)?;
    let cov_cam = cam.rotation * cov_world * cam.rotation.transpose();
    let j = perspective_jacobian(cam, mean_cam);
    let mut cov = j.sandwich(cov_cam);
    cov.xx += COV_PIXEL_FLOOR;
    cov.yy += COV_PIXEL_FLOOR;
    let Some(inv_cov) = cov.inverse() else {
        return Ok(None);
    };
    let radius = 3.0 * cov.max_eigenvalue().max(0.0).sqrt();
    let bbox = [
        (mean[0] - radius).floor() as i64,
        (mean[0] + radius).ceil() as i64,
        (mean[1] - radius).floor() as i64,
        (mean[1] + radius).ceil() as i64,
    ];
    Ok(Some(ProjectedGaussian {
        index,
        mean,
        cov,
        inv_cov,
        depth: mean_cam.z,
        opacity: sigmoid(opacity_logit),
        color,
        mean_cam,
        cov_cam,
        bbox,
    }))
}

/// Alpha contribution at a (continuous) pixel position: the opacity-scaled
/// Gaussian falloff, ceilinged at 0.99, zero outside the 3-sigma ellipse or
/// below the 1/255 cutoff.
pub fn gaussian_weight(g: &ProjectedGaussian, pixel: [f64; 2]) -> f64 {
    let d = [pixel[0] - g.mean[0], pixel[1] - g.mean[1]];
    let md = g.inv_cov.mul_vec(d);
    let q = d[0] * md[0] + d[1] * md[1];
    if q > ELLIPSE_CUTOFF || q < 0.0 {
        return 0.0;
    }
    let alpha = (g.opacity * (-0.5 * q).exp()).min(ALPHA_MAX);
    if alpha < ALPHA_MIN {
        0.0
    } else {
        alpha
    }
}

/// Front-to-back blend of depth-ordered (alpha, color) contributions with
/// early termination, background composited with the leftover transmittance.
pub fn composite(contributions: &[(f64, Vec3)], background: Vec3) -> (Vec3, f64) {
    let mut color = Vec3::ZERO;
    let mut transmittance = 1.0;
    for &(alpha, c) in contributions {
        if transmittance < TRANSMITTANCE_MIN {
            break;
        }
        color += c * (alpha * transmittance);
        transmittance *= 1.0 - alpha;
    }
    (color + background * transmittance, 1.0 - transmittance)
}

/// Projection plus a per-pixel index of covering splats, in depth order.
struct Prepared {
    splats: Vec<ProjectedGaussian>,
    offsets: Vec<u32>,
    items: Vec<u32>,
    skipped: usize,
}

fn prepare(cloud: &GaussianCloud, cam: &Camera) -> Result<Prepared> {
    if cloud.is_empty() {
        return Err(Error::InvalidParameter("cannot render an empty cloud".into()));
    }
    let mut splats = Vec::with_capacity(cloud.len());
    let mut skipped = 0usize;
    for i in 0..cloud.len() {
        let near_ok = project(
            i,
            cloud.positions[i],
            cloud.log_scales[i],
            cloud.rotations[i],
            cloud.opacity_logits[i],
            cloud.colors[i],
            cam,
        )?;
        match near_ok {
            Some(p) => splats.push(p),
            None => skipped += 1,
        }
    }
    // global depth order; ties broken by storage index for determinism
    splats.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .expect("depths are finite")
            .then(a.index.cmp(&b.index))
    });

    let (w, h) = (cam.width as i64, cam.height as i64);
    let npix = (w * h) as usize;
    let mut counts = vec![0u32; npix];
    let clip = |s: &ProjectedGaussian| {
        let x0 = s.bbox[0].max(0);
        let x1 = s.bbox[1].min(w - 1);
        let y0 = s.bbox[2].max(0);
        let y1 = s.bbox[3].min(h - 1);
        (x0, x1, y0, y1)
    };
    for s in &splats {
        let (x0, x1, y0, y1) = clip(s);
        for y in y0..=y1 {
            for x in x0..=x1 {
                counts[(y * w + x) as usize] += 1;
            }
        }
    }
    let mut offsets = vec![0u32; npix + 1];
    for i in 0..npix {
        offsets[i + 1] = offsets[i] + counts[i];
    }
    let mut cursor = offsets[..npix].to_vec();
    let mut items = vec![0u32; offsets[npix] as usize];
    for (si, s) in splats.iter().enumerate() {
        let (x0, x1, y0, y1) = clip(s);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = (y * w + x) as usize;
                items[cursor[p] as usize] = si as u32;
                cursor[p] += 1;
            }
        }
    }
    Ok(Prepared { splats, offsets, items, skipped })
}

fn shade_pixel(prep: &Prepared, px: usize, py: usize, width: usize, background: Vec3) -> (Vec3, f64) {
    let pixel = [px as f64 + 0.5, py as f64 + 0.5];
    let pid = py * width + px;
    let mut color = Vec3::ZERO;
    let mut transmittance = 1.0;
    for &si in &prep.items[prep.offsets[pid] as usize..prep.offsets[pid + 1] as usize] {
        if transmittance < TRANSMITTANCE_MIN {
            break;
        }
        let s = &prep.splats[si as usize];
        let alpha = gaussian_weight(s, pixel);
        if alpha <= 0.0 {
            continue;
        }
        color += s.color * (alpha * transmittance);
        transmittance *= 1.0 - alpha;
    }
    (color + background * transmittance, 1.0 - transmittance)
}

/// Forward render.
pub fn render(cloud: &GaussianCloud, cam: &Camera, opts: &RenderOptions) -> Result<RenderedImage> {
    let prep = prepare(cloud, cam)?;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let rows = parallel_chunks(h, crate::parallel::resolve_threads(opts.threads), |range| {
        let mut out = Vec::with_capacity(range.len() * w);
        for y in range {
            for x in 0..w {
                out.push(shade_pixel(&prep, x, y, w, opts.background));
            }
        }
        out
    });
    let mut pixels = Vec::with_capacity(w * h);
    let mut alpha = Vec::with_capacity(w * h);
    for chunk in rows {
        for (c, a) in chunk {
            pixels.push(c.clamp01());
            alpha.push(a);
        }
    }
    Ok(RenderedImage { width: cam.width, height: cam.height, pixels, alpha, skipped_singular: prep.skipped })
}

/// Gradients for every Gaussian parameter group, aligned with the cloud.
#[derive(Clone, Debug)]
pub struct CloudGrads {
    pub positions: Vec<Vec3>,
    pub log_scales: Vec<Vec3>,
    pub rotations: Vec<Quat>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<Vec3>,
}

impl CloudGrads {
    pub fn zeros(n: usize) -> CloudGrads {
        CloudGrads {
            positions: vec![Vec3::ZERO; n],
            log_scales: vec![Vec3::ZERO; n],
            rotations: vec![Quat::new(0.0, 0.0, 0.0, 0.0); n],
            opacity_logits: vec![0.0; n],
            colors: vec![Vec3::ZERO; n],
        }
    }
}

/// Per-splat screen-space gradient accumulators.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    d_mean: [f64; 2],
    d_cov: Sym2,
    d_opacity: f64,
    d_color: Vec3,
}

/// Forward image plus exact gradients of `sum(upstream . pixel)` with
/// respect to all Gaussian parameters.
pub fn render_backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    opts: &RenderOptions,
    upstream: &[Vec3],
) -> Result<(RenderedImage, CloudGrads)> {
    let (w, h) = (cam.width as usize, cam.height as usize);
    if upstream.len() != w * h {
        return Err(Error::ShapeMismatch(format!(
            "upstream has {} pixels, image is {}x{}",
            upstream.len(),
            w,
            h
        )));
    }
    let prep = prepare(cloud, cam)?;
    let nsplat = prep.splats.len();

    let threads = crate::parallel::resolve_threads(opts.threads);
    let results = parallel_chunks(h, threads, |range| {
        let mut pixels = Vec::with_capacity(range.len() * w);
        let mut sg = vec![SplatGrad::default(); nsplat];
        let mut contribs: Vec<(u32, f64, f64)> = Vec::new(); // (splat, alpha, T before)
        for y in range {
            for x in 0..w {
                let pid = y * w + x;
                let pixel = [x as f64 + 0.5, y as f64 + 0.5];
                let up = upstream[pid];
                contribs.clear();
                let mut color = Vec3::ZERO;
                let mut transmittance = 1.0;
                for &si in &prep.items[prep.offsets[pid] as usize..prep.offsets[pid + 1] as usize] {
                    if transmittance < TRANSMITTANCE_MIN {
                        break;
                    }
                    let s = &prep.splats[si as usize];
                    let alpha = gaussian_weight(s, pixel);
                    if alpha <= 0.0 {
                        continue;
                    }
                    contribs.push((si, alpha, transmittance));
                    color += s.color * (alpha * transmittance);
                    transmittance *= 1.0 - alpha;
                }
                pixels.push((color + opts.background * transmittance, 1.0 - transmittance));

                // reverse walk: suffix color mass S starts at the background
                let mut suffix = opts.background * transmittance;
                for &(si, alpha, t_before) in contribs.iter().rev() {
                    let s = &prep.splats[si as usize];
                    let g = &mut sg[si as usize];
                    g.d_color += up * (alpha * t_before);
                    // dC/dalpha = c * T - S / (1 - alpha)
                    let keep = 1.0 - alpha;
                    let d_alpha = up.dot(s.color * t_before - suffix / keep);
                    suffix += s.color * (alpha * t_before);

                    // alpha = min(0.99, opacity * exp(-q/2))
                    let d = [pixel[0] - s.mean[0], pixel[1] - s.mean[1]];
                    let md = s.inv_cov.mul_vec(d);
                    let q = d[0] * md[0] + d[1] * md[1];
                    let falloff = (-0.5 * q).exp();
                    if s.opacity * falloff >= ALPHA_MAX {
                        continue; // ceiling active: zero local derivative
                    }
                    g.d_opacity += d_alpha * falloff;
                    let d_q = d_alpha * s.opacity * falloff * -0.5;
                    // q = d^T M d: dq/dmean = -2 M d, dq/dSigma' = -(Md)(Md)^T
                    g.d_mean[0] += d_q * -2.0 * md[0];
                    g.d_mean[1] += d_q * -2.0 * md[1];
                    g.d_cov.xx += d_q * -(md[0] * md[0]);
                    g.d_cov.xy += d_q * -(md[0] * md[1]);
                    g.d_cov.yy += d_q * -(md[1] * md[1]);
                }
            }
        }
        (pixels, sg)
    });

    // deterministic merge in chunk order
    let mut pixels = Vec::with_capacity(w * h);
    let mut alpha = Vec::with_capacity(w * h);
    let mut sg_total = vec![SplatGrad::default(); nsplat];
    for (chunk_pixels, chunk_sg) in results {
        for (c, a) in chunk_pixels {
            pixels.push(c.clamp01());
            alpha.push(a);
        }
        for (tot, part) in sg_total.iter_mut().zip(&chunk_sg) {
            tot.d_mean[0] += part.d_mean[0];
            tot.d_mean[1] += part.d_mean[1];
            tot.d_cov.xx += part.d_cov.xx;
            tot.d_cov.xy += part.d_cov.xy;
            tot.d_cov.yy += part.d_cov.yy;
            tot.d_opacity += part.d_opacity;
            tot.d_color += part.d_color;
        }
    }

    // screen-space gradients back to world parameters
    let mut grads = CloudGrads::zeros(cloud.len());
    for (si, s) in prep.splats.iter().enumerate() {
        let g = &sg_total[si];
        let i = s.index;
        grads.colors[i] += g.d_color;
        let sig = s.opacity;
        grads.opacity_logits[i] += g.d_opacity * sig * (1.0 - sig);

        let (x, y, z) = (s.mean_cam.x, s.mean_cam.y, s.mean_cam.z);
        let z2 = z * z;
        let j = perspective_jacobian(cam, s.mean_cam);
        // mean2d path: d_mean_cam += J^T d_mean
        let mut d_mean_cam = Vec3::new(
            j.m[0][0] * g.d_mean[0],
            j.m[1][1] * g.d_mean[1],
            j.m[0][2] * g.d_mean[0] + j.m[1][2] * g.d_mean[1],
        );
        // covariance path: Sigma' = J V J^T (+ constant floor), V = W Sigma W^T
        let g2 = Mat3::from_rows([
            [g.d_cov.xx, g.d_cov.xy, 0.0],
            [g.d_cov.xy, g.d_cov.yy, 0.0],
            [0.0, 0.0, 0.0],
        ]);
        let jfull = Mat3::from_rows([j.m[0], j.m[1], [0.0, 0.0, 0.0]]);
        let d_v = jfull.transpose() * g2 * jfull;
        // dJ = 2 G2 J V (G2, V symmetric)
        let d_j = (g2 * jfull * s.cov_cam).scale(2.0);
        // J's own dependence on the camera-space mean
        d_mean_cam.x += d_j.m[0][2] * (-cam.fx / z2);
        d_mean_cam.y += d_j.m[1][2] * (-cam.fy / z2);
        d_mean_cam.z += d_j.m[0][0] * (-cam.fx / z2)
            + d_j.m[1][1] * (-cam.fy / z2)
            + d_j.m[0][2] * (2.0 * cam.fx * x / (z2 * z))
            + d_j.m[1][2] * (2.0 * cam.fy * y / (z2 * z));
        grads.positions[i] += cam.rotation.transpose().mul_vec(d_mean_cam);

        // world covariance: Sigma = R D R^T with D = diag(exp(2 ls))
        let d_sigma = cam.rotation.transpose() * d_v * cam.rotation;
        let unit = cloud.rotations[i].normalized();
        let rot = unit.to_rotation();
        let rt_ds_r = rot.transpose() * d_sigma * rot;
        let ls = cloud.log_scales[i];
        grads.log_scales[i] += Vec3::new(
            rt_ds_r.m[0][0] * 2.0 * (2.0 * ls.x).exp(),
            rt_ds_r.m[1][1] * 2.0 * (2.0 * ls.y).exp(),
            rt_ds_r.m[2][2] * 2.0 * (2.0 * ls.z).exp(),
        );
        let d_mat = Mat3::diag(Vec3::new((2.0 * ls.x).exp(), (2.0 * ls.y).exp(), (2.0 * ls.z).exp()));
        let d_rot = (d_sigma * rot * d_mat).scale(2.0);
        let jac = Quat::rotation_jacobian(unit);
        let d_unit = [
            d_rot.ddot(jac[0]),
            d_rot.ddot(jac[1]),
            d_rot.ddot(jac[2]),
            d_rot.ddot(jac[3]),
        ];
        // through normalization: dq = (I - u u^T) / |q| * d_unit
        let raw = cloud.rotations[i];
        let norm = raw.norm().max(1e-300);
        let u = unit.to_array();
        let dot: f64 = (0..4).map(|k| u[k] * d_unit[k]).sum();
        let mut dq = [0.0; 4];
        for k in 0..4 {
            dq[k] = (d_unit[k] - u[k] * dot) / norm;
        }
        grads.rotations[i] = grads.rotations[i] + Quat::from_array(dq);
    }

    Ok((
        RenderedImage { width: cam.width, height: cam.height, pixels, alpha, skipped_singular: prep.skipped },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::scene::Label;

    fn test_camera() -> Camera {
        Camera::look_at(
            Vec3::new(0.0, 0.0, -5.0),
            Vec3::ZERO,
            Vec3::new(0.0, 1.0, 0.0),
            60.0,
            32,
            32,
            0.1,
        )
    }

    fn single_gaussian_cloud() -> GaussianCloud {
        GaussianCloud {
            positions: vec![Vec3::ZERO],
            log_scales: vec![Vec3::splat(-1.2)],
            rotations: vec![Quat::new(0.9, 0.1, -0.2, 0.3)],
            opacity_logits: vec![1.2],
            colors: vec![Vec3::new(0.8, 0.3, 0.1)],
            labels: vec![Label::Static],
        }
    }

    #[test]
    fn truncation_jacobian_recovers_covariance_block() {
        // W = identity, orthographic-test mode: Sigma' is the top-left block
        let sigma = covariance_from(Vec3::new(1.5, 0.7, 0.9), Quat::new(0.8, 0.2, -0.4, 0.1)).unwrap();
        let j = Mat2x3::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let out = camera_plane_covariance(sigma, Mat3::IDENTITY, j);
        assert!((out.xx - sigma.m[0][0]).abs() < 1e-12);
        assert!((out.xy - sigma.m[0][1]).abs() < 1e-12);
        assert!((out.yy - sigma.m[1][1]).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = test_camera();
        let p = project(
            0,
            Vec3::new(0.0, 0.0, -20.0),
            Vec3::splat(-1.0),
            Quat::IDENTITY,
            0.5,
            Vec3::ONE,
            &cam,
        )
        .unwrap();
        assert!(p.is_none());
    }

    #[test]
    fn projection_matches_reference_composition() {
        // independent straight-line composition of J W Sigma W^T J^T
        let cam = test_camera();
        let mut rng = Rng::seed_from(42);
        for _ in 0..50 {
            let pos = Vec3::new(rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0));
            let ls = Vec3::new(rng.range(-2.5, -0.5), rng.range(-2.5, -0.5), rng.range(-2.5, -0.5));
            let q = Quat::new(rng.normal(), rng.normal(), rng.normal(), rng.normal());
            let q = if q.norm() < 1e-6 { Quat::IDENTITY } else { q };
            let got = project(0, pos, ls, q, 0.3, Vec3::ONE, &cam).unwrap().unwrap();

            // reference: scalar loops, no shared helpers
            let m_cam = cam.rotation.mul_vec(pos) + cam.translation;
            let sigma = covariance_from(ls.map(f64::exp), q).unwrap();
            let mut v = [[0.0f64; 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    let mut acc = 0.0;
                    for r in 0..3 {
                        for c in 0..3 {
                            acc += cam.rotation.m[a][r] * sigma.m[r][c] * cam.rotation.m[b][c];
                        }
                    }
                    v[a][b] = acc;
                }
            }
            let (zx, zy, zz) = (m_cam.x, m_cam.y, m_cam.z);
            let jr = [
                [cam.fx / zz, 0.0, -cam.fx * zx / (zz * zz)],
                [0.0, cam.fy / zz, -cam.fy * zy / (zz * zz)],
            ];
            let mut want = [[0.0f64; 2]; 2];
            for a in 0..2 {
                for b in 0..2 {
                    let mut acc = 0.0;
                    for r in 0..3 {
                        for c in 0..3 {
                            acc += jr[a][r] * v[r][c] * jr[b][c];
                        }
                    }
                    want[a][b] = acc;
                }
            }
            let rel = |g: f64, w: f64| (g - w).abs() / w.abs().max(1e-9);
            assert!(rel(got.cov.xx - COV_PIXEL_FLOOR, want[0][0]) < 1e-5);
            assert!(rel(got.cov.xy, want[0][1]) < 1e-5 || (got.cov.xy - want[0][1]).abs() < 1e-9);
            assert!(rel(got.cov.yy - COV_PIXEL_FLOOR, want[1][1]) < 1e-5);
        }
    }

    #[test]
    fn weight_at_mean_is_opacity() {
        let g = ProjectedGaussian {
            index: 0,
            mean: [10.0, 12.0],
            cov: Sym2::new(1.0, 0.0, 1.0),
            inv_cov: Sym2::new(1.0, 0.0, 1.0),
            depth: 1.0,
            opacity: 0.7,
            color: Vec3::ONE,
            mean_cam: Vec3::new(0.0, 0.0, 1.0),
            cov_cam: Mat3::IDENTITY,
            bbox: [0, 0, 0, 0],
        };
        assert_eq!(gaussian_weight(&g, [10.0, 12.0]), 0.7);
        let mut strong = g.clone();
        strong.opacity = 1.0;
        assert_eq!(gaussian_weight(&strong, [10.0, 12.0]), ALPHA_MAX);
        // unit offset on an isotropic unit covariance: exp(-1/2)
        let v = gaussian_weight(&strong, [11.0, 12.0]);
        assert!((v - (-0.5f64).exp()).abs() < 1e-12);
        let mut clear = g;
        clear.opacity = 0.0;
        assert_eq!(gaussian_weight(&clear, [10.0, 12.0]), 0.0);
    }

    #[test]
    fn composite_cases() {
        let bg = Vec3::ZERO;
        let (c, a) = composite(&[(0.5, Vec3::new(1.0, 0.0, 0.0))], bg);
        assert!((c - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-12);
        assert!((a - 0.5).abs() < 1e-12);

        let (c, _) = composite(
            &[(0.5, Vec3::new(1.0, 0.0, 0.0)), (0.5, Vec3::new(0.0, 1.0, 0.0))],
            bg,
        );
        assert!((c - Vec3::new(0.5, 0.25, 0.0)).norm() < 1e-12);

        let (c, a) = composite(&[], Vec3::new(0.2, 0.3, 0.4));
        assert_eq!(c, Vec3::new(0.2, 0.3, 0.4));
        assert_eq!(a, 0.0);
    }

    #[test]
    fn transparent_cloud_renders_background() {
        let mut cloud = single_gaussian_cloud();
        cloud.opacity_logits[0] = -40.0;
        let cam = test_camera();
        let opts = RenderOptions { background: Vec3::new(0.1, 0.2, 0.3), threads: 1 };
        let img = render(&cloud, &cam, &opts).unwrap();
        for p in &img.pixels {
            assert!((*p - opts.background).norm() < 1e-9);
        }
        let up = vec![Vec3::ONE; img.pixels.len()];
        let (_, grads) = render_backward(&cloud, &cam, &opts, &up).unwrap();
        assert!((grads.positions[0]).norm() < 1e-12, "no visible contribution, no gradient");
    }

    #[test]
    fn storage_order_invariance() {
        // distinct depths, permuted storage: identical image
        let cloud = GaussianCloud {
            positions: vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.1, 0.05, -1.0), Vec3::new(-0.2, 0.0, 1.0)],
            log_scales: vec![Vec3::splat(-1.0); 3],
            rotations: vec![Quat::IDENTITY; 3],
            opacity_logits: vec![1.0, 0.5, 0.8],
            colors: vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0)],
            labels: vec![Label::Static; 3],
        };
        let perm = GaussianCloud {
            positions: vec![cloud.positions[2], cloud.positions[0], cloud.positions[1]],
            log_scales: vec![cloud.log_scales[2], cloud.log_scales[0], cloud.log_scales[1]],
            rotations: vec![cloud.rotations[2], cloud.rotations[0], cloud.rotations[1]],
            opacity_logits: vec![cloud.opacity_logits[2], cloud.opacity_logits[0], cloud.opacity_logits[1]],
            colors: vec![cloud.colors[2], cloud.colors[0], cloud.colors[1]],
            labels: vec![Label::Static; 3],
        };
        let cam = test_camera();
        let opts = RenderOptions::default();
        let a = render(&cloud, &cam, &opts).unwrap();
        let b = render(&perm, &cam, &opts).unwrap();
        for (p, q) in a.pixels.iter().zip(&b.pixels) {
            assert_eq!(p, q);
        }
    }

    #[test]
    fn transmittance_and_outputs_in_range() {
        let mut rng = Rng::seed_from(11);
        let n = 40;
        let cloud = GaussianCloud {
            positions: (0..n)
                .map(|_| Vec3::new(rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)))
                .collect(),
            log_scales: (0..n).map(|_| Vec3::splat(rng.range(-2.0, -0.5))).collect(),
            rotations: (0..n).map(|_| Quat::new(rng.normal(), rng.normal(), rng.normal(), rng.normal())).collect(),
            opacity_logits: (0..n).map(|_| rng.range(-2.0, 3.0)).collect(),
            colors: (0..n).map(|_| Vec3::new(rng.uniform(), rng.uniform(), rng.uniform())).collect(),
            labels: vec![Label::Static; n],
        };
        let cam = test_camera();
        let img = render(&cloud, &cam, &RenderOptions { background: Vec3::splat(0.5), threads: 1 }).unwrap();
        for (p, &a) in img.pixels.iter().zip(&img.alpha) {
            assert!((0.0..=1.0).contains(&a));
            for v in [p.x, p.y, p.z] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn render_parallel_matches_serial() {
        let mut rng = Rng::seed_from(13);
        let n = 25;
        let cloud = GaussianCloud {
            positions: (0..n)
                .map(|_| Vec3::new(rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)))
                .collect(),
            log_scales: (0..n).map(|_| Vec3::splat(rng.range(-2.0, -0.8))).collect(),
            rotations: vec![Quat::IDENTITY; n],
            opacity_logits: (0..n).map(|_| rng.range(-1.0, 2.0)).collect(),
            colors: (0..n).map(|_| Vec3::new(rng.uniform(), rng.uniform(), rng.uniform())).collect(),
            labels: vec![Label::Static; n],
        };
        let cam = test_camera();
        let up: Vec<Vec3> = (0..(32 * 32)).map(|_| Vec3::new(rng.normal(), rng.normal(), rng.normal())).collect();
        let serial = render_backward(&cloud, &cam, &RenderOptions { background: Vec3::ZERO, threads: 1 }, &up).unwrap();
        let par = render_backward(&cloud, &cam, &RenderOptions { background: Vec3::ZERO, threads: 4 }, &up).unwrap();
        for (p, q) in serial.0.pixels.iter().zip(&par.0.pixels) {
            assert_eq!(p, q, "forward must not depend on threads");
        }
        for i in 0..n {
            assert!((serial.1.positions[i] - par.1.positions[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        // one Gaussian, probe d(pixel)/d(parameter) against central FD
        let cloud = single_gaussian_cloud();
        let cam = test_camera();
        let opts = RenderOptions::default();
        let mut rng = Rng::seed_from(21);

        // random pixel-weighted loss
        let up: Vec<Vec3> = (0..(32 * 32))
            .map(|_| Vec3::new(rng.normal(), rng.normal(), rng.normal()))
            .collect();
        let loss = |c: &GaussianCloud| -> f64 {
            let img = render(c, &cam, &opts).unwrap();
            img.pixels.iter().zip(&up).map(|(p, u)| p.dot(*u)).sum()
        };
        let (_, grads) = render_backward(&cloud, &cam, &opts, &up).unwrap();
        let h = 1e-6;
        let rel_ok = |fd: f64, an: f64| {
            let denom = fd.abs().max(an.abs()).max(1e-3);
            (fd - an).abs() / denom < 1e-3
        };

        // position
        for axis in 0..3 {
            let mut cp = cloud.clone();
            let mut cm = cloud.clone();
            match axis {
                0 => {
                    cp.positions[0].x += h;
                    cm.positions[0].x -= h;
                }
                1 => {
                    cp.positions[0].y += h;
                    cm.positions[0].y -= h;
                }
                _ => {
                    cp.positions[0].z += h;
                    cm.positions[0].z -= h;
                }
            }
            let fd = (loss(&cp) - loss(&cm)) / (2.0 * h);
            let an = grads.positions[0].to_array()[axis];
            assert!(rel_ok(fd, an), "position axis {axis}: {fd} vs {an}");
        }
        // log-scale
        for axis in 0..3 {
            let mut cp = cloud.clone();
            let mut cm = cloud.clone();
            match axis {
                0 => {
                    cp.log_scales[0].x += h;
                    cm.log_scales[0].x -= h;
                }
                1 => {
                    cp.log_scales[0].y += h;
                    cm.log_scales[0].y -= h;
                }
                _ => {
                    cp.log_scales[0].z += h;
                    cm.log_scales[0].z -= h;
                }
            }
            let fd = (loss(&cp) - loss(&cm)) / (2.0 * h);
            let an = grads.log_scales[0].to_array()[axis];
            assert!(rel_ok(fd, an), "log-scale axis {axis}: {fd} vs {an}");
        }
        // rotation (raw quaternion components)
        for c in 0..4 {
            let mut cp = cloud.clone();
            let mut cm = cloud.clone();
            let mut qa = cloud.rotations[0].to_array();
            qa[c] += h;
            cp.rotations[0] = Quat::from_array(qa);
            qa[c] -= 2.0 * h;
            cm.rotations[0] = Quat::from_array(qa);
            let fd = (loss(&cp) - loss(&cm)) / (2.0 * h);
            let an = grads.rotations[0].to_array()[c];
            assert!(rel_ok(fd, an), "quat component {c}: {fd} vs {an}");
        }
        // opacity logit
        {
            let mut cp = cloud.clone();
            let mut cm = cloud.clone();
            cp.opacity_logits[0] += h;
            cm.opacity_logits[0] -= h;
            let fd = (loss(&cp) - loss(&cm)) / (2.0 * h);
            assert!(rel_ok(fd, grads.opacity_logits[0]), "opacity: {fd} vs {}", grads.opacity_logits[0]);
        }
        // color
        {
            let mut cp = cloud.clone();
            let mut cm = cloud.clone();
            cp.colors[0].y += h;
            cm.colors[0].y -= h;
            let fd = (loss(&cp) - loss(&cm)) / (2.0 * h);
            assert!(rel_ok(fd, grads.colors[0].y), "color: {fd} vs {}", grads.colors[0].y);
        }
    }

    #[test]
    fn backward_multi_gaussian_occlusion_gradients() {
        // two overlapping Gaussians at different depths; checks the
        // suffix-mass term through (1 - alpha)
        let cloud = GaussianCloud {
            positions: vec![Vec3::new(0.0, 0.0, -0.5), Vec3::new(0.05, 0.02, 0.5)],
            log_scales: vec![Vec3::splat(-1.3), Vec3::splat(-1.1)],
            rotations: vec![Quat::IDENTITY, Quat::new(0.8, 0.1, 0.2, -0.1)],
            opacity_logits: vec![0.8, 1.5],
            colors: vec![Vec3::new(0.9, 0.2, 0.1), Vec3::new(0.1, 0.8, 0.7)],
            labels: vec![Label::Static; 2],
        };
        let cam = test_camera();
        let opts = RenderOptions { background: Vec3::splat(0.25), threads: 1 };
        let mut rng = Rng::seed_from(33);
        let up: Vec<Vec3> = (0..(32 * 32))
            .map(|_| Vec3::new(rng.normal(), rng.normal(), rng.normal()))
            .collect();
        let loss = |c: &GaussianCloud| -> f64 {
            let img = render(c, &cam, &opts).unwrap();
            img.pixels.iter().zip(&up).map(|(p, u)| p.dot(*u)).sum()
        };
        let (_, grads) = render_backward(&cloud, &cam, &opts, &up).unwrap();
        let h = 1e-6;
        for gi in 0..2 {
            for axis in 0..3 {
                let mut cp = cloud.clone();
                let mut cm = cloud.clone();
                let mut pa = cloud.positions[gi].to_array();
                pa[axis] += h;
                cp.positions[gi] = Vec3::from_array(pa);
                pa[axis] -= 2.0 * h;
                cm.positions[gi] = Vec3::from_array(pa);
                let fd = (loss(&cp) - loss(&cm)) / (2.0 * h);
                let an = grads.positions[gi].to_array()[axis];
                let denom = fd.abs().max(an.abs()).max(1e-3);
                assert!((fd - an).abs() / denom < 1e-3, "g{gi} axis {axis}: {fd} vs {an}");
            }
            let mut cp = cloud.clone();
            let mut cm = cloud.clone();
            cp.opacity_logits[gi] += h;
            cm.opacity_logits[gi] -= h;
            let fd = (loss(&cp) - loss(&cm)) / (2.0 * h);
            let an = grads.opacity_logits[gi];
            let denom = fd.abs().max(an.abs()).max(1e-3);
            assert!((fd - an).abs() / denom < 1e-3, "g{gi} opacity: {fd} vs {an}");
        }
    }
}
