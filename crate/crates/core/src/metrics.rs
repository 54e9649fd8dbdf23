//! Image losses and quality metrics: L1, SSIM / D-SSIM (with analytic
//! gradients for training) and PSNR.
//!
//! SSIM uses the standard 11x11 Gaussian window with sigma 1.5 and
//! C1 = 0.01^2, C2 = 0.03^2 on the [0,1] range; the window is renormalized
//! over its in-bounds support at image borders.

use crate::error::{Error, Result};
use crate::math::Vec3;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &[Vec3], b: &[Vec3], width: usize, height: usize) -> Result<()> {
    if a.len() != b.len() || a.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "images disagree: {} vs {} pixels for {}x{}",
            a.len(),
            b.len(),
            width,
            height
        )));
    }
    Ok(())
}

/// Mean absolute difference over pixels and channels.
pub fn l1_loss(a: &[Vec3], b: &[Vec3], width: usize, height: usize) -> Result<f64> {
    check_shapes(a, b, width, height)?;
    let mut acc = 0.0;
    for (p, q) in a.iter().zip(b) {
        acc += (p.x - q.x).abs() + (p.y - q.y).abs() + (p.z - q.z).abs();
    }
    Ok(acc / (a.len() * 3) as f64)
}

/// d(l1)/d(a), the subgradient sign convention at zero being 0.
pub fn l1_loss_grad(a: &[Vec3], b: &[Vec3], width: usize, height: usize) -> Result<Vec<Vec3>> {
    check_shapes(a, b, width, height)?;
    let scale = 1.0 / (a.len() * 3) as f64;
    Ok(a.iter()
        .zip(b)
        .map(|(p, q)| {
            Vec3::new(
                (p.x - q.x).signum_or_zero() * scale,
                (p.y - q.y).signum_or_zero() * scale,
                (p.z - q.z).signum_or_zero() * scale,
            )
        })
        .collect())
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// -10 log10(MSE) on the [0,1] range; +inf for identical images.
pub fn psnr(a: &[Vec3], b: &[Vec3], width: usize, height: usize) -> Result<f64> {
    check_shapes(a, b, width, height)?;
    let mut acc = 0.0;
    for (p, q) in a.iter().zip(b) {
        let d = *p - *q;
        acc += d.x * d.x + d.y * d.y + d.z * d.z;
    }
    let mse = acc / (a.len() * 3) as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(-10.0 * mse.log10())
    }
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Per-position sum of in-bounds kernel taps along one axis.
fn axis_norms(len: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = SSIM_WINDOW as isize / 2;
    (0..len as isize)
        .map(|p| {
            let mut z = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                let q = p + j as isize - half;
                if q >= 0 && q < len as isize {
                    z += kv;
                }
            }
            z
        })
        .collect()
}

/// Separable zero-padded correlation (kernel is symmetric).
fn filter_plain(src: &[f64], width: usize, height: usize, kernel: &[f64; SSIM_WINDOW], tmp: &mut Vec<f64>, dst: &mut Vec<f64>) {
    let half = SSIM_WINDOW as isize / 2;
    tmp.clear();
    tmp.resize(src.len(), 0.0);
    dst.clear();
    dst.resize(src.len(), 0.0);
    // horizontal
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        let out = &mut tmp[y * width..(y + 1) * width];
        for x in 0..width as isize {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                let q = x + j as isize - half;
                if q >= 0 && q < width as isize {
                    acc += kv * row[q as usize];
                }
            }
            out[x as usize] = acc;
        }
    }
    // vertical
    for y in 0..height as isize {
        for x in 0..width {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                let q = y + j as isize - half;
                if q >= 0 && q < height as isize {
                    acc += kv * tmp[q as usize * width + x];
                }
            }
            dst[y as usize * width + x] = acc;
        }
    }
}

struct SsimPlanes {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    m_x2: Vec<f64>,
    m_y2: Vec<f64>,
    m_xy: Vec<f64>,
}

struct SsimScratch {
    kernel: [f64; SSIM_WINDOW],
    znorm: Vec<f64>,
    tmp: Vec<f64>,
    out: Vec<f64>,
}

impl SsimScratch {
    fn new(width: usize, height: usize) -> SsimScratch {
        let kernel = gaussian_kernel();
        let zr = axis_norms(width, &kernel);
        let zc = axis_norms(height, &kernel);
        let mut znorm = vec![0.0; width * height];
        for y in 0..height {
            for x in 0..width {
                znorm[y * width + x] = zr[x] * zc[y];
            }
        }
        SsimScratch { kernel, znorm, tmp: Vec::new(), out: Vec::new() }
    }

    /// Border-renormalized filter.
    fn filt(&mut self, src: &[f64], width: usize, height: usize) -> Vec<f64> {
        filter_plain(src, width, height, &self.kernel, &mut self.tmp, &mut self.out);
        self.out.iter().zip(&self.znorm).map(|(v, z)| v / z).collect()
    }

    /// Adjoint of the renormalized filter: divide first, then plain filter.
    fn filt_adjoint(&mut self, src: &[f64], width: usize, height: usize) -> Vec<f64> {
        let scaled: Vec<f64> = src.iter().zip(&self.znorm).map(|(v, z)| v / z).collect();
        filter_plain(&scaled, width, height, &self.kernel, &mut self.tmp, &mut self.out);
        self.out.clone()
    }
}

fn channel_plane(img: &[Vec3], c: usize) -> Vec<f64> {
    img.iter()
        .map(|p| match c {
            0 => p.x,
            1 => p.y,
            _ => p.z,
        })
        .collect()
}

fn ssim_planes(scratch: &mut SsimScratch, x: &[f64], y: &[f64], width: usize, height: usize) -> SsimPlanes {
    let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
    let y2: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    SsimPlanes {
        mu_x: scratch.filt(x, width, height),
        mu_y: scratch.filt(y, width, height),
        m_x2: scratch.filt(&x2, width, height),
        m_y2: scratch.filt(&y2, width, height),
        m_xy: scratch.filt(&xy, width, height),
    }
}

fn ssim_value_at(pl: &SsimPlanes, i: usize) -> (f64, f64, f64, f64, f64) {
    let (mx, my) = (pl.mu_x[i], pl.mu_y[i]);
    let sxx = pl.m_x2[i] - mx * mx;
    let syy = pl.m_y2[i] - my * my;
    let sxy = pl.m_xy[i] - mx * my;
    let a1 = 2.0 * mx * my + SSIM_C1;
    let a2 = 2.0 * sxy + SSIM_C2;
    let b1 = mx * mx + my * my + SSIM_C1;
    let b2 = sxx + syy + SSIM_C2;
    (a1 * a2 / (b1 * b2), a1, a2, b1, b2)
}

/// Mean structural similarity over pixels and channels.
pub fn ssim(a: &[Vec3], b: &[Vec3], width: usize, height: usize) -> Result<f64> {
    check_shapes(a, b, width, height)?;
    let mut scratch = SsimScratch::new(width, height);
    let mut total = 0.0;
    for c in 0..3 {
        let x = channel_plane(a, c);
        let y = channel_plane(b, c);
        let pl = ssim_planes(&mut scratch, &x, &y, width, height);
        for i in 0..x.len() {
            total += ssim_value_at(&pl, i).0;
        }
    }
    Ok(total / (a.len() * 3) as f64)
}

/// (1 - SSIM) / 2.
pub fn dssim_loss(a: &[Vec3], b: &[Vec3], width: usize, height: usize) -> Result<f64> {
    Ok((1.0 - ssim(a, b, width, height)?) / 2.0)
}

/// SSIM and its gradient with respect to the first image.
pub fn ssim_with_grad(a: &[Vec3], b: &[Vec3], width: usize, height: usize) -> Result<(f64, Vec<Vec3>)> {
    check_shapes(a, b, width, height)?;
    let n = a.len();
    let mut scratch = SsimScratch::new(width, height);
    let mut total = 0.0;
    let mut grad = vec![Vec3::ZERO; n];
    let scale = 1.0 / (n * 3) as f64;
    for c in 0..3 {
        let x = channel_plane(a, c);
        let y = channel_plane(b, c);
        let pl = ssim_planes(&mut scratch, &x, &y, width, height);
        let mut d_mu = vec![0.0; n];
        let mut d_m2 = vec![0.0; n];
        let mut d_mxy = vec![0.0; n];
        for i in 0..n {
            let (s, a1, a2, b1, b2) = ssim_value_at(&pl, i);
            total += s;
            let (mx, my) = (pl.mu_x[i], pl.mu_y[i]);
            d_mu[i] = s * (2.0 * my / a1 - 2.0 * my / a2 - 2.0 * mx / b1 + 2.0 * mx / b2);
            d_m2[i] = -s / b2;
            d_mxy[i] = 2.0 * s / a2;
        }
        let g_mu = scratch.filt_adjoint(&d_mu, width, height);
        let g_m2 = scratch.filt_adjoint(&d_m2, width, height);
        let g_mxy = scratch.filt_adjoint(&d_mxy, width, height);
        for i in 0..n {
            let g = scale * (g_mu[i] + 2.0 * x[i] * g_m2[i] + y[i] * g_mxy[i]);
            match c {
                0 => grad[i].x = g,
                1 => grad[i].y = g,
                _ => grad[i].z = g,
            }
        }
    }
    Ok((total / (n * 3) as f64, grad))
}

/// D-SSIM and its gradient with respect to the first image.
pub fn dssim_loss_with_grad(a: &[Vec3], b: &[Vec3], width: usize, height: usize) -> Result<(f64, Vec<Vec3>)> {
    let (s, g) = ssim_with_grad(a, b, width, height)?;
    Ok(((1.0 - s) / 2.0, g.into_iter().map(|v| v * -0.5).collect()))
}
