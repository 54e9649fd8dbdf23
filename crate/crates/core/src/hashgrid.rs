//! Multiresolution hash encoder over a d-dimensional unit domain (d = 3 or 4).
//!
//! Each level has a lattice of resolution N_l, its 2^d cell corners are
//! hashed into a fixed-size table of learnable feature rows, and the corner
//! features are blended d-linearly. Level outputs are concatenated.

use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// Established hash-grid mixing constants; the first must stay 1 so the
/// leading dimension enters the XOR unscaled.
pub const DEFAULT_HASH_PRIMES: [u32; 4] = [1, 2654435761, 805459861, 3674653429];

pub const MAX_DIMS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub dims: usize,
    pub levels: usize,
    pub coarsest: u32,
    pub finest: u32,
    pub table_size: u32,
    pub features: usize,
    pub hash_primes: [u32; 4],
}

impl HashGridConfig {
    pub fn new(dims: usize, levels: usize, coarsest: u32, finest: u32, table_size: u32, features: usize) -> Self {
        HashGridConfig { dims, levels, coarsest, finest, table_size, features, hash_primes: DEFAULT_HASH_PRIMES }
    }

    /// Stage-1 spatial encoder defaults.
    pub fn default_3d() -> Self {
        Self::new(3, 8, 16, 256, 1 << 13, 2)
    }

    /// Stage-2 spatio-temporal encoder defaults.
    pub fn default_4d() -> Self {
        Self::new(4, 12, 8, 128, 1 << 15, 2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dims == 3 || self.dims == 4) {
            return Err(Error::InvalidParameter(format!("dims must be 3 or 4, got {}", self.dims)));
        }
        if self.levels < 2 {
            return Err(Error::InvalidParameter("need at least 2 levels".into()));
        }
        if self.coarsest < 1 || self.coarsest >= self.finest {
            return Err(Error::InvalidParameter(format!(
                "need 1 <= coarsest < finest, got {}..{}",
                self.coarsest, self.finest
            )));
        }
        if !self.table_size.is_power_of_two() {
            return Err(Error::InvalidParameter("table size must be a power of two".into()));
        }
        if self.features == 0 {
            return Err(Error::InvalidParameter("feature width must be >= 1".into()));
        }
        if self.hash_primes[0] != 1 {
            return Err(Error::InvalidParameter("first hash constant must be 1".into()));
        }
        Ok(())
    }

    /// Per-dimension growth factor of the geometric resolution schedule.
    pub fn growth(&self) -> f64 {
        (((self.finest as f64).ln() - (self.coarsest as f64).ln()) / (self.levels as f64 - 1.0)).exp()
    }

    /// N_l = floor(N_min * b^l).
    pub fn level_resolution(&self, level: usize) -> u32 {
        debug_assert!(level < self.levels);
        let b = self.growth();
        (self.coarsest as f64 * b.powi(level as i32)).floor() as u32
    }

    pub fn output_len(&self) -> usize {
        self.levels * self.features
    }
}

/// XOR of 32-bit wraparound products, reduced modulo the table size.
pub fn hash_index(cfg: &HashGridConfig, lattice_point: &[u32]) -> u32 {
    debug_assert_eq!(lattice_point.len(), cfg.dims);
    let mut acc = 0u32;
    for (i, &x) in lattice_point.iter().enumerate() {
        acc ^= x.wrapping_mul(cfg.hash_primes[i]);
    }
    acc & (cfg.table_size - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashGridEncoder {
    pub config: HashGridConfig,
    /// One table per level, row-major (table_size x features).
    pub tables: Vec<Vec<f64>>,
}

/// Dense per-level gradient buffers shaped like the encoder tables.
#[derive(Clone, Debug)]
pub struct TableGrads {
    pub per_level: Vec<Vec<f64>>,
}

impl TableGrads {
    pub fn zeros_like(enc: &HashGridEncoder) -> TableGrads {
        TableGrads { per_level: enc.tables.iter().map(|t| vec![0.0; t.len()]).collect() }
    }

    pub fn clear(&mut self) {
        for t in &mut self.per_level {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Occupancy summary of one level under a sample of lattice points.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelCollisionStats {
    pub level: usize,
    pub samples: usize,
    pub distinct_slots: usize,
    pub max_bucket_load: usize,
}

struct CellGeometry {
    base: [u32; MAX_DIMS],
    frac: [f64; MAX_DIMS],
    clamped: [bool; MAX_DIMS],
}

impl HashGridEncoder {
    pub fn new(config: HashGridConfig, rng: &mut Rng) -> Result<HashGridEncoder> {
        config.validate()?;
        let rows = config.table_size as usize * config.features;
        let tables = (0..config.levels)
            .map(|_| (0..rows).map(|_| rng.range(-1e-4, 1e-4)).collect())
            .collect();
        Ok(HashGridEncoder { config, tables })
    }

    pub fn zeroed(config: HashGridConfig) -> Result<HashGridEncoder> {
        config.validate()?;
        let rows = config.table_size as usize * config.features;
        let tables = (0..config.levels).map(|_| vec![0.0; rows]).collect();
        Ok(HashGridEncoder { config, tables })
    }

    fn cell_geometry(&self, x: &[f64], level: usize) -> CellGeometry {
        let n = self.config.level_resolution(level) as f64;
        let mut g = CellGeometry { base: [0; MAX_DIMS], frac: [0.0; MAX_DIMS], clamped: [false; MAX_DIMS] };
        for i in 0..self.config.dims {
            let clamped = x[i].clamp(0.0, 1.0);
            g.clamped[i] = clamped != x[i];
            let v = clamped * n;
            let f = v.floor();
            g.base[i] = f as u32;
            g.frac[i] = v - f;
        }
        g
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.dims {
            return Err(Error::ShapeMismatch(format!(
                "input has {} dims, encoder expects {}",
                x.len(),
                self.config.dims
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite encoder input".into()));
        }
        Ok(())
    }

    /// Concatenated d-linear blends, one (levels x features) vector.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.config.output_len()];
        self.encode_into(x, &mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_input(x)?;
        debug_assert_eq!(out.len(), self.config.output_len());
        let d = self.config.dims;
        let f_width = self.config.features;
        out.iter_mut().for_each(|v| *v = 0.0);
        for level in 0..self.config.levels {
            let geom = self.cell_geometry(x, level);
            let table = &self.tables[level];
            let dst = &mut out[level * f_width..(level + 1) * f_width];
            for corner in 0..(1usize << d) {
                let mut w = 1.0;
                let mut pt = [0u32; MAX_DIMS];
                for i in 0..d {
                    if (corner >> i) & 1 == 1 {
                        w *= geom.frac[i];
                        pt[i] = geom.base[i] + 1;
                    } else {
                        w *= 1.0 - geom.frac[i];
                        pt[i] = geom.base[i];
                    }
                }
                let slot = hash_index(&self.config, &pt[..d]) as usize;
                let row = &table[slot * f_width..(slot + 1) * f_width];
                for k in 0..f_width {
                    dst[k] += w * row[k];
                }
            }
        }
        Ok(())
    }

    /// Scatter upstream into the touched table rows and return the analytic
    /// input-coordinate gradient (right-sided at cell boundaries, zero in
    /// clamped dimensions).
    pub fn encode_backward(&self, x: &[f64], upstream: &[f64]) -> Result<(TableGrads, Vec<f64>)> {
        let mut grads = TableGrads::zeros_like(self);
        let mut dx = vec![0.0; self.config.dims];
        self.encode_backward_into(x, upstream, &mut grads, &mut dx)?;
        Ok((grads, dx))
    }

    pub fn encode_backward_into(
        &self,
        x: &[f64],
        upstream: &[f64],
        grads: &mut TableGrads,
        dx: &mut [f64],
    ) -> Result<()> {
        self.check_input(x)?;
        if upstream.len() != self.config.output_len() {
            return Err(Error::ShapeMismatch(format!(
                "upstream has {} entries, encoder produces {}",
                upstream.len(),
                self.config.output_len()
            )));
        }
        let d = self.config.dims;
        let f_width = self.config.features;
        for level in 0..self.config.levels {
            let n = self.config.level_resolution(level) as f64;
            let geom = self.cell_geometry(x, level);
            let table = &self.tables[level];
            let gtable = &mut grads.per_level[level];
            let up = &upstream[level * f_width..(level + 1) * f_width];
            for corner in 0..(1usize << d) {
                let mut w = 1.0;
                let mut pt = [0u32; MAX_DIMS];
                for i in 0..d {
                    if (corner >> i) & 1 == 1 {
                        w *= geom.frac[i];
                        pt[i] = geom.base[i] + 1;
                    } else {
                        w *= 1.0 - geom.frac[i];
                        pt[i] = geom.base[i];
                    }
                }
                let slot = hash_index(&self.config, &pt[..d]) as usize;
                let row = &table[slot * f_width..(slot + 1) * f_width];
                let grow = &mut gtable[slot * f_width..(slot + 1) * f_width];
                let mut up_dot_row = 0.0;
                for k in 0..f_width {
                    grow[k] += w * up[k];
                    up_dot_row += up[k] * row[k];
                }
                // d(weight)/d(x_i) = N_l * (+-1) * prod_{j != i} w_j
                for i in 0..d {
                    if geom.clamped[i] {
                        continue;
                    }
                    let mut dwi = 1.0;
                    for j in 0..d {
                        if j == i {
                            continue;
                        }
                        dwi *= if (corner >> j) & 1 == 1 { geom.frac[j] } else { 1.0 - geom.frac[j] };
                    }
                    let sign = if (corner >> i) & 1 == 1 { 1.0 } else { -1.0 };
                    dx[i] += n * sign * dwi * up_dot_row;
                }
            }
        }
        Ok(())
    }

    /// Distinct-slot and max-load summary per level for a lattice sample.
    pub fn collision_stats(&self, lattice_points: &[Vec<u32>]) -> Result<Vec<LevelCollisionStats>> {
        if lattice_points.is_empty() {
            return Err(Error::InvalidParameter("collision stats need a non-empty sample".into()));
        }
        let mut out = Vec::with_capacity(self.config.levels);
        for level in 0..self.config.levels {
            let mut loads = vec![0usize; self.config.table_size as usize];
            for p in lattice_points {
                if p.len() != self.config.dims {
                    return Err(Error::ShapeMismatch("lattice point dimension mismatch".into()));
                }
                loads[hash_index(&self.config, p) as usize] += 1;
            }
            let distinct = loads.iter().filter(|&&c| c > 0).count();
            let max_load = loads.iter().copied().max().unwrap_or(0);
            out.push(LevelCollisionStats {
                level,
                samples: lattice_points.len(),
                distinct_slots: distinct,
                max_bucket_load: max_load,
            });
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.tables.iter().map(|t| t.len()).sum()
    }
}
