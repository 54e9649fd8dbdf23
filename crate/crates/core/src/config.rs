//! Key/value training config files.
//!
//! Format: one `key = value` per line, `#` starts a comment. Unknown keys
//! are rejected so typos fail loudly. All keys are optional; anything not
//! set keeps its default. See the README for the full key list.

use crate::error::{Error, Result};
use crate::train::TrainConfig;
use std::path::Path;

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v}"))),
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected a number, got {v}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected an integer, got {v}")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected an integer, got {v}")))
}

fn parse_u32(key: &str, v: &str) -> Result<u32> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected an integer, got {v}")))
}

pub fn apply_config_line(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "stage1_iters" => cfg.stage1_iters = parse_u64(key, value)?,
        "stage2_iters" => cfg.stage2_iters = parse_u64(key, value)?,
        "seed" => cfg.seed = parse_u64(key, value)?,
        "threads" => cfg.threads = parse_usize(key, value)?,
        "smooth_samples" => cfg.smooth_samples = parse_usize(key, value)?,
        "hidden_width" => cfg.hidden_width = parse_usize(key, value)?,
        "feature_width" => cfg.feature_width = parse_usize(key, value)?,
        "init_noise_frac" => cfg.init_noise_frac = parse_f64(key, value)?,
        "init_subsample_frac" => cfg.init_subsample_frac = parse_f64(key, value)?,
        "checkpoint_interval" => cfg.checkpoint_interval = parse_u64(key, value)?,
        "densify_start_frac" => cfg.densify_start_frac = parse_f64(key, value)?,
        "densify_stop_frac" => cfg.densify_stop_frac = parse_f64(key, value)?,
        "stage1_densify" => cfg.stage1_densify = parse_bool(key, value)?,

        "weights.dssim_mix" => cfg.weights.dssim_mix = parse_f64(key, value)?,
        "weights.static_weight" => cfg.weights.static_weight = parse_f64(key, value)?,
        "weights.smooth_weight" => cfg.weights.smooth_weight = parse_f64(key, value)?,

        "decomp.top_percent" => cfg.decomp.top_percent = parse_f64(key, value)?,
        "decomp.relabel_interval" => cfg.decomp.relabel_interval = parse_u64(key, value)?,
        "decomp.warmup_iters" => cfg.decomp.warmup_iters = parse_u64(key, value)?,
        "decomp.static_weight" => cfg.decomp.static_weight = parse_f64(key, value)?,

        "lr.position" => cfg.lr.position = parse_f64(key, value)?,
        "lr.position_stage1" => cfg.lr.position_stage1 = parse_f64(key, value)?,
        "lr.position_final_mult" => cfg.lr.position_final_mult = parse_f64(key, value)?,
        "lr.position_scale_by_extent" => cfg.lr.position_scale_by_extent = parse_bool(key, value)?,
        "lr.opacity" => cfg.lr.opacity = parse_f64(key, value)?,
        "lr.opacity_stage1" => cfg.lr.opacity_stage1 = parse_f64(key, value)?,
        "lr.scale" => cfg.lr.scale = parse_f64(key, value)?,
        "lr.rotation" => cfg.lr.rotation = parse_f64(key, value)?,
        "lr.color" => cfg.lr.color = parse_f64(key, value)?,
        "lr.network" => cfg.lr.network = parse_f64(key, value)?,
        "lr.tables" => cfg.lr.tables = parse_f64(key, value)?,

        "ablation.no_decomposition" => cfg.ablation.no_decomposition = parse_bool(key, value)?,
        "ablation.no_dynamic_density_control" => {
            cfg.ablation.no_dynamic_density_control = parse_bool(key, value)?
        }
        "ablation.no_smooth_reg" => cfg.ablation.no_smooth_reg = parse_bool(key, value)?,
        "ablation.static_baseline" => cfg.ablation.static_baseline = parse_bool(key, value)?,

        _ => {
            if let Some(rest) = key.strip_prefix("grid3d.") {
                return apply_grid_key(&mut cfg.grid3d, key, rest, value);
            }
            if let Some(rest) = key.strip_prefix("grid4d.") {
                return apply_grid_key(&mut cfg.grid4d, key, rest, value);
            }
            if let Some(rest) = key.strip_prefix("density_static.") {
                return apply_density_key(&mut cfg.density_static, key, rest, value);
            }
            if let Some(rest) = key.strip_prefix("density_dynamic.") {
                return apply_density_key(&mut cfg.density_dynamic, key, rest, value);
            }
            return Err(Error::Config(format!("unknown config key: {key}")));
        }
    }
    Ok(())
}

fn apply_grid_key(grid: &mut crate::hashgrid::HashGridConfig, full: &str, rest: &str, value: &str) -> Result<()> {
    match rest {
        "levels" => grid.levels = parse_usize(full, value)?,
        "coarsest" => grid.coarsest = parse_u32(full, value)?,
        "finest" => grid.finest = parse_u32(full, value)?,
        "table_size" => grid.table_size = parse_u32(full, value)?,
        "features" => grid.features = parse_usize(full, value)?,
        _ => return Err(Error::Config(format!("unknown config key: {full}"))),
    }
    Ok(())
}

fn apply_density_key(
    d: &mut crate::decomp::DensityControlConfig,
    full: &str,
    rest: &str,
    value: &str,
) -> Result<()> {
    match rest {
        "densify_grad_threshold" => d.densify_grad_threshold = parse_f64(full, value)?,
        "opacity_prune_threshold" => d.opacity_prune_threshold = parse_f64(full, value)?,
        "densify_interval" => d.densify_interval = parse_u64(full, value)?,
        "opacity_reset_interval" => d.opacity_reset_interval = parse_u64(full, value)?,
        "scale_split_threshold" => d.scale_split_threshold = parse_f64(full, value)?,
        _ => return Err(Error::Config(format!("unknown config key: {full}"))),
    }
    Ok(())
}

pub fn parse_config(text: &str, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base;
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value", ln + 1)));
        };
        apply_config_line(&mut cfg, key.trim(), value.trim())?;
    }
    Ok(cfg)
}

pub fn load_config(path: &Path, base: TrainConfig) -> Result<TrainConfig> {
    parse_config(&std::fs::read_to_string(path)?, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_keys() {
        let text = "\n# comment\nstage1_iters = 123\nweights.dssim_mix = 0.3 # trailing\ngrid4d.levels = 6\nablation.no_smooth_reg = true\nlr.tables = 0.01\ndensity_dynamic.densify_interval = 250\n";
        let cfg = parse_config(text, TrainConfig::default()).unwrap();
        assert_eq!(cfg.stage1_iters, 123);
        assert_eq!(cfg.weights.dssim_mix, 0.3);
        assert_eq!(cfg.grid4d.levels, 6);
        assert!(cfg.ablation.no_smooth_reg);
        assert_eq!(cfg.lr.tables, 0.01);
        assert_eq!(cfg.density_dynamic.densify_interval, 250);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(parse_config("no_such_key = 1", TrainConfig::default()).is_err());
        assert!(parse_config("stage1_iters = soon", TrainConfig::default()).is_err());
        assert!(parse_config("just a line", TrainConfig::default()).is_err());
    }
}
