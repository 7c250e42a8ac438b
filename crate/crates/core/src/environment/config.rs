use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::VoxelSizes;

/// Simulator parameters. Lengths are in cells, angles in degrees.
///
/// Every key is optional in a config file; missing keys take the defaults of
/// the full 13×13 two-cylinder room.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Side length of the square room including the wall ring.
    pub room_size: usize,
    pub cylinder_count: usize,
    pub cylinder_diameter: f64,
    pub cylinder_height: f64,
    pub wall_height: f64,
    pub sensor_height: f64,
    pub sensor_range_min: f64,
    pub sensor_range_max: f64,
    pub sensor_fov_h: f64,
    pub sensor_fov_v: f64,
    pub sensor_rays_h: usize,
    pub sensor_rays_v: usize,
    pub voxel_background: f64,
    pub voxel_target: f64,
    pub point_cap: usize,
    pub episode_length: usize,
    /// Reward stored with an illegal attempt.
    pub collision_reward: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            room_size: 13,
            cylinder_count: 2,
            cylinder_diameter: 0.4,
            cylinder_height: 1.0,
            wall_height: 1.5,
            sensor_height: 0.5,
            sensor_range_min: 0.5,
            sensor_range_max: 5.0,
            sensor_fov_h: 57.0,
            sensor_fov_v: 43.0,
            sensor_rays_h: 64,
            sensor_rays_v: 38,
            voxel_background: 0.88,
            voxel_target: 0.22,
            point_cap: 512,
            episode_length: 65,
            collision_reward: 0.0,
        }
    }
}

impl EnvConfig {
    /// The 7×7 single-cylinder room with a 256-point cap used for desk-scale runs.
    pub fn reduced() -> Self {
        Self {
            room_size: 7,
            cylinder_count: 1,
            point_cap: 256,
            ..Self::default()
        }
    }

    pub fn voxel_sizes(&self) -> Result<VoxelSizes> {
        VoxelSizes::new(self.voxel_background, self.voxel_target)
    }

    /// Number of interior cells on one side (the agent's range of motion).
    pub fn interior(&self) -> usize {
        self.room_size.saturating_sub(2)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.room_size < 5 {
            return fail(format!("room_size must be at least 5, got {}", self.room_size));
        }
        let admissible = (self.room_size - 4) * (self.room_size - 4);
        if self.cylinder_count > admissible {
            return fail(format!(
                "{} cylinders do not fit on {admissible} admissible centers",
                self.cylinder_count
            ));
        }
        let positive = [
            ("cylinder_diameter", self.cylinder_diameter),
            ("cylinder_height", self.cylinder_height),
            ("wall_height", self.wall_height),
            ("sensor_height", self.sensor_height),
            ("sensor_range_max", self.sensor_range_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.sensor_range_min >= 0.0 && self.sensor_range_min < self.sensor_range_max) {
            return fail(format!(
                "sensor range [{}, {}] is empty",
                self.sensor_range_min, self.sensor_range_max
            ));
        }
        for (name, v) in [("sensor_fov_h", self.sensor_fov_h), ("sensor_fov_v", self.sensor_fov_v)] {
            if !(v > 0.0 && v < 180.0) {
                return fail(format!("{name} must lie in (0, 180) degrees, got {v}"));
            }
        }
        if self.sensor_rays_h == 0 || self.sensor_rays_v == 0 {
            return fail("sensor ray grid must be non-empty".into());
        }
        if self.point_cap == 0 || self.episode_length == 0 {
            return fail("point_cap and episode_length must be positive".into());
        }
        if !self.collision_reward.is_finite() {
            return fail("collision_reward must be finite".into());
        }
        self.voxel_sizes()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        EnvConfig::default().validate().unwrap();
        EnvConfig::reduced().validate().unwrap();
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = EnvConfig::from_toml_str("room_size = 9\npoint_cap = 300\n").unwrap();
        assert_eq!(cfg.room_size, 9);
        assert_eq!(cfg.point_cap, 300);
        assert_eq!(cfg.episode_length, 65);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(EnvConfig::from_toml_str("rooom_size = 9").is_err());
        assert!(EnvConfig::from_toml_str("voxel_target = 0.0").is_err());
        assert!(EnvConfig::from_toml_str("room_size = 4").is_err());
        assert!(EnvConfig::from_toml_str("sensor_range_min = 6.0").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = EnvConfig::reduced();
        assert_eq!(EnvConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }
}
