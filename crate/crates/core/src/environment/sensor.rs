//! Pinhole depth sensor cast against the room's analytic geometry.

use super::config::EnvConfig;
use super::world::{Cylinder, Heading};
use crate::geometry::{Label, LabeledPoint, Vec3};

/// Hits closer than this along a ray are treated as self-intersections.
const T_MIN: f64 = 1e-9;

/// Unit ray directions for each of the four headings.
#[derive(Clone, Debug)]
pub struct SensorModel {
    rays: [Vec<Vec3>; 4],
    range_min: f64,
    range_max: f64,
    height: f64,
}

impl SensorModel {
    pub fn new(cfg: &EnvConfig) -> Self {
        let tan_h = (cfg.sensor_fov_h.to_radians() / 2.0).tan();
        let tan_v = (cfg.sensor_fov_v.to_radians() / 2.0).tan();
        let build = |heading: Heading| {
            let [fx, fy] = heading.forward().map(|c| c as f64);
            let right = [fy, -fx];
            let mut dirs = Vec::with_capacity(cfg.sensor_rays_h * cfg.sensor_rays_v);
            for row in 0..cfg.sensor_rays_v {
                let v = 1.0 - 2.0 * (row as f64 + 0.5) / cfg.sensor_rays_v as f64;
                for col in 0..cfg.sensor_rays_h {
                    let u = 2.0 * (col as f64 + 0.5) / cfg.sensor_rays_h as f64 - 1.0;
                    let (x, y) = (u * tan_h, v * tan_v);
                    let d = [fx + x * right[0], fy + x * right[1], y];
                    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    dirs.push(d.map(|c| c / n));
                }
            }
            dirs
        };
        Self {
            rays: Heading::ALL.map(build),
            range_min: cfg.sensor_range_min,
            range_max: cfg.sensor_range_max,
            height: cfg.sensor_height,
        }
    }

    pub fn rays(&self, heading: Heading) -> &[Vec3] {
        &self.rays[heading as usize]
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    /// One scan from `origin` looking along `heading`. Each ray reports its
    /// nearest surface if that surface lies within the range band.
    pub fn cast(&self, scene: &Scene, origin: Vec3, heading: Heading) -> Vec<LabeledPoint> {
        self.rays(heading)
            .iter()
            .filter_map(|d| {
                let (t, label) = scene.intersect(&origin, d)?;
                (t >= self.range_min && t <= self.range_max).then(|| {
                    LabeledPoint::new(
                        [origin[0] + t * d[0], origin[1] + t * d[1], origin[2] + t * d[2]],
                        label,
                    )
                })
            })
            .collect()
    }
}

/// Static geometry: the interior floor square `[1, room-1]²`, four walls on
/// its boundary, and upright cylinders standing on the floor.
#[derive(Clone, Debug)]
pub struct Scene {
    lo: f64,
    hi: f64,
    wall_height: f64,
    cylinders: Vec<Cylinder>,
}

impl Scene {
    pub fn new(cfg: &EnvConfig, cylinders: Vec<Cylinder>) -> Self {
        Self {
            lo: 1.0,
            hi: cfg.room_size as f64 - 1.0,
            wall_height: cfg.wall_height,
            cylinders,
        }
    }

    pub fn cylinders(&self) -> &[Cylinder] {
        &self.cylinders
    }

    /// Nearest intersection along a unit ray: distance and surface class.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Label)> {
        let mut best: Option<(f64, Label)> = None;
        let mut consider = |t: f64, label: Label| {
            if t > T_MIN && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, label));
            }
        };
        let inside = |v: f64| v >= self.lo && v <= self.hi;

        if d[2] < 0.0 {
            let t = -o[2] / d[2];
            let (x, y) = (o[0] + t * d[0], o[1] + t * d[1]);
            if inside(x) && inside(y) {
                consider(t, Label::Floor);
            }
        }
        for (axis, plane) in [(0, self.lo), (0, self.hi), (1, self.lo), (1, self.hi)] {
            if d[axis] == 0.0 {
                continue;
            }
            let t = (plane - o[axis]) / d[axis];
            let other = o[1 - axis] + t * d[1 - axis];
            let z = o[2] + t * d[2];
            if inside(other) && (0.0..=self.wall_height).contains(&z) {
                consider(t, Label::Wall);
            }
        }
        for c in &self.cylinders {
            if let Some(t) = c.intersect(o, d) {
                consider(t, Label::Target);
            }
        }
        best
    }
}

impl Cylinder {
    /// Nearest hit with the side or the top cap.
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let r = self.diameter / 2.0;
        let (ox, oy) = (o[0] - self.center[0], o[1] - self.center[1]);
        let mut best: Option<f64> = None;
        let a = d[0] * d[0] + d[1] * d[1];
        if a > 0.0 {
            let b = ox * d[0] + oy * d[1];
            let c = ox * ox + oy * oy - r * r;
            let disc = b * b - a * c;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                for t in [(-b - sq) / a, (-b + sq) / a] {
                    let z = o[2] + t * d[2];
                    if t > T_MIN && (0.0..=self.height).contains(&z) {
                        best = Some(best.map_or(t, |bt: f64| bt.min(t)));
                    }
                }
            }
        }
        if d[2] != 0.0 {
            let t = (self.height - o[2]) / d[2];
            let (x, y) = (ox + t * d[0], oy + t * d[1]);
            if t > T_MIN && x * x + y * y <= r * r {
                best = Some(best.map_or(t, |bt: f64| bt.min(t)));
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(cyls: Vec<Cylinder>) -> (EnvConfig, Scene) {
        let cfg = EnvConfig::default();
        let s = Scene::new(&cfg, cyls);
        (cfg, s)
    }

    /// Marches along the ray and reports the first sample inside a solid.
    fn march(cfg: &EnvConfig, cyls: &[Cylinder], o: &Vec3, d: &Vec3) -> Option<(f64, Label)> {
        let step = 1e-4;
        let (lo, hi) = (1.0, cfg.room_size as f64 - 1.0);
        let mut t = step;
        while t < 20.0 {
            let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            for c in cyls {
                let (dx, dy) = (p[0] - c.center[0], p[1] - c.center[1]);
                if dx * dx + dy * dy <= (c.diameter / 2.0).powi(2) && (0.0..=c.height).contains(&p[2]) {
                    return Some((t, Label::Target));
                }
            }
            let outside = p[0] < lo || p[0] > hi || p[1] < lo || p[1] > hi;
            if outside && p[2] <= cfg.wall_height && p[2] >= 0.0 {
                return Some((t, Label::Wall));
            }
            if p[2] < 0.0 {
                return (!outside).then_some((t, Label::Floor));
            }
            t += step;
        }
        None
    }

    #[test]
    fn analytic_hits_agree_with_ray_marching() {
        let cyls = vec![
            Cylinder { center: [6.5, 8.5], diameter: 0.4, height: 1.0 },
            Cylinder { center: [4.5, 6.5], diameter: 0.4, height: 1.0 },
        ];
        let (cfg, s) = scene(cyls.clone());
        let model = SensorModel::new(&EnvConfig { sensor_rays_h: 16, sensor_rays_v: 9, ..cfg.clone() });
        let origin = [6.5, 5.5, 0.5];
        for heading in Heading::ALL {
            for d in model.rays(heading) {
                let fast = s.intersect(&origin, d);
                let slow = march(&cfg, &cyls, &origin, d);
                match (fast, slow) {
                    (Some((t1, l1)), Some((t2, l2))) => {
                        assert_eq!(l1, l2, "ray {d:?}");
                        assert!((t1 - t2).abs() < 2e-4, "ray {d:?}: {t1} vs {t2}");
                    }
                    (None, None) => {}
                    other => panic!("ray {d:?}: {other:?}"),
                }
            }
        }
    }

    #[test]
    fn wall_three_cells_ahead() {
        let (cfg, s) = scene(vec![]);
        let d = [0.0, 1.0, 0.0];
        // Cell (6, 8) center is 3.5 cells from the north face at y = 12.
        let (t, label) = s.intersect(&[6.5, 9.0, 0.5], &d).unwrap();
        assert_eq!(label, Label::Wall);
        assert!((t - 3.0).abs() < 1e-12);
        let _ = cfg;
    }

    #[test]
    fn cylinder_occludes_wall_behind_it() {
        let cyl = Cylinder { center: [6.5, 8.5], diameter: 0.4, height: 1.0 };
        let (cfg, with_cyl) = scene(vec![cyl]);
        let (_, empty) = scene(vec![]);
        let model = SensorModel::new(&cfg);
        let origin = [6.5, 6.5, 0.5];
        let mut blocked = 0;
        for d in model.rays(Heading::North) {
            if let Some((t, Label::Target)) = with_cyl.intersect(&origin, d) {
                // Upward rays over the cap can escape the empty room entirely.
                if let Some((behind, label)) = empty.intersect(&origin, d) {
                    assert!(behind > t, "occluded surface must lie behind the cylinder");
                    assert_ne!(label, Label::Target);
                }
                blocked += 1;
            }
        }
        assert!(blocked > 0);
        let pts = model.cast(&with_cyl, origin, Heading::North);
        assert_eq!(pts.iter().filter(|p| p.label == Label::Target).count(), blocked);
    }

    #[test]
    fn nothing_in_range_gives_an_empty_scan() {
        let cfg = EnvConfig {
            sensor_range_max: 0.4,
            sensor_range_min: 0.1,
            ..EnvConfig::default()
        };
        let s = Scene::new(&cfg, vec![]);
        let model = SensorModel::new(&cfg);
        assert!(model.cast(&s, [6.5, 6.5, 0.5], Heading::East).is_empty());
    }
}
