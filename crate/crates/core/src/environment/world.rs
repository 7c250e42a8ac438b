use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::EnvConfig;
use super::sensor::{Scene, SensorModel};
use crate::error::{Error, Result};
use crate::geometry::{ClassCounts, Label, LabeledPoint, LabeledPointCloud};

/// Largest episode return observed in the full-scale setup; returns above it
/// are logged, not rejected.
pub const EMPIRICAL_RETURN_BOUND: f64 = 415.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Heading {
    North = 0,
    East = 1,
    South = 2,
    West = 3,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    /// Unit grid step in world coordinates (x east, y north).
    pub fn forward(self) -> [i64; 2] {
        match self {
            Heading::North => [0, 1],
            Heading::East => [1, 0],
            Heading::South => [0, -1],
            Heading::West => [-1, 0],
        }
    }

    pub fn clockwise(self) -> Self {
        Self::ALL[(self as usize + 1) % 4]
    }

    pub fn counter_clockwise(self) -> Self {
        Self::ALL[(self as usize + 3) % 4]
    }
}

/// The six relative moves, in tie-breaking order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Forward = 0,
    Backward = 1,
    StrafeLeft = 2,
    StrafeRight = 3,
    RotateCW = 4,
    RotateCCW = 5,
}

impl Action {
    pub const COUNT: usize = 6;
    pub const ALL: [Action; 6] = [
        Action::Forward,
        Action::Backward,
        Action::StrafeLeft,
        Action::StrafeRight,
        Action::RotateCW,
        Action::RotateCCW,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_rotation(self) -> bool {
        matches!(self, Action::RotateCW | Action::RotateCCW)
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Forward => "forward",
            Action::Backward => "backward",
            Action::StrafeLeft => "strafe_left",
            Action::StrafeRight => "strafe_right",
            Action::RotateCW => "rotate_cw",
            Action::RotateCCW => "rotate_ccw",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentPose {
    pub cell: [i64; 2],
    pub heading: Heading,
}

impl AgentPose {
    /// Pose after `action`, ignoring obstacles.
    pub fn apply(self, action: Action) -> Self {
        let [fx, fy] = self.heading.forward();
        let delta = match action {
            Action::Forward => [fx, fy],
            Action::Backward => [-fx, -fy],
            Action::StrafeLeft => [-fy, fx],
            Action::StrafeRight => [fy, -fx],
            Action::RotateCW => return Self { heading: self.heading.clockwise(), ..self },
            Action::RotateCCW => {
                return Self {
                    heading: self.heading.counter_clockwise(),
                    ..self
                }
            }
        };
        Self {
            cell: [self.cell[0] + delta[0], self.cell[1] + delta[1]],
            heading: self.heading,
        }
    }

    /// Sensor position: the cell center at sensor height.
    pub fn sensor_origin(&self, height: f64) -> [f64; 3] {
        [self.cell[0] as f64 + 0.5, self.cell[1] as f64 + 0.5, height]
    }
}

/// An upright cylinder standing on the floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub center: [f64; 2],
    pub diameter: f64,
    pub height: f64,
}

impl Cylinder {
    /// Whether the footprint disk overlaps the open square of a grid cell.
    pub fn blocks_cell(&self, cell: [i64; 2]) -> bool {
        let r = self.diameter / 2.0;
        let (x0, y0) = (cell[0] as f64, cell[1] as f64);
        let nx = self.center[0].clamp(x0, x0 + 1.0);
        let ny = self.center[1].clamp(y0, y0 + 1.0);
        let (dx, dy) = (self.center[0] - nx, self.center[1] - ny);
        dx * dx + dy * dy < r * r
    }
}

/// How the start pose of an episode is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StartRule {
    /// Uniform over free interior cells and headings.
    Uniform,
    /// Uniform over free cells that touch the wall ring, any heading.
    WallAdjacent,
    /// A fixed pose; must be free.
    Fixed(AgentPose),
}

/// Record of an attempted move that would have collided.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IllegalAttempt {
    pub action: Action,
    pub reward: f64,
    pub terminal: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub attempted_action: Action,
    pub executed_action: Action,
    /// New target plus new floor points revealed by the executed move.
    pub reward: u32,
    pub done: bool,
    pub illegal_attempt: Option<IllegalAttempt>,
}

/// What the agent sees: the accumulated cloud and its own pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub points: Vec<LabeledPoint>,
    pub pose: AgentPose,
}

/// Anything that picks an action from the current world state. Used both
/// for agents and as the fallback when an attempted move is illegal.
pub trait Policy {
    fn act(&mut self, world: &WorldState) -> Action;
}

impl<F: FnMut(&WorldState) -> Action> Policy for F {
    fn act(&mut self, world: &WorldState) -> Action {
        self(world)
    }
}

/// Ground-truth room plus the agent's accumulated measurements.
#[derive(Clone, Debug)]
pub struct WorldState {
    config: Arc<EnvConfig>,
    sensor: Arc<SensorModel>,
    scene: Arc<Scene>,
    seed: u64,
    cloud: LabeledPointCloud,
    pose: AgentPose,
    step_index: usize,
    episode_return: u64,
}

/// Starts a seeded episode with a uniformly drawn start pose.
pub fn new_episode(seed: u64, config: &EnvConfig) -> Result<WorldState> {
    WorldState::new(seed, config, StartRule::Uniform)
}

impl WorldState {
    pub fn new(seed: u64, config: &EnvConfig, start: StartRule) -> Result<Self> {
        config.validate()?;
        let sensor = Arc::new(SensorModel::new(config));
        Self::with_sensor(seed, Arc::new(config.clone()), sensor, start)
    }

    /// Like [`WorldState::new`] but reuses a prebuilt sensor model.
    pub fn with_sensor(
        seed: u64,
        config: Arc<EnvConfig>,
        sensor: Arc<SensorModel>,
        start: StartRule,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let candidates = admissible_centers(&config);
        let cylinders: Vec<Cylinder> = index::sample(&mut rng, candidates.len(), config.cylinder_count)
            .into_iter()
            .map(|i| {
                let [x, y] = candidates[i];
                Cylinder {
                    center: [x as f64 + 0.5, y as f64 + 0.5],
                    diameter: config.cylinder_diameter,
                    height: config.cylinder_height,
                }
            })
            .collect();
        let scene = Arc::new(Scene::new(&config, cylinders));

        let hi = config.room_size as i64 - 2;
        let free: Vec<[i64; 2]> = (1..=hi)
            .flat_map(|x| (1..=hi).map(move |y| [x, y]))
            .filter(|&c| !scene.cylinders().iter().any(|cy| cy.blocks_cell(c)))
            .collect();
        let pose = match start {
            StartRule::Uniform | StartRule::WallAdjacent => {
                let pool: Vec<[i64; 2]> = if start == StartRule::WallAdjacent {
                    free.iter()
                        .copied()
                        .filter(|c| c[0] == 1 || c[1] == 1 || c[0] == hi || c[1] == hi)
                        .collect()
                } else {
                    free
                };
                if pool.is_empty() {
                    return Err(Error::Config("no free start cell".into()));
                }
                AgentPose {
                    cell: pool[rng.random_range(0..pool.len())],
                    heading: Heading::ALL[rng.random_range(0..4)],
                }
            }
            StartRule::Fixed(p) => p,
        };

        let mut world = Self {
            cloud: LabeledPointCloud::new(config.voxel_sizes()?),
            config,
            sensor,
            scene,
            seed,
            pose,
            step_index: 0,
            episode_return: 0,
        };
        if !world.is_free(pose.cell) {
            return Err(Error::Config(format!("start cell {:?} is not free", pose.cell)));
        }
        let scan = world.scan(pose);
        merge_capped(&mut world.cloud, &scan, world.config.point_cap);
        Ok(world)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn sensor(&self) -> &Arc<SensorModel> {
        &self.sensor
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cylinders(&self) -> &[Cylinder] {
        self.scene.cylinders()
    }

    pub fn cloud(&self) -> &LabeledPointCloud {
        &self.cloud
    }

    pub fn pose(&self) -> AgentPose {
        self.pose
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn is_done(&self) -> bool {
        self.step_index >= self.config.episode_length
    }

    /// Sum of rewards so far (initial scan excluded).
    pub fn episode_return(&self) -> u64 {
        self.episode_return
    }

    pub fn observation(&self) -> Observation {
        Observation {
            points: self.cloud.points().to_vec(),
            pose: self.pose,
        }
    }

    /// Exact per-class counts of the accumulated cloud.
    pub fn coverage_metrics(&self) -> ClassCounts {
        self.cloud.counts()
    }

    /// Inside the interior and clear of every cylinder footprint.
    pub fn is_free(&self, cell: [i64; 2]) -> bool {
        let hi = self.config.room_size as i64 - 2;
        (1..=hi).contains(&cell[0])
            && (1..=hi).contains(&cell[1])
            && !self.cylinders().iter().any(|c| c.blocks_cell(cell))
    }

    pub fn is_legal(&self, action: Action) -> bool {
        action.is_rotation() || self.is_free(self.pose.apply(action).cell)
    }

    pub fn legal_actions(&self) -> Vec<Action> {
        Action::ALL.into_iter().filter(|&a| self.is_legal(a)).collect()
    }

    /// Raw sensor scan from `pose` against ground truth.
    pub fn scan(&self, pose: AgentPose) -> Vec<LabeledPoint> {
        self.sensor
            .cast(&self.scene, pose.sensor_origin(self.sensor.height()), pose.heading)
    }

    /// Scan of the current pose.
    pub fn cast_sensor(&self) -> Vec<LabeledPoint> {
        self.scan(self.pose)
    }

    /// Reward that executing a legal `action` would earn, without mutating
    /// anything. Shares the scan-and-merge path with [`WorldState::step`].
    pub fn preview_reward(&self, action: Action) -> u32 {
        let pose = self.pose.apply(action);
        let scan = self.scan(pose);
        let mut cloud = self.cloud.clone();
        let added = merge_capped(&mut cloud, &scan, self.config.point_cap);
        reward_of(added)
    }

    /// Executes `action`, or, if it would collide, records the attempt and
    /// executes whatever `fallback` picks instead.
    pub fn step(&mut self, action: Action, fallback: &mut dyn Policy) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        let (executed, illegal_attempt) = if self.is_legal(action) {
            (action, None)
        } else {
            let alt = fallback.act(self);
            if alt == action || !self.is_legal(alt) {
                return Err(Error::Contract(format!(
                    "fallback policy chose illegal action {alt:?} after {action:?}"
                )));
            }
            let attempt = IllegalAttempt {
                action,
                reward: self.config.collision_reward,
                terminal: true,
            };
            (alt, Some(attempt))
        };

        self.pose = self.pose.apply(executed);
        let scan = self.scan(self.pose);
        let added = merge_capped(&mut self.cloud, &scan, self.config.point_cap);
        let reward = reward_of(added);
        self.step_index += 1;
        self.episode_return += reward as u64;

        assert!(
            self.cloud.len() <= self.config.point_cap,
            "cloud exceeds the point cap"
        );
        if self.episode_return as f64 > EMPIRICAL_RETURN_BOUND {
            log::debug!(
                "episode {} return {} exceeds the empirical bound {EMPIRICAL_RETURN_BOUND}",
                self.seed,
                self.episode_return
            );
        }

        Ok(StepOutcome {
            attempted_action: action,
            executed_action: executed,
            reward,
            done: self.is_done(),
            illegal_attempt,
        })
    }

    /// Identifies the cylinder placement and start pose of this episode.
    pub fn placement_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for c in self.cylinders() {
            feed(c.center[0].to_bits());
            feed(c.center[1].to_bits());
        }
        feed(self.pose.cell[0] as u64);
        feed(self.pose.cell[1] as u64);
        feed(self.pose.heading as u64);
        h
    }
}

fn reward_of(added: ClassCounts) -> u32 {
    (added.target + added.floor) as u32
}

/// Cells whose centers may hold a cylinder: the interior minus its outer ring.
pub fn admissible_centers(config: &EnvConfig) -> Vec<[i64; 2]> {
    let hi = config.room_size as i64 - 3;
    (2..=hi).flat_map(|x| (2..=hi).map(move |y| [x, y])).collect()
}

/// Merges a scan into `cloud` without exceeding `cap` points. When the cap
/// binds, target points are admitted first, then floor, then wall.
/// Returns the per-class counts added.
pub fn merge_capped(cloud: &mut LabeledPointCloud, scan: &[LabeledPoint], cap: usize) -> ClassCounts {
    let before = cloud.counts();
    for label in [Label::Target, Label::Floor, Label::Wall] {
        for p in scan.iter().filter(|p| p.label == label) {
            if cloud.len() >= cap {
                break;
            }
            cloud.insert(*p);
        }
    }
    let after = cloud.counts();
    ClassCounts {
        wall: after.wall - before.wall,
        floor: after.floor - before.floor,
        target: after.target - before.target,
    }
}
