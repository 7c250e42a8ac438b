//! Grid-world simulator: a walled square room with upright cylinders, a
//! simulated depth sensor, six relative moves, and a reward equal to the
//! number of newly measured target and floor voxels.
//!
//! Moves that would hit a wall or cylinder are never executed. Instead the
//! attempt is reported in [`StepOutcome::illegal_attempt`] and a fallback
//! action runs in its place, so an episode always lasts its full length.

mod config;
mod sensor;
mod trace;
mod world;

pub use config::EnvConfig;
pub use sensor::{Scene, SensorModel};
pub use trace::{EpisodeTrace, TraceStep};
pub use world::{
    admissible_centers, merge_capped, new_episode, Action, AgentPose, Cylinder, Heading,
    IllegalAttempt, Observation, Policy, StartRule, StepOutcome, WorldState,
    EMPIRICAL_RETURN_BOUND,
};

/// Seed of episode `index` in the stream identified by `base`.
pub fn episode_seed(base: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(base ^ mix(index))
}
