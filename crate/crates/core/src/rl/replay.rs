//! Replay storage: compact cloud snapshots, transitions, and the buffer.

use std::sync::Arc;

use rand::Rng;

use crate::environment::{Action, AgentPose, WorldState};
use crate::geometry::{Label, LabeledPoint};
use crate::network::{build_input, InputTensor};

/// Coordinates are stored as multiples of `1 / FIXED_SCALE` cells.
pub const FIXED_SCALE: f64 = 65536.0;

/// Accumulated cloud in fixed point plus the pose. Both acting and learning
/// read the network input from here, so they always see identical values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub points: Vec<([i32; 3], u8)>,
    pub pose: AgentPose,
}

impl Snapshot {
    pub fn capture(world: &WorldState) -> Self {
        let points = world
            .cloud()
            .points()
            .iter()
            .map(|p| (p.position.map(|c| (c * FIXED_SCALE).round() as i32), p.label.code()))
            .collect();
        Self { points, pose: world.pose() }
    }

    pub fn points(&self) -> Vec<LabeledPoint> {
        self.points
            .iter()
            .map(|(q, l)| {
                LabeledPoint::new(
                    q.map(|c| c as f64 / FIXED_SCALE),
                    Label::from_code(*l).expect("snapshot labels come from valid points"),
                )
            })
            .collect()
    }

    pub fn to_input(&self, point_cap: usize) -> InputTensor {
        build_input(&self.points(), self.pose, point_cap)
    }
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub state: Arc<Snapshot>,
    pub action: Action,
    /// Discounted sum of the rewards the transition spans.
    pub reward: f64,
    pub next: Arc<Snapshot>,
    pub done: bool,
    /// Bootstrap factor `γⁿ` for the spanned steps.
    pub discount: f64,
    pub illegal: bool,
}

/// Fixed-capacity ring buffer with optional proportional prioritization.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    inserted: u64,
    priorities: Option<SumTree>,
    max_priority: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, prioritized: bool) -> Self {
        assert!(capacity > 0);
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            inserted: 0,
            priorities: prioritized.then(|| SumTree::new(capacity)),
            max_priority: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Transitions ever pushed, including overwritten ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn push(&mut self, t: Transition) {
        let slot = (self.inserted % self.capacity as u64) as usize;
        if slot == self.items.len() {
            self.items.push(t);
        } else {
            self.items[slot] = t;
        }
        if let Some(tree) = &mut self.priorities {
            tree.set(slot, self.max_priority);
        }
        self.inserted += 1;
    }

    /// Indices drawn uniformly, or proportionally to priority.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        assert!(!self.items.is_empty(), "sampling from an empty buffer");
        match &self.priorities {
            None => (0..batch).map(|_| rng.random_range(0..self.items.len())).collect(),
            Some(tree) => (0..batch)
                .map(|_| tree.find(rng.random::<f64>() * tree.total()).min(self.items.len() - 1))
                .collect(),
        }
    }

    /// Importance weights `(N·P(i))^-β`, normalized by their maximum.
    pub fn importance_weights(&self, indices: &[usize], beta: f64) -> Vec<f64> {
        let Some(tree) = &self.priorities else {
            return vec![1.0; indices.len()];
        };
        let n = self.items.len() as f64;
        let w: Vec<f64> = indices.iter().map(|&i| (n * tree.get(i) / tree.total()).powf(-beta)).collect();
        let max = w.iter().copied().fold(0.0, f64::max);
        w.into_iter().map(|x| x / max).collect()
    }

    pub fn update_priorities(&mut self, indices: &[usize], priorities: &[f64]) {
        if let Some(tree) = &mut self.priorities {
            for (&i, &p) in indices.iter().zip(priorities) {
                let p = p.max(1e-6);
                tree.set(i, p);
                self.max_priority = self.max_priority.max(p);
            }
        }
    }
}

/// Binary tree of partial sums over leaf priorities.
#[derive(Clone, Debug)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two();
        Self { leaves, nodes: vec![0.0; 2 * leaves] }
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        let mut n = self.leaves + i;
        self.nodes[n] = value;
        while n > 1 {
            n /= 2;
            self.nodes[n] = self.nodes[2 * n] + self.nodes[2 * n + 1];
        }
    }

    /// Leaf whose prefix-sum interval contains `mass`.
    pub fn find(&self, mut mass: f64) -> usize {
        let mut n = 1;
        while n < self.leaves {
            let left = self.nodes[2 * n];
            if mass < left || self.nodes[2 * n + 1] == 0.0 {
                n *= 2;
            } else {
                mass -= left;
                n = 2 * n + 1;
            }
        }
        n - self.leaves
    }
}

/// Folds consecutive steps into `n`-step transitions.
#[derive(Clone, Debug)]
pub struct NStepAccumulator {
    n: usize,
    gamma: f64,
    pending: std::collections::VecDeque<(Arc<Snapshot>, Action, f64)>,
}

impl NStepAccumulator {
    pub fn new(n: usize, gamma: f64) -> Self {
        assert!(n >= 1);
        Self { n, gamma, pending: Default::default() }
    }

    /// Adds one executed step and returns the transitions that became complete.
    pub fn push(&mut self, state: Arc<Snapshot>, action: Action, reward: f64, next: Arc<Snapshot>, done: bool) -> Vec<Transition> {
        self.pending.push_back((state, action, reward));
        let mut out = Vec::new();
        if self.pending.len() == self.n {
            out.push(self.emit(&next, done));
            self.pending.pop_front();
        }
        if done {
            while !self.pending.is_empty() {
                out.push(self.emit(&next, true));
                self.pending.pop_front();
            }
        }
        out
    }

    fn emit(&self, next: &Arc<Snapshot>, done: bool) -> Transition {
        let (state, action, _) = self.pending.front().expect("non-empty");
        let mut reward = 0.0;
        let mut discount = 1.0;
        for (_, _, r) in &self.pending {
            reward += discount * r;
            discount *= self.gamma;
        }
        Transition { state: state.clone(), action: *action, reward, next: next.clone(), done, discount, illegal: false }
    }

    pub fn clear(&mut self) {
        self.pending.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{new_episode, EnvConfig, Heading};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn snap(x: i64) -> Arc<Snapshot> {
        Arc::new(Snapshot { points: vec![], pose: AgentPose { cell: [x, 1], heading: Heading::North } })
    }

    fn t(r: f64) -> Transition {
        Transition { state: snap(1), action: Action::Forward, reward: r, next: snap(2), done: false, discount: 0.99, illegal: false }
    }

    #[test]
    fn snapshot_is_close_to_the_cloud() {
        let w = new_episode(4, &EnvConfig::default()).unwrap();
        let s = Snapshot::capture(&w);
        let pts = s.points();
        assert_eq!(pts.len(), w.cloud().len());
        for (a, b) in pts.iter().zip(w.cloud().points()) {
            assert_eq!(a.label, b.label);
            for c in 0..3 {
                assert!((a.position[c] - b.position[c]).abs() <= 0.5 / FIXED_SCALE);
            }
        }
    }

    #[test]
    fn ring_buffer_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3, false);
        for i in 0..5 {
            b.push(t(i as f64));
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.inserted(), 5);
        let rewards: Vec<f64> = b.iter().map(|x| x.reward).collect();
        assert_eq!(rewards, vec![3.0, 4.0, 2.0]);
    }

    #[test]
    fn sum_tree_sampling_follows_priorities() {
        let mut b = ReplayBuffer::new(4, true);
        for i in 0..4 {
            b.push(t(i as f64));
        }
        b.update_priorities(&[0, 1, 2, 3], &[1.0, 0.0, 3.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = b.sample(40_000, &mut rng);
        let c2 = idx.iter().filter(|&&i| i == 2).count() as f64;
        // Zero priorities are floored at 1e-6, so odd slots are merely rare.
        assert!(idx.iter().filter(|&&i| i == 0 || i == 2).count() > 39_990);
        assert!((c2 / 40_000.0 - 0.75).abs() < 0.01);
        let w = b.importance_weights(&[0, 2], 1.0);
        assert!((w[0] - 1.0).abs() < 1e-12 && (w[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn n_step_folds_rewards() {
        let mut acc = NStepAccumulator::new(3, 0.5);
        assert!(acc.push(snap(1), Action::Forward, 1.0, snap(2), false).is_empty());
        assert!(acc.push(snap(2), Action::Forward, 2.0, snap(3), false).is_empty());
        let out = acc.push(snap(3), Action::Forward, 4.0, snap(4), false);
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].reward, out[0].discount), (1.0 + 1.0 + 1.0, 0.125));
        assert_eq!(out[0].state.pose.cell[0], 1);
        assert_eq!(out[0].next.pose.cell[0], 4);
        let tail = acc.push(snap(4), Action::Forward, 8.0, snap(5), true);
        assert_eq!(tail.len(), 3);
        assert!(tail.iter().all(|x| x.done && x.next.pose.cell[0] == 5));
        assert_eq!(tail[2].reward, 8.0);
    }
}
