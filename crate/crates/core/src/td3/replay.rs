use rand::Rng;
use serde::{Deserialize, Serialize};

/// One environment step of one robot. Arrays are flat: `states` and
/// `next_states` are `K × d_s` row-major, `actions` has `K` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Index of the robot within the run.
    pub robot: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub reward: f64,
    pub next_states: Vec<f64>,
    /// True only for real terminations; time-limit truncations bootstrap.
    pub done: bool,
}

/// Fixed-capacity FIFO ring for one robot.
#[derive(Clone, Debug)]
struct Ring {
    items: Vec<Transition>,
    head: usize,
    capacity: usize,
}

impl Ring {
    fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }
}

/// Per-robot replay rings. Minibatches never mix robots.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    rings: Vec<Ring>,
}

impl ReplayBuffer {
    /// `total_capacity` is split evenly over `robots` rings.
    pub fn new(robots: usize, total_capacity: usize) -> Self {
        let capacity = (total_capacity / robots.max(1)).max(1);
        let rings = (0..robots).map(|_| Ring { items: Vec::new(), head: 0, capacity }).collect();
        Self { rings }
    }

    pub fn num_robots(&self) -> usize {
        self.rings.len()
    }

    pub fn capacity_per_robot(&self) -> usize {
        self.rings.first().map_or(0, |r| r.capacity)
    }

    pub fn push(&mut self, t: Transition) {
        let r = t.robot;
        self.rings[r].push(t);
    }

    pub fn len(&self, robot: usize) -> usize {
        self.rings[robot].items.len()
    }

    pub fn total_len(&self) -> usize {
        self.rings.iter().map(|r| r.items.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    /// Oldest-first view of one robot's transitions.
    pub fn iter(&self, robot: usize) -> impl Iterator<Item = &Transition> {
        let r = &self.rings[robot];
        r.items[r.head..].iter().chain(&r.items[..r.head])
    }

    /// `n` transitions drawn uniformly with replacement; empty when the
    /// robot has no data.
    pub fn sample<R: Rng + ?Sized>(&self, robot: usize, n: usize, rng: &mut R) -> Vec<&Transition> {
        let items = &self.rings[robot].items;
        if items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &items[rng.random_range(0..items.len())]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tr(robot: usize, reward: f64) -> Transition {
        Transition { robot, states: vec![0.0; 2], actions: vec![0.0], reward, next_states: vec![0.0; 2], done: false }
    }

    #[test]
    fn fifo_eviction_per_robot() {
        let mut b = ReplayBuffer::new(2, 6);
        for i in 0..5 {
            b.push(tr(0, i as f64));
        }
        b.push(tr(1, 100.0));
        assert_eq!(b.len(0), 3);
        assert_eq!(b.len(1), 1);
        let rewards: Vec<f64> = b.iter(0).map(|t| t.reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn samples_stay_within_one_robot() {
        let mut b = ReplayBuffer::new(2, 100);
        for i in 0..10 {
            b.push(tr(i % 2, i as f64));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let s = b.sample(1, 50, &mut rng);
        assert_eq!(s.len(), 50);
        assert!(s.iter().all(|t| t.robot == 1));
        assert!(ReplayBuffer::new(1, 10).sample(0, 5, &mut rng).is_empty());
    }
}
