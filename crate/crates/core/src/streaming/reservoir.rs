//! Reservoir sampling (algorithm R) and class-balancing reservoir sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform sample of fixed capacity over a stream.
#[derive(Debug, Clone)]
pub struct Reservoir<T> {
    capacity: usize,
    seen: usize,
    items: Vec<T>,
    rng: ChaCha8Rng,
}

impl<T> Reservoir<T> {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            seen: 0,
            items: Vec::with_capacity(capacity),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// The `t`-th item is kept with probability `m/t`, replacing a uniformly
    /// chosen resident.
    pub fn offer(&mut self, item: T) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(item);
            return;
        }
        let j = self.rng.random_range(0..self.seen);
        if j < self.capacity {
            self.items[j] = item;
        }
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    pub fn seen(&self) -> usize {
        self.seen
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

/// Reservoir that keeps classes balanced: while memory is full, a point of
/// a class that is not among the largest evicts a random point of a largest
/// class; a point of a largest class replaces a random point of its own
/// class with probability `stored_c / seen_c`.
#[derive(Debug, Clone)]
pub struct ClassBalancedReservoir<T> {
    capacity: usize,
    items: Vec<(T, usize)>,
    seen_per_class: Vec<usize>,
    rng: ChaCha8Rng,
}

impl<T> ClassBalancedReservoir<T> {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
            seen_per_class: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let classes = self.seen_per_class.len();
        let mut counts = vec![0; classes];
        for (_, c) in &self.items {
            counts[*c] += 1;
        }
        counts
    }

    fn random_of_class(&mut self, class: usize) -> usize {
        let members: Vec<usize> = (0..self.items.len()).filter(|&i| self.items[i].1 == class).collect();
        members[self.rng.random_range(0..members.len())]
    }

    pub fn offer(&mut self, item: T, class: usize) {
        if class >= self.seen_per_class.len() {
            self.seen_per_class.resize(class + 1, 0);
        }
        self.seen_per_class[class] += 1;
        if self.items.len() < self.capacity {
            self.items.push((item, class));
            return;
        }
        if self.capacity == 0 {
            return;
        }
        let counts = self.class_counts();
        let largest = *counts.iter().max().expect("nonempty memory");
        if counts[class] < largest {
            let full: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == largest).collect();
            let victim_class = full[self.rng.random_range(0..full.len())];
            let victim = self.random_of_class(victim_class);
            self.items[victim] = (item, class);
        } else {
            let keep = counts[class] as f64 / self.seen_per_class[class] as f64;
            if self.rng.random::<f64>() <= keep {
                let victim = self.random_of_class(class);
                self.items[victim] = (item, class);
            }
        }
    }

    pub fn items(&self) -> &[(T, usize)] {
        &self.items
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}
