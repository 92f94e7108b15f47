use std::collections::VecDeque;

use rand::Rng;

/// `(h_t, a_t, r_t, h_{t+1}, done)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub h: Vec<f32>,
    pub a: [f64; 3],
    pub r: f64,
    pub h_next: Vec<f32>,
    pub done: bool,
}

/// Ring buffer of transitions. With `window = Some(L)` sampling is limited
/// to the `L` most recent entries.
#[derive(Clone, Debug)]
pub struct TransitionBuffer {
    pub capacity: usize,
    pub window: Option<usize>,
    items: VecDeque<Transition>,
}

impl TransitionBuffer {
    pub fn new(capacity: usize, window: Option<usize>) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            window,
            items: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn push(&mut self, t: Transition) {
        assert!(t.a.iter().all(|v| (0.0..=1.0).contains(v)), "action outside [0,1]³");
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `m` uniform draws with replacement; empty if the buffer is.
    pub fn sample(&self, rng: &mut impl Rng, m: usize) -> Vec<&Transition> {
        let n = self.items.len();
        if n == 0 {
            return Vec::new();
        }
        let span = self.window.map_or(n, |l| l.clamp(1, n));
        (0..m).map(|_| &self.items[n - span + rng.random_range(0..span)]).collect()
    }
}
