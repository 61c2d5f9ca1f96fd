//! Per-sub-task value estimates and UCB selection over candidate
//! decompositions.
//!
//! A value estimate is the exponentially weighted moving sum
//! `V = sum_h alpha^(H-h) r_h`, kept in recurrence form. For selection each
//! estimate is normalized by the total weight `sum_h alpha^(H-h)`, which keeps
//! decomposition scores in `[0, 1]` whenever rewards are.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("sub-task reward {0} outside [0, 1]")]
    RewardOutOfRange(f64),
    #[error("decomposition {index} out of range ({count} candidates)")]
    UnknownDecomposition { index: usize, count: usize },
    #[error("expected {expected} sub-task rewards, got {got}")]
    RewardCount { expected: usize, got: usize },
    #[error("invalid selector parameters: {0}")]
    BadParameters(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ValueEstimate {
    pub value: f64,
    pub episodes_seen: u64,
}

impl ValueEstimate {
    /// `sum_h alpha^(H-h)` over the episodes seen so far.
    pub fn total_weight(&self, alpha: f64) -> f64 {
        let n = self.episodes_seen;
        if n == 0 {
            0.0
        } else if alpha == 1.0 {
            n as f64
        } else {
            (1.0 - alpha.powf(n as f64)) / (1.0 - alpha)
        }
    }

    /// Value rescaled into the reward range. 0 before any episode.
    pub fn normalized(&self, alpha: f64) -> f64 {
        let w = self.total_weight(alpha);
        if w == 0.0 {
            0.0
        } else {
            self.value / w
        }
    }
}

pub fn update_value(v: ValueEstimate, r: f64, alpha: f64) -> ValueEstimate {
    ValueEstimate {
        value: alpha * v.value + r,
        episodes_seen: v.episodes_seen + 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorState {
    estimates: Vec<Vec<ValueEstimate>>,
    visits: Vec<u64>,
    total: u64,
    alpha: f64,
    beta: f64,
}

/// One row of the selector trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorSnapshot {
    pub selected: usize,
    pub visits: Vec<u64>,
    pub scores: Vec<f64>,
    pub bonuses: Vec<f64>,
}

impl SelectorState {
    /// `agents[j]` is the number of sub-tasks of decomposition `j`.
    pub fn new(agents: &[usize], alpha: f64, beta: f64) -> Result<Self, SelectionError> {
        if agents.is_empty() {
            return Err(SelectionError::BadParameters("no decompositions".into()));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(SelectionError::BadParameters(format!(
                "alpha must lie in (0, 1], got {alpha}"
            )));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(SelectionError::BadParameters(format!(
                "beta must be finite and non-negative, got {beta}"
            )));
        }
        Ok(Self {
            estimates: agents
                .iter()
                .map(|&n| vec![ValueEstimate::default(); n])
                .collect(),
            visits: vec![0; agents.len()],
            total: 0,
            alpha,
            beta,
        })
    }

    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn visits(&self) -> &[u64] {
        &self.visits
    }

    pub fn total_episodes(&self) -> u64 {
        self.total
    }

    pub fn estimates(&self, j: usize) -> &[ValueEstimate] {
        &self.estimates[j]
    }

    /// Mean normalized sub-task value of decomposition `j`.
    pub fn decomposition_score(&self, j: usize) -> f64 {
        if self.visits[j] == 0 || self.estimates[j].is_empty() {
            return 0.0;
        }
        let est = &self.estimates[j];
        est.iter().map(|v| v.normalized(self.alpha)).sum::<f64>() / est.len() as f64
    }

    pub fn bonus(&self, j: usize) -> f64 {
        let n = self.visits[j];
        if n == 0 {
            return f64::INFINITY;
        }
        self.beta * ((self.total as f64).ln() / n as f64).sqrt()
    }

    /// Lowest-index unvisited decomposition, else the UCB argmax with ties
    /// going to the lowest index.
    pub fn select(&self) -> usize {
        if let Some(j) = self.visits.iter().position(|&n| n == 0) {
            return j;
        }
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for j in 0..self.len() {
            let v = self.decomposition_score(j) + self.bonus(j);
            if v > best_val {
                best_val = v;
                best = j;
            }
        }
        best
    }

    pub fn record_episode(&mut self, j: usize, rewards: &[f64]) -> Result<(), SelectionError> {
        if j >= self.len() {
            return Err(SelectionError::UnknownDecomposition {
                index: j,
                count: self.len(),
            });
        }
        if rewards.len() != self.estimates[j].len() {
            return Err(SelectionError::RewardCount {
                expected: self.estimates[j].len(),
                got: rewards.len(),
            });
        }
        if let Some(&r) = rewards.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(SelectionError::RewardOutOfRange(r));
        }
        for (v, &r) in self.estimates[j].iter_mut().zip(rewards) {
            *v = update_value(*v, r, self.alpha);
        }
        self.visits[j] += 1;
        self.total += 1;
        Ok(())
    }

    /// Index of the best-scoring decomposition, ignoring exploration.
    pub fn best(&self) -> usize {
        let mut best = 0;
        for j in 1..self.len() {
            if self.decomposition_score(j) > self.decomposition_score(best) {
                best = j;
            }
        }
        best
    }

    pub fn snapshot(&self, selected: usize) -> SelectorSnapshot {
        SelectorSnapshot {
            selected,
            visits: self.visits.clone(),
            scores: (0..self.len()).map(|j| self.decomposition_score(j)).collect(),
            bonuses: (0..self.len()).map(|j| self.bonus(j)).collect(),
        }
    }
}

pub fn trace_header(arms: usize) -> String {
    let mut cols = vec!["episode".to_string(), "selected_id".to_string()];
    cols.extend((0..arms).map(|j| format!("n_{j}")));
    cols.extend((0..arms).map(|j| format!("score_{j}")));
    cols.extend((0..arms).map(|j| format!("bonus_{j}")));
    cols.join(",")
}

pub fn trace_row(episode: u64, s: &SelectorSnapshot) -> String {
    let mut cols = vec![episode.to_string(), s.selected.to_string()];
    cols.extend(s.visits.iter().map(u64::to_string));
    cols.extend(s.scores.iter().map(|v| format!("{v:.6}")));
    cols.extend(s.bonuses.iter().map(|v| {
        if v.is_finite() {
            format!("{v:.6}")
        } else {
            "inf".to_string()
        }
    }));
    cols.join(",")
}
