//! Prioritized buffer of fixed-length overlapping transition sequences with
//! stored recurrent states.

use std::collections::VecDeque;

use numerics::Tensor;
use rand::Rng;

use crate::error::{CoberlError, Result};
use crate::model::AgentState;

/// One replayed step record.
#[derive(Clone, Debug)]
pub struct TransitionStep {
    pub prev_reward: f64,
    pub prev_action: usize,
    /// LSTM hidden state entering this step.
    pub prev_lstm_hidden: Vec<f64>,
    pub observation: Tensor,
    pub action: usize,
    /// LSTM hidden state leaving this step.
    pub lstm_hidden: Vec<f64>,
    pub reward: f64,
    pub next_observation: Tensor,
    pub terminal: bool,
}

/// Fixed-length trace. Episode-final partial traces are zero-padded and
/// carry a validity mask; sequences never cross episode boundaries.
#[derive(Clone, Debug)]
pub struct TransitionSequence {
    pub steps: Vec<TransitionStep>,
    pub valid: Vec<bool>,
    pub initial_state: AgentState,
    pub episode_id: u64,
}

impl TransitionSequence {
    pub fn trace_length(&self) -> usize {
        self.steps.len()
    }

    pub fn valid_len(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    fn check(&self, trace_length: usize) -> Result<()> {
        if self.steps.len() != trace_length {
            return Err(CoberlError::Input(format!(
                "sequence length {} != trace length {}",
                self.steps.len(),
                trace_length
            )));
        }
        if self.valid.len() != trace_length {
            return Err(CoberlError::Input("validity mask length mismatch".into()));
        }
        // valid prefix must be contiguous and non-empty
        let valid_len = self.valid_len();
        if valid_len == 0 || !self.valid[..valid_len].iter().all(|v| *v) {
            return Err(CoberlError::Input(
                "validity mask must be a non-empty contiguous prefix".into(),
            ));
        }
        // at most one terminal, and only at the last valid step
        for (i, step) in self.steps.iter().enumerate().take(valid_len) {
            if step.terminal && i + 1 != valid_len {
                return Err(CoberlError::Input(
                    "terminal step inside a trace: sequences must not cross episodes".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Stable handle to an inserted sequence.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct SequenceId(pub u64);

#[derive(Clone, Debug)]
pub struct PrioritizedSample {
    pub id: SequenceId,
    pub probability: f64,
    pub weight: f64,
    pub sequence: TransitionSequence,
}

struct Entry {
    id: SequenceId,
    priority: f64,
    sequence: TransitionSequence,
}

pub struct PrioritizedReplay {
    capacity: usize,
    trace_length: usize,
    min_start: usize,
    /// exponent applied to stored priorities when forming P(i)
    sampling_exponent: f64,
    entries: VecDeque<Entry>,
    next_id: u64,
    stale_updates: u64,
}

impl PrioritizedReplay {
    pub fn new(
        capacity: usize,
        trace_length: usize,
        min_start: usize,
        sampling_exponent: f64,
    ) -> Self {
        PrioritizedReplay {
            capacity,
            trace_length,
            min_start,
            sampling_exponent,
            entries: VecDeque::new(),
            next_id: 0,
            stale_updates: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stale_updates(&self) -> u64 {
        self.stale_updates
    }

    pub fn mean_priority(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.priority).sum::<f64>() / self.entries.len() as f64
    }

    fn max_priority(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.priority)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Store a sequence. `priority = None` marks fresh data, which receives
    /// the maximum current priority so it is sampled soon.
    pub fn insert(
        &mut self,
        sequence: TransitionSequence,
        priority: Option<f64>,
    ) -> Result<SequenceId> {
        sequence.check(self.trace_length)?;
        let priority = match priority {
            Some(p) if p < 0.0 => {
                return Err(CoberlError::Input(format!("negative priority {p}")));
            }
            Some(p) => p,
            None => {
                if self.entries.is_empty() {
                    1.0
                } else {
                    self.max_priority().max(1e-6)
                }
            }
        };
        let id = SequenceId(self.next_id);
        self.next_id += 1;
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(Entry {
            id,
            priority,
            sequence,
        });
        Ok(id)
    }

    fn sampling_weights(&self) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| {
                if self.sampling_exponent == 1.0 {
                    e.priority
                } else {
                    e.priority.powf(self.sampling_exponent)
                }
            })
            .collect()
    }

    /// Probability of each stored sequence under the current priorities.
    pub fn probabilities(&self) -> Vec<f64> {
        let w = self.sampling_weights();
        let total: f64 = w.iter().sum();
        let n = w.len();
        if total <= 0.0 {
            return vec![1.0 / n as f64; n];
        }
        w.into_iter().map(|v| v / total).collect()
    }

    /// Draw `batch_size` sequences with replacement, with P(i) proportional
    /// to priority; importance weights are `(N P(i))^-beta` normalized by the
    /// batch max.
    pub fn sample(
        &self,
        batch_size: usize,
        beta: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<PrioritizedSample>> {
        if self.entries.len() < self.min_start {
            return Err(CoberlError::NotReady {
                have: self.entries.len(),
                need: self.min_start,
            });
        }
        let probs = self.probabilities();
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cumulative.push(acc);
        }
        let n = self.entries.len() as f64;
        let mut raw = Vec::with_capacity(batch_size);
        let mut max_w: f64 = 0.0;
        let mut picks = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let u: f64 = rng.gen_range(0.0..1.0);
            let idx = match cumulative.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
                Ok(i) => (i + 1).min(probs.len() - 1),
                Err(i) => i.min(probs.len() - 1),
            };
            let w = (n * probs[idx]).powf(-beta);
            max_w = max_w.max(w);
            raw.push(w);
            picks.push(idx);
        }
        Ok(picks
            .into_iter()
            .zip(raw)
            .map(|(idx, w)| {
                let e = &self.entries[idx];
                PrioritizedSample {
                    id: e.id,
                    probability: probs[idx],
                    weight: if max_w > 0.0 { w / max_w } else { 1.0 },
                    sequence: e.sequence.clone(),
                }
            })
            .collect())
    }

    /// Replace priorities; references to evicted sequences are counted and
    /// ignored.
    pub fn update_priorities(&mut self, ids: &[SequenceId], priorities: &[f64]) -> Result<()> {
        if ids.len() != priorities.len() {
            return Err(CoberlError::Input(
                "ids/priorities length mismatch".into(),
            ));
        }
        for (&id, &p) in ids.iter().zip(priorities) {
            if p < 0.0 {
                return Err(CoberlError::Input(format!("negative priority {p}")));
            }
            match self.entries.iter_mut().find(|e| e.id == id) {
                Some(e) => e.priority = p,
                None => self.stale_updates += 1,
            }
        }
        Ok(())
    }

    pub fn iter_sequences(&self) -> impl Iterator<Item = (SequenceId, &TransitionSequence)> {
        self.entries.iter().map(|e| (e.id, &e.sequence))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gtrxl::TransformerMemory;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dummy_state() -> AgentState {
        AgentState {
            lstm_hidden: Tensor::zeros(&[4]),
            lstm_cell: Tensor::zeros(&[4]),
            memory: TransformerMemory::zeros(1, 2, 4),
        }
    }

    fn seq(len: usize, valid: usize, episode: u64) -> TransitionSequence {
        let steps = (0..len)
            .map(|i| TransitionStep {
                prev_reward: 0.0,
                prev_action: 0,
                prev_lstm_hidden: vec![0.0; 4],
                observation: Tensor::zeros(&[2]),
                action: 0,
                lstm_hidden: vec![0.0; 4],
                reward: 0.0,
                next_observation: Tensor::zeros(&[2]),
                terminal: i + 1 == valid,
            })
            .collect();
        TransitionSequence {
            steps,
            valid: (0..len).map(|i| i < valid).collect(),
            initial_state: dummy_state(),
            episode_id: episode,
        }
    }

    #[test]
    fn fifo_eviction_at_capacity() {
        let mut buf = PrioritizedReplay::new(2, 4, 1, 1.0);
        let a = buf.insert(seq(4, 4, 0), Some(1.0)).unwrap();
        let b = buf.insert(seq(4, 4, 1), Some(1.0)).unwrap();
        let c = buf.insert(seq(4, 4, 2), Some(1.0)).unwrap();
        assert_eq!(buf.len(), 2);
        let ids: Vec<SequenceId> = buf.iter_sequences().map(|(id, _)| id).collect();
        assert!(!ids.contains(&a));
        assert!(ids.contains(&b) && ids.contains(&c));
    }

    #[test]
    fn malformed_sequences_rejected() {
        let mut buf = PrioritizedReplay::new(8, 4, 1, 1.0);
        // wrong length
        assert!(buf.insert(seq(3, 3, 0), Some(1.0)).is_err());
        // terminal in the middle
        let mut bad = seq(4, 4, 0);
        bad.steps[1].terminal = true;
        assert!(buf.insert(bad, Some(1.0)).is_err());
        // empty validity
        let mut empty = seq(4, 4, 0);
        empty.valid = vec![false; 4];
        assert!(buf.insert(empty, Some(1.0)).is_err());
        // negative priority
        assert!(buf.insert(seq(4, 4, 0), Some(-1.0)).is_err());
    }

    #[test]
    fn fresh_sequences_get_max_priority() {
        let mut buf = PrioritizedReplay::new(8, 4, 1, 1.0);
        buf.insert(seq(4, 4, 0), Some(3.0)).unwrap();
        buf.insert(seq(4, 4, 1), None).unwrap();
        let probs = buf.probabilities();
        assert!((probs[0] - 0.5).abs() < 1e-12);
        assert!((probs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn probabilities_normalized() {
        let mut buf = PrioritizedReplay::new(8, 4, 1, 1.0);
        buf.insert(seq(4, 4, 0), Some(1.0)).unwrap();
        buf.insert(seq(4, 4, 1), Some(3.0)).unwrap();
        let p = buf.probabilities();
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn importance_weights_worked_example() {
        // priorities [1,3], beta=0.6, N=2 -> normalized [1.0, 0.51728]
        let mut buf = PrioritizedReplay::new(8, 4, 1, 1.0);
        buf.insert(seq(4, 4, 0), Some(1.0)).unwrap();
        buf.insert(seq(4, 4, 1), Some(3.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // draw until both have appeared
        let mut w = [f64::NAN, f64::NAN];
        for _ in 0..64 {
            for s in buf.sample(8, 0.6, &mut rng).unwrap() {
                w[s.id.0 as usize] = s.weight;
            }
            if w.iter().all(|v| v.is_finite()) {
                break;
            }
        }
        assert!((w[0] - 1.0).abs() < 1e-5);
        assert!((w[1] - 0.51728).abs() < 1e-5);
    }

    #[test]
    fn equal_priorities_give_unit_weights() {
        let mut buf = PrioritizedReplay::new(8, 4, 1, 1.0);
        for i in 0..4 {
            buf.insert(seq(4, 4, i), Some(2.0)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in buf.sample(16, 0.6, &mut rng).unwrap() {
            assert!((s.weight - 1.0).abs() < 1e-12);
            assert!((s.probability - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn not_ready_before_min_start() {
        let mut buf = PrioritizedReplay::new(8, 4, 3, 1.0);
        buf.insert(seq(4, 4, 0), Some(1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            buf.sample(1, 0.6, &mut rng),
            Err(CoberlError::NotReady { have: 1, need: 3 })
        ));
    }

    #[test]
    fn stale_updates_counted_and_ignored() {
        let mut buf = PrioritizedReplay::new(1, 4, 1, 1.0);
        let a = buf.insert(seq(4, 4, 0), Some(1.0)).unwrap();
        let b = buf.insert(seq(4, 4, 1), Some(1.0)).unwrap(); // evicts a
        buf.update_priorities(&[a, b], &[5.0, 6.0]).unwrap();
        assert_eq!(buf.stale_updates(), 1);
        assert!((buf.probabilities()[0] - 1.0).abs() < 1e-12);
        assert!(buf.update_priorities(&[b], &[-0.5]).is_err());
    }

    #[test]
    fn zero_priority_on_all_but_one_concentrates_sampling() {
        let mut buf = PrioritizedReplay::new(8, 4, 1, 1.0);
        let _ = buf.insert(seq(4, 4, 0), Some(1.0)).unwrap();
        let keep = buf.insert(seq(4, 4, 1), Some(1.0)).unwrap();
        let _ = buf.insert(seq(4, 4, 2), Some(1.0)).unwrap();
        let ids: Vec<SequenceId> = buf.iter_sequences().map(|(id, _)| id).collect();
        let priorities: Vec<f64> = ids.iter().map(|&id| if id == keep { 1.0 } else { 0.0 }).collect();
        buf.update_priorities(&ids, &priorities).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in buf.sample(64, 0.6, &mut rng).unwrap() {
            assert_eq!(s.id, keep);
        }
    }

    #[test]
    fn empirical_frequencies_match_probabilities() {
        let mut buf = PrioritizedReplay::new(8, 4, 1, 1.0);
        buf.insert(seq(4, 4, 0), Some(1.0)).unwrap();
        buf.insert(seq(4, 4, 1), Some(2.0)).unwrap();
        buf.insert(seq(4, 4, 2), Some(5.0)).unwrap();
        buf.insert(seq(4, 4, 3), Some(0.5)).unwrap();
        let probs = buf.probabilities();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws = 100_000usize;
        let mut counts = vec![0usize; 4];
        for chunk in 0..(draws / 1000) {
            let _ = chunk;
            for s in buf.sample(1000, 0.6, &mut rng).unwrap() {
                counts[s.id.0 as usize] += 1;
            }
        }
        for i in 0..4 {
            let expected = probs[i] * draws as f64;
            let sigma = (draws as f64 * probs[i] * (1.0 - probs[i])).sqrt();
            let diff = (counts[i] as f64 - expected).abs();
            assert!(
                diff <= 3.0 * sigma,
                "entry {i}: count {} vs expected {expected} (3 sigma {})",
                counts[i],
                3.0 * sigma
            );
        }
    }

    #[test]
    fn update_shifts_sampling_statistics() {
        let mut buf = PrioritizedReplay::new(8, 4, 1, 1.0);
        let a = buf.insert(seq(4, 4, 0), Some(1.0)).unwrap();
        let b = buf.insert(seq(4, 4, 1), Some(1.0)).unwrap();
        buf.update_priorities(&[a, b], &[1.0, 9.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut count_b = 0usize;
        let draws = 20_000usize;
        for s in buf.sample(draws, 0.6, &mut rng).unwrap() {
            if s.id == b {
                count_b += 1;
            }
        }
        // expected 0.9 +/- 3 sigma
        let sigma = (draws as f64 * 0.9 * 0.1).sqrt();
        assert!((count_b as f64 - 0.9 * draws as f64).abs() < 3.0 * sigma);
    }
}
