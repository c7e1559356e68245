//! Synthetic supervised tasks used for pre-training, probing and fine-tuning.
//!
//! Token 0 is a begin marker, token 1 a separator, and value `v` is encoded
//! as token `v + 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::ProbeSample;
use crate::tensor::RngState;

pub const BOS: u32 = 0;
pub const SEP: u32 = 1;
const VALUE_OFFSET: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum Task {
    /// `BOS x1..xk SEP x1..xk`, the copied half supervised.
    Copy { len: usize },
    /// `BOS a b SEP (a+b) mod m`, the sum supervised.
    ModAdd { modulus: usize },
}

impl Task {
    pub fn seq_len(&self) -> usize {
        match *self {
            Task::Copy { len } => 2 * len + 2,
            Task::ModAdd { .. } => 5,
        }
    }

    pub fn check(&self, vocab_size: usize, max_seq_len: usize) -> Result<()> {
        let values = vocab_size.saturating_sub(VALUE_OFFSET as usize);
        match *self {
            Task::Copy { len: 0 } => {
                return Err(Error::InvalidArgument("copy length must be at least 1".into()))
            }
            Task::ModAdd { modulus } if modulus < 2 || modulus > values => {
                return Err(Error::InvalidArgument(format!(
                    "modulus {modulus} must lie in 2..={values} for vocabulary {vocab_size}"
                )))
            }
            _ => {}
        }
        if values == 0 {
            return Err(Error::InvalidArgument("vocabulary has no value tokens".into()));
        }
        if self.seq_len() > max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.seq_len(),
                max: max_seq_len,
            });
        }
        Ok(())
    }

    pub fn sample(&self, vocab_size: usize, rng: &mut RngState) -> ProbeSample {
        let values = vocab_size - VALUE_OFFSET as usize;
        match *self {
            Task::Copy { len } => {
                let xs: Vec<u32> = (0..len).map(|_| rng.below(values) as u32 + VALUE_OFFSET).collect();
                let mut tokens = vec![BOS];
                tokens.extend(&xs);
                tokens.push(SEP);
                tokens.extend(&xs);
                let mut mask = vec![false; len + 2];
                mask.extend(std::iter::repeat_n(true, len));
                ProbeSample { tokens, response_mask: mask }
            }
            Task::ModAdd { modulus } => {
                let a = rng.below(modulus);
                let b = rng.below(modulus);
                let c = (a + b) % modulus;
                let tokens = vec![BOS, a as u32 + VALUE_OFFSET, b as u32 + VALUE_OFFSET, SEP, c as u32 + VALUE_OFFSET];
                ProbeSample {
                    tokens,
                    response_mask: vec![false, false, false, false, true],
                }
            }
        }
    }

    /// `n` samples drawn from `rng.split(i)` for sample `i`, so any prefix
    /// of a larger set is identical to a smaller one.
    pub fn generate(&self, n: usize, vocab_size: usize, rng: &RngState) -> Vec<ProbeSample> {
        (0..n).map(|i| self.sample(vocab_size, &mut rng.split(i as u64))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_samples_are_valid() {
        let task = Task::Copy { len: 4 };
        task.check(64, 16).unwrap();
        for s in task.generate(20, 64, &RngState::new(1)) {
            s.validate().unwrap();
            assert_eq!(s.tokens.len(), 10);
            assert_eq!(&s.tokens[1..5], &s.tokens[6..10]);
            assert_eq!(s.response_count(), 4);
        }
    }

    #[test]
    fn modadd_samples_are_valid() {
        let task = Task::ModAdd { modulus: 7 };
        for s in task.generate(50, 16, &RngState::new(2)) {
            s.validate().unwrap();
            let (a, b, c) = (s.tokens[1] - 2, s.tokens[2] - 2, s.tokens[4] - 2);
            assert_eq!((a + b) % 7, c);
        }
    }

    #[test]
    fn generation_is_prefix_stable() {
        let task = Task::Copy { len: 3 };
        let rng = RngState::new(5);
        let big = task.generate(10, 64, &rng);
        assert_eq!(&big[..4], &task.generate(4, 64, &rng)[..]);
    }

    #[test]
    fn check_rejects_bad_tasks() {
        assert!(Task::ModAdd { modulus: 70 }.check(64, 32).is_err());
        assert!(Task::Copy { len: 0 }.check(64, 32).is_err());
        assert!(Task::Copy { len: 20 }.check(64, 32).is_err());
    }
}
