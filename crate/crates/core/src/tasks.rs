//! Synthetic modular-arithmetic questions with difficulty strata.
//!
//! A question is a chain `a₁ ± a₂ ± … ± a_k mod m`; the operand count `k`
//! sets the stratum's difficulty.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Question, Source};

pub const DEFAULT_MODULUS: u32 = 10;

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("unknown stratum {0}")]
    UnknownStratum(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArithmeticChain {
    pub operands: Vec<u32>,
    /// `ops[i]` joins `operands[i]` and `operands[i + 1]`.
    pub ops: Vec<Op>,
    pub modulus: u32,
}

impl ArithmeticChain {
    pub fn evaluate(&self) -> u32 {
        let m = i64::from(self.modulus);
        let mut acc = i64::from(self.operands[0]);
        for (op, x) in self.ops.iter().zip(&self.operands[1..]) {
            match op {
                Op::Add => acc += i64::from(*x),
                Op::Sub => acc -= i64::from(*x),
            }
        }
        acc.rem_euclid(m) as u32
    }
}

impl fmt::Display for ArithmeticChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.operands[0])?;
        for (op, x) in self.ops.iter().zip(&self.operands[1..]) {
            let sym = match op {
                Op::Add => '+',
                Op::Sub => '-',
            };
            write!(f, " {sym} {x}")?;
        }
        write!(f, " mod {}", self.modulus)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StratumSpec {
    pub stratum: u32,
    pub operand_count: usize,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub modulus: u32,
    pub strata: Vec<StratumSpec>,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.modulus < 2 {
            return Err(TaskError::Spec(format!("modulus {} < 2", self.modulus)));
        }
        if self.strata.is_empty() {
            return Err(TaskError::Spec("no strata".into()));
        }
        for (i, s) in self.strata.iter().enumerate() {
            if s.operand_count == 0 {
                return Err(TaskError::Spec(format!("stratum {} has no operands", s.stratum)));
            }
            if s.sample_count == 0 {
                return Err(TaskError::Spec(format!("stratum {} has no samples", s.stratum)));
            }
            if i > 0 && s.operand_count <= self.strata[i - 1].operand_count {
                return Err(TaskError::Spec(
                    "operand counts must strictly increase across strata".into(),
                ));
            }
            if self.strata[..i].iter().any(|p| p.stratum == s.stratum) {
                return Err(TaskError::Spec(format!("duplicate stratum {}", s.stratum)));
            }
        }
        Ok(())
    }

    fn stratum(&self, id: u32) -> Result<&StratumSpec, TaskError> {
        self.strata
            .iter()
            .find(|s| s.stratum == id)
            .ok_or(TaskError::UnknownStratum(id))
    }
}

/// Draws one chain for `stratum` from `rng`.
pub fn generate_question(spec: &TaskSpec, stratum: u32, rng: &mut dyn RngCore) -> Result<ArithmeticChain, TaskError> {
    let s = spec.stratum(stratum)?;
    let operands = (0..s.operand_count)
        .map(|_| rng.random_range(0..spec.modulus))
        .collect();
    let ops = (1..s.operand_count)
        .map(|_| if rng.random::<bool>() { Op::Add } else { Op::Sub })
        .collect();
    Ok(ArithmeticChain {
        operands,
        ops,
        modulus: spec.modulus,
    })
}

fn question_rng(seed: u64, stratum: u32, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(stratum) << 32) | index as u64);
    rng
}

pub fn chain_question(id: String, chain: &ArithmeticChain, stratum: u32) -> Question {
    Question::new(
        id,
        chain.to_string(),
        chain.evaluate().to_string(),
        stratum,
        Source::Original,
    )
    .expect("rendered chains are non-empty")
}

/// All strata in declared order. Question `i` of stratum `s` depends only on
/// `(seed, s, i)`.
pub fn make_dataset(spec: &TaskSpec) -> Result<Vec<Question>, TaskError> {
    spec.validate()?;
    let mut out = Vec::new();
    for s in &spec.strata {
        for index in 0..s.sample_count {
            let mut rng = question_rng(spec.seed, s.stratum, index);
            let chain = generate_question(spec, s.stratum, &mut rng)?;
            out.push(chain_question(format!("s{}-{index:05}", s.stratum), &chain, s.stratum));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{verify_answer, write_jsonl};

    fn spec(counts: &[(u32, usize, usize)]) -> TaskSpec {
        TaskSpec {
            modulus: 10,
            strata: counts
                .iter()
                .map(|&(stratum, operand_count, sample_count)| StratumSpec {
                    stratum,
                    operand_count,
                    sample_count,
                })
                .collect(),
            seed: 17,
        }
    }

    #[test]
    fn chain_examples() {
        let single = ArithmeticChain {
            operands: vec![5],
            ops: vec![],
            modulus: 7,
        };
        assert_eq!(single.evaluate(), 5);
        assert_eq!(single.to_string(), "5 mod 7");
        let c = ArithmeticChain {
            operands: vec![3, 4],
            ops: vec![Op::Add],
            modulus: 5,
        };
        assert_eq!(c.evaluate(), 2);
        assert_eq!(c.to_string(), "3 + 4 mod 5");
        let c = ArithmeticChain {
            operands: vec![9, 4, 1],
            ops: vec![Op::Sub, Op::Add],
            modulus: 7,
        };
        assert_eq!(c.evaluate(), 6);
        let c = ArithmeticChain {
            operands: vec![1, 8],
            ops: vec![Op::Sub],
            modulus: 10,
        };
        assert_eq!(c.evaluate(), 3);
    }

    #[test]
    fn dataset_counts_and_range() {
        let s = spec(&[(0, 2, 100), (1, 4, 100)]);
        let qs = make_dataset(&s).unwrap();
        assert_eq!(qs.len(), 200);
        assert_eq!(qs.iter().filter(|q| q.stratum == 0).count(), 100);
        assert!(qs[..100].iter().all(|q| q.stratum == 0));
        for q in &qs {
            let v: u32 = q.gold_answer.parse().unwrap();
            assert!(v < 10);
            assert_eq!(verify_answer(&q.gold_answer, &q.gold_answer), 1.0);
        }
    }

    #[test]
    fn dataset_is_reproducible() {
        let s = spec(&[(0, 2, 50), (3, 3, 20)]);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_jsonl(&mut a, &make_dataset(&s).unwrap()).unwrap();
        write_jsonl(&mut b, &make_dataset(&s).unwrap()).unwrap();
        assert_eq!(a, b);
        let mut other = s.clone();
        other.seed += 1;
        let mut c = Vec::new();
        write_jsonl(&mut c, &make_dataset(&other).unwrap()).unwrap();
        assert_ne!(a, c);
        // Adding a stratum leaves existing questions untouched.
        let bigger = spec(&[(0, 2, 50), (3, 3, 20), (4, 5, 5)]);
        assert_eq!(make_dataset(&bigger).unwrap()[..70], make_dataset(&s).unwrap()[..]);
    }

    #[test]
    fn spec_validation() {
        assert!(spec(&[(0, 2, 1), (1, 2, 1)]).validate().is_err());
        assert!(spec(&[(0, 0, 1)]).validate().is_err());
        assert!(spec(&[(0, 1, 0)]).validate().is_err());
        assert!(spec(&[(0, 1, 1), (0, 2, 1)]).validate().is_err());
        assert!(spec(&[]).validate().is_err());
        let mut s = spec(&[(0, 1, 1)]);
        s.modulus = 1;
        assert!(s.validate().is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            generate_question(&spec(&[(0, 1, 1)]), 9, &mut rng),
            Err(TaskError::UnknownStratum(9))
        );
    }
}
