use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RlError;

/// Modular addition chains: the prompt `x0 + x1 + ... + xL =` asks for
/// `(x0 + ... + xL) mod p`.
///
/// Token ids: digits `0..p`, then `+`, `=` and end-of-sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub modulus: u32,
    pub chain_length: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(modulus: u32, chain_length: usize, seed: u64) -> Result<Self, RlError> {
        let t = Self { modulus, chain_length, seed };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), RlError> {
        if self.modulus < 2 {
            return Err(RlError::Config(format!("modulus {} < 2", self.modulus)));
        }
        if self.chain_length == 0 {
            return Err(RlError::Config("chain_length must be at least 1".into()));
        }
        Ok(())
    }

    pub fn plus(&self) -> u32 {
        self.modulus
    }

    pub fn equals(&self) -> u32 {
        self.modulus + 1
    }

    pub fn eos(&self) -> u32 {
        self.modulus + 2
    }

    pub fn vocab_size(&self) -> usize {
        self.modulus as usize + 3
    }

    pub fn prompt_len(&self) -> usize {
        2 * (self.chain_length + 1)
    }

    /// Prompt tokens for the given operands.
    pub fn encode(&self, operands: &[u32]) -> Vec<u32> {
        let mut out = Vec::with_capacity(2 * operands.len());
        for (i, &x) in operands.iter().enumerate() {
            if i > 0 {
                out.push(self.plus());
            }
            out.push(x % self.modulus);
        }
        out.push(self.equals());
        out
    }

    pub fn render(&self, tokens: &[u32]) -> String {
        let words: Vec<String> = tokens
            .iter()
            .map(|&t| match t {
                t if t < self.modulus => t.to_string(),
                t if t == self.plus() => "+".into(),
                t if t == self.equals() => "=".into(),
                t if t == self.eos() => "<eos>".into(),
                t => format!("<{t}>"),
            })
            .collect();
        words.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    pub operands: Vec<u32>,
    pub prompt: Vec<u32>,
    pub answer: u32,
    eos: u32,
}

impl Problem {
    /// The tokens before the first end-of-sequence (all of them if none).
    pub fn answer_segment<'a>(&self, response: &'a [u32]) -> &'a [u32] {
        let end = response.iter().position(|&t| t == self.eos).unwrap_or(response.len());
        &response[..end]
    }

    /// 1 iff the answer segment is exactly the result token.
    pub fn verify(&self, response: &[u32]) -> f64 {
        if self.answer_segment(response) == [self.answer] {
            1.0
        } else {
            0.0
        }
    }
}

pub fn make_problem(task: &TaskSpec, operands: Vec<u32>) -> Problem {
    let answer = operands.iter().fold(0u64, |acc, &x| (acc + x as u64) % task.modulus as u64) as u32;
    Problem { prompt: task.encode(&operands), operands, answer, eos: task.eos() }
}

/// `n` problems with uniformly drawn operands; a pure function of the task
/// and `seed`.
pub fn gen_task_batch(task: &TaskSpec, n: usize, seed: u64) -> Vec<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed ^ seed.rotate_left(17));
    (0..n)
        .map(|_| {
            let ops = (0..=task.chain_length).map(|_| rng.gen_range(0..task.modulus)).collect();
            make_problem(task, ops)
        })
        .collect()
}
