//! Seeded synthetic sequence tasks.
//!
//! Token `0` is the separator; numeric tokens are `1..vocab`. A sample packs
//! as `[input, 0, target]` and the model is trained to emit the target
//! positions only.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEPARATOR: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reverse,
    Sort,
    Arith,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Copy, Task::Reverse, Task::Sort, Task::Arith];

    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Sort => "sort",
            Task::Arith => "arith",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config(format!("unknown task {s:?} (expected copy, reverse, sort or arith)")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub task: Task,
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl TaskSample {
    /// `[input, separator, target]`.
    pub fn packed(&self) -> Vec<usize> {
        let mut seq = Vec::with_capacity(self.input.len() + 1 + self.target.len());
        seq.extend_from_slice(&self.input);
        seq.push(SEPARATOR);
        seq.extend_from_slice(&self.target);
        seq
    }
}

/// Target of `task` for a given input over numeric tokens `1..vocab`.
/// Arithmetic inputs must already be a progression.
pub fn solve(task: Task, input: &[usize], vocab: usize) -> Vec<usize> {
    match task {
        Task::Copy => input.to_vec(),
        Task::Reverse => input.iter().rev().copied().collect(),
        Task::Sort => {
            let mut t = input.to_vec();
            t.sort_unstable();
            t
        }
        Task::Arith => {
            let n = input.len();
            let modulus = vocab - 1;
            let start = input[0] - 1;
            let step = if n > 1 { (input[1] + modulus - input[0]) % modulus } else { 0 };
            (n..2 * n).map(|i| 1 + (start + i * step) % modulus).collect()
        }
    }
}

fn check_vocab(task: Task, seq_len: usize, vocab: usize) -> Result<()> {
    if seq_len == 0 {
        return Err(Error::config("sequence length must be positive"));
    }
    let numeric = vocab.saturating_sub(1);
    let needed = match task {
        Task::Sort => seq_len,
        Task::Arith => 2,
        Task::Copy | Task::Reverse => 1,
    };
    if numeric < needed {
        return Err(Error::config(format!(
            "vocab {vocab} too small for {task} with length {seq_len}: need at least {} numeric tokens",
            needed
        )));
    }
    Ok(())
}

fn sample_one(task: Task, seq_len: usize, vocab: usize, rng: &mut ChaCha8Rng) -> TaskSample {
    let numeric = vocab - 1;
    let input: Vec<usize> = match task {
        Task::Copy | Task::Reverse => (0..seq_len).map(|_| rng.random_range(1..vocab)).collect(),
        Task::Sort => index::sample(rng, numeric, seq_len).into_iter().map(|i| i + 1).collect(),
        Task::Arith => {
            let start = rng.random_range(0..numeric);
            let step = rng.random_range(1..numeric);
            (0..seq_len).map(|i| 1 + (start + i * step) % numeric).collect()
        }
    };
    let target = solve(task, &input, vocab);
    TaskSample { task, input, target }
}

/// `n_samples` samples of one task with input length `seq_len`.
pub fn generate(task: Task, n_samples: usize, seq_len: usize, vocab: usize, seed: u64) -> Result<Vec<TaskSample>> {
    check_vocab(task, seq_len, vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_samples).map(|_| sample_one(task, seq_len, vocab, &mut rng)).collect())
}

/// Stream drawing each sample's task uniformly from `tasks`.
pub fn generate_mixture(tasks: &[Task], n_samples: usize, seq_len: usize, vocab: usize, seed: u64) -> Result<Vec<TaskSample>> {
    if tasks.is_empty() {
        return Err(Error::config("mixture needs at least one task"));
    }
    for &t in tasks {
        check_vocab(t, seq_len, vocab)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_samples)
        .map(|_| {
            let task = tasks[rng.random_range(0..tasks.len())];
            sample_one(task, seq_len, vocab, &mut rng)
        })
        .collect())
}
