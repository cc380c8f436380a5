//! Synthetic sequence transduction tasks used for finetuning.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{encode, EOS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reverse,
    ModSum,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Copy, Task::Reverse, Task::ModSum];

    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::ModSum => "modsum",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Task::Copy => "copy:",
            Task::Reverse => "reverse:",
            Task::ModSum => "sum:",
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
            .find(|t| t.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown task '{}'", s)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub task: Task,
    pub input: Vec<usize>,
    /// Expected output followed by EOS.
    pub target: Vec<usize>,
}

/// Copy and reverse draw lowercase letters; modular sum draws digits and
/// expects their sum modulo 10 as a single digit.
pub fn sample_example<R: Rng + ?Sized>(task: Task, len: usize, rng: &mut R) -> Example {
    let payload: String = match task {
        Task::ModSum => (0..len).map(|_| char::from(b'0' + rng.gen_range(0..10u8))).collect(),
        _ => (0..len).map(|_| char::from(b'a' + rng.gen_range(0..26u8))).collect(),
    };
    let answer = match task {
        Task::Copy => payload.clone(),
        Task::Reverse => payload.chars().rev().collect(),
        Task::ModSum => {
            let s: u32 = payload.bytes().map(|b| u32::from(b - b'0')).sum();
            (s % 10).to_string()
        }
    };
    let mut target = encode(&answer);
    target.push(EOS);
    Example { task, input: encode(&format!("{}{}", task.prefix(), payload)), target }
}
