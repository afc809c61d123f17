//! Slide-level train/validation/test partitioning.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng;

pub const SPLIT_RATIO: [usize; 3] = [6, 1, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

/// Largest-remainder apportionment of `n` items to `weights`; remainder
/// ties go to the earlier entry.
pub fn apportion(n: usize, weights: &[usize]) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    if total == 0 {
        return vec![0; weights.len()];
    }
    let mut counts: Vec<usize> = weights.iter().map(|w| n * w / total).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // remainder numerators compare exactly in integers
    order.sort_by_key(|&i| (std::cmp::Reverse(n * weights[i] % total), i));
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Slide-to-split assignment, listed in shuffled order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    assignments: Vec<(String, Split)>,
}

impl SplitPlan {
    pub fn assignments(&self) -> &[(String, Split)] {
        &self.assignments
    }

    pub fn split_of(&self, slide: &str) -> Option<Split> {
        self.assignments.iter().find(|(s, _)| s == slide).map(|(_, sp)| *sp)
    }

    pub fn slides(&self, split: Split) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        Split::ALL.map(|s| self.assignments.iter().filter(|(_, a)| *a == s).count())
    }
}

/// Shuffles the distinct slide ids with `seed` and deals them out 6:1:3.
pub fn split_slides<S: AsRef<str>>(slide_ids: &[S], seed: u64) -> Result<SplitPlan> {
    let mut ids: Vec<String> = slide_ids.iter().map(|s| s.as_ref().to_string()).collect();
    ids.sort();
    ids.dedup();
    if ids.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 slides to split, got {}",
            ids.len()
        )));
    }
    rng::shuffle(&mut rng::seeded(seed), &mut ids);
    let counts = apportion(ids.len(), &SPLIT_RATIO);
    let mut assignments = Vec::with_capacity(ids.len());
    let mut it = ids.into_iter();
    for (split, n) in Split::ALL.into_iter().zip(counts) {
        assignments.extend(it.by_ref().take(n).map(|id| (id, split)));
    }
    Ok(SplitPlan { assignments })
}
