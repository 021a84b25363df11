//! Easy-to-hard training schedules keyed on triplet count.
//!
//! Schedules only list example ids per phase; a trainer consumes them.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CurriculumError {
    #[error("bucket count {k} must be between 1 and the dataset size {len}")]
    BadK { k: usize, len: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("unknown schedule kind {0:?}")]
    UnknownKind(String),
}

/// What scheduling needs to know about one training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleSize {
    pub id: String,
    pub n_triplets: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    OnePass,
    BabySteps,
    Annealing,
}

impl FromStr for ScheduleKind {
    type Err = CurriculumError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "one-pass" | "onepass" => Ok(Self::OnePass),
            "baby-steps" | "babysteps" => Ok(Self::BabySteps),
            "annealing" => Ok(Self::Annealing),
            _ => Err(CurriculumError::UnknownKind(s.into())),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::OnePass => "one-pass",
            Self::BabySteps => "baby-steps",
            Self::Annealing => "annealing",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub k: usize,
    pub seed: u64,
    pub phases: Vec<Vec<String>>,
}

impl Schedule {
    /// One `{"phase": j, "ids": [...]}` line per phase, 1-based.
    pub fn to_jsonl(&self) -> String {
        self.phases
            .iter()
            .enumerate()
            .map(|(j, ids)| serde_json::json!({ "phase": j + 1, "ids": ids }).to_string() + "\n")
            .collect()
    }
}

/// Ids ascending by triplet count, ties by id.
pub fn difficulty_sort(dataset: &[ExampleSize]) -> Vec<String> {
    let mut v: Vec<&ExampleSize> = dataset.iter().collect();
    v.sort_by(|a, b| a.n_triplets.cmp(&b.n_triplets).then_with(|| a.id.cmp(&b.id)));
    v.into_iter().map(|s| s.id.clone()).collect()
}

/// Contiguous near-equal buckets; the first `len % k` get one extra item.
pub fn bucketize(sorted: &[String], k: usize) -> Result<Vec<Vec<String>>, CurriculumError> {
    if k == 0 || k > sorted.len() {
        return Err(CurriculumError::BadK { k, len: sorted.len() });
    }
    let (base, extra) = (sorted.len() / k, sorted.len() % k);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for j in 0..k {
        let size = base + usize::from(j < extra);
        out.push(sorted[start..start + size].to_vec());
        start += size;
    }
    Ok(out)
}

pub fn make_schedule(kind: ScheduleKind, buckets: &[Vec<String>], seed: u64) -> Schedule {
    let k = buckets.len();
    let phases = match kind {
        ScheduleKind::OnePass => buckets.to_vec(),
        ScheduleKind::BabySteps => {
            let mut acc = Vec::new();
            let mut phases: Vec<Vec<String>> = buckets
                .iter()
                .map(|b| {
                    acc.extend(b.iter().cloned());
                    acc.clone()
                })
                .collect();
            if let Some(last) = phases.last().cloned() {
                phases.push(last);
            }
            phases
        }
        ScheduleKind::Annealing => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut seen: Vec<String> = Vec::new();
            let mut phases = Vec::with_capacity(k);
            for b in buckets {
                let mut phase = b.clone();
                let m = seen.len() / k;
                let mut picks = sample(&mut rng, seen.len(), m).into_vec();
                picks.sort_unstable();
                phase.extend(picks.into_iter().map(|i| seen[i].clone()));
                seen.extend(b.iter().cloned());
                phases.push(phase);
            }
            phases
        }
    };
    Schedule { kind, k, seed, phases }
}

/// Sort, bucketize and schedule in one go.
pub fn build_schedule(dataset: &[ExampleSize], kind: ScheduleKind, k: usize, seed: u64) -> Result<Schedule, CurriculumError> {
    if dataset.is_empty() {
        return Err(CurriculumError::EmptyDataset);
    }
    let buckets = bucketize(&difficulty_sort(dataset), k)?;
    Ok(make_schedule(kind, &buckets, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::{HashMap, HashSet};

    fn ds(counts: &[usize]) -> Vec<ExampleSize> {
        counts
            .iter()
            .enumerate()
            .map(|(i, &n)| ExampleSize { id: format!("r{i:05}"), n_triplets: n })
            .collect()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{i:03}")).collect()
    }

    #[test]
    fn sort_by_count_then_id() {
        let d = vec![
            ExampleSize { id: "c".into(), n_triplets: 3 },
            ExampleSize { id: "b".into(), n_triplets: 1 },
            ExampleSize { id: "a".into(), n_triplets: 2 },
            ExampleSize { id: "a0".into(), n_triplets: 1 },
        ];
        assert_eq!(difficulty_sort(&d), ["a0", "b", "a", "c"]);
    }

    #[test]
    fn bucket_sizes() {
        let sizes = |n, k| bucketize(&ids(n), k).unwrap().iter().map(Vec::len).collect::<Vec<_>>();
        assert_eq!(sizes(9, 3), [3, 3, 3]);
        assert_eq!(sizes(10, 3), [4, 3, 3]);
        assert_eq!(sizes(11, 3), [4, 4, 3]);
        assert_eq!(sizes(5, 1), [5]);
        assert_eq!(bucketize(&ids(2), 3), Err(CurriculumError::BadK { k: 3, len: 2 }));
        assert_eq!(bucketize(&ids(2), 0), Err(CurriculumError::BadK { k: 0, len: 2 }));
    }

    #[test]
    fn schedule_shapes() {
        let b = bucketize(&ids(9), 3).unwrap();
        let one = make_schedule(ScheduleKind::OnePass, &b, 0);
        assert_eq!(one.phases, b);
        let baby = make_schedule(ScheduleKind::BabySteps, &b, 0);
        assert_eq!(baby.phases.len(), 4);
        assert_eq!(baby.phases[2], ids(9));
        assert_eq!(baby.phases[3], ids(9));
        let ann = make_schedule(ScheduleKind::Annealing, &b, 4);
        assert_eq!(ann.phases[0], b[0]);
        assert_eq!(ann.phases[1].len(), 4);
        assert_eq!(ann.phases[1][..3], b[1][..]);
        assert!(b[0].contains(&ann.phases[1][3]));
        assert_eq!(ann.phases[2].len(), 5);
        assert_eq!(ann, make_schedule(ScheduleKind::Annealing, &b, 4));
    }

    #[test]
    fn kinds_parse_and_print() {
        for k in [ScheduleKind::OnePass, ScheduleKind::BabySteps, ScheduleKind::Annealing] {
            assert_eq!(k.to_string().parse::<ScheduleKind>().unwrap(), k);
        }
        assert_eq!("baby_steps".parse::<ScheduleKind>().unwrap(), ScheduleKind::BabySteps);
        assert!("zigzag".parse::<ScheduleKind>().is_err());
        let s = make_schedule(ScheduleKind::OnePass, &bucketize(&ids(3), 3).unwrap(), 0);
        assert_eq!(s.to_jsonl().lines().count(), 3);
        assert!(s.to_jsonl().starts_with(r#"{"ids":["000"],"phase":1}"#));
    }

    #[test]
    fn sort_matches_oracle_on_10k() {
        let mut x: u64 = 0x9e3779b97f4a7c15;
        let d: Vec<ExampleSize> = (0..10_000)
            .map(|_| {
                x ^= x << 13;
                x ^= x >> 7;
                x ^= x << 17;
                ExampleSize { id: format!("{:x}", x % 50_000), n_triplets: (x % 7) as usize + 1 }
            })
            .collect();
        let mut oracle: Vec<(usize, String)> = d.iter().map(|s| (s.n_triplets, s.id.clone())).collect();
        oracle.sort();
        assert_eq!(difficulty_sort(&d), oracle.into_iter().map(|(_, id)| id).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn laws(counts in prop::collection::vec(1usize..12, 1..200), k in 1usize..=10, seed in any::<u64>()) {
            let d = ds(&counts);
            let k = k.min(d.len());
            let sorted = difficulty_sort(&d);
            let b = bucketize(&sorted, k).unwrap();
            prop_assert_eq!(b.concat(), sorted.clone());
            let sizes: Vec<usize> = b.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);

            let n_of: HashMap<&str, usize> = d.iter().map(|s| (s.id.as_str(), s.n_triplets)).collect();
            let one = make_schedule(ScheduleKind::OnePass, &b, seed);
            let all: HashSet<&String> = one.phases.iter().flatten().collect();
            prop_assert_eq!(all.len(), d.len());
            prop_assert_eq!(one.phases.iter().map(Vec::len).sum::<usize>(), d.len());
            let means: Vec<f64> = one.phases.iter()
                .map(|p| p.iter().map(|id| n_of[id.as_str()] as f64).sum::<f64>() / p.len() as f64)
                .collect();
            prop_assert!(means.windows(2).all(|w| w[0] <= w[1]));

            let baby = make_schedule(ScheduleKind::BabySteps, &b, seed);
            prop_assert_eq!(baby.phases.len(), k + 1);
            for w in baby.phases.windows(2) {
                let prev: HashSet<&String> = w[0].iter().collect();
                prop_assert!(prev.iter().all(|id| w[1].contains(id)));
            }
            prop_assert_eq!(&baby.phases[k], &sorted);
            prop_assert_eq!(&baby.phases[k - 1], &sorted);

            let ann = make_schedule(ScheduleKind::Annealing, &b, seed);
            let mut seen = 0;
            for (j, phase) in ann.phases.iter().enumerate() {
                prop_assert_eq!(&phase[..b[j].len()], &b[j][..]);
                let extra = &phase[b[j].len()..];
                prop_assert_eq!(extra.len(), seen / k);
                let prior: HashSet<&String> = b[..j].iter().flatten().collect();
                prop_assert!(extra.iter().all(|id| prior.contains(id)));
                prop_assert_eq!(extra.iter().collect::<HashSet<_>>().len(), extra.len());
                seen += b[j].len();
            }
            prop_assert_eq!(ann.clone(), make_schedule(ScheduleKind::Annealing, &b, seed));
        }
    }
}
