//! The modular-addition universe and its seeded disjoint-pair split.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::rng::Stream;

pub const MODULUS: u32 = 97;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("modulus must be at least 2, got {0}")]
    Modulus(u32),
    #[error("operand ({a}, {b}) out of range for modulus {p}")]
    Operand { a: u32, b: u32, p: u32 },
    #[error("split file line {line}: {msg}")]
    SplitFile { line: usize, msg: String },
}

/// An ordered operand pair and its label `(a + b) mod p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    pub a: u32,
    pub b: u32,
    pub label: u32,
    pub p: u32,
}

impl Pair {
    pub fn new(a: u32, b: u32, p: u32) -> Result<Self, TaskError> {
        Ok(Self {
            a,
            b,
            label: oracle(a, b, p)?,
            p,
        })
    }
}

/// Ground-truth label.
pub fn oracle(a: u32, b: u32, p: u32) -> Result<u32, TaskError> {
    if p < 2 {
        return Err(TaskError::Modulus(p));
    }
    if a >= p || b >= p {
        return Err(TaskError::Operand { a, b, p });
    }
    Ok(((a as u64 + b as u64) % p as u64) as u32)
}

/// Every ordered pair, `a`-major.
pub fn universe(p: u32) -> Result<Vec<Pair>, TaskError> {
    if p < 2 {
        return Err(TaskError::Modulus(p));
    }
    let mut out = Vec::with_capacity((p * p) as usize);
    for a in 0..p {
        for b in 0..p {
            out.push(Pair::new(a, b, p)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub p: u32,
    pub train: Vec<Pair>,
    pub test: Vec<Pair>,
}

/// Shuffles the universe with the seed's `split` stream and puts the first
/// `floor(p^2 / 2)` pairs in train (4704 of 9409 for p = 97).
pub fn split(seed: u64, p: u32) -> Result<SplitSpec, TaskError> {
    let mut pairs = universe(p)?;
    Stream::derived(seed, "split").shuffle(&mut pairs);
    let test = pairs.split_off(pairs.len() / 2);
    Ok(SplitSpec {
        seed,
        p,
        train: pairs,
        test,
    })
}

impl SplitSpec {
    /// `a,b,label,split` lines under a header row.
    pub fn to_text(&self) -> String {
        let mut out = String::from("a,b,label,split\n");
        for (pairs, tag) in [(&self.train, "train"), (&self.test, "test")] {
            for q in pairs {
                writeln!(out, "{},{},{},{tag}", q.a, q.b, q.label).expect("string write");
            }
        }
        out
    }

    /// Parses [`SplitSpec::to_text`] output, re-checking every label.
    pub fn from_text(text: &str, seed: u64, p: u32) -> Result<Self, TaskError> {
        let err = |line: usize, msg: String| TaskError::SplitFile { line, msg };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "a,b,label,split")) => {}
            _ => return Err(err(1, "missing `a,b,label,split` header".into())),
        }
        let mut spec = SplitSpec {
            seed,
            p,
            train: Vec::new(),
            test: Vec::new(),
        };
        for (i, line) in lines {
            let n = i + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let [a, b, label, tag] = fields[..] else {
                return Err(err(n, format!("expected 4 fields, got {}", fields.len())));
            };
            let num = |s: &str| s.parse::<u32>().map_err(|e| err(n, format!("`{s}`: {e}")));
            let pair = Pair::new(num(a)?, num(b)?, p).map_err(|e| err(n, e.to_string()))?;
            if pair.label != num(label)? {
                return Err(err(n, format!("label {label} disagrees with oracle {}", pair.label)));
            }
            match tag {
                "train" => spec.train.push(pair),
                "test" => spec.test.push(pair),
                other => return Err(err(n, format!("unknown split `{other}`"))),
            }
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn universe_sizes_and_order() {
        assert_eq!(universe(97).unwrap().len(), 9409);
        let small: Vec<(u32, u32, u32)> = universe(2)
            .unwrap()
            .iter()
            .map(|q| (q.a, q.b, q.label))
            .collect();
        assert_eq!(small, vec![(0, 0, 0), (0, 1, 1), (1, 0, 1), (1, 1, 0)]);
        assert!(matches!(universe(1), Err(TaskError::Modulus(1))));
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(oracle(50, 60, 97).unwrap(), 13);
        assert_eq!(oracle(0, 0, 97).unwrap(), 0);
        assert_eq!(oracle(96, 96, 97).unwrap(), 95);
        assert!(oracle(97, 0, 97).is_err());
    }

    #[test]
    fn oracle_agrees_with_brute_force() {
        for a in 0..97u32 {
            for b in 0..97u32 {
                assert_eq!(oracle(a, b, 97).unwrap(), (a + b) % 97);
            }
        }
    }

    #[test]
    fn every_residue_appears_p_times() {
        let mut counts = [0u32; 97];
        for q in universe(97).unwrap() {
            counts[q.label as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 97));
    }

    #[test]
    fn split_is_deterministic_and_seed_dependent() {
        let a = split(42, 97).unwrap();
        assert_eq!(a, split(42, 97).unwrap());
        assert_eq!((a.train.len(), a.test.len()), (4704, 4705));
        let b = split(43, 97).unwrap();
        let ta: HashSet<_> = a.train.iter().collect();
        assert!(b.train.iter().any(|q| !ta.contains(q)));
    }

    #[test]
    fn split_file_round_trips() {
        let s = split(7, 5).unwrap();
        assert_eq!(SplitSpec::from_text(&s.to_text(), 7, 5).unwrap(), s);
    }

    #[test]
    fn split_file_rejects_wrong_label() {
        let text = "a,b,label,split\n1,2,4,train\n";
        assert!(SplitSpec::from_text(text, 0, 97).is_err());
    }
}
