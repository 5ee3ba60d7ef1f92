//! Token-text corpora: UTF-8, one sequence per line, whitespace-separated
//! decimal token ids. Blank lines are skipped.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numerics::RandomSource;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibSet {
    pub sequences: Vec<Vec<u32>>,
    pub vocab: usize,
    pub label: String,
}

impl CalibSet {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Parses token text, keeping at most `max_sequences` sequences truncated to
/// `seq_len` tokens each.
pub fn parse_sequences(
    text: &str,
    max_sequences: usize,
    seq_len: usize,
    vocab: usize,
) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if out.len() >= max_sequences {
            break;
        }
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut seq = Vec::new();
        for tok in line.split_whitespace().take(seq_len) {
            let id: u32 = tok.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("`{tok}` is not a token id"),
            })?;
            if id as usize >= vocab {
                return Err(Error::Range(format!(
                    "line {line_no}: token id {id} >= vocab {vocab}"
                )));
            }
            seq.push(id);
        }
        if !seq.is_empty() {
            out.push(seq);
        }
    }
    Ok(out)
}

pub fn load_sequences(
    path: impl AsRef<Path>,
    max_sequences: usize,
    seq_len: usize,
    vocab: usize,
) -> Result<CalibSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(CalibSet {
        sequences: parse_sequences(&text, max_sequences, seq_len, vocab)?,
        vocab,
        label: path.display().to_string(),
    })
}

pub fn write_sequences(path: impl AsRef<Path>, sequences: &[Vec<u32>]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for s in sequences {
        let line: Vec<String> = s.iter().map(u32::to_string).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Deterministic disjoint split; `fraction` of the sequences (rounded, at
/// least one on each side) go to the first set. Both halves keep the
/// original order.
pub fn split_eval(set: &CalibSet, fraction: f64, seed: u64) -> Result<(CalibSet, CalibSet)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Domain(format!("split fraction {fraction} not in (0, 1)")));
    }
    let n = set.len();
    if n < 2 {
        return Err(Error::Domain(format!("cannot split {n} sequences")));
    }
    let take = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut RandomSource::new(seed));
    let (a, b) = idx.split_at(take);
    let pick = |ids: &[usize], suffix: &str| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        CalibSet {
            sequences: ids.iter().map(|&i| set.sequences[i].clone()).collect(),
            vocab: set.vocab,
            label: format!("{}#{suffix}", set.label),
        }
    };
    Ok((pick(a, "calib"), pick(b, "heldout")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        std::fs::write(&p, "1 2 3\n4 5 6\n").unwrap();
        let set = load_sequences(&p, 2, 3, 10).unwrap();
        assert_eq!(set.sequences, vec![vec![1, 2, 3], vec![4, 5, 6]]);
        let one = load_sequences(&p, 1, 3, 10).unwrap();
        assert_eq!(one.len(), 1);
        let short = load_sequences(&p, 5, 2, 10).unwrap();
        assert_eq!(short.sequences, vec![vec![1, 2], vec![4, 5]]);
        assert_eq!(load_sequences(&p, 2, 3, 10).unwrap(), set);
    }

    #[test]
    fn parse_errors() {
        match parse_sequences("1 x 3\n", 4, 8, 10) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_sequences("1 2\n\n3 -1\n", 4, 8, 10) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_sequences("1 10\n", 4, 8, 10), Err(Error::Range(_))));
        assert!(matches!(
            load_sequences("/no/such/file", 1, 1, 2),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let set = CalibSet {
            sequences: (0..10).map(|i| vec![i]).collect(),
            vocab: 10,
            label: "x".into(),
        };
        let (a, b) = split_eval(&set, 0.5, 3).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let (a2, b2) = split_eval(&set, 0.5, 3).unwrap();
        assert_eq!((&a, &b), (&a2, &b2));
        let mut all: Vec<_> = a.sequences.iter().chain(&b.sequences).cloned().collect();
        all.sort();
        assert_eq!(all, set.sequences);
        let tiny = CalibSet {
            sequences: vec![vec![1]],
            ..set.clone()
        };
        assert!(matches!(split_eval(&tiny, 0.5, 1), Err(Error::Domain(_))));
        assert!(split_eval(&set, 1.0, 1).is_err());
    }
}
