//! Synthetic "majority token" classification task.
//!
//! Each sequence has a unique most-frequent token, which appears in more than
//! half of the positions. The label says whether that token belongs to a
//! seed-chosen positive half of the vocabulary. Training labels carry 10%
//! noise; validation labels are clean.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use crate::error::{Error, FormatError, Result};
use crate::rng::Rng;

pub const LABEL_NOISE: f64 = 0.1;
pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub vocab: usize,
    pub seq_len: usize,
    /// Positive half of the vocabulary.
    pub positive: Vec<bool>,
}

/// Most frequent token; ties go to the smaller token id.
pub fn majority_token(tokens: &[usize]) -> usize {
    let top = tokens.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; top + 1];
    for &t in tokens {
        counts[t] += 1;
    }
    counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(t, _)| t)
}

pub fn make_synthetic_task(
    seed: u64,
    num_examples: usize,
    seq_len: usize,
    vocab: usize,
) -> Result<Dataset> {
    if vocab < 2 || seq_len < 2 || num_examples < 2 {
        return Err(Error::Config(format!(
            "synthetic task needs vocab >= 2, seq_len >= 2 and at least 2 examples (got {vocab}, {seq_len}, {num_examples})"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut perm: Vec<usize> = (0..vocab).collect();
    rng.shuffle(&mut perm);
    let mut positive = vec![false; vocab];
    for &t in &perm[..vocab / 2] {
        positive[t] = true;
    }

    let majority = seq_len / 2 + 1;
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(num_examples);
    let mut attempts = 0usize;
    while examples.len() < num_examples {
        attempts += 1;
        if attempts > num_examples * 100 {
            return Err(Error::Config(
                "synthetic task cannot produce enough distinct sequences".into(),
            ));
        }
        let t = rng.below(vocab);
        let mut tokens = Vec::with_capacity(seq_len);
        tokens.extend(std::iter::repeat_n(t, majority));
        for _ in majority..seq_len {
            let mut o = rng.below(vocab - 1);
            if o >= t {
                o += 1;
            }
            tokens.push(o);
        }
        rng.shuffle(&mut tokens);
        if !seen.insert(tokens.clone()) {
            continue;
        }
        examples.push(Example {
            label: positive[t] as usize,
            tokens,
        });
    }

    let n_val =
        ((num_examples as f64 * VALIDATION_FRACTION).round() as usize).clamp(1, num_examples - 1);
    let val = examples.split_off(num_examples - n_val);
    let mut train = examples;
    for ex in &mut train {
        if rng.bernoulli(LABEL_NOISE) {
            ex.label = 1 - ex.label;
        }
    }
    Ok(Dataset {
        train,
        val,
        vocab,
        seq_len,
        positive,
    })
}

/// Writes `label<TAB>tok,tok,...` lines.
pub fn write_examples<W: Write>(mut w: W, examples: &[Example]) -> Result<()> {
    for ex in examples {
        let toks: Vec<String> = ex.tokens.iter().map(|t| t.to_string()).collect();
        writeln!(w, "{}\t{}", ex.label, toks.join(","))?;
    }
    Ok(())
}

pub fn read_examples<R: BufRead>(r: R) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| {
            Error::Format(FormatError::Malformed(format!(
                "dataset line {}: {what}",
                i + 1
            )))
        };
        let (label, toks) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
        let label = label.trim().parse().map_err(|_| bad("bad label"))?;
        let tokens = toks
            .trim()
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("bad token"))?;
        out.push(Example { tokens, label });
    }
    Ok(out)
}
