//! Word-level Levenshtein alignment and corpus WER.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered word tokens of one sentence. Tokens never contain whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    /// Builds a sequence from already-split tokens, dropping empty ones and
    /// splitting any token that still contains whitespace.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self(
            tokens
                .into_iter()
                .flat_map(|t| {
                    t.as_ref()
                        .split_whitespace()
                        .map(str::to_owned)
                        .collect::<Vec<_>>()
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }
}

/// Splits on runs of whitespace; lowercases when `normalize` is set.
pub fn tokenize(text: &str, normalize: bool) -> TokenSeq {
    TokenSeq(
        text.split_whitespace()
            .map(|t| if normalize { t.to_lowercase() } else { t.to_owned() })
            .collect(),
    )
}

/// Edit counts for one utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub insertions: u64,
    pub deletions: u64,
    pub substitutions: u64,
    pub ref_words: u64,
}

impl ErrorCounts {
    /// Counts supplied directly, with no alignment behind them. The whole
    /// total is booked as substitutions.
    pub fn from_totals(errors: u64, ref_words: u64) -> Self {
        Self {
            insertions: 0,
            deletions: 0,
            substitutions: errors,
            ref_words,
        }
    }

    pub fn total(&self) -> u64 {
        self.insertions + self.deletions + self.substitutions
    }

    pub fn hyp_words(&self) -> u64 {
        self.ref_words + self.insertions - self.deletions
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Step {
    Match,
    Substitute,
    Insert,
    Delete,
}

/// Minimum-edit-distance alignment with unit costs.
///
/// Among equal-cost paths the traceback prefers substitution (or match),
/// then insertion, then deletion. Only the split between the three kinds
/// depends on this; `total()` is the Levenshtein distance either way.
pub fn align(reference: &TokenSeq, hypothesis: &TokenSeq) -> ErrorCounts {
    let r = reference.as_slice();
    let h = hypothesis.as_slice();
    let (n, m) = (r.len(), h.len());
    let width = m + 1;
    let mut cost = vec![0u32; (n + 1) * width];
    for j in 0..=m {
        cost[j] = j as u32;
    }
    for i in 1..=n {
        cost[i * width] = i as u32;
        for j in 1..=m {
            let diag = cost[(i - 1) * width + j - 1] + u32::from(r[i - 1] != h[j - 1]);
            let ins = cost[i * width + j - 1] + 1;
            let del = cost[(i - 1) * width + j] + 1;
            cost[i * width + j] = diag.min(ins).min(del);
        }
    }

    let mut counts = ErrorCounts {
        ref_words: n as u64,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * width + j];
        let step = if i > 0 && j > 0 {
            let same = r[i - 1] == h[j - 1];
            if cost[(i - 1) * width + j - 1] + u32::from(!same) == here {
                if same {
                    Step::Match
                } else {
                    Step::Substitute
                }
            } else if cost[i * width + j - 1] + 1 == here {
                Step::Insert
            } else {
                Step::Delete
            }
        } else if j > 0 {
            Step::Insert
        } else {
            Step::Delete
        };
        match step {
            Step::Match => {
                i -= 1;
                j -= 1;
            }
            Step::Substitute => {
                counts.substitutions += 1;
                i -= 1;
                j -= 1;
            }
            Step::Insert => {
                counts.insertions += 1;
                j -= 1;
            }
            Step::Delete => {
                counts.deletions += 1;
                i -= 1;
            }
        }
    }
    counts
}

/// `Σ errors / Σ reference words`. May exceed 1.
pub fn corpus_wer<'a, I>(counts: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a ErrorCounts>,
{
    let (errors, words) = counts
        .into_iter()
        .fold((0u64, 0u64), |(e, w), c| (e + c.total(), w + c.ref_words));
    if words == 0 {
        return Err(Error::EmptyCorpusExposure);
    }
    Ok(errors as f64 / words as f64)
}
