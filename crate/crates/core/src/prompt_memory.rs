//! Key-value prompt memory and the batch-level query mechanism.
//!
//! Each entry pairs a key in feature space with a prompt-token matrix.
//! A batch selects an entry by per-sample cosine retrieval followed by a
//! majority vote; when the mean similarity between the batch queries and the
//! voted key falls below the reliability threshold, a fresh entry is
//! allocated instead. Keys only move through [`PromptMemory::update_key`].

use rand::Rng;

use crate::diffcore::Tensor;
use crate::error::{PaintError, Result};

/// Half-width of the uniform distribution used to initialize new prompts.
pub const PROMPT_INIT_RANGE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEntry {
    pub key: Vec<f64>,
    /// `[L_p, D_e]`
    pub value: Tensor,
    /// Batch index at which the entry was allocated.
    pub created_at: usize,
    pub update_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptMemory {
    entries: Vec<PromptEntry>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(PaintError::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(PaintError::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean of the rows of a `[B, D]` query matrix.
pub fn mean_query(queries: &Tensor) -> Vec<f64> {
    let rows = queries.shape()[0];
    let width = queries.shape()[1];
    let mut mean = vec![0.0; width];
    for r in 0..rows {
        for (m, q) in mean.iter_mut().zip(queries.row(r)) {
            *m += q;
        }
    }
    if rows > 0 {
        mean.iter_mut().for_each(|m| *m /= rows as f64);
    }
    mean
}

/// Most frequent index; ties go to the lowest index. Empty input yields 0.
pub fn vote(choices: &[usize]) -> usize {
    let Some(&max) = choices.iter().max() else {
        return 0;
    };
    let mut counts = vec![0usize; max + 1];
    for &c in choices {
        counts[c] += 1;
    }
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Mean cosine similarity between each query row and `key`.
pub fn reliability(queries: &Tensor, key: &[f64]) -> Result<f64> {
    let rows = queries.shape()[0];
    if rows == 0 {
        return Err(PaintError::EmptyBatch);
    }
    let mut total = 0.0;
    for r in 0..rows {
        total += cosine(queries.row(r), key)?;
    }
    Ok(total / rows as f64)
}

/// Outcome of the batch-level query.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub was_new: bool,
    /// Mean matching score of the voted entry; absent when memory was empty.
    pub reliability: Option<f64>,
    /// Per-sample retrieval choices before voting (empty when memory was empty).
    pub choices: Vec<usize>,
}

impl PromptMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PromptEntry] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> Result<&PromptEntry> {
        self.entries.get(index).ok_or(PaintError::EntryIndex {
            index,
            len: self.entries.len(),
        })
    }

    /// Mutable access to an entry's prompt value.
    pub fn value_mut(&mut self, index: usize) -> Result<&mut Tensor> {
        let len = self.entries.len();
        self.entries
            .get_mut(index)
            .map(|e| &mut e.value)
            .ok_or(PaintError::EntryIndex { index, len })
    }

    pub(crate) fn push_entry(&mut self, entry: PromptEntry) {
        self.entries.push(entry);
    }

    /// Entry whose key has the highest cosine similarity to `query`.
    pub fn retrieve(&self, query: &[f64]) -> Result<usize> {
        if self.entries.is_empty() {
            return Err(PaintError::EmptyMemory);
        }
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (j, e) in self.entries.iter().enumerate() {
            let s = cosine(query, &e.key)?;
            if s > best_score {
                best = j;
                best_score = s;
            }
        }
        Ok(best)
    }

    /// Appends an entry keyed by the mean query with a prompt drawn uniformly
    /// from `[-PROMPT_INIT_RANGE, PROMPT_INIT_RANGE]`.
    pub fn allocate<R: Rng>(
        &mut self,
        queries: &Tensor,
        prompt_len: usize,
        dim: usize,
        rng: &mut R,
        batch_index: usize,
    ) -> Result<usize> {
        let key = mean_query(queries);
        if norm(&key) == 0.0 {
            return Err(PaintError::DegenerateKey);
        }
        let data = (0..prompt_len * dim)
            .map(|_| rng.random_range(-PROMPT_INIT_RANGE..=PROMPT_INIT_RANGE))
            .collect();
        self.entries.push(PromptEntry {
            key,
            value: Tensor::new(vec![prompt_len, dim], data)?,
            created_at: batch_index,
            update_count: 0,
        });
        Ok(self.entries.len() - 1)
    }

    /// Moving average `k ← γ·k + (1 − γ)·mean(queries)`.
    pub fn update_key(&mut self, index: usize, queries: &Tensor, gamma: f64) -> Result<()> {
        let mean = mean_query(queries);
        let len = self.entries.len();
        let entry = self
            .entries
            .get_mut(index)
            .ok_or(PaintError::EntryIndex { index, len })?;
        if mean.len() != entry.key.len() {
            return Err(PaintError::Dimension {
                expected: entry.key.len(),
                got: mean.len(),
            });
        }
        for (k, m) in entry.key.iter_mut().zip(&mean) {
            *k = gamma * *k + (1.0 - gamma) * m;
        }
        entry.update_count += 1;
        Ok(())
    }

    /// Retrieval, vote and reliability check for one batch of queries;
    /// allocates a new entry when the memory is empty or `r_s < eta`.
    pub fn select_or_allocate<R: Rng>(
        &mut self,
        queries: &Tensor,
        eta: f64,
        prompt_len: usize,
        dim: usize,
        rng: &mut R,
        batch_index: usize,
    ) -> Result<Selection> {
        if queries.shape()[0] == 0 {
            return Err(PaintError::EmptyBatch);
        }
        if self.entries.is_empty() {
            let index = self.allocate(queries, prompt_len, dim, rng, batch_index)?;
            return Ok(Selection {
                index,
                was_new: true,
                reliability: None,
                choices: Vec::new(),
            });
        }
        let choices = (0..queries.shape()[0])
            .map(|r| self.retrieve(queries.row(r)))
            .collect::<Result<Vec<_>>>()?;
        let voted = vote(&choices);
        let score = reliability(queries, &self.entries[voted].key)?;
        if score < eta {
            let index = self.allocate(queries, prompt_len, dim, rng, batch_index)?;
            Ok(Selection {
                index,
                was_new: true,
                reliability: Some(score),
                choices,
            })
        } else {
            Ok(Selection {
                index: voted,
                was_new: false,
                reliability: Some(score),
                choices,
            })
        }
    }
}
