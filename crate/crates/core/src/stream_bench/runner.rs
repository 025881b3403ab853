//! Runs one method over a scenario and collects metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::corruption::DomainSpec;
use super::dataset::SyntheticDataset;
use super::scenario::{Scenario, Stream};
use crate::adapter::{AdaptMode, AdaptationConfig, Adapter, Routing};
use crate::encoder::EncoderParams;
use crate::error::{PaintError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Paint,
    SourceFrozen,
    EntropyOnly,
    PaintNoPrompt,
    PaintNoEncoder,
    PaintOracle,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Paint,
        Method::SourceFrozen,
        Method::EntropyOnly,
        Method::PaintNoPrompt,
        Method::PaintNoEncoder,
        Method::PaintOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Paint => "paint",
            Method::SourceFrozen => "source-frozen",
            Method::EntropyOnly => "entropy-only",
            Method::PaintNoPrompt => "paint-no-prompt",
            Method::PaintNoEncoder => "paint-no-encoder",
            Method::PaintOracle => "paint-oracle",
        }
    }

    pub fn mode(self) -> AdaptMode {
        match self {
            Method::Paint | Method::PaintOracle => AdaptMode::PAINT,
            Method::SourceFrozen => AdaptMode::FROZEN,
            Method::EntropyOnly => AdaptMode::ENTROPY_ONLY,
            Method::PaintNoPrompt => AdaptMode::NO_PROMPT_TUNING,
            Method::PaintNoEncoder => AdaptMode::NO_ENCODER_TUNING,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = PaintError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| PaintError::UnknownMethod(s.to_string()))
    }
}

/// When the read-only source probe is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "every", content = "n")]
pub enum ProbeCadence {
    Never,
    /// Before the stream and after the last batch of every segment.
    #[default]
    Segment,
    /// Before the stream and after every `n`-th batch (and the last one).
    Batches(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch_index: usize,
    pub domain_id: usize,
    pub selected_entry: Option<usize>,
    pub was_new: bool,
    pub reliability: Option<f64>,
    pub mutual_info: f64,
    pub consistency: f64,
    pub correct: usize,
    pub samples: usize,
    pub prompt_count: usize,
}

impl BatchRecord {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.samples as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub domain_id: usize,
    pub domain: DomainSpec,
    pub batches: usize,
    pub correct: usize,
    pub samples: usize,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    /// Number of stream batches consumed before the probe.
    pub after_batches: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: Method,
    pub batches: Vec<BatchRecord>,
    pub domains: Vec<DomainSummary>,
    pub average_accuracy: f64,
    pub matching_accuracy: Option<f64>,
    pub final_prompt_count: usize,
    pub probe: Vec<ProbePoint>,
    pub sgd_steps: usize,
}

/// Sample-weighted accuracy over all batches.
pub fn average_accuracy(records: &[BatchRecord]) -> f64 {
    let correct: usize = records.iter().map(|r| r.correct).sum();
    let samples: usize = records.iter().map(|r| r.samples).sum();
    if samples == 0 {
        0.0
    } else {
        correct as f64 / samples as f64
    }
}

/// Fraction of batches whose entry's majority-origin domain is the batch's
/// own domain. Ties between origins go to the lowest domain id. `None` when
/// no batch selected an entry.
pub fn matching_accuracy(records: &[BatchRecord]) -> Option<f64> {
    let mut origins: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for r in records {
        if let Some(e) = r.selected_entry {
            *origins
                .entry(e)
                .or_default()
                .entry(r.domain_id)
                .or_default() += 1;
        }
    }
    if origins.is_empty() {
        return None;
    }
    let majority: BTreeMap<usize, usize> = origins
        .iter()
        .map(|(&e, counts)| {
            let mut best = (0usize, 0usize);
            for (&d, &c) in counts {
                if c > best.1 {
                    best = (d, c);
                }
            }
            (e, best.0)
        })
        .collect();
    let routed: Vec<_> = records
        .iter()
        .filter(|r| r.selected_entry.is_some())
        .collect();
    let hits = routed
        .iter()
        .filter(|r| majority[&r.selected_entry.unwrap()] == r.domain_id)
        .count();
    Some(hits as f64 / routed.len() as f64)
}

pub fn domain_summaries(records: &[BatchRecord], domains: &[DomainSpec]) -> Vec<DomainSummary> {
    domains
        .iter()
        .enumerate()
        .map(|(id, &domain)| {
            let rows: Vec<_> = records.iter().filter(|r| r.domain_id == id).collect();
            let correct = rows.iter().map(|r| r.correct).sum();
            let samples = rows.iter().map(|r| r.samples).sum();
            DomainSummary {
                domain_id: id,
                domain,
                batches: rows.len(),
                correct,
                samples,
                accuracy: if samples == 0 {
                    0.0
                } else {
                    correct as f64 / samples as f64
                },
            }
        })
        .collect()
}

/// Everything a run needs besides the method.
#[derive(Clone, Copy)]
pub struct RunSetup<'a> {
    pub source: &'a EncoderParams,
    pub config: &'a AdaptationConfig,
    pub scenario: &'a Scenario,
    pub pool: &'a SyntheticDataset,
    /// Clean labelled data for the source probe.
    pub probe: Option<&'a SyntheticDataset>,
    pub cadence: ProbeCadence,
}

/// The stream depends only on the adaptation seed, so methods run with the
/// same config see identical batches.
pub fn run_method(method: Method, setup: RunSetup<'_>) -> Result<RunMetrics> {
    let mut adapter = Adapter::new(setup.source, setup.config.clone(), method.mode())?;
    let stream = Stream::new(
        setup.scenario,
        setup.pool,
        setup.config.batch_size,
        setup.config.seed,
    )?;
    let total = stream.len();
    let mut oracle_entries: BTreeMap<usize, usize> = BTreeMap::new();
    let mut records = Vec::with_capacity(total);
    let mut probe = Vec::new();

    let run_probe = |adapter: &Adapter, after: usize, probe: &mut Vec<ProbePoint>| -> Result<()> {
        if let Some(data) = setup.probe {
            probe.push(ProbePoint {
                after_batches: after,
                accuracy: adapter.probe_accuracy(&data.images, &data.labels)?,
            });
        }
        Ok(())
    };
    if setup.cadence != ProbeCadence::Never {
        run_probe(&adapter, 0, &mut probe)?;
    }

    for batch in stream {
        let batch = batch?;
        let routing = if method == Method::PaintOracle {
            Routing::Fixed(oracle_entries.get(&batch.domain_id).copied())
        } else {
            Routing::Query
        };
        let out = adapter.adapt_batch_routed(&batch.images, routing)?;
        if method == Method::PaintOracle {
            if let Some(e) = out.selected_entry {
                oracle_entries.entry(batch.domain_id).or_insert(e);
            }
        }
        let correct = out
            .predictions
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
        records.push(BatchRecord {
            batch_index: batch.index,
            domain_id: batch.domain_id,
            selected_entry: out.selected_entry,
            was_new: out.was_new,
            reliability: out.reliability,
            mutual_info: out.losses.mutual_info,
            consistency: out.losses.consistency,
            correct,
            samples: batch.labels.len(),
            prompt_count: out.prompt_count_after,
        });

        let done = batch.index + 1;
        let probe_now = match setup.cadence {
            ProbeCadence::Never => false,
            ProbeCadence::Segment => {
                done == total || setup.scenario.schedule()[done].0 != batch.segment
            }
            ProbeCadence::Batches(n) => done == total || (n > 0 && done % n == 0),
        };
        if probe_now {
            run_probe(&adapter, done, &mut probe)?;
        }
    }

    Ok(RunMetrics {
        method,
        domains: domain_summaries(&records, &setup.scenario.domains()),
        average_accuracy: average_accuracy(&records),
        matching_accuracy: matching_accuracy(&records),
        final_prompt_count: adapter.memory().len(),
        probe,
        sgd_steps: adapter.sgd_steps(),
        batches: records,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
