//! Domain sequences and the seeded batch stream drawn from them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corruption::{CorruptionKind, DomainSpec};
use super::dataset::SyntheticDataset;
use crate::encoder::Image;
use crate::error::{PaintError, Result};

/// Severity ramp applied to each corruption kind in the gradual scenario.
pub const GRADUAL_RAMP: [u8; 9] = [1, 2, 3, 4, 5, 4, 3, 2, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub domain: DomainSpec,
    pub batches: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub segments: Vec<Segment>,
}

impl Scenario {
    /// One segment per kind, all at the same severity.
    pub fn sequential(
        kinds: &[CorruptionKind],
        severity: u8,
        batches_per_domain: usize,
    ) -> Result<Self> {
        let segments = kinds
            .iter()
            .map(|&k| {
                Ok(Segment {
                    domain: DomainSpec::new(k, severity)?,
                    batches: batches_per_domain,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { segments })
    }

    /// Distinct domains in order of first appearance.
    pub fn domains(&self) -> Vec<DomainSpec> {
        let mut seen = Vec::new();
        for s in &self.segments {
            if !seen.contains(&s.domain) {
                seen.push(s.domain);
            }
        }
        seen
    }

    pub fn domain_id(&self, domain: &DomainSpec) -> Option<usize> {
        self.domains().iter().position(|d| d == domain)
    }

    pub fn total_batches(&self) -> usize {
        self.segments.iter().map(|s| s.batches).sum()
    }

    /// `(segment index, domain)` of every batch in stream order.
    pub fn schedule(&self) -> Vec<(usize, DomainSpec)> {
        self.segments
            .iter()
            .enumerate()
            .flat_map(|(i, s)| std::iter::repeat_n((i, s.domain), s.batches))
            .collect()
    }
}

/// Per kind, severities 1→5→1 with `batches_per_severity` batches each.
pub fn build_gradual_scenario(kinds: &[CorruptionKind], batches_per_severity: usize) -> Scenario {
    let segments = kinds
        .iter()
        .flat_map(|&kind| {
            GRADUAL_RAMP.iter().map(move |&severity| Segment {
                domain: DomainSpec { kind, severity },
                batches: batches_per_severity,
            })
        })
        .collect();
    Scenario { segments }
}

pub fn shuffled_kinds<R: Rng>(kinds: &[CorruptionKind], rng: &mut R) -> Vec<CorruptionKind> {
    let mut out = kinds.to_vec();
    out.shuffle(rng);
    out
}

/// Serializable description of a scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ScenarioSpec {
    Sequential {
        kinds: Vec<CorruptionKind>,
        severity: u8,
        batches_per_domain: usize,
        #[serde(default)]
        shuffle_seed: Option<u64>,
    },
    Gradual {
        kinds: Vec<CorruptionKind>,
        batches_per_severity: usize,
        #[serde(default)]
        shuffle_seed: Option<u64>,
    },
    Custom {
        segments: Vec<Segment>,
    },
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec::Sequential {
            kinds: CorruptionKind::ALL.to_vec(),
            severity: 5,
            batches_per_domain: 20,
            shuffle_seed: None,
        }
    }
}

impl ScenarioSpec {
    /// Named presets: `sequential`, `shuffled` and `gradual`.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let kinds = CorruptionKind::ALL.to_vec();
        match name {
            "sequential" => Ok(Self::default()),
            "shuffled" => Ok(ScenarioSpec::Sequential {
                kinds,
                severity: 5,
                batches_per_domain: 20,
                shuffle_seed: Some(seed),
            }),
            "gradual" => Ok(ScenarioSpec::Gradual {
                kinds,
                batches_per_severity: 4,
                shuffle_seed: Some(seed),
            }),
            other => Err(PaintError::Config(format!(
                "unknown scenario `{other}` (expected sequential, shuffled or gradual)"
            ))),
        }
    }

    pub fn build(&self) -> Result<Scenario> {
        let order = |kinds: &[CorruptionKind], seed: &Option<u64>| match seed {
            Some(s) => shuffled_kinds(kinds, &mut ChaCha8Rng::seed_from_u64(*s)),
            None => kinds.to_vec(),
        };
        match self {
            ScenarioSpec::Sequential {
                kinds,
                severity,
                batches_per_domain,
                shuffle_seed,
            } => Scenario::sequential(&order(kinds, shuffle_seed), *severity, *batches_per_domain),
            ScenarioSpec::Gradual {
                kinds,
                batches_per_severity,
                shuffle_seed,
            } => Ok(build_gradual_scenario(
                &order(kinds, shuffle_seed),
                *batches_per_severity,
            )),
            ScenarioSpec::Custom { segments } => {
                for s in segments {
                    DomainSpec::new(s.domain.kind, s.domain.severity)?;
                }
                Ok(Scenario {
                    segments: segments.clone(),
                })
            }
        }
    }
}

/// One batch of the target stream. Labels and domain are for scoring only.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamBatch {
    pub index: usize,
    pub segment: usize,
    pub domain: DomainSpec,
    pub domain_id: usize,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

/// Reproducible batch generator: batch `i` depends only on
/// `(scenario, pool, batch_size, seed, i)`.
pub struct Stream<'a> {
    scenario: &'a Scenario,
    schedule: Vec<(usize, DomainSpec)>,
    domains: Vec<DomainSpec>,
    pool: &'a SyntheticDataset,
    batch_size: usize,
    seed: u64,
    next: usize,
}

impl<'a> Stream<'a> {
    pub fn new(
        scenario: &'a Scenario,
        pool: &'a SyntheticDataset,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if pool.is_empty() || batch_size == 0 {
            return Err(PaintError::EmptyBatch);
        }
        Ok(Self {
            schedule: scenario.schedule(),
            domains: scenario.domains(),
            scenario,
            pool,
            batch_size,
            seed,
            next: 0,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        self.scenario
    }

    pub fn len(&self) -> usize {
        self.schedule.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schedule.is_empty()
    }

    pub fn batch(&self, index: usize) -> Result<StreamBatch> {
        let &(segment, domain) = self.schedule.get(index).ok_or(PaintError::EntryIndex {
            index,
            len: self.schedule.len(),
        })?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ index as u64);
        let mut images = Vec::with_capacity(self.batch_size);
        let mut labels = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let i = rng.random_range(0..self.pool.len());
            images.push(domain.apply(&self.pool.images[i], &mut rng)?);
            labels.push(self.pool.labels[i]);
        }
        Ok(StreamBatch {
            index,
            segment,
            domain,
            domain_id: self
                .domains
                .iter()
                .position(|d| *d == domain)
                .expect("domain in scenario"),
            images,
            labels,
        })
    }
}

impl Iterator for Stream<'_> {
    type Item = Result<StreamBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.schedule.len() {
            return None;
        }
        let b = self.batch(self.next);
        self.next += 1;
        Some(b)
    }
}
