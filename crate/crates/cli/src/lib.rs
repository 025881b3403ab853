//! Experiment orchestration behind the `paint` binary: pretraining, single
//! adaptation runs, parameter sweeps and shuffled gradual runs, each writing
//! plain CSV and JSON artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use paint_core::adapter::AdaptationConfig;
use paint_core::checkpoint;
use paint_core::encoder::EncoderParams;
use paint_core::stream_bench::runner::{mean_std, ProbePoint};
use paint_core::stream_bench::{
    pretrain_source, run_method, DatasetSpec, Method, PretrainOptions, ProbeCadence, RunMetrics,
    RunSetup, ScenarioSpec, Split, SyntheticDataset,
};
use serde::{Deserialize, Serialize};

pub const BATCH_CSV: &str = "batches.csv";
pub const DOMAIN_CSV: &str = "domains.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const PRETRAIN_REPORT: &str = "pretrain_report.json";
pub const CHECKPOINT_STEM: &str = "source";
/// Batch size used by the bundled desk-scale experiments.
pub const DESK_BATCH_SIZE: usize = 32;

/// Everything one invocation needs. Unknown fields are rejected so typos in
/// config files surface immediately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub adaptation: AdaptationConfig,
    pub method: Method,
    pub scenario: ScenarioSpec,
    pub out: PathBuf,
    pub probe_cadence: ProbeCadence,
    /// Number of held-out clean images in the source probe.
    pub probe_size: usize,
    /// Manifest of the source checkpoint used by `adapt`, `sweep` and `gradual`.
    pub checkpoint: PathBuf,
    pub dataset: DatasetSpec,
    pub pretrain: PretrainOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            adaptation: AdaptationConfig::default(),
            method: Method::Paint,
            scenario: ScenarioSpec::default(),
            out: PathBuf::from("runs/latest"),
            probe_cadence: ProbeCadence::Segment,
            probe_size: 200,
            checkpoint: checkpoint::manifest_path(Path::new("runs/source"), CHECKPOINT_STEM),
            dataset: DatasetSpec::default(),
            pretrain: PretrainOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Sets the adaptation seed; pretraining keeps its own seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.adaptation.seed = seed;
        self
    }
}

/// Sweepable hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SweepParam {
    Eta,
    Phi,
    Beta,
    PromptLen,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Eta => "eta",
            SweepParam::Phi => "phi",
            SweepParam::Beta => "beta",
            SweepParam::PromptLen => "prompt_len",
        }
    }

    pub fn apply(self, config: &mut AdaptationConfig, value: f64) -> Result<()> {
        match self {
            SweepParam::Eta => config.eta = value,
            SweepParam::Phi => config.phi = value,
            SweepParam::Beta => config.beta = value,
            SweepParam::PromptLen => {
                if value < 1.0 || value.fract() != 0.0 {
                    bail!("prompt_len must be a positive integer, got {value}");
                }
                config.prompt_len = value as usize;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub clean_accuracy: f64,
    pub epoch_losses: Vec<f64>,
    pub fingerprint: String,
    pub manifest: PathBuf,
}

/// JSON run summary; every number is derivable from the per-batch CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub batches: usize,
    pub average_accuracy: f64,
    pub matching_accuracy: Option<f64>,
    pub final_prompt_count: usize,
    pub sgd_steps: usize,
    pub source_probe: Vec<ProbePoint>,
}

impl RunSummary {
    pub fn from_metrics(m: &RunMetrics) -> Self {
        Self {
            method: m.method,
            batches: m.batches.len(),
            average_accuracy: m.average_accuracy,
            matching_accuracy: m.matching_accuracy,
            final_prompt_count: m.final_prompt_count,
            sgd_steps: m.sgd_steps,
            source_probe: m.probe.clone(),
        }
    }
}

/// One row of the per-batch CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub batch: usize,
    pub domain_id: usize,
    pub domain: String,
    pub selected_entry: Option<usize>,
    pub was_new: bool,
    pub reliability: Option<f64>,
    pub l_mi: f64,
    pub l_ic: f64,
    pub batch_accuracy: f64,
    pub correct: usize,
    pub samples: usize,
    pub prompt_count: usize,
    /// Cumulative gradient steps after this batch.
    pub sgd_steps: usize,
    /// Probe taken before this batch (pre-adaptation probe on batch 0).
    pub probe_before: Option<f64>,
    /// Probe taken right after this batch.
    pub probe_after: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub domain_id: usize,
    pub domain: String,
    pub batches: usize,
    pub correct: usize,
    pub samples: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub average_accuracy: f64,
    pub prompt_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradualRow {
    pub shuffle: usize,
    pub order: String,
    pub average_accuracy: f64,
    pub prompt_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradualSummary {
    pub method: Method,
    pub shuffles: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains the source model and writes `source.json`/`source.bin` plus a
/// clean-accuracy report into `config.out`.
pub fn cmd_pretrain(config: &RunConfig) -> Result<PretrainSummary> {
    create_dir(&config.out)?;
    let train = config.dataset.generate(Split::Train)?;
    let held_out = config.dataset.generate(Split::HeldOut)?;
    let report = pretrain_source(&train, &held_out, &config.pretrain).context("pretraining failed")?;
    let manifest = checkpoint::save_encoder(&report.params, &config.out, CHECKPOINT_STEM)?;
    let summary = PretrainSummary {
        clean_accuracy: report.clean_accuracy,
        epoch_losses: report.epoch_losses,
        fingerprint: report.params.fingerprint(),
        manifest,
    };
    write_json(&config.out.join(PRETRAIN_REPORT), &summary)?;
    Ok(summary)
}

pub fn load_source(path: &Path) -> Result<EncoderParams> {
    if !path.is_file() {
        bail!("source checkpoint not found: {}", path.display());
    }
    checkpoint::load_encoder(path).with_context(|| format!("cannot load source checkpoint {}", path.display()))
}

/// Target pool and clean probe set for a config.
pub struct BenchData {
    pub pool: SyntheticDataset,
    pub probe: SyntheticDataset,
}

impl BenchData {
    pub fn generate(config: &RunConfig) -> Result<Self> {
        let pool = config.dataset.generate(Split::TargetPool)?;
        let mut probe = config.dataset.generate(Split::HeldOut)?;
        let n = config.probe_size.min(probe.len());
        probe.images.truncate(n);
        probe.labels.truncate(n);
        Ok(Self { pool, probe })
    }
}

/// Runs one method with an already loaded source and data.
pub fn run_with(config: &RunConfig, source: &EncoderParams, data: &BenchData) -> Result<RunMetrics> {
    let scenario = config.scenario.build()?;
    let probe = (config.probe_cadence != ProbeCadence::Never && !data.probe.is_empty()).then_some(&data.probe);
    let metrics = run_method(
        config.method,
        RunSetup {
            source,
            config: &config.adaptation,
            scenario: &scenario,
            pool: &data.pool,
            probe,
            cadence: config.probe_cadence,
        },
    )?;
    Ok(metrics)
}

pub fn batch_rows(metrics: &RunMetrics, scenario: &ScenarioSpec) -> Result<Vec<BatchRow>> {
    let domains = scenario.build()?.domains();
    let mut steps = 0;
    let adapts = metrics.sgd_steps > 0;
    Ok(metrics
        .batches
        .iter()
        .map(|b| {
            steps += usize::from(adapts);
            let probe_at = |after: usize| metrics.probe.iter().find(|p| p.after_batches == after).map(|p| p.accuracy);
            BatchRow {
                batch: b.batch_index,
                domain_id: b.domain_id,
                domain: domains[b.domain_id].to_string(),
                selected_entry: b.selected_entry,
                was_new: b.was_new,
                reliability: b.reliability,
                l_mi: b.mutual_info,
                l_ic: b.consistency,
                batch_accuracy: b.accuracy(),
                correct: b.correct,
                samples: b.samples,
                prompt_count: b.prompt_count,
                sgd_steps: steps,
                probe_before: if b.batch_index == 0 { probe_at(0) } else { None },
                probe_after: probe_at(b.batch_index + 1),
            }
        })
        .collect())
}

pub fn domain_rows(metrics: &RunMetrics) -> Vec<DomainRow> {
    metrics
        .domains
        .iter()
        .map(|d| DomainRow {
            domain_id: d.domain_id,
            domain: d.domain.to_string(),
            batches: d.batches,
            correct: d.correct,
            samples: d.samples,
            accuracy: d.accuracy,
        })
        .collect()
}

/// Writes the per-batch CSV, per-domain CSV and JSON summary of a run.
pub fn write_run(dir: &Path, config: &RunConfig, metrics: &RunMetrics) -> Result<RunSummary> {
    create_dir(dir)?;
    write_csv(&dir.join(BATCH_CSV), &batch_rows(metrics, &config.scenario)?)?;
    write_csv(&dir.join(DOMAIN_CSV), &domain_rows(metrics))?;
    let summary = RunSummary::from_metrics(metrics);
    write_json(&dir.join(SUMMARY_JSON), &summary)?;
    Ok(summary)
}

/// Loads the checkpoint, adapts over the configured scenario and writes the
/// run artifacts into `config.out`.
pub fn cmd_adapt(config: &RunConfig) -> Result<RunSummary> {
    let source = load_source(&config.checkpoint)?;
    let data = BenchData::generate(config)?;
    let metrics = run_with(config, &source, &data)?;
    write_run(&config.out, config, &metrics)
}

/// One run per value of `param`; writes `sweep_<param>.csv`.
pub fn cmd_sweep(config: &RunConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let source = load_source(&config.checkpoint)?;
    let data = BenchData::generate(config)?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut c = config.clone();
        c.probe_cadence = ProbeCadence::Never;
        param.apply(&mut c.adaptation, value)?;
        c.adaptation
            .validate()
            .with_context(|| format!("{} = {value}", param.name()))?;
        let m = run_with(&c, &source, &data)?;
        rows.push(SweepRow {
            value,
            average_accuracy: m.average_accuracy,
            prompt_count: m.final_prompt_count,
        });
    }
    create_dir(&config.out)?;
    write_csv(&config.out.join(format!("sweep_{}.csv", param.name())), &rows)?;
    Ok(rows)
}

/// Gradual scenario under `shuffles` seeded kind orders; writes
/// `gradual.csv` and `gradual_summary.json`.
pub fn cmd_gradual(config: &RunConfig, shuffles: usize, batches_per_severity: usize) -> Result<GradualSummary> {
    if shuffles == 0 {
        bail!("gradual needs at least one shuffle");
    }
    let source = load_source(&config.checkpoint)?;
    let data = BenchData::generate(config)?;
    let mut rows = Vec::with_capacity(shuffles);
    for shuffle in 0..shuffles {
        let mut c = config.clone();
        c.probe_cadence = ProbeCadence::Never;
        c.scenario = ScenarioSpec::Gradual {
            kinds: paint_core::stream_bench::CorruptionKind::ALL.to_vec(),
            batches_per_severity,
            shuffle_seed: Some(config.adaptation.seed.wrapping_add(shuffle as u64)),
        };
        let scenario = c.scenario.build()?;
        let order: Vec<String> = scenario
            .segments
            .iter()
            .step_by(paint_core::stream_bench::scenario::GRADUAL_RAMP.len())
            .map(|s| s.domain.kind.to_string())
            .collect();
        let m = run_with(&c, &source, &data)?;
        rows.push(GradualRow {
            shuffle,
            order: order.join(">"),
            average_accuracy: m.average_accuracy,
            prompt_count: m.final_prompt_count,
        });
    }
    let accs: Vec<f64> = rows.iter().map(|r| r.average_accuracy).collect();
    let (mean, std) = mean_std(&accs);
    let summary = GradualSummary {
        method: config.method,
        shuffles,
        mean_accuracy: mean,
        std_accuracy: std,
    };
    create_dir(&config.out)?;
    write_csv(&config.out.join("gradual.csv"), &rows)?;
    write_json(&config.out.join("gradual_summary.json"), &summary)?;
    Ok(summary)
}

/// Resolves `--scenario`: a preset name or a path to a JSON scenario spec.
pub fn resolve_scenario(arg: &str, seed: u64) -> Result<ScenarioSpec> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read scenario {}", path.display()))?;
        return serde_json::from_str(&text).with_context(|| format!("invalid scenario {}", path.display()));
    }
    Ok(ScenarioSpec::preset(arg, seed)?)
}
