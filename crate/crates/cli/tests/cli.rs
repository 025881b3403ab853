use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use paint_cli::{
    cmd_adapt, cmd_gradual, cmd_pretrain, cmd_sweep, BatchRow, DomainRow, RunConfig, RunSummary, SweepParam,
    BATCH_CSV, DOMAIN_CSV, PRETRAIN_REPORT, SUMMARY_JSON,
};
use paint_core::encoder::EncoderConfig;
use paint_core::stream_bench::{CorruptionKind, DatasetSpec, Method, PretrainOptions, ScenarioSpec};
use tempfile::TempDir;

fn small_config(dir: &Path) -> RunConfig {
    let mut c = RunConfig {
        dataset: DatasetSpec {
            train_size: 300,
            held_out_size: 60,
            target_pool_size: 200,
            ..DatasetSpec::default()
        },
        pretrain: PretrainOptions {
            encoder: EncoderConfig {
                dim: 16,
                depth: 2,
                heads: 2,
                ..EncoderConfig::default()
            },
            epochs: 2,
            min_accuracy: None,
            ..PretrainOptions::default()
        },
        scenario: ScenarioSpec::Sequential {
            kinds: vec![CorruptionKind::GaussianNoise, CorruptionKind::ContrastReduction, CorruptionKind::Occlusion],
            severity: 5,
            batches_per_domain: 3,
            shuffle_seed: None,
        },
        probe_size: 40,
        out: dir.join("source"),
        ..RunConfig::default()
    };
    c.adaptation.batch_size = 16;
    c.adaptation.lr = 0.01;
    c.checkpoint = paint_core::checkpoint::manifest_path(&dir.join("source"), "source");
    c
}

fn pretrained() -> (TempDir, RunConfig) {
    let dir = TempDir::new().unwrap();
    let c = small_config(dir.path());
    cmd_pretrain(&c).unwrap();
    (dir, c)
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    csv::Reader::from_path(path).unwrap().deserialize().map(Result::unwrap).collect()
}

#[test]
fn pretrain_creates_directory_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let mut c = small_config(dir.path());
    c.out = dir.path().join("a/nested");
    let first = cmd_pretrain(&c).unwrap();
    assert!(c.out.join("source.json").is_file());
    assert!(c.out.join("source.bin").is_file());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(c.out.join(PRETRAIN_REPORT)).unwrap()).unwrap();
    assert_eq!(report["clean_accuracy"].as_f64().unwrap(), first.clean_accuracy);

    let mut again = c.clone();
    again.out = dir.path().join("b");
    let second = cmd_pretrain(&again).unwrap();
    assert_eq!(first.fingerprint, second.fingerprint);
    assert_eq!(
        fs::read(c.out.join("source.bin")).unwrap(),
        fs::read(again.out.join("source.bin")).unwrap()
    );
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nowhere/source.json");
    let out = Command::new(env!("CARGO_BIN_EXE_paint"))
        .args(["adapt", "--checkpoint"])
        .arg(&missing)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    assert!(stderr.contains(&missing.display().to_string()), "{stderr}");
}

#[test]
fn unknown_method_and_scenario_fail_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_paint"))
        .args(["adapt", "--scenario", "sideways"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sideways"));
    let out = Command::new(env!("CARGO_BIN_EXE_paint"))
        .args(["adapt", "--method", "paint-deluxe"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn summary_is_recomputable_from_batch_csv() {
    let (dir, mut c) = pretrained();
    c.out = dir.path().join("run");
    let summary = cmd_adapt(&c).unwrap();
    let rows: Vec<BatchRow> = read_rows(&c.out.join(BATCH_CSV));
    let on_disk: RunSummary = serde_json::from_str(&fs::read_to_string(c.out.join(SUMMARY_JSON)).unwrap()).unwrap();
    assert_eq!(on_disk, summary);
    assert_eq!(rows.len(), 9);
    assert_eq!(summary.batches, rows.len());

    let correct: usize = rows.iter().map(|r| r.correct).sum();
    let samples: usize = rows.iter().map(|r| r.samples).sum();
    assert_eq!(summary.average_accuracy, correct as f64 / samples as f64);
    assert_eq!(summary.final_prompt_count, rows.last().unwrap().prompt_count);
    assert_eq!(summary.sgd_steps, rows.last().unwrap().sgd_steps);
    for r in &rows {
        assert_eq!(r.batch_accuracy, r.correct as f64 / r.samples as f64);
    }

    // Majority-origin domain per entry, ties to the lowest domain id.
    let mut origins: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for r in &rows {
        let counts = origins.entry(r.selected_entry.unwrap()).or_insert_with(|| vec![0; 3]);
        counts[r.domain_id] += 1;
    }
    let owner = |e: usize| {
        let counts = &origins[&e];
        let max = *counts.iter().max().unwrap();
        counts.iter().position(|&c| c == max).unwrap()
    };
    let hits = rows.iter().filter(|r| owner(r.selected_entry.unwrap()) == r.domain_id).count();
    assert_eq!(summary.matching_accuracy, Some(hits as f64 / rows.len() as f64));

    let mut probe = vec![(0, rows[0].probe_before.unwrap())];
    probe.extend(rows.iter().filter_map(|r| r.probe_after.map(|a| (r.batch + 1, a))));
    let expect: Vec<(usize, f64)> = summary.source_probe.iter().map(|p| (p.after_batches, p.accuracy)).collect();
    assert_eq!(probe, expect);
    assert_eq!(probe.len(), 4);

    let domains: Vec<DomainRow> = read_rows(&c.out.join(DOMAIN_CSV));
    assert_eq!(domains.len(), 3);
    for d in &domains {
        let of: Vec<_> = rows.iter().filter(|r| r.domain_id == d.domain_id).collect();
        assert_eq!(d.batches, of.len());
        assert_eq!(d.correct, of.iter().map(|r| r.correct).sum::<usize>());
        assert_eq!(d.accuracy, d.correct as f64 / d.samples as f64);
    }
}

#[test]
fn repeated_runs_write_identical_files() {
    let (dir, mut c) = pretrained();
    c.out = dir.path().join("one");
    cmd_adapt(&c).unwrap();
    c.out = dir.path().join("two");
    cmd_adapt(&c).unwrap();
    for f in [BATCH_CSV, DOMAIN_CSV, SUMMARY_JSON] {
        assert_eq!(
            fs::read(dir.path().join("one").join(f)).unwrap(),
            fs::read(dir.path().join("two").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn frozen_source_takes_no_steps() {
    let (dir, mut c) = pretrained();
    c.out = dir.path().join("frozen");
    c.method = Method::SourceFrozen;
    let s = cmd_adapt(&c).unwrap();
    assert_eq!(s.sgd_steps, 0);
    assert_eq!(s.final_prompt_count, 0);
    let rows: Vec<BatchRow> = read_rows(&c.out.join(BATCH_CSV));
    assert!(rows.iter().all(|r| r.sgd_steps == 0 && r.selected_entry.is_none()));
}

#[test]
fn sweep_and_gradual_write_their_tables() {
    let (dir, mut c) = pretrained();
    c.out = dir.path().join("sweep");
    let rows = cmd_sweep(&c, SweepParam::PromptLen, &[1.0, 2.0]).unwrap();
    assert_eq!(rows.len(), 2);
    let on_disk: Vec<paint_cli::SweepRow> = read_rows(&c.out.join("sweep_prompt_len.csv"));
    assert_eq!(on_disk, rows);
    assert!(cmd_sweep(&c, SweepParam::PromptLen, &[1.5]).is_err());

    c.out = dir.path().join("gradual");
    let g = cmd_gradual(&c, 2, 1).unwrap();
    assert_eq!(g.shuffles, 2);
    assert!((0.0..=1.0).contains(&g.mean_accuracy));
    assert!(c.out.join("gradual.csv").is_file());
}

#[test]
fn config_files_reject_unknown_fields() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, r#"{"adaptation": {"eta": 0.4}, "methd": "paint"}"#).unwrap();
    assert!(RunConfig::from_json_file(&path).is_err());
    fs::write(&path, r#"{"adaptation": {"eta": 0.4}}"#).unwrap();
    let c = RunConfig::from_json_file(&path).unwrap();
    assert_eq!(c.adaptation.eta, 0.4);
    assert_eq!(c.adaptation.phi, RunConfig::default().adaptation.phi);
}
