//! Workflow orchestration behind the `braggrei` binary: run configuration,
//! the seven subcommand implementations, report files, and the run
//! manifest.
//!
//! Reports are written as CSV plus a JSON variant with identical fields.
//! Pipeline reports omit wall-clock fields so that two runs with the same
//! config and seed produce byte-identical files; timings live in
//! `run_manifest.json` instead.

use crate::byol::{train_encoder, EncoderModel, TrainingConfig, TrainingLog};
use crate::cluster::{
    fit_reference, partial_rei, rei_score, reports_csv, ClusterModel, REIReport,
    StreamEvent,
};
use crate::frame_store::{load_scan, ScanSet};
use crate::peak_extract::{extract_dataset, load_dataset, save_dataset, ExtractionConfig,
    PatchDataset};
use crate::synth::{generate_experiment, Scenario, SyntheticScanConfig, SCENARIO_FILE, TRUTH_FILE};
use crate::tune::{tune_grid, GridSummary};
use crate::util;
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

// ------------------------------------------------------------- run config

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Batch,
    Partial,
    Stream,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub baseline_scan: PathBuf,
    /// Defaults to the baseline scan when absent.
    #[serde(default)]
    pub reference_scan: Option<PathBuf>,
    #[serde(default)]
    pub test_scans: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
    pub t: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { k: 40, t: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub delta_omega: f64,
    pub n_repeats: usize,
    pub window: usize,
    pub stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::Batch,
            delta_omega: 40.0,
            n_repeats: 20,
            window: 24,
            stride: 8,
        }
    }
}

/// Full pipeline configuration (UTF-8 TOML on disk; flags override file
/// values, and the file overrides defaults). The seed is mandatory: runs
/// are never seeded from the wall clock.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub paths: PathsConfig,
    #[serde(default)]
    pub extraction: ExtractionConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.extraction.validate()?;
        self.training.validate()?;
        if self.cluster.k == 0 {
            return Err(Error::ConfigInvalid {
                field: "cluster.k".into(),
                reason: "must be >= 1".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.cluster.t) {
            return Err(Error::ConfigInvalid {
                field: "cluster.t".into(),
                reason: format!("must be in [0, 1], got {}", self.cluster.t),
            });
        }
        let check_dir = |name: &str, path: &Path| -> Result<()> {
            if !path.is_dir() {
                return Err(Error::ConfigInvalid {
                    field: name.into(),
                    reason: format!("scan directory `{}` does not exist", path.display()),
                });
            }
            Ok(())
        };
        check_dir("paths.baseline_scan", &self.paths.baseline_scan)?;
        if let Some(reference) = &self.paths.reference_scan {
            check_dir("paths.reference_scan", reference)?;
        }
        for (i, scan) in self.paths.test_scans.iter().enumerate() {
            check_dir(&format!("paths.test_scans[{i}]"), scan)?;
        }
        Ok(())
    }
}

/// Parse a config file; returns the config plus the SHA-256 of the raw
/// bytes (recorded on every artifact the run produces).
pub fn load_config(path: impl AsRef<Path>) -> Result<(RunConfig, String)> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| Error::Malformed {
        path: path.to_path_buf(),
        reason: "config is not UTF-8".into(),
    })?;
    let config: RunConfig = toml::from_str(&text).map_err(|e| Error::ConfigInvalid {
        field: "config".into(),
        reason: e.to_string(),
    })?;
    Ok((config, util::sha256_hex(&bytes)))
}

// -------------------------------------------------------------- reporting

/// JSON report variant: identical row fields plus run provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportSet {
    pub config_hash: String,
    pub seed: u64,
    pub reports: Vec<REIReport>,
}

/// Write `reports.csv` (leading `#` provenance comment, then the fixed
/// column set) and `reports.json`.
pub fn write_reports(
    out_dir: &Path,
    reports: &[REIReport],
    config_hash: &str,
    seed: u64,
    include_timing: bool,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.to_path_buf(), e))?;
    let csv_path = out_dir.join("reports.csv");
    let body = reports_csv(reports, include_timing);
    let csv_text = format!("# config_hash={config_hash} seed={seed}\n{body}");
    std::fs::write(&csv_path, csv_text).map_err(|e| Error::io(csv_path.clone(), e))?;

    let json_path = out_dir.join("reports.json");
    let mut set = ReportSet {
        config_hash: config_hash.to_string(),
        seed,
        reports: reports.to_vec(),
    };
    if !include_timing {
        for r in &mut set.reports {
            r.eval_wall_seconds = 0.0;
        }
    }
    let text = serde_json::to_string_pretty(&set).expect("reports serialize");
    std::fs::write(&json_path, text).map_err(|e| Error::io(json_path.clone(), e))?;
    Ok((csv_path, json_path))
}

// ------------------------------------------------------------ subcommands

/// Generate a labeled scenario series into `out_dir/<scan_id>/`, each scan
/// with its `truth.json`, plus a `scenario.json` manifest.
pub fn cmd_synth(
    base: &SyntheticScanConfig,
    scenario: &Scenario,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.to_path_buf(), e))?;
    let (scans, manifest) = generate_experiment(base, scenario)?;
    let mut dirs = Vec::with_capacity(scans.len());
    for generated in &scans {
        let dir = out_dir.join(generated.scan.scan_id());
        crate::frame_store::write_scan(&generated.scan, &dir)?;
        crate::synth::save_truth(&generated.truth, dir.join(TRUTH_FILE))?;
        dirs.push(dir);
    }
    let manifest_path = out_dir.join(SCENARIO_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
    Ok(dirs)
}

/// Extract a scan directory into a patch dataset file pair.
pub fn cmd_extract(
    scan_dir: impl AsRef<Path>,
    cfg: &ExtractionConfig,
    out_bin: impl AsRef<Path>,
) -> Result<PatchDataset> {
    let scan = load_scan(scan_dir)?;
    let dataset = extract_dataset(&scan, cfg)?;
    save_dataset(&dataset, out_bin)?;
    Ok(dataset)
}

/// Train the encoder on a baseline dataset file; writes the checkpoint and
/// the per-epoch training log.
pub fn cmd_train(
    dataset_bin: impl AsRef<Path>,
    cfg: &TrainingConfig,
    out_checkpoint: impl AsRef<Path>,
    out_log: impl AsRef<Path>,
) -> Result<(EncoderModel, TrainingLog)> {
    let dataset = load_dataset(dataset_bin)?;
    let (model, log) = train_encoder(&dataset, cfg)?;
    model.save(out_checkpoint)?;
    log.save_csv(out_log)?;
    Ok((model, log))
}

/// Fit the reference cluster model from a dataset file and an encoder
/// checkpoint.
pub fn cmd_cluster(
    dataset_bin: impl AsRef<Path>,
    encoder_path: impl AsRef<Path>,
    k: usize,
    t: f64,
    seed: u64,
    out_model: impl AsRef<Path>,
) -> Result<ClusterModel> {
    let dataset = load_dataset(dataset_bin)?;
    let encoder = EncoderModel::load(encoder_path)?;
    let model = fit_reference(&encoder, &dataset, k, t, seed)?;
    model.save(out_model)?;
    Ok(model)
}

/// One evaluation input: either a scan directory (extracted on the fly) or
/// a pre-extracted dataset file.
#[derive(Clone, Debug)]
pub enum EvalInput {
    ScanDir(PathBuf),
    DatasetFile(PathBuf),
}

impl EvalInput {
    pub fn detect(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        if path.is_dir() {
            EvalInput::ScanDir(path)
        } else {
            EvalInput::DatasetFile(path)
        }
    }
}

fn load_eval_scan(input: &EvalInput) -> Result<ScanSet> {
    match input {
        EvalInput::ScanDir(dir) => load_scan(dir),
        EvalInput::DatasetFile(path) => Err(Error::ConfigInvalid {
            field: "test_scans".into(),
            reason: format!(
                "`{}` is a dataset file; partial and stream modes need scan directories",
                path.display()
            ),
        }),
    }
}

/// Evaluate test inputs and write report files (and per-scan stream series
/// in stream mode). `seed` drives the random starting angles of partial
/// mode.
#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    inputs: &[EvalInput],
    encoder: &EncoderModel,
    cluster: &ClusterModel,
    extraction: &ExtractionConfig,
    eval: &EvalConfig,
    seed: u64,
    out_dir: impl AsRef<Path>,
    config_hash: &str,
    include_timing: bool,
) -> Result<Vec<REIReport>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.to_path_buf(), e))?;
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let report = match eval.mode {
            EvalMode::Batch => {
                let dataset = match input {
                    EvalInput::ScanDir(dir) => {
                        let scan = load_scan(dir)?;
                        extract_dataset(&scan, extraction)?
                    }
                    EvalInput::DatasetFile(path) => load_dataset(path)?,
                };
                rei_score(&dataset, encoder, cluster)?
            }
            EvalMode::Partial => {
                let scan = load_eval_scan(input)?;
                let mut rng = ChaCha8Rng::seed_from_u64(util::derive_seed(
                    seed,
                    &format!("partial-{i}"),
                ));
                partial_rei(
                    &scan,
                    extraction,
                    encoder,
                    cluster,
                    eval.delta_omega,
                    eval.n_repeats,
                    &mut rng,
                )?
            }
            EvalMode::Stream => {
                let scan = load_eval_scan(input)?;
                let events =
                    stream_scan_via_bounded_queue(&scan, extraction, encoder, cluster, eval)?;
                let series_path =
                    out_dir.join(format!("stream_{}.csv", scan.scan_id().replace('/', "_")));
                write_stream_series(&series_path, scan.scan_id(), &events)?;
                summarize_stream(scan.scan_id(), &events)?
            }
        };
        reports.push(report);
    }
    write_reports(out_dir, &reports, config_hash, seed, include_timing)?;
    Ok(reports)
}

/// Stream a scan through a bounded frame queue: a producer thread decodes
/// frames while the consumer extracts, embeds, and scores. Queue depth
/// bounds memory regardless of scan length.
pub fn stream_scan_via_bounded_queue(
    scan: &ScanSet,
    extraction: &ExtractionConfig,
    encoder: &EncoderModel,
    cluster: &ClusterModel,
    eval: &EvalConfig,
) -> Result<Vec<StreamEvent>> {
    const QUEUE_DEPTH: usize = 8;
    let (tx, rx) = std::sync::mpsc::sync_channel(QUEUE_DEPTH);
    let producer_scan = scan.clone();
    let producer = std::thread::spawn(move || {
        for i in 0..producer_scan.n_frames() {
            let frame = producer_scan.corrected_frame(i).map(|o| o.frame);
            if tx.send(frame).is_err() {
                break;
            }
        }
    });

    let mut scorer = crate::cluster::StreamScorer::new(
        encoder,
        cluster,
        extraction.clone(),
        eval.window,
        eval.stride,
    )?;
    let mut events = Vec::new();
    for frame in rx {
        let frame = frame?;
        if let Some(event) = scorer.push_frame(&frame)? {
            events.push(event);
        }
    }
    producer.join().expect("frame producer thread panicked");
    Ok(events)
}

fn write_stream_series(path: &Path, scan_id: &str, events: &[StreamEvent]) -> Result<()> {
    let mut out = String::from("dataset_id,end_index,end_omega,rei,n_patches\n");
    for e in events {
        match e {
            StreamEvent::Score {
                end_index,
                end_omega,
                rei,
                n_patches,
            } => out.push_str(&format!(
                "{scan_id},{end_index},{end_omega},{rei},{n_patches}\n"
            )),
            StreamEvent::Gap {
                end_index,
                end_omega,
            } => out.push_str(&format!("{scan_id},{end_index},{end_omega},,\n")),
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.to_path_buf(), e))
}

/// Collapse a stream series into one report row (mean over scored
/// windows); the full series lives in the per-scan stream CSV.
fn summarize_stream(scan_id: &str, events: &[StreamEvent]) -> Result<REIReport> {
    let scores: Vec<(f64, usize)> = events
        .iter()
        .filter_map(|e| match e {
            StreamEvent::Score {
                rei, n_patches, ..
            } => Some((*rei, *n_patches)),
            StreamEvent::Gap { .. } => None,
        })
        .collect();
    if scores.is_empty() {
        return Err(Error::EmptyDataset {
            context: format!("stream of `{scan_id}` produced no scored windows"),
        });
    }
    let n_patches: usize = scores.iter().map(|(_, n)| n).sum();
    let mean = scores.iter().map(|(r, _)| r).sum::<f64>() / scores.len() as f64;
    Ok(REIReport {
        dataset_id: scan_id.to_string(),
        n_patches,
        n_uncertain: (mean * n_patches as f64).round() as usize,
        rei: mean,
        eval_wall_seconds: 0.0,
        partial: None,
    })
}

/// Grid search over (K, t); writes the grid CSV and a JSON summary with
/// the argmax.
#[allow(clippy::too_many_arguments)]
pub fn cmd_tune(
    encoder_path: impl AsRef<Path>,
    reference_bin: impl AsRef<Path>,
    elastic_bins: &[PathBuf],
    plastic_bins: &[PathBuf],
    ks: &[usize],
    ts: &[f64],
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<(usize, f64)> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.to_path_buf(), e))?;
    let encoder = EncoderModel::load(encoder_path)?;
    let reference = load_dataset(reference_bin)?;
    let load_group = |paths: &[PathBuf]| -> Result<Vec<PatchDataset>> {
        paths.iter().map(load_dataset).collect()
    };
    let elastic = load_group(elastic_bins)?;
    let plastic = load_group(plastic_bins)?;
    let (grid, (best_k, best_t)) = tune_grid(&encoder, &reference, &elastic, &plastic, ks, ts, seed)?;
    grid.save_csv(out_dir.join("sensitivity_grid.csv"))?;
    let summary = GridSummary {
        best_k,
        best_t,
        best_value: grid
            .cells
            .iter()
            .flatten()
            .copied()
            .filter(|v| v.is_finite())
            .fold(f64::NEG_INFINITY, f64::max),
        all_negative: grid.all_negative,
        grid,
    };
    let path = out_dir.join("sensitivity_summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    Ok((best_k, best_t))
}

// --------------------------------------------------------------- pipeline

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

/// Provenance for a full pipeline run: versions, seeds, artifact
/// checksums, and stage wall times. This file is the one pipeline output
/// that legitimately differs between repeated runs (timings).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub worker_count: usize,
    pub encoder_checksum: String,
    pub artifacts: BTreeMap<String, ArtifactRecord>,
    pub wall_seconds: BTreeMap<String, f64>,
}

fn record_artifact(
    manifest: &mut RunManifest,
    name: &str,
    path: &Path,
) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    manifest.artifacts.insert(
        name.to_string(),
        ArtifactRecord {
            path: path.display().to_string(),
            sha256: util::sha256_hex(&bytes),
        },
    );
    Ok(())
}

/// Run the three phases end to end: extract the baseline and train the
/// encoder, extract the reference and fit the K centers, then score every
/// test scan. Identical config + seed reproduce identical reports and
/// checkpoints byte for byte.
pub fn cmd_pipeline(config: &RunConfig, config_hash: &str) -> Result<RunManifest> {
    config.validate()?;
    util::init_workers();
    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.clone(), e))?;
    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash.to_string(),
        seed: config.seed,
        worker_count: util::worker_count(),
        encoder_checksum: String::new(),
        artifacts: BTreeMap::new(),
        wall_seconds: BTreeMap::new(),
    };

    // phase 1: baseline extraction + representation training
    let baseline_bin = out.join("baseline.patches.bin");
    let (baseline, wall) = util::timed(|| -> Result<PatchDataset> {
        let scan = load_scan(&config.paths.baseline_scan)?;
        let ds = extract_dataset(&scan, &config.extraction)?;
        save_dataset(&ds, &baseline_bin)?;
        Ok(ds)
    });
    let baseline = baseline?;
    manifest.wall_seconds.insert("extract_baseline".into(), wall);

    let mut train_cfg = config.training.clone();
    train_cfg.seed = util::derive_seed(config.seed, "train");
    let encoder_path = out.join("encoder.ckpt");
    let log_path = out.join("training_log.csv");
    let (trained, wall) = util::timed(|| -> Result<EncoderModel> {
        let (model, log) = train_encoder(&baseline, &train_cfg)?;
        model.save(&encoder_path)?;
        log.save_csv(&log_path)?;
        Ok(model)
    });
    let encoder = trained?;
    manifest.wall_seconds.insert("train_encoder".into(), wall);
    manifest.encoder_checksum = encoder.checksum();

    // phase 2: reference characterization
    let reference_bin = out.join("reference.patches.bin");
    let (reference, wall) = util::timed(|| -> Result<PatchDataset> {
        let dir = config
            .paths
            .reference_scan
            .as_ref()
            .unwrap_or(&config.paths.baseline_scan);
        let scan = load_scan(dir)?;
        let ds = extract_dataset(&scan, &config.extraction)?;
        save_dataset(&ds, &reference_bin)?;
        Ok(ds)
    });
    let reference = reference?;
    manifest.wall_seconds.insert("extract_reference".into(), wall);

    let cluster_path = out.join("cluster.model");
    let (cluster, wall) = util::timed(|| -> Result<ClusterModel> {
        let model = fit_reference(
            &encoder,
            &reference,
            config.cluster.k,
            config.cluster.t,
            util::derive_seed(config.seed, "cluster"),
        )?;
        model.save(&cluster_path)?;
        Ok(model)
    });
    let cluster = cluster?;
    manifest.wall_seconds.insert("fit_cluster".into(), wall);

    // phase 3: evaluation
    let inputs: Vec<EvalInput> = config
        .paths
        .test_scans
        .iter()
        .map(|p| EvalInput::detect(p.clone()))
        .collect();
    let (reports, wall) = util::timed(|| -> Result<Vec<REIReport>> {
        cmd_eval(
            &inputs,
            &encoder,
            &cluster,
            &config.extraction,
            &config.eval,
            config.seed,
            out,
            config_hash,
            false,
        )
    });
    let _reports = reports?;
    manifest.wall_seconds.insert("evaluate".into(), wall);

    record_artifact(&mut manifest, "baseline_patches", &baseline_bin)?;
    record_artifact(&mut manifest, "encoder_checkpoint", &encoder_path)?;
    record_artifact(&mut manifest, "training_log", &log_path)?;
    record_artifact(&mut manifest, "reference_patches", &reference_bin)?;
    record_artifact(&mut manifest, "cluster_model", &cluster_path)?;
    record_artifact(&mut manifest, "reports_csv", &out.join("reports.csv"))?;
    record_artifact(&mut manifest, "reports_json", &out.join("reports.json"))?;

    let manifest_path = out.join("run_manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_with_defaults_and_rejects_unknown_fields() {
        let toml_text = r#"
            seed = 7
            output_dir = "/tmp/out"
            [paths]
            baseline_scan = "/tmp/scan"
        "#;
        let cfg: RunConfig = toml::from_str(toml_text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.cluster.k, 40);
        assert!((cfg.cluster.t - 0.5).abs() < 1e-12);
        assert_eq!(cfg.eval.mode, EvalMode::Batch);

        let bad = r#"
            seed = 7
            output_dir = "/tmp/out"
            frobnicate = 3
            [paths]
            baseline_scan = "/tmp/scan"
        "#;
        assert!(toml::from_str::<RunConfig>(bad).is_err());

        // seed is mandatory
        let no_seed = r#"
            output_dir = "/tmp/out"
            [paths]
            baseline_scan = "/tmp/scan"
        "#;
        assert!(toml::from_str::<RunConfig>(no_seed).is_err());
    }

    #[test]
    fn missing_scan_dir_fails_validation_with_named_field() {
        let cfg = RunConfig {
            seed: 1,
            output_dir: "/tmp/x".into(),
            paths: PathsConfig {
                baseline_scan: "/definitely/not/here".into(),
                reference_scan: None,
                test_scans: vec![],
            },
            extraction: Default::default(),
            training: Default::default(),
            cluster: Default::default(),
            eval: Default::default(),
        };
        match cfg.validate() {
            Err(Error::ConfigInvalid { field, .. }) => {
                assert_eq!(field, "paths.baseline_scan")
            }
            other => panic!("expected ConfigInvalid, got {other:?}"),
        }
    }

    #[test]
    fn report_files_carry_provenance_header() {
        let dir = tempfile::tempdir().unwrap();
        let reports = vec![REIReport {
            dataset_id: "t".into(),
            n_patches: 4,
            n_uncertain: 1,
            rei: 0.25,
            eval_wall_seconds: 0.1,
            partial: None,
        }];
        let (csv_path, json_path) =
            write_reports(dir.path(), &reports, "cafe", 9, false).unwrap();
        let text = std::fs::read_to_string(csv_path).unwrap();
        assert!(text.starts_with("# config_hash=cafe seed=9\n"));
        let set: ReportSet =
            serde_json::from_str(&std::fs::read_to_string(json_path).unwrap()).unwrap();
        assert_eq!(set.config_hash, "cafe");
        assert_eq!(set.seed, 9);
        assert_eq!(set.reports.len(), 1);
        // deterministic mode zeroes timing
        assert_eq!(set.reports[0].eval_wall_seconds, 0.0);
    }
}
