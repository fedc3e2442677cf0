//! Experiment driver: validated configs, result records with confidence
//! intervals, concept-count sweeps, assignment exports, and comparison
//! tables.
//!
//! Every artifact is written atomically (temp file + rename in the target
//! directory), so a killed run never leaves a half-written record, and every
//! artifact carries the config hash for provenance. All writes for one run
//! happen sequentially from the driving thread; parallelism lives inside the
//! training and evaluation episode loops.

use crate::concepts::export_assignment_csv;
use crate::data::{generate_family, FamilyConfig, Split};
use crate::error::{ConfigError, CoreError};
use crate::meta::{
    evaluate_model, prepare_task, run_meta_training, Algorithm, MetricRecord, TaskResult,
    TrainSettings, TrainedModel, TrainingRun,
};
use crate::rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Environment variable naming the output root directory (CLI-resolved).
pub const OUTPUT_ROOT_ENV: &str = "COMAML_OUT";

/// z-score of the 95% two-sided normal interval.
pub const CONFIDENCE_Z: f64 = 1.96;

// ── configuration ───────────────────────────────────────────────────────────

/// Complete description of one experiment. Serialization is canonical:
/// field order is fixed and floats print exactly, so
/// serialize → parse → serialize is byte-identical and hashable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub family: FamilyConfig,
    pub train: TrainSettings,
    /// T — test episodes behind every reported mean ± half-width.
    pub eval_episodes: usize,
    pub seed: u64,
    /// Subdirectory under the output root that holds this run's artifacts.
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            algorithm: Algorithm::ComamlStatic,
            family: FamilyConfig::default(),
            train: TrainSettings::default(),
            eval_episodes: 600,
            seed: 1,
            output_dir: "runs".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate()?;
        if self.eval_episodes < 2 {
            return Err(ConfigError::Invalid(format!(
                "eval_episodes must be ≥ 2 for a confidence interval, got {}",
                self.eval_episodes
            )));
        }
        if self.algorithm == Algorithm::Comet && self.train.concepts != self.family.n_concepts {
            return Err(ConfigError::Invalid(format!(
                "comet uses the ground-truth assignment, so model concepts ({}) must equal \
                 family concepts ({})",
                self.train.concepts, self.family.n_concepts
            )));
        }
        if self.output_dir.is_empty() {
            return Err(ConfigError::Invalid("output_dir must be non-empty".into()));
        }
        Ok(())
    }

    /// Column label used by comparison tables.
    pub fn family_label(&self) -> String {
        format!("{}-concept", self.family.n_concepts)
    }
}

/// The canonical serialization that round-trips byte-identically.
pub fn canonical_json(config: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(config).expect("config serializes")
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Hash of the canonical serialization; stamps every artifact.
pub fn config_hash(config: &ExperimentConfig) -> String {
    format!("{:016x}", fnv1a64(canonical_json(config).as_bytes()))
}

// ── records ─────────────────────────────────────────────────────────────────

/// Mean ± 95% half-width over one split's evaluation episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: String,
    pub mean_accuracy: f64,
    /// `1.96 · sample_std / √episodes` (zero when episodes < 2).
    pub half_width: f64,
    pub mean_loss: f64,
    pub episodes: usize,
}

/// Folds per-episode results into a mean ± half-width report.
pub fn summarize(split: &str, results: &[TaskResult]) -> SplitReport {
    assert!(!results.is_empty(), "summarize: no episodes");
    let n = results.len() as f64;
    let mean_accuracy = results.iter().map(|r| r.query_accuracy).sum::<f64>() / n;
    let mean_loss = results.iter().map(|r| r.query_loss).sum::<f64>() / n;
    let half_width = if results.len() < 2 {
        0.0
    } else {
        let var = results
            .iter()
            .map(|r| (r.query_accuracy - mean_accuracy).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        CONFIDENCE_Z * var.sqrt() / n.sqrt()
    };
    assert!(
        (0.0..=1.0).contains(&mean_accuracy),
        "mean accuracy {mean_accuracy} outside [0,1]"
    );
    SplitReport {
        split: split.to_string(),
        mean_accuracy,
        half_width,
        mean_loss,
        episodes: results.len(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Diverged,
}

/// The reportable outcome of one experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultRecord {
    pub config_hash: String,
    pub algorithm: Algorithm,
    pub status: RunStatus,
    pub family_label: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub splits: Vec<SplitReport>,
    pub wall_clock_seconds: f64,
    pub build: String,
}

/// Equality ignores wall-clock: timing is provenance metadata, not an
/// experimental outcome, and cannot reproduce bit-for-bit.
impl PartialEq for ResultRecord {
    fn eq(&self, other: &ResultRecord) -> bool {
        self.config_hash == other.config_hash
            && self.algorithm == other.algorithm
            && self.status == other.status
            && self.family_label == other.family_label
            && self.n_way == other.n_way
            && self.k_shot == other.k_shot
            && self.q_query == other.q_query
            && self.splits == other.splits
            && self.build == other.build
    }
}

impl ResultRecord {
    /// The split report a comparison should use: "test" when present,
    /// otherwise the first one.
    pub fn primary_split(&self) -> Option<&SplitReport> {
        self.splits.iter().find(|s| s.split == "test").or_else(|| self.splits.first())
    }
}

fn build_id() -> String {
    format!("{}-{}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

fn base_record(config: &ExperimentConfig, status: RunStatus) -> ResultRecord {
    ResultRecord {
        config_hash: config_hash(config),
        algorithm: config.algorithm,
        status,
        family_label: config.family_label(),
        n_way: config.train.n_way,
        k_shot: config.train.k_shot,
        q_query: config.train.q_query,
        splits: Vec::new(),
        wall_clock_seconds: 0.0,
        build: build_id(),
    }
}

// ── file plumbing ───────────────────────────────────────────────────────────

/// Writes `bytes` to `path` via a temp file + rename, so the destination is
/// always absent or complete.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CoreError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| CoreError::Io(e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CoreError> {
    atomic_write(path, serde_json::to_string_pretty(value)?.as_bytes())
}

/// One compact JSON object per line, in series order.
pub fn write_metrics_ldjson(path: &Path, series: &[MetricRecord]) -> Result<(), CoreError> {
    let mut out = String::new();
    for record in series {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn load_record(path: &Path) -> Result<ResultRecord, CoreError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Trained parameters bundled with the exact config that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub model: TrainedModel,
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), CoreError> {
    write_json(path, checkpoint)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CoreError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Directory that holds one run's artifacts:
/// `<root>/<config.output_dir>/<algorithm>-<hash prefix>`.
pub fn run_dir(root: &Path, config: &ExperimentConfig) -> PathBuf {
    let hash = config_hash(config);
    root.join(&config.output_dir).join(format!("{}-{}", config.algorithm.id(), &hash[..8]))
}

// ── experiment driver ───────────────────────────────────────────────────────

/// Everything `run_experiment` produces, with the artifact directory.
#[derive(Debug)]
pub struct ExperimentOutput {
    pub record: ResultRecord,
    pub run: TrainingRun,
    pub dir: PathBuf,
}

/// Trains, evaluates on fresh test episodes, and writes `config.json`,
/// `metrics.ldjson`, `checkpoint.json`, and `result.json` under
/// [`run_dir`]. Invalid configs error before any compute; divergence writes
/// a partial record flagged [`RunStatus::Diverged`] and propagates the error.
pub fn run_experiment(config: &ExperimentConfig, root: &Path) -> Result<ExperimentOutput, CoreError> {
    config.validate()?;
    let family = generate_family(&config.family)?;
    let dir = run_dir(root, config);
    atomic_write(&dir.join("config.json"), canonical_json(config).as_bytes())?;

    let start = Instant::now();
    let run = match run_meta_training(config.algorithm, &family, &config.train, config.seed) {
        Ok(run) => run,
        Err(err) => {
            let mut record = base_record(config, RunStatus::Diverged);
            record.wall_clock_seconds = start.elapsed().as_secs_f64();
            write_json(&dir.join("result.json"), &record)?;
            return Err(err);
        }
    };
    write_metrics_ldjson(&dir.join("metrics.ldjson"), &run.series)?;
    save_checkpoint(
        &dir.join("checkpoint.json"),
        &Checkpoint { config: config.clone(), model: run.model.clone() },
    )?;

    let results = evaluate_model(
        config.algorithm,
        &family,
        &run.model.theta,
        &run.model.phi,
        &config.train,
        Split::Test,
        config.eval_episodes,
        config.seed,
    )?;
    let mut record = base_record(config, RunStatus::Completed);
    record.splits.push(summarize(Split::Test.tag(), &results));
    record.wall_clock_seconds = start.elapsed().as_secs_f64();
    write_json(&dir.join("result.json"), &record)?;
    Ok(ExperimentOutput { record, run, dir })
}

/// Re-evaluates a checkpoint on `episodes` seeded episodes of `split`.
/// The episode stream depends only on (seed, split, index), so every
/// algorithm is scored on the identical sequence.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    split: Split,
    episodes: usize,
    seed: u64,
) -> Result<ResultRecord, CoreError> {
    if episodes < 2 {
        return Err(ConfigError::Invalid(format!(
            "evaluation needs ≥ 2 episodes for a confidence interval, got {episodes}"
        ))
        .into());
    }
    let config = &checkpoint.config;
    let family = generate_family(&config.family)?;
    let start = Instant::now();
    let results = evaluate_model(
        config.algorithm,
        &family,
        &checkpoint.model.theta,
        &checkpoint.model.phi,
        &config.train,
        split,
        episodes,
        seed,
    )?;
    let mut record = base_record(config, RunStatus::Completed);
    record.splits.push(summarize(split.tag(), &results));
    record.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(record)
}

// ── concept-count sweep ─────────────────────────────────────────────────────

/// One sweep point: either a finished record or the error that stopped it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub concepts: usize,
    pub record: Option<ResultRecord>,
    pub error: Option<String>,
}

pub struct SweepOutput {
    pub points: Vec<SweepPoint>,
    pub dir: PathBuf,
    pub csv_path: PathBuf,
}

/// Runs `base` once per concept count, sharing the family and all episode
/// seeds, and writes a plot-ready `sweep.csv` (c, mean, half-width). A
/// failing point is recorded and the remaining points still run.
pub fn sweep_concepts(
    base: &ExperimentConfig,
    c_values: &[usize],
    root: &Path,
) -> Result<SweepOutput, CoreError> {
    if c_values.is_empty() {
        return Err(ConfigError::Invalid("sweep needs at least one concept count".into()).into());
    }
    if c_values.iter().any(|&c| c == 0) {
        return Err(ConfigError::Invalid("sweep concept counts must be ≥ 1".into()).into());
    }
    if c_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ConfigError::Invalid(format!(
            "sweep concept counts must be strictly increasing, got {c_values:?}"
        ))
        .into());
    }
    base.validate()?;

    let mut points = Vec::with_capacity(c_values.len());
    for &c in c_values {
        let mut config = base.clone();
        config.train.concepts = c;
        match run_experiment(&config, root) {
            Ok(output) => {
                points.push(SweepPoint { concepts: c, record: Some(output.record), error: None })
            }
            Err(err) => {
                points.push(SweepPoint { concepts: c, record: None, error: Some(err.to_string()) })
            }
        }
    }

    let tag = format!(
        "{:016x}",
        fnv1a64(format!("{}|{c_values:?}", canonical_json(base)).as_bytes())
    );
    let dir = root
        .join(&base.output_dir)
        .join(format!("sweep-{}-{}", base.algorithm.id(), &tag[..8]));
    let mut csv = String::from("c,mean_accuracy,half_width\n");
    for point in &points {
        if let Some(report) = point.record.as_ref().and_then(|r| r.primary_split()) {
            csv.push_str(&format!(
                "{},{},{}\n",
                point.concepts, report.mean_accuracy, report.half_width
            ));
        }
    }
    let csv_path = dir.join("sweep.csv");
    atomic_write(&csv_path, csv.as_bytes())?;
    write_json(&dir.join("sweep.json"), &points)?;
    Ok(SweepOutput { points, dir, csv_path })
}

// ── assignment export & purity ──────────────────────────────────────────────

/// How well a learned assignment recovers the generating structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentReport {
    /// "static" (per feature dim) or "vq" (per patch).
    pub mode: String,
    /// Mean over ground-truth blocks of the majority learned-concept share.
    pub purity: f64,
    pub active_concepts: usize,
    /// All items collapsed onto ≤ 1 concept — purity alone is meaningless.
    pub degenerate: bool,
    pub items: usize,
}

/// Majority-rule purity: for each ground-truth group, the share of its items
/// claimed by its most common learned concept, averaged over groups.
/// Invariant under relabeling of learned concepts.
pub fn assignment_purity(truth: &[usize], learned: &[usize]) -> AssignmentReport {
    assert_eq!(truth.len(), learned.len(), "purity: {} truth vs {} learned", truth.len(), learned.len());
    assert!(!truth.is_empty(), "purity: empty assignment");
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&t, &l) in truth.iter().zip(learned) {
        groups.entry(t).or_default().push(l);
    }
    let mut total = 0.0;
    for members in groups.values() {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &l in members {
            *counts.entry(l).or_default() += 1;
        }
        let majority = counts.values().copied().max().unwrap();
        total += majority as f64 / members.len() as f64;
    }
    let active = {
        let mut seen: Vec<usize> = learned.to_vec();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    };
    AssignmentReport {
        mode: String::new(),
        purity: total / groups.len() as f64,
        active_concepts: active,
        degenerate: active <= 1,
        items: truth.len(),
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Number of test episodes mined for patches when scoring a codebook.
const VQ_EXPORT_EPISODES: usize = 10;

/// Writes the argmax assignment (`<stem>.csv` + `<stem>.json` header +
/// `<stem>.report.json`) and scores it against the generating structure.
/// Static checkpoints export one row per feature dim; codebook checkpoints
/// export one row per patch sampled from seeded test episodes.
pub fn export_assignments(
    checkpoint: &Checkpoint,
    stem: &Path,
) -> Result<AssignmentReport, CoreError> {
    let config = &checkpoint.config;
    let family = generate_family(&config.family)?;
    let phi = &checkpoint.model.phi;

    let mut report = if let Some(raw) = phi.get("assign.logits") {
        let (d, c) = (raw.shape[0], raw.shape[1]);
        let mut rows = Vec::with_capacity(d);
        let mut learned = Vec::with_capacity(d);
        for i in 0..d {
            let probs = softmax_row(&raw.values[i * c..(i + 1) * c]);
            let (argmax, &max_prob) = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap();
            rows.push((i, argmax, max_prob));
            learned.push(argmax);
        }
        export_assignment_csv(stem, "static", c, &rows)?;
        let mut report = assignment_purity(&family.ground_truth_assignment(), &learned);
        report.mode = "static".into();
        report
    } else if let Some(raw) = phi.get("codebook.centroids") {
        let codebook = crate::concepts::Codebook::from_centroids(
            crate::tensor::Tensor::constant(raw.values.clone(), &raw.shape),
            crate::meta::VQ_COMMITMENT,
        );
        let mut truth = Vec::new();
        let mut patches = Vec::new();
        for i in 0..VQ_EXPORT_EPISODES {
            let ii = i as u64;
            let task = prepare_task(
                &family,
                Split::Test,
                config.train.n_way,
                config.train.k_shot,
                config.train.q_query,
                true,
                &mut rng::stream(config.seed, &["episode", Split::Test.tag()], &[ii]),
                &mut rng::stream(config.seed, &["patchperm", Split::Test.tag()], &[ii]),
            )?;
            for view in task
                .support_patches
                .iter()
                .flatten()
                .chain(task.query_patches.iter().flatten())
            {
                truth.extend_from_slice(&view.true_concept);
                patches.extend(view.patches.iter().cloned());
            }
        }
        let (learned, _) = crate::concepts::vq_assign(&patches, &codebook);
        let rows: Vec<(usize, usize, f64)> =
            learned.iter().enumerate().map(|(i, &j)| (i, j, 1.0)).collect();
        export_assignment_csv(stem, "vq", codebook.concepts(), &rows)?;
        let mut report = assignment_purity(&truth, &learned);
        report.mode = "vq".into();
        report
    } else {
        return Err(ConfigError::Invalid(format!(
            "checkpoint for {:?} has no assignment generator to export",
            config.algorithm.id()
        ))
        .into());
    };

    report.items = report.items.max(1);
    write_json(&stem.with_extension("report.json"), &report)?;
    Ok(report)
}

// ── comparison tables ───────────────────────────────────────────────────────

/// Rendered comparison: human-readable grid + machine-readable CSV.
pub struct ComparisonTable {
    pub text: String,
    pub csv: String,
}

/// Lays out records as rows per algorithm and columns per (family, shot),
/// marking every best-mean cell per column (ties all marked with `*`).
/// Records must agree on N and Q (and the compared split); K may vary to
/// form shot columns.
pub fn compare_table(records: &[ResultRecord]) -> Result<ComparisonTable, ConfigError> {
    if records.is_empty() {
        return Err(ConfigError::Invalid("compare needs at least one record".into()));
    }
    let (n_way, q_query) = (records[0].n_way, records[0].q_query);
    for r in records {
        if r.n_way != n_way || r.q_query != q_query {
            return Err(ConfigError::Invalid(format!(
                "mixed episode shapes: {}-way/{} query vs {}-way/{} query",
                n_way, q_query, r.n_way, r.q_query
            )));
        }
        if r.primary_split().is_none() {
            return Err(ConfigError::Invalid(format!(
                "record {} ({}) has no split summary to compare",
                r.config_hash,
                r.algorithm.id()
            )));
        }
    }
    let split_name = records[0].primary_split().unwrap().split.clone();
    if records.iter().any(|r| r.primary_split().unwrap().split != split_name) {
        return Err(ConfigError::Invalid("records compare different splits".into()));
    }

    // columns in first-seen order; rows in fixed algorithm order
    let mut columns: Vec<(String, usize)> = Vec::new();
    for r in records {
        let key = (r.family_label.clone(), r.k_shot);
        if !columns.contains(&key) {
            columns.push(key);
        }
    }
    let mut cells: BTreeMap<(usize, usize), &ResultRecord> = BTreeMap::new();
    let row_algorithms: Vec<Algorithm> = Algorithm::ALL
        .into_iter()
        .filter(|a| records.iter().any(|r| r.algorithm == *a))
        .collect();
    for r in records {
        let row = row_algorithms.iter().position(|a| *a == r.algorithm).unwrap();
        let col = columns
            .iter()
            .position(|k| *k == (r.family_label.clone(), r.k_shot))
            .unwrap();
        if cells.insert((row, col), r).is_some() {
            return Err(ConfigError::Invalid(format!(
                "duplicate record for {} on {} {}-shot",
                r.algorithm.id(),
                r.family_label,
                r.k_shot
            )));
        }
    }

    let best_mean: Vec<Option<f64>> = (0..columns.len())
        .map(|col| {
            (0..row_algorithms.len())
                .filter_map(|row| cells.get(&(row, col)))
                .map(|r| r.primary_split().unwrap().mean_accuracy)
                .fold(None, |acc: Option<f64>, m| Some(acc.map_or(m, |a| a.max(m))))
        })
        .collect();

    let headers: Vec<String> = std::iter::once("algorithm".to_string())
        .chain(columns.iter().map(|(f, k)| format!("{f} {k}-shot")))
        .collect();
    let mut grid: Vec<Vec<String>> = vec![headers];
    let mut csv = String::from(
        "algorithm,family,k_shot,split,mean_accuracy,half_width,episodes,best\n",
    );
    for (row, algorithm) in row_algorithms.iter().enumerate() {
        let mut line = vec![algorithm.id().to_string()];
        for (col, (fam, k)) in columns.iter().enumerate() {
            match cells.get(&(row, col)) {
                Some(r) => {
                    let s = r.primary_split().unwrap();
                    let best = best_mean[col] == Some(s.mean_accuracy);
                    let mark = if best { "*" } else { "" };
                    line.push(format!(
                        "{mark}{:.1} ± {:.1}",
                        100.0 * s.mean_accuracy,
                        100.0 * s.half_width
                    ));
                    csv.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        algorithm.id(),
                        fam,
                        k,
                        s.split,
                        s.mean_accuracy,
                        s.half_width,
                        s.episodes,
                        best
                    ));
                }
                None => line.push("—".to_string()),
            }
        }
        grid.push(line);
    }

    let widths: Vec<usize> = (0..grid[0].len())
        .map(|c| grid.iter().map(|row| row[c].chars().count()).max().unwrap())
        .collect();
    let mut text = String::new();
    for (i, row) in grid.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<width$}", width = w))
            .collect();
        text.push_str(line.join("  ").trim_end());
        text.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            text.push_str(&rule.join("  "));
            text.push('\n');
        }
    }
    Ok(ComparisonTable { text, csv })
}
