//! Run directories and the prepare / train / evaluate / analyze commands.
//!
//! A run directory `run-<fp8>-<nnn>` is created by `prepare` and only ever
//! gains files afterwards. Layout:
//!
//! ```text
//! config.toml          resolved configuration
//! summary.json         dataset summary
//! splits/split-<i>.txt split manifests
//! split-<i>/           checkpoints and train_log.json
//! record.json          RunRecord written by train
//! evaluation.json      RunRecord recomputed from checkpoints (evaluation-2.json, ...)
//! invariance.json      identity-invariance analysis (invariance-2.json, ...)
//! ```

use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig, Precision};
use crate::data::{generate_synthetic, load_manifest, DatasetManifest, MemorySource, SampleSource};
use crate::error::io_err;
use crate::eval::{evaluate, identity_invariance, mean_sd, predict, InvarianceReport, MetricReport};
use crate::model::{Model, Task};
use crate::splits::{loeo_splits, luo_splits, standard_split, Protocol, SplitManifest};
use crate::train::{fit, load_checkpoint, validation_split, FitOptions, Selection};
use crate::{Error, Result, Scalar};

/// Checkpoint metadata key carrying the experiment fingerprint.
pub const CONFIG_FINGERPRINT_KEY: &str = "config_fingerprint";

/// Samples addressed by a run, after band and environment filtering.
pub struct Dataset<T> {
    pub manifest: DatasetManifest,
    pub source: Box<dyn SampleSource<T>>,
}

pub fn load_dataset<T: Scalar>(cfg: &ExperimentConfig) -> Result<Dataset<T>> {
    let keep = |e: &crate::data::ManifestEntry| e.band == cfg.data.band && cfg.data.environment.accepts(e.environment);
    let (manifest, source): (DatasetManifest, Box<dyn SampleSource<T>>) = match cfg.data.source {
        DataSource::Synthetic => {
            let spec = cfg.data.synthetic.as_ref().expect("validated");
            let (manifest, samples) = generate_synthetic::<T>(spec)?;
            let manifest = manifest.filter(keep);
            let samples = samples.into_iter().filter(|s| manifest.get(&s.sample_id).is_some()).collect();
            (manifest, Box::new(MemorySource::new(samples)))
        }
        DataSource::Directory => {
            let manifest = load_manifest(&cfg.dataset_root()?)?.filter(keep);
            (manifest.clone(), Box::new(manifest))
        }
    };
    if manifest.is_empty() {
        return Err(Error::Config(format!(
            "no samples for band {} and environment {}",
            cfg.data.band, cfg.data.environment
        )));
    }
    Ok(Dataset { manifest, source })
}

pub fn make_splits(cfg: &ExperimentConfig, manifest: &DatasetManifest) -> Result<Vec<SplitManifest>> {
    match cfg.protocol.kind {
        Protocol::Standard => cfg
            .protocol
            .seeds
            .iter()
            .map(|&seed| standard_split(manifest, cfg.protocol.train_ratio, seed))
            .collect(),
        Protocol::Loeo => loeo_splits(manifest),
        Protocol::Luo => luo_splits(manifest),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub descriptor: String,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub fingerprint: String,
    pub n_samples: usize,
    pub by_environment: BTreeMap<String, usize>,
    pub by_band: BTreeMap<String, usize>,
    pub by_user_count: BTreeMap<usize, usize>,
    pub splits: Vec<SplitSummary>,
}

impl DatasetSummary {
    pub fn new(fingerprint: String, manifest: &DatasetManifest, splits: &[SplitManifest]) -> Self {
        let mut s = DatasetSummary {
            fingerprint,
            n_samples: manifest.len(),
            by_environment: BTreeMap::new(),
            by_band: BTreeMap::new(),
            by_user_count: BTreeMap::new(),
            splits: splits
                .iter()
                .map(|m| SplitSummary {
                    descriptor: m.descriptor.clone(),
                    n_train: m.train_ids.len(),
                    n_test: m.test_ids.len(),
                })
                .collect(),
        };
        for e in manifest.entries() {
            *s.by_environment.entry(e.environment.to_string()).or_default() += 1;
            *s.by_band.entry(e.band.to_string()).or_default() += 1;
            *s.by_user_count.entry(e.labels.occupancy()).or_default() += 1;
        }
        s
    }

    pub fn render(&self) -> String {
        let mut out = format!("fingerprint {}\nsamples {}\n", self.fingerprint, self.n_samples);
        for (k, v) in &self.by_environment {
            out += &format!("environment {k}: {v}\n");
        }
        for (k, v) in &self.by_band {
            out += &format!("band {k}: {v}\n");
        }
        for (k, v) in &self.by_user_count {
            out += &format!("users {k}: {v}\n");
        }
        for (i, s) in self.splits.iter().enumerate() {
            out += &format!("split {i} [{}]: {} train / {} test\n", s.descriptor, s.n_train, s.n_test);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub index: usize,
    pub descriptor: String,
    pub protocol: Protocol,
    pub task: Task,
    pub model_fingerprint: String,
    pub train_seed: u64,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub metrics: MetricReport,
    /// Relative to the run directory.
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fingerprint: String,
    pub config: ExperimentConfig,
    pub splits: Vec<SplitRecord>,
    /// Mean ± SD over splits of every scalar metric.
    pub aggregate: BTreeMap<String, MeanSd>,
}

/// Mean ± SD of each named scalar metric across splits; undefined values
/// are left out of their metric's sample.
pub fn aggregate(splits: &[SplitRecord]) -> BTreeMap<String, MeanSd> {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in splits {
        for (k, v) in s.metrics.scalars() {
            let entry = values.entry(k.to_string()).or_default();
            if let Some(v) = v {
                entry.push(v);
            }
        }
    }
    values
        .into_iter()
        .map(|(k, v)| {
            let (mean, sd) = mean_sd(&v);
            (k, MeanSd { n: v.len(), mean, sd })
        })
        .collect()
}

impl RunRecord {
    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn protocol(&self) -> Protocol {
        self.config.protocol.kind
    }

    /// Every split must come from this run's task and protocol.
    pub fn check_consistency(&self) -> Result<()> {
        let model_fp = self.config.model_spec().fingerprint();
        for s in &self.splits {
            if s.task != self.task() || s.protocol != self.protocol() || s.model_fingerprint != model_fp {
                return Err(Error::Config(format!(
                    "run {} split {} was produced by a different task/protocol/model ({} {} {})",
                    &self.fingerprint[..8],
                    s.index,
                    s.task,
                    s.protocol,
                    &s.model_fingerprint[..8]
                )));
            }
        }
        Ok(())
    }
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializes");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub(crate) fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// `dir/stem.json`, or the first free `dir/stem-<n>.json`.
fn fresh_json_path(dir: &Path, stem: &str) -> PathBuf {
    let first = dir.join(format!("{stem}.json"));
    if !first.exists() {
        return first;
    }
    (2..)
        .map(|n| dir.join(format!("{stem}-{n}.json")))
        .find(|p| !p.exists())
        .expect("unbounded")
}

/// Newest `stem*.json` in `dir`, by suffix number.
pub(crate) fn latest_json(dir: &Path, stem: &str) -> Option<PathBuf> {
    let first = dir.join(format!("{stem}.json"));
    if !first.exists() {
        return None;
    }
    let mut last = first;
    for n in 2.. {
        let p = dir.join(format!("{stem}-{n}.json"));
        if !p.exists() {
            break;
        }
        last = p;
    }
    Some(last)
}

fn run_prefix(fingerprint: &str) -> String {
    format!("run-{}-", &fingerprint[..8])
}

/// Run directories under `output_dir`, oldest first. With `fingerprint`,
/// only that configuration's runs.
pub fn list_runs(output_dir: &Path, fingerprint: Option<&str>) -> Result<Vec<PathBuf>> {
    if !output_dir.exists() {
        return Ok(Vec::new());
    }
    let mut runs: Vec<PathBuf> = std::fs::read_dir(output_dir)
        .map_err(io_err(output_dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            match fingerprint {
                Some(fp) => name.starts_with(&run_prefix(fp)),
                None => name.starts_with("run-"),
            }
        })
        .collect();
    runs.sort();
    Ok(runs)
}

fn create_run_dir(output_dir: &Path, fingerprint: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(output_dir).map_err(io_err(output_dir))?;
    let mut n = list_runs(output_dir, Some(fingerprint))?.len() + 1;
    loop {
        let dir = output_dir.join(format!("{}{n:03}", run_prefix(fingerprint)));
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            // a concurrent process took this number
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(io_err(&dir)(e)),
        }
    }
}

fn split_path(run: &Path, i: usize) -> PathBuf {
    run.join("splits").join(format!("split-{i}.txt"))
}

fn read_splits(run: &Path) -> Result<Vec<SplitManifest>> {
    let mut out = Vec::new();
    for i in 0.. {
        let p = split_path(run, i);
        if !p.exists() {
            break;
        }
        let f = std::fs::File::open(&p).map_err(io_err(&p))?;
        out.push(SplitManifest::read_text(BufReader::new(f))?);
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{} holds no split manifests", run.display())));
    }
    Ok(out)
}

/// Fails unless `run` was prepared from a configuration with `cfg`'s fingerprint.
fn check_run(cfg: &ExperimentConfig, run: &Path) -> Result<()> {
    let summary: DatasetSummary = read_json(&run.join("summary.json"))?;
    if summary.fingerprint != cfg.fingerprint() {
        return Err(Error::Config(format!(
            "{} belongs to configuration {}, not {}",
            run.display(),
            &summary.fingerprint[..8],
            &cfg.fingerprint()[..8]
        )));
    }
    Ok(())
}

/// Creates a run directory with the resolved config, the dataset summary
/// and the split manifests.
pub fn cmd_prepare(cfg: &ExperimentConfig) -> Result<(PathBuf, DatasetSummary)> {
    let fingerprint = cfg.fingerprint();
    // the dataset and splits are computed before any directory is created
    let (manifest, splits) = match cfg.precision {
        Precision::F32 => {
            let d = load_dataset::<f32>(cfg)?;
            let s = make_splits(cfg, &d.manifest)?;
            (d.manifest, s)
        }
        Precision::F64 => {
            let d = load_dataset::<f64>(cfg)?;
            let s = make_splits(cfg, &d.manifest)?;
            (d.manifest, s)
        }
    };
    let summary = DatasetSummary::new(fingerprint.clone(), &manifest, &splits);
    let run = create_run_dir(&cfg.output_dir, &fingerprint)?;
    let config_path = run.join("config.toml");
    let text = format!("# fingerprint {fingerprint}\n{}", cfg.to_toml());
    std::fs::write(&config_path, text).map_err(io_err(&config_path))?;
    write_json(&run.join("summary.json"), &summary)?;
    let dir = run.join("splits");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for (i, s) in splits.iter().enumerate() {
        let p = split_path(&run, i);
        let mut buf = format!("# fingerprint {fingerprint}\n").into_bytes();
        s.write_text(&mut buf).map_err(io_err(&p))?;
        std::fs::write(&p, buf).map_err(io_err(&p))?;
    }
    log::info!("prepared {}", run.display());
    Ok((run, summary))
}

/// Trains one model per split, evaluates it on the split's test ids and
/// writes `record.json`. Without `run`, the newest prepared-but-untrained run
/// of this configuration is used, or a new one is prepared.
pub fn cmd_train(cfg: &ExperimentConfig, run: Option<&Path>) -> Result<(PathBuf, RunRecord)> {
    // fails fast on missing pretrained weights, before any directory work
    match cfg.precision {
        Precision::F32 => drop(Model::<f32>::new(cfg.model_spec())?),
        Precision::F64 => drop(Model::<f64>::new(cfg.model_spec())?),
    }
    let run = match run {
        Some(r) => r.to_path_buf(),
        None => {
            let pending = list_runs(&cfg.output_dir, Some(&cfg.fingerprint()))?
                .into_iter()
                .rev()
                .find(|r| !r.join("record.json").exists());
            match pending {
                Some(r) => r,
                None => cmd_prepare(cfg)?.0,
            }
        }
    };
    check_run(cfg, &run)?;
    if run.join("record.json").exists() {
        return Err(Error::Config(format!("{} is already trained", run.display())));
    }
    let record = match cfg.precision {
        Precision::F32 => train_run::<f32>(cfg, &run)?,
        Precision::F64 => train_run::<f64>(cfg, &run)?,
    };
    write_json(&run.join("record.json"), &record)?;
    Ok((run, record))
}

fn train_run<T: Scalar>(cfg: &ExperimentConfig, run: &Path) -> Result<RunRecord> {
    let data = load_dataset::<T>(cfg)?;
    let splits = read_splits(run)?;
    let mut metadata = BTreeMap::new();
    metadata.insert(CONFIG_FINGERPRINT_KEY.to_string(), cfg.fingerprint());
    let mut records = Vec::new();
    for (i, split) in splits.iter().enumerate() {
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = cfg.train.seed + i as u64;
        let (train_ids, val_ids) = validation_split(&split.train_ids, train_cfg.validation_fraction, train_cfg.seed);
        let mut model = Model::<T>::new(cfg.model_spec())?;
        let dir = run.join(format!("split-{i}"));
        log::info!("split {i} [{}]: {} train, {} validation", split.descriptor, train_ids.len(), val_ids.len());
        let opts = FitOptions {
            checkpoint_dir: Some(dir.clone()),
            metadata: metadata.clone(),
            ..FitOptions::default()
        };
        let log = fit(&mut model, data.source.as_ref(), &train_ids, &val_ids, &train_cfg, &cfg.transform, &opts)?;
        let log_path = dir.join("train_log.json");
        write_json(&log_path, &log)?;
        let checkpoint = match (log.selected, &log.best_checkpoint, &log.last_checkpoint) {
            (Some(Selection::Best), Some(best), _) => best.clone(),
            (_, _, Some(last)) => last.clone(),
            _ => return Err(Error::Config("training produced no checkpoint".into())),
        };
        let p = predict(
            &mut model,
            data.source.as_ref(),
            &split.test_ids,
            &cfg.transform,
            cfg.evaluation.batch_size,
        )?;
        let metrics = evaluate(cfg.task, &p, cfg.train.macro_include_absent)?;
        log::info!("split {i}: primary metric {:.5}", metrics.primary());
        records.push(SplitRecord {
            index: i,
            descriptor: split.descriptor.clone(),
            protocol: split.protocol,
            task: cfg.task,
            model_fingerprint: model.fingerprint(),
            train_seed: train_cfg.seed,
            n_train: train_ids.len(),
            n_validation: val_ids.len(),
            n_test: split.test_ids.len(),
            metrics,
            checkpoint: checkpoint.strip_prefix(run).unwrap_or(&checkpoint).to_path_buf(),
            train_log: log_path.strip_prefix(run).unwrap_or(&log_path).to_path_buf(),
        });
    }
    Ok(RunRecord {
        fingerprint: cfg.fingerprint(),
        config: cfg.clone(),
        aggregate: aggregate(&records),
        splits: records,
    })
}

fn trained_run(cfg: &ExperimentConfig, run: Option<&Path>) -> Result<(PathBuf, RunRecord)> {
    let run = match run {
        Some(r) => r.to_path_buf(),
        None => list_runs(&cfg.output_dir, Some(&cfg.fingerprint()))?
            .into_iter()
            .rev()
            .find(|r| r.join("record.json").exists())
            .ok_or_else(|| Error::Config(format!("no trained run under {}", cfg.output_dir.display())))?,
    };
    check_run(cfg, &run)?;
    let record: RunRecord = read_json(&run.join("record.json"))?;
    record.check_consistency()?;
    Ok((run, record))
}

fn restore<T: Scalar>(cfg: &ExperimentConfig, run: &Path, split: &SplitRecord) -> Result<Model<T>> {
    let path = run.join(&split.checkpoint);
    if !path.exists() {
        return Err(Error::Checkpoint {
            path,
            message: "checkpoint file is missing".into(),
        });
    }
    let mut model = Model::<T>::new(cfg.model_spec())?;
    let meta = load_checkpoint(&path, &mut model, None)?;
    match meta.extra.get(CONFIG_FINGERPRINT_KEY) {
        Some(fp) if *fp == cfg.fingerprint() => Ok(model),
        found => Err(Error::Fingerprint {
            path,
            expected: cfg.fingerprint(),
            found: found.cloned().unwrap_or_default(),
        }),
    }
}

/// Recomputes every split's metrics from the persisted checkpoints and
/// writes a fresh `evaluation*.json`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, run: Option<&Path>) -> Result<(PathBuf, RunRecord)> {
    let (run, record) = trained_run(cfg, run)?;
    let evaluated = match cfg.precision {
        Precision::F32 => evaluate_run::<f32>(cfg, &run, record)?,
        Precision::F64 => evaluate_run::<f64>(cfg, &run, record)?,
    };
    let path = fresh_json_path(&run, "evaluation");
    write_json(&path, &evaluated)?;
    Ok((path, evaluated))
}

fn evaluate_run<T: Scalar>(cfg: &ExperimentConfig, run: &Path, mut record: RunRecord) -> Result<RunRecord> {
    let data = load_dataset::<T>(cfg)?;
    let splits = read_splits(run)?;
    for s in &mut record.splits {
        let manifest = splits
            .get(s.index)
            .ok_or_else(|| Error::Config(format!("split {} has no manifest", s.index)))?;
        let mut model = restore::<T>(cfg, run, s)?;
        let p = predict(
            &mut model,
            data.source.as_ref(),
            &manifest.test_ids,
            &cfg.transform,
            cfg.evaluation.batch_size,
        )?;
        s.metrics = evaluate(cfg.task, &p, cfg.train.macro_include_absent)?;
    }
    record.aggregate = aggregate(&record.splits);
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceRecord {
    pub fingerprint: String,
    pub task: Task,
    pub backbone: String,
    pub split: usize,
    pub descriptor: String,
    pub report: InvarianceReport,
}

/// Identity-invariance of the pooled features on one split's test ids.
pub fn cmd_analyze(cfg: &ExperimentConfig, run: Option<&Path>) -> Result<(PathBuf, InvarianceRecord)> {
    let (run, record) = trained_run(cfg, run)?;
    let split = record
        .splits
        .get(cfg.evaluation.analyze_split)
        .ok_or_else(|| Error::Config(format!("run has no split {}", cfg.evaluation.analyze_split)))?;
    let report = match cfg.precision {
        Precision::F32 => analyze_split::<f32>(cfg, &run, split)?,
        Precision::F64 => analyze_split::<f64>(cfg, &run, split)?,
    };
    let out = InvarianceRecord {
        fingerprint: cfg.fingerprint(),
        task: cfg.task,
        backbone: cfg.model.backbone.to_string(),
        split: split.index,
        descriptor: split.descriptor.clone(),
        report,
    };
    let path = fresh_json_path(&run, "invariance");
    write_json(&path, &out)?;
    Ok((path, out))
}

fn analyze_split<T: Scalar>(cfg: &ExperimentConfig, run: &Path, split: &SplitRecord) -> Result<InvarianceReport> {
    let data = load_dataset::<T>(cfg)?;
    let manifest = read_splits(run)?
        .into_iter()
        .nth(split.index)
        .ok_or_else(|| Error::Config(format!("split {} has no manifest", split.index)))?;
    let mut model = restore::<T>(cfg, run, split)?;
    let p = predict(
        &mut model,
        data.source.as_ref(),
        &manifest.test_ids,
        &cfg.transform,
        cfg.evaluation.batch_size,
    )?;
    identity_invariance(p.features.view(), &p.annotations)
}
