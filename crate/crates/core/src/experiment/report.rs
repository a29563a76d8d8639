//! Result tables and plot series across run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::{aggregate, latest_json, list_runs, read_json, InvarianceRecord, MeanSd, RunRecord};
use crate::error::io_err;
use crate::eval::mean_sd;
use crate::labels::Activity;
use crate::model::Task;
use crate::splits::Protocol;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(title: impl Into<String>, header: &[&str]) -> Self {
        Table {
            title: title.into(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!("## {}\n\n| {} |\n|", self.title, self.header.join(" | "));
        out += &"---|".repeat(self.header.len());
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "| {} |", r.join(" | "));
        }
        out
    }
}

/// One point of a per-activity MAE series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityPoint {
    pub fingerprint: String,
    pub run: String,
    pub activity: String,
    pub mean: f64,
    pub sd: f64,
}

/// One point of a per-user-count curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserCountPoint {
    pub fingerprint: String,
    pub run: String,
    pub task: Task,
    pub users: usize,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// `(run directory name, config fingerprint)` of every input run.
    pub runs: Vec<(String, String)>,
    pub tables: Vec<Table>,
    pub per_activity_mae: Vec<ActivityPoint>,
    pub per_user_count: Vec<UserCountPoint>,
}

impl Report {
    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn render(&self) -> String {
        if self.is_empty() {
            return "no runs\n".into();
        }
        let mut out = String::from("# Results\n\nRuns:\n");
        for (name, fp) in &self.runs {
            let _ = writeln!(out, "- {name} (fingerprint {fp})");
        }
        for t in &self.tables {
            out.push('\n');
            out += &t.render();
        }
        out
    }
}

/// A run directory's newest record plus its newest invariance analysis.
pub struct LoadedRun {
    pub name: String,
    pub record: RunRecord,
    pub invariance: Option<InvarianceRecord>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let path = latest_json(dir, "evaluation").unwrap_or_else(|| dir.join("record.json"));
    let record: RunRecord = read_json(&path)?;
    record.check_consistency()?;
    let invariance = match latest_json(dir, "invariance") {
        Some(p) => {
            let inv: InvarianceRecord = read_json(&p)?;
            if inv.fingerprint != record.fingerprint {
                return Err(Error::Config(format!(
                    "{} was computed for configuration {}, not {}",
                    p.display(),
                    &inv.fingerprint[..8],
                    &record.fingerprint[..8]
                )));
            }
            Some(inv)
        }
        None => None,
    };
    Ok(LoadedRun {
        name: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        record,
        invariance,
    })
}

/// Trained run directories under `output_dir`; untrained ones are skipped.
pub fn load_runs(output_dir: &Path) -> Result<Vec<LoadedRun>> {
    list_runs(output_dir, None)?
        .into_iter()
        .filter(|d| d.join("record.json").exists())
        .map(|d| load_run(&d))
        .collect()
}

fn cell(m: Option<&MeanSd>, scale: f64, digits: usize) -> String {
    match m {
        Some(m) if m.n > 0 => format!("{:.*} ± {:.*}", digits, m.mean * scale, digits, m.sd * scale),
        _ => "n/a".into(),
    }
}

fn metric_columns(task: Task) -> &'static [(&'static str, f64, usize)] {
    match task {
        Task::IdentityDependent => &[
            ("accuracy", 100.0, 2),
            ("macro_precision", 100.0, 2),
            ("macro_recall", 100.0, 2),
            ("macro_f1", 100.0, 2),
        ],
        Task::IdentityAgnostic => &[("mae", 1.0, 4), ("r2", 1.0, 4), ("cell_accuracy", 100.0, 2), ("exact_match", 100.0, 2)],
    }
}

fn primary_key(task: Task) -> &'static str {
    match task {
        Task::IdentityDependent => "macro_f1",
        Task::IdentityAgnostic => "mae",
    }
}

fn primary_scale(task: Task) -> (f64, usize) {
    match task {
        Task::IdentityDependent => (100.0, 2),
        Task::IdentityAgnostic => (1.0, 4),
    }
}

fn standard_tables(runs: &[LoadedRun]) -> Vec<Table> {
    let mut out = Vec::new();
    for task in [Task::IdentityDependent, Task::IdentityAgnostic] {
        let cols = metric_columns(task);
        let mut header = vec!["run", "name", "backbone", "environment", "band", "splits"];
        header.extend(cols.iter().map(|c| c.0));
        let mut t = Table::new(format!("Standard protocol, {task}"), &header);
        for r in runs
            .iter()
            .filter(|r| r.record.task() == task && r.record.protocol() == Protocol::Standard)
        {
            let c = &r.record.config;
            let agg = aggregate(&r.record.splits);
            let mut row = vec![
                r.name.clone(),
                c.name.clone(),
                c.model.backbone.to_string(),
                c.data.environment.to_string(),
                c.data.band.to_string(),
                r.record.splits.len().to_string(),
            ];
            row.extend(cols.iter().map(|(k, s, d)| cell(agg.get(*k), *s, *d)));
            t.rows.push(row);
        }
        if !t.rows.is_empty() {
            out.push(t);
        }
    }
    out
}

/// Per-fold rows with one column per task, plus an average row.
fn fold_table(runs: &[LoadedRun], protocol: Protocol, title: &str) -> Option<Table> {
    let mut folds: Vec<String> = Vec::new();
    let mut values: BTreeMap<(String, Task), Vec<f64>> = BTreeMap::new();
    let mut all: BTreeMap<Task, Vec<f64>> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.record.protocol() == protocol) {
        let key = primary_key(r.record.task());
        for s in &r.record.splits {
            if !folds.contains(&s.descriptor) {
                folds.push(s.descriptor.clone());
            }
            if let Some(Some(v)) = s.metrics.scalars().get(key) {
                values.entry((s.descriptor.clone(), r.record.task())).or_default().push(*v);
                all.entry(r.record.task()).or_default().push(*v);
            }
        }
    }
    if folds.is_empty() {
        return None;
    }
    let tasks = [Task::IdentityAgnostic, Task::IdentityDependent];
    let mut t = Table::new(title, &["train / test", "identity_agnostic mae", "identity_dependent macro_f1"]);
    let fmt = |task: Task, v: Option<&Vec<f64>>| match v {
        Some(v) if !v.is_empty() => {
            let (m, s) = mean_sd(v);
            let (scale, d) = primary_scale(task);
            cell(Some(&MeanSd { n: v.len(), mean: m, sd: s }), scale, d)
        }
        _ => "n/a".into(),
    };
    for f in &folds {
        let mut row = vec![f.clone()];
        row.extend(tasks.iter().map(|&task| fmt(task, values.get(&(f.clone(), task)))));
        t.rows.push(row);
    }
    let mut avg = vec!["Avg.".to_string()];
    avg.extend(tasks.iter().map(|&task| fmt(task, all.get(&task))));
    t.rows.push(avg);
    Some(t)
}

fn invariance_table(runs: &[LoadedRun]) -> Option<Table> {
    let mut t = Table::new(
        "Identity invariance of pooled features",
        &["run", "task", "backbone", "split", "users", "euclidean", "cosine"],
    );
    for r in runs {
        if let Some(inv) = &r.invariance {
            let rep = &inv.report;
            t.rows.push(vec![
                r.name.clone(),
                inv.task.to_string(),
                inv.backbone.clone(),
                inv.descriptor.clone(),
                rep.users.len().to_string(),
                format!("{:.2} ± {:.2}", rep.euclidean_mean, rep.euclidean_sd),
                format!("{:.2} ± {:.2}", rep.cosine_mean, rep.cosine_sd),
            ]);
        }
    }
    (!t.rows.is_empty()).then_some(t)
}

fn ablation_table(runs: &[LoadedRun]) -> Option<Table> {
    let mut t = Table::new(
        "Configuration variants",
        &[
            "run",
            "name",
            "task",
            "protocol",
            "backbone",
            "resolution",
            "interpolation",
            "channels",
            "warp",
            "pretrained",
            "primary",
        ],
    );
    for r in runs {
        let c = &r.record.config;
        let task = r.record.task();
        let (scale, d) = primary_scale(task);
        let agg = aggregate(&r.record.splits);
        t.rows.push(vec![
            r.name.clone(),
            c.name.clone(),
            task.to_string(),
            r.record.protocol().to_string(),
            c.model.backbone.to_string(),
            c.transform.resolution.to_string(),
            format!("{:?}", c.transform.interpolation).to_lowercase(),
            format!("{:?}", c.model.channel_strategy).to_lowercase(),
            c.transform.warp_enabled.to_string(),
            c.model.pretrained.to_string(),
            cell(agg.get(primary_key(task)), scale, d),
        ]);
    }
    (!t.rows.is_empty()).then_some(t)
}

fn series(runs: &[LoadedRun]) -> (Vec<ActivityPoint>, Vec<UserCountPoint>) {
    let mut activity = Vec::new();
    let mut users = Vec::new();
    for r in runs {
        let splits = &r.record.splits;
        for a in Activity::ALL {
            let v: Vec<f64> = splits
                .iter()
                .filter_map(|s| s.metrics.per_activity_mae.as_ref().map(|m| m[a.index()]))
                .collect();
            if v.is_empty() {
                continue;
            }
            let (mean, sd) = mean_sd(&v);
            activity.push(ActivityPoint {
                fingerprint: r.record.fingerprint.clone(),
                run: r.name.clone(),
                activity: a.name().to_string(),
                mean,
                sd,
            });
        }
        let mut by_k: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
        for s in splits {
            for (&k, g) in &s.metrics.per_user_count {
                let e = by_k.entry(k).or_default();
                e.0 += g.n;
                e.1.push(g.value);
            }
        }
        for (k, (n, v)) in by_k {
            let (mean, sd) = mean_sd(&v);
            users.push(UserCountPoint {
                fingerprint: r.record.fingerprint.clone(),
                run: r.name.clone(),
                task: r.record.task(),
                users: k,
                n,
                mean,
                sd,
            });
        }
    }
    (activity, users)
}

pub fn build_report(runs: &[LoadedRun]) -> Report {
    let mut tables = standard_tables(runs);
    tables.extend(fold_table(runs, Protocol::Luo, "Leave-users-out"));
    tables.extend(fold_table(runs, Protocol::Loeo, "Leave-one-environment-out"));
    tables.extend(invariance_table(runs));
    tables.extend(ablation_table(runs));
    let (per_activity_mae, per_user_count) = series(runs);
    Report {
        runs: runs.iter().map(|r| (r.name.clone(), r.record.fingerprint.clone())).collect(),
        tables,
        per_activity_mae,
        per_user_count,
    }
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Table {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Table {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    w.flush().map_err(io_err(path))
}

/// Renders every trained run under `output_dir` and, when there is at least
/// one, writes `report-<n>/` with markdown, JSON and CSV series.
pub fn cmd_report(output_dir: &Path) -> Result<(Option<PathBuf>, Report)> {
    let runs = load_runs(output_dir)?;
    let report = build_report(&runs);
    if report.is_empty() {
        return Ok((None, report));
    }
    let dir = (1..)
        .map(|n| output_dir.join(format!("report-{n:03}")))
        .find(|p| !p.exists())
        .expect("unbounded");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let md = dir.join("report.md");
    std::fs::write(&md, report.render()).map_err(io_err(&md))?;
    let json = dir.join("report.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report).expect("serializes")).map_err(io_err(&json))?;
    write_csv(&dir.join("per_activity_mae.csv"), &report.per_activity_mae)?;
    write_csv(&dir.join("per_user_count.csv"), &report.per_user_count)?;
    Ok((Some(dir), report))
}
