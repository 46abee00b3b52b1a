//! Success-rate tables over run directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::episode::EpisodeLog;
use super::Method;
use crate::error::{Error, Result};

pub const SUMMARY_SCHEMA: &str = "summary/1";
pub const CSV_HEADER: &str = "method,successes,trials,rate";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
    pub failure_modes: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub methods: Vec<MethodSummary>,
}

impl Summary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for m in &self.methods {
            out.push_str(&format!("{},{},{},{}\n", m.method.as_str(), m.successes, m.trials, m.rate));
        }
        out
    }
}

/// Aggregates logs per method, in method order.
pub fn summarize<'a>(logs: impl IntoIterator<Item = &'a EpisodeLog>) -> Summary {
    let mut by: BTreeMap<Method, MethodSummary> = BTreeMap::new();
    for log in logs {
        let m = by.entry(log.method).or_insert_with(|| MethodSummary {
            method: log.method,
            successes: 0,
            trials: 0,
            rate: 0.0,
            failure_modes: BTreeMap::new(),
        });
        m.trials += 1;
        if log.success {
            m.successes += 1;
        } else if let Some(f) = &log.failure_mode {
            *m.failure_modes.entry(f.clone()).or_default() += 1;
        }
    }
    let methods = by
        .into_values()
        .map(|mut m| {
            m.rate = m.successes as f64 / m.trials as f64;
            m
        })
        .collect();
    Summary {
        schema: SUMMARY_SCHEMA.into(),
        methods,
    }
}

/// Every `log.json` at depth two or three under `runs` (`RUN/ep_N/log.json` or
/// `ep_N/log.json`), sorted by path.
pub fn find_logs(runs: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let runs = runs.as_ref();
    if !runs.is_dir() {
        return Err(Error::FixtureMissing(format!("runs directory {}", runs.display())));
    }
    let mut found = Vec::new();
    let mut stack = vec![(runs.to_path_buf(), 0)];
    while let Some((dir, depth)) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() && depth < 2 {
                stack.push((path, depth + 1));
            } else if path.file_name().is_some_and(|n| n == "log.json") {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn load_logs(runs: impl AsRef<Path>) -> Result<Vec<EpisodeLog>> {
    find_logs(runs)?
        .into_iter()
        .map(|p| EpisodeLog::from_json(&std::fs::read_to_string(p)?))
        .collect()
}
