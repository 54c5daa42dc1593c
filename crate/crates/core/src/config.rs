//! Run configuration files.
//!
//! A config is TOML (or JSON, by extension) with the sections `model`,
//! `hardware`, `workload`, `scheduler`, `slo`, and optionally `coverage` and
//! `output`, plus a top-level `seed`. The `model` and `hardware` sections may
//! name a separate file with `include = "path"`; keys given next to the
//! include override the included ones. Relative paths resolve against the
//! directory of the file that mentions them.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::coverage::CoverageModel;
use crate::error::{Error, Result};
use crate::types::{HardwareSpec, ModelSpec, Request, SchedulerConfig, SloSpec};
use crate::workload::{generate_requests, load_trace, WorkloadConfig};

const DEFAULT_MAX_SIM_S: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum WorkloadSource {
    Generated(WorkloadConfig),
    Trace { trace: PathBuf },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub summary: Option<PathBuf>,
    #[serde(default)]
    pub events: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub hardware: HardwareSpec,
    pub workload: WorkloadSource,
    pub scheduler: SchedulerConfig,
    pub coverage: CoverageModel,
    pub slo: SloSpec,
    pub output: OutputConfig,
    pub seed: u64,
    pub max_sim_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Toml,
    Json,
}

impl Format {
    fn of(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Toml,
        }
    }
}

fn parse_document(text: &str, format: Format, origin: &Path) -> Result<Map<String, Value>> {
    let value: Value = match format {
        Format::Toml => toml::from_str(text).map_err(|e| config_err(origin, e.to_string()))?,
        Format::Json => {
            serde_json::from_str(text).map_err(|e| config_err(origin, e.to_string()))?
        }
    };
    match value {
        Value::Object(map) => Ok(map),
        _ => Err(config_err(origin, "expected a table at the top level")),
    }
}

fn config_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_document(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_document(&text, Format::of(path), path)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads a standalone spec file such as a model or hardware description.
pub fn load_spec<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let doc = read_document(path)?;
    serde_json::from_value(Value::Object(doc)).map_err(|e| config_err(path, e.to_string()))
}

struct Loader<'a> {
    origin: &'a Path,
    base: &'a Path,
}

impl Loader<'_> {
    fn take_section(
        &self,
        doc: &mut Map<String, Value>,
        name: &str,
    ) -> Result<Option<Map<String, Value>>> {
        match doc.remove(name) {
            None => Ok(None),
            Some(Value::Object(map)) => Ok(Some(map)),
            Some(_) => Err(config_err(self.origin, format!("`{name}` must be a table"))),
        }
    }

    fn required(&self, doc: &mut Map<String, Value>, name: &str) -> Result<Map<String, Value>> {
        self.take_section(doc, name)?
            .ok_or_else(|| config_err(self.origin, format!("missing `{name}` section")))
    }

    /// Expands `include`, letting inline keys win.
    fn with_include(
        &self,
        name: &str,
        mut section: Map<String, Value>,
    ) -> Result<Map<String, Value>> {
        let Some(inc) = section.remove("include") else {
            return Ok(section);
        };
        let Value::String(rel) = inc else {
            return Err(config_err(
                self.origin,
                format!("`{name}.include` must be a path string"),
            ));
        };
        let path = resolve(self.base, Path::new(&rel));
        let mut merged = read_document(&path)?;
        merged.extend(section);
        Ok(merged)
    }

    fn typed<T: DeserializeOwned>(&self, name: &str, section: Map<String, Value>) -> Result<T> {
        serde_json::from_value(Value::Object(section))
            .map_err(|e| config_err(self.origin, format!("`{name}`: {e}")))
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, Format::of(path) == Format::Json, path, base)
    }

    /// Parses config text; `origin` labels errors and `base` anchors
    /// relative paths.
    pub fn parse(text: &str, json: bool, origin: &Path, base: &Path) -> Result<Self> {
        let format = if json { Format::Json } else { Format::Toml };
        let mut doc = parse_document(text, format, origin)?;
        let ld = Loader { origin, base };
        for name in ["model", "hardware", "workload", "scheduler", "slo"] {
            if !doc.contains_key(name) {
                return Err(config_err(origin, format!("missing `{name}` section")));
            }
        }

        let model = ld.required(&mut doc, "model")?;
        let model: ModelSpec = ld.typed("model", ld.with_include("model", model)?)?;
        let hardware = ld.required(&mut doc, "hardware")?;
        let hardware: HardwareSpec =
            ld.typed("hardware", ld.with_include("hardware", hardware)?)?;

        let mut workload = ld.required(&mut doc, "workload")?;
        let workload = match workload.remove("trace") {
            Some(Value::String(p)) if workload.is_empty() => WorkloadSource::Trace {
                trace: resolve(base, Path::new(&p)),
            },
            Some(_) => {
                return Err(config_err(
                    origin,
                    "`workload.trace` must be a path string and the only key of `workload`",
                ))
            }
            None => WorkloadSource::Generated(ld.typed("workload", workload)?),
        };

        let scheduler = ld.typed("scheduler", ld.required(&mut doc, "scheduler")?)?;
        let slo = ld.typed("slo", ld.required(&mut doc, "slo")?)?;
        let coverage = match ld.take_section(&mut doc, "coverage")? {
            Some(s) => ld.typed("coverage", s)?,
            None => CoverageModel::default(),
        };
        let mut output: OutputConfig = match ld.take_section(&mut doc, "output")? {
            Some(s) => ld.typed("output", s)?,
            None => OutputConfig::default(),
        };
        output.summary = output.summary.map(|p| resolve(base, &p));
        output.events = output.events.map(|p| resolve(base, &p));

        let seed = match doc.remove("seed") {
            Some(v) => v
                .as_u64()
                .ok_or_else(|| config_err(origin, "`seed` must be a non-negative integer"))?,
            None => return Err(config_err(origin, "missing `seed`")),
        };
        let max_sim_s = match doc.remove("max_sim_s") {
            Some(v) => v
                .as_f64()
                .ok_or_else(|| config_err(origin, "`max_sim_s` must be a number"))?,
            None => DEFAULT_MAX_SIM_S,
        };
        if let Some(key) = doc.keys().next() {
            return Err(config_err(origin, format!("unknown top-level key `{key}`")));
        }

        RunConfig {
            model,
            hardware,
            workload,
            scheduler,
            coverage,
            slo,
            output,
            seed,
            max_sim_s,
        }
        .validate()
        .map_err(|e| match e {
            Error::Invalid { field, reason } => {
                config_err(origin, format!("invalid {field}: {reason}"))
            }
            other => other,
        })
    }

    pub fn validate(self) -> Result<Self> {
        let model = self.model.validate()?;
        let hardware = self.hardware.validate()?;
        let workload = match self.workload {
            WorkloadSource::Generated(w) => WorkloadSource::Generated(w.validate()?),
            t => t,
        };
        let scheduler = self.scheduler.validate()?;
        let coverage = self.coverage.validate()?;
        let slo = self.slo.validate()?;
        if !(self.max_sim_s.is_finite() && self.max_sim_s > 0.0) {
            return Err(Error::invalid("max_sim_s", "must be > 0"));
        }
        Ok(RunConfig {
            model,
            hardware,
            workload,
            scheduler,
            coverage,
            slo,
            ..self
        })
    }

    /// The run's requests. A generated workload without its own seed uses
    /// the run seed.
    pub fn requests(&self) -> Result<Vec<Request>> {
        match &self.workload {
            WorkloadSource::Generated(w) => {
                let w = WorkloadConfig {
                    seed: Some(w.seed.unwrap_or(self.seed)),
                    ..w.clone()
                };
                Ok(generate_requests(&w))
            }
            WorkloadSource::Trace { trace } => load_trace(trace),
        }
    }
}
