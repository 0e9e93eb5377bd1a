//! Pipeline validation, execution and manifests.

use std::collections::HashMap;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::time::{Duration, SystemTime};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::stages::{write_json, StageConfig};

pub const TOOL: &str = "mixkit";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    /// Where stage reports go; beside each primary output when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_dir: Option<PathBuf>,
    pub stages: Vec<StageConfig>,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::validation(format!("invalid pipeline config: {e}")))
    }

    /// Reads a config file, returning it with the directory its relative
    /// paths are resolved against.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let config = Self::from_json(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((config, absolute(&base)))
    }
}

/// Lexically normalized absolute path; nothing is read from disk.
pub fn absolute(p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_path_buf() } else { std::env::current_dir().unwrap_or_default().join(p) };
    let mut out = PathBuf::new();
    for c in joined.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn file_sha256(path: &Path) -> Result<String> {
    fs::read(path).map(|b| sha256_hex(&b)).map_err(|e| CliError::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    with_suffix(primary, ".manifest.json")
}

/// Provenance record written beside each stage's primary output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub stage: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Stage configuration as written, before path resolution.
    pub config: Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub created: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// A stage ready to run.
#[derive(Debug, Clone)]
pub struct PreparedStage {
    pub raw: StageConfig,
    pub resolved: StageConfig,
    pub report: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Plan {
    pub seed: u64,
    pub base: PathBuf,
    pub stages: Vec<PreparedStage>,
}

/// How reports are named when a report directory is set.
#[derive(Debug, Clone, Copy)]
pub enum ReportNaming {
    Indexed,
    ByKind,
}

/// Validates every stage and the data flow between them without touching
/// the filesystem beyond existence checks.
pub fn prepare(
    stages: &[StageConfig],
    seed: u64,
    base: &Path,
    report_dir: Option<&Path>,
    naming: ReportNaming,
) -> Result<Plan> {
    let report_dir = report_dir.map(|d| absolute(&base.join(d)));
    let mut prepared = Vec::with_capacity(stages.len());
    for (i, raw) in stages.iter().enumerate() {
        let label = format!("stage {} ({})", i + 1, raw.kind());
        raw.validate().map_err(|e| CliError::validation(format!("{label}: {e}")))?;
        let mut resolved = raw.clone();
        resolved.resolve(base);
        let primary = resolved.outputs()[0].to_path_buf();
        let report = match (&report_dir, naming) {
            (Some(dir), ReportNaming::Indexed) => dir.join(format!("{:02}-{}.report.json", i + 1, raw.kind())),
            (Some(dir), ReportNaming::ByKind) => dir.join(format!("{}.report.json", raw.kind())),
            (None, _) => with_suffix(&primary, ".report.json"),
        };
        prepared.push(PreparedStage { raw: raw.clone(), resolved, report });
    }

    let mut producer: HashMap<PathBuf, usize> = HashMap::new();
    for (i, stage) in prepared.iter().enumerate() {
        let primary = stage.resolved.outputs()[0];
        let mut written: Vec<PathBuf> = stage.resolved.outputs().iter().map(|p| absolute(p)).collect();
        written.push(absolute(&manifest_path(primary)));
        written.push(absolute(&stage.report));
        for path in written {
            if let Some(j) = producer.insert(path.clone(), i) {
                let msg = if i == j {
                    format!("stage {} ({}) writes {} twice", i + 1, stage.raw.kind(), path.display())
                } else {
                    format!("stages {} and {} both write {}", j + 1, i + 1, path.display())
                };
                return Err(CliError::Validation(msg));
            }
        }
    }
    for (i, stage) in prepared.iter().enumerate() {
        for input in stage.resolved.inputs() {
            let abs = absolute(input);
            match producer.get(&abs) {
                Some(&j) if j == i => {
                    return Err(CliError::validation(format!(
                        "stage {} ({}) reads and writes {}",
                        i + 1,
                        stage.raw.kind(),
                        input.display()
                    )))
                }
                Some(&j) if j > i => {
                    return Err(CliError::validation(format!(
                        "stage {} ({}) reads {} before stage {} produces it",
                        i + 1,
                        stage.raw.kind(),
                        input.display(),
                        j + 1
                    )))
                }
                Some(_) => {}
                None if abs.is_file() => {}
                None => {
                    return Err(CliError::validation(format!(
                        "stage {} ({}): missing input {}",
                        i + 1,
                        stage.raw.kind(),
                        input.display()
                    )))
                }
            }
        }
    }
    Ok(Plan { seed, base: base.to_path_buf(), stages: prepared })
}

fn display_path(path: &Path, base: &Path) -> String {
    let abs = absolute(path);
    abs.strip_prefix(base).unwrap_or(&abs).to_string_lossy().into_owned()
}

fn digests<'a>(paths: impl IntoIterator<Item = &'a Path>, base: &Path) -> Result<Vec<FileDigest>> {
    paths.into_iter().map(|p| Ok(FileDigest { path: display_path(p, base), sha256: file_sha256(p)? })).collect()
}

/// Manifest timestamp: `SOURCE_DATE_EPOCH` when set, for reproducible builds.
fn created_at() -> SystemTime {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<u64>().ok())
        .map(|secs| SystemTime::UNIX_EPOCH + Duration::from_secs(secs))
        .unwrap_or_else(SystemTime::now)
}

/// Runs one prepared stage: execute, then write its report and manifest.
pub fn run_stage(stage: &PreparedStage, seed: u64, base: &Path) -> Result<Value> {
    let kind = stage.raw.kind();
    log::info!("running {kind}");
    let inputs = digests(stage.resolved.inputs(), base)?;
    let result = stage.resolved.execute(seed)?;
    write_json(&stage.report, &json!({ "stage": kind, "seed": seed, "result": result }))?;

    let mut written: Vec<&Path> = stage.resolved.outputs();
    written.push(&stage.report);
    let config = serde_json::to_value(&stage.raw).expect("stage serialization");
    let manifest = Manifest {
        tool: TOOL.into(),
        version: VERSION.into(),
        stage: kind.into(),
        seed,
        config_sha256: sha256_hex(
            serde_json::to_string(&json!({ "seed": seed, "stage": &config })).expect("json").as_bytes(),
        ),
        config,
        inputs,
        outputs: digests(written, base)?,
        created: humantime::format_rfc3339_seconds(created_at()).to_string(),
    };
    write_json(&manifest_path(stage.resolved.outputs()[0]), &manifest)?;
    Ok(result)
}

/// Runs all stages in order.
pub fn run_plan(plan: &Plan) -> Result<Vec<Value>> {
    plan.stages.iter().map(|s| run_stage(s, plan.seed, &plan.base)).collect()
}
