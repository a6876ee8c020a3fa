//! Flat settings file for the `pipeline` subcommand.
//!
//! One `key = value` per line, `#` starts a comment, blank lines are
//! ignored. Unknown keys are rejected so typos fail loudly. Command-line
//! flags override file values.

use std::path::{Path, PathBuf};

use cda_core::io::Format;
use cda_core::{CdaError, ClusterConfig, MmdLayers, TrainConfig};

type Result<T> = std::result::Result<T, CdaError>;

/// Fully merged pipeline settings: library defaults, then the file, then
/// command-line overrides.
#[derive(Debug, Clone)]
pub struct Settings {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: Format,
    /// CSV target files carry a leading label column.
    pub csv_labeled_target: bool,
    pub train: TrainConfig,
    pub cluster: ClusterConfig,
    pub kernels: usize,
    /// FAR operating points for the closing report.
    pub far: Vec<f64>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            source: None,
            target: None,
            out: None,
            format: Format::Binary,
            csv_labeled_target: false,
            train: TrainConfig::default(),
            cluster: ClusterConfig::default(),
            kernels: 5,
            far: vec![0.01],
        }
    }
}

fn bad(path: &Path, lineno: usize, detail: impl std::fmt::Display) -> CdaError {
    CdaError::Invalid(format!("{} line {lineno}: {detail}", path.display()))
}

fn parse_num<T: std::str::FromStr>(
    path: &Path,
    lineno: usize,
    key: &str,
    value: &str,
) -> Result<T> {
    value
        .parse()
        .map_err(|_| bad(path, lineno, format!("bad value {value:?} for {key}")))
}

/// Parses a comma-separated list of floats (used for `far`).
pub fn parse_f64_list(raw: &str, what: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        let v: f64 = part
            .parse()
            .map_err(|_| CdaError::Invalid(format!("bad {what} value {part:?}")))?;
        out.push(v);
    }
    if out.is_empty() {
        return Err(CdaError::Invalid(format!("{what} list is empty")));
    }
    Ok(out)
}

/// Parses a comma-separated list of positive integers (used for `ranks`).
pub fn parse_usize_list(raw: &str, what: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        let v: usize = part
            .parse()
            .map_err(|_| CdaError::Invalid(format!("bad {what} value {part:?}")))?;
        out.push(v);
    }
    if out.is_empty() {
        return Err(CdaError::Invalid(format!("{what} list is empty")));
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Settings> {
    let content = std::fs::read_to_string(path).map_err(|e| CdaError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut s = Settings::default();
    for (idx, raw_line) in content.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            bad(
                path,
                lineno,
                format!("expected `key = value`, got {line:?}"),
            )
        })?;
        let (key, value) = (key.trim(), value.trim());
        if value.is_empty() {
            return Err(bad(path, lineno, format!("empty value for {key}")));
        }
        apply(&mut s, key, value, path, lineno)?;
    }
    Ok(s)
}

fn apply(s: &mut Settings, key: &str, value: &str, path: &Path, lineno: usize) -> Result<()> {
    match key {
        "source" => s.source = Some(PathBuf::from(value)),
        "target" => s.target = Some(PathBuf::from(value)),
        "out" => s.out = Some(PathBuf::from(value)),
        "format" => {
            s.format = match value {
                "binary" => Format::Binary,
                "csv" => Format::Csv,
                _ => {
                    return Err(bad(
                        path,
                        lineno,
                        format!("format must be binary or csv, got {value:?}"),
                    ))
                }
            }
        }
        "csv_labeled_target" => {
            s.csv_labeled_target = match value {
                "true" => true,
                "false" => false,
                _ => {
                    return Err(bad(
                        path,
                        lineno,
                        format!("csv_labeled_target must be true or false, got {value:?}"),
                    ))
                }
            }
        }
        "alpha" => s.cluster.alpha = parse_num(path, lineno, key, value)?,
        "beta" => s.cluster.beta = parse_num(path, lineno, key, value)?,
        "min_size" => s.cluster.min_component_size = parse_num(path, lineno, key, value)?,
        "materialize_cap" => s.cluster.materialize_cap = parse_num(path, lineno, key, value)?,
        "lambda" => s.train.lambda = parse_num(path, lineno, key, value)?,
        "learning_rate" => s.train.learning_rate = parse_num(path, lineno, key, value)?,
        "momentum" => s.train.momentum = parse_num(path, lineno, key, value)?,
        "iters" => s.train.max_iters = parse_num(path, lineno, key, value)?,
        "batch" => s.train.batch_size = parse_num(path, lineno, key, value)?,
        "seed" => s.train.seed = parse_num(path, lineno, key, value)?,
        "warmup_frac" => s.train.warmup_frac = parse_num(path, lineno, key, value)?,
        "plateau_window" => s.train.plateau_window = parse_num(path, lineno, key, value)?,
        "plateau_tolerance" => s.train.plateau_tolerance = parse_num(path, lineno, key, value)?,
        "mmd_layers" => {
            s.train.mmd_layers = match value {
                "last" => MmdLayers::Last,
                "last_two" => MmdLayers::LastTwo,
                _ => {
                    return Err(bad(
                        path,
                        lineno,
                        format!("mmd_layers must be last or last_two, got {value:?}"),
                    ))
                }
            }
        }
        "kernels" => s.kernels = parse_num(path, lineno, key, value)?,
        "far" => s.far = parse_f64_list(value, "far").map_err(|e| bad(path, lineno, e))?,
        _ => return Err(bad(path, lineno, format!("unknown key {key:?}"))),
    }
    Ok(())
}
