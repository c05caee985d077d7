//! JSON run configuration and dataset resolution.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use hpmixer::data::{load_csv, lookup, lookup_file, verify_registered, DatasetBundle, DatasetInfo, RawSeries, SplitKind};
use hpmixer::model::ModelConfig;
use hpmixer::trainer::TrainConfig;
use hpmixer::{Error, Result};
use log::info;
use serde::{Deserialize, Serialize};

/// Env var consulted for relative dataset paths that do not exist as given.
pub const DATA_DIR_ENV: &str = "HPMIXER_DATA_DIR";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Registered name (ETTh1, .., Traffic) or a free label.
    pub name: Option<String>,
    pub path: Option<PathBuf>,
    /// Split convention; registry's or `other` when absent.
    pub split: Option<SplitKind>,
    /// Keep only the first rows (skips the registry cross-check).
    pub max_rows: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfigFile {
    /// Parses and validates; errors name the offending key path.
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.train.validate()?;
        if cfg.dataset.name.is_none() && cfg.dataset.path.is_none() {
            return Err(Error::Config("at `dataset`: needs `name` or `path`".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn source(&self) -> Result<DataSource> {
        let d = &self.dataset;
        DataSource::resolve(d.name.as_deref(), d.path.as_deref(), d.split, d.max_rows)
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Existing path as given, else joined onto `HPMIXER_DATA_DIR`.
pub fn resolve_path(p: &Path) -> PathBuf {
    if p.exists() || p.is_absolute() {
        return p.to_path_buf();
    }
    match env::var_os(DATA_DIR_ENV) {
        Some(dir) => Path::new(&dir).join(p),
        None => p.to_path_buf(),
    }
}

/// A loaded series with its name and split convention.
#[derive(Clone, Debug)]
pub struct DataSource {
    pub name: String,
    pub series: RawSeries,
    pub kind: SplitKind,
}

impl DataSource {
    pub fn resolve(
        name: Option<&str>,
        path: Option<&Path>,
        split: Option<SplitKind>,
        max_rows: Option<usize>,
    ) -> Result<Self> {
        let file_name = path.and_then(|p| p.file_name()).and_then(|f| f.to_str());
        let info: Option<&DatasetInfo> = name.and_then(lookup).or_else(|| file_name.and_then(lookup_file));
        let path = match (path, info) {
            (Some(p), _) => resolve_path(p),
            (None, Some(i)) => resolve_path(Path::new(i.file)),
            (None, None) => {
                return Err(Error::Usage(format!(
                    "dataset `{}` is not registered; give a CSV path",
                    name.unwrap_or_default()
                )))
            }
        };
        let series = load_csv(&path, info.map(|i| i.channels))?;
        let series = match max_rows {
            Some(rows) => series.truncate(rows.min(series.len()))?,
            None => {
                if let Some(i) = info {
                    verify_registered(i, &series)?;
                }
                series
            }
        };
        let name = name
            .map(str::to_string)
            .or_else(|| info.map(|i| i.name.to_string()))
            .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "data".into());
        let kind = split.or(info.map(|i| i.kind)).unwrap_or(SplitKind::Other);
        info!("{name}: C={}, T={} from {}", series.channels(), series.len(), path.display());
        Ok(Self { name, series, kind })
    }

    /// Resolves `--data`, which is a CSV path or a registered name.
    pub fn from_arg(data: &str, split: Option<SplitKind>, max_rows: Option<usize>) -> Result<Self> {
        let p = Path::new(data);
        if lookup(data).is_some() && !p.exists() {
            Self::resolve(Some(data), None, split, max_rows)
        } else {
            Self::resolve(None, Some(p), split, max_rows)
        }
    }

    pub fn bundle(&self, lookback: usize, horizon: usize) -> Result<DatasetBundle> {
        DatasetBundle::new(&self.name, self.series.clone(), self.kind, lookback, horizon)
    }
}
