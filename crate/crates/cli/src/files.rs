//! Dataset/image manifests and run reports.

use crate::CliError;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::{Path, PathBuf};
use xdesc_core::scenarios::{Image, ImageSet};
use xdesc_core::synthetic::FamilyConfig;
use xdesc_core::{xdsc, CorrespondenceDataset};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub algo: String,
    pub path: String,
}

/// `manifest.json` written by `xdesc gen`: one XDSC file per family, all
/// holding the same patch IDs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub kind: String,
    pub seed: u64,
    pub noise_seed: u64,
    pub latent_dim: usize,
    pub n: usize,
    pub first_id: u64,
    pub families: Vec<FamilyConfig>,
    pub files: Vec<FileEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: u32,
    pub algo: String,
    pub path: String,
}

/// `images.json`: a multi-view scene. Patch IDs double as ground-truth
/// scene-point labels when `labels_from_patch_ids` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageManifest {
    pub schema_version: u32,
    pub kind: String,
    pub labels_from_patch_ids: bool,
    pub images: Vec<ImageEntry>,
}

fn check_version(found: u32, what: &str) -> Result<(), CliError> {
    if found != SCHEMA_VERSION {
        return Err(CliError::Input(format!(
            "{what}: unsupported schema_version {found} (expected {SCHEMA_VERSION})"
        )));
    }
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Input(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn resolve(manifest: &Path, rel: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(rel)
}

pub fn load_xdsc(path: &Path) -> Result<xdesc_core::DescriptorMatrix, CliError> {
    Ok(xdsc::load(path)?)
}

pub fn load_bank(path: &Path) -> Result<xdesc_core::bank::ModelBank, CliError> {
    xdesc_core::bank::ModelBank::load(path).map_err(|e| CliError::Core(format!("{}: {e}", path.display())))
}

pub fn load_pair(path: &Path) -> Result<xdesc_core::pair::PairModel, CliError> {
    xdesc_core::pair::PairModel::load(path).map_err(|e| CliError::Core(format!("{}: {e}", path.display())))
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<(Self, CorrespondenceDataset), CliError> {
        let m: DatasetManifest = read_json(path)?;
        check_version(m.schema_version, &path.display().to_string())?;
        if m.kind != "dataset" {
            return Err(CliError::Input(format!(
                "{}: kind {:?} is not a dataset",
                path.display(),
                m.kind
            )));
        }
        let sets = m
            .files
            .iter()
            .map(|f| load_xdsc(&resolve(path, &f.path)))
            .collect::<Result<Vec<_>, _>>()?;
        let ds = CorrespondenceDataset::new(sets)?;
        Ok((m, ds))
    }
}

impl ImageManifest {
    pub fn load(path: &Path) -> Result<ImageSet, CliError> {
        let m: ImageManifest = read_json(path)?;
        check_version(m.schema_version, &path.display().to_string())?;
        if m.kind != "images" {
            return Err(CliError::Input(format!(
                "{}: kind {:?} is not an image set",
                path.display(),
                m.kind
            )));
        }
        let images = m
            .images
            .iter()
            .map(|e| {
                Ok(Image {
                    image_id: e.image_id,
                    algo: e.algo.clone(),
                    descs: load_xdsc(&resolve(path, &e.path))?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let labels = m
            .labels_from_patch_ids
            .then(|| images.iter().map(|i| i.descs.patch_ids().to_vec()).collect());
        Ok(ImageSet::new(images, labels)?)
    }
}

/// Machine-readable outcome of one command. `timings` is the only part that
/// varies between identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub config: Map<String, Value>,
    pub metrics: Map<String, Value>,
    pub timings: Map<String, Value>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        Report {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            config: Map::new(),
            metrics: Map::new(),
            timings: Map::new(),
        }
    }

    pub fn config(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.config
            .insert(key.into(), serde_json::to_value(value).expect("serializable"));
        self
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.metrics
            .insert(key.into(), serde_json::to_value(value).expect("serializable"));
        self
    }

    pub fn timing(&mut self, key: &str, seconds: f64) -> &mut Self {
        self.timings.insert(key.into(), Value::from(seconds));
        self
    }

    /// Parses a report, rejecting other schema versions.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let raw: Value = serde_json::from_str(text).map_err(|e| CliError::Input(format!("report: {e}")))?;
        let version = raw
            .get("schema_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| CliError::Input("report: missing schema_version".into()))?;
        check_version(version as u32, "report")?;
        serde_json::from_value(raw).map_err(|e| CliError::Input(format!("report: {e}")))
    }
}
