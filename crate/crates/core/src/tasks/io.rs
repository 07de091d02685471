//! On-disk suite format: `train/`, `validation/` and `test/` directories of
//! one-JSON-document-per-task, plus `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Split, TaskDataset, TaskSuite};
use crate::diffmath::Matrix;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub task_id: String,
    pub features: Vec<Vec<f64>>,
    pub responses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub provenance: serde_json::Value,
    pub counts: Counts,
}

fn load_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl TaskFile {
    fn from_task(task: &TaskDataset) -> Self {
        TaskFile {
            task_id: task.task_id.clone(),
            features: (0..task.len()).map(|i| task.features.row(i).to_vec()).collect(),
            responses: task.responses.clone(),
            meta: task.meta.clone(),
        }
    }

    fn into_task(self, path: &Path) -> Result<TaskDataset> {
        let dim = self.features.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(load_error(path, "features must be a nonempty list of nonempty rows"));
        }
        for (i, row) in self.features.iter().enumerate() {
            if row.len() != dim {
                return Err(load_error(
                    path,
                    format!("row {i} has {} features, expected {dim}", row.len()),
                ));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(load_error(path, format!("row {i}, column {j}: non-finite feature")));
            }
        }
        if self.responses.len() != self.features.len() {
            return Err(load_error(
                path,
                format!(
                    "{} feature rows but {} responses",
                    self.features.len(),
                    self.responses.len()
                ),
            ));
        }
        if let Some(i) = self.responses.iter().position(|v| !v.is_finite()) {
            return Err(load_error(path, format!("row {i}: non-finite response")));
        }
        let features = Matrix::from_rows(&self.features)?;
        let mut task = TaskDataset::new(self.task_id, features, self.responses)
            .map_err(|e| load_error(path, e.to_string()))?;
        task.meta = self.meta;
        Ok(task)
    }
}

pub fn save_task(task: &TaskDataset, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&TaskFile::from_task(task))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_task(path: &Path) -> Result<TaskDataset> {
    let text = fs::read_to_string(path).map_err(|e| load_error(path, e.to_string()))?;
    let file: TaskFile = serde_json::from_str(&text).map_err(|e| load_error(path, e.to_string()))?;
    file.into_task(path)
}

fn file_name(index: usize, task_id: &str) -> String {
    let safe: String = task_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{index:04}_{safe}.json")
}

/// Writes `suite` under `dir`, creating it if needed.
pub fn save_suite(suite: &TaskSuite, dir: &Path) -> Result<()> {
    suite.validate()?;
    fs::create_dir_all(dir)?;
    for split in Split::ALL {
        let sub = dir.join(split.dir_name());
        fs::create_dir_all(&sub)?;
        for (i, task) in suite.split(split).iter().enumerate() {
            save_task(task, &sub.join(file_name(i, &task.task_id)))?;
        }
    }
    let manifest = Manifest {
        seed: suite.seed,
        provenance: suite.provenance.clone(),
        counts: Counts {
            train: suite.train.len(),
            validation: suite.validation.len(),
            test: suite.test.len(),
        },
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn task_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| load_error(dir, e.to_string()))? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads and validates a suite directory. `manifest.json` is optional; when
/// absent the suite seed is 0.
pub fn load_suite(dir: &Path) -> Result<TaskSuite> {
    if !dir.is_dir() {
        return Err(load_error(dir, "not a directory"));
    }
    let mut splits: Vec<Vec<TaskDataset>> = Vec::new();
    for split in Split::ALL {
        let tasks = task_files(&dir.join(split.dir_name()))?
            .iter()
            .map(|p| load_task(p))
            .collect::<Result<Vec<_>>>()?;
        splits.push(tasks);
    }
    if splits.iter().all(Vec::is_empty) {
        return Err(load_error(dir, "no tasks found"));
    }
    let manifest_path = dir.join(MANIFEST);
    let manifest: Option<Manifest> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path)?;
        Some(serde_json::from_str(&text).map_err(|e| load_error(&manifest_path, e.to_string()))?)
    } else {
        None
    };
    let test = splits.pop().unwrap_or_default();
    let validation = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    if let Some(m) = &manifest {
        let found = (train.len(), validation.len(), test.len());
        let expected = (m.counts.train, m.counts.validation, m.counts.test);
        if found != expected {
            return Err(load_error(
                &manifest_path,
                format!("manifest counts {expected:?} do not match files found {found:?}"),
            ));
        }
    }
    let suite = TaskSuite {
        train,
        validation,
        test,
        seed: manifest.as_ref().map_or(0, |m| m.seed),
        provenance: manifest
            .map(|m| m.provenance)
            .unwrap_or_else(|| serde_json::json!({ "source": dir.display().to_string() })),
    };
    suite.validate().map_err(|e| load_error(dir, e.to_string()))?;
    Ok(suite)
}
