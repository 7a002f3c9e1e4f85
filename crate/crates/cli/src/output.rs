use std::fs;
use std::path::{Path, PathBuf};

use crate::Failure;

/// Files produced by one command, written together or not at all.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, name: &str, contents: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), contents.into()));
    }

    pub fn add_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Numerical(format!("JSON encoding: {e}")))?;
        text.push('\n');
        self.add(name, text);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    /// Writes into a hidden sibling directory and renames it into place.
    pub fn commit(&self, target: &Path) -> Result<(), Failure> {
        if target.exists() && fs::read_dir(target).map(|mut d| d.next().is_some()).unwrap_or(true) {
            return Err(Failure::Data(format!("output directory {} exists and is not empty", target.display())));
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| io_failure(&parent, e))?;
        let name = target
            .file_name()
            .ok_or_else(|| Failure::Data(format!("invalid output directory {}", target.display())))?
            .to_string_lossy()
            .into_owned();
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        let result = self.write_all(&staging).and_then(|()| {
            if target.exists() {
                fs::remove_dir(target).map_err(|e| io_failure(target, e))?;
            }
            fs::rename(&staging, target).map_err(|e| io_failure(target, e))
        });
        if result.is_err() {
            let _ = fs::remove_dir_all(&staging);
        }
        result
    }

    fn write_all(&self, dir: &Path) -> Result<(), Failure> {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| io_failure(&path, e))?;
        }
        Ok(())
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

/// `<root>/<command>-<UTC timestamp>`, suffixed if that name is taken.
pub fn timestamped_dir(root: &Path, command: &str) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = root.join(format!("{command}-{stamp}"));
    let mut candidate = base.clone();
    let mut k = 1;
    while candidate.exists() {
        candidate = PathBuf::from(format!("{}-{k}", base.display()));
        k += 1;
    }
    candidate
}
