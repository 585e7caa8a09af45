//! Output directories, CSV tables and run manifests.
//!
//! Every command writes into a staging directory next to the requested
//! output and only moves it into place once all files and the manifest are
//! complete, so a failed run leaves nothing behind.

use std::fs;
use std::io::Read;
use std::path::{Component, Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const RUN_MANIFEST: &str = "run-manifest.json";
pub const RUN_CONFIG: &str = "config.toml";

/// A CSV table with a fixed header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self {
            header: header.iter().map(|s| s.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width differs from header");
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

/// Shortest round-trip decimal form, so equal values give equal bytes.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    /// Digest of the sorted `sha256  path` lines of all inputs.
    pub inputs_sha256: String,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// All regular files below `dir`, as sorted `/`-separated relative paths.
pub fn files_below(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, rel: &Path, out: &mut Vec<String>) -> Result<()> {
        let here = root.join(rel);
        let entries = fs::read_dir(&here).map_err(|e| CliError::io(&here, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| CliError::io(&here, e))?;
            let ty = entry.file_type().map_err(|e| CliError::io(&entry.path(), e))?;
            let child = rel.join(entry.file_name());
            if ty.is_dir() {
                walk(root, &child, out)?;
            } else if ty.is_file() {
                let parts: Vec<String> = child
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect();
                out.push(parts.join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, Path::new(""), &mut out)?;
    out.sort();
    Ok(out)
}

pub fn combined_digest(files: &[FileDigest]) -> String {
    let mut lines: Vec<String> = files.iter().map(|f| format!("{}  {}\n", f.sha256, f.path)).collect();
    lines.sort();
    hex::encode(Sha256::digest(lines.concat().as_bytes()))
}

/// Absolute, lexically normalized form of a path that may not exist yet.
pub fn absolute(path: &Path) -> Result<PathBuf> {
    let mut existing = path.to_path_buf();
    let mut rest = Vec::new();
    loop {
        if let Ok(c) = existing.canonicalize() {
            let mut out = c;
            for part in rest.iter().rev() {
                out.push(part);
            }
            return Ok(normalize(&out));
        }
        match (existing.parent(), existing.file_name()) {
            (Some(parent), Some(name)) => {
                rest.push(name.to_os_string());
                existing = if parent.as_os_str().is_empty() { PathBuf::from(".") } else { parent.to_path_buf() };
            }
            _ => {
                let cwd = std::env::current_dir().map_err(|e| CliError::io(path, e))?;
                return Ok(normalize(&cwd.join(path)));
            }
        }
    }
}

fn normalize(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in path.components() {
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

/// Rejects an output directory that contains, or lies inside, an input.
pub fn check_disjoint(out: &Path, inputs: &[PathBuf]) -> Result<()> {
    let o = absolute(out)?;
    for input in inputs {
        let i = absolute(input)?;
        if o.starts_with(&i) || i.starts_with(&o) {
            return Err(CliError::Usage(format!(
                "output directory {} overlaps input {}",
                out.display(),
                input.display()
            )));
        }
    }
    Ok(())
}

/// Output directory under construction.
#[derive(Debug)]
pub struct Staging {
    dir: TempDir,
    target: PathBuf,
}

impl Staging {
    /// Fails if `target` is a non-empty directory, unless `replace` is set.
    pub fn new(target: &Path, replace: bool) -> Result<Self> {
        if target.exists() {
            if !target.is_dir() {
                return Err(CliError::Usage(format!("output {} is not a directory", target.display())));
            }
            let occupied = fs::read_dir(target)
                .map_err(|e| CliError::io(target, e))?
                .next()
                .is_some();
            if occupied && !replace {
                return Err(CliError::Usage(format!(
                    "output directory {} is not empty (pass --force to replace it)",
                    target.display()
                )));
            }
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| CliError::io(&parent, e))?;
        let dir = tempfile::Builder::new()
            .prefix(".ndc-staging-")
            .tempdir_in(&parent)
            .map_err(|e| CliError::io(&parent, e))?;
        Ok(Self {
            dir,
            target: target.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    /// Staging path of `rel`, with parent directories created.
    pub fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.dir.path().join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        Ok(p)
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))
    }

    pub fn write_table(&self, rel: &str, table: &Table) -> Result<()> {
        self.write(rel, &table.to_bytes())
    }

    /// Digests all staged files, writes the manifest and moves the
    /// directory into place.
    pub fn commit(self, command: &str, cfg: &RunConfig, inputs: Vec<FileDigest>) -> Result<PathBuf> {
        let root = self.dir.path().to_path_buf();
        let mut outputs = Vec::new();
        for rel in files_below(&root)? {
            outputs.push(FileDigest {
                sha256: sha256_file(&root.join(&rel))?,
                path: rel,
            });
        }
        let manifest = RunManifest {
            tool: format!("ndc {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            inputs_sha256: combined_digest(&inputs),
            inputs,
            outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        self.write(RUN_MANIFEST, text.as_bytes())?;
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(|e| CliError::io(&self.target, e))?;
        }
        let target = self.target.clone();
        fs::rename(&root, &target).map_err(|e| CliError::io(&target, e))?;
        // The directory now lives at `target`; only forget the handle.
        let _ = self.dir.keep();
        Ok(target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_bytes_are_plain_csv() {
        let mut t = Table::new(&["epoch", "f1"]);
        t.push(vec!["1".into(), num(0.5)]);
        t.push(vec!["2".into(), opt_num(None)]);
        assert_eq!(String::from_utf8(t.to_bytes()).unwrap(), "epoch,f1\n1,0.5\n2,\n");
    }

    #[test]
    fn overlap_detection() {
        let d = tempfile::tempdir().unwrap();
        let data = d.path().join("data");
        fs::create_dir_all(&data).unwrap();
        assert!(check_disjoint(&data.join("out"), std::slice::from_ref(&data)).is_err());
        assert!(check_disjoint(d.path(), std::slice::from_ref(&data)).is_err());
        assert!(check_disjoint(&d.path().join("out"), std::slice::from_ref(&data)).is_ok());
        assert!(check_disjoint(&data.join("../data/x"), &[data]).is_err());
    }

    #[test]
    fn dropped_staging_leaves_nothing() {
        let d = tempfile::tempdir().unwrap();
        let target = d.path().join("run");
        {
            let s = Staging::new(&target, false).unwrap();
            s.write("a/b.csv", b"x\n").unwrap();
        }
        assert!(!target.exists());
        assert_eq!(fs::read_dir(d.path()).unwrap().count(), 0);
    }

    #[test]
    fn commit_moves_and_lists_outputs() {
        let d = tempfile::tempdir().unwrap();
        let target = d.path().join("run");
        let s = Staging::new(&target, false).unwrap();
        s.write("metrics.csv", b"a\n1\n").unwrap();
        s.commit("test", &RunConfig::default(), Vec::new()).unwrap();
        let files = files_below(&target).unwrap();
        assert_eq!(files, vec!["metrics.csv", RUN_MANIFEST]);
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(target.join(RUN_MANIFEST)).unwrap()).unwrap();
        assert_eq!(m["outputs"][0]["path"], "metrics.csv");
        assert_eq!(m["outputs"][0]["sha256"], hex::encode(Sha256::digest(b"a\n1\n")));
    }

    #[test]
    fn occupied_target_needs_replace() {
        let d = tempfile::tempdir().unwrap();
        fs::write(d.path().join("keep.txt"), "x").unwrap();
        assert!(Staging::new(d.path(), false).is_err());
        assert!(Staging::new(d.path(), true).is_ok());
    }

    #[test]
    fn combined_digest_ignores_order() {
        let a = FileDigest { path: "a".into(), sha256: "1".into() };
        let b = FileDigest { path: "b".into(), sha256: "2".into() };
        assert_eq!(combined_digest(&[a.clone(), b.clone()]), combined_digest(&[b, a]));
    }
}
