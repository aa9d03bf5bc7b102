use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record of one stage run: content hashes of what it read and
/// wrote, plus the configuration it ran with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn display_path(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Files under `dir`, recursively, sorted.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Hashes `inputs` and every file of `stage_dir` and writes the manifest.
pub fn write_manifest(root: &Path, stage: &str, stage_dir: &Path, inputs: &[PathBuf], config: serde_json::Value) -> Result<Manifest> {
    let mut input_hashes = BTreeMap::new();
    for p in inputs {
        input_hashes.insert(display_path(root, p), sha256_file(p)?);
    }
    let mut outputs = BTreeMap::new();
    for p in list_files(stage_dir)? {
        if p.file_name().is_some_and(|n| n == MANIFEST_FILE) {
            continue;
        }
        outputs.insert(display_path(root, &p), sha256_file(&p)?);
    }
    let manifest = Manifest {
        stage: stage.to_string(),
        config,
        inputs: input_hashes,
        outputs,
    };
    let path = stage_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(stage_dir: &Path) -> Result<Manifest> {
    let path = stage_dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_hashes_outputs_but_not_itself() {
        let dir = tempfile::tempdir().unwrap();
        let stage = dir.path().join("label");
        std::fs::create_dir_all(stage.join("sub")).unwrap();
        std::fs::write(stage.join("a.csv"), "x\n").unwrap();
        std::fs::write(stage.join("sub/b.json"), "{}").unwrap();
        let input = dir.path().join("in.csv");
        std::fs::write(&input, "").unwrap();
        let m = write_manifest(dir.path(), "label", &stage, &[input], serde_json::json!({"k": 1})).unwrap();
        assert_eq!(m.outputs.keys().collect::<Vec<_>>(), vec!["label/a.csv", "label/sub/b.json"]);
        assert_eq!(
            m.inputs["in.csv"],
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        let again = write_manifest(dir.path(), "label", &stage, &[dir.path().join("in.csv")], serde_json::json!({"k": 1})).unwrap();
        assert_eq!(again, m);
        assert_eq!(read_manifest(&stage).unwrap(), m);
    }
}
